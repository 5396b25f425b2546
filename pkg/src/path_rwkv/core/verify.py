"""
Property suite run by `path-rwkv verify`.

Each check returns a PropertyResult naming the property and, on failure, the
seed of the counterexample. Checks run in 64-bit.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd
import torch

from path_rwkv.core.aggregation import comb, infer_slide, local_summary, subset_prediction_variance
from path_rwkv.core.experiments import bench_scaling, gradient_bias_experiment, random_bag
from path_rwkv.core.metrics import auc, pearson
from path_rwkv.core.model import ModelConfig, PathRwkv, build_model, perturb_parameters
from path_rwkv.core.mtl_heads import TaskKind, TaskSpec
from path_rwkv.core.numerics import gradient_check
from path_rwkv.utils.errors import PropertyFailure
from path_rwkv.utils.general import Stopwatch, derive_seed
from path_rwkv.utils.logging_setup import LogCallback, make_log

logger = logging.getLogger(__name__)

Combine = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]

VERIFY_TASKS = [
    TaskSpec("binary", TaskKind.CLASSIFICATION, 2),
    TaskSpec("value", TaskKind.REGRESSION),
]


@dataclass
class PropertyResult:
    name: str
    passed: bool
    detail: str = ""
    seed: Optional[int] = None
    seconds: float = 0.0


def tiny_model(seed: int, embed_dim: int = 8, n_heads: int = 2, in_dim: int = 6,
               design: str = "ours", use_pe: bool = True) -> PathRwkv:
    """Small 64-bit model with perturbed (non-initial) parameters."""
    config = ModelConfig(in_dim=in_dim, embed_dim=embed_dim, depth=2, n_heads=n_heads,
                         lora_rank=4, decay_rank=4, use_pe=use_pe, mtl_design=design, tasks=list(VERIFY_TASKS))
    model = build_model(config, seed=seed).to(torch.float64)
    return perturb_parameters(model, seed=derive_seed(seed, "perturb"))


# ===== Individual properties =====

def check_gradients(seed: int = 0, n_tiles: int = 5) -> PropertyResult:
    """Every parameter: reverse-mode gradient vs central finite differences."""
    for design in ("ours", "to", "through"):
        model = tiny_model(seed, design=design)
        bag = random_bag(n_tiles, model.config.in_dim, seed=seed)
        features = torch.as_tensor(bag.features, dtype=torch.float64)

        def loss_fn(call):
            preds = call(features, bag.coords)
            return sum((p ** 2).sum() for p in preds.values())

        results = gradient_check(model, loss_fn)
        failed = [name for name, ok in results.items() if not ok]
        if failed:
            return PropertyResult("gradients", False, f"design {design}: {', '.join(failed)}", seed)
    return PropertyResult("gradients", True, f"{len(results)} parameter tensors per design, {n_tiles} tiles")


def check_chunk_exactness(n_models: int = 3, seed: int = 0, tol: float = 1e-10) -> PropertyResult:
    """Bag-wise inference with carried state equals the single-pass forward."""
    worst = 0.0
    for m in range(n_models):
        model_seed = derive_seed(seed, "chunk", m)
        model = tiny_model(model_seed, embed_dim=16, design=("ours", "to", "through")[m % 3])
        for n in (1, 13, 257):
            bag = random_bag(n, model.config.in_dim, seed=derive_seed(model_seed, n))
            with torch.no_grad():
                reference = model(bag.features, bag.coords)
            for bag_size in (1, 7, 64, n):
                result = infer_slide(bag, model, bag_size)
                diff = max(float((result.predictions[k] - reference[k]).abs().max()) for k in reference)
                worst = max(worst, diff)
                if not diff <= tol:
                    return PropertyResult("chunk_exactness", False,
                                          f"N={n} bag_size={bag_size} max diff {diff:.3e}", model_seed)
    return PropertyResult("chunk_exactness", True, f"max diff {worst:.3e}")


def check_step_equals_chunk(seed: int = 0, n: int = 19, tol: float = 1e-10) -> PropertyResult:
    """Token-by-token recurrence equals chunk mode for the backbone."""
    model = tiny_model(seed, embed_dim=16)
    bag = random_bag(n, model.config.in_dim, seed=seed)
    with torch.no_grad():
        x = model.embed(bag.features, bag.coords)
        chunk = model.backbone(x, model.initial_state())
        state = model.initial_state()
        steps = torch.stack([model.backbone_step(x[t], state) for t in range(n)])
    diff = float((chunk - steps).abs().max())
    return PropertyResult("step_equals_chunk", diff <= tol, f"max diff {diff:.3e}", None if diff <= tol else seed)


def check_comb_laws(combine: Combine = comb, n_triples: int = 1000, dim: int = 16, seed: int = 0) -> PropertyResult:
    """Associativity, commutativity, idempotence and -inf identity, bit-exact; plus fold equality."""
    gen = torch.Generator().manual_seed(derive_seed(seed, "comb"))
    identity = torch.full((dim,), float("-inf"), dtype=torch.float64)
    for i in range(n_triples):
        a, b, c = (torch.randn(dim, generator=gen, dtype=torch.float64) for _ in range(3))
        laws = {
            "associativity": torch.equal(combine(combine(a, b), c), combine(a, combine(b, c))),
            "commutativity": torch.equal(combine(a, b), combine(b, a)),
            "idempotence": torch.equal(combine(a, a), a),
            "identity": torch.equal(combine(a, identity), a),
        }
        broken = [law for law, ok in laws.items() if not ok]
        if broken:
            return PropertyResult("comb_laws", False, f"{', '.join(broken)} failed on triple {i}", seed)

    rows = torch.randn(100, dim, generator=gen, dtype=torch.float64)
    cuts = np.sort(np.random.default_rng(seed).choice(np.arange(1, 100), size=6, replace=False))
    folded = identity
    for part in np.split(np.arange(100), cuts):
        folded = combine(folded, local_summary(rows[part]))
    if not torch.equal(folded, local_summary(rows)):
        return PropertyResult("comb_laws", False, "fold over 7 bags differs from the global summary", seed)
    return PropertyResult("comb_laws", True, f"{n_triples} triples")


def check_variance_reduction(n_slides: int = 4, trials: int = 200, n_tiles: int = 300,
                             seed: int = 0) -> PropertyResult:
    """Prediction variance over random subsets does not increase with subset size; 0 at the full set."""
    sizes = [s for s in (1, 8, 64, 256) if s < n_tiles] + [n_tiles]
    model = tiny_model(derive_seed(seed, "variance"), embed_dim=16)
    totals = np.zeros(len(sizes))
    for s in range(n_slides):
        slide = random_bag(n_tiles, model.config.in_dim, seed=derive_seed(seed, "variance-slide", s))
        for i, size in enumerate(sizes):
            totals[i] += subset_prediction_variance(model, slide, size, trials, seed=derive_seed(seed, s, size))
    means = totals / n_slides
    detail = ", ".join(f"{size}:{v:.3e}" for size, v in zip(sizes, means))
    ok = means[-1] == 0.0 and all(b <= a for a, b in zip(means, means[1:]))
    return PropertyResult("variance_reduction", ok, detail, None if ok else seed)


def check_metric_oracles(n_cases: int = 50, seed: int = 0) -> PropertyResult:
    """AUC against the pairwise count and Pearson against numpy's corrcoef."""
    rng = np.random.default_rng(derive_seed(seed, "metrics"))
    for case in range(n_cases):
        scores = rng.integers(0, 5, size=20).astype(float)
        labels = np.r_[0, 1, rng.integers(0, 2, size=18)]
        pos, neg = scores[labels == 1], scores[labels == 0]
        pairwise = ((pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()) / (pos.size * neg.size)
        if abs(auc(scores, labels) - pairwise) > 1e-12:
            return PropertyResult("metric_oracles", False, f"AUC mismatch on case {case}", seed)
        x, y = rng.standard_normal(30), rng.standard_normal(30)
        if abs(pearson(x, y) - np.corrcoef(x, y)[0, 1]) > 1e-12:
            return PropertyResult("metric_oracles", False, f"Pearson mismatch on case {case}", seed)
    return PropertyResult("metric_oracles", True, f"{n_cases} cases")


def check_scaling(seed: int = 0, n_grid=(1000, 2000, 4000, 8000)) -> PropertyResult:
    """Recurrent inference is linear in N; the attention reference is quadratic; memory flat."""
    model = tiny_model(seed, embed_dim=32, in_dim=32)
    report = bench_scaling(model, n_grid, bag_size=512, repeats=2, seed=seed)
    ok = 0.8 <= report.time_slope <= 1.2 and 1.7 <= report.reference_slope <= 2.3 and report.memory_spread < 0.1
    detail = (f"time slope {report.time_slope:.2f}, reference slope {report.reference_slope:.2f}, "
              f"memory spread {report.memory_spread:.3f}")
    return PropertyResult("scaling", ok, detail, None if ok else seed)


def check_unbiasedness(seed: int = 0) -> PropertyResult:
    """Averaged sampled-bag gradients approach the full gradient like 1/sqrt(trials)."""
    report = gradient_bias_experiment(seed=seed)
    ok = abs(report.slope + 0.5) <= 0.15
    detail = (f"slope {report.slope:.3f}; squared-loss bias {report.squared_loss_bias:.3e}, "
              f"max-aggregator bias {report.max_aggregator_bias:.3e}")
    return PropertyResult("unbiasedness", ok, detail, None if ok else seed)


# ===== Suite =====

def run_verification(
    level: str = "fast",
    seed: int = 0,
    combine: Combine = comb,
    log_callback: Optional[LogCallback] = None,
) -> List[PropertyResult]:
    """Run the property suite; `full` adds the chunk sweep over 20 models, scaling and unbiasedness."""
    log = make_log(logger, log_callback)
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    checks: Dict[str, Callable[[], PropertyResult]] = {
        "gradients": lambda: check_gradients(seed),
        "chunk_exactness": lambda: check_chunk_exactness(20 if level == "full" else 3, seed),
        "step_equals_chunk": lambda: check_step_equals_chunk(seed),
        "comb_laws": lambda: check_comb_laws(combine, seed=seed),
        "variance_reduction": lambda: check_variance_reduction(
            n_slides=20 if level == "full" else 4, trials=1000 if level == "full" else 200, seed=seed),
        "metric_oracles": lambda: check_metric_oracles(seed=seed),
    }
    if level == "full":
        checks["scaling"] = lambda: check_scaling(seed)
        checks["unbiasedness"] = lambda: check_unbiasedness(seed)

    results = []
    try:
        for name, check in checks.items():
            with Stopwatch() as sw:
                result = check()
            result.seconds = round(sw.seconds, 3)
            results.append(result)
            log(f"{name}: {'PASS' if result.passed else 'FAIL'} ({result.detail})",
                "SUCCESS" if result.passed else "ERROR")
    finally:
        torch.set_default_dtype(previous)
    return results


def results_frame(results: List[PropertyResult]) -> pd.DataFrame:
    return pd.DataFrame([r.__dict__ for r in results], columns=["name", "passed", "detail", "seed", "seconds"])


def raise_on_failure(results: List[PropertyResult]) -> None:
    failed = [r for r in results if not r.passed]
    if failed:
        raise PropertyFailure("; ".join(f"{r.name} failed (seed {r.seed}): {r.detail}" for r in failed))
