"""
Synthetic dataset generation and loading.

A dataset directory holds:
    dataset.yaml   generation parameters and task list
    manifest.csv   one row per slide: slide_id, path, n_tiles, one column per task
    bags/          one .prwk bag file per slide
"""
import functools
import hashlib
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import yaml

from path_rwkv.core.mtl_heads import LabelSet, TaskSpec
from path_rwkv.data.bag_format import BAG_SUFFIX, read_bag, write_bag
from path_rwkv.data.synthetic import SyntheticSlideSpec, generate_slide, task_specs
from path_rwkv.data.tiles import StubEmbedder, TileBag, filter_tiles, row_major_order
from path_rwkv.utils.errors import ConfigError, DatasetError
from path_rwkv.utils.general import derive_seed
from path_rwkv.utils.logging_setup import LogCallback, make_log

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.csv"
# bags kept in memory per dataset (shared by its subsets and task views)
BAG_CACHE_SIZE = 64
META_NAME = "dataset.yaml"
BAG_DIR = "bags"
BASE_COLUMNS = ["slide_id", "path", "n_tiles"]


@dataclass
class DatasetSpec:
    """Parameters of a generated dataset."""

    n_slides: int = 200
    grid_w: int = 48
    grid_h: int = 48
    tile_px: int = 16
    witness_rate: float = 0.05
    positive_fraction: float = 0.5
    noise_sigma: float = 0.05
    label_missing_rate: float = 0.0
    coverage_thresh: float = 0.5
    var_thresh: float = 0.01
    in_dim: int = 384
    embedder_seed: int = 1234
    seed: int = 0
    tasks: Tuple[str, ...] = ("neoplasia", "tier", "fraction", "opacity")

    def validate(self) -> None:
        if self.n_slides < 1:
            raise ConfigError(f"n_slides must be >= 1, got {self.n_slides}")
        if not 0.0 <= self.positive_fraction <= 1.0:
            raise ConfigError(f"positive_fraction must be in [0, 1], got {self.positive_fraction}")
        task_specs(self.tasks)

    @classmethod
    def from_run_config(cls, config: Any) -> "DatasetSpec":
        names = [f for f in cls.__dataclass_fields__ if f != "tasks"]
        values = {name: getattr(config, name) for name in names}
        return cls(tasks=tuple(config.tasks), **values)

    def to_dict(self) -> Dict[str, Any]:
        values = asdict(self)
        values["tasks"] = list(self.tasks)
        return values


@dataclass
class SlideRecord:
    """
    One manifest row.

    Attributes:
        slide_id: Slide identifier (bag file stem)
        path: Bag path relative to the dataset root
        n_tiles: Tiles stored in the bag
        labels: Per-task optional labels
    """

    slide_id: str
    path: str
    n_tiles: int
    labels: LabelSet = field(default_factory=LabelSet)


# ===== Generation =====

def slide_spec_for(spec: DatasetSpec, index: int) -> SyntheticSlideSpec:
    """
    Per-slide generation parameters.

    A slide is positive with probability positive_fraction; positive slides use a
    witness rate drawn from [0.2, 1.8] x witness_rate (clipped to 1), negative slides 0.
    """
    rng = np.random.default_rng(derive_seed(spec.seed, "slide", index))
    positive = rng.random() < spec.positive_fraction
    rate = min(1.0, spec.witness_rate * float(rng.uniform(0.2, 1.8))) if positive else 0.0
    return SyntheticSlideSpec(
        grid_w=spec.grid_w,
        grid_h=spec.grid_h,
        tile_px=spec.tile_px,
        witness_rate=rate,
        noise_sigma=spec.noise_sigma,
        seed=derive_seed(spec.seed, "pixels", index),
        label_missing_rate=spec.label_missing_rate,
        tasks=tuple(spec.tasks),
    )


def build_slide(spec: DatasetSpec, index: int, root: str) -> SlideRecord:
    """Generate, filter, embed and store slide `index`; returns its manifest record."""
    slide_id = f"slide_{index:05d}"
    slide = generate_slide(slide_spec_for(spec, index), slide_id)
    kept = filter_tiles(slide.images, spec.coverage_thresh, spec.var_thresh)
    kept = kept[row_major_order(slide.coords[kept])]

    embedder = StubEmbedder(spec.tile_px, spec.in_dim, spec.embedder_seed)
    bag = TileBag(embedder(slide.images[kept]), slide.coords[kept], slide_id)
    rel_path = f"{BAG_DIR}/{slide_id}{BAG_SUFFIX}"
    write_bag(str(Path(root) / rel_path), bag)
    return SlideRecord(slide_id, rel_path, len(bag), LabelSet(dict(slide.labels)))


def _build_slide_job(job: Tuple[DatasetSpec, int, str]) -> SlideRecord:
    return build_slide(*job)


def generate_dataset(
    out_dir: str,
    spec: DatasetSpec,
    workers: int = 1,
    force: bool = False,
    log_callback: Optional[LogCallback] = None,
) -> "SlideDataset":
    """
    Generate a synthetic dataset directory.

    Args:
        out_dir: Target directory
        spec: Generation parameters
        workers: Process count (slides are independent)
        force: Allow writing into a non-empty directory
        log_callback: Optional callback(message, level) for progress

    Raises:
        DatasetError: If out_dir exists, is non-empty and force is False
    """
    spec.validate()
    log = make_log(logger, log_callback)
    root = Path(out_dir)
    if root.exists() and any(root.iterdir()) and not force:
        raise DatasetError(f"Output directory {root} is not empty (use --force to overwrite)")
    (root / BAG_DIR).mkdir(parents=True, exist_ok=True)

    jobs = [(spec, i, str(root)) for i in range(spec.n_slides)]
    log(f"Generating {spec.n_slides} slides into {root} with {workers} worker(s)", "INFO")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_build_slide_job, jobs, chunksize=4))
    else:
        records = [_build_slide_job(job) for job in jobs]

    tasks = task_specs(spec.tasks)
    write_manifest(root / MANIFEST_NAME, records, tasks)
    with open(root / META_NAME, "w", encoding="utf-8") as f:
        yaml.safe_dump({"spec": spec.to_dict(), "tasks": [t.to_dict() for t in tasks]}, f, sort_keys=False)

    dataset = SlideDataset(root, tasks, spec.in_dim, records)
    log(f"Generated {len(records)} slides, {dataset.total_tiles()} tiles", "SUCCESS")
    return dataset


# ===== Manifest =====

def _label_cell(value: Optional[float], task: TaskSpec) -> Any:
    if value is None:
        return None
    return int(value) if task.is_classification else float(value)


def write_manifest(path: Path, records: Sequence[SlideRecord], tasks: Sequence[TaskSpec]) -> None:
    rows = []
    for rec in records:
        row = {"slide_id": rec.slide_id, "path": rec.path, "n_tiles": rec.n_tiles}
        row.update({t.name: _label_cell(rec.labels.get(t.name), t) for t in tasks})
        rows.append(row)
    frame = pd.DataFrame(rows, columns=BASE_COLUMNS + [t.name for t in tasks])
    for task in tasks:
        if task.is_classification:
            frame[task.name] = frame[task.name].astype("Int64")
    frame.to_csv(path, index=False, encoding="utf-8")


def read_manifest(path: Path, tasks: Sequence[TaskSpec]) -> List[SlideRecord]:
    """
    Raises:
        DatasetError: Missing file or columns, or an invalid label
    """
    if not Path(path).exists():
        raise DatasetError(f"Manifest not found: {path}")
    frame = pd.read_csv(path, dtype={"slide_id": str, "path": str}, encoding="utf-8")
    missing = [c for c in BASE_COLUMNS + [t.name for t in tasks] if c not in frame.columns]
    if missing:
        raise DatasetError(f"Manifest {path} lacks columns {missing}")

    records = []
    for row in frame.itertuples(index=False):
        values = row._asdict()
        labels = LabelSet({
            t.name: None if pd.isna(values[t.name]) else float(values[t.name]) for t in tasks
        })
        try:
            labels.validate(tasks)
        except ValueError as e:
            raise DatasetError(f"Slide {values['slide_id']}: {e}") from None
        records.append(SlideRecord(str(values["slide_id"]), str(values["path"]), int(values["n_tiles"]), labels))
    return records


# ===== Loading =====

def _read_checked(root: Path, path: str, slide_id: str, n_tiles: int) -> TileBag:
    bag = read_bag(str(root / path), slide_id)
    if len(bag) != n_tiles:
        raise DatasetError(f"Slide {slide_id}: manifest says {n_tiles} tiles, bag has {len(bag)}")
    return bag


class SlideDataset:
    """
    Slides of a dataset directory with lazily loaded bags.

    At most `cache_size` bags stay in memory (least recently used are dropped);
    subsets and task views share the cache of the dataset they came from.
    """

    def __init__(self, root: Path, tasks: Sequence[TaskSpec], in_dim: int, records: Sequence[SlideRecord],
                 loader: Optional[Callable[..., TileBag]] = None, cache_size: int = BAG_CACHE_SIZE):
        self.root = Path(root)
        self.tasks = list(tasks)
        self.in_dim = in_dim
        self.records = list(records)
        self._load = loader or functools.lru_cache(maxsize=cache_size)(functools.partial(_read_checked, self.root))

    @classmethod
    def load(cls, root: str, cache_size: int = BAG_CACHE_SIZE) -> "SlideDataset":
        """
        Raises:
            DatasetError: If the directory, metadata or manifest is missing
        """
        root_path = Path(root)
        if not root_path.is_dir():
            raise DatasetError(f"Dataset directory not found: {root_path}")
        meta_path = root_path / META_NAME
        if not meta_path.exists():
            raise DatasetError(f"Dataset metadata not found: {meta_path}")
        with open(meta_path, "r", encoding="utf-8") as f:
            meta = yaml.safe_load(f) or {}
        tasks = [TaskSpec.from_dict(t) for t in meta.get("tasks", [])]
        in_dim = int(meta.get("spec", {}).get("in_dim", 0))
        records = read_manifest(root_path / MANIFEST_NAME, tasks)
        logger.info(f"Loaded dataset {root_path}: {len(records)} slides, tasks {[t.name for t in tasks]}")
        return cls(root_path, tasks, in_dim, records, cache_size=cache_size)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[SlideRecord]:
        return iter(self.records)

    def bag(self, record: SlideRecord) -> TileBag:
        return self._load(record.path, record.slide_id, record.n_tiles)

    def cache_info(self) -> Any:
        """Hits, misses and size of the bag cache shared with this dataset."""
        return self._load.cache_info()

    def subset(self, records: Sequence[SlideRecord]) -> "SlideDataset":
        return SlideDataset(self.root, self.tasks, self.in_dim, records, self._load)

    def with_tasks(self, names: Sequence[str]) -> "SlideDataset":
        """View restricted to the given tasks (labels of other tasks ignored)."""
        by_name = {t.name: t for t in self.tasks}
        unknown = [n for n in names if n not in by_name]
        if unknown:
            raise ConfigError(f"Dataset has no task(s) {unknown}")
        view = self.subset(self.records)
        view.tasks = [by_name[n] for n in names]
        return view

    def split(self, seed: int = 0, train_fraction: float = 0.7,
              val_fraction: float = 0.1) -> Tuple["SlideDataset", "SlideDataset", "SlideDataset"]:
        """Seeded slide-level train/val/test split."""
        if train_fraction <= 0 or val_fraction < 0 or train_fraction + val_fraction > 1:
            raise ConfigError(f"Invalid split fractions {train_fraction}/{val_fraction}")
        order = np.random.default_rng(derive_seed(seed, "split")).permutation(len(self.records))
        n_train = int(round(train_fraction * len(order)))
        n_val = int(round(val_fraction * len(order)))
        pick = lambda idx: self.subset([self.records[i] for i in idx])
        return pick(order[:n_train]), pick(order[n_train:n_train + n_val]), pick(order[n_train + n_val:])

    def total_tiles(self) -> int:
        return sum(r.n_tiles for r in self.records)

    def label_summary(self) -> pd.DataFrame:
        """Per task: present label count, and class counts or value mean/std."""
        rows = []
        for task in self.tasks:
            values = [r.labels.get(task.name) for r in self.records if r.labels.get(task.name) is not None]
            row = {"task": task.name, "kind": task.kind.value, "present": len(values)}
            if task.is_classification:
                counts = np.bincount(np.asarray(values, dtype=np.int64), minlength=task.num_classes)
                row["summary"] = "/".join(str(c) for c in counts)
            else:
                row["summary"] = f"{np.mean(values):.4f}+-{np.std(values):.4f}" if values else ""
            rows.append(row)
        return pd.DataFrame(rows)

    def manifest_hash(self) -> str:
        return hashlib.sha256((self.root / MANIFEST_NAME).read_bytes()).hexdigest()[:16]
