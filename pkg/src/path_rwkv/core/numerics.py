"""
Numerics layer: contract-checked tensor ops over torch, parameter store with Adam,
warmup + cosine learning-rate schedule, gradient verification and tensor checkpoints.
"""
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, Optional, Tuple

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from path_rwkv.utils.binary import MAGIC, U32, ByteReader
from path_rwkv.utils.errors import ContractError, DimensionError, FormatError

logger = logging.getLogger(__name__)

PRECISIONS: Dict[str, torch.dtype] = {
    "float32": torch.float32,
    "float64": torch.float64,
}

CHECKPOINT_VERSION = 1


def dtype_of(precision: str) -> torch.dtype:
    try:
        return PRECISIONS[precision]
    except KeyError:
        raise ContractError(f"Unknown precision '{precision}', expected one of {list(PRECISIONS)}") from None


def set_precision(precision: str) -> torch.dtype:
    """
    Make `precision` the default dtype for newly created tensors and modules.

    Returns:
        The selected torch dtype
    """
    dtype = dtype_of(precision)
    torch.set_default_dtype(dtype)
    return dtype


# ===== Tensor operations =====

def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """
    Matrix product with an explicit dimension check.

    Raises:
        DimensionError: If the inner extents differ
    """
    if a.dim() < 1 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    return a @ b


def relu_squared(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x).square()


def neg_exp_exp(d: torch.Tensor) -> torch.Tensor:
    """exp(-exp(d)): maps any real decay logit into (0, 1)."""
    return torch.exp(-torch.exp(d))


_UNARY: Dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "sigmoid": torch.sigmoid,
    "tanh": torch.tanh,
    "silu": F.silu,
    "relu_squared": relu_squared,
    "exp": torch.exp,
    "neg_exp_exp": neg_exp_exp,
}

_BINARY: Dict[str, Callable[[torch.Tensor, torch.Tensor], torch.Tensor]] = {
    "add": torch.add,
    "sub": torch.sub,
    "mul": torch.mul,
}


def elementwise(op: str, x: torch.Tensor, y: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Apply a named elementwise operation; derivatives come from autograd.

    Args:
        op: One of add, sub, mul, sigmoid, tanh, silu, relu_squared, exp, neg_exp_exp
        x: First operand
        y: Second operand for binary ops (broadcastable with x)

    Raises:
        DimensionError: Non-broadcastable shapes
        ContractError: Unknown op or wrong operand count
    """
    if op in _BINARY:
        if y is None:
            raise ContractError(f"elementwise '{op}' needs two operands")
        try:
            torch.broadcast_shapes(x.shape, y.shape)
        except RuntimeError:
            raise DimensionError(
                f"elementwise '{op}': shapes {tuple(x.shape)} and {tuple(y.shape)} do not broadcast"
            ) from None
        return _BINARY[op](x, y)
    if op in _UNARY:
        if y is not None:
            raise ContractError(f"elementwise '{op}' takes one operand")
        return _UNARY[op](x)
    raise ContractError(f"Unknown elementwise op '{op}'")


def backward(loss: torch.Tensor) -> None:
    """
    Populate gradients of every parameter `loss` depends on.

    Gradients accumulate across calls until the store zeroes them.

    Raises:
        ContractError: If loss is not a scalar or does not depend on any parameter
    """
    if loss.dim() != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ContractError("backward: loss is not reachable from any parameter")
    loss.backward()


# ===== Parameter store and Adam =====

class ParamStore:
    """
    Named parameters of a module plus their Adam moments.

    Moments live in the wrapped `torch.optim.Adam` state (`exp_avg`, `exp_avg_sq`).
    Parameters without a gradient at step time are skipped, which is how
    absent-task heads stay untouched.
    """

    def __init__(
        self,
        module: nn.Module,
        lr: float = 1e-3,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.module = module
        self.params: Dict[str, nn.Parameter] = dict(module.named_parameters())
        self.optimizer = torch.optim.Adam(
            self.params.values(), lr=lr, betas=betas, eps=eps, weight_decay=weight_decay
        )
        self.step_count = 0
        self._warned: set[str] = set()

    def moments(self, name: str) -> Optional[Tuple[torch.Tensor, torch.Tensor]]:
        """Return (m, v) for a parameter, or None before its first update."""
        state = self.optimizer.state.get(self.params[name])
        if not state:
            return None
        return state["exp_avg"], state["exp_avg_sq"]

    def missing_gradients(self) -> list[str]:
        return [name for name, p in self.params.items() if p.grad is None]

    def zero_grad(self) -> None:
        self.optimizer.zero_grad(set_to_none=True)

    def set_hyperparameters(self, lr: float, betas: Tuple[float, float], eps: float) -> None:
        for group in self.optimizer.param_groups:
            group["lr"] = lr
            group["betas"] = betas
            group["eps"] = eps

    def step(self, lr: float) -> None:
        """One Adam update at learning rate `lr`, then clear gradients."""
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        for name in self.missing_gradients():
            if name not in self._warned:
                logger.warning(f"No gradient for parameter '{name}', skipping its update")
                self._warned.add(name)
            else:
                logger.debug(f"No gradient for parameter '{name}'")
        self.optimizer.step()
        self.step_count += 1
        self.zero_grad()


def adam_step(
    store: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """
    Standard bias-corrected Adam update of every parameter that has a gradient.
    """
    store.set_hyperparameters(lr, (beta1, beta2), eps)
    store.step(lr)


# ===== Learning-rate schedule =====

@dataclass(frozen=True)
class LrSchedule:
    """
    Linear warmup followed by cosine decay to `floor_factor * base_lr` at the final epoch.
    """

    base_lr: float
    warmup_epochs: int
    total_epochs: int
    floor_factor: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.floor_factor <= 1.0:
            raise ContractError(f"floor_factor must be in (0, 1], got {self.floor_factor}")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ContractError(
                f"warmup_epochs ({self.warmup_epochs}) must be in [0, total_epochs={self.total_epochs})"
            )

    def factor(self, epoch: int) -> float:
        """Multiplier of base_lr, usable as a LambdaLR lambda."""
        return lr_at(self, epoch) / self.base_lr if self.base_lr else 0.0


def lr_at(sched: LrSchedule, epoch: int) -> float:
    """
    Learning rate for a 0-based epoch.

    Warmup: (epoch + 1) / warmup_epochs * base_lr, reaching base_lr at epoch
    warmup_epochs - 1. Afterwards a cosine from base_lr (epoch == warmup_epochs)
    down to floor_factor * base_lr (final epoch).

    Raises:
        ContractError: If epoch is outside [0, total_epochs)
    """
    if not 0 <= epoch < sched.total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {sched.total_epochs})")
    if epoch < sched.warmup_epochs:
        return sched.base_lr * (epoch + 1) / sched.warmup_epochs
    span = sched.total_epochs - 1 - sched.warmup_epochs
    progress = 1.0 if span <= 0 else (epoch - sched.warmup_epochs) / span
    floor = sched.floor_factor * sched.base_lr
    return floor + (sched.base_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


# ===== Gradient verification =====

def gradient_check(
    module: nn.Module,
    loss_fn: Callable[[Callable[..., object]], torch.Tensor],
    eps: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-7,
    names: Optional[Iterable[str]] = None,
) -> Dict[str, bool]:
    """
    Compare reverse-mode gradients with central finite differences, one parameter at a time.

    The module must hold 64-bit parameters.

    Args:
        module: Module whose parameters are checked
        loss_fn: Receives a `call(*args, **kwargs)` that runs module.forward with the
                 parameter under test substituted, and returns a scalar loss
        eps: Finite-difference step
        rtol, atol: Tolerances (|analytic - numeric| <= atol + rtol * |numeric|)
        names: Optional subset of parameter names

    Returns:
        Mapping parameter name -> passed
    """
    params = dict(module.named_parameters())
    wanted = list(names) if names is not None else list(params)
    results: Dict[str, bool] = {}
    for name in wanted:
        base = params[name].detach().clone().requires_grad_(True)
        if base.dtype != torch.float64:
            raise ContractError(f"gradient_check needs float64 parameters, '{name}' is {base.dtype}")

        def fn(value: torch.Tensor, _name: str = name) -> torch.Tensor:
            def call(*args, **kwargs):
                return torch.func.functional_call(module, {_name: value}, args, kwargs, strict=False)
            return loss_fn(call)

        results[name] = torch.autograd.gradcheck(
            fn, (base,), eps=eps, rtol=rtol, atol=atol, raise_exception=False
        )
        if not results[name]:
            logger.warning(f"Gradient check failed for parameter '{name}'")
    return results


# ===== Tensor checkpoints =====

def save_tensors(path: str, tensors: Dict[str, torch.Tensor]) -> None:
    """
    Write named tensors in the PRWK checkpoint layout.

    Layout: magic "PRWK", version (u32), entry count (u32), then per entry:
    name length (u32) + UTF-8 name, rank (u32), extents (u32 each), raw float32 LE values.
    """
    parts = [MAGIC, U32.pack(CHECKPOINT_VERSION), U32.pack(len(tensors))]
    for name, tensor in tensors.items():
        encoded = name.encode("utf-8")
        values = tensor.detach().cpu().to(torch.float32).contiguous().numpy()
        parts.append(U32.pack(len(encoded)))
        parts.append(encoded)
        parts.append(U32.pack(values.ndim))
        parts.extend(U32.pack(extent) for extent in values.shape)
        parts.append(values.astype("<f4").tobytes())

    full_path = Path(path)
    full_path.parent.mkdir(parents=True, exist_ok=True)
    full_path.write_bytes(b"".join(parts))


def load_tensors(path: str) -> Dict[str, torch.Tensor]:
    """
    Read a PRWK checkpoint into float32 tensors.

    Raises:
        FormatError: Bad magic, unsupported version, truncation or trailing bytes
    """
    full_path = Path(path)
    if not full_path.exists():
        raise FormatError(f"Checkpoint not found: {full_path}")
    reader = ByteReader(full_path.read_bytes())
    reader.expect_magic()
    version_offset = reader.offset
    version = reader.u32("version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"Unsupported checkpoint version {version}", offset=version_offset)

    tensors: Dict[str, torch.Tensor] = {}
    for _ in range(reader.u32("entry count")):
        name_offset = reader.offset
        raw_name = reader.take(reader.u32("name length"), "name")
        try:
            name = raw_name.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("Entry name is not valid UTF-8", offset=name_offset) from None
        rank = reader.u32(f"rank of '{name}'")
        shape = tuple(reader.u32(f"extent of '{name}'") for _ in range(rank))
        values = reader.array("<f4", int(np.prod(shape, dtype=np.int64)), f"values of '{name}'")
        tensors[name] = torch.from_numpy(values.reshape(shape))
    reader.expect_end()
    return tensors
