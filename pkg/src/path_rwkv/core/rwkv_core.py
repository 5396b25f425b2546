"""
Time Mix and Channel Mix blocks with carried recurrent state.

Every block runs in two equivalent modes:
- chunk: a whole tile sequence at once (training, and each bag at inference)
- step: one tile at a time (reference recurrence)

Processing a sequence in any split of chunks with the same carried RwkvState gives
the same outputs as one chunk.
"""
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import torch
from torch import nn

from path_rwkv.core.numerics import neg_exp_exp, relu_squared
from path_rwkv.utils.errors import ContractError

MIX_ORDER = ("r", "k", "v", "w", "g")

# wkv rows processed in one parallel sub-chunk; bounds the [c, c, D] pair tensor.
WKV_SUB_CHUNK = 32
# exp of anything below this is 0 in float32 and float64
LOG_DECAY_FLOOR = -1e3


@dataclass
class BlockState:
    """
    Carried state of one block.

    Attributes:
        ts_time: Last token seen by Time Mix, [D]
        ts_chan: Last token seen by Channel Mix, [D]
        wkv: Per-head key/value accumulators, [H, d_head, d_head]
    """

    ts_time: torch.Tensor
    ts_chan: torch.Tensor
    wkv: torch.Tensor

    def detach(self) -> "BlockState":
        return BlockState(self.ts_time.detach(), self.ts_chan.detach(), self.wkv.detach())


@dataclass
class RwkvState:
    """
    Recurrent state for a stack of blocks; one slot per block.
    """

    blocks: List[Optional[BlockState]]
    tokens_seen: int = 0

    @classmethod
    def fresh(
        cls,
        n_blocks: int,
        dim: int,
        n_heads: int,
        dtype: Optional[torch.dtype] = None,
        device: Optional[torch.device] = None,
    ) -> "RwkvState":
        """All-zero state: the first token shifts against zeros."""
        if dim % n_heads:
            raise ContractError(f"dim {dim} is not divisible by n_heads {n_heads}")
        head = dim // n_heads
        opts = dict(dtype=dtype or torch.get_default_dtype(), device=device)
        return cls(
            blocks=[
                BlockState(
                    ts_time=torch.zeros(dim, **opts),
                    ts_chan=torch.zeros(dim, **opts),
                    wkv=torch.zeros(n_heads, head, head, **opts),
                )
                for _ in range(n_blocks)
            ]
        )

    def slot(self, index: int) -> BlockState:
        if not 0 <= index < len(self.blocks) or self.blocks[index] is None:
            raise ContractError(f"RwkvState slot {index} is not initialized")
        return self.blocks[index]

    def detach(self) -> "RwkvState":
        return RwkvState([b.detach() if b is not None else None for b in self.blocks], self.tokens_seen)

    def numel(self) -> int:
        return sum(b.ts_time.numel() + b.ts_chan.numel() + b.wkv.numel() for b in self.blocks if b is not None)


def ddlerp(
    x_t: torch.Tensor,
    x_prev: torch.Tensor,
    mu_x: torch.Tensor,
    mu_i: torch.Tensor,
    lora_a: torch.Tensor,
    lora_b: torch.Tensor,
) -> torch.Tensor:
    """
    Data-dependent interpolation between the current and previous token.

    m = x_t + mu_x * (x_prev - x_t)
    out = x_t + (mu_i + tanh(m @ A) @ B) * (x_prev - x_t)
    """
    delta = x_prev - x_t
    m = x_t + mu_x * delta
    return x_t + (mu_i + torch.tanh(m @ lora_a) @ lora_b) * delta


def wkv_step(
    r: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    w: torch.Tensor,
    u: torch.Tensor,
    wkv: torch.Tensor,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    One token of the decayed linear attention, all heads at once.

    Args:
        r, k, v, w, u: [H, d_head]; w is the per-channel decay in (0, 1)
        wkv: [H, d_head, d_head] state before the token

    Returns:
        (y [H, d_head], wkv after the token)
    """
    kv = k.unsqueeze(-1) * v.unsqueeze(-2)
    y = torch.einsum("hk,hkv->hv", r, wkv + u.unsqueeze(-1) * kv)
    return y, w.unsqueeze(-1) * wkv + kv


def wkv_chunk(
    r: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    log_w: torch.Tensor,
    u: torch.Tensor,
    wkv: torch.Tensor,
    sub_chunk: int = WKV_SUB_CHUNK,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Parallel form of `wkv_step` over L tokens.

    Within a sub-chunk all token pairs are evaluated at once using cumulative log
    decays (every exponent is <= 0); sub-chunks are chained through the state.

    Args:
        r, k, v, log_w: [L, H, d_head]; log_w = log of the decay (may be -inf)
        u: [H, d_head]
        wkv: [H, d_head, d_head]

    Returns:
        (y [L, H, d_head], final wkv)
    """
    outputs = []
    for start in range(0, r.shape[0], sub_chunk):
        rc, kc, vc, lw = (t[start:start + sub_chunk] for t in (r, k, v, log_w))
        c = rc.shape[0]
        cum = torch.cumsum(lw.clamp(min=LOG_DECAY_FLOOR), dim=0)
        cum_prev = torch.cat([torch.zeros_like(cum[:1]), cum[:-1]], dim=0)

        y_state = torch.einsum("thk,hkv->thv", rc * torch.exp(cum_prev), wkv)

        exponent = cum_prev.unsqueeze(1) - cum.unsqueeze(0)  # [t, s, H, K]
        strictly_past = torch.ones(c, c, dtype=torch.bool, device=r.device).tril(-1)
        exponent = exponent.masked_fill(~strictly_past[:, :, None, None], float("-inf"))
        scores = torch.einsum("thk,shk,tshk->tsh", rc, kc, torch.exp(exponent))
        y_intra = torch.einsum("tsh,shv->thv", scores, vc)

        bonus = (rc * u * kc).sum(-1, keepdim=True) * vc
        outputs.append(y_state + y_intra + bonus)

        tail = torch.exp(cum[-1].unsqueeze(0) - cum)  # [s, H, K]
        wkv = torch.exp(cum[-1]).unsqueeze(-1) * wkv + torch.einsum("shk,shv->hkv", kc * tail, vc)
    return torch.cat(outputs, dim=0), wkv


class TimeMix(nn.Module):
    """
    Token-shifted decayed linear attention with ddlerp inputs and gated output.
    """

    def __init__(self, dim: int, n_heads: int, lora_rank: int = 32, decay_rank: int = 64,
                 layer_id: int = 0, n_layers: int = 1):
        super().__init__()
        if dim % n_heads:
            raise ContractError(f"dim {dim} is not divisible by n_heads {n_heads}")
        if lora_rank < 1 or decay_rank < 1:
            raise ContractError("LoRA ranks must be positive")
        self.dim = dim
        self.n_heads = n_heads
        self.head_size = dim // n_heads

        self.mu_x = nn.Parameter(torch.zeros(dim))
        self.mu_r = nn.Parameter(torch.zeros(dim))
        self.mu_k = nn.Parameter(torch.zeros(dim))
        self.mu_v = nn.Parameter(torch.zeros(dim))
        self.mu_w = nn.Parameter(torch.zeros(dim))
        self.mu_g = nn.Parameter(torch.zeros(dim))
        self.lora_a = nn.Parameter(torch.zeros(len(MIX_ORDER), dim, lora_rank))
        self.lora_b = nn.Parameter(torch.zeros(len(MIX_ORDER), lora_rank, dim))

        self.w0 = nn.Parameter(torch.zeros(dim))
        self.decay_a = nn.Parameter(torch.zeros(dim, decay_rank))
        self.decay_b = nn.Parameter(torch.zeros(decay_rank, dim))
        self.u = nn.Parameter(torch.zeros(dim))

        self.W_r = nn.Linear(dim, dim, bias=False)
        self.W_k = nn.Linear(dim, dim, bias=False)
        self.W_v = nn.Linear(dim, dim, bias=False)
        self.W_g = nn.Linear(dim, dim, bias=False)
        self.W_o = nn.Linear(dim, dim, bias=False)
        self.group_norm = nn.GroupNorm(n_heads, dim, eps=64e-5)

        self._init_mixing(layer_id, n_layers)

    @torch.no_grad()
    def _init_mixing(self, layer_id: int, n_layers: int) -> None:
        ratio_0_to_1 = layer_id / max(n_layers - 1, 1)
        ratio_1_to_almost0 = 1.0 - layer_id / n_layers
        ddd = torch.arange(self.dim, dtype=self.mu_x.dtype) / self.dim
        n = torch.arange(self.dim, dtype=self.mu_x.dtype)
        span = max(self.dim - 1, 1)

        self.mu_x.copy_(1.0 - ddd ** ratio_1_to_almost0)
        self.mu_w.copy_(1.0 - ddd ** ratio_1_to_almost0)
        self.mu_k.copy_(1.0 - ddd ** ratio_1_to_almost0)
        self.mu_v.copy_(1.0 - (ddd ** ratio_1_to_almost0 + 0.3 * ratio_0_to_1))
        self.mu_r.copy_(1.0 - ddd ** (0.5 * ratio_1_to_almost0))
        self.mu_g.copy_(1.0 - ddd ** (0.5 * ratio_1_to_almost0))
        self.lora_b.uniform_(-0.01, 0.01)
        self.w0.copy_(-6.0 + 5.0 * (n / span) ** (0.7 + 1.3 * ratio_0_to_1))
        self.decay_b.uniform_(-0.01, 0.01)
        self.u.copy_(ratio_0_to_1 * (1.0 - n / span) + ((n + 1) % 3 - 1) * 0.1)

    def _mu(self, name: str) -> torch.Tensor:
        return getattr(self, f"mu_{name}")

    def _project(self, x: torch.Tensor, x_prev: torch.Tensor):
        """Receptance, key, value, gate and decay logits for rows of x."""
        mixed = {
            name: ddlerp(x, x_prev, self.mu_x, self._mu(name), self.lora_a[i], self.lora_b[i])
            for i, name in enumerate(MIX_ORDER)
        }
        r = self.W_r(mixed["r"])
        k = self.W_k(mixed["k"])
        v = self.W_v(mixed["v"])
        g = nn.functional.silu(self.W_g(mixed["g"]))
        d = self.w0 + torch.tanh(mixed["w"] @ self.decay_a) @ self.decay_b
        return r, k, v, g, d

    def _heads(self, t: torch.Tensor) -> torch.Tensor:
        return t.reshape(*t.shape[:-1], self.n_heads, self.head_size)

    def _output(self, y: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
        rows = y.reshape(-1, self.dim)
        return self.W_o(self.group_norm(rows) * g)

    def forward(self, x: torch.Tensor, slot: BlockState) -> torch.Tensor:
        """Chunk mode over x [L, D]; advances slot.ts_time and slot.wkv."""
        if x.dim() != 2 or x.shape[0] == 0:
            raise ContractError(f"time mix chunk needs a non-empty [L, D] input, got {tuple(x.shape)}")
        x_prev = torch.cat([slot.ts_time.unsqueeze(0), x[:-1]], dim=0)
        r, k, v, g, d = self._project(x, x_prev)
        log_w = -torch.exp(d)
        u = self._heads(self.u)
        y, slot.wkv = wkv_chunk(self._heads(r), self._heads(k), self._heads(v), self._heads(log_w), u, slot.wkv)
        slot.ts_time = x[-1]
        return self._output(y, g)

    def step(self, x_t: torch.Tensor, slot: BlockState) -> torch.Tensor:
        """Step mode for one token x_t [D]."""
        r, k, v, g, d = self._project(x_t.unsqueeze(0), slot.ts_time.unsqueeze(0))
        w = neg_exp_exp(d)
        y, slot.wkv = wkv_step(
            self._heads(r[0]), self._heads(k[0]), self._heads(v[0]), self._heads(w[0]),
            self._heads(self.u), slot.wkv,
        )
        slot.ts_time = x_t
        return self._output(y, g)[0]


class ChannelMix(nn.Module):
    """
    Token-shifted squared-ReLU feed-forward with sigmoid receptance gate.
    """

    def __init__(self, dim: int, hidden: int, layer_id: int = 0, n_layers: int = 1):
        super().__init__()
        self.mu_k = nn.Parameter(torch.zeros(dim))
        self.mu_r = nn.Parameter(torch.zeros(dim))
        self.W_k = nn.Linear(dim, hidden, bias=False)
        self.W_v = nn.Linear(hidden, dim, bias=False)
        self.W_r = nn.Linear(dim, dim, bias=False)

        with torch.no_grad():
            ratio_1_to_almost0 = 1.0 - layer_id / n_layers
            ddd = torch.arange(dim, dtype=self.mu_k.dtype) / dim
            self.mu_k.copy_(1.0 - ddd ** ratio_1_to_almost0)
            self.mu_r.copy_(1.0 - ddd ** ratio_1_to_almost0)

    def forward(self, x: torch.Tensor, slot: BlockState) -> torch.Tensor:
        """Chunk mode over x [L, D]; advances slot.ts_chan."""
        if x.dim() != 2 or x.shape[0] == 0:
            raise ContractError(f"channel mix chunk needs a non-empty [L, D] input, got {tuple(x.shape)}")
        x_prev = torch.cat([slot.ts_chan.unsqueeze(0), x[:-1]], dim=0)
        xk = torch.lerp(x, x_prev, self.mu_k)
        xr = torch.lerp(x, x_prev, self.mu_r)
        slot.ts_chan = x[-1]
        return torch.sigmoid(self.W_r(xr)) * self.W_v(relu_squared(self.W_k(xk)))

    def step(self, x_t: torch.Tensor, slot: BlockState) -> torch.Tensor:
        return self.forward(x_t.unsqueeze(0), slot)[0]


class RwkvBlock(nn.Module):
    """
    Pre-norm residual block: x + TimeMix(LN1(x)), then + ChannelMix(LN2(.)).
    """

    def __init__(self, dim: int, n_heads: int, lora_rank: int = 32, decay_rank: int = 64,
                 channel_mix_ratio: float = 3.5, layer_id: int = 0, n_layers: int = 1):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.ln2 = nn.LayerNorm(dim)
        self.time_mix = TimeMix(dim, n_heads, lora_rank, decay_rank, layer_id, n_layers)
        self.channel_mix = ChannelMix(dim, max(1, int(dim * channel_mix_ratio)), layer_id, n_layers)

    def forward(self, x: torch.Tensor, slot: BlockState) -> torch.Tensor:
        x = x + self.time_mix(self.ln1(x), slot)
        return x + self.channel_mix(self.ln2(x), slot)

    def step(self, x_t: torch.Tensor, slot: BlockState) -> torch.Tensor:
        x_t = x_t + self.time_mix.step(self.ln1(x_t), slot)
        return x_t + self.channel_mix.step(self.ln2(x_t), slot)


# ===== Functional entry points =====

def _checked(slot: Optional[BlockState]) -> BlockState:
    if slot is None:
        raise ContractError("state slot is not initialized")
    return slot


def time_mix_step(x_t: torch.Tensor, slot: BlockState, params: TimeMix) -> torch.Tensor:
    return params.step(x_t, _checked(slot))


def time_mix_chunk(x: torch.Tensor, slot: BlockState, params: TimeMix) -> torch.Tensor:
    return params(x, _checked(slot))


def channel_mix_step(x_t: torch.Tensor, slot: BlockState, params: ChannelMix) -> torch.Tensor:
    return params.step(x_t, _checked(slot))


def block_forward(x: torch.Tensor, slot: BlockState, params: RwkvBlock) -> torch.Tensor:
    return params(x, _checked(slot))
