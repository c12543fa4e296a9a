"""Neural building blocks.

Instance normalization over time, row-wise weight normalization, stylized
self-attention (attention projections affinely modulated by split speaker
style vectors), Conformer blocks with optional instance norm and time
pooling, a simplified Zipformer-style block that computes its attention
score matrix once and reuses it for a second application, and temporal
up/down-sampling.

Tensors are [L x C] or [B x L x C], time-major within each item.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import InputError, NumericError

logger = logging.getLogger(__name__)

LN_EPS = 1e-6
NORM_EPS = 1e-12


class StyleParams(NamedTuple):
    """Split speaker embedding: multiplicative scale s1 and additive shift s2."""

    s1: Tensor
    s2: Tensor


class AttentionWeights(NamedTuple):
    """Query/key/value/bypass projection matrices, each [d_model x d_model]."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_u: Tensor


@dataclass(frozen=True)
class BlockConfig:
    d_model: int = 128
    n_heads: int = 4
    conv_kernel: int = 15
    ff_expansion: int = 4
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise InputError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.conv_kernel % 2 != 1:
            raise InputError(f"conv_kernel {self.conv_kernel} must be odd")
        if not 0.0 <= self.dropout < 1.0:
            raise InputError("dropout must be in [0, 1)")


def instance_norm(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Standardize each channel over the time axis (no learned affine).

    Constant channels come out as zeros; otherwise the output has exact
    per-channel zero mean and unit (population) variance.
    """
    if x.shape[-2] < 2:
        raise InputError("instance_norm needs at least 2 frames")
    mean = x.mean(dim=-2, keepdim=True)
    std = x.var(dim=-2, unbiased=False, keepdim=True).sqrt()
    return (x - mean) / std.clamp(min=eps)


def weight_norm(w: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Scale each output row of a weight matrix to unit L2 norm."""
    norms = w.norm(dim=-1, keepdim=True)
    if bool((norms < eps).any()):
        logger.warning("weight_norm: zero row encountered, epsilon-stabilized")
    return w / norms.clamp(min=eps)


def nonparam_layer_norm(x: Tensor, eps: float = LN_EPS) -> Tensor:
    """Parameter-free layer normalization over the channel axis."""
    mean = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, unbiased=False, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps)


def stylize_weights(weights: AttentionWeights, style: StyleParams) -> AttentionWeights:
    """Modulate each projection per input channel: w[i,j] -> w[i,j]*s1[j] + s2[j]."""
    s1, s2 = style
    if s1.shape != s2.shape:
        raise InputError("style vectors s1 and s2 must have the same shape")
    if s1.shape[-1] != weights.w_q.shape[-1]:
        raise InputError(
            f"style length {s1.shape[-1]} != weight width {weights.w_q.shape[-1]}"
        )
    return AttentionWeights(*(w * s1.unsqueeze(-2) + s2.unsqueeze(-2) for w in weights))


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, l, d = x.shape
    return x.view(b, l, n_heads, d // n_heads).transpose(1, 2)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, l, dh = x.shape
    return x.transpose(1, 2).reshape(b, l, h * dh)


def _project(x_prime: Tensor, w: Tensor, batched_style: bool) -> Tensor:
    # with per-item style the normalized weights differ per batch element
    if batched_style:
        return torch.einsum("blc,bdc->bld", x_prime, w)
    return x_prime @ w.transpose(-2, -1)


def stylized_attention(
    x: Tensor,
    weights: AttentionWeights,
    style: Optional[StyleParams] = None,
    n_heads: int = 1,
    variant: str = "softmax",
    return_scores: bool = False,
):
    """Self-attention with style-modulated, row-normalized projections.

    x' = layer_norm(s1*x + s2); Q/K/V/U = x' projected by the weight-normalized
    stylized matrices; output softmax(QK^t/sqrt(d_head))V + U. The caller adds
    the residual connection. With style=None the plain shared-weight path is
    used (x' = layer_norm(x), unmodulated weights). variant="literal" skips the
    softmax and uses the key projection as values.
    """
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    d_model = weights.w_q.shape[-1]
    if x.shape[-1] != d_model:
        raise InputError(f"input width {x.shape[-1]} != weight width {d_model}")
    if d_model % n_heads != 0:
        raise InputError(f"d_model {d_model} not divisible by n_heads {n_heads}")

    batched_style = False
    if style is not None:
        s1, s2 = style
        batched_style = s1.dim() == 2
        weights = stylize_weights(weights, style)
        x_prime = nonparam_layer_norm(s1.unsqueeze(-2) * x + s2.unsqueeze(-2))
    else:
        x_prime = nonparam_layer_norm(x)

    wq, wk, wv, wu = (weight_norm(w) for w in weights)
    q = _split_heads(_project(x_prime, wq, batched_style), n_heads)
    k = _split_heads(_project(x_prime, wk, batched_style), n_heads)
    u = _project(x_prime, wu, batched_style)
    scale = 1.0 / math.sqrt(d_model // n_heads)
    scores = q @ k.transpose(-2, -1) * scale
    if variant == "softmax":
        scores = scores.softmax(dim=-1)
        v = _split_heads(_project(x_prime, wv, batched_style), n_heads)
    elif variant == "literal":
        v = k  # paper-literal ablation: no softmax, key projection reused as values
    else:
        raise InputError(f"unknown attention variant {variant!r}")
    out = _merge_heads(scores @ v) + u
    if squeeze:
        out = out.squeeze(0)
        scores = scores.squeeze(0)
    return (out, scores) if return_scores else out


def apply_shared_scores(
    x: Tensor,
    scores: Tensor,
    w_v: Tensor,
    w_u: Tensor,
    style: Optional[StyleParams] = None,
    n_heads: int = 1,
) -> Tensor:
    """Second attention application reusing a precomputed score matrix."""
    batched_style = False
    if style is not None:
        s1, s2 = style
        batched_style = s1.dim() == 2
        sw = StyleParams(s1.unsqueeze(-2), s2.unsqueeze(-2))
        w_v = w_v * sw.s1 + sw.s2
        w_u = w_u * sw.s1 + sw.s2
        x_prime = nonparam_layer_norm(s1.unsqueeze(-2) * x + s2.unsqueeze(-2))
    else:
        x_prime = nonparam_layer_norm(x)
    v = _split_heads(_project(x_prime, weight_norm(w_v), batched_style), n_heads)
    u = _project(x_prime, weight_norm(w_u), batched_style)
    return _merge_heads(scores @ v) + u


class StylizedSelfAttention(nn.Module):
    """Parameter container for stylized attention; retains the last score matrix."""

    def __init__(self, d_model: int, n_heads: int = 1, variant: str = "softmax", name: str = ""):
        super().__init__()
        self.n_heads = n_heads
        self.variant = variant
        self.name = name or "stylized_attention"
        for key in ("w_q", "w_k", "w_v", "w_u"):
            setattr(self, key, nn.Parameter(torch.empty(d_model, d_model)))
            nn.init.xavier_uniform_(getattr(self, key))
        self.last_scores: Optional[Tensor] = None

    @property
    def weights(self) -> AttentionWeights:
        return AttentionWeights(self.w_q, self.w_k, self.w_v, self.w_u)

    def forward(self, x: Tensor, style: Optional[StyleParams] = None):
        out, scores = stylized_attention(
            x, self.weights, style, n_heads=self.n_heads, variant=self.variant,
            return_scores=True,
        )
        if not torch.isfinite(out).all():
            raise NumericError(f"{self.name}: non-finite attention output")
        self.last_scores = scores.detach()
        return out, scores


class FeedForward(nn.Module):
    def __init__(self, d_model: int, expansion: int, dropout: float):
        super().__init__()
        self.norm = nn.LayerNorm(d_model)
        self.net = nn.Sequential(
            nn.Linear(d_model, expansion * d_model),
            nn.SiLU(),
            nn.Dropout(dropout),
            nn.Linear(expansion * d_model, d_model),
            nn.Dropout(dropout),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.net(self.norm(x))


class ConvModule(nn.Module):
    """Conformer convolution module (layer norm in place of batch norm)."""

    def __init__(self, d_model: int, kernel: int, dropout: float):
        super().__init__()
        self.norm = nn.LayerNorm(d_model)
        self.pointwise_in = nn.Linear(d_model, 2 * d_model)
        self.depthwise = nn.Conv1d(
            d_model, d_model, kernel, padding=kernel // 2, groups=d_model
        )
        self.mid_norm = nn.LayerNorm(d_model)
        self.pointwise_out = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        y = F.glu(self.pointwise_in(self.norm(x)), dim=-1)
        y = self.depthwise(y.transpose(-2, -1)).transpose(-2, -1)
        y = F.silu(self.mid_norm(y))
        return self.dropout(self.pointwise_out(y))


class InstanceNormTime(nn.Module):
    """Module wrapper around :func:`instance_norm` (hookable in tests)."""

    def forward(self, x: Tensor) -> Tensor:
        return instance_norm(x)


class ConformerBlock(nn.Module):
    """Pre-norm Conformer block with optional instance norm and time pooling.

    Ordering: half-step FF, self-attention, convolution module, instance
    norm (optional), average pooling by 2 (optional), half-step FF. With all
    projections zeroed the block reduces to the (pooled) identity.
    """

    def __init__(self, cfg: BlockConfig, use_in: bool = False, use_pool: bool = False):
        super().__init__()
        self.use_in = use_in
        self.use_pool = use_pool
        self.ff1 = FeedForward(cfg.d_model, cfg.ff_expansion, cfg.dropout)
        self.attn_norm = nn.LayerNorm(cfg.d_model)
        self.attn = nn.MultiheadAttention(
            cfg.d_model, cfg.n_heads, dropout=cfg.dropout, batch_first=True
        )
        self.attn_dropout = nn.Dropout(cfg.dropout)
        self.conv = ConvModule(cfg.d_model, cfg.conv_kernel, cfg.dropout)
        self.instance_norm = InstanceNormTime() if use_in else None
        self.ff2 = FeedForward(cfg.d_model, cfg.ff_expansion, cfg.dropout)

    def forward(self, x: Tensor) -> Tensor:
        x = x + 0.5 * self.ff1(x)
        y = self.attn_norm(x)
        y, _ = self.attn(y, y, y, need_weights=False)
        x = x + self.attn_dropout(y)
        x = x + self.conv(x)
        if self.instance_norm is not None:
            x = self.instance_norm(x)
        if self.use_pool:
            if x.shape[-2] % 2 != 0:
                raise InputError(f"time pooling needs even length, got {x.shape[-2]}")
            b = x.dim() == 3
            if not b:
                x = x.unsqueeze(0)
            x = x.view(x.shape[0], x.shape[1] // 2, 2, x.shape[2]).mean(dim=2)
            if not b:
                x = x.squeeze(0)
        x = x + 0.5 * self.ff2(x)
        return x


class ZipformerBlock(nn.Module):
    """Simplified Zipformer-style block carrying stylized attention.

    The attention score matrix is computed once and shared by a second
    attention application with its own value/bypass projections; this score
    reuse is the Zipformer trait the block preserves. Sub-modules are
    residually connected; the time length never changes.
    """

    def __init__(self, cfg: BlockConfig, variant: str = "softmax", name: str = ""):
        super().__init__()
        self.name = name or "zipformer_block"
        self.ff1 = FeedForward(cfg.d_model, cfg.ff_expansion, cfg.dropout)
        self.attn = StylizedSelfAttention(
            cfg.d_model, cfg.n_heads, variant=variant, name=f"{self.name}.attn"
        )
        self.w_v2 = nn.Parameter(torch.empty(cfg.d_model, cfg.d_model))
        self.w_u2 = nn.Parameter(torch.empty(cfg.d_model, cfg.d_model))
        nn.init.xavier_uniform_(self.w_v2)
        nn.init.xavier_uniform_(self.w_u2)
        self.attn_dropout = nn.Dropout(cfg.dropout)
        self.conv = ConvModule(cfg.d_model, cfg.conv_kernel, cfg.dropout)
        self.ff2 = FeedForward(cfg.d_model, cfg.ff_expansion, cfg.dropout)
        self.n_heads = cfg.n_heads
        self.last_scores: list[Tensor] = []

    def forward(self, x: Tensor, style: Optional[StyleParams] = None) -> Tensor:
        x = x + self.ff1(x)
        out, scores = self.attn(x, style)
        x = x + self.attn_dropout(out)
        out2 = apply_shared_scores(x, scores, self.w_v2, self.w_u2, style, self.n_heads)
        if not torch.isfinite(out2).all():
            raise NumericError(f"{self.name}: non-finite attention output")
        x = x + self.attn_dropout(out2)
        self.last_scores = [self.attn.last_scores, scores.detach()]
        x = x + self.conv(x)
        x = x + self.ff2(x)
        return x


def upsample_time(x: Tensor, factor: int) -> Tensor:
    """Linear interpolation along time by an integer factor.

    Output index k reads input position k/factor; positions past the last
    frame replicate the edge. factor=1 returns the input unchanged.
    """
    if factor < 1:
        raise InputError("upsample factor must be >= 1")
    if factor == 1:
        return x
    length = x.shape[-2]
    pos = torch.arange(length * factor, device=x.device, dtype=x.dtype) / factor
    i0 = pos.floor().long()
    i1 = (i0 + 1).clamp(max=length - 1)
    frac = (pos - i0.to(pos.dtype)).unsqueeze(-1)
    lo = x.index_select(-2, i0)
    hi = x.index_select(-2, i1)
    return lo + (hi - lo) * frac


def sinusoidal_positions(length: int, d_model: int, dtype=torch.float32) -> Tensor:
    """Standard fixed sine/cosine positional encoding, [length x d_model]."""
    pos = torch.arange(length, dtype=dtype).unsqueeze(1)
    idx = torch.arange(0, d_model, 2, dtype=dtype)
    angle = pos / torch.pow(torch.tensor(10000.0, dtype=dtype), idx / d_model)
    pe = torch.zeros(length, d_model, dtype=dtype)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : d_model // 2])
    return pe
