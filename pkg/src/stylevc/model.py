"""Model assembly: content encoder, speaker encoder, decoder, full converter.

The content encoder compresses a mel segment 16x in time through pooling
Conformer blocks with instance normalization and emits a Gaussian posterior;
the speaker encoder (no instance norm, no pooling) pools attentive statistics
into a fixed-length embedding; the decoder restores the time axis while
stylizing its attention with the split embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import NamedTuple, Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import InputError
from .nnblocks import (
    BlockConfig,
    ConformerBlock,
    StyleParams,
    ZipformerBlock,
    sinusoidal_positions,
    upsample_time,
)

TIME_REDUCTION = 16      # four pooling encoder blocks, each halving time
N_CONTENT_BLOCKS = 4
N_DECODER_BLOCKS = 4
LOGSTD_CLAMP = 8.0


@dataclass(frozen=True)
class ModelConfig:
    n_mels: int = 80
    d_model: int = 128
    d_content: int = 64
    n_heads: int = 4
    conv_kernel: int = 15
    ff_expansion: int = 4
    dropout: float = 0.1
    n_speaker_blocks: int = 3
    attention_variant: str = "softmax"

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise InputError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.n_speaker_blocks < 1:
            raise InputError("need at least one speaker encoder block")

    @property
    def embedding_dim(self) -> int:
        return 2 * self.d_model

    def block_config(self, dropout: Optional[float] = None) -> BlockConfig:
        return BlockConfig(
            d_model=self.d_model,
            n_heads=self.n_heads,
            conv_kernel=self.conv_kernel,
            ff_expansion=self.ff_expansion,
            dropout=self.dropout if dropout is None else dropout,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class ContentLatent(NamedTuple):
    """Posterior mean/std and the reparameterized sample, each [B x L/16 x d_c]."""

    r_m: Tensor
    r_s: Tensor
    r_c: Tensor


class GeneratorOutput(NamedTuple):
    """Converted mel plus the latent and speaker embedding that produced it."""

    x_dec: Tensor
    latent: ContentLatent
    speaker: Tensor


class TripletForward(NamedTuple):
    """Everything the composite loss needs from one training forward pass."""

    y1: Tensor
    y2: Tensor
    latent1: ContentLatent
    latent2: ContentLatent
    e_anc: Tensor
    e_pos: Tensor
    e_neg: Tensor


def _as_batch(x: Tensor):
    if x.dim() == 2:
        return x.unsqueeze(0), True
    if x.dim() == 3:
        return x, False
    raise InputError(f"expected [L x D] or [B x L x D], got {tuple(x.shape)}")


def split_style(embedding: Tensor) -> StyleParams:
    """Split a speaker embedding into style scale/shift.

    The first half passes through 1 + tanh so a near-zero embedding yields a
    near-identity style (s1~1, s2~0); the second half is used as-is.
    """
    if embedding.shape[-1] % 2 != 0:
        raise InputError(f"embedding length {embedding.shape[-1]} is odd")
    half = embedding.shape[-1] // 2
    return StyleParams(1.0 + torch.tanh(embedding[..., :half]), embedding[..., half:])


class ContentEncoder(nn.Module):
    """Mel [B x L x 80] -> Gaussian content posterior at L/16 resolution."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.in_proj = nn.Linear(cfg.n_mels, cfg.d_model)
        self.blocks = nn.ModuleList(
            ConformerBlock(cfg.block_config(), use_in=True, use_pool=True)
            for _ in range(N_CONTENT_BLOCKS)
        )
        self.mean_conv = nn.Conv1d(cfg.d_model, cfg.d_content, 3, padding=1)
        self.std_conv = nn.Conv1d(cfg.d_model, cfg.d_content, 3, padding=1)

    def forward(
        self,
        x: Tensor,
        rng: Optional[torch.Generator] = None,
        noise: Optional[Tensor] = None,
    ) -> ContentLatent:
        x, squeeze = _as_batch(x)
        if x.shape[1] % TIME_REDUCTION != 0:
            raise InputError(
                f"frame count {x.shape[1]} not divisible by {TIME_REDUCTION}"
            )
        h = self.in_proj(x)
        h = h + sinusoidal_positions(h.shape[1], h.shape[2], dtype=h.dtype).to(h.device)
        for block in self.blocks:
            h = block(h)
        h = h.transpose(1, 2)
        r_m = self.mean_conv(h).transpose(1, 2)
        log_std = self.std_conv(h).transpose(1, 2).clamp(-LOGSTD_CLAMP, LOGSTD_CLAMP)
        r_s = torch.exp(log_std)
        if noise is None:
            if rng is None:
                noise = torch.zeros_like(r_m)
            else:
                noise = torch.randn(r_m.shape, generator=rng, dtype=r_m.dtype)
        r_c = r_m + noise.to(r_m.device) * r_s
        if squeeze:
            return ContentLatent(r_m.squeeze(0), r_s.squeeze(0), r_c.squeeze(0))
        return ContentLatent(r_m, r_s, r_c)


class AttentiveStatsPooling(nn.Module):
    """Attention-weighted mean+std pooling over time."""

    def __init__(self, d_model: int):
        super().__init__()
        self.score = nn.Sequential(
            nn.Linear(d_model, d_model), nn.Tanh(), nn.Linear(d_model, 1)
        )

    def forward(self, x: Tensor) -> Tensor:
        alpha = self.score(x).softmax(dim=-2)
        mean = (alpha * x).sum(dim=-2)
        var = (alpha * (x - mean.unsqueeze(-2)) ** 2).sum(dim=-2)
        # generous variance floor keeps the sqrt well-conditioned
        return torch.cat([mean, (var + 1e-5).sqrt()], dim=-1)


class SpeakerEncoder(nn.Module):
    """Mel [B x L x 80] -> speaker embedding [B x 2*d_model].

    Conformer blocks without instance normalization or pooling, attentive
    statistics pooling, and a final projection initialized near zero so the
    untrained style starts at the identity.
    """

    MIN_FRAMES = 16

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.in_proj = nn.Linear(cfg.n_mels, cfg.d_model)
        self.blocks = nn.ModuleList(
            ConformerBlock(cfg.block_config(), use_in=False, use_pool=False)
            for _ in range(cfg.n_speaker_blocks)
        )
        self.pool = AttentiveStatsPooling(cfg.d_model)
        self.out_proj = nn.Linear(2 * cfg.d_model, cfg.embedding_dim)
        nn.init.normal_(self.out_proj.weight, std=1e-3)
        nn.init.zeros_(self.out_proj.bias)

    def forward(self, x: Tensor) -> Tensor:
        x, squeeze = _as_batch(x)
        if x.shape[1] < self.MIN_FRAMES:
            raise InputError(
                f"speaker encoder needs >= {self.MIN_FRAMES} frames, got {x.shape[1]}"
            )
        h = self.in_proj(x)
        for block in self.blocks:
            h = block(h)
        emb = self.out_proj(self.pool(h))
        return emb.squeeze(0) if squeeze else emb


class Decoder(nn.Module):
    """Content latent [B x L/16 x d_c] + style -> mel [B x L x 80]."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.in_proj = nn.Linear(cfg.d_content, cfg.d_model)
        self.blocks = nn.ModuleList(
            ZipformerBlock(
                cfg.block_config(), variant=cfg.attention_variant, name=f"decoder.block{i}"
            )
            for i in range(N_DECODER_BLOCKS)
        )
        self.out_proj = nn.Linear(cfg.d_model, cfg.n_mels)

    def forward(self, latent: Tensor, style: StyleParams) -> Tensor:
        x, squeeze = _as_batch(latent)
        s1, s2 = style
        if s1.shape[-1] != self.in_proj.out_features:
            raise InputError(
                f"style length {s1.shape[-1]} != d_model {self.in_proj.out_features}"
            )
        h = self.in_proj(x)
        h = h + sinusoidal_positions(h.shape[1], h.shape[2], dtype=h.dtype).to(h.device)
        for block in self.blocks:
            h = upsample_time(h, 2)
            h = block(h, style)
        out = self.out_proj(h)
        return out.squeeze(0) if squeeze else out


class AAMHead(nn.Module):
    """Class-weight matrix for the angular-margin speaker objective."""

    def __init__(self, n_classes: int, embedding_dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(n_classes, embedding_dim))
        nn.init.xavier_uniform_(self.weight)

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]


class VoiceConverter(nn.Module):
    """Full generator: disentangle source content, restyle with target timbre."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.content_encoder = ContentEncoder(cfg)
        self.speaker_encoder = SpeakerEncoder(cfg)
        self.decoder = Decoder(cfg)

    def convert(
        self, x_src: Tensor, x_tgt: Tensor, rng: Optional[torch.Generator] = None
    ) -> GeneratorOutput:
        """Generate x_src's content in x_tgt's timbre.

        Output length always equals the source length. Without an RNG the
        latent is the posterior mean (eval behavior).
        """
        latent = self.content_encoder(x_src, rng=rng)
        embedding = self.speaker_encoder(x_tgt)
        x_dec = self.decoder(latent.r_c, split_style(embedding))
        return GeneratorOutput(x_dec, latent, embedding)

    def forward_triplet(
        self,
        x_anc: Tensor,
        x_pos: Tensor,
        x_neg: Tensor,
        rng: Optional[torch.Generator] = None,
        noises: Optional[tuple[Tensor, Tensor]] = None,
    ) -> TripletForward:
        """Training pass: y1 converts the anchor to the negative speaker's
        timbre, y2 to the positive's, with one fresh latent sample each.

        The anchor posterior is computed once and sampled twice; the three
        speaker encodes and the two decodes run batched. Explicit `noises`
        pin the reparameterization for finite-difference checks.
        """
        batch = x_anc.shape[0]
        emb = self.speaker_encoder(torch.cat([x_anc, x_pos, x_neg], dim=0))
        e_anc, e_pos, e_neg = emb.split(batch, dim=0)
        posterior = self.content_encoder(x_anc)
        if noises is None:
            if rng is None:
                noises = (torch.zeros_like(posterior.r_m),) * 2
            else:
                noises = tuple(
                    torch.randn(posterior.r_m.shape, generator=rng, dtype=posterior.r_m.dtype)
                    for _ in range(2)
                )
        latent1 = ContentLatent(
            posterior.r_m, posterior.r_s, posterior.r_m + noises[0] * posterior.r_s
        )
        latent2 = ContentLatent(
            posterior.r_m, posterior.r_s, posterior.r_m + noises[1] * posterior.r_s
        )
        style = split_style(torch.cat([e_neg, e_pos], dim=0))
        decoded = self.decoder(torch.cat([latent1.r_c, latent2.r_c], dim=0), style)
        y1, y2 = decoded.split(batch, dim=0)
        return TripletForward(y1, y2, latent1, latent2, e_anc, e_pos, e_neg)


def build_model(cfg: ModelConfig) -> VoiceConverter:
    return VoiceConverter(cfg)
