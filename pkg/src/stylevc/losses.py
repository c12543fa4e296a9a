"""Training objectives: VAE reconstruction+KL, AAM-softmax, triplet, composite.

Each loss is a pure function of tensors; the composite combiner returns the
differentiable total together with a float-valued breakdown for logging.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import TYPE_CHECKING

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import InputError

if TYPE_CHECKING:  # pragma: no cover
    from .model import TripletForward

COS_CLAMP = 1.0 - 1e-7


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 10.0
    lambda3: float = 1.0
    lambda4: float = 1.0
    delta: float = 0.3
    aam_scale: float = 30.0
    aam_margin: float = 0.2
    kl_variant: str = "standard"          # "standard" | "literal"
    triplet_variant: str = "hinge"        # "hinge" | "literal"
    attention_variant: str = "softmax"    # "softmax" | "literal"
    y1_recon_target: str = "anchor"       # "anchor" | "negative"

    def __post_init__(self):
        for name in ("lambda1", "lambda3", "lambda4", "delta", "aam_scale", "aam_margin"):
            if getattr(self, name) < 0:
                raise InputError(f"{name} must be non-negative")
        if self.kl_variant not in ("standard", "literal"):
            raise InputError(f"unknown kl_variant {self.kl_variant!r}")
        if self.triplet_variant not in ("hinge", "literal"):
            raise InputError(f"unknown triplet_variant {self.triplet_variant!r}")
        if self.attention_variant not in ("softmax", "literal"):
            raise InputError(f"unknown attention_variant {self.attention_variant!r}")
        if self.y1_recon_target not in ("anchor", "negative"):
            raise InputError(f"unknown y1_recon_target {self.y1_recon_target!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(**d)


@dataclass
class LossBreakdown:
    """Per-term values of the composite objective, for logging and tests."""

    l_vae_y1: float
    l_vae_y2: float
    l_recon_parts: tuple[float, float]
    l_kl_parts: tuple[float, float]
    l_aam: float
    l_tri: float
    total: float
    lambda2: float

    CSV_COLUMNS = ("step", "l_vae_y1", "l_vae_y2", "l_aam", "l_tri", "total", "lambda2")

    def csv_row(self, step: int) -> str:
        return (
            f"{step},{self.l_vae_y1:.8g},{self.l_vae_y2:.8g},{self.l_aam:.8g},"
            f"{self.l_tri:.8g},{self.total:.8g},{self.lambda2:.8g}"
        )


def vae_loss(x: Tensor, x_dec: Tensor, latent, variant: str = "standard"):
    """Reconstruction (mean absolute error) and KL-to-standard-normal terms.

    The standard variant uses the closed-form Gaussian KL
    0.5*mean(r_s^2 + r_m^2 - log r_s^2 - 1); the literal variant folds the
    sampled value into the divergence term instead.
    """
    if x.shape != x_dec.shape:
        raise InputError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_dec.shape)}")
    recon = (x - x_dec).abs().mean()
    if variant == "standard":
        kl = 0.5 * (latent.r_s**2 + latent.r_m**2 - torch.log(latent.r_s**2) - 1).mean()
    elif variant == "literal":
        kl = 0.5 * (
            latent.r_c + latent.r_m**2 - torch.log((latent.r_m**2).clamp(min=1e-12)) - 1
        ).mean()
    else:
        raise InputError(f"unknown KL variant {variant!r}")
    return recon, kl


def aam_softmax_loss(
    embedding: Tensor, label: Tensor, class_weights: Tensor, cfg: LossConfig
) -> Tensor:
    """Additive angular margin softmax over cosine logits.

    The true-class angle is penalized by the margin (clamped at pi so the
    loss stays monotone in the margin); all logits scale by cfg.aam_scale.
    """
    if embedding.dim() == 1:
        embedding = embedding.unsqueeze(0)
    label = torch.atleast_1d(torch.as_tensor(label, device=embedding.device))
    n_classes = class_weights.shape[0]
    if bool((label < 0).any()) or bool((label >= n_classes).any()):
        raise InputError(f"label out of range for {n_classes} classes")
    emb = F.normalize(embedding, dim=-1, eps=1e-12)
    w = F.normalize(class_weights, dim=-1, eps=1e-12)
    cos = (emb @ w.T).clamp(-COS_CLAMP, COS_CLAMP)
    theta = torch.acos(cos)
    target_theta = theta.gather(1, label.unsqueeze(1))
    target_logit = torch.cos((target_theta + cfg.aam_margin).clamp(max=math.pi))
    logits = cos.scatter(1, label.unsqueeze(1), target_logit)
    return F.cross_entropy(cfg.aam_scale * logits, label)


def _cosine(a: Tensor, b: Tensor) -> Tensor:
    if bool((a.norm(dim=-1) < 1e-12).any()) or bool((b.norm(dim=-1) < 1e-12).any()):
        raise InputError("zero vector passed to triplet loss")
    return (F.normalize(a, dim=-1) * F.normalize(b, dim=-1)).sum(dim=-1)


def triplet_loss(
    e_anc: Tensor, e_pos: Tensor, e_neg: Tensor, delta: float, variant: str = "hinge"
) -> Tensor:
    """Margin loss over L2-normalized speaker embeddings.

    hinge: mean(max(0, cos(anc,neg) - cos(anc,pos) + delta)). literal: the
    signed form mean(cos(anc,pos) - cos(anc,neg) + delta) as an ablation.
    """
    if not (e_anc.shape == e_pos.shape == e_neg.shape):
        raise InputError("triplet embeddings must share a shape")
    cos_pos = _cosine(e_anc, e_pos)
    cos_neg = _cosine(e_anc, e_neg)
    if variant == "hinge":
        return torch.clamp(cos_neg - cos_pos + delta, min=0.0).mean()
    if variant == "literal":
        return (cos_pos - cos_neg + delta).mean()
    raise InputError(f"unknown triplet variant {variant!r}")


def total_loss(
    x_anc: Tensor,
    x_neg: Tensor,
    forward: "TripletForward",
    labels_anc: Tensor,
    labels_neg: Tensor,
    class_weights: Tensor,
    cfg: LossConfig,
    lambda2: float,
):
    """Compose the full objective.

    total = lambda1*(L_vae(y1) + lambda2*L_vae(y2))
          + lambda3*(aam(anc) + aam(pos) + aam(neg)) + lambda4*triplet.
    Returns (total tensor, LossBreakdown of floats).
    """
    y1_target = x_anc if cfg.y1_recon_target == "anchor" else x_neg
    recon1, kl1 = vae_loss(y1_target, forward.y1, forward.latent1, cfg.kl_variant)
    recon2, kl2 = vae_loss(x_anc, forward.y2, forward.latent2, cfg.kl_variant)
    l_vae_y1 = recon1 + kl1
    l_vae_y2 = recon2 + kl2
    l_aam = (
        aam_softmax_loss(forward.e_anc, labels_anc, class_weights, cfg)
        + aam_softmax_loss(forward.e_pos, labels_anc, class_weights, cfg)
        + aam_softmax_loss(forward.e_neg, labels_neg, class_weights, cfg)
    )
    l_tri = triplet_loss(
        forward.e_anc, forward.e_pos, forward.e_neg, cfg.delta, cfg.triplet_variant
    )
    total = (
        cfg.lambda1 * (l_vae_y1 + lambda2 * l_vae_y2)
        + cfg.lambda3 * l_aam
        + cfg.lambda4 * l_tri
    )
    breakdown = LossBreakdown(
        l_vae_y1=float(l_vae_y1.detach()),
        l_vae_y2=float(l_vae_y2.detach()),
        l_recon_parts=(float(recon1.detach()), float(recon2.detach())),
        l_kl_parts=(float(kl1.detach()), float(kl2.detach())),
        l_aam=float(l_aam.detach()),
        l_tri=float(l_tri.detach()),
        total=float(total.detach()),
        lambda2=float(lambda2),
    )
    return total, breakdown
