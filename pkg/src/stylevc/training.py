"""Deterministic training loop, checkpointing, and gradient verification.

The trainer owns all random state explicitly (a torch generator for the
reparameterization noise, the global torch RNG for dropout, a numpy
generator for triplet sampling) and checkpoints capture every piece, so a
save/load/resume cycle is bitwise identical to an uninterrupted run.
"""

from __future__ import annotations

import copy
import json
import math
import struct
import zlib
from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .data import Manifest, MelCache, TripletBatch, sample_batch
from .errors import (
    ConfigError,
    InputError,
    IntegrityError,
    NumericError,
    VersionMismatchError,
)
from .features import FeatureConfig
from .losses import LossBreakdown, LossConfig, total_loss
from .model import AAMHead, ModelConfig, VoiceConverter
from .errors import CheckpointError

CHECKPOINT_MAGIC = b"SVCCKPT1"
CHECKPOINT_VERSION = 1

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1"), "i64": np.dtype("<i8")}


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-6
    steps: int = 2000
    seed: int = 0
    l_seg: int = 128
    lambda2_start: float = 1e-4
    lambda2_end: float = 1.0
    lambda2_ramp_steps: int = 0  # 0 means 20% of steps
    checkpoint_every: int = 500
    grad_clip: float = 5.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0 <= self.lambda2_start <= self.lambda2_end:
            raise ConfigError("need 0 <= lambda2_start <= lambda2_end")
        if self.l_seg % 16 != 0:
            raise ConfigError(f"l_seg {self.l_seg} not divisible by 16")

    @property
    def ramp_steps(self) -> int:
        return self.lambda2_ramp_steps if self.lambda2_ramp_steps > 0 else max(1, self.steps // 5)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def lambda2_at(step: int, cfg: TrainConfig) -> float:
    """Linear ramp from lambda2_start to lambda2_end, then constant."""
    if step < 0:
        raise InputError("step must be >= 0")
    ramp = cfg.ramp_steps
    if step >= ramp:
        return cfg.lambda2_end
    frac = step / ramp
    return cfg.lambda2_start + (cfg.lambda2_end - cfg.lambda2_start) * frac


# ---------------------------------------------------------------------- checkpoints


def _tensor_payload(t: Tensor) -> tuple[bytes, str]:
    t = t.detach().cpu().contiguous()
    if t.dtype == torch.uint8:
        return t.numpy().astype(_DTYPES["u8"]).tobytes(), "u8"
    if t.dtype in (torch.int64, torch.int32):
        return t.numpy().astype(_DTYPES["i64"]).tobytes(), "i64"
    return t.numpy().astype(_DTYPES["f32"]).tobytes(), "f32"


def save_checkpoint(state: dict, path) -> None:
    """Write the single-file container: magic, JSON header, raw LE payloads."""
    tensors: dict[str, Tensor] = state["tensors"]
    index = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        blob, dtype = _tensor_payload(tensors[name])
        index.append(
            {
                "name": name,
                "shape": list(tensors[name].shape),
                "dtype": dtype,
                "offset": offset,
                "nbytes": len(blob),
                "crc32": zlib.crc32(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "step": state["step"],
        "config": state["config"],
        "numpy_rng": state.get("numpy_rng"),
        "tensors": index,
    }
    header_bytes = json.dumps(header).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> dict:
    """Read and verify a checkpoint container; inverse of save_checkpoint."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise IntegrityError(f"{path}: bad magic {magic!r}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header_bytes = fh.read(header_len)
        if len(header_bytes) != header_len:
            raise IntegrityError(f"{path}: truncated header")
        header = json.loads(header_bytes)
        if header["format_version"] != CHECKPOINT_VERSION:
            raise VersionMismatchError(
                f"checkpoint format {header['format_version']}, "
                f"this build supports {CHECKPOINT_VERSION}"
            )
        payload = fh.read()
    tensors = {}
    for meta in header["tensors"]:
        blob = payload[meta["offset"] : meta["offset"] + meta["nbytes"]]
        if len(blob) != meta["nbytes"]:
            raise IntegrityError(f"{path}: tensor {meta['name']} truncated")
        if zlib.crc32(blob) != meta["crc32"]:
            raise IntegrityError(f"{path}: tensor {meta['name']} fails checksum")
        arr = np.frombuffer(blob, dtype=_DTYPES[meta["dtype"]]).reshape(meta["shape"])
        tensors[meta["name"]] = torch.from_numpy(arr.copy())
    return {
        "step": header["step"],
        "config": header["config"],
        "numpy_rng": header.get("numpy_rng"),
        "tensors": tensors,
    }


def apply_model_tensors(module: nn.Module, tensors: dict, prefix: str) -> None:
    """Load `prefix.*` tensors into a module, checking shapes tensor by tensor."""
    state = {}
    for key, param in module.state_dict().items():
        name = f"{prefix}.{key}"
        if name not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {name}")
        value = tensors[name]
        if tuple(value.shape) != tuple(param.shape):
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {tuple(value.shape)}, "
                f"model {tuple(param.shape)}"
            )
        state[key] = value.to(param.dtype)
    module.load_state_dict(state)


# ---------------------------------------------------------------------- trainer


class Trainer:
    """Owns model, AAM head, optimizer, data sampling, and metrics logging."""

    def __init__(
        self,
        model: VoiceConverter,
        aam_head: AAMHead,
        manifest: Manifest,
        feature_cfg: FeatureConfig,
        loss_cfg: LossConfig,
        train_cfg: TrainConfig,
        run_dir,
    ):
        self.model = model
        self.aam_head = aam_head
        self.manifest = manifest
        self.feature_cfg = feature_cfg
        self.loss_cfg = loss_cfg
        self.train_cfg = train_cfg
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.cache = MelCache(manifest, feature_cfg)
        self.labels = manifest.speaker_labels()
        self.optimizer = torch.optim.Adam(
            list(model.parameters()) + list(aam_head.parameters()),
            lr=train_cfg.lr,
            betas=(train_cfg.beta1, train_cfg.beta2),
            eps=train_cfg.eps,
        )
        self.noise_rng = torch.Generator().manual_seed(train_cfg.seed + 1)
        self.sampler_rng = np.random.default_rng(train_cfg.seed + 2)
        self.step_idx = 0
        self.last_checkpoint: Optional[Path] = None
        self.metrics_path = self.run_dir / "metrics.csv"
        if not self.metrics_path.exists():
            self.metrics_path.write_text(",".join(LossBreakdown.CSV_COLUMNS) + "\n")

    def config_snapshot(self) -> dict:
        return {
            "feature": self.feature_cfg.to_dict(),
            "model": self.model.cfg.to_dict(),
            "loss": self.loss_cfg.to_dict(),
            "train": self.train_cfg.to_dict(),
            "n_classes": self.aam_head.n_classes,
        }

    def next_batch(self) -> TripletBatch:
        return sample_batch(
            self.manifest,
            self.cache,
            self.sampler_rng,
            self.train_cfg.l_seg,
            self.train_cfg.batch_size,
        )

    def train_step(self, batch: TripletBatch) -> LossBreakdown:
        """One forward/backward/Adam update; aborts on a non-finite total."""
        self.model.train()
        xa = torch.from_numpy(batch.x_anc).float()
        xp = torch.from_numpy(batch.x_pos).float()
        xn = torch.from_numpy(batch.x_neg).float()
        labels_anc = torch.from_numpy(batch.spk_anc)
        labels_neg = torch.from_numpy(batch.spk_neg)
        lam2 = lambda2_at(self.step_idx, self.train_cfg)
        fwd = self.model.forward_triplet(xa, xp, xn, rng=self.noise_rng)
        total, breakdown = total_loss(
            xa, xn, fwd, labels_anc, labels_neg, self.aam_head.weight,
            self.loss_cfg, lam2,
        )
        if not torch.isfinite(total):
            raise NumericError(
                f"non-finite total loss at step {self.step_idx}; "
                f"last good checkpoint: {self.last_checkpoint or 'none'}"
            )
        self.optimizer.zero_grad()
        total.backward()
        if self.train_cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(
                [p for g in self.optimizer.param_groups for p in g["params"]],
                self.train_cfg.grad_clip,
            )
        self.optimizer.step()
        self.step_idx += 1
        return breakdown

    def train(self, n_steps: Optional[int] = None, print_every: int = 100) -> list[LossBreakdown]:
        n = self.train_cfg.steps if n_steps is None else n_steps
        history = []
        with open(self.metrics_path, "a") as metrics:
            for _ in range(n):
                breakdown = self.train_step(self.next_batch())
                history.append(breakdown)
                metrics.write(breakdown.csv_row(self.step_idx) + "\n")
                if print_every and self.step_idx % print_every == 0:
                    print(
                        f"step {self.step_idx} total {breakdown.total:.4f} "
                        f"vae_y1 {breakdown.l_vae_y1:.4f} vae_y2 {breakdown.l_vae_y2:.4f} "
                        f"aam {breakdown.l_aam:.4f} tri {breakdown.l_tri:.4f} "
                        f"lambda2 {breakdown.lambda2:.4g}"
                    )
                if (
                    self.train_cfg.checkpoint_every > 0
                    and self.step_idx % self.train_cfg.checkpoint_every == 0
                ):
                    self.save(self.run_dir / f"ckpt_{self.step_idx:06d}.svc")
        return history

    # ------------------------------------------------------------ persistence

    def save(self, path) -> Path:
        tensors: dict[str, Tensor] = {}
        for key, value in self.model.state_dict().items():
            tensors[f"model.{key}"] = value
        for key, value in self.aam_head.state_dict().items():
            tensors[f"aam.{key}"] = value
        opt_state = self.optimizer.state_dict()["state"]
        for idx, entry in opt_state.items():
            for key, value in entry.items():
                if isinstance(value, Tensor):
                    tensors[f"opt.{idx}.{key}"] = value
                else:
                    tensors[f"opt.{idx}.{key}"] = torch.tensor(float(value))
        tensors["rng.torch_global"] = torch.get_rng_state()
        tensors["rng.noise"] = self.noise_rng.get_state()
        state = {
            "step": self.step_idx,
            "config": self.config_snapshot(),
            "numpy_rng": _encode_numpy_rng(self.sampler_rng),
            "tensors": tensors,
        }
        save_checkpoint(state, path)
        self.last_checkpoint = Path(path)
        return self.last_checkpoint

    @classmethod
    def restore(cls, path, manifest: Manifest, run_dir) -> "Trainer":
        """Rebuild a trainer whose next step is bitwise identical to the
        one the saved trainer would have taken."""
        state = load_checkpoint(path)
        cfg = state["config"]
        feature_cfg = FeatureConfig.from_dict(cfg["feature"])
        model = VoiceConverter(ModelConfig.from_dict(cfg["model"]))
        aam_head = AAMHead(cfg["n_classes"], model.cfg.embedding_dim)
        trainer = cls(
            model,
            aam_head,
            manifest,
            feature_cfg,
            LossConfig.from_dict(cfg["loss"]),
            TrainConfig.from_dict(cfg["train"]),
            run_dir,
        )
        trainer.load_state(state)
        return trainer

    def load_state(self, state: dict) -> None:
        tensors = state["tensors"]
        apply_model_tensors(self.model, tensors, "model")
        apply_model_tensors(self.aam_head, tensors, "aam")
        opt_entries: dict[int, dict] = {}
        for name, value in tensors.items():
            if not name.startswith("opt."):
                continue
            _, idx, key = name.split(".", 2)
            opt_entries.setdefault(int(idx), {})[key] = value
        opt_state = self.optimizer.state_dict()
        opt_state["state"] = opt_entries
        self.optimizer.load_state_dict(opt_state)
        torch.set_rng_state(tensors["rng.torch_global"].to(torch.uint8))
        self.noise_rng.set_state(tensors["rng.noise"].to(torch.uint8))
        if state.get("numpy_rng") is not None:
            self.sampler_rng.bit_generator.state = _decode_numpy_rng(state["numpy_rng"])
        self.step_idx = state["step"]


def _encode_numpy_rng(rng: np.random.Generator) -> dict:
    raw = rng.bit_generator.state
    return {
        "bit_generator": raw["bit_generator"],
        "state": {k: str(v) for k, v in raw["state"].items()},
        "has_uint32": raw["has_uint32"],
        "uinteger": raw["uinteger"],
    }


def _decode_numpy_rng(encoded: dict) -> dict:
    return {
        "bit_generator": encoded["bit_generator"],
        "state": {k: int(v) for k, v in encoded["state"].items()},
        "has_uint32": encoded["has_uint32"],
        "uinteger": encoded["uinteger"],
    }


def create_training(
    manifest: Manifest,
    feature_cfg: FeatureConfig,
    model_cfg: ModelConfig,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    run_dir,
) -> Trainer:
    """Seeded construction: same seed + config + corpus => same trajectory."""
    torch.manual_seed(train_cfg.seed)
    model = VoiceConverter(model_cfg)
    aam_head = AAMHead(len(manifest.speakers), model_cfg.embedding_dim)
    return Trainer(model, aam_head, manifest, feature_cfg, loss_cfg, train_cfg, run_dir)


# ---------------------------------------------------------------------- gradcheck


def precondition_for_gradcheck(model: VoiceConverter) -> None:
    """Move the style projection off its near-zero warm-start init.

    That init sits at a nearly singular point of the embedding-normalize
    surface where central differences lose accuracy; gradient verification
    wants a generically conditioned parameter point.
    """
    nn.init.xavier_uniform_(model.speaker_encoder.out_proj.weight)
    nn.init.normal_(model.speaker_encoder.out_proj.bias, std=0.1)


@dataclass
class GroupCheck:
    name: str
    analytic: float
    finite_diff: float
    rel_err: float


@dataclass
class GradCheckReport:
    groups: list[GroupCheck] = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def max_rel_err(self) -> float:
        return max((g.rel_err for g in self.groups), default=0.0)

    @property
    def passed(self) -> bool:
        return all(g.rel_err < self.tolerance for g in self.groups)

    def format_table(self) -> str:
        width = max((len(g.name) for g in self.groups), default=4)
        lines = [f"{'parameter group':<{width}}  {'rel err':>12}  status"]
        for g in self.groups:
            status = "ok" if g.rel_err < self.tolerance else "FAIL"
            lines.append(f"{g.name:<{width}}  {g.rel_err:>12.3e}  {status}")
        lines.append(
            f"max relative error {self.max_rel_err:.3e} "
            f"({'PASS' if self.passed else 'FAIL'} at {self.tolerance:g})"
        )
        return "\n".join(lines)


def gradient_check(
    model: VoiceConverter,
    aam_head: AAMHead,
    batch: TripletBatch,
    loss_cfg: LossConfig,
    lambda2: float = 1.0,
    tolerance: float = 1e-4,
    fd_step: float = 1e-4,
    probes: int = 2,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare autograd gradients of the total loss against central finite
    differences, one random direction probe set per parameter tensor.

    Runs on float64 copies with dropout disabled and the reparameterization
    noise pinned, so the loss is a deterministic smooth function of the
    parameters.
    """
    model64 = copy.deepcopy(model).double().eval()
    head64 = copy.deepcopy(aam_head).double()
    xa = torch.from_numpy(batch.x_anc).double()
    xp = torch.from_numpy(batch.x_pos).double()
    xn = torch.from_numpy(batch.x_neg).double()
    labels_anc = torch.from_numpy(batch.spk_anc)
    labels_neg = torch.from_numpy(batch.spk_neg)
    g = torch.Generator().manual_seed(seed)
    latent_shape = (
        xa.shape[0],
        xa.shape[1] // 16,
        model64.cfg.d_content,
    )
    noises = (
        torch.randn(latent_shape, generator=g, dtype=torch.float64),
        torch.randn(latent_shape, generator=g, dtype=torch.float64),
    )
    y1_target = xa if loss_cfg.y1_recon_target == "anchor" else xn

    def evaluate() -> tuple[Tensor, tuple]:
        """Total loss plus the smoothness cell of the evaluation point:
        abs-term sign patterns and hinge/clamp activity masks."""
        fwd = model64.forward_triplet(xa, xp, xn, noises=noises)
        total, _ = total_loss(
            xa, xn, fwd, labels_anc, labels_neg, head64.weight, loss_cfg, lambda2
        )
        embs = F.normalize(torch.stack([fwd.e_anc, fwd.e_pos, fwd.e_neg]), dim=-1)
        cos_pos = (embs[0] * embs[1]).sum(-1)
        cos_neg = (embs[0] * embs[2]).sum(-1)
        hinge_active = (cos_neg - cos_pos + loss_cfg.delta) > 0
        aam_cos = embs @ F.normalize(head64.weight, dim=-1).T
        angle_clamped = (torch.acos(aam_cos.clamp(-0.999999, 0.999999)) + loss_cfg.aam_margin) >= math.pi
        signature = (
            torch.sign(y1_target - fwd.y1),
            torch.sign(xa - fwd.y2),
            hinge_active,
            angle_clamped,
        )
        return total, signature

    params = [
        (f"model.{n}", p) for n, p in model64.named_parameters() if p.requires_grad
    ] + [(f"aam.{n}", p) for n, p in head64.named_parameters() if p.requires_grad]

    loss, _ = evaluate()
    grads = torch.autograd.grad(
        loss, [p for _, p in params], allow_unused=True
    )
    # central differences cancel to ~eps*|L|/h; gradients below that ceiling
    # are indistinguishable from zero (e.g. channel biases erased by IN), and
    # the relative-error floor must absorb that noise at the set tolerance
    loss_scale = max(1.0, abs(float(loss.detach())))
    noise_atol = 8.0 * float(torch.finfo(torch.float64).eps) * loss_scale / fd_step
    floor = max(floor, noise_atol / tolerance)

    def probe(param: Tensor, grad):
        """One central-difference probe; None when the +-h points straddle a
        kink (an abs/hinge boundary), where FD estimates nothing."""
        v = torch.randn(param.shape, generator=g, dtype=torch.float64)
        v = v / v.norm().clamp(min=1e-12)
        analytic = 0.0 if grad is None else float((grad * v).sum())
        with torch.no_grad():
            param.add_(fd_step * v)
            up, sig_up = evaluate()
            param.add_(-2 * fd_step * v)
            down, sig_down = evaluate()
            param.add_(fd_step * v)
        if any(not torch.equal(a, b) for a, b in zip(sig_up, sig_down)):
            return None
        fd = (float(up) - float(down)) / (2 * fd_step)
        if max(abs(analytic), abs(fd)) <= noise_atol:
            rel = 0.0
        else:
            rel = abs(analytic - fd) / max(abs(analytic), abs(fd), floor)
        return analytic, fd, rel

    report = GradCheckReport(tolerance=tolerance)
    for (name, param), grad in zip(params, grads):
        worst = GroupCheck(name, 0.0, 0.0, 0.0)
        collected = 0
        attempts = 0
        while collected < probes and attempts < 8 * probes:
            attempts += 1
            result = probe(param, grad)
            if result is None:
                continue
            collected += 1
            analytic, fd, rel = result
            if rel >= worst.rel_err:
                worst = GroupCheck(name, analytic, fd, rel)
        report.groups.append(worst)
    return report
