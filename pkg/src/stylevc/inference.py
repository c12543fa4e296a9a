"""End-to-end conversion: features in, converted mel (and waveform) out.

The converted log-mel is always written as a binary sidecar so an external
neural vocoder can synthesize independently of the built-in Griffin-Lim.
Sidecar layout: magic "PFVCMEL1", uint32 L, uint32 D, L*D float32 values
row-major, float32 hop_length, float32 sample_rate, all little-endian.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .data import Manifest
from .errors import ConfigError, InputError, IntegrityError
from .features import (
    FeatureConfig,
    MelSpectrogram,
    extract_logmel,
    inverse_logmel,
    read_wav,
    write_wav,
)
from .model import ModelConfig, VoiceConverter, TIME_REDUCTION
from .training import apply_model_tensors, load_checkpoint

SIDECAR_MAGIC = b"PFVCMEL1"
MIN_TARGET_FRAMES = 16


@dataclass
class ConversionRequest:
    source_audio_path: Path
    target_audio_path: Path
    checkpoint_path: Path
    output_path: Path
    vocoder_mode: str = "griffinlim"  # "griffinlim" | "external"
    griffinlim_iters: int = 32

    def __post_init__(self):
        if self.vocoder_mode not in ("griffinlim", "external"):
            raise ConfigError(f"unknown vocoder mode {self.vocoder_mode!r}")


@dataclass
class ConversionResult:
    mel_path: Path
    wav_path: Optional[Path]
    n_frames: int


def write_mel_sidecar(path, mel: MelSpectrogram) -> None:
    values = np.ascontiguousarray(mel.values, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(SIDECAR_MAGIC)
        fh.write(struct.pack("<II", values.shape[0], values.shape[1]))
        fh.write(values.tobytes())
        fh.write(struct.pack("<ff", float(mel.hop_length), float(mel.sample_rate)))


def read_mel_sidecar(path) -> MelSpectrogram:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != SIDECAR_MAGIC:
            raise IntegrityError(f"{path}: bad sidecar magic {magic!r}")
        l, d = struct.unpack("<II", fh.read(8))
        payload = fh.read(l * d * 4)
        if len(payload) != l * d * 4:
            raise IntegrityError(f"{path}: truncated sidecar payload")
        tail = fh.read(8)
        if len(tail) != 8:
            raise IntegrityError(f"{path}: truncated sidecar trailer")
        hop, sr = struct.unpack("<ff", tail)
    values = np.frombuffer(payload, dtype="<f4").reshape(l, d).copy()
    return MelSpectrogram(values=values, hop_length=int(hop), sample_rate=int(sr))


def load_converter(checkpoint_path) -> tuple[VoiceConverter, FeatureConfig, dict]:
    """Rebuild a frozen eval-mode model from a checkpoint's config snapshot."""
    state = load_checkpoint(checkpoint_path)
    cfg = state["config"]
    model = VoiceConverter(ModelConfig.from_dict(cfg["model"]))
    apply_model_tensors(model, state["tensors"], "model")
    model.eval()
    return model, FeatureConfig.from_dict(cfg["feature"]), cfg


def pad_to_time_multiple(values: np.ndarray, multiple: int = TIME_REDUCTION) -> np.ndarray:
    """Extend a [L x D] matrix to a multiple of `multiple` frames by
    replicating the final frame."""
    remainder = values.shape[0] % multiple
    if remainder == 0:
        return values
    pad = multiple - remainder
    return np.concatenate([values, np.repeat(values[-1:], pad, axis=0)], axis=0)


def convert_mel(
    model: VoiceConverter, mel_src: MelSpectrogram, mel_tgt: MelSpectrogram
) -> MelSpectrogram:
    """Eval-mode conversion of one mel to a target timbre, padding the
    source up to the x16 grid and trimming the output back."""
    if mel_tgt.n_frames < MIN_TARGET_FRAMES:
        raise InputError(
            f"target reference has {mel_tgt.n_frames} frames, "
            f"needs >= {MIN_TARGET_FRAMES} for a usable timbre estimate"
        )
    padded = pad_to_time_multiple(mel_src.values)
    with torch.no_grad():
        out = model.convert(
            torch.from_numpy(padded).float(),
            torch.from_numpy(np.asarray(mel_tgt.values)).float(),
        )
    values = out.x_dec.numpy()[: mel_src.n_frames]
    return MelSpectrogram(
        values=values, hop_length=mel_src.hop_length, sample_rate=mel_src.sample_rate
    )


def convert_file(req: ConversionRequest) -> ConversionResult:
    """Convert one utterance; always writes the mel sidecar, and a WAV in
    griffinlim mode."""
    model, feature_cfg, _ = load_converter(req.checkpoint_path)
    mel_src = extract_logmel(read_wav(req.source_audio_path), feature_cfg)
    mel_tgt = extract_logmel(read_wav(req.target_audio_path), feature_cfg)
    converted = convert_mel(model, mel_src, mel_tgt)

    out = Path(req.output_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    mel_path = out.with_suffix(".mel")
    write_mel_sidecar(mel_path, converted)
    wav_path: Optional[Path] = None
    if req.vocoder_mode == "griffinlim":
        clip = inverse_logmel(
            read_mel_sidecar(mel_path), feature_cfg, n_iters=req.griffinlim_iters
        )
        wav_path = out.with_suffix(".wav")
        write_wav(wav_path, clip)
    else:
        print(f"external vocoder mode: synthesize from sidecar {mel_path}")
    return ConversionResult(mel_path=mel_path, wav_path=wav_path, n_frames=converted.n_frames)


@dataclass
class BatchReportRow:
    source_id: str
    target_ref: str
    status: str
    mel_path: str
    wav_path: str


@dataclass
class BatchReport:
    rows: list[BatchReportRow]

    @property
    def n_failed(self) -> int:
        return sum(1 for r in self.rows if r.status != "ok")

    @property
    def exit_code(self) -> int:
        """0 when every entry converted, 3 (I/O failure class) otherwise."""
        return 0 if self.n_failed == 0 else 3

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["source_id", "target_ref", "status", "mel_path", "wav_path"])
            for r in self.rows:
                writer.writerow([r.source_id, r.target_ref, r.status, r.mel_path, r.wav_path])


def batch_convert(
    manifest: Manifest,
    target_ref,
    checkpoint_path,
    out_dir,
    vocoder_mode: str = "griffinlim",
    griffinlim_iters: int = 32,
) -> BatchReport:
    """Convert every manifest entry to one target timbre (many-to-one) or to
    per-entry targets given as a mapping file of utterance_id<TAB>wav_path
    (many-to-many). Per-entry failures are recorded, not raised."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model, feature_cfg, _ = load_converter(checkpoint_path)

    target_ref = Path(target_ref)
    mapping: dict[str, Path] = {}
    if target_ref.suffix.lower() in (".tsv", ".txt", ".map"):
        for line in target_ref.read_text(encoding="utf-8").splitlines():
            if line.strip():
                utt, path = line.split("\t")
                mapping[utt] = Path(path)

    def target_for(utt_id: str) -> Path:
        return mapping.get(utt_id, target_ref) if mapping else target_ref

    target_cache: dict[Path, MelSpectrogram] = {}
    rows = []
    for entry in manifest.entries:
        tgt_path = target_for(entry.utterance_id)
        mel_path = out_dir / f"{entry.utterance_id}_converted.mel"
        wav_path = out_dir / f"{entry.utterance_id}_converted.wav"
        try:
            if tgt_path not in target_cache:
                target_cache[tgt_path] = extract_logmel(read_wav(tgt_path), feature_cfg)
            mel_src = extract_logmel(read_wav(manifest.resolve(entry)), feature_cfg)
            converted = convert_mel(model, mel_src, target_cache[tgt_path])
            write_mel_sidecar(mel_path, converted)
            produced_wav = ""
            if vocoder_mode == "griffinlim":
                clip = inverse_logmel(converted, feature_cfg, n_iters=griffinlim_iters)
                write_wav(wav_path, clip)
                produced_wav = str(wav_path)
            rows.append(
                BatchReportRow(
                    entry.utterance_id, str(tgt_path), "ok", str(mel_path), produced_wav
                )
            )
        except Exception as exc:  # noqa: BLE001 - per-entry isolation is the contract
            rows.append(
                BatchReportRow(entry.utterance_id, str(tgt_path), f"failed: {exc}", "", "")
            )
    report = BatchReport(rows=rows)
    report.write_csv(out_dir / "conversion_report.csv")
    return report
