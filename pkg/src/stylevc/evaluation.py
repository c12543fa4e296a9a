"""Objective metrics: mel-cepstral distortion and an embedding-cosine
voice-similarity surrogate, plus speaker-embedding export.

MCD convention: orthonormal DCT-II per log-mel frame, coefficients 1..13
(c0 excluded), per-frame Euclidean distance, scaled by (10/ln 10)*sqrt(2),
averaged over aligned frames (DTW path when enabled, index-aligned
otherwise). The similarity surrogate scores with this artifact's own
speaker encoder, so values are comparable only within one run, never
across systems scored by an external verifier.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.fft import dct
from scipy.stats import t as student_t

from .data import Manifest
from .errors import InputError
from .features import FeatureConfig, MelSpectrogram, extract_logmel, read_wav
from .inference import load_converter
from .model import VoiceConverter

MCD_CONST = (10.0 / math.log(10.0)) * math.sqrt(2.0)
N_CEPSTRA = 13  # coefficients 1..13, c0 excluded


def mel_cepstra(values: np.ndarray) -> np.ndarray:
    """Orthonormal DCT-II over the mel axis; keep coefficients 1..N_CEPSTRA."""
    coeffs = dct(np.asarray(values, dtype=np.float64), type=2, norm="ortho", axis=1)
    return coeffs[:, 1 : N_CEPSTRA + 1]


def _dtw_path_cost(dist: np.ndarray) -> tuple[float, int]:
    """Classic DTW over a pairwise distance matrix: (path cost sum, path length)."""
    n, m = dist.shape
    acc = np.full((n + 1, m + 1), np.inf)
    steps = np.zeros((n + 1, m + 1), dtype=np.int64)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            best = min(
                (acc[i - 1, j - 1], steps[i - 1, j - 1]),
                (acc[i - 1, j], steps[i - 1, j]),
                (acc[i, j - 1], steps[i, j - 1]),
            )
            acc[i, j] = dist[i - 1, j - 1] + best[0]
            steps[i, j] = best[1] + 1
    return float(acc[n, m]), int(steps[n, m])


def mcd(mel_ref: MelSpectrogram, mel_gen: MelSpectrogram, use_dtw: bool = False) -> float:
    """Mel-cepstral distortion in dB between two log-mel matrices."""
    if mel_ref.n_mels != mel_gen.n_mels:
        raise InputError(
            f"mel bin mismatch: {mel_ref.n_mels} vs {mel_gen.n_mels}"
        )
    c_ref = mel_cepstra(mel_ref.values)
    c_gen = mel_cepstra(mel_gen.values)
    if not use_dtw:
        if c_ref.shape[0] != c_gen.shape[0]:
            raise InputError(
                f"frame mismatch without DTW: {c_ref.shape[0]} vs {c_gen.shape[0]}"
            )
        frame_dists = np.linalg.norm(c_ref - c_gen, axis=1)
        return MCD_CONST * float(frame_dists.mean())
    diff = c_ref[:, None, :] - c_gen[None, :, :]
    dist = np.linalg.norm(diff, axis=2)
    cost, length = _dtw_path_cost(dist)
    return MCD_CONST * cost / length


class SpeakerEmbedder:
    """Frozen speaker encoder loaded from a training checkpoint."""

    def __init__(self, checkpoint_path):
        model, feature_cfg, _ = load_converter(checkpoint_path)
        self.model: VoiceConverter = model
        self.feature_cfg: FeatureConfig = feature_cfg

    def embed_mel(self, mel: MelSpectrogram) -> np.ndarray:
        with torch.no_grad():
            emb = self.model.speaker_encoder(
                torch.from_numpy(np.asarray(mel.values)).float()
            )
        return emb.numpy()

    def embed_wav(self, path) -> np.ndarray:
        return self.embed_mel(extract_logmel(read_wav(path), self.feature_cfg))

    def embed(self, item) -> np.ndarray:
        if isinstance(item, MelSpectrogram):
            return self.embed_mel(item)
        return self.embed_wav(item)


def vss_surrogate(generated, target_refs: list, embedder: SpeakerEmbedder) -> float:
    """Cosine between the generated utterance's embedding and the mean of
    the target reference embeddings. Accepts mels or wav paths."""
    if not target_refs:
        raise InputError("need at least one target reference")
    gen = embedder.embed(generated)
    refs = np.mean([embedder.embed(r) for r in target_refs], axis=0)
    denom = np.linalg.norm(gen) * np.linalg.norm(refs)
    if denom < 1e-12:
        raise InputError("zero-norm embedding")
    return float(np.dot(gen, refs) / denom)


def export_embeddings(manifest: Manifest, embedder: SpeakerEmbedder, out_csv) -> int:
    """One CSV row per utterance: utterance_id, speaker_id, embedding values."""
    rows = 0
    dim = None
    with open(out_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        for entry in manifest.entries:
            emb = embedder.embed_wav(manifest.resolve(entry))
            if dim is None:
                dim = emb.shape[0]
                writer.writerow(
                    ["utterance_id", "speaker_id"] + [f"e{i}" for i in range(dim)]
                )
            writer.writerow(
                [entry.utterance_id, entry.speaker_id] + [f"{v:.9g}" for v in emb]
            )
            rows += 1
    return rows


@dataclass
class MetricRow:
    source_id: str
    target_id: str
    mcd_db: float
    vss_cosine: float


@dataclass
class MetricReport:
    rows: list[MetricRow]

    def aggregate(self) -> dict:
        out = {}
        for name in ("mcd_db", "vss_cosine"):
            values = np.array([getattr(r, name) for r in self.rows], dtype=np.float64)
            if values.size == 0:
                out[name] = (math.nan, math.nan)
                continue
            mean = float(values.mean())
            if values.size < 2:
                out[name] = (mean, math.nan)
                continue
            sem = values.std(ddof=1) / math.sqrt(values.size)
            half = float(student_t.ppf(0.975, values.size - 1) * sem)
            out[name] = (mean, half)
        return out

    def write_csv(self, path) -> None:
        agg = self.aggregate()
        with open(path, "w", newline="") as fh:
            fh.write(
                "# voice similarity scored by this run's own speaker encoder; "
                "values are not comparable to external-verifier scores\n"
            )
            writer = csv.writer(fh)
            writer.writerow(["source_id", "target_id", "mcd_db", "vss_cosine"])
            for r in self.rows:
                writer.writerow(
                    [r.source_id, r.target_id, f"{r.mcd_db:.6f}", f"{r.vss_cosine:.6f}"]
                )
            for name, (mean, half) in agg.items():
                fh.write(f"# {name} mean {mean:.6f} +- {half:.6f} (95% CI)\n")


def evaluate_conversions(
    pairs: list[tuple[str, str, MelSpectrogram, MelSpectrogram, list]],
    embedder: SpeakerEmbedder,
    use_dtw: bool = True,
) -> MetricReport:
    """Score (source_id, target_id, source_mel, converted_mel, target_refs).

    MCD compares the conversion against its source (content retention);
    the similarity column compares it against the target references.
    """
    rows = []
    for source_id, target_id, mel_src, mel_conv, target_refs in pairs:
        rows.append(
            MetricRow(
                source_id=source_id,
                target_id=target_id,
                mcd_db=mcd(mel_src, mel_conv, use_dtw=use_dtw),
                vss_cosine=vss_surrogate(mel_conv, target_refs, embedder),
            )
        )
    return MetricReport(rows=rows)
