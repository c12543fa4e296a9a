"""Corpus manifests, synthetic multi-speaker data, and triplet sampling.

A manifest is a UTF-8 tab-separated file: utterance_id, relative audio
path, speaker_id, one entry per line. Synthetic speakers are defined by
three fixed formant-like resonances and a pitch range; utterances are
random harmonic tone sequences shaped by the speaker envelope.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import DataError, InputError, ParseError
from .features import AudioClip, FeatureConfig, MelSpectrogram, crop_segment, extract_logmel, read_wav, write_wav

MAX_SAMPLE_RETRIES = 100

FORMANT_BANDS = ((300.0, 1000.0), (1000.0, 2400.0), (2500.0, 4000.0))
# every speaker sings from the same two notes so linguistic content is
# speaker-independent; the spectral envelope is the only speaker cue
SHARED_NOTES = (80.0, 160.0)
FORMANT_GRID = 160.0


@dataclass
class ManifestEntry:
    utterance_id: str
    audio_path: Path
    speaker_id: str


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path = Path(".")

    @property
    def speakers(self) -> list[str]:
        return sorted({e.speaker_id for e in self.entries})

    def by_speaker(self) -> dict[str, list[ManifestEntry]]:
        out: dict[str, list[ManifestEntry]] = {}
        for e in self.entries:
            out.setdefault(e.speaker_id, []).append(e)
        return out

    def speaker_labels(self) -> dict[str, int]:
        return {spk: i for i, spk in enumerate(self.speakers)}

    def resolve(self, entry: ManifestEntry) -> Path:
        return self.root / entry.audio_path

    def validate(self) -> "Manifest":
        seen = set()
        for e in self.entries:
            if e.utterance_id in seen:
                raise ParseError(f"duplicate utterance_id {e.utterance_id!r}")
            seen.add(e.utterance_id)
        groups = self.by_speaker()
        if len(groups) < 2:
            raise DataError("manifest needs >= 2 distinct speakers")
        for spk, entries in groups.items():
            if len(entries) < 2:
                raise DataError(
                    f"speaker {spk!r} has {len(entries)} utterance(s), needs >= 2"
                )
        return self


def load_manifest(path) -> Manifest:
    """Parse and validate a tab-separated manifest file."""
    path = Path(path)
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}"
                )
            entries.append(ManifestEntry(parts[0], Path(parts[1]), parts[2]))
    return Manifest(entries=entries, root=path.parent).validate()


def save_manifest(manifest: Manifest, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in manifest.entries:
            fh.write(f"{e.utterance_id}\t{e.audio_path.as_posix()}\t{e.speaker_id}\n")


@dataclass(frozen=True)
class SpeakerVoice:
    """Fixed spectral identity of one synthetic speaker.

    The note grid pins the harmonic positions an utterance can use, so the
    long-term average spectrum of every utterance shares its peaks.
    """

    formants: tuple[float, float, float]
    bandwidths: tuple[float, float, float]
    notes: tuple[float, ...]

    def envelope(self, freqs: np.ndarray) -> np.ndarray:
        env = np.full_like(freqs, 0.005, dtype=np.float64)
        for f0, bw in zip(self.formants, self.bandwidths):
            env += np.exp(-0.5 * ((freqs - f0) / bw) ** 2)
        return env


def make_speaker_voices(n_speakers: int, rng: np.random.Generator) -> list[SpeakerVoice]:
    """Assign each speaker a distinct formant slot in every band.

    Formants live on the harmonic grid every note excites (multiples of
    the top shared note), so each utterance lights its speaker's formant
    bins exactly and the long-term average spectrum is utterance-stable.
    Band slots are spread so any two speakers differ in at least the two
    upper formants.
    """
    slots_per_band = [
        [f for f in np.arange(FORMANT_GRID, 8000.0, FORMANT_GRID) if lo < f < hi]
        for lo, hi in FORMANT_BANDS
    ]
    voices = []
    for i in range(n_speakers):
        formants = []
        for slots in slots_per_band:
            idx = round(i * (len(slots) - 1) / max(n_speakers - 1, 1))
            formants.append(float(slots[idx]))
        voices.append(
            SpeakerVoice(
                formants=tuple(formants),
                bandwidths=tuple(float(rng.uniform(28.0, 40.0)) for _ in range(3)),
                notes=SHARED_NOTES,
            )
        )
    return voices


def synth_utterance(
    voice: SpeakerVoice, duration_s: float, sample_rate: int, rng: np.random.Generator
) -> AudioClip:
    """A sequence of harmonic tones filtered by the speaker envelope.

    Tones cycle through the speaker's note grid in a random order so each
    utterance covers the same harmonic positions with random timing/phase.
    """
    n_total = int(round(duration_s * sample_rate))
    wave = np.zeros(n_total)
    pos = 0
    order: list[float] = []
    while pos < n_total:
        tone_len = min(int(rng.uniform(0.18, 0.28) * sample_rate), n_total - pos)
        if tone_len < 32:
            break
        if not order:
            order = [voice.notes[k] for k in rng.permutation(len(voice.notes))]
        f0 = order.pop()
        t = np.arange(tone_len) / sample_rate
        tone = np.zeros(tone_len)
        n_harm = int(7800.0 // f0)
        harmonics = np.arange(1, n_harm + 1)
        gains = voice.envelope(harmonics * f0)
        phases = rng.uniform(0, 2 * np.pi, size=n_harm)
        for k, gain, phi in zip(harmonics, gains, phases):
            tone += gain * np.sin(2 * np.pi * k * f0 * t + phi)
        fade = min(int(0.02 * sample_rate), tone_len // 2)
        ramp = np.ones(tone_len)
        ramp[:fade] = np.linspace(0.0, 1.0, fade)
        ramp[-fade:] = np.linspace(1.0, 0.0, fade)
        wave[pos : pos + tone_len] = tone * ramp
        pos += tone_len
    peak = np.max(np.abs(wave))
    if peak > 0:
        wave = 0.7 * wave / peak
    return AudioClip(samples=wave, sample_rate=sample_rate)


def make_synthetic_corpus(
    n_speakers: int,
    n_utts: int,
    duration_s: float,
    rng: np.random.Generator,
    out_dir,
    sample_rate: int = 22050,
) -> Manifest:
    """Generate WAVs plus a manifest for a toy multi-speaker corpus."""
    if n_speakers < 2:
        raise InputError("need >= 2 speakers")
    if n_utts < 2:
        raise InputError("need >= 2 utterances per speaker")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    voices = make_speaker_voices(n_speakers, rng)
    entries = []
    for i, voice in enumerate(voices):
        spk = f"spk{i:02d}"
        for j in range(n_utts):
            clip = synth_utterance(voice, duration_s, sample_rate, rng)
            rel = Path(f"{spk}_utt{j:03d}.wav")
            write_wav(out_dir / rel, clip)
            entries.append(ManifestEntry(f"{spk}_utt{j:03d}", rel, spk))
    manifest = Manifest(entries=entries, root=out_dir)
    save_manifest(manifest, out_dir / "manifest.tsv")
    return manifest.validate()


class MelCache:
    """Extract-once cache of log-mel matrices keyed by utterance id."""

    def __init__(self, manifest: Manifest, cfg: FeatureConfig):
        self.manifest = manifest
        self.cfg = cfg
        self._cache: dict[str, MelSpectrogram] = {}

    def get(self, utterance_id: str) -> MelSpectrogram:
        if utterance_id not in self._cache:
            entry = next(
                (e for e in self.manifest.entries if e.utterance_id == utterance_id), None
            )
            if entry is None:
                raise DataError(f"unknown utterance {utterance_id!r}")
            clip = read_wav(self.manifest.resolve(entry))
            self._cache[utterance_id] = extract_logmel(clip, self.cfg)
        return self._cache[utterance_id]


class Triplet(NamedTuple):
    x_anc: np.ndarray
    x_pos: np.ndarray
    x_neg: np.ndarray
    spk_anc: str
    spk_neg: str


class TripletBatch(NamedTuple):
    """Stacked [B x L_seg x 80] segments with per-row speaker labels."""

    x_anc: np.ndarray
    x_pos: np.ndarray
    x_neg: np.ndarray
    spk_anc: np.ndarray
    spk_neg: np.ndarray


def sample_triplet(
    manifest: Manifest, cache: MelCache, rng: np.random.Generator, l_seg: int
) -> Triplet:
    """Draw one anchor/positive/negative triplet of equal-length crops.

    The negative speaker is drawn first, then the anchor speaker among the
    rest; anchor and positive are distinct utterances of the same speaker,
    each cropped uniformly at random.
    """
    if l_seg % 16 != 0:
        raise InputError(f"segment length {l_seg} not divisible by 16")
    groups = manifest.by_speaker()
    speakers = manifest.speakers
    if len(speakers) < 2:
        raise DataError("triplet sampling needs >= 2 speakers")

    def crop(entry: ManifestEntry) -> np.ndarray:
        melspec = cache.get(entry.utterance_id)
        if melspec.n_frames < l_seg:
            raise DataError(
                f"utterance {entry.utterance_id!r} has {melspec.n_frames} frames < l_seg {l_seg}"
            )
        start = int(rng.integers(0, melspec.n_frames - l_seg + 1))
        return crop_segment(melspec, start, l_seg).values

    for _ in range(MAX_SAMPLE_RETRIES):
        spk_neg = speakers[int(rng.integers(len(speakers)))]
        rest = [s for s in speakers if s != spk_neg]
        spk_anc = rest[int(rng.integers(len(rest)))]
        anchor_utts = groups[spk_anc]
        if len(anchor_utts) < 2:
            continue  # invalid corpus slipped past validation; resample
        i, j = rng.choice(len(anchor_utts), size=2, replace=False)
        neg_entry = groups[spk_neg][int(rng.integers(len(groups[spk_neg])))]
        return Triplet(
            x_anc=crop(anchor_utts[int(i)]),
            x_pos=crop(anchor_utts[int(j)]),
            x_neg=crop(neg_entry),
            spk_anc=spk_anc,
            spk_neg=spk_neg,
        )
    raise DataError("could not sample a valid triplet (speakers need >= 2 utterances)")


def sample_batch(
    manifest: Manifest,
    cache: MelCache,
    rng: np.random.Generator,
    l_seg: int,
    batch_size: int,
) -> TripletBatch:
    labels = manifest.speaker_labels()
    triplets = [sample_triplet(manifest, cache, rng, l_seg) for _ in range(batch_size)]
    return TripletBatch(
        x_anc=np.stack([t.x_anc for t in triplets]),
        x_pos=np.stack([t.x_pos for t in triplets]),
        x_neg=np.stack([t.x_neg for t in triplets]),
        spk_anc=np.array([labels[t.spk_anc] for t in triplets], dtype=np.int64),
        spk_neg=np.array([labels[t.spk_neg] for t in triplets], dtype=np.int64),
    )
