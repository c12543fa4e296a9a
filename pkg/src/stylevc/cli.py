"""Command-line entry point: corpus synthesis, training, conversion,
evaluation, and the gradient self-check, all driven by one TOML config.

Exit codes: 0 success, 2 configuration error, 3 I/O or data error,
4 numeric abort, 5 self-check failure.
"""

from __future__ import annotations

import argparse
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import __version__
from .data import MelCache, load_manifest, make_synthetic_corpus, sample_batch
from .errors import (
    ConfigError,
    DataError,
    IntegrityError,
    NumericError,
    StyleVCError,
    VersionMismatchError,
)
from .evaluation import SpeakerEmbedder, evaluate_conversions, export_embeddings
from .features import FeatureConfig, extract_logmel, read_wav
from .inference import ConversionRequest, convert_file, convert_mel, load_converter
from .losses import LossConfig
from .model import AAMHead, ModelConfig, VoiceConverter
from .training import (
    TrainConfig,
    Trainer,
    create_training,
    gradient_check,
    precondition_for_gradcheck,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_CHECK_FAILED = 5


@dataclass
class RunConfig:
    seed: int
    feature: FeatureConfig
    model: ModelConfig
    loss: LossConfig
    train: TrainConfig
    manifest: Optional[Path] = None
    out_dir: Optional[Path] = None


def load_run_config(path: Optional[str], args: argparse.Namespace) -> RunConfig:
    """Merge the TOML file (if any) with command-line overrides."""
    raw: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc

    seed = raw.get("seed", 0)
    if getattr(args, "seed", None) is not None:
        seed = args.seed

    train_raw = dict(raw.get("train", {}))
    train_raw["seed"] = seed
    if getattr(args, "steps", None) is not None:
        train_raw["steps"] = args.steps
    loss_raw = dict(raw.get("loss", {}))
    for variant in getattr(args, "paper_literal", None) or []:
        key = {
            "kl": "kl_variant",
            "triplet": "triplet_variant",
            "attention": "attention_variant",
        }.get(variant)
        if key is None:
            raise ConfigError(
                f"unknown --paper-literal value {variant!r} "
                "(choose from kl, triplet, attention)"
            )
        loss_raw[key] = "literal"
    model_raw = dict(raw.get("model", {}))
    try:
        feature = FeatureConfig.from_dict(raw.get("feature", {}))
        loss = LossConfig.from_dict(loss_raw)
        model_raw["attention_variant"] = loss.attention_variant
        model = ModelConfig.from_dict(model_raw)
        train = TrainConfig.from_dict(train_raw)
    except TypeError as exc:
        raise ConfigError(f"unknown config key: {exc}") from exc

    data_raw = raw.get("data", {})
    manifest = data_raw.get("manifest")
    out_dir = getattr(args, "out", None) or data_raw.get("out_dir")
    return RunConfig(
        seed=seed,
        feature=feature,
        model=model,
        loss=loss,
        train=train,
        manifest=Path(manifest) if manifest else None,
        out_dir=Path(out_dir) if out_dir else None,
    )


def cmd_synth_data(args) -> int:
    out_dir = Path(args.out)
    if out_dir.exists() and any(out_dir.iterdir()) and not args.force:
        print(f"error: output directory {out_dir} is not empty (use --force)", file=sys.stderr)
        return EXIT_IO
    if args.n_speakers < 2 or args.n_utts < 2:
        print("error: need at least 2 speakers and 2 utterances each", file=sys.stderr)
        return EXIT_CONFIG
    rng = np.random.default_rng(args.seed)
    manifest = make_synthetic_corpus(
        args.n_speakers, args.n_utts, args.duration, rng, out_dir
    )
    print(f"wrote {len(manifest.entries)} utterances; manifest: {out_dir / 'manifest.tsv'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args)
    manifest_path = Path(args.manifest) if args.manifest else cfg.manifest
    if manifest_path is None:
        raise ConfigError("no manifest given (--manifest or [data].manifest)")
    if not manifest_path.exists():
        print(f"error: manifest not found: {manifest_path}", file=sys.stderr)
        return EXIT_IO
    manifest = load_manifest(manifest_path)
    run_dir = cfg.out_dir or Path("runs/default")
    if args.checkpoint:
        trainer = Trainer.restore(args.checkpoint, manifest, run_dir)
    else:
        trainer = create_training(
            manifest, cfg.feature, cfg.model, cfg.loss, cfg.train, run_dir
        )
    history = trainer.train()
    final = trainer.save(run_dir / "final.svc")
    print(
        f"trained {len(history)} steps; final total {history[-1].total:.4f}; "
        f"checkpoint: {final}; metrics: {trainer.metrics_path}"
    )
    return EXIT_OK


def cmd_convert(args) -> int:
    req = ConversionRequest(
        source_audio_path=Path(args.source),
        target_audio_path=Path(args.target),
        checkpoint_path=Path(args.checkpoint),
        output_path=Path(args.out),
        vocoder_mode=args.vocoder,
    )
    result = convert_file(req)
    wav_note = f"; wav: {result.wav_path}" if result.wav_path else ""
    print(f"converted {result.n_frames} frames; mel sidecar: {result.mel_path}{wav_note}")
    return EXIT_OK


def cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    model, feature_cfg, _ = load_converter(args.checkpoint)
    embedder = SpeakerEmbedder(args.checkpoint)
    target_mel = extract_logmel(read_wav(args.target), feature_cfg)
    target_id = Path(args.target).stem
    pairs = []
    for entry in manifest.entries:
        mel_src = extract_logmel(read_wav(manifest.resolve(entry)), feature_cfg)
        converted = convert_mel(model, mel_src, target_mel)
        pairs.append((entry.utterance_id, target_id, mel_src, converted, [target_mel]))
    report = evaluate_conversions(pairs, embedder, use_dtw=not args.no_dtw)
    report.write_csv(args.out)
    agg = report.aggregate()
    print(
        f"evaluated {len(report.rows)} pairs; "
        f"mcd {agg['mcd_db'][0]:.3f} +- {agg['mcd_db'][1]:.3f} dB; "
        f"vss {agg['vss_cosine'][0]:.3f} +- {agg['vss_cosine'][1]:.3f}; "
        f"report: {args.out}"
    )
    if args.export_embeddings:
        rows = export_embeddings(manifest, embedder, args.export_embeddings)
        print(f"exported {rows} embeddings to {args.export_embeddings}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = load_run_config(args.config, args)
    model_cfg = ModelConfig(
        n_mels=cfg.feature.n_mels,
        d_model=args.d_model,
        d_content=max(2, args.d_model // 2),
        n_heads=2,
        conv_kernel=3,
        ff_expansion=2,
        dropout=0.0,
        n_speaker_blocks=1,
        attention_variant=cfg.loss.attention_variant,
    )
    with tempfile.TemporaryDirectory() as tmp:
        rng = np.random.default_rng(cfg.seed)
        corpus = make_synthetic_corpus(2, 2, 0.6, rng, Path(tmp) / "corpus")
        cache = MelCache(corpus, cfg.feature)
        batch = sample_batch(
            corpus, cache, np.random.default_rng(cfg.seed + 1), args.l_seg, args.batch
        )
        import torch

        torch.manual_seed(cfg.seed)
        model = VoiceConverter(model_cfg)
        head = AAMHead(len(corpus.speakers), model_cfg.embedding_dim)
        precondition_for_gradcheck(model)
        report = gradient_check(
            model, head, batch, cfg.loss, lambda2=0.7, tolerance=args.tolerance
        )
    print(report.format_table())
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stylevc",
        description="One-shot voice conversion with stylized transformer blocks.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic multi-speaker corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-speakers", type=int, default=4)
    p.add_argument("--n-utts", type=int, default=8)
    p.add_argument("--duration", type=float, default=2.0, help="seconds per utterance")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train on a manifest")
    p.add_argument("--config", help="TOML run config")
    p.add_argument("--manifest", help="corpus manifest (overrides config)")
    p.add_argument("--out", help="run directory (overrides config)")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p.add_argument(
        "--paper-literal",
        type=lambda s: [v.strip() for v in s.split(",") if v.strip()],
        help="comma list of paper-literal variants: kl,triplet,attention",
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("convert", help="convert one utterance to a target timbre")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True, help="wav providing content")
    p.add_argument("--target", required=True, help="wav providing timbre")
    p.add_argument("--out", required=True, help="output base path")
    p.add_argument("--vocoder", choices=["griffinlim", "external"], default="griffinlim")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("eval", help="convert a manifest to a target and score it")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--target", required=True, help="target reference wav")
    p.add_argument("--out", required=True, help="report CSV path")
    p.add_argument("--no-dtw", action="store_true")
    p.add_argument("--export-embeddings", help="also export embeddings CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient self-check")
    p.add_argument("--config", help="TOML run config")
    p.add_argument("--seed", type=int)
    p.add_argument("--d-model", type=int, default=8)
    p.add_argument("--l-seg", type=int, default=32)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument(
        "--paper-literal",
        type=lambda s: [v.strip() for v in s.split(",") if v.strip()],
        help="comma list of paper-literal variants: kl,triplet,attention",
    )
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except VersionMismatchError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, DataError, IntegrityError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except StyleVCError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
