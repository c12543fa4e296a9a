"""Shared fixtures: a toy corpus and one session-scoped trained model.

The trained fixture runs the full 2000-step toy schedule once; the training
example test, the inference/evaluation quality tests, and the acceptance
criteria all read from it.
"""

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest
import torch

from stylevc.data import Manifest, make_synthetic_corpus
from stylevc.features import FeatureConfig
from stylevc.losses import LossBreakdown, LossConfig
from stylevc.model import ModelConfig
from stylevc.training import TrainConfig, Trainer, create_training

TOY_FEATURE = FeatureConfig()
TOY_MODEL = ModelConfig(
    d_model=32,
    d_content=16,
    n_heads=4,
    conv_kernel=7,
    ff_expansion=2,
    dropout=0.1,
    n_speaker_blocks=2,
)
# paper values: lambda1=10, lambda3=lambda4=1, delta=0.3. The y1 pairing is
# the config-exposed reading that makes the decoder use the style path (the
# literal anchor pairing anti-trains conversion; see decisions ledger).
TOY_LOSS = LossConfig(y1_recon_target="negative")
TOY_TRAIN = TrainConfig(
    batch_size=16,
    lr=2e-4,
    steps=2000,
    seed=77,
    l_seg=48,
    checkpoint_every=1000,
)

TINY_MODEL = ModelConfig(
    d_model=8,
    d_content=4,
    n_heads=2,
    conv_kernel=3,
    ff_expansion=2,
    dropout=0.0,
    n_speaker_blocks=1,
)


@dataclass
class TrainedRun:
    trainer: Trainer
    manifest: Manifest
    history: list[LossBreakdown]
    run_dir: Path
    checkpoint: Path
    wall_seconds: float


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory) -> Manifest:
    out = tmp_path_factory.mktemp("toy_corpus")
    return make_synthetic_corpus(4, 8, 1.2, np.random.default_rng(11), out)


@pytest.fixture(scope="session")
def trained(toy_corpus, tmp_path_factory) -> TrainedRun:
    run_dir = tmp_path_factory.mktemp("toy_run")
    trainer = create_training(
        toy_corpus, TOY_FEATURE, TOY_MODEL, TOY_LOSS, TOY_TRAIN, run_dir
    )
    start = time.monotonic()
    history = trainer.train(print_every=500)
    wall = time.monotonic() - start
    ckpt = trainer.save(run_dir / "final.svc")
    return TrainedRun(
        trainer=trainer,
        manifest=toy_corpus,
        history=history,
        run_dir=run_dir,
        checkpoint=ckpt,
        wall_seconds=wall,
    )
