import json
import math
import struct
import statistics

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import stylevc.losses as losses_mod
from stylevc.data import make_synthetic_corpus, MelCache, sample_batch
from stylevc.errors import (
    CheckpointError,
    ConfigError,
    IntegrityError,
    NumericError,
    VersionMismatchError,
)
from stylevc.features import FeatureConfig
from stylevc.losses import LossConfig
from stylevc.model import AAMHead, ModelConfig, VoiceConverter
from stylevc.training import (
    TrainConfig,
    Trainer,
    create_training,
    gradient_check,
    lambda2_at,
    load_checkpoint,
    precondition_for_gradcheck,
    save_checkpoint,
)

from conftest import TINY_MODEL

FCFG = FeatureConfig()


def tiny_train_cfg(**kw):
    defaults = dict(
        batch_size=2, lr=2e-4, steps=20, seed=5, l_seg=32, checkpoint_every=0
    )
    defaults.update(kw)
    return TrainConfig(**defaults)


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("small_corpus")
    return make_synthetic_corpus(2, 2, 0.6, np.random.default_rng(3), out)


@pytest.fixture()
def tiny_trainer(small_corpus, tmp_path):
    return create_training(
        small_corpus, FCFG, TINY_MODEL, LossConfig(), tiny_train_cfg(), tmp_path / "run"
    )


# ---------------------------------------------------------------- lambda2 schedule


def test_lambda2_endpoints():
    cfg = tiny_train_cfg(steps=1000, lambda2_ramp_steps=200)
    assert lambda2_at(0, cfg) == pytest.approx(1e-4)
    assert lambda2_at(200, cfg) == 1.0
    assert lambda2_at(10_000, cfg) == 1.0


def test_lambda2_midpoint():
    cfg = tiny_train_cfg(steps=1000, lambda2_ramp_steps=200)
    assert abs(lambda2_at(100, cfg) - (1e-4 + 1.0) / 2) < 1e-9


def test_lambda2_default_ramp_is_fifth_of_steps():
    cfg = tiny_train_cfg(steps=1000)
    assert cfg.ramp_steps == 200


@settings(max_examples=50, deadline=None)
@given(a=st.integers(0, 3000), b=st.integers(0, 3000))
def test_lambda2_monotone(a, b):
    cfg = tiny_train_cfg(steps=1000, lambda2_ramp_steps=333)
    lo, hi = sorted((a, b))
    assert lambda2_at(lo, cfg) <= lambda2_at(hi, cfg) + 1e-12


def test_train_config_validation():
    with pytest.raises(ConfigError):
        tiny_train_cfg(batch_size=0)
    with pytest.raises(ConfigError):
        tiny_train_cfg(lr=0.0)
    with pytest.raises(ConfigError):
        tiny_train_cfg(l_seg=40)
    with pytest.raises(ConfigError):
        tiny_train_cfg(lambda2_start=2.0)


# ---------------------------------------------------------------- determinism


def test_fixed_seed_reproduces_losses(small_corpus, tmp_path):
    runs = []
    for name in ("a", "b"):
        tr = create_training(
            small_corpus, FCFG, TINY_MODEL, LossConfig(), tiny_train_cfg(), tmp_path / name
        )
        runs.append([b.total for b in tr.train(5, print_every=0)])
    assert runs[0] == runs[1]


def test_zero_lr_keeps_parameters(small_corpus, tmp_path):
    tr = create_training(
        small_corpus, FCFG, TINY_MODEL, LossConfig(),
        tiny_train_cfg(lr=1e-30), tmp_path / "r",
    )
    before = {k: v.clone() for k, v in tr.model.state_dict().items()}
    tr.train(2, print_every=0)
    for k, v in tr.model.state_dict().items():
        torch.testing.assert_close(v, before[k], atol=1e-12, rtol=0)


def test_optimizer_covers_only_model_and_head(tiny_trainer):
    opt_params = {id(p) for g in tiny_trainer.optimizer.param_groups for p in g["params"]}
    module_params = {id(p) for p in tiny_trainer.model.parameters()}
    module_params |= {id(p) for p in tiny_trainer.aam_head.parameters()}
    assert opt_params == module_params


def test_adam_matches_scalar_reference():
    # 1-parameter quadratic, torch Adam vs hand-rolled update
    lr, b1, b2, eps = 0.1, 0.9, 0.99, 1e-6
    w = torch.tensor([1.0], dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([w], lr=lr, betas=(b1, b2), eps=eps)
    w_ref, m, v = 1.0, 0.0, 0.0
    for t in range(1, 101):
        opt.zero_grad()
        loss = 0.5 * w**2
        loss.backward()
        opt.step()
        g = w_ref
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        w_ref = w_ref - lr * m_hat / (math.sqrt(v_hat) + eps)
        assert abs(float(w.detach()) - w_ref) < 1e-10


def test_metrics_csv_columns(tiny_trainer):
    tiny_trainer.train(2, print_every=0)
    lines = tiny_trainer.metrics_path.read_text().splitlines()
    assert lines[0] == "step,l_vae_y1,l_vae_y2,l_aam,l_tri,total,lambda2"
    assert len(lines) == 3


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_resume_bitwise(small_corpus, tmp_path):
    tr_a = create_training(
        small_corpus, FCFG, TINY_MODEL, LossConfig(), tiny_train_cfg(), tmp_path / "a"
    )
    tr_a.train(3, print_every=0)
    ckpt = tr_a.save(tmp_path / "mid.svc")
    cont = [b.total for b in tr_a.train(10, print_every=0)]

    tr_b = Trainer.restore(ckpt, small_corpus, tmp_path / "b")
    assert tr_b.step_idx == 3
    resumed = [b.total for b in tr_b.train(10, print_every=0)]
    assert resumed == cont
    for (ka, va), (kb, vb) in zip(
        tr_a.model.state_dict().items(), tr_b.model.state_dict().items()
    ):
        assert ka == kb
        assert torch.equal(va, vb), ka


def test_checkpoint_round_trip_tensors(tmp_path):
    tensors = {
        "a": torch.randn(3, 4),
        "b": torch.arange(5, dtype=torch.int64),
        "c": torch.randint(0, 255, (7,), dtype=torch.uint8),
    }
    save_checkpoint(
        {"step": 9, "config": {"x": 1}, "tensors": tensors}, tmp_path / "t.svc"
    )
    state = load_checkpoint(tmp_path / "t.svc")
    assert state["step"] == 9
    assert torch.equal(state["tensors"]["a"], tensors["a"])
    assert torch.equal(state["tensors"]["b"], tensors["b"])
    assert torch.equal(state["tensors"]["c"], tensors["c"])


def test_truncated_checkpoint_rejected(tmp_path):
    p = tmp_path / "t.svc"
    save_checkpoint({"step": 0, "config": {}, "tensors": {"a": torch.ones(64)}}, p)
    raw = p.read_bytes()
    p.write_bytes(raw[:-40])
    with pytest.raises(IntegrityError, match="truncated"):
        load_checkpoint(p)


def test_corrupted_checkpoint_rejected(tmp_path):
    p = tmp_path / "t.svc"
    save_checkpoint({"step": 0, "config": {}, "tensors": {"a": torch.ones(64)}}, p)
    raw = bytearray(p.read_bytes())
    raw[-5] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError, match="checksum"):
        load_checkpoint(p)


def test_version_mismatch_names_versions(tmp_path):
    p = tmp_path / "t.svc"
    save_checkpoint({"step": 0, "config": {}, "tensors": {"a": torch.ones(4)}}, p)
    raw = p.read_bytes()
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen])
    header["format_version"] = 99
    new_header = json.dumps(header).encode()
    p.write_bytes(raw[:8] + struct.pack("<Q", len(new_header)) + new_header + raw[16 + hlen :])
    with pytest.raises(VersionMismatchError, match="99"):
        load_checkpoint(p)


def test_shape_mismatch_names_tensor(small_corpus, tmp_path):
    tr = create_training(
        small_corpus, FCFG, TINY_MODEL, LossConfig(), tiny_train_cfg(), tmp_path / "a"
    )
    ckpt = tr.save(tmp_path / "tiny.svc")
    state = load_checkpoint(ckpt)
    other = VoiceConverter(ModelConfig(d_model=16, d_content=8, n_heads=2,
                                       conv_kernel=3, ff_expansion=2, dropout=0.0,
                                       n_speaker_blocks=1))
    from stylevc.training import apply_model_tensors

    with pytest.raises(CheckpointError, match="model\\."):
        apply_model_tensors(other, state["tensors"], "model")


def test_nonfinite_loss_aborts(tiny_trainer):
    with torch.no_grad():
        tiny_trainer.model.decoder.out_proj.weight.fill_(float("nan"))
    with pytest.raises(NumericError, match="non-finite"):
        tiny_trainer.train_step(tiny_trainer.next_batch())


# ---------------------------------------------------------------- gradient check


@pytest.fixture(scope="module")
def grad_batch(small_corpus):
    cache = MelCache(small_corpus, FCFG)
    return sample_batch(small_corpus, cache, np.random.default_rng(1), 32, 2)


def test_gradient_check_passes(small_corpus, grad_batch, tmp_path):
    tr = create_training(
        small_corpus, FCFG, TINY_MODEL, LossConfig(), tiny_train_cfg(), tmp_path / "g"
    )
    precondition_for_gradcheck(tr.model)
    report = gradient_check(
        tr.model, tr.aam_head, grad_batch, LossConfig(), lambda2=0.7
    )
    assert report.passed, report.format_table()
    assert report.max_rel_err < 1e-4


def test_gradient_check_catches_corrupted_backward(
    small_corpus, grad_batch, tmp_path, monkeypatch
):
    # corrupt only the backward of the KL term; FD sees the true loss, so
    # KL-path parameter groups must fail
    class FlipGrad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x

        @staticmethod
        def backward(ctx, grad):
            return -grad

    true_vae_loss = losses_mod.vae_loss

    def corrupted_vae_loss(x, x_dec, latent, variant="standard"):
        recon, kl = true_vae_loss(x, x_dec, latent, variant)
        return recon, FlipGrad.apply(kl)

    monkeypatch.setattr(losses_mod, "vae_loss", corrupted_vae_loss)
    tr = create_training(
        small_corpus, FCFG, TINY_MODEL, LossConfig(), tiny_train_cfg(), tmp_path / "g"
    )
    precondition_for_gradcheck(tr.model)
    report = gradient_check(tr.model, tr.aam_head, grad_batch, LossConfig())
    assert not report.passed
    failing = {g.name for g in report.groups if g.rel_err >= 1e-4}
    assert any("std_conv" in name or "mean_conv" in name for name in failing)


def test_gradient_check_frozen_group_zero(small_corpus, grad_batch, tmp_path):
    # with lambda3=0 the AAM head is detached from the loss: analytic and FD
    # gradients must both vanish within the noise floor
    tr = create_training(
        small_corpus, FCFG, TINY_MODEL, LossConfig(lambda3=0.0),
        tiny_train_cfg(), tmp_path / "g",
    )
    precondition_for_gradcheck(tr.model)
    report = gradient_check(
        tr.model, tr.aam_head, grad_batch, LossConfig(lambda3=0.0)
    )
    aam_rows = [g for g in report.groups if g.name.startswith("aam.")]
    assert aam_rows
    for row in aam_rows:
        assert abs(row.analytic) < 1e-12
        assert abs(row.finite_diff) < 1e-8
        assert row.rel_err < 1e-4


# ---------------------------------------------------------------- toy learning


def test_toy_training_reconstruction_decreases(trained):
    # part 1 is the same-speaker reconstruction under either y1 pairing
    recon = [b.l_recon_parts[1] for b in trained.history]
    first = statistics.mean(recon[:100])
    last = statistics.mean(recon[-100:])
    assert last < 0.5 * first, f"smoothed recon {first:.3f} -> {last:.3f}"
