import json

import numpy as np
import pytest
import torch

from mmhomog.config import parse_config
from mmhomog.data import GenerationConfig, generate_corpus, split
from mmhomog.errors import ConfigError, NumericalAbort
from mmhomog.networks import NetworkConfig, state_fingerprint
from mmhomog.trainer import TrainConfig, Trainer, detect_collapse, train


def small_net(**kw):
    base = dict(image_size=[32, 32], base_width=8, registration_width=4)
    base.update(kw)
    return NetworkConfig(**base)


@pytest.fixture(scope="module")
def corpus():
    cfg = GenerationConfig(source_size=48, patch_size=32, rho=4, count=10, seed=0,
                           moving_modality="invert", fixed_modality="edge_magnitude")
    return split(generate_corpus(cfg), (0.8, 0.2), 0)


def batch(view, n=4):
    return torch.from_numpy(view.moving[:n]).float(), torch.from_numpy(view.fixed[:n]).float()


def test_phase_isolation_bitwise(corpus):
    tv, _ = corpus
    tr = Trainer(TrainConfig(epochs=1), small_net(), steps_per_epoch=5)
    mv, fx = batch(tv)
    m = tr.model
    for _ in range(3):
        rep = (state_fingerprint(m.encoder), state_fingerprint(m.projector))
        reg = state_fingerprint(m.registration)
        tr.gl_step(mv, fx)
        assert (state_fingerprint(m.encoder), state_fingerprint(m.projector)) == rep
        assert state_fingerprint(m.registration) != reg
        reg = state_fingerprint(m.registration)
        tr.marl_step(mv, fx)
        assert state_fingerprint(m.registration) == reg
        assert state_fingerprint(m.encoder) != rep[0]


def test_gl_restores_trainable_flags(corpus):
    tv, _ = corpus
    tr = Trainer(TrainConfig(epochs=1), small_net())
    tr.gl_step(*batch(tv))
    assert all(p.requires_grad for p in tr.model.parameters())


@pytest.mark.parametrize("value", [10.0, -10.0])
def test_theta_gradient_clipped_by_value(corpus, value):
    tv, _ = corpus
    tr = Trainer(TrainConfig(epochs=1, schedule="constant"), small_net())
    for p in tr.model.params("theta"):
        p.register_hook(lambda g, v=value: torch.full_like(g, v))
    r = tr.gl_step(*batch(tv))
    n = sum(p.numel() for p in tr.model.params("theta"))
    assert r.grad_norm == pytest.approx(abs(value) * np.sqrt(n), rel=1e-6)
    for p in tr.model.params("theta"):
        assert torch.all(p.grad == np.sign(value))


def test_representation_gradients_not_clipped(corpus):
    tv, _ = corpus
    tr = Trainer(TrainConfig(epochs=1), small_net())
    for p in tr.model.params("eta"):
        p.register_hook(lambda g: torch.full_like(g, 10.0))
    tr.marl_step(*batch(tv))
    assert all(torch.all(p.grad == 10.0) for p in tr.model.params("eta"))


def test_gl_single_batch_overfit(corpus):
    tv, _ = corpus
    tr = Trainer(TrainConfig(epochs=1, schedule="constant", max_lr=1e-3), small_net())
    mv, fx = batch(tv)
    losses = [tr.gl_step(mv, fx).loss for _ in range(200)]
    assert np.mean(losses[-10:]) < losses[0]


def test_marl_single_batch_overfit(corpus):
    tv, _ = corpus
    tr = Trainer(TrainConfig(epochs=1, schedule="constant"), small_net())
    mv, fx = batch(tv)
    losses = [tr.marl_step(mv, fx).loss for _ in range(200)]
    assert np.mean(losses[-10:]) < 0.5 * losses[0]


def test_joint_step_moves_everything(corpus):
    tv, _ = corpus
    tr = Trainer(TrainConfig(epochs=1, no_alternating=True), small_net())
    before = {k: state_fingerprint(v) for k, v in tr.model.role_modules().items()}
    out = tr.train_batch(*batch(tv))
    assert list(out) == ["JOINT"]
    after = {k: state_fingerprint(v) for k, v in tr.model.role_modules().items()}
    assert all(before[k] != after[k] for k in before)


def test_metrics_bookkeeping(tmp_path, corpus):
    tv, ev = corpus
    res = train(TrainConfig(epochs=2, batch_size=8), small_net(), tv, ev, out_dir=tmp_path)
    steps = [r for r in res.metrics if "phase" in r]
    assert [(r["t"], r["phase"]) for r in steps] == [(0, "GL"), (0, "MARL"), (1, "GL"), (1, "MARL")]
    assert set(steps[0]) == {"t", "phase", "loss", "lr", "grad_norm", "collapse_flag"}
    evals = [r for r in res.metrics if r.get("split") == "eval"]
    assert [r["epoch"] for r in evals] == [0, 1]
    lines = [json.loads(x) for x in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert lines == res.metrics
    assert [p.name for p in res.checkpoints] == ["checkpoint_epoch000.pt", "checkpoint_epoch001.pt"]


@pytest.mark.filterwarnings("ignore:Detected call of")
def test_one_cycle_schedule_shape():
    tr = Trainer(TrainConfig(epochs=4), small_net(), steps_per_epoch=25)
    lrs = []
    for _ in range(tr.total_steps):
        lrs.append(tr.opt_theta.param_groups[0]["lr"])
        assert tr.opt_rep.param_groups[0]["lr"] == lrs[-1]
        tr._advance_schedules()
    assert lrs[0] < 3e-4
    assert max(lrs) == pytest.approx(3e-4, rel=1e-9)
    assert lrs[-1] < 1e-5
    tr._advance_schedules()  # stepping past the end is a no-op


def test_training_is_deterministic(corpus):
    tv, ev = corpus
    a = train(TrainConfig(epochs=2, batch_size=4, seed=3), small_net(), tv, ev)
    b = train(TrainConfig(epochs=2, batch_size=4, seed=3), small_net(), tv, ev)
    assert a.metrics == b.metrics
    c = train(TrainConfig(epochs=2, batch_size=4, seed=4), small_net(), tv, ev)
    assert c.metrics != a.metrics


def test_non_finite_input_aborts(corpus):
    tv, _ = corpus
    tr = Trainer(TrainConfig(epochs=1), small_net())
    mv, fx = batch(tv)
    mv[0, 0, 3, 3] = float("nan")
    with pytest.raises(NumericalAbort) as exc:
        tr.gl_step(mv, fx, batch_index=5)
    assert exc.value.batch_index == 5


def test_detect_collapse_examples(corpus):
    _, ev = corpus
    tr = Trainer(TrainConfig(epochs=1), small_net())
    m = tr.model
    # zero-initialised registration on misaligned data: condition (b), masked during warm-up
    assert not detect_collapse(m, ev.moving, ev.fixed, ev.truth, step=0).flag
    rep = detect_collapse(m, ev.moving, ev.fixed, ev.truth, step=500)
    assert rep.flag and rep.mean_offset == 0.0 and rep.identity_mace > 1.0
    # without truth only the feature-variance condition can fire
    assert not detect_collapse(m, ev.moving, ev.fixed, step=500).flag
    # constant encoder output
    with torch.no_grad():
        for p in m.encoder.parameters():
            p.zero_()
    rep = detect_collapse(m, ev.moving, ev.fixed, step=500)
    assert rep.flag and rep.spatial_variance < 1e-6


def test_config_rejects_unknown_keys():
    cfg = parse_config({"train": {"epochs": 3, "lambda": 0.01}, "network": {"base_width": 8}})
    assert cfg.train.lambda_ == 0.01 and cfg.network.base_width == 8
    with pytest.raises(ConfigError):
        parse_config({"train": {"epochs": 3, "learning_rate": 1e-3}})
    with pytest.raises(ConfigError):
        parse_config({"trian": {}})


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(schedule="cosine")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
