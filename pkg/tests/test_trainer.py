import math

import numpy as np
import pytest

from nbp import trainer as tr
from nbp.denoiser import DenoiserConfig, init_params
from nbp.diffusion import DiffusionModel
from nbp.schedule import ScheduleConfig, build_schedule
from nbp.synthdata import GPTaskConfig, KernelSpec
from nbp.trainer import (
    NonFiniteLossError,
    TrainConfig,
    TrainState,
    adam_step,
    clip_by_global_norm,
    ema_update,
    load_checkpoint,
    lr_at,
    read_metrics,
    save_checkpoint,
    train,
)

TINY = DenoiserConfig(layers=1, hidden=8, heads=2, t_embed_dim=8)
DATA = GPTaskConfig(n_context_range=(1, 3), n_target=6)
KERNEL = KernelSpec("squared_exponential", 0.25)
SMALL = dict(tasks_per_epoch=8, batch_size=4, warmup_epochs=1, decay_epochs=2, seed=3)


def tiny_model(bridge=True):
    return DiffusionModel(build_schedule(ScheduleConfig(T=20)), TINY, init_params(TINY, 0), bridge_enabled=bridge)


# -- schedule of the learning rate ---------------------------------------------------


def test_lr_schedule_values():
    cfg = TrainConfig()
    spe = cfg.steps_per_epoch
    assert spe == 32
    assert lr_at(0, cfg) == 2e-5
    assert lr_at(20 * spe, cfg) == pytest.approx(1e-3, rel=1e-15)
    assert lr_at(10 * spe, cfg) == pytest.approx(0.5 * (2e-5 + 1e-3), rel=1e-12)
    assert lr_at(120 * spe, cfg) == pytest.approx(0.5 * (1e-3 + 1e-5), rel=1e-12)
    assert lr_at(220 * spe, cfg) == 1e-5
    assert lr_at(10**6, cfg) == 1e-5


def test_lr_schedule_is_continuous():
    cfg = TrainConfig()
    lrs = np.array([lr_at(s, cfg) for s in range(0, 240 * 32)])
    # per-step change is bounded by the steepest warmup/decay slope
    assert np.max(np.abs(np.diff(lrs))) <= (1e-3 - 2e-5) / (20 * 32) + 1e-12
    assert lrs.max() == pytest.approx(1e-3, rel=1e-12)


def test_lr_without_warmup_starts_at_peak():
    cfg = TrainConfig(warmup_epochs=0)
    assert lr_at(0, cfg) == pytest.approx(1e-3, rel=1e-15)


# -- EMA, clipping, Adam -------------------------------------------------------------


def test_ema_update_closed_forms():
    shadow = {"w": np.zeros(3)}
    raw = {"w": np.ones(3)}
    once = ema_update(shadow, raw, 0.995)
    np.testing.assert_allclose(once["w"], 0.005, rtol=1e-15)
    s = shadow
    for _ in range(100):
        s = ema_update(s, raw, 0.995)
    np.testing.assert_allclose(s["w"], 1 - 0.995**100, rtol=1e-12)
    same = ema_update(raw, raw, 0.995)
    np.testing.assert_array_equal(same["w"], raw["w"])


def test_ema_update_rejects_mismatch():
    with pytest.raises(ValueError):
        ema_update({"w": np.zeros(3)}, {"v": np.zeros(3)}, 0.9)
    with pytest.raises(ValueError):
        ema_update({"w": np.zeros(3)}, {"w": np.zeros(4)}, 0.9)


def test_clip_by_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = clip_by_global_norm(g, 1.0)
    assert norm == 5.0
    np.testing.assert_allclose(clipped["a"], 0.6)
    np.testing.assert_allclose(clipped["b"], 0.8)
    untouched, _ = clip_by_global_norm(g, 10.0)
    assert untouched is g


def test_adam_first_step_moves_by_lr():
    state = TrainState.fresh({"w": np.array([1.0, -1.0])})
    adam_step(state, {"w": np.array([0.2, -3.0])}, 0.01, TrainConfig())
    # the bias-corrected first step is lr * sign(g) up to eps
    np.testing.assert_allclose(state.params["w"], [0.99, -0.99], atol=1e-8)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(tasks_per_epoch=8, batch_size=16)
    with pytest.raises(ValueError):
        TrainConfig(ema_decay=1.0)
    with pytest.raises(ValueError):
        TrainConfig(loss_kind="huber")
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)


# -- the loop ------------------------------------------------------------------------


def test_zero_epochs_keeps_initial_weights(tmp_path):
    model = tiny_model()
    init = {k: v.copy() for k, v in model.params.items()}
    state = train(model, DATA, KERNEL, TrainConfig(epochs=0, **SMALL), tmp_path)
    assert state.step == 0
    for k in init:
        np.testing.assert_array_equal(state.params[k], init[k])
        np.testing.assert_array_equal(state.ema[k], init[k])
    assert read_metrics(tmp_path / "metrics.csv") == []
    assert (tmp_path / "checkpoint.json").exists()


def test_training_is_deterministic(tmp_path):
    cfg = TrainConfig(epochs=2, **SMALL)
    a = train(tiny_model(), DATA, KERNEL, cfg, tmp_path / "a")
    b = train(tiny_model(), DATA, KERNEL, cfg, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()
    rows = read_metrics(tmp_path / "a" / "metrics.csv")
    assert [r["step"] for r in rows] == [0, 1, 2, 3]
    assert [r["epoch"] for r in rows] == [0, 0, 1, 1]
    assert all(math.isfinite(r["train_loss"]) for r in rows)


def test_training_moves_params_and_lags_ema(tmp_path):
    model = tiny_model()
    init = {k: v.copy() for k, v in model.params.items()}
    state = train(model, DATA, KERNEL, TrainConfig(epochs=1, **SMALL), tmp_path)
    moved = sum(not np.array_equal(state.params[k], init[k]) for k in init)
    assert moved > len(init) // 2
    k = "head.w1"
    assert np.linalg.norm(state.ema[k] - init[k]) < np.linalg.norm(state.params[k] - init[k])


def test_log_every_thins_metrics(tmp_path):
    train(tiny_model(), DATA, KERNEL, TrainConfig(epochs=2, log_every=3, **SMALL), tmp_path)
    assert [r["step"] for r in read_metrics(tmp_path / "metrics.csv")] == [0, 3]


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    params = {"a": rng.normal(size=(3, 4)).astype(np.float32), "b.c": rng.normal(size=5).astype(np.float32)}
    state = TrainState.fresh(params)
    state.m["a"] += 1.5
    state.step = 17
    path = save_checkpoint(tmp_path / "ck.json", state, {"hello": 1}, train_seed=9)
    back, manifest = load_checkpoint(path)
    assert back.step == 17
    assert manifest["config"] == {"hello": 1}
    assert manifest["rng"] == {"seed": 9, "step": 17}
    for group in ("params", "ema", "m", "v"):
        for k, v in getattr(state, group).items():
            assert getattr(back, group)[k].tobytes() == v.tobytes()


def test_checkpoint_rejects_foreign_files(tmp_path):
    p = tmp_path / "x.json"
    p.write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_checkpoint(p)
    p.write_text('{"format": "nbp-checkpoint", "version": 99}')
    with pytest.raises(ValueError):
        load_checkpoint(p)


def test_resume_reproduces_uninterrupted_run(tmp_path):
    full_cfg = TrainConfig(epochs=2, checkpoint_every=1, **SMALL)
    full = train(tiny_model(), DATA, KERNEL, full_cfg, tmp_path / "full")
    assert (tmp_path / "full" / "checkpoint_step2.json").exists()

    part = tmp_path / "part"
    train(tiny_model(), DATA, KERNEL, TrainConfig(epochs=1, **SMALL), part)
    # a stale row from an interrupted run must be dropped on resume
    with open(part / "metrics.csv", "a") as fh:
        fh.write("2,1,0.5,123.0\n")
    state, _ = load_checkpoint(part / "checkpoint.json")
    model = tiny_model()
    model.params = state.params
    resumed = train(model, DATA, KERNEL, full_cfg, part, resume=state)

    assert (part / "metrics.csv").read_bytes() == (tmp_path / "full" / "metrics.csv").read_bytes()
    for k in full.params:
        assert resumed.params[k].tobytes() == full.params[k].tobytes()
        assert resumed.ema[k].tobytes() == full.ema[k].tobytes()


def test_non_finite_loss_aborts(tmp_path, monkeypatch):
    def nan_loss(tasks, model, rng, loss_kind="l2", with_grad=True):
        return float("nan"), {k: np.zeros_like(v) for k, v in model.params.items()}

    monkeypatch.setattr(tr, "training_loss", nan_loss)
    with pytest.raises(NonFiniteLossError) as err:
        train(tiny_model(), DATA, KERNEL, TrainConfig(epochs=1, **SMALL), tmp_path)
    assert err.value.step == 0
    assert not (tmp_path / "checkpoint.json").exists()


def test_ablated_and_bridge_runs_see_same_batches(tmp_path):
    cfg = TrainConfig(epochs=1, **SMALL)
    batches = [tr.batch_tasks(DATA, KERNEL, cfg.seed, s, cfg) for s in range(cfg.total_steps)]
    again = [tr.batch_tasks(DATA, KERNEL, cfg.seed, s, cfg) for s in range(cfg.total_steps)]
    for b1, b2 in zip(batches, again):
        assert [t.seed for t in b1] == [t.seed for t in b2]
    seeds = [t.seed for b in batches for t in b]
    assert len(set(seeds)) == cfg.tasks_per_epoch
