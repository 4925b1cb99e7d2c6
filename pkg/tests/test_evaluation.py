import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nbp.config import EvalProtocol
from nbp.denoiser import DenoiserConfig, init_params
from nbp.diffusion import DiffusionModel
from nbp.evaluation import (
    MetricReport,
    TaskRecord,
    compare,
    conditional_mse,
    evaluate_run,
    gaussian_fit_loglik,
    read_report,
)
from nbp.schedule import ScheduleConfig, build_schedule
from nbp.synthdata import GPTaskConfig, KernelSpec, sample_gp_task


def test_point_mass_samples_hit_regularized_density():
    samples = np.full((128, 1), 0.3)
    assert gaussian_fit_loglik(samples, [0.3]) == pytest.approx(-0.5 * math.log(2 * math.pi * 1e-6), rel=1e-12)


def test_standard_normal_fit():
    rng = np.random.default_rng(0)
    samples = rng.standard_normal((200_000, 1))
    assert gaussian_fit_loglik(samples, [0.0]) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=5e-3)


def test_loglik_is_per_point():
    # M independent standard-normal coordinates give the same per-point value as one
    rng = np.random.default_rng(1)
    samples = rng.standard_normal((100_000, 4))
    assert gaussian_fit_loglik(samples, np.zeros(4)) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-2)


def test_loglik_input_errors():
    with pytest.raises(ValueError):
        gaussian_fit_loglik(np.zeros((1, 3)), np.zeros(3))
    with pytest.raises(ValueError):
        gaussian_fit_loglik(np.zeros((5, 3)), np.zeros(2))
    with pytest.raises(ValueError):
        gaussian_fit_loglik(np.zeros(5), np.zeros(5))


def test_mse_examples():
    assert conditional_mse(np.array([[1.0, 2.0], [3.0, 4.0]]), [1.0, 2.0]) == 2.0
    assert conditional_mse(np.full((3, 2), 5.0), [5.0, 5.0]) == 0.0
    with pytest.raises(ValueError):
        conditional_mse(np.zeros((3, 2)), [0.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 6))
def test_metrics_invariant_to_point_permutation(seed, m):
    rng = np.random.default_rng(seed)
    samples = rng.normal(size=(40, m))
    truth = rng.normal(size=m)
    perm = rng.permutation(m)
    assert gaussian_fit_loglik(samples[:, perm], truth[perm]) == pytest.approx(gaussian_fit_loglik(samples, truth), abs=1e-10)
    assert conditional_mse(samples[:, perm], truth[perm]) == pytest.approx(conditional_mse(samples, truth), abs=1e-12)


def report(label, values):
    return MetricReport(label, [TaskRecord(i, 1, v, 1.0 - v) for i, v in enumerate(values)])


def test_standard_error_shrinks_with_duplicated_tasks():
    base = [0.1, -0.4, 0.7, 0.2]
    _, se1 = report("a", base).aggregate("loglik")
    mean4, se4 = report("a", base * 4).aggregate("loglik")
    assert mean4 == pytest.approx(np.mean(base))
    # duplicating keeps the spread; with ddof=1 the ratio is sqrt((n-1)/(4n-1)), about 1/sqrt(4)
    n = len(base)
    assert se4 == pytest.approx(se1 * math.sqrt((n - 1) / (4 * n - 1)), rel=1e-12)
    assert se4 < 0.55 * se1


def test_single_task_has_zero_se_and_empty_report_raises():
    assert report("a", [0.3]).aggregate("loglik") == (0.3, 0.0)
    with pytest.raises(ValueError):
        MetricReport("a").aggregate("loglik")


def test_compare_verdict_and_joint_se():
    a = json.loads(report("NBP", [1.0, 1.2]).to_json())
    b = json.loads(report("NDP", [0.5, 0.9]).to_json())
    cmp = compare(a, b)
    assert cmp.verdict == "NBP wins 2/2"
    ll = cmp.rows[0]
    assert ll["metric"] == "loglik"
    assert ll["joint_se"] == pytest.approx(math.hypot(0.1, 0.2), rel=1e-12)
    assert "NBP wins 2/2" in cmp.to_text()
    assert compare(b, a).verdict == "NDP wins 0/2"


def test_compare_same_label_and_ties():
    a = json.loads(report("m", [1.0, 2.0]).to_json())
    cmp = compare(a, a)
    assert cmp.label_b == "m_b"
    assert [r["winner"] for r in cmp.rows] == ["tie", "tie"]


def test_report_files(tmp_path):
    r = report("NBP", [0.25, -0.5])
    csv_path, json_path = r.write(tmp_path, "ev")
    assert csv_path.read_text().splitlines()[0] == "task_seed,n_context,loglik_per_point,mse"
    doc = read_report(json_path)
    assert doc["loglik_normalization"] == "per_point"
    assert doc["n_tasks"] == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    with pytest.raises(ValueError):
        read_report(bad)


def test_evaluate_run_is_order_independent():
    cfg = DenoiserConfig(layers=1, hidden=8, heads=2, t_embed_dim=8)
    model = DiffusionModel(build_schedule(ScheduleConfig(T=6)), cfg, init_params(cfg, 0, zero_head=False))
    tasks = [sample_gp_task(GPTaskConfig(n_target=5), KernelSpec(), s) for s in (11, 12, 13)]
    protocol = EvalProtocol(n_samples=8, repaint=1, n_tasks=3)
    fwd = evaluate_run(model, tasks, protocol, label="x")
    rev = evaluate_run(model, tasks[::-1], protocol, label="x")
    by_seed = {r.task_seed: r for r in rev.records}
    for r in fwd.records:
        assert r == by_seed[r.task_seed]
        assert math.isfinite(r.loglik) and r.mse >= 0
    with pytest.raises(ValueError):
        evaluate_run(model, [], protocol)
