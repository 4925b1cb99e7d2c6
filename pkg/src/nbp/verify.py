"""Self-check suite: every closed-form identity the model relies on, evaluated numerically.

Each check returns a :class:`CheckResult`; :func:`run_identity_suite` runs
them all and :func:`format_table` renders the pass/fail table printed by the
``verify`` subcommand.  Passing a hand-modified schedule is supported on
purpose, so that a broken coefficient shows up as a named failure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .ddpm_reference import DDPMReference
from .denoiser import DenoiserConfig, bi_block, init_params, predict_noise, preprocess
from .diffusion import (
    DiffusionModel,
    SamplerConfig,
    conditional_sample,
    initial_state,
    posterior_mean_oracle,
    q_marginal_sample,
    q_step,
    reverse_mean,
    training_loss,
)
from .schedule import (
    NoiseSchedule,
    ScheduleConfig,
    bridge_correction_coeff,
    bridge_correction_coeff_unsimplified,
    build_schedule,
    gamma_bar_direct,
    snr_form_coeff,
)
from .synthdata import GPTaskConfig, KernelSpec, sample_gp_task


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _result(name: str, value: float, tol: float, what: str = "max residual") -> CheckResult:
    ok = bool(np.isfinite(value) and value <= tol)
    return CheckResult(name, ok, f"{what} {value:.3e} (tol {tol:.0e})")


# -- schedule ------------------------------------------------------------------------


def check_gamma_bar_recurrence(s: NoiseSchedule) -> CheckResult:
    direct = gamma_bar_direct(s.alpha_bar, s.gamma)
    return _result("gamma_bar recurrence vs direct sum", float(np.max(np.abs(direct - s.gamma_bar))), 1e-12)


def telescoping_residual(s: NoiseSchedule) -> float:
    worst = 0.0
    ab = s.alpha_bar
    for t in range(1, s.T + 1):
        total = math.fsum(s.beta[k] * ab[t] / ab[k] for k in range(1, t + 1))
        worst = max(worst, abs(total - (1.0 - ab[t])))
    return worst


def check_telescoping(s: NoiseSchedule) -> CheckResult:
    return _result("telescoping variance sum", telescoping_residual(s), 1e-10)


def check_gamma_shape(s: NoiseSchedule) -> CheckResult:
    if s.bridge:
        ok = s.gamma[s.T] == 1.0 and bool(np.all(np.diff(s.gamma[1:]) > 0))
        return CheckResult("gamma_T = 1 and gamma increasing", ok, f"gamma_T = {float(s.gamma[s.T])!r}")
    zero = not (np.any(s.gamma) or np.any(s.gamma_bar) or np.any(s.c_bridge))
    return CheckResult("ablation closure (gamma, gamma_bar, C all zero)", zero, "all zero" if zero else "nonzero entries")


def check_correction_table(s: NoiseSchedule) -> CheckResult:
    ts = range(1, s.T + 1)
    worst = max(abs(s.c_bridge[t] - bridge_correction_coeff(s, t)) for t in ts)
    return _result("stored C(t) matches -gamma_t/sqrt(1-beta_t)", worst, 1e-12)


def check_correction_forms(s: NoiseSchedule) -> CheckResult:
    worst = 0.0
    for t in range(1, s.T + 1):
        c = bridge_correction_coeff(s, t)
        worst = max(worst, abs(c - bridge_correction_coeff_unsimplified(s, t)), abs(c - snr_form_coeff(s, t)))
    return _result("C(t) simplified / unsimplified / SNR forms", worst, 1e-12)


# -- diffusion identities ------------------------------------------------------------


def marginal_mc_worst_z(bridge: bool, n_chains: int = 200_000, seed: int = 0, y0: float = 1.0, x: float = 2.0) -> float:
    """Largest |z| over t of step-composed chain mean/variance against the closed form (T=50 linear)."""
    s = build_schedule(ScheduleConfig(kind="linear", T=50), bridge=bridge)
    rng = np.random.default_rng(seed)
    y = np.full(n_chains, y0)
    worst = 0.0
    for t in range(1, s.T + 1):
        y = q_step(y, x, t, rng.standard_normal(n_chains), s)
        mean = math.sqrt(s.alpha_bar[t]) * y0 + s.gamma_bar[t] * x
        var = 1.0 - s.alpha_bar[t]
        m_hat = y.mean()
        c = y - m_hat
        v_hat = float(c @ c) / (n_chains - 1)
        # standard error of the sample variance from the sample fourth moment
        se_v = math.sqrt(max(float(np.mean(c**4)) - v_hat**2, 1e-300) / n_chains)
        worst = max(worst, abs(m_hat - mean) / math.sqrt(var / n_chains), abs(v_hat - var) / se_v)
    return worst


def check_marginal(bridge: bool, n_chains: int = 200_000) -> CheckResult:
    z = marginal_mc_worst_z(bridge, n_chains)
    label = "bridge" if bridge else "ablation"
    return _result(f"step chain vs closed-form marginal ({label})", z, 4.0, "worst |z|")


def reparameterization_residual(s: NoiseSchedule, n: int = 1000, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        t = int(rng.integers(2, s.T + 1))
        y0, x_a, eps = rng.normal(0.0, 2.0, size=3)
        y_t = q_marginal_sample(y0, x_a, t, eps, s)
        via_eps = reverse_mean(y_t, x_a, t, eps, s)
        oracle = posterior_mean_oracle(y_t, y0, x_a, t, s)
        worst = max(worst, abs(float(via_eps) - float(oracle)))
    return worst


def check_reparameterization(s: NoiseSchedule) -> CheckResult:
    return _result("reverse mean with true noise = posterior mean", reparameterization_residual(s), 1e-8)


def _small_model(schedule: NoiseSchedule, bridge: bool, seed: int = 0, dtype=np.float64) -> DiffusionModel:
    cfg = DenoiserConfig(layers=1, hidden=8, heads=2, t_embed_dim=8)
    return DiffusionModel(schedule, cfg, init_params(cfg, seed, dtype, zero_head=False), bridge_enabled=bridge)


def ablation_residuals(seed: int = 0, n_inputs: int = 100) -> dict[str, float]:
    """Bridge-disabled ops against the standalone DDPM reference."""
    sched = build_schedule(ScheduleConfig(kind="cosine", T=500)).without_bridge()
    ref = DDPMReference(sched.beta[1:])
    rng = np.random.default_rng(seed)
    out = {"q_step": 0.0, "q_marginal_sample": 0.0, "reverse_mean": 0.0}
    for _ in range(n_inputs):
        t = int(rng.integers(1, sched.T + 1))
        y, x_a, eps = rng.normal(size=(3, 5))
        out["q_step"] = max(out["q_step"], float(np.max(np.abs(q_step(y, x_a, t, eps, sched) - ref.q_step(y, t, eps)))))
        out["q_marginal_sample"] = max(
            out["q_marginal_sample"],
            float(np.max(np.abs(q_marginal_sample(y, x_a, t, eps, sched) - ref.q_marginal(y, t, eps)))),
        )
        out["reverse_mean"] = max(
            out["reverse_mean"], float(np.max(np.abs(reverse_mean(y, x_a, t, eps, sched) - ref.reverse_mean(y, t, eps))))
        )

    small = build_schedule(ScheduleConfig(kind="cosine", T=20)).without_bridge()
    small_ref = DDPMReference(small.beta[1:])
    model = _small_model(small, bridge=False, seed=seed)
    eps_fn = lambda x, y, t: model.predict(x, y, t).value  # noqa: E731
    tasks = [sample_gp_task(GPTaskConfig(n_target=6, n_context_range=(1, 3)), KernelSpec(), seed * 1000 + i) for i in range(4)]
    ours, _ = training_loss(tasks, model, np.random.default_rng(seed), with_grad=False)
    theirs = small_ref.training_loss([t.y for t in tasks], [t.x for t in tasks], eps_fn, np.random.default_rng(seed))
    out["training_loss"] = abs(ours - theirs)

    task = tasks[0]
    x_c, y_c = task.context()
    x_t, _ = task.target()
    s_ours = conditional_sample(x_c, y_c, x_t, model, SamplerConfig(repaint_repeats=2, seed=seed), n_samples=3)
    s_ref = small_ref.conditional_sample(x_c, y_c, x_t, eps_fn, repeats=2, seed=seed, n_samples=3)
    out["conditional_sample"] = float(np.max(np.abs(s_ours - s_ref)))
    return out


def check_ablation() -> CheckResult:
    res = ablation_residuals()
    worst_name = max(res, key=res.get)
    return CheckResult(
        "ablation equals plain DDPM (5 ops)",
        all(v <= 1e-12 for v in res.values()),
        f"worst {worst_name} {res[worst_name]:.3e} (tol 1e-12)",
    )


# -- denoiser ------------------------------------------------------------------------


def n_equivariance_error(seed: int, N: int = 7, D: int = 3) -> float:
    cfg = DenoiserConfig(layers=2, hidden=16, heads=4, t_embed_dim=16)
    params = init_params(cfg, seed, np.float32, zero_head=False)
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2, 2, (1, N, D)).astype(np.float32)
    y = rng.normal(size=(1, N, D)).astype(np.float32)
    t = np.array([int(rng.integers(1, 501))])
    perm = rng.permutation(N)
    base = predict_noise(x, y, t, cfg, params).value
    moved = predict_noise(x[:, perm], y[:, perm], t, cfg, params).value
    return float(np.max(np.abs(moved - base[:, perm])))


def d_equivariance_error(seed: int, N: int = 5, D: int = 4) -> float:
    cfg = DenoiserConfig(layers=1, hidden=16, heads=4, t_embed_dim=16)
    params = init_params(cfg, seed, np.float32, zero_head=False)
    rng = np.random.default_rng(seed)
    s = nx.Tensor(rng.normal(size=(2, N, D, cfg.hidden)).astype(np.float32))
    perm = rng.permutation(D)
    base, base_skip = bi_block(s, params, 0, cfg)
    moved, moved_skip = bi_block(nx.Tensor(s.value[:, :, perm]), params, 0, cfg)
    return float(
        max(np.max(np.abs(moved.value - base.value[:, :, perm])), np.max(np.abs(moved_skip.value - base_skip.value[:, :, perm])))
    )


def check_equivariance(n_seeds: int = 5) -> list[CheckResult]:
    en = max(n_equivariance_error(s) for s in range(n_seeds))
    ed = max(d_equivariance_error(s) for s in range(n_seeds))
    return [
        _result("point-axis permutation equivariance", en, 1e-5, "max deviation"),
        _result("feature-axis permutation equivariance", ed, 1e-5, "max deviation"),
    ]


def gradient_check_error(seed: int, names: list[str] | None = None) -> float:
    """Worst relative error of training-loss gradients vs central differences (float64)."""
    sched = build_schedule(ScheduleConfig(kind="cosine", T=50))
    model = _small_model(sched, bridge=True, seed=seed)
    # zero biases put ReLU inputs exactly on the kink wherever a whole skip row is dead
    brng = np.random.default_rng([seed, 1])
    for k in model.params:
        if k.rsplit(".", 1)[-1].startswith("b"):
            model.params[k] = brng.uniform(-0.1, 0.1, model.params[k].shape)
    tasks = [sample_gp_task(GPTaskConfig(n_target=5, n_context_range=(1, 2)), KernelSpec(), seed * 7 + i) for i in range(2)]
    _, grads = training_loss(tasks, model, np.random.default_rng(seed))
    rng = np.random.default_rng(seed)
    if names is None:
        # key biases are skipped: softmax ignores a uniform score shift, so their gradient is exactly zero
        keys = [k for k in sorted(model.params) if not k.endswith(".bk")]
        names = [keys[i] for i in rng.choice(len(keys), size=3, replace=False)]
    worst = 0.0
    base = dict(model.params)
    for name in names:

        def f(w, name=name):
            model.params = {**base, name: w}
            return training_loss(tasks, model, np.random.default_rng(seed), with_grad=False)[0]

        num = nx.numerical_gradient(f, base[name])
        model.params = base
        worst = max(worst, nx.relative_error(grads[name], num))
    return worst


def check_gradients(n_seeds: int = 2) -> CheckResult:
    worst = max(gradient_check_error(s) for s in range(n_seeds))
    return _result("training-loss gradients vs finite differences", worst, 1e-6, "max relative error")


def check_preprocess_time_injection() -> CheckResult:
    cfg = DenoiserConfig(layers=1, hidden=8, heads=2, t_embed_dim=8)
    params = init_params(cfg, 0, np.float64)
    x = np.zeros((1, 3, 1))
    a = preprocess(x, x, np.array([3]), cfg, params).value
    b = preprocess(x, x, np.array([4]), cfg, params).value
    gap = float(np.max(np.abs(a - b)))
    return CheckResult("timestep reaches the latent grid", gap > 0, f"max difference {gap:.3e}")


# -- sampler -------------------------------------------------------------------------


def endpoint_z(s: NoiseSchedule, n_draws: int = 10_000, x_a: float = 1.5, seed: int = 0) -> float:
    init = initial_state(np.array([[x_a]]), s, "gamma_bar", np.random.default_rng(seed), n_draws).reshape(-1)
    se = init.std(ddof=1) / math.sqrt(n_draws)
    return abs(init.mean() - s.gamma_bar[s.T] * x_a) / se


def check_endpoint(s: NoiseSchedule) -> CheckResult:
    return _result("sampler start centred on gamma_bar_T x", endpoint_z(s), 4.0, "|z|")


# -- suite ---------------------------------------------------------------------------


def run_identity_suite(schedule: NoiseSchedule | None = None, ablation: bool = False) -> list[CheckResult]:
    """Run every identity check; ``schedule`` defaults to the 500-step cosine table."""
    if schedule is None:
        schedule = build_schedule(ScheduleConfig())
    if ablation and schedule.bridge:
        schedule = schedule.without_bridge()
    checks: list[Callable[[], CheckResult | list[CheckResult]]] = [
        lambda: check_gamma_bar_recurrence(schedule),
        lambda: check_telescoping(schedule),
        lambda: check_gamma_shape(schedule),
        lambda: check_correction_table(schedule),
        lambda: check_correction_forms(schedule),
        lambda: check_marginal(True),
        lambda: check_marginal(False),
        lambda: check_reparameterization(schedule),
        check_ablation,
        check_equivariance,
        check_gradients,
        check_preprocess_time_injection,
        lambda: check_endpoint(schedule),
    ]
    results: list[CheckResult] = []
    for check in checks:
        try:
            r = check()
        except Exception as exc:  # a crash is reported as a failure of that check
            name = getattr(check, "__name__", "check")
            r = CheckResult(name, False, f"raised {type(exc).__name__}: {exc}")
        results.extend(r if isinstance(r, list) else [r])
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'identity':<{width}}  result  detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.detail}")
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} passed")
    return "\n".join(lines) + "\n"
