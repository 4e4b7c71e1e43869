"""Acceptance criteria 1-12, one test each.

Every test prints a single ``AC<n> PASS|FAIL`` line to the terminal (even under
output capture) and then asserts the same condition at the stated tolerance.
"""
import json
import math
import time

import numpy as np
import pytest
import torch

from lyapshield import bench as bn
from lyapshield import dynamics as dyn
from lyapshield import lyapcert as lc
from lyapshield import pinn
from lyapshield import shield as sh
from lyapshield import trainloop as tl
from lyapshield.closedloop import Context, Drift, Setup
from oracles import central_diff_grad, halfspace_active_set, sym_terms

SETUP = Setup()
REDUCED = dict(T=1.0, warmup_episodes=2, hidden=32, cert_width=32, pinn_width=32, sac_updates=5,
               cert_updates=2, pinn_updates=5, warmstart_steps=200, calibration_episodes=20, batch=32)


@pytest.fixture
def report(capsys):
    def _report(n, name, ok, detail):
        with capsys.disabled():
            print(f"\nAC{n} {'PASS' if ok else 'FAIL'} {name}: {detail}")
        assert ok, f"AC{n} {name}: {detail}"
    return _report


@pytest.fixture(scope="module")
def warm_cert():
    cert = lc.Certificate(seed=0)
    t0 = time.perf_counter()
    err = lc.warmstart(cert, lambda r, n: lc.sample_consistent(r, n, 3.0, SETUP.lam), 2000, lr=3e-3)
    return cert, err, time.perf_counter() - t0


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    cfg = tl.TrainConfig(episodes=5, seed=11, **REDUCED)
    root = tmp_path_factory.mktemp("ac9")
    t0 = time.perf_counter()
    res = tl.run_training(cfg, root / "a")
    elapsed = time.perf_counter() - t0
    tl.run_training(cfg, root / "b")
    return cfg, res, root, elapsed


def _ctx(rng, n):
    payload = rng.uniform(0.0, 1.5, n)
    pis = np.stack([dyn.base_parameters(SETUP.plant(m)) for m in payload])
    return Context(torch.as_tensor(rng.uniform(0, 5, n)), torch.as_tensor(payload),
                   torch.as_tensor(SETUP.base.friction_scale * rng.choice([1.0, 5.0], n)), torch.as_tensor(pis))


# 1 ---------------------------------------------------------------------------------------

def test_ac1_shield_correctness(rng, report):
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(10_000):
        n = int(rng.integers(1, 5))
        b = rng.normal(size=n) * 10 ** rng.uniform(-1, 1)
        tau = rng.normal(size=n) * 5
        c, margin = rng.normal() * 3, abs(rng.normal()) * int(rng.integers(0, 2))
        out = sh.project(tau, sh.ShieldCoefficients(a=0.0, b=b, c=c, V=0.0, margin=margin), b_min=1e-12)
        worst = max(worst, float(np.abs(out.tau_safe - halfspace_active_set(tau, b, c - margin)).max()))
    N, b_min = 100_000, sh.B_MIN
    b = rng.normal(size=(N, 2)) * 10 ** rng.uniform(-1, 1.5, (N, 1))
    b = b[(b * b).sum(1) > b_min]
    tau = rng.normal(size=b.shape) * 20
    c, margin = rng.normal(size=len(b)) * 5, np.abs(rng.normal(size=len(b)))
    out = sh.project(tau, sh.ShieldCoefficients(a=0.0, b=b, c=c, V=0.0, margin=margin), b_min=b_min)
    excess = float(((b * out.tau_safe).sum(1) - (c - margin)).max())
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-8 and excess <= 1e-9 and len(b) >= 99_000 and elapsed < 30
    report(1, "shield correctness", ok,
           f"max |tau - oracle| = {worst:.2e} on 1e4 QPs; max excess {excess:.2e} on {len(b)} actions; "
           f"{elapsed:.1f}s")


# 2 ---------------------------------------------------------------------------------------

def test_ac2_feasibility_at_b_zero(rng, report):
    c = np.concatenate([rng.normal(size=5000) * 3, [0.0, 1.0, -1e-300, 1e-300]])
    margin = np.concatenate([np.abs(rng.normal(size=5000)) * rng.integers(0, 2, 5000), [0.0, 1.0, 0.0, 0.0]])
    c[:200] = margin[:200]   # boundary c - margin == 0 exactly
    b = np.zeros((len(c), 2))
    tau = rng.normal(size=b.shape)
    out = sh.project(tau, sh.ShieldCoefficients(a=0.0, b=b, c=c, V=0.0, margin=margin))
    feasible = ~out.infeasible_at_degenerate
    ok = bool(np.array_equal(feasible, (c - margin) >= 0) and out.degenerate.all()
              and np.array_equal(out.tau_safe, tau))
    report(2, "feasibility at b = 0", ok,
           f"{int(feasible.sum())}/{len(c)} feasible, all agree with c - margin >= 0: {ok}")


# 3 ---------------------------------------------------------------------------------------

def test_ac3_exponential_decay_audit(warm_cert, report):
    cert, _, _ = warm_cert
    t0 = time.perf_counter()
    rep = bn.exp_decay_audit(SETUP, cert, bn.stratified_plants(SETUP, 20), list(range(20)), alpha=0.1, T=5.0,
                             tol=5e-3)
    elapsed = time.perf_counter() - t0
    passed = 1.0 - rep.fraction_failed
    ok = passed >= 0.99 and elapsed < 120
    report(3, "exponential decay audit", ok,
           f"{passed:.2%} of {rep.checked} checked steps pass (skipped {rep.skipped_degenerate} gated, "
           f"{rep.skipped_infeasible} infeasible); worst ratio {rep.worst_ratio:.4f}; {elapsed:.1f}s")


# 4 ---------------------------------------------------------------------------------------

def _sandwich(cert, rng):
    bounds = lc.estimate_bounds(cert, rng=np.random.default_rng(7))
    x = lc.sample_ball(rng, 100_000, 3.0)
    v = lc.eval_V(cert, x)
    n2 = (x * x).sum(1)
    lo = bool(np.all(v >= cert.eps * n2 * (1 - 1e-12)))
    hi = bool(np.all(v <= bounds.beta_bar * n2))
    return lo and hi, bounds.beta_bar


def _grad_error(cert, rng):
    worst = 0.0
    for x in lc.sample_ball(rng, 100, 3.0):
        g = lc.grad_V(cert, x)
        fd = central_diff_grad(lambda z: float(lc.eval_V(cert, z)), x, h=1e-5)
        worst = max(worst, float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12)))
    return worst


def test_ac4_certificate_structure(warm_cert, trained, rng, report):
    fresh = lc.Certificate(seed=0)
    certs = {"init": fresh, "warm-start": warm_cert[0], "5 episodes": trained[1].learners.cert}
    details, ok = [], True
    for name, cert in certs.items():
        sw, beta = _sandwich(cert, rng)
        ge = _grad_error(cert, rng)
        ok &= sw and ge < 1e-6
        details.append(f"{name}: sandwich {sw} (beta {beta:.3g}), grad rel err {ge:.1e}")
    report(4, "certificate structure", ok, "; ".join(details))


# 5 ---------------------------------------------------------------------------------------

def test_ac5_warmstart_quality(warm_cert, report):
    _, err, elapsed = warm_cert
    report(5, "warm-start quality", err <= 0.05 and elapsed < 60, f"relative error {err:.4f}; {elapsed:.1f}s")


# 6 ---------------------------------------------------------------------------------------

def test_ac6_mismatch_audit(warm_cert, rng, report):
    cert = warm_cert[0]
    model = pinn.PinnModel(seed=2)
    opt = pinn.make_optimizer(model)
    data = pinn.synthetic_data(rng, 512, SETUP.base.with_(payload=0.6))
    for _ in range(100):
        pinn.pinn_update(model, opt, data)
    L_V = lc.estimate_bounds(cert, rng=np.random.default_rng(3)).L_V
    n = 10_000
    x = torch.as_tensor(lc.sample_ball(rng, n, 3.0))
    tau = torch.as_tensor(rng.normal(size=(n, 2)) * 20)
    ctx = _ctx(rng, n)
    with torch.no_grad():
        h, g = Drift("true", SETUP).fields(x, ctx)
        h_m, g_m = Drift("learned", SETUP, model).fields(x, ctx)
    _, gV = cert.value_and_grad(x)
    gV = gV.detach()
    vdot = (gV * (h + (g @ tau[..., None])[..., 0])).sum(-1)
    vdot_m = (gV * (h_m + (g_m @ tau[..., None])[..., 0])).sum(-1)
    lhs = (vdot - vdot_m).abs()
    rhs = L_V * (h - h_m).norm(dim=-1)
    ok = bool((lhs <= rhs).all())
    report(6, "mismatch audit", ok,
           f"max lhs/rhs {float((lhs / rhs.clamp_min(1e-300)).max()):.4f} on {n} (x, tau), L_V_est {L_V:.3g}")


# 7 ---------------------------------------------------------------------------------------

def test_ac7_dynamics_oracles(rng, report):
    p = dyn.ArmParams().with_(payload=0.7)
    pi = dyn.base_parameters(p)
    reg = 0.0
    for _ in range(200):
        q, qd, qdd = rng.uniform(-np.pi, np.pi, 2), rng.uniform(-3, 3, 2), rng.uniform(-5, 5, 2)
        B, C, G = sym_terms(q, qd, payload=0.7)
        reg = max(reg, float(np.abs(dyn.regressor(q, qd, qdd) @ pi - (B @ qdd + C @ qd + G)).max()))
    skew, h = 0.0, 1e-6
    for _ in range(500):
        q, qd, v = rng.uniform(-3, 3, 2), rng.uniform(-3, 3, 2), rng.normal(size=2)
        Bdot = (dyn.mass_matrix(q + h * qd, p) - dyn.mass_matrix(q - h * qd, p)) / (2 * h)
        C, _ = dyn.coriolis_gravity(q, qd, p)
        skew = max(skew, abs(v @ (Bdot - 2 * C) @ v))
    ideal, ref = dyn.PRESETS["ideal"], dyn.ReferenceTrajectory()
    x = dyn.make_state([-1.2, 0.4], [0.3, -0.2], 0.0, ref, SETUP.lam)
    E0 = dyn.mechanical_energy(x[dyn.Q], x[dyn.QD], ideal)
    for k in range(250):
        x = dyn.rk4_step(x, np.zeros(2), 0.02, ideal, ref, 0.02 * k, SETUP.lam)
    drift = abs(dyn.mechanical_energy(x[dyn.Q], x[dyn.QD], ideal) - E0) / abs(E0)
    ratio = float(dyn.rk4(lambda z, t: -z, np.array([1.0]), 0.0, 0.02)[0])
    ok = reg < 1e-9 and skew < 1e-8 and drift < 1e-5 and abs(ratio - 0.9801986733) <= 1e-9
    report(7, "dynamics oracles", ok,
           f"regressor {reg:.1e}, skew {skew:.1e}, energy drift {drift:.1e}, rk4 ratio {ratio:.10f}")


# 8 ---------------------------------------------------------------------------------------

def test_ac8_pac_arithmetic(report):
    eps = tl.epsilon_star(1.0, 4096, 1.0, 10)
    alpha, k = tl.shrink_alpha([-0.1], [1.0], 0.1, 0.02, rho=0.9)
    ok = eps == 0.5 and abs(alpha - 0.0729) <= 1e-12
    report(8, "PAC arithmetic", ok, f"eps* = {eps!r}; safeguard alpha = {alpha:.15f} after {k} shrinks")


# 9 ---------------------------------------------------------------------------------------

def test_ac9_training_stability(trained, report):
    cfg, res, root, elapsed = trained
    a = (root / "a" / "metrics.jsonl").read_bytes()
    recs = [json.loads(line) for line in a.decode().splitlines()]
    eps = [r for r in recs if r.get("phase") != "warmstart"]
    mu_ok = all(r["mu"] >= 0 for r in recs)
    warm_ok = all(r["mu"] == 0.0 for r in eps if r["episode"] < cfg.warmup_episodes)
    finite = all(math.isfinite(v) for r in recs for v in r.values() if isinstance(v, float))
    same = a == (root / "b" / "metrics.jsonl").read_bytes()
    ok = len(eps) == 5 and mu_ok and warm_ok and finite and same and elapsed < 300
    report(9, "training stability", ok,
           f"{len(eps)} episodes, mu>=0 {mu_ok}, mu==0 in warm-up {warm_ok}, finite {finite}, "
           f"deterministic log {same}; {elapsed:.1f}s per run")


# 10 --------------------------------------------------------------------------------------

def test_ac10_baseline_payload_trend(report):
    payloads = (0.4, 0.6, 0.8, 1.0, 1.2, 1.5)
    rows = bn.payload_sweep(SETUP, payloads=payloads, regimes=(1.0,), seeds=(0, 1, 2), T=5.0, method=False)
    means = [r.baseline_mean for r in rows]
    stds = [r.baseline_std for r in rows]
    ok = (all(b >= a for a, b in zip(means, means[1:])) and max(stds) <= 0.005
          and all(0.05 <= m <= 2.0 for m in means))
    report(10, "baseline payload trend", ok,
           "rmse " + ", ".join(f"{p}:{m:.4f}" for p, m in zip(payloads, means)) + f"; max std {max(stds):.1e}")


# 11 --------------------------------------------------------------------------------------

def test_ac11_ablation_identities(trained, report):
    L = trained[1].learners
    res = bn.ablation_matrix(SETUP, L.agent, L.cert, L.model, payload=0.4, regimes=(1.0, 5.0), seeds=(0, 1),
                             T=2.0)
    ids = res["identities"]
    wanted = ("A0==baseline", "A4==A2", "A5==A3")
    ok = all(ids[k] for k in wanted)
    report(11, "ablation identities", ok, ", ".join(f"{k} {ids[k]}" for k in wanted))


# 12 --------------------------------------------------------------------------------------

def _fit(rng, p, steps=3000):
    train, test = pinn.synthetic_data(rng, 4096, p), pinn.synthetic_data(rng, 2048, p)
    model = pinn.PinnModel(seed=1)
    opt = pinn.make_optimizer(model)
    for _ in range(steps):
        idx = rng.integers(0, 4096, 512)
        pinn.pinn_update(model, opt, {k: v[idx] for k, v in train.items()})
    return model, test


def test_ac12_pinn_identification(rng, report):
    t0 = time.perf_counter()
    rigid = dyn.PRESETS["ideal"].with_(payload=0.4)
    model, _ = _fit(rng, rigid)
    pi = dyn.base_parameters(rigid)
    param_err = float(np.max(np.abs(model.pi_hat.detach().numpy() - pi) / np.abs(pi)))
    rough = dyn.PRESETS["nominal"].with_(payload=0.4)
    model, test = _fit(rng, rough)
    with torch.no_grad():
        Br = (test["B"] @ model.residual(test["q"], test["qd"])[..., None])[..., 0].numpy()
    F = dyn.friction(test["qd"].numpy(), rough)
    fric_err = float(np.linalg.norm(Br + F) / np.linalg.norm(F))
    elapsed = time.perf_counter() - t0
    ok = param_err <= 0.05 and fric_err <= 0.20 and elapsed < 600
    report(12, "PINN identification", ok,
           f"max parameter rel err {param_err:.2e}; B r vs -F rel L2 {fric_err:.3f}; {elapsed:.1f}s")
