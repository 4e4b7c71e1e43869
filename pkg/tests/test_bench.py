import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from lyapshield import bench as bn
from lyapshield import dynamics as dyn
from lyapshield import lyapcert as lc
from lyapshield import pinn as pn
from lyapshield.agent import ResidualSAC, SACConfig
from lyapshield.baseline import rollout
from lyapshield.closedloop import Setup

SETUP = Setup()


@pytest.fixture(scope="module")
def learned():
    agent = ResidualSAC(SACConfig(hidden=32), seed=3)
    cert = lc.Certificate(width=32, seed=4)
    lc.warmstart(cert, lambda r, n: lc.sample_consistent(r, n, 3.0, SETUP.lam), 200)
    model = pn.PinnModel(width=16, seed=5)
    return agent, cert, model


def test_episode_rmse_examples():
    assert bn.episode_rmse(np.zeros((10, 2))) == 0.0
    assert bn.episode_rmse(np.tile([0.3, 0.4], (7, 1))) == pytest.approx(math.sqrt(0.125), abs=1e-15)
    with pytest.raises(ValueError):
        bn.episode_rmse(np.zeros((0, 2)))


@given(st.lists(st.floats(-3, 3), min_size=2, max_size=40).filter(lambda v: len(v) % 2 == 0))
def test_rmse_homogeneous(vals):
    e = np.array(vals).reshape(-1, 2)
    assert bn.episode_rmse(2 * e) == pytest.approx(2 * bn.episode_rmse(e), rel=1e-12, abs=1e-300)


def test_improvement_sign_and_rounding():
    assert bn.improvement(1.0, 0.5) == 0.5
    assert bn.improvement(0.5, 1.0) < 0
    # table values are rounded to 3 decimals; the +40.9% entry lies inside the rounding box
    lo = bn.improvement(0.4165, 0.2475)
    hi = bn.improvement(0.4175, 0.2465)
    assert lo <= 0.409 <= hi
    assert bn.improvement(0.417, 0.247) == pytest.approx(0.409, abs=2e-3)


def test_decay_factor_and_alpha_zero_limit():
    assert bn.decay_factor(0.5, 0.02) == pytest.approx(0.990049833749168, abs=1e-15)
    V = np.array([1.0, 0.9, 0.95, 0.95, 0.2])
    fail, _, _ = bn.audit_steps(V, 0.0, 0.02, 0.0)
    assert fail.tolist() == [False, True, False, False]
    fail, _, keep = bn.audit_steps(V, 0.0, 0.02, 0.0, skip=[False, True, False, False])
    assert not fail.any() and keep.sum() == 3


def test_ablation_rows_and_flags():
    assert list(bn.ABLATIONS) == [f"A{k}" for k in range(8)]
    assert bn.ABLATIONS["A7"][1].margin == 0.5
    assert bn.ABLATIONS["A0"][1] == bn.Flags()
    with pytest.raises(ValueError):
        bn.Flags(cert="other")
    with pytest.raises(ValueError):
        bn.EvalCondition(payload=-1)


def test_ablation_identities(learned):
    agent, cert, model = learned
    res = bn.ablation_matrix(SETUP, agent, cert, model, payload=0.4, regimes=(1.0, 5.0), seeds=(0, 1), T=1.0)
    assert res["identities"] == {"A0==baseline": True, "A1==A0": True, "A4==A2": True, "A5==A3": True}
    rows = {r["config"]: r for r in res["rows"]}
    assert rows["A0"]["impr_f1"] == 0.0
    assert 0 <= rows["A6"]["shield_f1"] <= 1


def test_a0_is_the_baseline_module():
    tr = bn.run_episode(SETUP, bn.ABLATIONS["A0"][1], 0.8, 5.0, seed=7, T=1.0)
    ref = rollout(SETUP.plant(0.8, 5.0), SETUP.gains, SETUP.ref, 1.0, SETUP.dt, seed=7)
    assert np.array_equal(tr["x"], ref["x"]) and np.array_equal(tr["tau"], ref["tau"])


def test_missing_components_rejected():
    with pytest.raises(ValueError, match="policy"):
        bn.run_episode(SETUP, bn.ABLATIONS["A2"][1], 0.4, 1.0, 0)
    with pytest.raises(ValueError, match="certificate"):
        bn.run_episode(SETUP, bn.Flags(shield=True), 0.4, 1.0, 0)


def test_baseline_sweep_trend_and_spread():
    rows = bn.payload_sweep(SETUP, payloads=(0.4, 0.8, 1.2, 1.5), regimes=(1.0,), seeds=(0, 1, 2), T=2.0,
                            method=False)
    means = [r.baseline_mean for r in rows]
    assert all(b >= a for a, b in zip(means, means[1:]))
    assert all(r.baseline_std <= 0.002 for r in rows)
    assert all(r.method_mean is None for r in rows)
    text = bn.rows_to_csv(rows)
    assert text.startswith("# rmse") and "absent" in text


def test_sweep_is_deterministic_and_finite(learned):
    agent, cert, model = learned
    kw = dict(payloads=(0.4, 1.5), regimes=(1.0, 5.0), seeds=(0,), T=1.0, agent=agent, cert=cert, model=model)
    a, b = bn.payload_sweep(SETUP, **kw), bn.payload_sweep(SETUP, **kw)
    assert bn.rows_to_csv(a) == bn.rows_to_csv(b)
    assert not any(r.diverged for r in a)


def test_audit_runs_in_both_modes(learned):
    _, cert, _ = learned
    plants = bn.stratified_plants(SETUP, 2)
    held = bn.exp_decay_audit(SETUP, cert, plants, [0, 1], alpha=0.1, T=0.4)
    flow = bn.exp_decay_audit(SETUP, cert, plants, [0, 1], alpha=0.1, T=0.4, substeps=2)
    for rep in (held, flow):
        assert rep.checked + rep.skipped_degenerate + rep.skipped_infeasible <= 2 * 20
        assert 0 <= rep.fraction_failed <= 1
    assert held.mode == "held-torque" and flow.mode == "continuous-shield"
