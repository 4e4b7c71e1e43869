"""Evaluation harness: payload sweeps on both friction regimes, the A0-A7
ablation matrix and the exponential-decay audit.

RMSE convention (stated in every CSV header): sqrt of the mean over steps and
joints of the squared joint error.  Improvement is (baseline - method) / baseline,
positive when the method tracks better.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import dynamics as dyn
from .baseline import rollout as baseline_rollout
from .closedloop import AnalyticCertificate, Drift, Setup, episode_rmse, episode_rollout, shielded_flow_batch, trace_rmse

RMSE_NOTE = "# rmse = sqrt(mean over steps and joints of e^2) [rad]; improvement = (baseline - method)/baseline"


@dataclass(frozen=True)
class Flags:
    pinn: bool = False
    sac: bool = False
    shield: bool = False
    cert: str = "learned"        # "analytic" or "learned"
    margin: float = 0.0

    def __post_init__(self):
        if self.cert not in ("analytic", "learned"):
            raise ValueError(f"unknown certificate source {self.cert!r}")
        if self.margin < 0:
            raise ValueError("margin must be non-negative")


ABLATIONS = {
    "A0": ("Slotine-Li", Flags()),
    "A1": ("PINN only", Flags(pinn=True)),
    "A2": ("SAC, no shield", Flags(sac=True)),
    "A3": ("SAC + shield (V_an)", Flags(sac=True, shield=True, cert="analytic")),
    "A4": ("PINN + SAC, no shield", Flags(pinn=True, sac=True)),
    "A5": ("PINN + SAC + shield (V_an)", Flags(pinn=True, sac=True, shield=True, cert="analytic")),
    "A6": ("PROPOSED", Flags(pinn=True, sac=True, shield=True, cert="learned")),
    "A7": ("PROPOSED + robust 0.5", Flags(pinn=True, sac=True, shield=True, cert="learned", margin=0.5)),
}


@dataclass
class EvalCondition:
    payload: float
    friction_factor: float = 1.0
    seeds: tuple = (0, 1, 2, 3, 4)
    T: float = 5.0
    flags: Flags = field(default_factory=Flags)

    def __post_init__(self):
        if self.payload < 0 or self.friction_factor <= 0 or self.T <= 0:
            raise ValueError("payload >= 0, friction_factor > 0 and T > 0 required")
        if len(self.seeds) < 1:
            raise ValueError("need at least one seed")


def shield_drift_for(flags: Flags, setup: Setup, model) -> Drift:
    """The PINN reaches the controller only through the learned-certificate
    shield's drift; the analytic certificate is paired with the nominal model."""
    if flags.pinn and flags.cert == "learned" and model is not None:
        return Drift("learned", setup, model)
    return Drift("nominal", setup)


def run_episode(setup: Setup, flags: Flags, payload, friction_factor, seed, T=5.0, agent=None,
                cert=None, model=None, alpha=1.0):
    if flags.sac and agent is None:
        raise ValueError("configuration needs a policy but the checkpoint has none")
    if flags.shield and flags.cert == "learned" and cert is None:
        raise ValueError("configuration needs a learned certificate")
    p = setup.plant(payload, friction_factor)
    kw = {}
    if flags.shield:
        c = AnalyticCertificate(setup.base) if flags.cert == "analytic" else cert
        kw = dict(cert=c, drift=shield_drift_for(flags, setup, model), shield_on=True, alpha=alpha,
                  margin=flags.margin)
    return episode_rollout(setup, p, seed=seed, T=T, agent=agent if flags.sac else None,
                           deterministic=True, **kw)


def evaluate(setup: Setup, cond: EvalCondition, agent=None, cert=None, model=None, alpha=1.0):
    traces = [run_episode(setup, cond.flags, cond.payload, cond.friction_factor, s, cond.T,
                          agent, cert, model, alpha) for s in cond.seeds]
    rmse = np.array([trace_rmse(t) for t in traces])
    active = np.concatenate([t["active"] for t in traces]) if cond.flags.shield else np.zeros(0)
    return {
        "rmse_mean": float(rmse.mean()), "rmse_std": float(rmse.std()), "rmse": rmse.tolist(),
        "shield_frac": float(active.mean()) if active.size else 0.0,
        "diverged": any(t["diverged"] for t in traces),
        "traces": traces,
    }


def improvement(baseline, method):
    return (baseline - method) / baseline


# -- ablation matrix -----------------------------------------------------------------------------


def ablation_matrix(setup: Setup, agent, cert, model, payload=0.4, regimes=(1.0, 5.0),
                    seeds=(0, 1, 2, 3, 4), T=5.0, alpha=1.0, rows=tuple(ABLATIONS)):
    """Evaluate the configurations at one payload on each friction regime.

    Returns {"rows": [...], "identities": {...}} where identities record whether
    A0 reproduces the baseline module and A1/A4/A5 reproduce A0/A2/A3 torque
    traces step for step.
    """
    res = {}
    for name in rows:
        flags = ABLATIONS[name][1]
        res[name] = {f: evaluate(setup, EvalCondition(payload, f, tuple(seeds), T, flags), agent, cert, model, alpha)
                     for f in regimes}
    table = []
    for name in rows:
        row = {"config": name, "label": ABLATIONS[name][0]}
        for f in regimes:
            r = res[name][f]
            row[f"rmse_f{f:g}"] = r["rmse_mean"]
            row[f"std_f{f:g}"] = r["rmse_std"]
            row[f"shield_f{f:g}"] = r["shield_frac"]
            if "A0" in res:
                row[f"impr_f{f:g}"] = improvement(res["A0"][f]["rmse_mean"], r["rmse_mean"])
        table.append(row)

    def same(a, b):
        if a not in res or b not in res:
            return None
        return all(np.array_equal(ta["tau"], tb["tau"])
                   for f in regimes for ta, tb in zip(res[a][f]["traces"], res[b][f]["traces"]))

    ident = {"A1==A0": same("A1", "A0"), "A4==A2": same("A4", "A2"), "A5==A3": same("A5", "A3")}
    if "A0" in res:
        ident["A0==baseline"] = all(
            np.array_equal(t["x"], baseline_rollout(setup.plant(payload, f), setup.gains, setup.ref, T,
                                                    setup.dt, seed=s)["x"])
            for f in regimes for s, t in zip(seeds, res["A0"][f]["traces"]))
    return {"rows": table, "identities": ident, "payload": payload, "alpha": alpha, "seeds": list(seeds)}


# -- payload sweep -------------------------------------------------------------------------------


@dataclass
class SweepRow:
    payload: float
    friction_factor: float
    baseline_mean: float
    baseline_std: float
    method_mean: float | None
    method_std: float | None
    improvement: float | None
    shield_frac: float | None
    diverged: bool


def payload_sweep(setup: Setup, payloads=(0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.5), regimes=(1.0, 5.0),
                  seeds=(0, 1, 2, 3, 4), T=5.0, agent=None, cert=None, model=None, alpha=1.0,
                  method=True):
    """Baseline vs the proposed configuration on a payload grid; baseline only
    when ``method`` is False."""
    rows = []
    for f in regimes:
        for m in payloads:
            b = evaluate(setup, EvalCondition(m, f, tuple(seeds), T, ABLATIONS["A0"][1]))
            if method:
                r = evaluate(setup, EvalCondition(m, f, tuple(seeds), T, ABLATIONS["A6"][1]),
                             agent, cert, model, alpha)
                rows.append(SweepRow(m, f, b["rmse_mean"], b["rmse_std"], r["rmse_mean"], r["rmse_std"],
                                     improvement(b["rmse_mean"], r["rmse_mean"]), r["shield_frac"],
                                     b["diverged"] or r["diverged"]))
            else:
                rows.append(SweepRow(m, f, b["rmse_mean"], b["rmse_std"], None, None, None, None, b["diverged"]))
    return rows


def _fmt(v):
    if v is None:
        return "absent"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(rows, note=RMSE_NOTE) -> str:
    dicts = [asdict(r) if not isinstance(r, dict) else r for r in rows]
    buf = io.StringIO()
    buf.write(note + "\n")
    if dicts:
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(dicts[0]))
        for d in dicts:
            w.writerow([_fmt(v) for v in d.values()])
    return buf.getvalue()


# -- exponential decay audit ---------------------------------------------------------------------


def decay_factor(alpha, dt):
    return math.exp(-alpha * dt)


@dataclass
class AuditReport:
    checked: int
    failed: int
    skipped_degenerate: int
    skipped_infeasible: int
    fraction_failed: float
    worst_ratio: float          # max of V_{t+1} / (V_t e^{-alpha dt}) over checked steps
    alpha: float
    tol: float
    mode: str


def audit_steps(V, alpha, dt, tol, skip=None):
    """Boolean per-step failure mask for V_{t+1} > V_t e^{-alpha dt}(1 + tol) and
    the ratio V_{t+1} / (V_t e^{-alpha dt}); ``skip`` marks excluded steps."""
    V = np.asarray(V, dtype=float)
    bound = V[:-1] * decay_factor(alpha, dt)
    fail = V[1:] > bound * (1.0 + tol)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(bound > 0, V[1:] / bound, np.where(V[1:] > 0, np.inf, 1.0))
    keep = np.ones_like(fail) if skip is None else ~np.asarray(skip, bool)
    return fail & keep, ratio, keep


def exp_decay_audit(setup: Setup, cert, plants, seeds, alpha=0.1, T=5.0, tol=5e-3, agent=None,
                    substeps=0, b_min=None) -> AuditReport:
    """Shielded rollouts with the true drift in the shield, checked step by step.

    ``substeps=0`` holds the shielded torque over each control interval (the
    deployed sampled-data loop); ``substeps>0`` re-evaluates the shield at every
    RK4 stage of that many sub-intervals.  Steps where the shield was gated
    (degenerate) or infeasible are excluded.
    """
    from .shield import B_MIN
    b_min = B_MIN if b_min is None else b_min
    if len(plants) != len(seeds):
        raise ValueError("one seed per plant")
    fails = checked = degen = infeas = 0
    worst = 0.0
    if substeps > 0:
        out = shielded_flow_batch(setup, plants, seeds, cert, alpha, T, substeps, b_min=b_min, agent=agent)
        with torch.no_grad():
            Vs = [cert(torch.as_tensor(xe)).numpy() for xe in out["x"]]
        skips = [d | i for d, i in zip(out["degenerate"], out["infeasible"])]
        degen = int(out["degenerate"].sum())
        infeas = int((out["infeasible"] & ~out["degenerate"]).sum())
    else:
        Vs, skips = [], []
        drift = Drift("true", setup)
        for p, s in zip(plants, seeds):
            tr = episode_rollout(setup, p, seed=s, T=T, agent=agent, deterministic=True, cert=cert,
                                 drift=drift, shield_on=True, alpha=alpha, b_min=b_min)
            with torch.no_grad():
                Vs.append(np.asarray(cert(torch.as_tensor(tr["x"]))).reshape(-1))
            d, i = tr["degenerate"].astype(bool), tr["infeasible"].astype(bool)
            n = len(Vs[-1]) - 1
            skips.append((d | i)[:n])
            degen += int(d[:n].sum())
            infeas += int((i & ~d)[:n].sum())
    for V, skip in zip(Vs, skips):
        fail, ratio, keep = audit_steps(V, alpha, setup.dt, tol, skip)
        fails += int(fail.sum())
        checked += int(keep.sum())
        if keep.any():
            worst = max(worst, float(ratio[keep].max()))
    return AuditReport(checked, fails, degen, infeas, fails / checked if checked else 0.0, worst,
                       alpha, tol, "continuous-shield" if substeps > 0 else "held-torque")


def stratified_plants(setup: Setup, n=20, payloads=(0.0, 0.35, 0.75, 1.1, 1.5), regimes=(1.0, 5.0)):
    """n plants cycling through payload strata and friction regimes."""
    return [setup.plant(payloads[k % len(payloads)], regimes[(k // len(payloads)) % len(regimes)])
            for k in range(n)]


__all__ = ["ABLATIONS", "AuditReport", "EvalCondition", "Flags", "SweepRow", "ablation_matrix", "audit_steps",
           "decay_factor", "episode_rmse", "evaluate", "exp_decay_audit", "improvement", "payload_sweep",
           "rows_to_csv", "run_episode", "shield_drift_for", "stratified_plants"]
