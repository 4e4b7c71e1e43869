"""Closed-loop plumbing shared by training, certification and evaluation.

Holds the batched affine fields for a per-sample plant context, the Slotine-Li
torque in torch, the shielded violation relu(Vdot + alpha V), the analytic
certificate wrapper and the single-episode rollout.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import dynamics as dyn
from . import shield as sh
from .agent import reward
from .baseline import SlotineLi, SlotineLiGains, initial_state
from .lyapcert import analytic_candidate


@dataclass
class Setup:
    """Everything about the task that is fixed across an experiment."""
    base: dyn.ArmParams = field(default_factory=lambda: dyn.PRESETS["nominal"])
    ref: dyn.ReferenceTrajectory = field(default_factory=dyn.ReferenceTrajectory)
    gains: SlotineLiGains = field(default_factory=SlotineLiGains)
    dt: float = 0.02

    @property
    def lam(self):
        return self.gains.lam

    def plant(self, payload, friction_factor=1.0) -> dyn.ArmParams:
        return self.base.with_(payload=float(payload),
                               friction_scale=self.base.friction_scale * float(friction_factor))


@dataclass
class Context:
    """Per-sample plant context: time, payload, absolute friction scale, SL estimate."""
    t: torch.Tensor
    payload: torch.Tensor
    friction_scale: torch.Tensor
    sl_pi_hat: torch.Tensor

    @classmethod
    def from_batch(cls, b) -> "Context":
        return cls(*(torch.as_tensor(b[k], dtype=torch.float64)
                     for k in ("t", "payload", "friction_scale", "sl_pi_hat")))

    @classmethod
    def single(cls, t, payload, friction_scale, sl_pi_hat) -> "Context":
        return cls(torch.tensor([float(t)], dtype=torch.float64),
                   torch.tensor([float(payload)], dtype=torch.float64),
                   torch.tensor([float(friction_scale)], dtype=torch.float64),
                   torch.as_tensor(np.asarray(sl_pi_hat, dtype=float))[None])


def _pi_at(base: dyn.ArmParams, payload):
    zero = torch.as_tensor(dyn.base_parameters(base.with_(payload=0.0)))
    unit = torch.as_tensor(dyn.payload_shift(base, 1.0))
    return zero + payload[..., None] * unit


class Drift:
    """Drift estimate h(x) and structural input field g(x), batched over a context.

    kind: "true" (plant parameters and friction), "nominal" (zero-payload
    parameters, no friction, no residual) or "learned" (PINN pi_hat and r).
    """

    KINDS = ("true", "nominal", "learned")

    def __init__(self, kind, setup: Setup, model=None):
        if kind not in self.KINDS:
            raise ValueError(f"unknown drift kind {kind!r}")
        if kind == "learned" and model is None:
            raise ValueError("learned drift needs a PINN model")
        self.kind, self.setup, self.model = kind, setup, model
        self._lam = torch.as_tensor(np.asarray(setup.lam, dtype=float))
        self._nominal_pi = torch.as_tensor(dyn.base_parameters(setup.base.with_(payload=0.0)))
        self._unit_friction = setup.base.with_(friction_scale=1.0)

    def fields(self, x, ctx: Context, grad_model=False):
        x = torch.as_tensor(x, dtype=torch.float64)
        q, qd, ed = x[..., dyn.Q], x[..., dyn.QD], x[..., dyn.ED]
        pi_true = _pi_at(self.setup.base, ctx.payload)
        Binv = dyn.inv2(dyn.mass_matrix_from(q, pi_true))
        residual = None
        if self.kind == "true":
            pi = pi_true
            fric = dyn.friction(qd, self._unit_friction) * ctx.friction_scale[..., None]
        elif self.kind == "nominal":
            pi, fric = self._nominal_pi, 0.0
        else:
            with torch.set_grad_enabled(grad_model and torch.is_grad_enabled()):
                pi = self.model.pi_hat if grad_model else self.model.pi_hat.detach()
                residual = self.model.residual(q, qd)
                if not grad_model:
                    residual = residual.detach()
            fric = 0.0
        C, G = dyn.coriolis_gravity_from(q, qd, pi)
        a0 = dyn._matvec(Binv, -dyn._matvec(C, qd) - G - fric)
        if residual is not None:
            a0 = a0 + residual
        _, qd_d, qdd_d = self.setup.ref(ctx.t)
        h = torch.cat([qd, a0, qd - qd_d, a0 - qdd_d, a0 - qdd_d + dyn._matvec(self._lam, ed)], dim=-1)
        zero = torch.zeros_like(Binv)
        g = torch.cat([zero, Binv, zero, Binv, Binv], dim=-2)
        return h, g


class AnalyticCertificate:
    """V_an = 0.5 s^T B s + 0.5 ||e||^2 + 0.5 ||ed||^2 with the zero-payload inertia,
    exposing the same value_and_grad interface as the learned certificate."""

    def __init__(self, base: dyn.ArmParams = dyn.PRESETS["nominal"]):
        self._pi = torch.as_tensor(dyn.base_parameters(base.with_(payload=0.0)))

    def __call__(self, x):
        x = torch.as_tensor(x, dtype=torch.float64)
        return analytic_candidate(x, dyn.mass_matrix_from(x[..., dyn.Q], self._pi))

    def value_and_grad(self, x, create_graph=False):
        x = torch.as_tensor(x, dtype=torch.float64)
        if not x.requires_grad:
            x = x.detach().requires_grad_(True)
        V = self(x)
        (g,) = torch.autograd.grad(V.sum(), x, create_graph=create_graph)
        return V, g


def sl_torque(x, ctx: Context, setup: Setup):
    """Slotine-Li torque with per-sample time and parameter estimate (torch)."""
    x = torch.as_tensor(x, dtype=torch.float64)
    lam = torch.as_tensor(np.asarray(setup.gains.lam, dtype=float))
    K_d = torch.as_tensor(np.asarray(setup.gains.K_d, dtype=float))
    _, qd_d, qdd_d = setup.ref(ctx.t)
    qd_r = qd_d - x[..., dyn.E] @ lam.T
    qdd_r = qdd_d - x[..., dyn.ED] @ lam.T
    Y = dyn.regressor(x[..., dyn.Q], x[..., dyn.QD], qdd_r, qd_ref=qd_r)
    return (Y @ ctx.sl_pi_hat[..., None])[..., 0] - x[..., dyn.S] @ K_d.T


def shielded_violation(cert, drift: Drift, x, ctx: Context, tau_raw, alpha, margin=0.0,
                       b_min=sh.B_MIN, shield_on=True, create_graph=False):
    """relu(Vdot + alpha V) at the (optionally shielded) torque, batched.

    Returns (violation, shield outcome or None, coefficients).
    """
    h, g = drift.fields(x, ctx)
    co = sh.coefficients(cert, x, h, g, alpha, margin, create_graph=create_graph)
    out = sh.project(tau_raw, co, b_min) if shield_on else None
    tau = out.tau_safe if shield_on else tau_raw
    viol = torch.relu(co.a + (co.b * tau).sum(-1) + alpha * co.V)
    return viol, out, co


def episode_rollout(setup: Setup, p: dyn.ArmParams, seed=None, T=5.0, agent=None,
                    deterministic=False, cert=None, drift: Drift = None, shield_on=False,
                    alpha=0.1, margin=0.0, b_min=sh.B_MIN, sl_pi0=None, lam_tau=1e-3):
    """One closed-loop episode: SL torque, optional SAC residual, optional shield.

    The violation trace (relu(Vdot + alpha V) at the applied torque, under the
    shield's drift estimate) is recorded whenever a certificate and drift are
    supplied.  A non-finite state ends the episode early with ``diverged`` set.
    """
    if shield_on and (cert is None or drift is None):
        raise ValueError("shield needs a certificate and a drift model")
    n = int(round(T / setup.dt))
    ctl = SlotineLi(setup.gains, np.zeros(dyn.N_PARAMS) if sl_pi0 is None else np.array(sl_pi0, float))
    x = initial_state(setup.ref, setup.lam, seed)
    rec = {k: [] for k in ("tau", "tau_sl", "dtau", "qdd", "t", "sl_pi_hat", "reward",
                           "V", "viol", "active", "degenerate", "infeasible", "slack")}
    xs = [x]
    diverged = False
    track = cert is not None and drift is not None
    for k in range(n):
        t = k * setup.dt
        pi_before = ctl.pi_hat.copy()
        tau_sl = ctl.act(x, setup.ref, t, setup.dt)
        dtau = agent.act(x[None], deterministic)[0] if agent is not None else np.zeros(dyn.N_JOINTS)
        tau = tau_sl + dtau
        if track:
            ctx = Context.single(t, p.payload, p.friction_scale, pi_before)
            xt = torch.as_tensor(x[None])
            viol, out, co = shielded_violation(cert, drift, xt, ctx, torch.as_tensor(tau[None]),
                                               alpha, margin, b_min, shield_on)
            if shield_on:
                tau = out.tau_safe[0].detach().numpy()
                rec["active"].append(bool(out.active[0]))
                rec["degenerate"].append(bool(out.degenerate[0]))
                rec["infeasible"].append(bool(out.infeasible_at_degenerate[0]))
                rec["slack"].append(float(out.slack[0].detach()))
            rec["V"].append(float(co.V[0].detach()))
            rec["viol"].append(float(viol[0].detach()))
        qdd = dyn.joint_acceleration(x[dyn.Q], x[dyn.QD], tau, p)
        try:
            x_next = dyn.rk4_step(x, tau, setup.dt, p, setup.ref, t, setup.lam)
        except dyn.NonFiniteStateError:
            diverged = True
            break
        rec["tau"].append(tau)
        rec["tau_sl"].append(tau_sl)
        rec["dtau"].append(dtau)
        rec["qdd"].append(qdd)
        rec["t"].append(t)
        rec["sl_pi_hat"].append(pi_before)
        rec["reward"].append(reward(x_next[dyn.E], x_next[dyn.ED], tau - tau_sl, lam_tau=lam_tau))
        x = x_next
        xs.append(x)
    out = {k: np.array(v) for k, v in rec.items()}
    out["x"] = np.array(xs)
    out["diverged"] = diverged
    out["payload"] = p.payload
    out["friction_scale"] = p.friction_scale
    return out


def episode_rmse(e) -> float:
    """sqrt(mean over steps and joints of e^2); ``e`` has shape (steps, joints)."""
    e = np.asarray(e, dtype=float)
    if e.ndim != 2 or e.shape[0] < 1:
        raise ValueError("need a (steps, joints) error trace with at least one step")
    return float(np.sqrt(np.mean(e ** 2)))


def trace_rmse(trace) -> float:
    return episode_rmse(trace["x"][1:, dyn.E]) if len(trace["x"]) > 1 else float("inf")


def shielded_flow_batch(setup: Setup, plants, seeds, cert, alpha, T=5.0, substeps=10,
                        margin=0.0, b_min=sh.B_MIN, agent=None):
    """Episodes of the continuously shielded closed loop, integrated in parallel.

    The shield (true drift) is re-evaluated at every RK4 stage of ``substeps``
    sub-intervals per control step, so the torque follows the flow instead of
    being held; the SL estimate and the policy's mean residual are held per
    control step.  Returns x (episodes, steps+1, 10) and a per-step degenerate
    flag that is set if any stage of the step fell in the gated shell.
    """
    n_ep = len(plants)
    if len(seeds) != n_ep:
        raise ValueError("one seed per plant")
    drift = Drift("true", setup)
    x = np.stack([initial_state(setup.ref, setup.lam, s) for s in seeds])
    pi = np.zeros((n_ep, dyn.N_PARAMS))
    payload = torch.tensor([p.payload for p in plants], dtype=torch.float64)
    fscale = torch.tensor([p.friction_scale for p in plants], dtype=torch.float64)
    K_pi = np.asarray(setup.gains.K_pi, dtype=float)
    n = int(round(T / setup.dt))
    h_int = setup.dt / substeps
    xs = [x]
    degenerate = np.zeros((n_ep, n), dtype=bool)
    infeasible = np.zeros((n_ep, n), dtype=bool)
    for k in range(n):
        t0 = k * setup.dt
        pi_t = torch.as_tensor(pi)
        dtau = (torch.as_tensor(agent.act(x, deterministic=True)) if agent is not None
                else torch.zeros(n_ep, dyn.N_JOINTS, dtype=torch.float64))

        def f(z, s):
            ctx = Context(torch.full((n_ep,), float(s), dtype=torch.float64), payload, fscale, pi_t)
            zt = torch.as_tensor(z)
            tau_raw = sl_torque(zt, ctx, setup) + dtau
            h, g = drift.fields(zt, ctx)
            co = sh.coefficients(cert, zt, h, g, alpha, margin)
            out = sh.project(tau_raw.detach(), co, b_min)
            degenerate[:, k] |= out.degenerate.numpy()
            infeasible[:, k] |= out.infeasible_at_degenerate.numpy()
            return (h + (g @ out.tau_safe[..., None])[..., 0]).detach().numpy()

        z = x
        with np.errstate(all="ignore"):
            for i in range(substeps):
                z = dyn.rk4(f, z, t0 + i * h_int, h_int)
        if not np.all(np.isfinite(z)):
            raise dyn.NonFiniteStateError(f"non-finite state in shielded flow at t={t0:.3f}")
        Y = np.stack([dyn.regressor(*_sl_args(x[j], setup, t0)) for j in range(n_ep)])
        pi = pi - setup.dt * np.einsum("ij,nkj,nk->ni", K_pi, Y, x[:, dyn.S])
        x = dyn.resync_sliding(z, setup.lam)
        xs.append(x)
    return {"x": np.stack(xs, axis=1), "degenerate": degenerate, "infeasible": infeasible}


def _sl_args(x, setup: Setup, t):
    _, qd_d, qdd_d = setup.ref(t)
    lam = np.asarray(setup.lam)
    return x[dyn.Q], x[dyn.QD], qdd_d - lam @ x[dyn.ED], qd_d - lam @ x[dyn.E]
