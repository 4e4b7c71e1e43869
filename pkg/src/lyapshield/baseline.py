"""Slotine-Li adaptive controller.

tau = Y(q, qd, qd_r, qdd_r) pi_hat - K_d s with reference-shifted velocities
qd_r = qd_d - lam e and qdd_r = qdd_d - lam ed, and the gradient adaptation law
pi_hat' = -K_pi Y^T s integrated by explicit Euler once per control step.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn


def _pd(M, name):
    M = np.asarray(M, dtype=float)
    if not np.allclose(M, M.T) or np.linalg.eigvalsh(M).min() <= 0:
        raise ValueError(f"{name} must be symmetric positive definite")
    return M


@dataclass(frozen=True)
class SlotineLiGains:
    K_d: np.ndarray = field(default_factory=lambda: 15.0 * np.eye(2))
    lam: np.ndarray = field(default_factory=lambda: 5.0 * np.eye(2))
    K_pi: np.ndarray = field(default_factory=lambda: 0.1 * np.eye(dyn.N_PARAMS))

    def __post_init__(self):
        _pd(self.K_d, "K_d")
        _pd(self.lam, "lam")
        K = np.asarray(self.K_pi, dtype=float)
        # K_pi = 0 is allowed to freeze adaptation
        if not np.allclose(K, K.T) or np.linalg.eigvalsh(K).min() < 0:
            raise ValueError("K_pi must be symmetric positive semi-definite")

    @classmethod
    def scalar(cls, k_d=15.0, lam=5.0, k_pi=0.1):
        return cls(k_d * np.eye(2), lam * np.eye(2), k_pi * np.eye(dyn.N_PARAMS))


def sliding_variable(e, ed, lam):
    return dyn.sliding_variable(np.asarray(e, float), np.asarray(ed, float), np.asarray(lam, float))


def sl_regressor(x, ref, t, lam):
    """Y(q, qd, qd_r, qdd_r) on the reference-shifted velocities."""
    _, qd_d, qdd_d = ref(t)
    e, ed = x[..., dyn.E], x[..., dyn.ED]
    qd_r = qd_d - e @ np.asarray(lam).T
    qdd_r = qdd_d - ed @ np.asarray(lam).T
    return dyn.regressor(x[..., dyn.Q], x[..., dyn.QD], qdd_r, qd_ref=qd_r)


def control_torque(x, pi_hat, ref, t, gains: SlotineLiGains, Y=None):
    if Y is None:
        Y = sl_regressor(x, ref, t, gains.lam)
    s = x[..., dyn.S]
    return Y @ np.asarray(pi_hat, float) - s @ gains.K_d.T


def adaptation_step(pi_hat, Y, s, K_pi, dt):
    return np.asarray(pi_hat, float) - dt * (np.asarray(K_pi) @ (Y.T @ s))


@dataclass
class SlotineLi:
    """Stateful controller: holds pi_hat across an episode."""
    gains: SlotineLiGains = field(default_factory=SlotineLiGains)
    pi_hat: np.ndarray = field(default_factory=lambda: np.zeros(dyn.N_PARAMS))

    def act(self, x, ref, t, dt):
        """Torque for this step, then advance the estimate."""
        Y = sl_regressor(x, ref, t, self.gains.lam)
        tau = control_torque(x, self.pi_hat, ref, t, self.gains, Y=Y)
        self.pi_hat = adaptation_step(self.pi_hat, Y, x[dyn.S], self.gains.K_pi, dt)
        return tau


def initial_state(ref, lam, seed=None, scale=0.01):
    """On-reference state at t=0, perturbed by N(0, scale^2) on q and qd when seeded."""
    q, qd, _ = ref(0.0)
    if seed is not None:
        rng = np.random.default_rng(seed)
        q = q + scale * rng.normal(size=2)
        qd = qd + scale * rng.normal(size=2)
    return dyn.make_state(q, qd, 0.0, ref, lam)


def rollout(p: dyn.ArmParams, gains: SlotineLiGains = None, ref=None, T=5.0, dt=0.02,
            seed=None, pi0=None):
    """Closed-loop baseline episode. Returns dict of arrays: x (N+1,10), tau (N,2), pi_hat (N+1,5)."""
    gains = SlotineLiGains() if gains is None else gains
    ref = dyn.ReferenceTrajectory() if ref is None else ref
    ctl = SlotineLi(gains, np.zeros(dyn.N_PARAMS) if pi0 is None else np.array(pi0, float))
    x = initial_state(ref, gains.lam, seed)
    n = int(round(T / dt))
    xs, taus, pis = [x], [], [ctl.pi_hat.copy()]
    for k in range(n):
        t = k * dt
        tau = ctl.act(x, ref, t, dt)
        x = dyn.rk4_step(x, tau, dt, p, ref, t, gains.lam)
        xs.append(x)
        taus.append(tau)
        pis.append(ctl.pi_hat.copy())
    return {"x": np.array(xs), "tau": np.array(taus), "pi_hat": np.array(pis)}
