"""Planar two-link arm: rigid-body terms, friction, regressor and the extended state.

Links are modelled as point masses at their tips, joint angles are measured from
the positive x-axis and gravity acts along -y.  The payload is a point mass added
to the tip of the second link.

Every kinematic/dynamic function accepts arrays with arbitrary leading batch
dimensions and works on numpy arrays as well as torch tensors (so that autograd
can flow through the model when needed).  Joint vectors have trailing size 2,
matrices trailing shape (2, 2).

Extended state layout (10 entries)::

    x = [q (2), qd (2), e (2), ed (2), s (2)]
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch

N_JOINTS = 2
N_PARAMS = 5
STATE_DIM = 10

Q, QD, E, ED, S = (slice(0, 2), slice(2, 4), slice(4, 6), slice(6, 8), slice(8, 10))


class NonFiniteStateError(FloatingPointError):
    """Raised when integration produces NaN/inf entries."""


def _xp(*arrays):
    for a in arrays:
        if isinstance(a, torch.Tensor):
            return torch
    return np


def _mat2(xp, a11, a12, a21, a22):
    row1 = xp.stack([a11, a12], axis=-1)
    row2 = xp.stack([a21, a22], axis=-1)
    return xp.stack([row1, row2], axis=-2)


def _matvec(A, v):
    return (A @ v[..., None])[..., 0]


@dataclass(frozen=True)
class ArmParams:
    m1: float = 1.0
    m2: float = 1.0
    l1: float = 1.0
    l2: float = 1.0
    g: float = 9.81
    payload: float = 0.0
    f_viscous: float = 0.2
    f_static: float = 0.5
    f_drag: float = 0.1
    f_sharpness: float = 10.0
    friction_scale: float = 1.0

    def __post_init__(self):
        for name in ("m1", "m2", "l1", "l2"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.payload <= 2.0:
            raise ValueError(f"payload must lie in [0, 2] kg, got {self.payload}")
        if not self.friction_scale >= 0:
            raise ValueError("friction_scale must be non-negative")

    def with_(self, **changes) -> "ArmParams":
        return replace(self, **changes)

    @property
    def tip_mass(self) -> float:
        return self.m2 + self.payload


PRESETS = {
    "nominal": ArmParams(),
    "aggressive": ArmParams(friction_scale=5.0),
    "ideal": ArmParams(friction_scale=0.0, payload=0.0),
}


def load_preset(name: str, path: str | Path | None = None) -> ArmParams:
    """Return a named preset, optionally overridden by a ``[name]`` section of an INI file."""
    if path is None:
        if name not in PRESETS:
            raise KeyError(f"unknown arm preset {name!r}; choose from {sorted(PRESETS)}")
        return PRESETS[name]
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(path)
    if not parser.has_section(name):
        raise KeyError(f"{path}: no section [{name}]")
    base = PRESETS.get(name, ArmParams())
    known = {f.name for f in fields(ArmParams)}
    changes = {}
    for key, value in parser.items(name):
        if key not in known:
            raise KeyError(f"{path}: [{name}] unknown key {key!r}")
        changes[key] = float(value)
    return base.with_(**changes)


def base_parameters(p: ArmParams) -> np.ndarray:
    """Minimal inertial/gravity parameter vector of the rigid arm (friction excluded)."""
    mt = p.tip_mass
    return np.array([
        (p.m1 + mt) * p.l1 ** 2,
        mt * p.l2 ** 2,
        mt * p.l1 * p.l2,
        (p.m1 + mt) * p.l1 * p.g,
        mt * p.l2 * p.g,
    ])


def payload_shift(p: ArmParams, payload: float) -> np.ndarray:
    """Closed-form change of the base parameters when a tip payload is added."""
    return payload * np.array([p.l1 ** 2, p.l2 ** 2, p.l1 * p.l2, p.l1 * p.g, p.l2 * p.g])


def mass_matrix_from(q, pi):
    """B(q) built from a base-parameter vector ``pi`` (shape (..., 5) or (5,))."""
    xp = _xp(q, pi)
    c2 = xp.cos(q[..., 1])
    p1, p2, p3 = pi[..., 0], pi[..., 1], pi[..., 2]
    b11 = p1 + p2 + 2.0 * p3 * c2
    b12 = p2 + p3 * c2
    b22 = p2 + 0.0 * c2
    return _mat2(xp, b11, b12, b12, b22)


def mass_matrix(q, p: ArmParams):
    pi = base_parameters(p)
    if isinstance(q, torch.Tensor):
        pi = torch.as_tensor(pi, dtype=q.dtype)
    return mass_matrix_from(q, pi)


def inv2(A):
    """Closed-form inverse of a batch of 2x2 matrices."""
    xp = _xp(A)
    a, b, c, d = A[..., 0, 0], A[..., 0, 1], A[..., 1, 0], A[..., 1, 1]
    det = a * d - b * c
    return _mat2(xp, d / det, -b / det, -c / det, a / det)


def coriolis_gravity_from(q, qd, pi):
    xp = _xp(q, qd, pi)
    s2 = xp.sin(q[..., 1])
    h = -pi[..., 2] * s2
    zero = 0.0 * h
    C = _mat2(xp, h * qd[..., 1], h * (qd[..., 0] + qd[..., 1]), -h * qd[..., 0], zero)
    c1 = xp.cos(q[..., 0])
    c12 = xp.cos(q[..., 0] + q[..., 1])
    G = xp.stack([pi[..., 3] * c1 + pi[..., 4] * c12, pi[..., 4] * c12], axis=-1)
    return C, G


def coriolis_gravity(q, qd, p: ArmParams):
    """Christoffel-consistent Coriolis matrix C(q, qd) and gravity vector G(q)."""
    pi = base_parameters(p)
    if isinstance(q, torch.Tensor):
        pi = torch.as_tensor(pi, dtype=q.dtype)
    return coriolis_gravity_from(q, qd, pi)


def friction(qd, p: ArmParams):
    """F(qd) = scale * (Fv qd + Fs tanh(beta qd) + Fd qd |qd|), applied per joint."""
    xp = _xp(qd)
    f = p.f_viscous * qd + p.f_static * xp.tanh(p.f_sharpness * qd) + p.f_drag * qd * xp.abs(qd)
    return p.friction_scale * f


def regressor(q, qd, qdd, qd_ref=None):
    """Y with Y @ pi = B(q) qdd + C(q, qd) qd_ref + G(q).

    ``qd_ref`` defaults to ``qd``; passing the reference-shifted velocity gives the
    Slotine-Li regressor Y(q, qd, qd_r, qdd_r).
    """
    xp = _xp(q, qd, qdd, qd_ref)
    if qd_ref is None:
        qd_ref = qd
    c1, c2 = xp.cos(q[..., 0]), xp.cos(q[..., 1])
    s2 = xp.sin(q[..., 1])
    c12 = xp.cos(q[..., 0] + q[..., 1])
    a1, a2 = qdd[..., 0], qdd[..., 1]
    v1, v2 = qd_ref[..., 0], qd_ref[..., 1]
    w1, w2 = qd[..., 0], qd[..., 1]
    zero = 0.0 * a1
    row1 = xp.stack([
        a1,
        a1 + a2,
        c2 * (2.0 * a1 + a2) - s2 * (w2 * v1 + (w1 + w2) * v2),
        c1,
        c12,
    ], axis=-1)
    row2 = xp.stack([
        zero,
        a1 + a2,
        c2 * a1 + s2 * w1 * v1,
        zero,
        c12,
    ], axis=-1)
    return xp.stack([row1, row2], axis=-2)


@dataclass(frozen=True)
class ReferenceTrajectory:
    amplitude: tuple = (0.5, 0.4)
    omega: tuple = (0.7, 1.1)
    phase: tuple = (0.0, 0.0)

    def __call__(self, t):
        """Return (q_d, qd_d, qdd_d) at time(s) ``t``; output shape (..., 2)."""
        xp = _xp(t)
        A = np.asarray(self.amplitude, dtype=float)
        w = np.asarray(self.omega, dtype=float)
        ph = np.asarray(self.phase, dtype=float)
        if xp is torch:
            A, w, ph = (torch.as_tensor(v, dtype=t.dtype) for v in (A, w, ph))
            arg = t[..., None] * w + ph
        else:
            arg = np.asarray(t, dtype=float)[..., None] * w + ph
        sn, cs = xp.sin(arg), xp.cos(arg)
        return A * sn, A * w * cs, -A * w ** 2 * sn


def reference_eval(ref: ReferenceTrajectory, t):
    return ref(t)


def make_state(q, qd, t, ref: ReferenceTrajectory, lam):
    """Assemble a consistent extended state from joint position/velocity at time t."""
    q = np.asarray(q, dtype=float)
    qd = np.asarray(qd, dtype=float)
    q_d, qd_d, _ = ref(t)
    e = q - q_d
    ed = qd - qd_d
    s = ed + _matvec(np.asarray(lam, dtype=float), e)
    return np.concatenate([q, qd, e, ed, s], axis=-1)


def sliding_variable(e, ed, lam):
    return ed + _matvec(lam, e)


def resync_sliding(x, lam):
    """Recompute the s block from (e, ed) so that s = ed + lam e holds exactly."""
    xp = _xp(x)
    if xp is torch:
        lam = torch.as_tensor(lam, dtype=x.dtype)
        s = sliding_variable(x[..., E], x[..., ED], lam)
        return torch.cat([x[..., :8], s], dim=-1)
    x = np.array(x, dtype=float, copy=True)
    x[..., S] = sliding_variable(x[..., E], x[..., ED], np.asarray(lam, dtype=float))
    return x


def joint_acceleration(q, qd, tau, p: ArmParams, residual=None, pi=None, with_friction=True):
    """Forward dynamics qdd = B^-1 (tau - C qd - G - F) + r."""
    pi = base_parameters(p) if pi is None else pi
    if isinstance(q, torch.Tensor):
        pi = torch.as_tensor(pi, dtype=q.dtype)
    Binv = inv2(mass_matrix_from(q, pi))
    C, G = coriolis_gravity_from(q, qd, pi)
    rhs = tau - _matvec(C, qd) - G
    if with_friction:
        rhs = rhs - friction(qd, p)
    qdd = _matvec(Binv, rhs)
    if residual is not None:
        qdd = qdd + residual
    return qdd


def input_field(x, p: ArmParams):
    """g(x): zero rows at q and e blocks, B(q)^-1 at the qd, ed and s blocks."""
    xp = _xp(x)
    q = x[..., Q]
    Binv = inv2(mass_matrix(q, p))
    zero = 0.0 * Binv
    return xp.concatenate([zero, Binv, zero, Binv, Binv], axis=-2)


def drift_field(x, t, p: ArmParams, ref: ReferenceTrajectory, lam, residual=None,
                pi=None, with_friction=True):
    """h(x) with the acceleration drift a0 = B^-1(-C qd - G [- F]) + r.

    ``pi`` selects the parameter vector used for C and G (defaults to the true
    one); B in the input field is always the plant's own.
    """
    xp = _xp(x, t)
    q, qd, ed = x[..., Q], x[..., QD], x[..., ED]
    _, qd_d, qdd_d = ref(t)
    if xp is torch:
        qd_d, qdd_d = torch.as_tensor(qd_d, dtype=x.dtype), torch.as_tensor(qdd_d, dtype=x.dtype)
        lam_ = torch.as_tensor(lam, dtype=x.dtype)
    else:
        lam_ = np.asarray(lam, dtype=float)
    Binv = inv2(mass_matrix(q, p))
    if pi is None:
        C, G = coriolis_gravity(q, qd, p)
    else:
        if xp is torch:
            pi = torch.as_tensor(pi, dtype=x.dtype)
        C, G = coriolis_gravity_from(q, qd, pi)
    rhs = -_matvec(C, qd) - G
    if with_friction:
        rhs = rhs - friction(qd, p)
    a0 = _matvec(Binv, rhs)
    if residual is not None:
        a0 = a0 + residual
    return xp.concatenate([qd, a0, qd - qd_d, a0 - qdd_d, a0 - qdd_d + _matvec(lam_, ed)], axis=-1)


@dataclass
class AffineFields:
    h: np.ndarray
    g: np.ndarray

    def xdot(self, tau):
        return self.h + _matvec(self.g, tau)


def affine_fields(x, t, p: ArmParams, ref: ReferenceTrajectory, lam, residual=None,
                  pi=None, with_friction=True) -> AffineFields:
    """Control-affine decomposition xdot = h(x) + g(x) tau of the extended state."""
    return AffineFields(
        drift_field(x, t, p, ref, lam, residual=residual, pi=pi, with_friction=with_friction),
        input_field(x, p),
    )


def extended_rhs(x, t, tau, p, ref, lam, residual_fn=None):
    r = None if residual_fn is None else residual_fn(x[..., Q], x[..., QD])
    return affine_fields(x, t, p, ref, lam, residual=r).xdot(tau)


def rk4(f, x, t, dt):
    """One classical Runge-Kutta step for xdot = f(x, t)."""
    k1 = f(x, t)
    k2 = f(x + 0.5 * dt * k1, t + 0.5 * dt)
    k3 = f(x + 0.5 * dt * k2, t + 0.5 * dt)
    k4 = f(x + dt * k3, t + dt)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step(x, tau, dt, p: ArmParams, ref: ReferenceTrajectory, t, lam, residual_fn=None):
    """Advance the extended state by ``dt`` with ``tau`` held constant (zero-order hold).

    Raises NonFiniteStateError if the new state contains NaN/inf.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    tau = np.asarray(tau, dtype=float)
    with np.errstate(all="ignore"):
        x_next = rk4(lambda z, s: extended_rhs(z, s, tau, p, ref, lam, residual_fn), x, t, dt)
    if not np.all(np.isfinite(x_next)):
        raise NonFiniteStateError(f"non-finite state after RK4 step at t={t:.3f}")
    return resync_sliding(x_next, lam)


def mechanical_energy(q, qd, p: ArmParams):
    """Kinetic plus potential energy, potential measured from the hanging-down pose."""
    B = mass_matrix(q, p)
    kinetic = 0.5 * np.einsum("...i,...ij,...j->...", qd, B, qd)
    mt = p.tip_mass
    y1 = p.l1 * np.sin(q[..., 0])
    y2 = y1 + p.l2 * np.sin(q[..., 0] + q[..., 1])
    potential = p.g * (p.m1 * (y1 + p.l1) + mt * (y2 + p.l1 + p.l2))
    return kinetic + potential
