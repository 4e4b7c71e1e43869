"""Closed-form safety filter: Euclidean projection of a torque onto one half-space.

The decrease condition Vdot + alpha V <= 0 is affine in the torque,
Vdot = a + b.tau, so the safe set is {tau : b.tau <= c - margin} with
c = -a - alpha V.  When ||b||^2 falls to b_min or below the torque has (almost)
no authority over Vdot; the filter then passes the raw torque through and only
reports whether the drift alone satisfies the condition.

All functions accept numpy arrays or torch tensors with leading batch dims.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .dynamics import _xp

DENOM_FLOOR = 1e-8
B_MIN = 1e-3


@dataclass
class ShieldCoefficients:
    a: object        # grad V . h
    b: object        # g^T grad V, trailing size n
    c: object        # -a - alpha V
    V: object
    margin: object = 0.0


@dataclass
class ShieldOutcome:
    tau_safe: object
    slack: object
    active: object
    degenerate: object
    infeasible_at_degenerate: object


def coefficients_from(V, grad_V, h, g, alpha, margin=0.0) -> ShieldCoefficients:
    """Coefficients from precomputed V, grad V, drift h (..., d) and input field g (..., d, n)."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if (margin < 0) if np.isscalar(margin) else bool((margin < 0).any()):
        raise ValueError("margin must be non-negative")
    a = (grad_V * h).sum(-1)
    b = (grad_V[..., None, :] @ g)[..., 0, :]
    return ShieldCoefficients(a=a, b=b, c=-a - alpha * V, V=V, margin=margin)


def coefficients(cert, x, h, g, alpha, margin=0.0, create_graph=False) -> ShieldCoefficients:
    """Evaluate V and grad V of ``cert`` at x and assemble (a, b, c).

    Returns torch tensors when x is a tensor, numpy arrays otherwise.
    """
    as_numpy = not isinstance(x, torch.Tensor)
    V, gV = cert.value_and_grad(x, create_graph=create_graph)
    h = torch.as_tensor(h, dtype=torch.float64)
    g = torch.as_tensor(g, dtype=torch.float64)
    co = coefficients_from(V, gV, h, g, alpha, margin)
    if as_numpy:
        co = ShieldCoefficients(*(v.detach().numpy() if isinstance(v, torch.Tensor) else v
                                  for v in (co.a, co.b, co.c, co.V, co.margin)))
    return co


def project(tau_raw, co: ShieldCoefficients, b_min=B_MIN) -> ShieldOutcome:
    """Closed-form projection, gated off where ||b||^2 <= b_min.

    Differentiable in every input when called with torch tensors.
    """
    xp = _xp(tau_raw, co.b, co.c)
    if xp is np:
        tau_raw = np.asarray(tau_raw, dtype=float)
        if not np.all(np.isfinite(tau_raw)):
            raise ValueError("non-finite raw torque")
    elif not bool(torch.isfinite(tau_raw).all()):
        raise ValueError("non-finite raw torque")
    if not b_min > 0:
        raise ValueError("b_min must be positive")
    b = co.b
    bound = co.c - co.margin
    bb = (b * b).sum(-1)
    excess = (b * tau_raw).sum(-1) - bound
    degenerate = bb <= b_min
    if xp is np:
        slack = np.where(degenerate, 0.0, np.maximum(excess, 0.0))
        step = slack / np.maximum(bb, DENOM_FLOOR)
    else:
        slack = torch.where(degenerate, torch.zeros_like(excess), torch.clamp(excess, min=0.0))
        step = slack / bb.clamp(min=DENOM_FLOOR)
    tau_safe = tau_raw - step[..., None] * b
    return ShieldOutcome(
        tau_safe=tau_safe,
        slack=slack,
        active=slack > 0,
        degenerate=degenerate,
        infeasible_at_degenerate=degenerate & (bound < 0),
    )


def shield_jacobian(co: ShieldCoefficients, tau_raw, b_min=B_MIN):
    """d tau_safe / d tau_raw for a single (unbatched) constraint.

    Inactive or degenerate gives the identity; active gives I - b b^T / ||b||^2.
    On the kink (b.tau_raw == c - margin) the inactive branch is taken, a valid
    Clarke subgradient; ``on_kink`` in the returned tuple flags that case.
    """
    b = np.asarray(co.b, dtype=float)
    tau_raw = np.asarray(tau_raw, dtype=float)
    n = b.shape[-1]
    bb = float(b @ b)
    excess = float(b @ tau_raw - (co.c - co.margin))
    on_kink = excess == 0.0
    if bb <= b_min or excess <= 0.0:
        return np.eye(n), on_kink
    return np.eye(n) - np.outer(b, b) / max(bb, DENOM_FLOOR), on_kink


def activity_stats(outcomes) -> dict:
    """Per-episode summary: fraction active, fraction degenerate, max slack."""
    active = np.array([bool(o.active) for o in outcomes])
    degen = np.array([bool(o.degenerate) for o in outcomes])
    infeas = np.array([bool(o.infeasible_at_degenerate) for o in outcomes])
    slack = np.array([float(o.slack) for o in outcomes])
    if len(outcomes) == 0:
        return {"frac_active": 0.0, "frac_degenerate": 0.0, "frac_infeasible": 0.0, "max_slack": 0.0}
    return {
        "frac_active": float(active.mean()),
        "frac_degenerate": float(degen.mean()),
        "frac_infeasible": float(infeas.mean()),
        "max_slack": float(slack.max()),
    }
