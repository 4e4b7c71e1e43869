"""Physics-informed model of the arm: a parameter vector plus a residual network.

The learned forward model is

    B(q) qdd = tau - C(q, qd; pi_hat) qd - G(q; pi_hat) + B(q) r(q, qd),

so the torque-space residual Y(q, qd, qdd) pi_hat - tau - B r vanishes on data the
model explains.  On the real plant B r should converge to -F(qd): the residual
learns to cancel friction.  B is the structurally known inertia (the same matrix
that enters the input field), evaluated per sample at that sample's payload.
"""
from __future__ import annotations

import math

import numpy as np
import torch

from . import dynamics as dyn
from .netcore import DenseNet


class PinnModel(torch.nn.Module):
    def __init__(self, pi0=None, width=64, depth=3, lam_r=1e-2, seed=0):
        super().__init__()
        if lam_r < 0:
            raise ValueError("lam_r must be non-negative")
        pi0 = dyn.base_parameters(dyn.PRESETS["nominal"]) if pi0 is None else pi0
        self.pi_hat = torch.nn.Parameter(torch.as_tensor(np.array(pi0, dtype=float)))
        self.residual_net = DenseNet([2 * dyn.N_JOINTS] + [width] * (depth - 1) + [dyn.N_JOINTS], seed=seed)
        self.lam_r = float(lam_r)

    def residual(self, q, qd):
        q = torch.as_tensor(q, dtype=torch.float64)
        qd = torch.as_tensor(qd, dtype=torch.float64)
        return self.residual_net(torch.cat([q, qd], dim=-1))

    def residual_numpy(self, q, qd):
        with torch.no_grad():
            return self.residual(q, qd).numpy()


def structural_inertia(q, payload, p: dyn.ArmParams):
    """B(q) of arm ``p`` carrying per-sample ``payload`` (vectorised over samples)."""
    q = torch.as_tensor(q, dtype=torch.float64)
    payload = torch.as_tensor(payload, dtype=torch.float64)
    base = torch.as_tensor(dyn.base_parameters(p.with_(payload=0.0)))
    unit = torch.as_tensor(dyn.payload_shift(p, 1.0))
    pi = base + payload[..., None] * unit
    return dyn.mass_matrix_from(q, pi)


def make_batch(q, qd, qdd, tau, B):
    return {k: torch.as_tensor(np.asarray(v) if not isinstance(v, torch.Tensor) else v, dtype=torch.float64)
            for k, v in dict(q=q, qd=qd, qdd=qdd, tau=tau, B=B).items()}


def physics_terms(model: PinnModel, batch):
    """(L_phys, mean ||r||^2) on a batch dict with q, qd, qdd, tau, B."""
    if batch["q"].shape[0] == 0:
        raise ValueError("empty batch")
    Y = dyn.regressor(batch["q"], batch["qd"], batch["qdd"])
    r = model.residual(batch["q"], batch["qd"])
    Br = (batch["B"] @ r[..., None])[..., 0]
    res = Y @ model.pi_hat - batch["tau"] - Br
    return (res ** 2).sum(-1).mean(), (r ** 2).sum(-1).mean()


def physics_loss(model: PinnModel, batch):
    """L_phys + lam_r mean ||r||^2."""
    l_phys, l_reg = physics_terms(model, batch)
    return l_phys + model.lam_r * l_reg


def make_optimizer(model: PinnModel, lr=3e-3, pi_lr=None):
    """Adam over both heads; ``pi_lr`` (default 10 lr) lets the parameter vector move
    fast enough that the residual net does not soak up rigid-body terms first."""
    pi_lr = 10 * lr if pi_lr is None else pi_lr
    return torch.optim.Adam([
        {"params": [model.pi_hat], "lr": pi_lr},
        {"params": model.residual_net.parameters(), "lr": lr},
    ], betas=(0.9, 0.999), eps=1e-8)


def pinn_update(model: PinnModel, opt, batch) -> float:
    """One Adam step on (pi_hat, residual net). Returns the pre-step L_phys."""
    l_phys, l_reg = physics_terms(model, batch)
    loss = l_phys + model.lam_r * l_reg
    opt.zero_grad()
    loss.backward()
    opt.step()
    return float(l_phys.detach())


def learned_drift(model: PinnModel, x, t, p: dyn.ArmParams, ref, lam):
    """Drift of the learned model: pi_hat for C and G, r in place of friction.

    ``p`` supplies the structural inertia used by the shared input field.
    Accepts numpy or torch x; returns the same kind.
    """
    as_numpy = not isinstance(x, torch.Tensor)
    xt = torch.as_tensor(x, dtype=torch.float64)
    tt = torch.as_tensor(t, dtype=torch.float64)
    r = model.residual(xt[..., dyn.Q], xt[..., dyn.QD])
    h = dyn.drift_field(xt, tt, p, ref, lam, residual=r, pi=model.pi_hat, with_friction=False)
    return h.detach().numpy() if as_numpy else h


class ModelErrorEstimate:
    """Running estimate delta_hat of the model error: EMA of sqrt(L_phys)."""

    def __init__(self, delta0=0.1, rate=0.05):
        if not 0 < rate < 1:
            raise ValueError("rate must lie in (0, 1)")
        if delta0 < 0:
            raise ValueError("delta0 must be non-negative")
        self.delta = float(delta0)
        self.rate = float(rate)

    def update(self, l_phys: float) -> float:
        if not l_phys >= 0:
            raise ValueError("L_phys must be non-negative")
        self.delta = (1 - self.rate) * self.delta + self.rate * math.sqrt(l_phys)
        return self.delta


def update_delta(est: ModelErrorEstimate, l_phys: float) -> float:
    return est.update(l_phys)


def synthetic_data(rng, n, p: dyn.ArmParams, q_range=np.pi, qd_range=2.0, tau_range=15.0):
    """Random (q, qd, tau) with qdd from the true forward dynamics of ``p``."""
    q = rng.uniform(-q_range, q_range, (n, 2))
    qd = rng.uniform(-qd_range, qd_range, (n, 2))
    tau = rng.uniform(-tau_range, tau_range, (n, 2))
    qdd = dyn.joint_acceleration(q, qd, tau, p)
    B = dyn.mass_matrix(q, p)
    return make_batch(q, qd, qdd, tau, B)
