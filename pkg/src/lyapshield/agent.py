"""Residual soft actor-critic on top of the Slotine-Li torque.

The actor emits a tanh-squashed Gaussian residual bounded by ``max_residual`` per
joint; twin critics score (x, residual).  The Lagrangian penalty mu * L_lyap is
added to the actor loss either as a detached scalar (default: the gradient of the
actor loss is then exactly that of unconstrained SAC) or with its graph intact.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import dynamics as dyn
from .netcore import DenseNet, adam, net_from_bytes, net_to_bytes

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_LOG2 = math.log(2.0)


def reward(e, ed, tau, Q=None, R=None, lam_tau=1e-3):
    """-||e||_Q^2 - ||ed||_R^2 - lam_tau ||tau||^2 (identity weights by default)."""
    e, ed, tau = (np.asarray(v, dtype=float) for v in (e, ed, tau))
    Q = np.eye(e.shape[-1]) if Q is None else np.asarray(Q, float)
    R = np.eye(ed.shape[-1]) if R is None else np.asarray(R, float)
    return -(e @ Q @ e) - (ed @ R @ ed) - lam_tau * (tau @ tau)


@dataclass
class SACConfig:
    hidden: int = 128
    gamma: float = 0.98
    entropy: float = 0.05
    tau_soft: float = 5e-3
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    max_residual: float = 10.0
    penalty_mode: str = "detached"   # or "differentiable"

    def __post_init__(self):
        if self.penalty_mode not in ("detached", "differentiable"):
            raise ValueError(f"unknown penalty_mode {self.penalty_mode!r}")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0 <= self.tau_soft <= 1:
            raise ValueError("tau_soft must lie in [0, 1]")


class ResidualSAC(torch.nn.Module):
    def __init__(self, cfg: SACConfig = None, state_dim=dyn.STATE_DIM, act_dim=dyn.N_JOINTS, seed=0):
        super().__init__()
        self.cfg = SACConfig() if cfg is None else cfg
        self.state_dim, self.act_dim = state_dim, act_dim
        h = self.cfg.hidden
        self.actor = DenseNet([state_dim, h, h, 2 * act_dim], hidden_act="relu", seed=seed)
        self.q1 = DenseNet([state_dim + act_dim, h, h, 1], hidden_act="relu", seed=seed + 1)
        self.q2 = DenseNet([state_dim + act_dim, h, h, 1], hidden_act="relu", seed=seed + 2)
        self.q1_target = copy.deepcopy(self.q1)
        self.q2_target = copy.deepcopy(self.q2)
        for p in list(self.q1_target.parameters()) + list(self.q2_target.parameters()):
            p.requires_grad_(False)
        self.opt_actor = adam(self.actor.parameters(), self.cfg.lr_actor)
        self.opt_critic = adam(list(self.q1.parameters()) + list(self.q2.parameters()), self.cfg.lr_critic)
        self.gen = torch.Generator().manual_seed(int(seed))

    # -- policy ------------------------------------------------------------------------

    def _dist(self, x):
        out = self.actor(x)
        mean, log_std = out[..., :self.act_dim], out[..., self.act_dim:]
        return mean, log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)

    def squash(self, u):
        return self.cfg.max_residual * torch.tanh(u)

    def log_prob(self, u, mean, log_std):
        """Log density of the squashed, scaled action given the pre-squash sample u."""
        z = (u - mean) / log_std.exp()
        gauss = -0.5 * z ** 2 - log_std - 0.5 * math.log(2 * math.pi)
        # log(1 - tanh(u)^2), numerically stable
        log_det = 2.0 * (_LOG2 - u - F.softplus(-2.0 * u))
        return (gauss - log_det - math.log(self.cfg.max_residual)).sum(-1)

    def sample(self, x, deterministic=False):
        """(residual, log-prob) with reparameterised gradients."""
        x = torch.as_tensor(x, dtype=torch.float64)
        mean, log_std = self._dist(x)
        if deterministic:
            u = mean
        else:
            eps = torch.randn(mean.shape, generator=self.gen, dtype=torch.float64)
            u = mean + log_std.exp() * eps
        return self.squash(u), self.log_prob(u, mean, log_std)

    def mean_action(self, x):
        return self.sample(x, deterministic=True)[0]

    def act(self, x, deterministic=False) -> np.ndarray:
        with torch.no_grad():
            return self.sample(x, deterministic)[0].numpy()

    # -- critics -------------------------------------------------------------------------

    def q_values(self, x, a, target=False):
        xa = torch.cat([torch.as_tensor(x), torch.as_tensor(a)], dim=-1)
        n1, n2 = (self.q1_target, self.q2_target) if target else (self.q1, self.q2)
        return n1(xa)[..., 0], n2(xa)[..., 0]

    def polyak(self, rate=None):
        rate = self.cfg.tau_soft if rate is None else rate
        with torch.no_grad():
            for net, tgt in ((self.q1, self.q1_target), (self.q2, self.q2_target)):
                for p, pt in zip(net.parameters(), tgt.parameters()):
                    pt.mul_(1.0 - rate).add_(rate * p)

    # -- checkpoint ----------------------------------------------------------------------

    def state_bytes(self) -> dict:
        return {name: net_to_bytes(getattr(self, name))
                for name in ("actor", "q1", "q2", "q1_target", "q2_target")}

    def load_state_bytes(self, blobs: dict):
        for name, blob in blobs.items():
            src = net_from_bytes(blob)
            with torch.no_grad():
                for p, ps in zip(getattr(self, name).parameters(), src.parameters()):
                    p.copy_(ps)


def sac_update(agent: ResidualSAC, batch: dict, mu=0.0, penalty=None) -> dict:
    """One critic step, one actor step, one Polyak update.

    ``batch`` holds tensors x, a (raw residual), r, x_next, done.  ``penalty`` is
    the constraint term L_lyap (tensor); it is scaled by ``mu`` and detached in the
    default penalty mode.
    """
    if mu < 0:
        raise ValueError("mu must be non-negative")
    cfg = agent.cfg
    x, a, r = batch["x"], batch["a"], batch["r"]
    x_next, done = batch["x_next"], batch["done"]
    if x.shape[0] < 1:
        raise ValueError("empty batch")

    with torch.no_grad():
        a_next, logp_next = agent.sample(x_next)
        q1t, q2t = agent.q_values(x_next, a_next, target=True)
        y = r + cfg.gamma * (1.0 - done) * (torch.minimum(q1t, q2t) - cfg.entropy * logp_next)
    q1, q2 = agent.q_values(x, a)
    critic_loss = F.mse_loss(q1, y) + F.mse_loss(q2, y)
    agent.opt_critic.zero_grad()
    critic_loss.backward()
    agent.opt_critic.step()

    a_new, logp = agent.sample(x)
    q1n, q2n = agent.q_values(x, a_new)
    actor_loss = (cfg.entropy * logp - torch.minimum(q1n, q2n)).mean()
    pen = torch.zeros((), dtype=torch.float64)
    if penalty is not None and mu > 0:
        pen = mu * (penalty.detach() if cfg.penalty_mode == "detached" else penalty)
        actor_loss = actor_loss + pen
    agent.opt_actor.zero_grad()
    actor_loss.backward()
    agent.opt_actor.step()
    agent.polyak()
    return {
        "critic_loss": float(critic_loss.detach()),
        "actor_loss": float(actor_loss.detach()),
        "entropy": float(-logp.detach().mean()),
        "penalty": float(pen.detach()),
    }


class ReplayBuffer:
    """Ring buffer of transitions stored as named float64 columns."""

    FIELDS = {
        "x": dyn.STATE_DIM, "x_next": dyn.STATE_DIM, "a": dyn.N_JOINTS,
        "tau_applied": dyn.N_JOINTS, "tau_sl": dyn.N_JOINTS, "qdd": dyn.N_JOINTS,
        "r": 1, "done": 1, "t": 1, "payload": 1, "friction_scale": 1,
        "sl_pi_hat": dyn.N_PARAMS, "episode": 1, "step": 1,
    }

    def __init__(self, capacity=100_000, seed=0):
        self.capacity = int(capacity)
        self.cols = {k: np.zeros((self.capacity, w)) for k, w in self.FIELDS.items()}
        self.size = 0
        self.ptr = 0
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return self.size

    def push(self, **tr):
        missing = set(self.FIELDS) - set(tr)
        if missing:
            raise KeyError(f"transition missing {sorted(missing)}")
        row = {k: np.atleast_1d(np.asarray(v, dtype=float)) for k, v in tr.items() if k in self.FIELDS}
        for k, v in row.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"non-finite {k} in transition")
        for k, v in row.items():
            self.cols[k][self.ptr] = v
        self.ptr = (self.ptr + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def indices(self, n):
        if self.size == 0:
            raise ValueError("empty buffer")
        return self.rng.integers(0, self.size, size=n)

    def take(self, idx, as_tensor=True) -> dict:
        out = {}
        for k, arr in self.cols.items():
            v = arr[idx]
            if self.FIELDS[k] == 1:
                v = v[:, 0]
            out[k] = torch.as_tensor(v) if as_tensor else v
        return out

    def sample(self, n, as_tensor=True) -> dict:
        return self.take(self.indices(n), as_tensor)

    def state(self) -> dict:
        return {"cols": {k: v.copy() for k, v in self.cols.items()}, "size": self.size, "ptr": self.ptr}

    def restore(self, st: dict):
        self.cols = {k: v.copy() for k, v in st["cols"].items()}
        self.size, self.ptr = st["size"], st["ptr"]
