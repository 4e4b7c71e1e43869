"""Offline certification of a trained certificate.

Two reports:

* the drift-decay check on the control-degeneracy shell {||b||^2 <= b_min}:
  worst empirical slack max(a + alpha V) plus the Lipschitz cover term L eps*
  must be <= 0;
* the uniform coverage bound on the shielded violation over the ball K:
  mean violation + M sqrt((2 log(1/eta) + 2 d log(2 D_K / eps*)) / N) + L eps*.

The shell is a surrogate for the exact degeneracy manifold, and points found by
descent are not i.i.d.; each report carries its sampling mode so that caveat is
never lost.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from . import dynamics as dyn
from . import lyapcert as lc
from . import shield as sh
from .closedloop import Context, Drift
from .trainloop import epsilon_star, lipschitz_slack, pairwise_slope, policy_violation

IID_CAVEAT = ("descent-found points are not i.i.d. draws from K intersected with Z; "
              "the shell ||b||^2 <= b_min stands in for Z itself")


def _context(n, payload=0.0, friction_scale=1.0, t=0.0):
    return Context(torch.full((n,), float(t)), torch.full((n,), float(payload)),
                   torch.full((n,), float(friction_scale)), torch.zeros(n, dyn.N_PARAMS))


def b_squared(cert, drift: Drift, x, ctx: Context):
    """||g(x)^T grad V(x)||^2, differentiable in x."""
    x = torch.as_tensor(x, dtype=torch.float64)
    _, g = drift.fields(x.detach(), ctx)
    _, gV = cert.value_and_grad(x, create_graph=x.requires_grad)
    b = (gV[..., None, :] @ g)[..., 0, :]
    return (b ** 2).sum(-1)


@dataclass
class DegeneracySample:
    x: np.ndarray          # (n, 10) states with ||b||^2 <= b_min
    b_sq: np.ndarray       # achieved ||b||^2
    source: np.ndarray     # "origin", "rejection" or "descent" per point
    tried: int

    @property
    def mode(self) -> str:
        kinds = sorted(set(self.source.tolist()))
        return "+".join(kinds) if kinds else "none"


def sample_degeneracy_set(cert, drift: Drift, radius=3.0, b_min=sh.B_MIN, budget=4096, rng=None,
                          descent_starts=256, descent_steps=60, consistent=True, payload=0.0):
    """Rejection sampling over K plus line-searched descent on ||b||^2.

    ``consistent`` restricts both stages to the subspace s = ed + lam e (the set
    the plant can actually visit).  The origin is always included.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    lam = drift.setup.lam
    basis = lc.consistent_basis(lam) if consistent else None

    def draw(n):
        return lc.sample_consistent(rng, n, radius, lam) if consistent else lc.sample_ball(rng, n, radius)

    found_x, found_b, source = [np.zeros(dyn.STATE_DIM)], [0.0], ["origin"]

    xs = draw(budget)
    bb = b_squared(cert, drift, torch.as_tensor(xs), _context(budget, payload)).detach().numpy()
    keep = bb <= b_min
    found_x.extend(xs[keep])
    found_b.extend(bb[keep])
    source.extend(["rejection"] * int(keep.sum()))

    n = min(descent_starts, budget)
    if n > 0 and descent_steps > 0:
        x, b_final = descend_b(cert, drift, draw(n), radius, basis, descent_steps, payload)
        keep = b_final <= b_min
        found_x.extend(x[keep])
        found_b.extend(b_final[keep])
        source.extend(["descent"] * int(keep.sum()))
    return DegeneracySample(np.array(found_x), np.array(found_b), np.array(source), budget + n)


def descend_b(cert, drift: Drift, x0, radius, basis=None, steps=60, payload=0.0, step0=0.5):
    """Per-point gradient descent on ||b||^2 with backtracking; a step is taken
    only if it lowers the objective, so every trajectory is monotone."""
    x = torch.as_tensor(np.array(x0, dtype=float))
    n = x.shape[0]
    ctx = _context(n, payload)
    P = None if basis is None else torch.as_tensor(basis @ basis.T)
    step = torch.full((n,), float(step0))

    def obj(z):
        return b_squared(cert, drift, z, ctx)

    for _ in range(steps):
        z = x.clone().requires_grad_(True)
        f = obj(z)
        (grad,) = torch.autograd.grad(f.sum(), z)
        f = f.detach()
        if P is not None:
            grad = grad @ P
        direction = grad / grad.norm(dim=-1, keepdim=True).clamp_min(1e-300)
        accepted = torch.zeros(n, dtype=torch.bool)
        for _ in range(12):
            cand = x - step[:, None] * direction
            cand = cand * torch.clamp(radius / cand.norm(dim=-1, keepdim=True).clamp_min(1e-300), max=1.0)
            fc = obj(cand).detach()
            ok = (fc < f) & ~accepted
            x = torch.where(ok[:, None], cand, x)
            accepted |= ok
            step = torch.where(ok | accepted, step, step * 0.5)
            if bool(accepted.all()):
                break
        step = torch.where(accepted, step * 1.5, step)
    return x.numpy(), obj(x).detach().numpy()


@dataclass
class CertReport:
    N: int
    slack_max: float       # max over samples of a + alpha V
    eps_star: float
    lipschitz: float
    cover_term: float      # L eps*
    passed: bool
    d_Z: int
    eta: float
    alpha: float
    sampling: str
    caveat: str = IID_CAVEAT

    def to_dict(self):
        return asdict(self)


def drift_decay_certificate(cert, drift: Drift, z_points, alpha, L=None, eta=0.05, d_Z=8,
                            sampling="unspecified", payload=0.0, inflation=2.0) -> CertReport:
    """Empirical slack max(a + alpha V) on Z samples against the cover term L eps*.

    ``L`` defaults to the inflated pairwise slope of a + alpha V over the samples.
    """
    z = torch.as_tensor(np.atleast_2d(np.asarray(z_points, dtype=float)))
    N = z.shape[0]
    if N < 1:
        raise ValueError("need at least one Z sample")
    h, g = drift.fields(z, _context(N, payload))
    co = sh.coefficients(cert, z, h, g, alpha)
    slack = (co.a + alpha * co.V).detach().numpy()
    if L is None:
        L = pairwise_slope(slack, z.numpy(), inflation)
    worst, eps, cover, passed = decay_verdict(slack, L, N, eta, d_Z)
    return CertReport(N=N, slack_max=worst, eps_star=eps, lipschitz=float(L), cover_term=cover,
                      passed=passed, d_Z=d_Z, eta=eta, alpha=float(alpha), sampling=sampling)


def decay_verdict(slacks, L, N, eta, d_Z):
    """(max slack, eps*, L eps*, pass) with pass the literal max + L eps* <= 0."""
    log_inv_eta = math.log(1.0 / eta)
    eps = epsilon_star(L, N, log_inv_eta, d_Z) if L > 0 else math.inf
    cover = lipschitz_slack(L, N, log_inv_eta, d_Z)
    worst = float(np.max(slacks))
    return worst, eps, cover, bool(worst + cover <= 0)


def covering_number_bound(diameter, eps, dim):
    """(2 D_K / eps)^d, valid for eps <= D_K."""
    if not 0 < eps <= diameter:
        raise ValueError("need 0 < eps <= diameter")
    return (2.0 * diameter / eps) ** dim


@dataclass
class CoverageReport:
    N: int
    mean_violation: float
    max_violation: float
    lipschitz: float
    M: float
    eps_star: float
    eps_used: float
    statistical_term: float
    cover_term: float
    bound: float
    diameter: float
    dim: int
    eta: float

    def to_dict(self):
        return asdict(self)


def coverage_bound_value(mean_violation, N, L, M, eta, diameter, dim):
    """Two-term bound at the optimal radius.  eps* is capped at the diameter,
    where the covering lemma stops applying (and L = 0 sends eps* to infinity)."""
    log_inv_eta = math.log(1.0 / eta)
    eps = epsilon_star(L, N, log_inv_eta, dim) if L > 0 else math.inf
    eps_used = min(eps, diameter)
    stat = M * math.sqrt((2 * log_inv_eta + 2 * dim * math.log(2 * diameter / eps_used)) / N)
    cover = L * eps_used
    return eps, eps_used, stat, cover, mean_violation + stat + cover


def pac_coverage_bound(violation_fn, x, ctx, eta=0.05, L_tot=None, M_bound=None, radius=3.0,
                       pairs=1000, rng=None) -> CoverageReport:
    """Coverage bound from N uniform samples ``x`` of K.

    ``violation_fn(x, ctx)`` is the per-point shielded violation.  ``L_tot`` and
    ``M_bound`` default to the near-pair slope estimate and 2x the sample max.
    """
    x = torch.as_tensor(np.asarray(x, dtype=float))
    N, dim = x.shape
    ell = violation_fn(x, ctx).detach().numpy()
    if L_tot is None:
        L_tot = lipschitz_estimate(lambda z, idx: violation_fn(torch.as_tensor(z), _take(ctx, idx)).detach().numpy(),
                                   x.numpy(), pairs=pairs, radius=radius, rng=rng, with_index=True)
    if M_bound is None:
        M_bound = 2.0 * float(ell.max())
    diameter = 2.0 * radius
    eps, eps_used, stat, cover, bound = coverage_bound_value(float(ell.mean()), N, L_tot, M_bound, eta,
                                                             diameter, dim)
    return CoverageReport(N=N, mean_violation=float(ell.mean()), max_violation=float(ell.max()),
                          lipschitz=float(L_tot), M=float(M_bound), eps_star=eps, eps_used=eps_used,
                          statistical_term=stat, cover_term=cover, bound=bound, diameter=diameter,
                          dim=dim, eta=eta)


def _take(ctx: Context, idx):
    idx = torch.as_tensor(idx)
    return Context(ctx.t[idx], ctx.payload[idx], ctx.friction_scale[idx], ctx.sl_pi_hat[idx])


def lipschitz_estimate(fn, points, pairs=1000, radius=3.0, scale=0.05, inflation=2.0, rng=None,
                       with_index=False):
    """max |f(x) - f(y)| / ||x - y|| over random near pairs, times ``inflation``.

    Anchors are drawn from ``points`` and partners sit at distance up to
    ``scale * radius`` in a random direction, clipped back into the ball.
    ``fn`` maps an (n, d) array to (n,), or (array, anchor indices) with
    ``with_index``.
    """
    if pairs < 1000:
        raise ValueError("need at least 1e3 pairs")
    rng = np.random.default_rng(0) if rng is None else rng
    points = np.asarray(points, dtype=float)
    idx = rng.integers(0, len(points), pairs)
    xa = points[idx]
    d = rng.normal(size=xa.shape)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    xb = xa + (scale * radius * rng.random((pairs, 1))) * d
    nb = np.linalg.norm(xb, axis=1, keepdims=True)
    xb = xb * np.minimum(1.0, radius / np.maximum(nb, 1e-300))
    call = (lambda z: fn(z, idx)) if with_index else fn
    fa, fb = np.asarray(call(xa), float), np.asarray(call(xb), float)
    dist = np.linalg.norm(xa - xb, axis=1)
    ok = dist > 1e-12
    if not ok.any():
        return 0.0
    return inflation * float(np.max(np.abs(fa - fb)[ok] / dist[ok]))


def certify_checkpoint(ck, n_coverage=4096, budget=4096, eta=0.05, alpha=None, seed=0, use_policy=True):
    """Both reports for a loaded checkpoint (see ``trainloop.load_checkpoint``).

    The shield drift is the checkpoint's own choice; coverage samples get the
    nominal plant context and the policy's mean residual (SL only without it).
    """
    from .trainloop import make_drift, make_setup
    cfg, L = ck.cfg, ck.learners
    setup = make_setup(cfg)
    drift = make_drift(cfg, setup, L.model)
    alpha = L.alpha if alpha is None else alpha
    rng = np.random.default_rng(seed)
    zs = sample_degeneracy_set(L.cert, drift, cfg.radius, cfg.effective_b_min, budget, rng)
    cert_rep = drift_decay_certificate(L.cert, drift, zs.x, alpha, eta=eta, d_Z=cfg.d_Z, sampling=zs.mode)
    x = lc.sample_consistent(rng, n_coverage, cfg.radius, setup.lam)
    ctx = _context(n_coverage)
    agent = L.agent if use_policy else None

    def viol(z, c):
        return policy_violation(L.cert, agent, drift, setup, torch.as_tensor(z), c, alpha,
                                cfg.robust_margin, cfg.effective_b_min, create_graph=False)

    cov = pac_coverage_bound(viol, x, ctx, eta=eta, radius=cfg.radius, rng=rng)
    return cert_rep, cov, zs
