"""Structured-quadratic Lyapunov certificate V(x) = ||L(x)^T x||^2 + eps ||x||^2.

L(x) is the lower-triangular packing of a spectral-normalized tanh MLP output, so
V >= eps ||x||^2 holds by construction whatever the weights are.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from . import dynamics as dyn
from .netcore import DenseNet, adam, load_net, save_net, spectral_normalize


@dataclass(frozen=True)
class CertBounds:
    M: float          # sup ||L(x)||_F (inflated sample max)
    beta_bar: float   # M^2 + eps
    radius: float
    L_V: float        # sup ||grad V|| on the ball (inflated sample max)


class Certificate(torch.nn.Module):
    def __init__(self, dim=dyn.STATE_DIM, width=64, depth=3, eps=1e-3, radius=3.0, seed=0):
        super().__init__()
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.dim = dim
        self.eps = float(eps)
        self.radius = float(radius)
        n_out = dim * (dim + 1) // 2
        self.net = DenseNet([dim] + [width] * (depth - 1) + [n_out], spectral=True, seed=seed)
        rows, cols = torch.tril_indices(dim, dim)
        self.register_buffer("rows", rows)
        self.register_buffer("cols", cols)

    def factor(self, x):
        """Lower-triangular L(x), shape (..., dim, dim)."""
        x = torch.as_tensor(x, dtype=torch.float64)
        flat = self.net(x)
        L = flat.new_zeros(flat.shape[:-1] + (self.dim, self.dim))
        L[..., self.rows, self.cols] = flat
        return L

    def forward(self, x):
        x = torch.as_tensor(x, dtype=torch.float64)
        Ltx = (self.factor(x).transpose(-1, -2) @ x[..., None])[..., 0]
        return (Ltx ** 2).sum(-1) + self.eps * (x ** 2).sum(-1)

    def value_and_grad(self, x, create_graph=False):
        """(V, grad V) with the full derivative, including the dL/dx term."""
        x = torch.as_tensor(x, dtype=torch.float64)
        if not x.requires_grad:
            x = x.detach().requires_grad_(True)
        V = self(x)
        (g,) = torch.autograd.grad(V.sum(), x, create_graph=create_graph)
        return V, g

    def normalize(self):
        return spectral_normalize(self.net)

    # checkpoint: network bytes plus a JSON sidecar with eps, radius and bounds
    def save(self, path, bounds: CertBounds | None = None):
        path = Path(path)
        save_net(self.net, path)
        meta = {"eps": self.eps, "radius": self.radius, "dim": self.dim,
                "bounds": None if bounds is None else asdict(bounds)}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path):
        path = Path(path)
        meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        net = load_net(path)
        cert = cls(dim=meta["dim"], width=net.sizes[1], depth=len(net.sizes) - 1,
                   eps=meta["eps"], radius=meta["radius"])
        cert.net = net
        bounds = None if meta["bounds"] is None else CertBounds(**meta["bounds"])
        return cert, bounds


def eval_V(cert: Certificate, x) -> np.ndarray:
    with torch.no_grad():
        return cert(x).numpy()


def grad_V(cert: Certificate, x) -> np.ndarray:
    return cert.value_and_grad(x)[1].detach().numpy()


def analytic_candidate(x, B):
    """0.5 s^T B s + 0.5 ||e||^2 + 0.5 ||ed||^2 for extended states x (numpy or torch)."""
    s, e, ed = x[..., dyn.S], x[..., dyn.E], x[..., dyn.ED]
    sBs = (s[..., None, :] @ B @ s[..., :, None])[..., 0, 0]
    return 0.5 * sBs + 0.5 * (e ** 2).sum(-1) + 0.5 * (ed ** 2).sum(-1)


def analytic_candidate_nominal(x, p: dyn.ArmParams = dyn.PRESETS["nominal"]):
    """V_an with the zero-payload inertia of ``p``."""
    return analytic_candidate(x, dyn.mass_matrix(x[..., dyn.Q], p.with_(payload=0.0)))


# -- samplers over K = {||x|| <= R} ----------------------------------------------------


def sample_ball(rng, n, radius, dim=dyn.STATE_DIM, radial="volume"):
    """Points of the closed ball. ``radial="volume"`` is uniform in volume,
    ``"uniform"`` draws the radius uniformly (denser near the origin)."""
    d = rng.normal(size=(n, dim))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    u = rng.random((n, 1))
    r = radius * (u ** (1.0 / dim) if radial == "volume" else u)
    return r * d


def consistent_basis(lam) -> np.ndarray:
    """Orthonormal basis (10 x 8) of the subspace where s = ed + lam e."""
    lam = np.asarray(lam, dtype=float)
    A = np.zeros((dyn.STATE_DIM, 8))
    A[0:8, 0:8] = np.eye(8)
    A[dyn.S, 4:6] = lam
    A[dyn.S, 6:8] = np.eye(2)
    Qm, _ = np.linalg.qr(A)
    return Qm


def sample_consistent(rng, n, radius, lam, radial="volume"):
    """Uniform in the intersection of the ball with the s-consistent subspace."""
    z = sample_ball(rng, n, radius, dim=8, radial=radial)
    return z @ consistent_basis(lam).T


# -- warm start and bounds ------------------------------------------------------------


def relative_error(cert: Certificate, x, target) -> float:
    with torch.no_grad():
        v = cert(x).numpy()
    target = np.asarray(target)
    return float(np.mean(np.abs(v - target) / np.maximum(target, 0.01)))


def warmstart(cert: Certificate, sampler, steps: int, lr=3e-3, batch=256,
              target_fn=analytic_candidate_nominal, eval_x=None, rng=None):
    """Regress V onto ``target_fn`` by MSE on fresh batches; returns the final
    mean relative error on ``eval_x`` (default: one fresh 4096-sample batch)."""
    rng = np.random.default_rng(0) if rng is None else rng
    opt = adam(cert.parameters(), lr)
    for _ in range(steps):
        x = torch.as_tensor(sampler(rng, batch))
        loss = ((cert(x) - target_fn(x)) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        cert.normalize()
    if eval_x is None:
        eval_x = sampler(rng, 4096)
    eval_x = torch.as_tensor(eval_x)
    with torch.no_grad():
        target = target_fn(eval_x).numpy()
    return relative_error(cert, eval_x, target)


def estimate_bounds(cert: Certificate, radius=None, n_samples=10_000, rng=None,
                    safety=1.1, refine_steps=25, refine_top=32) -> CertBounds:
    """Sampled sup of ||L||_F and ||grad V|| over the ball, inflated by ``safety``.

    The best ``refine_top`` gradient samples are polished by projected gradient
    ascent on ||grad V|| before taking the max.
    """
    if n_samples < 10_000:
        raise ValueError("need at least 1e4 samples")
    radius = cert.radius if radius is None else float(radius)
    rng = np.random.default_rng(0) if rng is None else rng
    x = torch.as_tensor(sample_ball(rng, n_samples, radius))
    with torch.no_grad():
        M = float(torch.linalg.matrix_norm(cert.factor(x)).max())
    _, g = cert.value_and_grad(x)
    gn = g.norm(dim=-1)
    top = x[torch.argsort(gn, descending=True)[:refine_top]].clone()
    best = float(gn.max())
    step = 0.05 * radius
    for _ in range(refine_steps):
        top = top.detach().requires_grad_(True)
        _, gt = cert.value_and_grad(top, create_graph=True)
        obj = gt.norm(dim=-1)
        best = max(best, float(obj.detach().max()))
        (d,) = torch.autograd.grad(obj.sum(), top)
        with torch.no_grad():
            top = top + step * d / d.norm(dim=-1, keepdim=True).clamp_min(1e-12)
            nrm = top.norm(dim=-1, keepdim=True)
            top = top * torch.clamp(radius / nrm, max=1.0)
    _, gt = cert.value_and_grad(top)
    best = max(best, float(gt.norm(dim=-1).max()))
    M *= safety
    return CertBounds(M=M, beta_bar=M ** 2 + cert.eps, radius=radius, L_V=best * safety)
