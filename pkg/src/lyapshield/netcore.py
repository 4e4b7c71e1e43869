"""Small dense networks on torch float64 autograd.

Adds what torch does not ship in the exact form needed here: an in-place spectral
projection driven by persistent power-iteration vectors, and a versioned flat
binary checkpoint that round-trips bit for bit.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

ACTIVATIONS = {
    "tanh": torch.tanh,
    "relu": torch.relu,
    "linear": lambda z: z,
}

_MAGIC = b"LSNET"
FORMAT_VERSION = 1
_TAGS = ("linear", "tanh", "relu")


class DenseNet(torch.nn.Module):
    """Feed-forward net: ``x -> act_k(W_k x + b_k)`` for each layer k.

    ``hidden_act`` applies to every layer but the last, which uses ``out_act``.
    When ``spectral`` is set every weight carries a power-iteration vector and
    :func:`spectral_normalize` keeps its largest singular value at most one.
    """

    def __init__(self, sizes: Sequence[int], hidden_act="tanh", out_act="linear",
                 spectral=False, seed: int | None = 0):
        super().__init__()
        if len(sizes) < 2:
            raise ValueError("need at least input and output size")
        gen = torch.Generator().manual_seed(0 if seed is None else int(seed))
        n = len(sizes) - 1
        acts = [hidden_act] * (n - 1) + [out_act]
        for a in acts:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        flags = list(spectral) if isinstance(spectral, (list, tuple)) else [bool(spectral)] * n
        if len(flags) != n:
            raise ValueError("one spectral flag per layer")
        self.sizes = tuple(int(s) for s in sizes)
        self.acts = tuple(acts)
        self.spectral = tuple(bool(f) for f in flags)
        self.weights = torch.nn.ParameterList()
        self.biases = torch.nn.ParameterList()
        for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            w = (torch.rand(fan_out, fan_in, generator=gen, dtype=torch.float64) * 2 - 1) * bound
            self.weights.append(torch.nn.Parameter(w))
            self.biases.append(torch.nn.Parameter(torch.zeros(fan_out, dtype=torch.float64)))
            u = torch.randn(fan_out, generator=gen, dtype=torch.float64)
            self.register_buffer(f"u{k}", u / u.norm())

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def power_vector(self, k: int) -> torch.Tensor:
        return getattr(self, f"u{k}")

    def forward(self, x):
        x = torch.as_tensor(x, dtype=torch.float64)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"input has trailing size {x.shape[-1]}, net expects {self.in_dim}")
        for w, b, a in zip(self.weights, self.biases, self.acts):
            x = ACTIVATIONS[a](x @ w.T + b)
        return x

    def numpy(self, x):
        with torch.no_grad():
            return self(x).numpy()


def spectral_normalize(net: DenseNet, iterations: int = 1, method: str = "exact") -> list[float]:
    """Refresh each flagged layer's power iteration and rescale W in place if sigma > 1.

    The persistent power-iteration vector is advanced ``iterations`` times per call.
    With ``method="exact"`` the rescale divides by the LAPACK spectral norm, which
    is never below the power estimate; ``method="power"`` divides by the estimate.
    Returns the per-layer sigma used, taken before rescaling.
    """
    if method not in ("exact", "power"):
        raise ValueError(f"unknown method {method!r}")
    sigmas = []
    with torch.no_grad():
        for k, w in enumerate(net.weights):
            if not net.spectral[k]:
                continue
            u = net.power_vector(k)
            for _ in range(iterations):
                v = w.T @ u
                v = v / v.norm().clamp_min(1e-300)
                wv = w @ v
                u = wv / wv.norm().clamp_min(1e-300)
            net.power_vector(k).copy_(u)
            sigma = float(u @ (w @ v))
            if method == "exact":
                sigma = float(torch.linalg.matrix_norm(w, ord=2))
            if sigma > 1.0:
                w.div_(sigma)
            sigmas.append(sigma)
    return sigmas


def power_estimate(net: DenseNet, k: int) -> float:
    """sigma-hat of layer k from its stored power-iteration vector."""
    with torch.no_grad():
        w, u = net.weights[k], net.power_vector(k)
        v = w.T @ u
        return float(v.norm())


def input_gradient(fn, x, create_graph=False):
    """Gradient of a scalar-per-row function with respect to its input rows."""
    x = torch.as_tensor(x, dtype=torch.float64)
    if not x.requires_grad:
        x = x.detach().requires_grad_(True)
    y = fn(x)
    (g,) = torch.autograd.grad(y.sum(), x, create_graph=create_graph)
    return g


def adam(params, lr: float) -> torch.optim.Adam:
    """Adam with moments (0.9, 0.999) and eps 1e-8."""
    return torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), eps=1e-8)


def adam_step(optimizer: torch.optim.Optimizer, params, grads) -> None:
    """Write ``grads`` into the parameters' gradient slots and take one step."""
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        g = torch.as_tensor(g, dtype=p.dtype)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
        p.grad = g.clone()
    optimizer.step()


# -- checkpoints ------------------------------------------------------------------


def _pack_array(a: torch.Tensor) -> bytes:
    return np.ascontiguousarray(a.detach().numpy(), dtype="<f8").tobytes()


def net_to_bytes(net: DenseNet) -> bytes:
    out = [_MAGIC, struct.pack("<II", FORMAT_VERSION, len(net.weights))]
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        rows, cols = w.shape
        out.append(struct.pack("<IIBB", rows, cols, _TAGS.index(net.acts[k]), net.spectral[k]))
        out += [_pack_array(w), _pack_array(b), _pack_array(net.power_vector(k))]
    return b"".join(out)


def net_from_bytes(blob: bytes) -> DenseNet:
    if not blob.startswith(_MAGIC):
        raise ValueError("not a network checkpoint")
    pos = len(_MAGIC)
    version, n_layers = struct.unpack_from("<II", blob, pos)
    pos += 8
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    shapes, acts, flags, arrays = [], [], [], []
    for _ in range(n_layers):
        rows, cols, tag, sn = struct.unpack_from("<IIBB", blob, pos)
        pos += 10
        layer = []
        for count in (rows * cols, rows, rows):
            layer.append(np.frombuffer(blob, dtype="<f8", count=count, offset=pos).copy())
            pos += 8 * count
        shapes.append((rows, cols))
        acts.append(_TAGS[tag])
        flags.append(bool(sn))
        arrays.append(layer)
    if pos != len(blob):
        raise ValueError("trailing bytes in checkpoint")
    sizes = [shapes[0][1]] + [r for r, _ in shapes]
    net = DenseNet(sizes, hidden_act=acts[0] if n_layers > 1 else "tanh", out_act=acts[-1], spectral=flags)
    net.acts = tuple(acts)
    with torch.no_grad():
        for k, (w, b, u) in enumerate(arrays):
            net.weights[k].copy_(torch.from_numpy(w.reshape(shapes[k])))
            net.biases[k].copy_(torch.from_numpy(b))
            net.power_vector(k).copy_(torch.from_numpy(u))
    return net


def save_net(net: DenseNet, path) -> None:
    Path(path).write_bytes(net_to_bytes(net))


def load_net(path) -> DenseNet:
    return net_from_bytes(Path(path).read_bytes())
