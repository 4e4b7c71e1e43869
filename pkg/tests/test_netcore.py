import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from lyapshield import netcore
from lyapshield.netcore import DenseNet, spectral_normalize
from oracles import central_diff_grad


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def test_identity_linear_layer():
    net = DenseNet([3, 3], out_act="linear")
    with torch.no_grad():
        net.weights[0].copy_(torch.eye(3))
    x = torch.tensor([[0.3, -1.0, 2.0]])
    assert torch.equal(net(x), x)


def test_tanh_at_zero():
    net = DenseNet([1, 1], out_act="tanh")
    with torch.no_grad():
        net.weights[0].fill_(1.0)
    g = netcore.input_gradient(lambda z: net(z)[..., 0], torch.zeros(1, 1))
    assert net(torch.zeros(1, 1)).item() == 0.0
    assert g.item() == 1.0


def test_dimension_mismatch():
    with pytest.raises(ValueError, match="expects 4"):
        DenseNet([4, 8, 1])(torch.zeros(2, 3))


def test_deep_tanh_net_gradient_matches_finite_differences(rng):
    net = DenseNet([6, 64, 64, 64, 1], seed=3)
    f = lambda z: net.numpy(z[None])[0, 0]
    worst = 0.0
    for x in rng.normal(size=(100, 6)):
        g = netcore.input_gradient(lambda z: net(z)[..., 0], torch.tensor(x[None]))[0].numpy()
        worst = max(worst, rel_err(g, central_diff_grad(f, x)))
    assert worst < 1e-6


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    act=st.sampled_from(["tanh", "relu", "linear"]),
    depth=st.integers(1, 3),
    width=st.integers(2, 24),
)
def test_gradient_exactness_property(seed, act, depth, width):
    rng = np.random.default_rng(seed)
    net = DenseNet([5] + [width] * depth + [3], hidden_act=act, seed=seed)
    with torch.no_grad():
        for b in net.biases:
            b.copy_(torch.as_tensor(rng.normal(size=b.shape)))
    weights = rng.normal(size=3)
    scalar = lambda z: net(z) @ torch.as_tensor(weights)
    x = rng.normal(size=5)
    g = netcore.input_gradient(scalar, torch.tensor(x[None]))[0].numpy()
    fd = central_diff_grad(lambda z: scalar(torch.tensor(z[None])).item(), x)
    if act == "relu":
        # finite differences straddling a kink are not a valid oracle
        h = torch.tensor(x[None])
        kinks = []
        for w, b in zip(net.weights[:-1], net.biases[:-1]):
            z = h @ w.T + b
            kinks.append(z.abs().min().item())
            h = torch.relu(z)
        if min(kinks) < 1e-3:
            return
    assert rel_err(g, fd) < 1e-6


def test_spectral_isotropic_scaling():
    net = DenseNet([2, 2], spectral=True)
    with torch.no_grad():
        net.weights[0].copy_(3.0 * torch.eye(2))
    for _ in range(20):
        spectral_normalize(net, method="power")
    np.testing.assert_allclose(net.weights[0].detach().numpy(), np.eye(2), atol=1e-12)


def test_spectral_leaves_small_weights():
    net = DenseNet([2, 2], spectral=True)
    w = torch.tensor([[0.5, 0.0], [0.0, 0.2]])
    with torch.no_grad():
        net.weights[0].copy_(w)
    for method in ("power", "exact"):
        spectral_normalize(net, method=method)
        assert torch.equal(net.weights[0].detach(), w)


@pytest.mark.parametrize("seed", range(5))
def test_spectral_random_square(seed):
    net = DenseNet([64, 64], spectral=True, seed=seed)
    with torch.no_grad():
        net.weights[0].mul_(5.0)
    for _ in range(10):
        spectral_normalize(net)
    sigma = np.linalg.svd(net.weights[0].detach().numpy(), compute_uv=False)[0]
    assert sigma <= 1.001


@pytest.mark.parametrize("sizes", [[10, 64, 64, 55], [4, 64, 64, 2], [12, 256, 256, 2]])
def test_spectral_bound_all_sizes(sizes):
    net = DenseNet(sizes, spectral=True, seed=1)
    with torch.no_grad():
        for w in net.weights:
            w.mul_(4.0)
    for _ in range(200):
        spectral_normalize(net)
    for k, w in enumerate(net.weights):
        svd = np.linalg.svd(w.detach().numpy(), compute_uv=False)[0]
        est = netcore.power_estimate(net, k)
        assert svd <= 1.001 and est <= 1.001
        assert abs(est - svd) / svd < 0.01


def test_adam_zero_gradient_is_noop():
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0]))
    opt = netcore.adam([p], lr=0.1)
    netcore.adam_step(opt, [p], [torch.zeros(2)])
    assert torch.equal(p.detach(), torch.tensor([1.0, -2.0]))


def test_adam_first_step_hand_computed():
    g = np.array([0.5, -3e-4])
    p = torch.nn.Parameter(torch.zeros(2))
    opt = netcore.adam([p], lr=1e-2)
    netcore.adam_step(opt, [p], [torch.as_tensor(g)])
    m_hat = (1 - 0.9) * g / (1 - 0.9)
    v_hat = (1 - 0.999) * g ** 2 / (1 - 0.999)
    np.testing.assert_allclose(p.detach().numpy(), -1e-2 * m_hat / (np.sqrt(v_hat) + 1e-8), rtol=1e-12)


def test_adam_descends_quadratic():
    p = torch.nn.Parameter(torch.tensor([2.0]))
    opt = netcore.adam([p], lr=0.1)
    losses = []
    for _ in range(3):
        losses.append(float(p.detach() ** 2))
        netcore.adam_step(opt, [p], [2 * p.detach()])
    losses.append(float(p.detach() ** 2))
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_adam_shape_mismatch():
    p = torch.nn.Parameter(torch.zeros(2))
    with pytest.raises(ValueError):
        netcore.adam_step(netcore.adam([p], 0.1), [p], [torch.zeros(3)])


def train_a_bit(seed):
    torch.manual_seed(seed)
    net = DenseNet([3, 16, 1], spectral=True, seed=seed)
    opt = netcore.adam(net.parameters(), 1e-2)
    x = torch.linspace(-1, 1, 30).reshape(10, 3)
    for _ in range(20):
        opt.zero_grad()
        loss = (net(x) - x.sum(-1, keepdim=True)).pow(2).mean()
        loss.backward()
        opt.step()
        spectral_normalize(net)
    return netcore.net_to_bytes(net)


def test_determinism():
    assert train_a_bit(7) == train_a_bit(7)
    assert train_a_bit(7) != train_a_bit(8)


def test_checkpoint_round_trip(tmp_path):
    net = DenseNet([10, 64, 64, 55], spectral=[True, True, False], hidden_act="relu", seed=4)
    spectral_normalize(net)
    path = tmp_path / "net.bin"
    netcore.save_net(net, path)
    back = netcore.load_net(path)
    assert back.acts == net.acts and back.spectral == net.spectral
    for a, b in zip(net.state_dict().values(), back.state_dict().values()):
        assert torch.equal(a, b)
    assert netcore.net_to_bytes(back) == path.read_bytes()


def test_checkpoint_rejects_garbage():
    with pytest.raises(ValueError):
        netcore.net_from_bytes(b"nope")
    blob = netcore.net_to_bytes(DenseNet([2, 2]))
    with pytest.raises(ValueError, match="version"):
        netcore.net_from_bytes(blob[:5] + (99).to_bytes(4, "little") + blob[9:])
