import numpy as np
import pytest
import torch

from lyapshield import dynamics as dyn
from lyapshield import lyapcert as lc
from oracles import central_diff_grad

LAM = 5.0 * np.eye(2)


def constant_cert(L, eps=1e-3):
    """Certificate whose net ignores x and emits the packed factor L."""
    cert = lc.Certificate(eps=eps)
    with torch.no_grad():
        for w, b in zip(cert.net.weights, cert.net.biases):
            w.zero_()
            b.zero_()
        cert.net.biases[-1].copy_(torch.as_tensor(L)[cert.rows, cert.cols])
    return cert


def test_value_at_origin_and_floor():
    cert = lc.Certificate(seed=2)
    assert lc.eval_V(cert, np.zeros(10)) == 0.0
    e1 = np.eye(10)[0]
    assert lc.eval_V(constant_cert(np.zeros((10, 10))), e1) == pytest.approx(1e-3, abs=1e-15)
    assert lc.eval_V(constant_cert(np.eye(10)), e1) == pytest.approx(1.001, abs=1e-15)


def test_factor_is_lower_triangular(rng):
    L = lc.Certificate(seed=1).factor(torch.as_tensor(rng.normal(size=(5, 10)))).detach().numpy()
    np.testing.assert_array_equal(np.triu(L, 1), 0.0)


def test_gradient_at_origin_is_zero():
    g = lc.grad_V(lc.Certificate(seed=3), np.zeros((1, 10)))
    np.testing.assert_array_equal(g, 0.0)


def test_constant_factor_gradient_is_quadratic(rng):
    L = np.tril(rng.normal(size=(10, 10)))
    cert = constant_cert(L)
    P = L @ L.T + 1e-3 * np.eye(10)
    x = rng.normal(size=(20, 10))
    np.testing.assert_allclose(lc.grad_V(cert, x), 2 * x @ P, rtol=1e-12, atol=1e-12)


def test_gradient_matches_finite_differences(rng):
    cert = lc.Certificate(seed=5)
    with torch.no_grad():
        for b in cert.net.biases:
            b.copy_(torch.as_tensor(rng.normal(scale=0.5, size=b.shape)))
    f = lambda z: lc.eval_V(cert, z[None])[0]
    worst = 0.0
    for x in lc.sample_ball(rng, 100, 3.0):
        g = lc.grad_V(cert, x[None])[0]
        fd = central_diff_grad(f, x)
        worst = max(worst, np.linalg.norm(g - fd) / np.linalg.norm(fd))
    assert worst < 1e-6


def test_analytic_candidate_examples(rng):
    x = np.zeros(10)
    assert lc.analytic_candidate(x, np.eye(2)) == 0.0
    x[dyn.S] = [1.0, 0.0]
    assert lc.analytic_candidate(x, np.eye(2)) == 0.5
    xs = lc.sample_consistent(rng, 1000, 3.0, LAM)
    assert np.all(lc.analytic_candidate_nominal(xs) > 0)


def test_consistent_sampler(rng):
    x = lc.sample_consistent(rng, 5000, 3.0, LAM)
    assert np.linalg.norm(x, axis=1).max() <= 3.0 + 1e-12
    np.testing.assert_allclose(x[:, dyn.S], x[:, dyn.ED] + x[:, dyn.E] @ LAM.T, atol=1e-12)


def test_sandwich_is_structural(rng):
    # weights scaled far outside anything training would produce
    cert = lc.Certificate(seed=9)
    with torch.no_grad():
        for w in cert.net.weights:
            w.mul_(30.0)
    x = lc.sample_ball(rng, 20_000, 3.0)
    v = lc.eval_V(cert, x)
    assert np.all(v >= 1e-3 * (x ** 2).sum(1) - 1e-12)


def test_zero_factor_bounds():
    b = lc.estimate_bounds(constant_cert(np.zeros((10, 10))))
    assert b.M == 0.0 and b.beta_bar == 1e-3


def test_constant_factor_gradient_bound(rng):
    L = np.tril(rng.normal(scale=0.5, size=(10, 10)))
    P = L @ L.T + 1e-3 * np.eye(10)
    analytic = 2 * np.linalg.eigvalsh(P).max() * 3.0
    b = lc.estimate_bounds(constant_cert(L), rng=rng)
    assert abs(b.L_V - analytic) / analytic < 0.10
    assert b.M == pytest.approx(1.1 * np.linalg.norm(L), rel=1e-12)


def test_bounds_validate_sample_count():
    with pytest.raises(ValueError):
        lc.estimate_bounds(lc.Certificate(), n_samples=100)


@pytest.fixture(scope="module")
def warm_cert():
    cert = lc.Certificate(seed=0)
    sampler = lambda r, n: lc.sample_consistent(r, n, 3.0, LAM)
    err0 = lc.warmstart(cert, sampler, 0)
    err = lc.warmstart(cert, sampler, 2000, lr=3e-3)
    return cert, err0, err


def test_warmstart_reaches_target(warm_cert):
    _, err0, err = warm_cert
    assert err0 > 0.05
    assert err <= 0.05


def test_warmstart_minimum_near_origin(warm_cert):
    cert, _, _ = warm_cert
    x = lc.sample_ball(np.random.default_rng(3), 100_000, 3.0, radial="uniform")
    assert np.linalg.norm(x[np.argmin(lc.eval_V(cert, x))]) <= 0.1


def test_sandwich_after_warmstart(warm_cert):
    cert, _, _ = warm_cert
    b = lc.estimate_bounds(cert)
    x = lc.sample_ball(np.random.default_rng(4), 100_000, 3.0)
    v = lc.eval_V(cert, x)
    n2 = (x ** 2).sum(1)
    assert np.all(v >= cert.eps * n2 - 1e-12)
    assert np.all(v <= b.beta_bar * n2)
    assert b.beta_bar < 101 and b.L_V < 600 * 1.1


def test_checkpoint_round_trip(tmp_path, warm_cert):
    cert, _, _ = warm_cert
    b = lc.estimate_bounds(cert)
    cert.save(tmp_path / "cert.bin", b)
    back, b2 = lc.Certificate.load(tmp_path / "cert.bin")
    assert b2 == b
    x = lc.sample_ball(np.random.default_rng(0), 50, 3.0)
    np.testing.assert_array_equal(lc.eval_V(back, x), lc.eval_V(cert, x))
