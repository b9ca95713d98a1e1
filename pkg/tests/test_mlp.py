"""Network height parameterization: positivity, derivatives, checkpoints."""

import numpy as np
import pytest

from reflopt import ad
from reflopt.ad import Dual2, Tape
from reflopt.mlp import (DEFAULT_SIZES, EPS_HEIGHT, MlpError, MlpParams,
                         load_params, mlp_height, mlp_height_traced, mlp_init,
                         n_params, save_params)


def test_param_count_default():
    # 1*24+24 + 24*24+24 + 24*1+1 = 673
    assert n_params(DEFAULT_SIZES) == 673


def test_init_deterministic_and_bounded():
    a = mlp_init(seed=7)
    b = mlp_init(seed=7)
    c = mlp_init(seed=8)
    assert np.array_equal(a.theta, b.theta)
    assert not np.array_equal(a.theta, c.theta)
    bound = np.sqrt(6.0 / (1 + 24))
    assert np.max(np.abs(a.theta[:24])) <= bound


def test_height_positive_for_arbitrary_params(domain):
    rng = np.random.default_rng(0)
    for _ in range(10):
        params = MlpParams(DEFAULT_SIZES, rng.normal(0, 3, 673))
        u, _ = mlp_height(params, np.linspace(-1, 1, 101), domain=domain)
        assert np.all(u > EPS_HEIGHT * 0.5)


def test_height_derivative_matches_fd(domain):
    params = mlp_init(seed=3)
    p = np.linspace(-0.9, 0.9, 21)
    h = 1e-6
    _, du = mlp_height(params, p, domain=domain)
    up, _ = mlp_height(params, p + h, domain=domain)
    um, _ = mlp_height(params, p - h, domain=domain)
    assert np.allclose(du, (up - um) / (2 * h), atol=1e-7)


def test_traced_path_matches_numpy_path(domain):
    params = mlp_init(seed=1)
    p = 0.42
    u_np, du_np = mlp_height(params, p, domain=domain)
    tape = Tape()
    theta = [tape.var(float(v)) for v in params.theta]
    u_tr, du_tr = mlp_height_traced(theta, params.sizes, p, domain=domain)
    assert float(ad.value_of(u_tr)) == pytest.approx(u_np, rel=1e-12)
    assert float(ad.value_of(du_tr)) == pytest.approx(du_np, rel=1e-12)


def test_traced_gradient_matches_fd(domain):
    params = mlp_init(seed=2)

    def objective(theta_np):
        tape = Tape()
        theta = [tape.var(float(v)) for v in theta_np]
        u, _ = mlp_height_traced(theta, params.sizes, 0.3, domain=domain)
        gs = ad.gradient_of(u, theta)
        return float(ad.value_of(u)), np.array([float(g) for g in gs])

    _, g = objective(params.theta)
    rng = np.random.default_rng(0)
    for k in rng.integers(0, 673, 8):
        e = np.zeros(673)
        e[k] = 1e-6
        fp, _ = objective(params.theta + e)
        fm, _ = objective(params.theta - e)
        fd = (fp - fm) / 2e-6
        assert g[k] == pytest.approx(fd, rel=1e-4, abs=1e-9)


def test_dual_input_carries_second_derivative(domain):
    # du/dp produced under a dual input must carry d2u/dp2 in its tangent
    params = mlp_init(seed=5)
    tape = Tape()
    theta = [tape.var(float(v)) for v in params.theta]
    p0 = 0.1
    _, du = mlp_height_traced(theta, params.sizes, Dual2(p0, 1.0, 0.0),
                              domain=domain)
    d2u = float(ad.value_of(du.dp))
    h = 1e-5
    _, dup = mlp_height(params, p0 + h, domain=domain)
    _, dum = mlp_height(params, p0 - h, domain=domain)
    assert d2u == pytest.approx((dup - dum) / (2 * h), rel=1e-4, abs=1e-8)


def test_params_validation():
    with pytest.raises(MlpError):
        MlpParams(DEFAULT_SIZES, np.zeros(10))
    bad = np.zeros(673)
    bad[0] = np.nan
    with pytest.raises(MlpError):
        MlpParams(DEFAULT_SIZES, bad)


def test_checkpoint_roundtrip_bitexact(tmp_path):
    params = mlp_init(seed=11)
    path = tmp_path / "ckpt.txt"
    save_params(params, path)
    loaded = load_params(path)
    assert loaded.sizes == params.sizes
    assert np.array_equal(loaded.theta, params.theta)
    assert loaded.seed == 11
