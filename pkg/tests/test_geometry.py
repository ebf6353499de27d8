import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal

from dvne.geometry import (EncodingConfig, FrustumGaussian, InvalidIntervalError, Ray, contract,
                           contract_gaussian, contract_jacobian, frustum_gaussian, frustum_moments,
                           integrated_positional_encoding, positional_encoding)

finite = st.floats(-50, 50, allow_nan=False)
vec3 = arrays(np.float64, 3, elements=finite)


def random_ray(rng):
    d = rng.normal(size=3)
    return Ray(rng.normal(size=3), d / np.linalg.norm(d), float(rng.uniform(1e-3, 0.05)))


def fd_jacobian(f, x, h=1e-6):
    return np.stack([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(3)], axis=1)


def test_ray_rejects_non_unit_direction():
    with pytest.raises(ValueError):
        Ray(np.zeros(3), np.array([1.0, 1.0, 0.0]), 0.1)


def test_frustum_point_limit():
    ray = Ray(np.zeros(3), np.array([1.0, 0.0, 0.0]), 1e-9)
    g = frustum_gaussian(ray, 1.0, 1.0 + 1e-6)
    assert_allclose(g.mu, [1.0, 0.0, 0.0], atol=1e-6)
    assert np.abs(g.sigma).max() < 1e-12


@pytest.mark.parametrize("t0,t1", [(0.0, 1.0), (2.0, 1.0), (-1.0, 1.0), (1.0, 1.0)])
def test_frustum_rejects_bad_interval(t0, t1):
    ray = Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]), 0.01)
    with pytest.raises(InvalidIntervalError):
        frustum_gaussian(ray, t0, t1)


def test_frustum_symmetric_psd_and_mean_inside_interval(rng):
    for _ in range(1000):
        ray = random_ray(rng)
        t0 = rng.uniform(0.05, 5.0)
        t1 = t0 + rng.uniform(1e-3, 3.0)
        g = frustum_gaussian(ray, t0, t1)
        assert np.abs(g.sigma - g.sigma.T).max() <= 1e-9
        assert np.linalg.eigvalsh(g.sigma).min() >= -1e-9
        s = (g.mu - ray.origin) @ ray.direction
        assert t0 < s < t1
        assert np.linalg.norm(g.mu - ray.origin - s * ray.direction) < 1e-9


def test_frustum_moments_match_monte_carlo(rng):
    # uniform samples in the cone segment: density along t is proportional to t^2
    o, d, r = np.zeros(3), np.array([0.0, 0.0, 1.0]), 0.2
    t0, t1 = 1.0, 2.0
    n = 100_000
    t = np.cbrt(rng.uniform(t0**3, t1**3, size=n))
    rho = r * t * np.sqrt(rng.uniform(size=n))
    phi = rng.uniform(0, 2 * np.pi, size=n)
    pts = np.stack([rho * np.cos(phi), rho * np.sin(phi), t], -1)
    mu, sigma = frustum_moments(o, d, np.asarray(r), np.array([t0]), np.array([t1]))
    assert_allclose(mu[0], pts.mean(0), atol=5e-3)
    mc = np.cov(pts.T)
    assert_allclose(np.diag(sigma[0]), np.diag(mc), rtol=5e-2)


def test_contract_examples():
    assert_array_equal(contract(np.array([0.5, 0.0, 0.0])), [0.5, 0.0, 0.0])
    assert_allclose(contract(np.array([2.0, 0.0, 0.0])), [1.5, 0.0, 0.0], atol=0)
    assert_array_equal(contract(np.zeros(3)), np.zeros(3))


@given(vec3)
def test_contract_bounded_and_identity_inside(x):
    y = contract(x)
    assert np.linalg.norm(y) < 2.0
    if np.linalg.norm(x) <= 1.0:
        assert_array_equal(y, x)


@given(arrays(np.float64, 3, elements=st.floats(-1, 1, allow_nan=False)).filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_contract_continuous_across_unit_sphere(v):
    u = v / np.linalg.norm(v)
    inner, outer = contract(u * (1 - 1e-9)), contract(u * (1 + 1e-9))
    assert np.linalg.norm(inner - outer) <= 1e-7


def test_contract_jacobian_identity_inside():
    assert_array_equal(contract_jacobian(np.array([0.3, 0.1, 0.0])), np.eye(3))


def test_contract_jacobian_axis_entry():
    J = contract_jacobian(np.array([2.0, 0.0, 0.0]))
    assert J[0, 0] == pytest.approx(0.25, abs=1e-15)
    # perpendicular stretch of the radial map is (2 - 1/r)/r
    assert J[1, 1] == pytest.approx(0.75, abs=1e-15)


def test_contract_jacobian_matches_finite_differences(rng):
    worst = 0.0
    for _ in range(200):
        x = rng.normal(size=3)
        x *= rng.uniform(0.05, 30) / np.linalg.norm(x)
        if abs(np.linalg.norm(x) - 1.0) < 1e-4:
            continue
        fd = fd_jacobian(contract, x)
        worst = max(worst, np.abs(fd - contract_jacobian(x)).max() / np.abs(fd).max())
    assert worst < 1e-5


def test_contract_jacobian_norm_three(rng):
    for _ in range(20):
        x = rng.normal(size=3)
        x *= 3.0 / np.linalg.norm(x)
        fd = fd_jacobian(contract, x)
        assert np.abs(fd - contract_jacobian(x)).max() / np.abs(fd).max() < 1e-5


def test_contract_gaussian_inside_and_zero_cov(rng):
    mu = np.array([0.2, -0.3, 0.1])
    A = rng.normal(size=(3, 3))
    g = FrustumGaussian(mu, A @ A.T)
    out = contract_gaussian(g)
    assert_array_equal(out.mu, mu)
    assert_allclose(out.sigma, g.sigma, atol=1e-15)
    far = contract_gaussian(FrustumGaussian(np.array([3.0, 1.0, -2.0]), np.zeros((3, 3))))
    assert_array_equal(far.sigma, np.zeros((3, 3)))


def test_contract_gaussian_symmetric_psd(rng):
    for _ in range(500):
        ray = random_ray(rng)
        t0 = rng.uniform(0.1, 20)
        g = contract_gaussian(frustum_gaussian(ray, t0, t0 + rng.uniform(0.01, 5)))
        assert np.abs(g.sigma - g.sigma.T).max() <= 1e-9
        assert np.linalg.eigvalsh(g.sigma).min() >= -1e-9


def test_positional_encoding_at_zero():
    pe = positional_encoding(np.zeros(3), EncodingConfig(2, "plain"))
    # per level: three sines then three cosines
    assert_array_equal(pe, [0, 0, 0, 1, 1, 1, 0, 0, 0, 1, 1, 1])


@pytest.mark.parametrize("levels", range(1, 9))
def test_encoding_lengths(levels, rng):
    x = rng.normal(size=(5, 3))
    assert positional_encoding(x, EncodingConfig(levels, "plain")).shape == (5, 6 * levels)
    g = FrustumGaussian(x, np.zeros((5, 3, 3)))
    assert integrated_positional_encoding(g, EncodingConfig(levels, "integrated")).shape == (5, 6 * levels)


def test_ipe_zero_covariance_is_plain_encoding(rng):
    mu = rng.normal(size=(1000, 3)) * 5
    ipe = integrated_positional_encoding(FrustumGaussian(mu, np.zeros((1000, 3, 3))), EncodingConfig(8, "integrated"))
    assert np.abs(ipe - positional_encoding(mu, EncodingConfig(8, "plain"))).max() <= 1e-12


def test_ipe_vanishes_for_huge_variance(rng):
    g = FrustumGaussian(rng.normal(size=(10, 3)), np.broadcast_to(np.eye(3) * 1e4, (10, 3, 3)))
    assert np.abs(integrated_positional_encoding(g, EncodingConfig(4, "integrated"))).max() < 1e-12


def test_ipe_matches_monte_carlo(rng):
    # E[sin(a x)] for x ~ N(m, v) is sin(a m) exp(-a^2 v / 2)
    mu = np.array([0.3, -0.7, 1.1])
    var = np.array([0.02, 0.05, 0.01])
    x = mu + rng.normal(size=(200_000, 3)) * np.sqrt(var)
    mc = positional_encoding(x, EncodingConfig(3, "plain")).mean(0)
    ipe = integrated_positional_encoding(FrustumGaussian(mu, np.diag(var)), EncodingConfig(3, "integrated"))
    assert_allclose(ipe, mc, atol=5e-3)


@settings(max_examples=50)
@given(arrays(np.float64, 3, elements=st.floats(-3, 3)), st.integers(0, 2),
       st.lists(st.floats(0, 2), min_size=2, max_size=2, unique=True))
def test_ipe_magnitude_non_increasing_in_variance(mu, axis, variances):
    lo, hi = sorted(variances)
    cfg = EncodingConfig(4, "integrated")
    cov_lo, cov_hi = np.eye(3) * 0.1, np.eye(3) * 0.1
    cov_lo[axis, axis], cov_hi[axis, axis] = lo, hi
    a = np.abs(integrated_positional_encoding(FrustumGaussian(mu, cov_lo), cfg))
    b = np.abs(integrated_positional_encoding(FrustumGaussian(mu, cov_hi), cfg))
    assert np.all(b <= a + 1e-15)


def test_encoding_kind_mismatch():
    with pytest.raises(ValueError):
        positional_encoding(np.zeros(3), EncodingConfig(2, "integrated"))
    with pytest.raises(ValueError):
        EncodingConfig(0)
