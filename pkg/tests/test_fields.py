import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_array_equal

from dvne.fields import query_background, query_background_moments, query_canonical
from dvne.geometry import EncodingConfig, FrustumGaussian, positional_encoding

from .conftest import check_param_grad, tiny_model

MODEL = tiny_model(3)


def test_density_zero_outside_box():
    _, d = query_canonical(MODEL.human, np.array([[10.0, 10.0, 10.0], [-5.0, 0.0, 0.0]]))
    assert_array_equal(d, 0.0)


def test_queries_deterministic(rng):
    x = rng.uniform(-0.5, 0.5, size=(20, 3))
    a = query_canonical(MODEL.human, x)
    b = query_canonical(MODEL.human, x)
    assert_array_equal(a[0], b[0])
    assert_array_equal(a[1], b[1])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (6, 3), elements=st.floats(-5, 5)),
       arrays(np.float64, (6, 3), elements=st.floats(0, 3)))
def test_outputs_bounded(mu, var):
    for color, density in (query_canonical(MODEL.human, mu), query_background_moments(MODEL.scene, mu, var)):
        assert np.all(density >= 0)
        assert np.all((color >= 0) & (color <= 1))


def test_zero_density_layer_gives_constant_density(rng):
    model = tiny_model(4)
    model.params["scene.density.w"] = 0.0
    model.params["scene.density.b"] = 0.0
    _, d = query_background_moments(model.scene, rng.normal(size=(30, 3)), rng.uniform(size=(30, 3)))
    assert_array_equal(d, np.log(2.0))


def test_zero_covariance_matches_plain_encoding(rng):
    mu = rng.normal(size=(25, 3))
    c, d = query_background(MODEL.scene, FrustumGaussian(mu, np.zeros((25, 3, 3))))
    levels = MODEL.scene.encoding.num_levels
    feats = positional_encoding(mu, EncodingConfig(levels, "plain"))
    c2, d2 = MODEL.scene.mlp(MODEL.params, MODEL.params.values, feats)
    assert np.abs(c - c2).max() <= 1e-12
    assert np.abs(d - d2).max() <= 1e-12


def test_human_density_gradient(rng):
    model = tiny_model(5)
    x = rng.uniform(-0.2, 0.2, size=(3, 3))
    _, _, err = check_param_grad(model, lambda th: query_canonical(model.human, x, th)[1].sum())
    assert err < 1e-4


def test_background_gradient(rng):
    model = tiny_model(6)
    mu, var = rng.normal(size=(3, 3)), rng.uniform(0, 0.1, size=(3, 3))

    def f(th):
        c, d = query_background_moments(model.scene, mu, var, th)
        return c.sum() + d.sum()

    _, _, err = check_param_grad(model, f)
    assert err < 1e-4
