import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy import integrate, stats

from dvne import autodiff as ad
from dvne.guidance import (AvgPoolCodec, GaussianPrior, ImageCameraConditioning, NoiseLevelError, NoiseSchedule,
                           PriorError, RecordingPrior, SdsContext, TextConditioning, ViewColorPrior, add_noise,
                           relative_camera, sample_noise_level, sds_image_gradient, sds_step_2d, sds_step_3d,
                           view_label)
from dvne.params import Params
from dvne.rendering import look_at

SCHEDULE = NoiseSchedule()


def image_params(image):
    p = Params([("image", np.shape(image))])
    p["image"] = image
    return p


def taped_context(params, prior, scale=1.0, seed=0, schedule=SCHEDULE):
    image, tape = ad.record(lambda th: params.view(th, "image"), params)
    return SdsContext(image, tape, prior, schedule, scale, np.random.default_rng(seed))


def rotation_y(deg):
    a = np.radians(deg)
    return np.array([[np.cos(a), 0, np.sin(a)], [0, 1, 0], [-np.sin(a), 0, np.cos(a)]])


def test_schedule_shape():
    t = np.linspace(SCHEDULE.t_min, SCHEDULE.t_max, 500)
    abar = SCHEDULE.alpha_bar(t)
    assert np.all(np.diff(abar) < 0)
    assert np.all(SCHEDULE.weight(t) > 0)


def test_add_noise_examples(rng):
    z = rng.uniform(size=(4, 4, 3))
    assert_allclose(add_noise(z, SCHEDULE.t_min, rng.normal(size=z.shape), SCHEDULE), z, atol=0.15)
    assert_array_equal(add_noise(z, 0.5, np.zeros_like(z), SCHEDULE), np.sqrt(SCHEDULE.alpha_bar(0.5)) * z)
    with pytest.raises(NoiseLevelError):
        add_noise(z, 0.999, np.zeros_like(z), SCHEDULE)


def test_add_noise_variance_monte_carlo(rng):
    latent = rng.normal(0.3, 0.7, size=64)
    t = 0.6
    abar = SCHEDULE.alpha_bar(t)
    draws = np.stack([add_noise(latent, t, rng.normal(size=64), SCHEDULE) for _ in range(10_000)])
    expected = abar * latent.var() + (1 - abar)
    assert abs(draws.var() - expected) / expected < 5e-2


def test_perfect_denoiser_both_paths(rng):
    image = rng.uniform(size=(4, 4, 3))
    prior = GaussianPrior(image)
    p = image_params(image)
    g2 = sds_step_2d(taped_context(p, prior), TextConditioning("a person"))
    g3 = sds_step_3d(taped_context(p, prior, seed=1), image, np.eye(3), np.zeros(3))
    assert np.abs(g2).max() <= 1e-12
    assert np.abs(g3).max() <= 1e-12


def test_gradient_linear_in_scale(rng):
    image = rng.uniform(size=(2, 2, 3))
    prior = GaussianPrior(np.full((2, 2, 3), 0.3))
    p = image_params(image)
    g1 = sds_step_2d(taped_context(p, prior, scale=1.0, seed=5), TextConditioning("x"))
    g2 = sds_step_2d(taped_context(p, prior, scale=2.0, seed=5), TextConditioning("x"))
    assert_array_equal(g2, 2 * g1)


def test_gradient_linear_in_weight(rng):
    image = rng.uniform(size=(2, 2, 3))
    prior = GaussianPrior(np.zeros((2, 2, 3)))
    g, draw = sds_image_gradient(image, prior, TextConditioning("x"), SCHEDULE, 1.0, np.random.default_rng(3))
    t = draw["t"]
    assert_allclose(g, SCHEDULE.weight(t) * (prior.predict_noise(add_noise(image, t, draw["eps"], SCHEDULE), t, None)
                                              - draw["eps"]), rtol=1e-12)


def test_prior_not_mutated(rng):
    mean = rng.uniform(size=(2, 2, 3))
    prior = GaussianPrior(mean.copy())
    for seed in range(5):
        sds_image_gradient(rng.uniform(size=(2, 2, 3)), prior, TextConditioning("x"), SCHEDULE, 1.0,
                           np.random.default_rng(seed))
    assert_array_equal(prior.mean, mean)


def test_gaussian_prior_one_pixel_descent():
    # the gradient is s * sqrt(abar (1 - abar)) * (I - m) <= s/2 * (I - m): monotone for lr < 4 / s
    scale, lr = 1.0, 0.5
    m = np.array([[[0.8, 0.1, 0.5]]])
    prior = GaussianPrior(m)
    p = image_params(np.array([[[0.1, 0.9, 0.2]]]))
    rng = np.random.default_rng(0)
    dist = [np.abs(p.values - m.ravel()).max()]
    for _ in range(100):
        ctx = SdsContext(*ad.record(lambda th: p.view(th, "image"), p), prior, SCHEDULE, scale, rng)
        g = sds_step_2d(ctx, TextConditioning("x"))
        p.zero_grad()
        p.values -= lr * g
        dist.append(np.abs(p.values - m.ravel()).max())
    assert np.all(np.diff(dist) < 0)
    assert 0 < dist[-1] < 1e-3


def test_two_view_fixed_point():
    # summing both views' gradients is stationary where the weighted residuals cancel: the midpoint
    front, back = np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0])
    schedule = NoiseSchedule(0.5, 0.5)
    prior = ViewColorPrior({"front": front, "back": back}, schedule)
    ref = np.zeros((1, 1, 3))
    p = image_params(np.array([[[0.2, 0.7, 0.4]]]))
    rng = np.random.default_rng(0)
    for _ in range(300):
        total = np.zeros(3)
        for az in (0.0, 180.0):
            ctx = SdsContext(*ad.record(lambda th: p.view(th, "image"), p), prior, schedule, 1.0, rng)
            total += sds_step_3d(ctx, ref, rotation_y(az), np.zeros(3))
        p.zero_grad()
        p.values -= 0.5 * total
    assert_allclose(p.values, 0.5 * (front + back), atol=1e-9)


def test_expected_gradient_monte_carlo(rng):
    image, mean = rng.uniform(size=(2, 2, 3)), rng.uniform(size=(2, 2, 3))
    prior = GaussianPrior(mean)
    grads = np.stack([sds_image_gradient(image, prior, TextConditioning("x"), SCHEDULE, 1.0,
                                         np.random.default_rng(seed))[0] for seed in range(1000)])
    factor, _ = integrate.quad(lambda t: np.sqrt(SCHEDULE.alpha_bar(t) * (1 - SCHEDULE.alpha_bar(t))),
                               SCHEDULE.t_min, SCHEDULE.t_max)
    analytic = factor / (SCHEDULE.t_max - SCHEDULE.t_min) * (image - mean)
    se = grads.std(0, ddof=1) / np.sqrt(len(grads))
    assert np.all(np.abs(grads.mean(0) - analytic) <= 3 * se + 1e-15)


def test_noise_level_sampling():
    assert sample_noise_level(NoiseSchedule(0.3, 0.3), np.random.default_rng(0)) == 0.3
    rng = np.random.default_rng(11)
    t = np.array([sample_noise_level(SCHEDULE, rng) for _ in range(10_000)])
    assert np.all((t >= SCHEDULE.t_min) & (t <= SCHEDULE.t_max))
    ks = stats.kstest(t, stats.uniform(SCHEDULE.t_min, SCHEDULE.t_max - SCHEDULE.t_min).cdf)
    assert ks.pvalue > 0.01


def test_codec_jacobian_switch(rng):
    image = rng.uniform(size=(8, 8, 3))
    prior = GaussianPrior(np.zeros((8, 8, 3)), codec=AvgPoolCodec(4))
    exact, d1 = sds_image_gradient(image, prior, TextConditioning("x"), SCHEDULE, 1.0, np.random.default_rng(2))
    skip, d2 = sds_image_gradient(image, prior, TextConditioning("x"), SCHEDULE, 1.0, np.random.default_rng(2),
                                  skip_codec_jacobian=True)
    assert d1["residual"].shape == (2, 2, 3)
    assert_allclose(skip, 16 * exact, rtol=1e-12)


def test_prior_failures_carry_context(rng):
    class Broken:
        label, codec = "broken", AvgPoolCodec(1)

        def predict_noise(self, z_t, t, cond):
            raise RuntimeError("boom")

    class WrongShape(Broken):
        def predict_noise(self, z_t, t, cond):
            return np.zeros(3)

    for prior in (Broken(), WrongShape()):
        with pytest.raises(PriorError):
            sds_image_gradient(rng.uniform(size=(2, 2, 3)), prior, TextConditioning("x"), SCHEDULE, 1.0, rng)


def test_recording_prior_logs_calls(rng):
    prior = RecordingPrior(GaussianPrior(np.zeros((2, 2, 3))), "2d")
    sds_image_gradient(rng.uniform(size=(2, 2, 3)), prior, TextConditioning("x"), SCHEDULE, 1.0, rng)
    assert len(prior.calls) == 1 and prior.calls[0][0] == "2d"


@pytest.mark.parametrize("az,label", [(0, "front"), (59, "front"), (-59, "front"), (60, "side"), (-90, "side"),
                                      (120, "side"), (121, "back"), (180, "back"), (300, "side"), (350, "front")])
def test_view_labels(az, label):
    assert view_label(az) == label


def test_relative_camera_azimuth():
    ref = look_at((0.0, 0.0, 3.0), (0.0, 0.0, 0.0), 4, 4)
    for az in (0.0, 45.0, 90.0, 180.0, -135.0):
        a = np.radians(az)
        cam = look_at((3 * np.sin(a), 0.0, 3 * np.cos(a)), (0.0, 0.0, 0.0), 4, 4)
        R, T = relative_camera(ref, cam)
        cond = ImageCameraConditioning(np.zeros((4, 4, 3)), R, T)
        assert abs(abs(cond.azimuth_deg) - abs(az)) < 1e-9
