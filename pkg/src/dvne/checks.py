"""Fast invariant suites run by ``dvne check``.

Each check returns ``(name, passed, detail)``; none takes more than a second
or two, so the whole suite is usable as a post-install smoke test.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .config import RunConfig, dumps_config, loads_config
from .deformation import coarse_deform, pose_from_rotations, toy_rig
from .fields import MLPConfig
from .geometry import EncodingConfig, FrustumGaussian, contract, contract_jacobian, integrated_positional_encoding, \
    positional_encoding
from .guidance import GaussianPrior, NoiseSchedule, TextConditioning, sds_image_gradient
from .model import ModelConfig, VideoNeRF
from .rendering import RenderConfig, composite_arrays, look_at, render_image, render_image_deferred


def _contract(rng):
    x = rng.normal(size=(2000, 3)) * rng.uniform(0.01, 20, size=(2000, 1))
    y = contract(x)
    inside = np.linalg.norm(x, axis=-1) <= 1
    ok = np.allclose(y[inside], x[inside], atol=0) and np.all(np.linalg.norm(y, axis=-1) < 2)
    p = rng.normal(size=3) * 3
    h = 1e-6
    fd = np.stack([(contract(p + h * e) - contract(p - h * e)) / (2 * h) for e in np.eye(3)], axis=1)
    rel = np.abs(fd - contract_jacobian(p)).max() / np.abs(fd).max()
    return "contraction", bool(ok and rel < 1e-5), f"jacobian rel err {rel:.2e}"


def _ipe(rng):
    cfg = EncodingConfig(6, "integrated")
    mu = rng.normal(size=(50, 3))
    ipe = integrated_positional_encoding(FrustumGaussian(mu, np.zeros((50, 3, 3))), cfg)
    err = np.abs(ipe - positional_encoding(mu, EncodingConfig(6, "plain"))).max()
    return "ipe-zero-covariance", bool(err <= 1e-12), f"max err {err:.1e}"


def _volume(rng):
    n, s = 64, 16
    t = np.sort(rng.uniform(0.1, 5, size=(n, s)), axis=-1)
    sigma = rng.exponential(2.0, size=(n, s))
    delta = rng.uniform(0.01, 0.5, size=(n, s))
    out = composite_arrays(t, sigma, rng.uniform(size=(n, s, 3)), delta, np.zeros((n, s), bool))
    mono = np.all(np.diff(out.transmittance, axis=-1) <= 0)
    return "volume-rendering", bool(mono and np.all(out.acc <= 1 + 1e-12)), f"max acc {out.acc.max():.6f}"


def _deformation(rng):
    rig = toy_rig()
    model = VideoNeRF.build(_tiny_model(), seed=0)
    x = rng.uniform(-0.6, 0.6, size=(200, 3))
    err_rest = np.abs(coarse_deform(x, rig.rest_pose(), model.deformation) - x).max()
    pose = pose_from_rotations(rig, rng.normal(scale=0.3, size=(4, 3)))
    w = model.deformation.skinning_weights(x, pose)
    err_w = np.abs(w.sum(-1) - 1).max()
    ok = err_rest <= 1e-9 and err_w <= 1e-6
    return "deformation", bool(ok), f"rest identity {err_rest:.1e}, weight sum {err_w:.1e}"


def _sds(rng):
    schedule = NoiseSchedule()
    image = rng.uniform(size=(4, 4, 3))
    prior = GaussianPrior(image, schedule)
    grad, _ = sds_image_gradient(image, prior, TextConditioning("x"), schedule, 1.0, rng)
    err = np.abs(grad).max()
    return "sds-perfect-denoiser", bool(err <= 1e-12), f"max grad {err:.1e}"


def _tiny_model():
    return ModelConfig(human_mlp=MLPConfig(2, 16, (), -2.0), scene_mlp=MLPConfig(2, 16, (), 0.0), human_levels=2,
                       scene_levels=2, deform_levels=2, deform_hidden=8)


def _deferred(rng):
    model = VideoNeRF.build(_tiny_model(), seed=1)
    cam = look_at((0.0, 0.2, 2.5), (0.0, 0.0, 0.0), 4, 4)
    cfg = RenderConfig(near=0.5, far=6.0, n_scene=8, n_human=6, spacing="linear")
    pose = model.deformation.rest
    seed = rng.normal(size=(4, 4, 3))
    _, tape = ad.record(lambda th: render_image(cam, model, pose, th, cfg)["color"], model.params)
    mono = ad.backward(tape, seed)
    chunked = render_image_deferred(cam, model, pose, 5, seed, cfg)
    err = np.abs(mono - chunked).max()
    return "deferred-backprop", bool(err <= 1e-10), f"max diff {err:.1e}"


def _config(rng):
    cfg = RunConfig()
    ok = loads_config(dumps_config(cfg)) == cfg and loads_config("") == cfg
    return "config-round-trip", bool(ok), ""


SUITES = (_contract, _ipe, _volume, _deformation, _sds, _deferred, _config)


def run_checks(seed=0):
    rng = np.random.default_rng(seed)
    return [check(rng) for check in SUITES]
