import numpy as np
import pytest

from dvne import autodiff as ad
from dvne.fields import MLPConfig
from dvne.model import ModelConfig, VideoNeRF
from dvne.rendering import RenderConfig

TINY = ModelConfig(human_mlp=MLPConfig(2, 8, (), -1.0), scene_mlp=MLPConfig(2, 8, (), 0.0), human_levels=2,
                   scene_levels=2, deform_levels=2, deform_hidden=8)
TINY_RENDER = RenderConfig(near=0.5, far=6.0, n_scene=4, n_human=3, spacing="linear")

# one verdict line per acceptance criterion, repeated after the run so captured output cannot hide it
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


def tiny_model(seed=0, perturb_deform=True):
    model = VideoNeRF.build(TINY, seed=seed)
    if perturb_deform:
        # the zero-initialised residual has no gradient signal into its first layer
        rng = np.random.default_rng(seed + 100)
        mask = model.params.mask(["deform.l1"])
        model.params.values[mask] = rng.normal(scale=0.3, size=mask.sum())
    return model


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-12))


def check_param_grad(model, scalar_fn, tol=1e-4, step=1e-5):
    """Taped gradient of ``scalar_fn(theta)`` against central differences over all parameters."""
    _, tape = ad.record(scalar_fn, model.params)
    grad = ad.backward(tape)
    model.params.zero_grad()
    fd = ad.finite_difference_gradient(lambda th: scalar_fn(th), model.params.values.copy(), step)
    return grad, fd, rel_err(grad, fd)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**changes):
    """Run config with the tiny model and renderer; ``changes`` are dotted-key overrides."""
    import dataclasses

    from dvne.config import RunConfig, override

    cfg = dataclasses.replace(RunConfig(), model=TINY, render=TINY_RENDER)
    return override(cfg, **changes) if changes else cfg


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    from dvne.synth import SceneSpec, generate

    return generate(SceneSpec(frames=4, width=16, height=16), 3, tmp_path_factory.mktemp("tiny") / "data")
