import numpy as np
import pytest

from avatarfit import fixture
from avatarfit.pipeline import PipelineConfig, run_pipeline

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def fx0():
    return fixture.generate(0)


@pytest.fixture(scope="session")
def bundle(tmp_path_factory):
    path = tmp_path_factory.mktemp("bundle")
    fixture.make_fixture(0, path)
    return path


@pytest.fixture(scope="session")
def pipeline_run(bundle):
    """One full pipeline run on the seed-0 bundle: (output dir, result, wall seconds)."""
    import time

    t0 = time.perf_counter()
    result = run_pipeline(PipelineConfig.load(bundle / "config.json"), bundle / "run_a")
    return bundle / "run_a", result, time.perf_counter() - t0


@pytest.fixture(scope="session")
def texture_fit0(fx0):
    """Default fit_texture run on the seed-0 portrait with the ground-truth geometry.

    Returns ``(buffer, texture, report, seconds)``.
    """
    import time

    from avatarfit.raster import rasterize
    from avatarfit.texfit import TexFitConfig, fit_texture

    t0 = time.perf_counter()
    texture, report = fit_texture(fx0.gt_mesh, fx0.gt_pose, fx0.intrinsics, fx0.portrait, TexFitConfig())
    seconds = time.perf_counter() - t0
    height, width = fx0.portrait.shape[:2]
    return rasterize(fx0.gt_mesh, fx0.gt_pose, fx0.intrinsics, width, height), texture, report, seconds
