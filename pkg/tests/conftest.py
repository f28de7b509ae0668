import numpy as np
import pytest
import torch
from PIL import Image

from semantix.denoiser import toy_backend
from semantix.schedule import make_plan, make_schedule


@pytest.fixture(scope="session")
def sched():
    return make_schedule(1000)


@pytest.fixture(scope="session")
def backend16():
    return toy_backend(seed=0, latent_shape=(3, 16, 16))


@pytest.fixture(scope="session")
def short_plan(sched):
    return make_plan(sched, 601, 8)


def rand_latent(seed, shape=(1, 3, 16, 16)):
    return torch.from_numpy(np.random.default_rng(seed).standard_normal(shape))


def write_png(path, seed, size=64):
    rng = np.random.default_rng(seed)
    # smooth-ish content so features have structure
    cells = -(-size // 8)
    base = rng.random((cells, cells, 3))
    img = np.kron(base, np.ones((8, 8, 1)))[:size, :size] * 0.8 + 0.2 * rng.random((size, size, 3))
    Image.fromarray((img * 255).astype(np.uint8)).save(path)
    return path


_ACCEPTANCE: dict = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        props = dict(report.user_properties)
        crit = props.get("criterion")
        if crit is not None:
            _ACCEPTANCE[crit] = (report.outcome, props.get("title", ""), props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(_ACCEPTANCE):
        outcome, title, detail = _ACCEPTANCE[crit]
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {crit:2d} {status}: {title}" + (f" ({detail})" if detail else ""))
