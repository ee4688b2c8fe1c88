import numpy as np
import pytest
import torch

from triplift.geometry import CameraIntrinsics


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def march_box(o, d, lo, hi, n=10_000, t_max=None):
    """Dense ray-march occupancy oracle: first and last inside sample along the ray."""
    o, d = np.asarray(o, float), np.asarray(d, float)
    if t_max is None:
        t_max = np.linalg.norm(o) + 2 * np.linalg.norm(np.asarray(hi) - np.asarray(lo)) + 1
    t = np.linspace(0.0, t_max, n)
    p = o + t[:, None] * d
    inside = np.all((p >= lo) & (p <= hi), axis=1)
    if not inside.any():
        return None, t[1] - t[0]
    idx = np.flatnonzero(inside)
    return (t[idx[0]], t[idx[-1]]), t[1] - t[0]


@pytest.fixture
def cam64():
    return CameraIntrinsics(108.8, 108.8, 32.0, 32.0, 64, 64)


class StubField:
    """Analytic density/colour in field coordinates, duck-typed like a generator."""

    dtype = torch.float64

    def __init__(self, sigma_fn, rgb=(0.2, 0.6, 0.9)):
        self.sigma_fn = sigma_fn
        self.rgb = torch.tensor(rgb, dtype=torch.float64)

    def query(self, planes, x, w, check=True):
        sigma = self.sigma_fn(x)
        return sigma, self.rgb.expand(x.shape[:-1] + (3,)), None


class StubModel:
    """Stands in for a lifted model: latent[0:3] is the colour of a solid density-50 ellipsoid."""

    def __init__(self, n=2):
        self.latents = torch.tensor(np.random.default_rng(0).random((n, 3)))
        self.object_ids = [f"o{i}" for i in range(n)]

    def field_for(self, z):
        from triplift.generator import TriPlaneField

        z = np.asarray(z, dtype=float)
        fld = StubField(lambda x: 50.0 * (x.norm(dim=-1) < 0.95).to(x.dtype), tuple(z[:3]))
        return TriPlaneField(torch.zeros(1, 3, 1, 2, 2, dtype=torch.float64), fld), torch.zeros(1, 1, 1)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion covered by the test")


_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    n, text = mark.args
    ok = rep.passed if rep.when == "call" else False
    prev = _CRITERIA.get(n, (True, text))[0]
    _CRITERIA[n] = (prev and ok, text)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, text = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}  {'PASS' if ok else 'FAIL'}  {text}")
