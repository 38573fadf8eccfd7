import numpy as np
import pytest
import torch

from forgeloc.histories import CameraImageSet
from forgeloc.synth import camera_roster, render_pristine

torch.set_num_threads(1)


def finite_diff_grad(f, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Central finite differences of scalar ``f`` w.r.t. every entry of ``x`` (float64)."""
    x = x.detach().clone()
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        with torch.no_grad():
            fp = float(f(x))
        flat[i] = old - h
        with torch.no_grad():
            fm = float(f(x))
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def autograd_grad(f, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    f(x).backward()
    return x.grad


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).norm() / max(float(b.norm()), 1e-300))


@pytest.fixture(scope="session")
def toy_cameras() -> CameraImageSet:
    """5 synthetic cameras × 5 pristine 128×128 images."""
    cams = camera_roster(5)
    items = [(c.camera_id, c.camera_id * 100 + k, render_pristine(c, 1000 + 7 * k + c.camera_id))
             for c in cams for k in range(5)]
    return CameraImageSet.from_arrays(items)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
