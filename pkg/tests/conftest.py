import numpy as np
import pytest
import torch


def central_difference(fn, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Numerical gradient of scalar ``fn()`` w.r.t. ``x`` (perturbed in place)."""
    grad = torch.zeros_like(x)
    flat, gflat = x.data.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = float(fn())
        flat[i] = orig - h
        down = float(fn())
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).norm() / max(float(a.norm()), float(b.norm()), 1e-12))


def sliding_window_conv(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Direct same-padding cross-correlation; x [C_in, H, W], w [C_out, C_in, k, k]."""
    c_out, c_in, k, _ = w.shape
    p = k // 2
    h, wid = x.shape[1:]
    xp = np.zeros((c_in, h + 2 * p, wid + 2 * p))
    xp[:, p:p + h, p:p + wid] = x
    out = np.zeros((c_out, h, wid))
    for o in range(c_out):
        for i in range(h):
            for j in range(wid):
                total = 0.0
                for c in range(c_in):
                    for u in range(k):
                        for v in range(k):
                            total += w[o, c, u, v] * xp[c, i + u, j + v]
                out[o, i, j] = total
    return out


@pytest.fixture
def float64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


# Acceptance criteria report one pass/fail line each at the end of the run.
ACCEPTANCE: list[tuple[int, str, str, float]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None and report.when == "call":
        number, title = marker.args
        ACCEPTANCE.append((number, title, "PASS" if report.passed else "FAIL", report.duration))
    return report


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, verdict, seconds in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number} [{verdict}] {title} ({seconds:.1f}s)")
