import math

import numpy as np
import pytest


def central_diff(f, x, step=1e-5, index=None):
    """Central differences of scalar ``f()`` w.r.t. ``x``, perturbing ``x`` in place."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size) if index is None else index:
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def rel_err(a, b):
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    return 0.0 if scale == 0 else float(np.abs(a - b).max() / scale)


def conv_oracle(x, w, bias):
    """Direct summation of the zero-padded correlation, one output at a time."""
    b, c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = (k - 1) // 2
    y = np.zeros((b, o, h, wd))
    for bi in range(b):
        for oi in range(o):
            for m in range(h):
                for n in range(wd):
                    acc = bias[oi]
                    for ci in range(c):
                        for r in range(k):
                            for t in range(k):
                                i, j = m + r - p, n + t - p
                                if 0 <= i < h and 0 <= j < wd:
                                    acc += w[oi, ci, r, t] * x[bi, ci, i, j]
                    y[bi, oi, m, n] = acc
    return y


def bilinear_oracle(img, alpha, beta):
    """Sample a 2-D map at (m + alpha, n + beta) by the textbook bilinear formula."""
    h, w = img.shape
    out = np.zeros_like(img)

    def px(i, j):
        return img[i, j] if 0 <= i < h and 0 <= j < w else 0.0

    for m in range(h):
        for n in range(w):
            y, x = m + alpha, n + beta
            i0, j0 = math.floor(y), math.floor(x)
            fy, fx = y - i0, x - j0
            out[m, n] = (
                (1 - fy) * (1 - fx) * px(i0, j0)
                + (1 - fy) * fx * px(i0, j0 + 1)
                + fy * (1 - fx) * px(i0 + 1, j0)
                + fy * fx * px(i0 + 1, j0 + 1)
            )
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# acceptance summary: one line per criterion at the end of the run
# ---------------------------------------------------------------------------

_CRITERIA: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not marker.args:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        status = "PASS" if report.outcome == "passed" else "FAIL"
        title = marker.kwargs.get("title", item.name)
        _CRITERIA[marker.args[0]] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, title, detail = _CRITERIA[n]
        line = f"criterion {n} {status}: {title}"
        terminalreporter.write_line(f"{line} [{detail}]" if detail else line)
