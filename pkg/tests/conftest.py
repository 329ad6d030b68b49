import numpy as np
import pytest


def naive_conv2d(x, w, b, stride, padding):
    """Direct nested-loop cross-correlation; the reference for conv2d."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=np.float64)
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0 if b is None else float(b[oi])
                    for ci in range(c):
                        for a in range(kh):
                            for bb in range(kw):
                                acc += xp[ni, ci, y * stride + a, xx * stride + bb] * w[oi, ci, a, bb]
                    out[ni, oi, y, xx] = acc
    return out


def block_mean(mask, th, tw):
    """Loop-based block averaging; the reference for area_resize."""
    n, c, h, w = mask.shape
    bh, bw = h // th, w // tw
    out = np.zeros((n, c, th, tw))
    for i in range(th):
        for j in range(tw):
            out[:, :, i, j] = mask[:, :, i * bh:(i + 1) * bh, j * bw:(j + 1) * bw].sum(axis=(2, 3)) / (bh * bw)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_line():
    """Record a one-line verdict for the acceptance summary."""

    def record(number, passed, text):
        ACCEPTANCE_LINES.append((number, f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {text}"))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES, key=lambda item: item[0]):
            terminalreporter.write_line(line)
