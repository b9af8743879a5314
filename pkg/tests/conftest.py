"""Shared oracles and fixtures.

The gradient oracle is a central finite difference evaluated through
the same float32 forward pass as the analytic path; tolerances are set
for single precision. Acceptance tests register one line per criterion
which is echoed in the terminal summary.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np
import pytest

_ACCEPTANCE: dict[int, tuple[str, bool]] = {}


@contextmanager
def criterion(num: int, label: str):
    """Record pass/fail of one acceptance criterion for the summary."""
    try:
        yield
    except BaseException:
        _ACCEPTANCE[num] = (label, False)
        raise
    else:
        _ACCEPTANCE[num] = (label, True)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for num in sorted(_ACCEPTANCE):
        label, ok = _ACCEPTANCE[num]
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"ACCEPTANCE {num:2d} [{status}] {label}")


def fd_gradient(f, x: np.ndarray, eps: float = 1e-3, coords=None) -> np.ndarray:
    """Central-difference gradient of scalar f() w.r.t. entries of x.

    f must read x by reference so in-place perturbations are visible,
    and should reduce to the scalar in float64 (see probe_loss in the
    substrate tests) so the difference is not swamped by float32
    reduction rounding. Returns a float64 array matching x; unvisited
    coordinates are nan when coords is given.
    """
    fill = 0.0 if coords is None else np.nan
    g = np.full(x.shape, fill, dtype=np.float64)
    visit = coords if coords is not None else list(np.ndindex(x.shape))
    for idx in visit:
        idx = tuple(idx)
        orig = x[idx]
        x[idx] = orig + eps
        hi = f()
        x[idx] = orig - eps
        lo = f()
        x[idx] = orig
        g[idx] = (hi - lo) / (2.0 * eps)
    return g


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise error relative to the larger gradient magnitude."""
    mask = np.isfinite(numeric)
    a = np.asarray(analytic, dtype=np.float64)[mask]
    n = np.asarray(numeric, dtype=np.float64)[mask]
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-6)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def sample_coords(shape: tuple[int, ...], count: int, rng: np.random.Generator):
    """A deterministic subset of coordinates to keep FD sweeps fast."""
    total = int(np.prod(shape))
    if total <= count:
        return list(np.ndindex(shape))
    flat = rng.choice(total, size=count, replace=False)
    return [np.unravel_index(i, shape) for i in flat]


@pytest.fixture
def np_rng():
    return np.random.default_rng(0)
