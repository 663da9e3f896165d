import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tie_free_pair(dims, rng, jitter=0.2):
    """Two volumes whose voxel values are pairwise separated by >= 0.6/(2N).

    Values of the first volume sit on even slots of a 1/(2N) lattice, the
    second on odd slots, each jittered by at most ``jitter`` slots and
    randomly permuted over voxels.
    """
    n_vox = int(np.prod(dims))
    h = 1.0 / (2 * n_vox)
    slots = np.arange(n_vox)
    a = (2 * rng.permutation(slots) + rng.uniform(-jitter, jitter, n_vox)) * h
    b = (2 * rng.permutation(slots) + 1 + rng.uniform(-jitter, jitter, n_vox)) * h
    return a.reshape(dims), b.reshape(dims)


def central_differences(f, x, step=1e-4):
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.empty(flat.size)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        hi = f(x)
        flat[i] = keep - step
        lo = f(x)
        flat[i] = keep
        out[i] = (hi - lo) / (2 * step)
    return out.reshape(x.shape)


def rel_err(g, ref):
    g, ref = np.asarray(g), np.asarray(ref)
    scale = np.max(np.abs(ref))
    if scale == 0:
        return float(np.max(np.abs(g)))
    return float(np.max(np.abs(g - ref)) / scale)


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line; the run summary lists them in order."""

    def record(number, title, passed, detail=""):
        line = f"criterion {number} {title}: {'PASS' if passed else 'FAIL'}" + (f" ({detail})" if detail else "")
        _CRITERIA[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
