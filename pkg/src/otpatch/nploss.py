"""Noise-preserving patch-wise optimal-transport content loss.

The loss compares two residual volumes patch by patch: both are tiled into
non-overlapping ``n^3`` patches (periodic wrap, shifted by an offset) and
the Wasserstein distance between the two empirical value distributions of
each patch pair is summed. Voxel positions inside a patch do not matter,
only the distribution of values does, which is what lets a fit keep noise
texture that a voxel-wise loss would average away.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .core import PatchGrid, as_array, extract_patches, make_patch_grid, offset_set
from .ot import SolverConfig, solve_batch

OFFSET_MODES = ("single_random", "full_expectation")


@dataclass(frozen=True)
class NPLossConfig:
    n: int = 4
    solver: SolverConfig = field(default_factory=SolverConfig)
    p: int = 1
    offset_mode: str = "single_random"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n < 2:
            raise ValueError(f"patch size n must be >= 2, got {self.n}")
        if self.p not in (1, 2):
            raise ValueError(f"p must be 1 or 2, got {self.p}")
        if self.offset_mode not in OFFSET_MODES:
            raise ValueError(f"offset_mode must be one of {OFFSET_MODES}, got {self.offset_mode!r}")

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "p": self.p,
            "offset_mode": self.offset_mode,
            "seed": self.seed,
            "solver": self.solver.to_dict(),
        }


@lru_cache(maxsize=256)
def _grid(dims: tuple, n: int, offset: tuple) -> PatchGrid:
    return make_patch_grid(dims, n, offset)


def draw_offset(n: int, rng: np.random.Generator) -> tuple[int, int, int]:
    hi = math.ceil(n / 2)
    return tuple(int(o) for o in rng.integers(0, hi + 1, size=3))  # type: ignore[return-value]


def offsets_for(cfg: NPLossConfig, offset=None) -> list[tuple[int, int, int]]:
    """Offsets to average over: the explicit one, all of them, or one seeded draw."""
    if offset is not None:
        return [tuple(int(o) for o in offset)]
    if cfg.offset_mode == "full_expectation":
        return offset_set(cfg.n)
    return [draw_offset(cfg.n, np.random.default_rng(cfg.seed))]


def _pair(y_hat, y) -> tuple[np.ndarray, np.ndarray]:
    a, b = as_array(y_hat), as_array(y)
    if a.shape != b.shape:
        raise ValueError(f"dims mismatch: {a.shape} vs {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("volumes must be finite")
    return a, b


def _scatter(grad_patches: np.ndarray, grid: PatchGrid) -> np.ndarray:
    out = np.zeros(int(np.prod(grid.dims)))
    if grid.is_partition:
        out[grid.indices] = grad_patches
    else:
        np.add.at(out, grid.indices, grad_patches)
    return out.reshape(grid.dims)


def _evaluate(a, b, cfg: NPLossConfig, offsets, want_grad: bool, threads: int):
    n_off = len(offsets)
    total = 0.0
    per_patch = None
    grad = np.zeros(a.shape) if want_grad else None
    grids = []
    for o in offsets:
        grid = _grid(a.shape, cfg.n, o)
        grids.append(grid)
        w, g = solve_batch(
            extract_patches(a, grid),
            extract_patches(b, grid),
            cfg.solver,
            cfg.p,
            want_grad=want_grad,
            threads=threads,
        )
        total += float(np.sum(w))
        per_patch = w.copy() if per_patch is None else per_patch + w
        if want_grad:
            grad += _scatter(g, grid)
    if n_off > 1:
        total /= n_off
        per_patch /= n_off
        if want_grad:
            grad /= n_off
    return total, per_patch, grad, grids


def _per_patch_list(grids, values) -> list[tuple[tuple[int, int, int], float]]:
    # a single offset reports shifted origins; an average reports the base tiling
    origins = grids[0].shifted_origins if len(grids) == 1 else grids[0].origins
    return [(tuple(int(c) for c in o), float(w)) for o, w in zip(origins, values)]


def np_loss(y_hat, y, cfg: NPLossConfig | None = None, *, offset=None, threads: int = 1):
    """Sum over patches of the Wasserstein distance between paired patches.

    Parameters
    ----------
    y_hat, y : Volume or ndarray, shape (nx, ny, nz)
    cfg : NPLossConfig
        ``single_random`` draws one offset from ``cfg.seed``;
        ``full_expectation`` averages the patch sum over every offset.
    offset : tuple of int, optional
        Use this offset instead of the configured mode.
    threads : int
        Patch problems are split across this many threads. The per-patch
        values and their fixed-order sum do not depend on it.

    Returns
    -------
    loss : float
    per_patch : list of ((x, y, z), float)
        Patch origins in lexicographic order with their transport cost.
    """
    cfg = cfg or NPLossConfig()
    a, b = _pair(y_hat, y)
    total, per, _, grids = _evaluate(a, b, cfg, offsets_for(cfg, offset), False, threads)
    return total, _per_patch_list(grids, per)


def np_loss_and_grad(y_hat, y, cfg: NPLossConfig | None = None, *, offset=None, threads: int = 1):
    """Loss value and its gradient in ``y_hat`` (float64 array of the volume's shape)."""
    cfg = cfg or NPLossConfig()
    a, b = _pair(y_hat, y)
    total, _, grad, _ = _evaluate(a, b, cfg, offsets_for(cfg, offset), True, threads)
    return total, grad


def np_loss_grad(y_hat, y, cfg: NPLossConfig | None = None, *, offset=None, threads: int = 1) -> np.ndarray:
    """Gradient of :func:`np_loss` in ``y_hat``.

    Each patch's transport plan is held fixed at its solved value. With a
    shared seed the same offset is used as in the paired :func:`np_loss`.
    """
    return np_loss_and_grad(y_hat, y, cfg, offset=offset, threads=threads)[1]


def avg_pool2(arr: np.ndarray) -> np.ndarray:
    """2x average pooling per axis; odd axes are wrapped periodically first."""
    pad = [(0, d % 2) for d in arr.shape]
    if any(p[1] for p in pad):
        arr = np.pad(arr, pad, mode="wrap")
    nx, ny, nz = (d // 2 for d in arr.shape)
    return arr.reshape(nx, 2, ny, 2, nz, 2).mean(axis=(1, 3, 5))


def multiscale_np_loss(y_hat, y, levels: int, cfg: NPLossConfig | None = None, *, threads: int = 1) -> float:
    """Sum of :func:`np_loss` over an average-pooled pyramid of both inputs."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    cfg = cfg or NPLossConfig()
    a, b = _pair(y_hat, y)
    total = 0.0
    for level in range(levels):
        if level:
            a, b = avg_pool2(a), avg_pool2(b)
        total += np_loss(a, b, cfg, threads=threads)[0]
    return total
