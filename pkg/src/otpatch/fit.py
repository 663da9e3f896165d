"""Free-variable fitting experiment: l1 versus the patch OT loss.

A residual volume ``r`` is fitted by subgradient descent to ``K`` noisy
realizations ``y_k = clean + noise``. Under l1 every voxel is driven to the
per-voxel median of its realizations, which averages the noise away. Under
the patch OT loss only the value distribution inside each patch is matched,
so ``r`` keeps a noise level close to the realizations'.

For the patch loss the objective is ``n^3 * mean_k np_loss(r, y_k)``. Each
patch term then costs at most the l1 distance of that patch (the identity
plan is feasible), so both losses share units and the same step schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import Volume, as_array, extract_patches
from .metrics import mae_ce, mae_sigma, psnr, rows_to_csv, ssim, SSIM_WIN
from .nploss import NPLossConfig, _grid, draw_offset, np_loss_and_grad, offsets_for
from .ot import SolverConfig
from .phantom import Lesion, PhantomSpec, enhancement_field, lesion_mask

COMPARE_COLUMNS = ["loss", "sigma", "mae_sigma", "mae_ce", "psnr", "ssim", "bg_std", "iterations", "seed"]


class FitDivergenceError(RuntimeError):
    pass


def _default_np_config() -> NPLossConfig:
    return NPLossConfig(solver=SolverConfig(kind="exact_sorted"))


@dataclass(frozen=True)
class FitConfig:
    """Settings for :func:`fit_residual`.

    The step at iteration ``t`` is ``step0 * decay**t``.
    """

    loss: str = "np"
    np_config: NPLossConfig = field(default_factory=_default_np_config)
    realizations: int = 32
    step0: float = 0.05
    decay: float = 0.99
    iterations: int = 2000
    init: str = "zeros"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.loss not in ("l1", "np"):
            raise ValueError(f"loss must be 'l1' or 'np', got {self.loss!r}")
        if self.realizations < 2:
            raise ValueError("need at least 2 realizations")
        if not (self.step0 > 0 and 0 < self.decay <= 1):
            raise ValueError("step0 must be > 0 and decay in (0, 1]")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.init not in ("zeros", "first_realization"):
            raise ValueError(f"init must be 'zeros' or 'first_realization', got {self.init!r}")

    def step(self, t: int) -> float:
        return self.step0 * self.decay**t

    def to_dict(self) -> dict:
        return {
            "loss": self.loss,
            "np_config": self.np_config.to_dict(),
            "realizations": self.realizations,
            "step0": self.step0,
            "decay": self.decay,
            "iterations": self.iterations,
            "init": self.init,
            "seed": self.seed,
        }


def realizations(clean: np.ndarray, sigma: float, k: int, seed: int) -> np.ndarray:
    """``k`` noisy copies of ``clean``; copy ``i`` draws from its own spawned seed."""
    seqs = np.random.SeedSequence(seed).spawn(k)
    out = np.empty((k,) + clean.shape)
    for i, s in enumerate(seqs):
        out[i] = clean + sigma * np.random.default_rng(s).standard_normal(clean.shape)
    return out


class _SortedTargets:
    """Per-offset cache of sorted target patches for the exact 1-D solver."""

    def __init__(self, targets: np.ndarray, n: int):
        self.targets = targets
        self.n = n
        self._cache: dict = {}

    def get(self, offset):
        if offset not in self._cache:
            grid = _grid(self.targets.shape[1:], self.n, offset)
            self._cache[offset] = (grid, np.sort(extract_patches(self.targets, grid), axis=-1))
        return self._cache[offset]


def _np_exact_step(r: np.ndarray, targets: _SortedTargets, offsets, p: int):
    """Mean over targets of the scaled patch loss and its gradient, exact solver.

    Same arithmetic as ``np_loss_and_grad`` with ``exact_sorted``, with the
    target sort shared across iterations.
    """
    total = 0.0
    grad = np.zeros(r.shape)
    for o in offsets:
        grid, sorted_t = targets.get(o)
        rp = extract_patches(r, grid)
        order = np.argsort(rp, axis=-1, kind="stable")
        rs = np.take_along_axis(rp, order, axis=-1)
        k = sorted_t.shape[0]
        d = rs[None] - sorted_t
        if p == 1:
            total += float(np.abs(d).sum()) / k
            gs = np.sign(d, out=d).mean(axis=0)
        else:
            gs = 2.0 * d.mean(axis=0)
            total += float(np.sum(d * d)) / k
        g = np.empty_like(gs)
        np.put_along_axis(g, order, gs, axis=-1)
        flat = np.zeros(r.size)
        if grid.is_partition:
            flat[grid.indices] = g
        else:
            np.add.at(flat, grid.indices, g)
        grad += flat.reshape(r.shape)
    return total / len(offsets), grad / len(offsets)


def fit_residual(clean, sigma: float, cfg: FitConfig | None = None, *, threads: int = 1):
    """Fit a free residual volume to ``cfg.realizations`` noisy copies of ``clean``.

    Returns
    -------
    r : Volume
        Final iterate.
    trace : list of float
        Objective value at each iteration, evaluated before its step.
    """
    cfg = cfg or FitConfig()
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    return fit_to_targets(realizations(as_array(clean), sigma, cfg.realizations, cfg.seed), cfg, threads=threads)


def fit_to_targets(targets, cfg: FitConfig | None = None, *, threads: int = 1):
    """Subgradient descent on the mean loss against explicit targets of shape (K, nx, ny, nz)."""
    cfg = cfg or FitConfig()
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim != 4 or targets.shape[0] < 2:
        raise ValueError(f"targets must have shape (K>=2, nx, ny, nz), got {targets.shape}")
    K = targets.shape[0]
    r = np.zeros(targets.shape[1:]) if cfg.init == "zeros" else targets[0].copy()

    npc = cfg.np_config
    m = npc.n**3
    fast = npc.solver.kind == "exact_sorted"
    sorted_targets = _SortedTargets(targets, npc.n) if (cfg.loss == "np" and fast) else None
    offset_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))

    trace: list[float] = []
    for t in range(cfg.iterations):
        if cfg.loss == "l1":
            d = r[None] - targets
            value = float(np.sum(np.abs(d))) / K
            grad = np.sign(d).mean(axis=0)
        else:
            if npc.offset_mode == "full_expectation":
                offsets = offsets_for(npc)
            else:
                offsets = [draw_offset(npc.n, offset_rng)]
            if sorted_targets is not None:
                value, grad = _np_exact_step(r, sorted_targets, offsets, npc.p)
            else:
                value, grad = 0.0, np.zeros(r.shape)
                for y in targets:
                    for o in offsets:
                        v, g = np_loss_and_grad(r, y, npc, offset=o, threads=threads)
                        value += v
                        grad += g
                scale = m / (K * len(offsets))
                value *= scale
                grad *= scale
        trace.append(value)
        if trace[0] > 0 and value > 10.0 * trace[0]:
            raise FitDivergenceError(
                f"objective {value:.4g} at iteration {t} exceeds 10x the initial {trace[0]:.4g}"
            )
        if not np.all(np.isfinite(grad)):
            raise FitDivergenceError(f"non-finite gradient at iteration {t}")
        r -= cfg.step(t) * grad
    return Volume(r), trace


def smoothed(trace, window: int = 50) -> np.ndarray:
    """Trailing moving average of a loss trace."""
    x = np.asarray(trace, dtype=np.float64)
    if x.size < window:
        return x.copy()
    c = np.cumsum(np.insert(x, 0, 0.0))
    return (c[window:] - c[:-window]) / window


# --------------------------------------------------------------------------
# Comparison experiment
# --------------------------------------------------------------------------


def demo_phantom(dims=(32, 32, 32), dose: float = 0.33, enhancement: float = 0.6, radius: float | None = None):
    """Clean low-dose residual with one central spherical lesion, plus its mask."""
    dims = tuple(int(d) for d in dims)
    if radius is None:
        radius = max(1.0, min(dims) / 5)
    center = tuple((d - 1) / 2 for d in dims)
    spec = PhantomSpec(dims=dims, lesions=(Lesion(center, radius, enhancement),), dose=dose, sigma=0.0)
    return enhancement_field(spec, dose), lesion_mask(spec)


@dataclass
class ComparisonReport:
    rows: list[dict]
    config: dict

    def to_dict(self) -> dict:
        rows = []
        for row in self.rows:
            row = dict(row)
            if isinstance(row.get("psnr"), float) and math.isinf(row["psnr"]):
                row["psnr"] = "inf"
            rows.append(row)
        return {"rows": rows, "config": self.config}

    def to_csv(self) -> str:
        return rows_to_csv(self.rows, COMPARE_COLUMNS)

    def row(self, loss: str) -> dict:
        return next(r for r in self.rows if r["loss"] == loss)


def compare_losses(clean, sigma: float, cfgs, mask=None, *, seed: int = 0, threads: int = 1) -> ComparisonReport:
    """Fit under each config and score the fits against a held-out realization.

    ``mask`` marks the planted enhancing voxels; by default every voxel where
    ``clean`` is positive. The held-out realization uses a seed stream that
    no fit shares. ``bg_std`` is the std of ``r - clean`` outside the mask.
    """
    cfgs = list(cfgs)
    if len(cfgs) < 2:
        raise ValueError("compare_losses needs at least two configs")
    base = as_array(clean)
    planted = base > 0 if mask is None else np.asarray(getattr(mask, "mask", mask), dtype=bool)
    held = realizations(base, sigma, 1, np.random.SeedSequence([seed, 7]).generate_state(1)[0])[0]
    zeros = np.zeros(base.shape)
    rows = []
    for cfg in cfgs:
        r, trace = fit_residual(base, sigma, cfg, threads=threads)
        ra = as_array(r)
        rows.append(
            {
                "loss": cfg.loss,
                "sigma": sigma,
                "mae_sigma": mae_sigma(ra, held, zeros, planted),
                "mae_ce": mae_ce(ra, held, planted) if planted.any() else None,
                "psnr": psnr(ra, held),
                "ssim": ssim(ra, held) if min(base.shape[:2]) >= SSIM_WIN else None,
                "bg_std": float(np.std((ra - base)[~planted])),
                "iterations": cfg.iterations,
                "seed": cfg.seed,
                "final_objective": trace[-1],
            }
        )
    config = {"sigma": sigma, "seed": seed, "fits": [c.to_dict() for c in cfgs]}
    return ComparisonReport(rows, config)


def default_compare_configs(seed: int = 0, iterations: int = 2000, realizations_: int = 32, **np_overrides):
    npc = replace(_default_np_config(), seed=seed, **np_overrides)
    return [
        FitConfig(loss="l1", np_config=npc, iterations=iterations, realizations=realizations_, seed=seed),
        FitConfig(loss="np", np_config=npc, iterations=iterations, realizations=realizations_, seed=seed),
    ]
