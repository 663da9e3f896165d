"""Evaluation metrics for synthesized contrast-enhanced volumes."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import DegenerateNormalizationError, as_array, quantile_nearest_rank

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class NoCEVoxelsError(ValueError):
    pass


def _same_dims(*arrays) -> None:
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"dims mismatch: {sorted(shapes)}")


@dataclass(frozen=True)
class CEMask:
    """Voxels whose standard-dose enhancement reaches the threshold."""

    mask: np.ndarray
    threshold_used: float
    q95_used: float
    relative: bool = False

    @property
    def dims(self) -> tuple[int, ...]:
        return self.mask.shape

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.mask))


def _as_bool_mask(mask) -> np.ndarray:
    return np.asarray(mask.mask if isinstance(mask, CEMask) else mask, dtype=bool)


def ce_mask(x_na, x_sd, threshold: float = 0.1, relative: bool = False) -> CEMask:
    """Threshold the subtraction image ``x_sd - x_na``.

    By default a voxel is enhancing when the subtraction reaches
    ``threshold * q95(x_na)`` (boundary included). With ``relative=True``
    the bar is ``threshold * x_na`` voxel by voxel instead.
    """
    na, sd = as_array(x_na), as_array(x_sd)
    _same_dims(na, sd)
    q = quantile_nearest_rank(na)
    if not q > 0:
        raise DegenerateNormalizationError(f"native 0.95-quantile is {q}, cannot scale threshold")
    diff = sd - na
    bar = threshold * na if relative else threshold * q
    return CEMask(diff >= bar, float(threshold), q, relative)


def mae_ce(x_hat, x_ref, mask) -> float:
    """Mean absolute error over CE voxels."""
    a, b = as_array(x_hat), as_array(x_ref)
    m = _as_bool_mask(mask)
    _same_dims(a, b, m)
    if not m.any():
        raise NoCEVoxelsError("CE mask is empty; MAE_CE is undefined")
    return float(np.mean(np.abs(a[m] - b[m])))


def mae_sigma(x_hat, x_ref, x_na, mask) -> float:
    """|std(x_hat - x_na) - std(x_ref - x_na)| over non-CE voxels (population std)."""
    a, b, na = as_array(x_hat), as_array(x_ref), as_array(x_na)
    keep = ~_as_bool_mask(mask)
    _same_dims(a, b, na, keep)
    if np.count_nonzero(keep) < 2:
        raise ValueError("need at least 2 non-CE voxels to estimate a standard deviation")
    s_hat = np.std((a - na)[keep])
    s_ref = np.std((b - na)[keep])
    return float(abs(s_hat - s_ref))


def psnr(x_hat, x_ref, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    a, b = as_array(x_hat), as_array(x_ref)
    _same_dims(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    # separable 'valid' correlation over the last two axes
    k = w.size
    out = sliding_window_view(img, k, axis=-2) @ w
    return sliding_window_view(out, k, axis=-1) @ w


def ssim(x_hat, x_ref, data_range: float = 1.0) -> float:
    """Mean SSIM over axial (constant-z) slices.

    Each slice uses an 11-tap Gaussian window (sigma 1.5) evaluated only
    where it fits entirely inside the slice; slice means are averaged.
    """
    a, b = as_array(x_hat), as_array(x_ref)
    _same_dims(a, b)
    if a.shape[0] < SSIM_WIN or a.shape[1] < SSIM_WIN:
        raise ValueError(
            f"in-plane size {a.shape[:2]} is smaller than the {SSIM_WIN}-voxel SSIM window"
        )
    # slices on the leading axis
    x = np.moveaxis(a, 2, 0)
    y = np.moveaxis(b, 2, 0)
    w = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _filter_valid(x, w), _filter_valid(y, w)
    sxx = _filter_valid(x * x, w) - mx * mx
    syy = _filter_valid(y * y, w) - my * my
    sxy = _filter_valid(x * y, w) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    per_slice = (num / den).mean(axis=(1, 2))
    return float(per_slice.mean())


@dataclass(frozen=True)
class MetricsReport:
    psnr: float
    ssim: float | None
    mae_ce: float | None
    mae_sigma: float | None
    ce_voxel_count: int | None

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["psnr"] is not None and math.isinf(d["psnr"]):
            d["psnr"] = "inf"
        return d


def evaluate(x_hat, x_ref, x_na=None, x_sd=None, threshold: float = 0.1, peak: float = 1.0) -> MetricsReport:
    """Compute every metric that the supplied volumes allow.

    MAE_CE and MAE_sigma need both the native and standard-dose volumes to
    build the CE mask. SSIM is skipped (None) for slices smaller than its
    window.
    """
    a, b = as_array(x_hat), as_array(x_ref)
    _same_dims(a, b)
    try:
        s = ssim(a, b)
    except ValueError:
        if min(a.shape[:2]) >= SSIM_WIN:
            raise
        s = None
    ce = sigma = count = None
    if (x_na is None) != (x_sd is None):
        raise ValueError("x_na and x_sd must be given together")
    if x_na is not None:
        mask = ce_mask(x_na, x_sd, threshold)
        count = mask.count
        ce = mae_ce(a, b, mask)
        sigma = mae_sigma(a, b, x_na, mask)
    return MetricsReport(psnr(a, b, peak), s, ce, sigma, count)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return "inf" if math.isinf(value) else repr(value)
    return str(value)


def rows_to_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])
    return buf.getvalue()
