"""Synthetic contrast-enhanced phantoms with known ground truth.

A case consists of a native volume, a standard-dose volume, a low-dose
volume and the low-dose residual, each with independent noise. The noise
std defaults by field strength: 0.03 at 3 T and 0.05 at 1.5 T. These are
plain defaults chosen for the phantoms, not measured scanner values.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.ndimage import gaussian_filter

from . import __version__
from .core import DOSE_INTERVAL, VALID_FIELD_STRENGTHS, MetaData, Volume, atomic_write_bytes, save_volume

DEFAULT_SIGMA = {3.0: 0.03, 1.5: 0.05}
DEFAULT_DOSE_SET = (0.1, 0.2, 0.33)


@dataclass(frozen=True)
class Lesion:
    center: tuple[float, float, float]
    radius: float
    enhancement: float


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of one synthetic case.

    ``enhancement`` of each lesion is its full-dose peak; at dose ``d`` it is
    scaled by ``dose_response(d)`` which equals 1 at full dose.
    """

    dims: tuple[int, int, int] = (32, 32, 32)
    background: float = 0.8
    anatomy_amplitude: float = 0.15
    lesions: tuple[Lesion, ...] = ()
    dose: float = 0.33
    field_strength: float = 3.0
    noise: str = "gaussian"
    sigma: float | None = None
    response: str = "linear"
    beta: float = 3.0
    seed: int = 0

    def __post_init__(self) -> None:
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "lesions", tuple(self.lesions))
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        lo, hi = DOSE_INTERVAL
        if not lo <= self.dose <= hi:
            raise ValueError(f"dose must lie in [{lo}, {hi}], got {self.dose}")
        if float(self.field_strength) not in VALID_FIELD_STRENGTHS:
            raise ValueError(f"field_strength must be one of {VALID_FIELD_STRENGTHS}")
        if self.noise not in ("gaussian", "rician"):
            raise ValueError(f"noise must be 'gaussian' or 'rician', got {self.noise!r}")
        if self.sigma is not None and self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.response not in ("linear", "saturating"):
            raise ValueError(f"response must be 'linear' or 'saturating', got {self.response!r}")
        if self.response == "saturating" and not self.beta > 0:
            raise ValueError("beta must be > 0")
        for les in self.lesions:
            if les.radius <= 0:
                raise ValueError(f"lesion radius must be > 0: {les}")
            for c, d in zip(les.center, dims):
                if c - les.radius < 0 or c + les.radius > d - 1:
                    raise ValueError(f"lesion {les} does not fit inside dims {dims}")

    @property
    def sigma_base(self) -> float:
        if self.sigma is not None:
            return float(self.sigma)
        return DEFAULT_SIGMA[float(self.field_strength)]

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "background": self.background,
            "anatomy_amplitude": self.anatomy_amplitude,
            "lesions": [
                {"center": list(l.center), "radius": l.radius, "enhancement": l.enhancement}
                for l in self.lesions
            ],
            "dose": self.dose,
            "field_strength": self.field_strength,
            "noise": self.noise,
            "sigma": self.sigma_base,
            "response": self.response,
            "beta": self.beta,
            "seed": self.seed,
        }


class PhantomCase(NamedTuple):
    x_na: Volume
    x_sd: Volume
    x_ld: Volume
    y_ld: Volume
    meta: MetaData


def dose_response(d: float, response: str = "linear", beta: float = 3.0) -> float:
    if response == "linear":
        return float(d)
    return (1.0 - math.exp(-beta * d)) / (1.0 - math.exp(-beta))


def lesion_mask(spec: PhantomSpec) -> np.ndarray:
    grid = np.indices(spec.dims, dtype=np.float64)
    mask = np.zeros(spec.dims, dtype=bool)
    for les in spec.lesions:
        r2 = sum((g - c) ** 2 for g, c in zip(grid, les.center))
        mask |= r2 <= les.radius**2
    return mask


def enhancement_field(spec: PhantomSpec, dose: float) -> np.ndarray:
    """Noise-free enhancement at ``dose``; overlapping lesions add up."""
    grid = np.indices(spec.dims, dtype=np.float64)
    scale = dose_response(dose, spec.response, spec.beta)
    out = np.zeros(spec.dims)
    for les in spec.lesions:
        r2 = sum((g - c) ** 2 for g, c in zip(grid, les.center))
        out[r2 <= les.radius**2] += scale * les.enhancement
    return out


def anatomy_field(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    """Smooth periodic texture with max |value| equal to ``anatomy_amplitude``."""
    field_ = gaussian_filter(rng.standard_normal(spec.dims), sigma=max(spec.dims) / 8, mode="wrap")
    peak = np.max(np.abs(field_))
    if peak == 0 or spec.anatomy_amplitude == 0:
        return np.zeros(spec.dims)
    return spec.anatomy_amplitude * field_ / peak


def _noisy(signal: np.ndarray, spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    s = spec.sigma_base
    if spec.noise == "gaussian":
        return signal + s * rng.standard_normal(signal.shape)
    real = signal + s * rng.standard_normal(signal.shape)
    imag = s * rng.standard_normal(signal.shape)
    return np.hypot(real, imag)


def generate(spec: PhantomSpec) -> PhantomCase:
    """Draw one case; the same spec always yields bit-identical volumes.

    ``x_ld`` is formed as ``x_na + y_ld`` in float32, so that identity holds
    exactly for the stored voxels.
    """
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(4)]
    clean = (spec.background + anatomy_field(spec, streams[0])).astype(np.float32).astype(np.float64)
    x_na = _noisy(clean, spec, streams[1]).astype(np.float32)
    x_sd = _noisy(clean + enhancement_field(spec, 1.0), spec, streams[2]).astype(np.float32)
    ld_target = _noisy(clean + enhancement_field(spec, spec.dose), spec, streams[3])
    y_ld = (ld_target - x_na).astype(np.float32)
    x_ld = x_na + y_ld
    meta = MetaData(spec.dose, spec.field_strength)
    return PhantomCase(Volume(x_na), Volume(x_sd), Volume(x_ld), Volume(y_ld), meta)


def generate_suite(count: int, base_spec: PhantomSpec, out_dir, dose_set=DEFAULT_DOSE_SET) -> Path:
    """Write ``count`` cases plus ``manifest.json`` into ``out_dir``.

    Doses cycle through ``dose_set``; case ``i`` uses seed ``base_spec.seed + i``.
    Returns the manifest path.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if not dose_set:
        raise ValueError("dose_set must not be empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cases = []
    for i in range(count):
        spec = replace(base_spec, dose=float(dose_set[i % len(dose_set)]), seed=base_spec.seed + i)
        case = generate(spec)
        case_id = f"case_{i:04d}"
        paths = {}
        for key in ("x_na", "x_sd", "x_ld", "y_ld"):
            name = f"{case_id}_{key}.vol"
            save_volume(getattr(case, key), out / name)
            paths[key] = name
        cases.append(
            {
                "case_id": case_id,
                "paths": paths,
                "d": spec.dose,
                "B": spec.field_strength,
                "seed": spec.seed,
                "sigma": spec.sigma_base,
            }
        )
    manifest = {
        "provenance": {
            "tool": "otpatch",
            "version": __version__,
            "command": "phantom",
            "config": {"count": count, "dose_set": list(dose_set), "base_spec": base_spec.to_dict()},
            "seed": base_spec.seed,
        },
        "cases": cases,
    }
    path = out / "manifest.json"
    atomic_write_bytes(path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8"))
    return path
