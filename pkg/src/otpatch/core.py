"""Volume and patch data model plus the VOL1 binary volume format.

Volumes are dense ``(nx, ny, nz)`` float32 arrays stored in C order, so the
last (z) axis varies fastest both in memory and in the VOL1 payload.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np

MAGIC = "VOL1"
Q95 = 0.95

VALID_FIELD_STRENGTHS = (1.5, 3.0)
DOSE_INTERVAL = (0.05, 0.5)


class VolumeFormatError(ValueError):
    """Base class for VOL1 parse failures."""


class HeaderError(VolumeFormatError):
    pass


class PayloadSizeError(VolumeFormatError):
    pass


class NonFiniteVoxelError(VolumeFormatError):
    pass


class DegenerateNormalizationError(ValueError):
    pass


class DegenerateTilingError(ValueError):
    pass


@dataclass(frozen=True)
class Volume:
    """Dense 3-D scalar field.

    Parameters
    ----------
    data : array_like, shape (nx, ny, nz)
        Voxel intensities; stored as a read-only float32 array.
    norm_q95 : float
        Scale that was divided out by :func:`normalize` (1.0 when the
        volume was never normalized).
    """

    data: np.ndarray
    norm_q95: float = 1.0

    def __post_init__(self) -> None:
        arr = np.array(self.data, dtype=np.float32, copy=True)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"volume must be 3-D with positive dims, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteVoxelError("volume contains NaN or Inf voxels")
        if not (math.isfinite(self.norm_q95) and self.norm_q95 > 0):
            raise ValueError(f"norm_q95 must be positive and finite, got {self.norm_q95}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "norm_q95", float(self.norm_q95))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)  # type: ignore[return-value]

    @property
    def voxels(self) -> np.ndarray:
        """Flat view in file order."""
        return self.data.reshape(-1)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @classmethod
    def zeros(cls, dims) -> "Volume":
        return cls(np.zeros(tuple(dims), dtype=np.float32))

    def with_data(self, data) -> "Volume":
        return Volume(data, self.norm_q95)


@dataclass(frozen=True)
class MetaData:
    """Acquisition metadata attached to a synthesized case."""

    dose: float
    field_strength: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.dose <= 1.0:
            raise ValueError(f"dose must lie in [0, 1], got {self.dose}")
        if float(self.field_strength) not in VALID_FIELD_STRENGTHS:
            raise ValueError(
                f"field_strength must be one of {VALID_FIELD_STRENGTHS}, got {self.field_strength}"
            )


def as_array(v) -> np.ndarray:
    """Return the voxels of a Volume or array as a float64 3-D array."""
    arr = v.data if isinstance(v, Volume) else v
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"expected a 3-D volume, got shape {arr.shape}")
    return arr


# --------------------------------------------------------------------------
# VOL1 I/O
# --------------------------------------------------------------------------


def _encode(v: Volume) -> bytes:
    header = {"magic": MAGIC, "dims": list(v.dims), "q95": v.norm_q95}
    payload = v.data.astype("<f4", copy=False).tobytes(order="C")
    return json.dumps(header).encode("utf-8") + b"\n" + payload


def atomic_write_bytes(path, blob: bytes) -> None:
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_volume(v: Volume, path) -> None:
    atomic_write_bytes(path, _encode(v))


def parse_volume(blob: bytes) -> Volume:
    newline = blob.find(b"\n")
    if newline < 0:
        raise HeaderError("missing header terminator")
    try:
        header = json.loads(blob[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"header is not valid JSON: {exc}") from None
    if not isinstance(header, dict):
        raise HeaderError("header must be a JSON object")
    if header.get("magic") != MAGIC:
        raise HeaderError(f"bad magic {header.get('magic')!r}, expected {MAGIC!r}")
    dims = header.get("dims")
    if (
        not isinstance(dims, list)
        or len(dims) != 3
        or not all(isinstance(d, int) and not isinstance(d, bool) and d > 0 for d in dims)
    ):
        raise HeaderError(f"dims must be three positive integers, got {dims!r}")
    q95 = header.get("q95", 1.0)
    if not isinstance(q95, (int, float)) or isinstance(q95, bool) or not (q95 > 0 and math.isfinite(q95)):
        raise HeaderError(f"q95 must be a positive finite number, got {q95!r}")

    payload = blob[newline + 1 :]
    expected = 4 * dims[0] * dims[1] * dims[2]
    if len(payload) != expected:
        raise PayloadSizeError(
            f"payload has {len(payload)} bytes ({len(payload) / 4:g} floats), "
            f"dims {dims} require {expected // 4} floats"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(dims)
    if not np.all(np.isfinite(data)):
        raise NonFiniteVoxelError(f"{int(np.sum(~np.isfinite(data)))} non-finite voxel(s) in payload")
    return Volume(data, float(q95))


def load_volume(path) -> Volume:
    return parse_volume(Path(path).read_bytes())


# --------------------------------------------------------------------------
# Normalization
# --------------------------------------------------------------------------


def quantile_nearest_rank(values, q: float = Q95) -> float:
    """``ceil(q * N)``-th smallest value (1-based), no interpolation."""
    flat = np.asarray(values, dtype=np.float64).ravel()
    if flat.size == 0:
        raise ValueError("quantile of an empty array")
    k = max(1, math.ceil(q * flat.size))
    return float(np.partition(flat, k - 1)[k - 1])


def normalize(v: Volume) -> Volume:
    """Divide by the nearest-rank 0.95-quantile.

    The recorded ``norm_q95`` accumulates across repeated calls so the
    original intensities can always be restored by one multiplication.
    """
    arr = as_array(v)
    if not np.any(arr > 0):
        raise DegenerateNormalizationError("volume has no strictly positive voxel")
    q = quantile_nearest_rank(arr)
    if q <= 0:
        raise DegenerateNormalizationError(f"0.95-quantile is {q}, cannot normalize")
    return Volume(arr / q, v.norm_q95 * q)


# --------------------------------------------------------------------------
# Patch tiling
# --------------------------------------------------------------------------


def offset_set(n: int) -> list[tuple[int, int, int]]:
    """All admissible offsets ``{0, ..., ceil(n/2)}^3`` in lexicographic order."""
    r = range(math.ceil(n / 2) + 1)
    return list(product(r, r, r))


@dataclass(frozen=True)
class PatchGrid:
    """Tiling of a volume into ``n^3`` patches shifted by ``offset``.

    Patch ``k`` covers the voxels ``origins[k] + offset + [0, n)^3`` taken
    modulo ``dims``. ``indices[k]`` lists their flat indices in lexicographic
    (dx, dy, dz) order.
    """

    dims: tuple[int, int, int]
    n: int
    offset: tuple[int, int, int]
    origins: np.ndarray = field(repr=False)
    indices: np.ndarray = field(repr=False)

    @property
    def num_patches(self) -> int:
        return int(self.indices.shape[0])

    @property
    def patch_size(self) -> int:
        return self.n**3

    @property
    def shifted_origins(self) -> np.ndarray:
        return (self.origins + np.asarray(self.offset)) % np.asarray(self.dims)

    @property
    def is_partition(self) -> bool:
        return all(d % self.n == 0 for d in self.dims)


def make_patch_grid(dims, n: int, offset=(0, 0, 0)) -> PatchGrid:
    """Build the periodic patch tiling.

    Each axis gets ``ceil(d / n)`` patch origins ``0, n, 2n, ...``. When
    ``n`` divides every dimension the patches partition the volume; otherwise
    the wrapped tail patches revisit voxels from the start of the axis.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"dims must be three positive integers, got {dims}")
    n = int(n)
    if n < 2:
        raise ValueError(f"patch size n must be >= 2, got {n}")
    if n > min(dims):
        raise DegenerateTilingError(f"patch size {n} exceeds volume dimension {min(dims)}")
    offset = tuple(int(o) for o in offset)
    hi = math.ceil(n / 2)
    if len(offset) != 3 or any(o < 0 or o > hi for o in offset):
        raise ValueError(f"offset components must lie in [0, {hi}], got {offset}")

    axes = []
    starts = []
    for d, o in zip(dims, offset):
        s = np.arange(0, d, n)
        starts.append(s)
        axes.append((s[:, None] + o + np.arange(n)[None, :]) % d)  # (count, n)
    ix, iy, iz = axes
    cx, cy, cz = (len(s) for s in starts)
    flat = (
        ix[:, None, None, :, None, None] * (dims[1] * dims[2])
        + iy[None, :, None, None, :, None] * dims[2]
        + iz[None, None, :, None, None, :]
    )
    indices = flat.reshape(cx * cy * cz, n**3)
    origins = np.stack(
        np.meshgrid(starts[0], starts[1], starts[2], indexing="ij"), axis=-1
    ).reshape(-1, 3)
    indices.setflags(write=False)
    origins.setflags(write=False)
    return PatchGrid(dims, n, offset, origins, indices)


def extract_patches(arr: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Gather patch values, shape ``(..., num_patches, n^3)``.

    Leading axes of ``arr`` beyond the last three are kept as batch axes.
    """
    arr = np.asarray(arr)
    lead = arr.shape[:-3]
    return arr.reshape(lead + (-1,))[..., grid.indices]
