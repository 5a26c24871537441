"""Core volume types shared by every module.

Axis convention is fixed to (depth, height, width) for scalar volumes and
(class, depth, height, width) for per-class volumes, W fastest in memory.
All types are immutable after construction (backing arrays are marked
read-only) so they can be shared freely across workers.
"""

from dataclasses import dataclass, field

import numpy as np

PROB_SUM_TOL = 1e-5


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Volume:
    """Dense 3D scalar field of image intensities, shape (D, H, W)."""

    voxels: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.voxels, dtype=np.float32)
        if v.ndim != 3:
            raise ValueError(f"Volume must be 3D, got shape {v.shape}")
        if any(s <= 0 for s in v.shape):
            raise ValueError(f"Volume axes must be positive, got {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("Volume contains non-finite values")
        object.__setattr__(self, "voxels", _freeze(v))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass(frozen=True)
class LabelVolume:
    """Dense integer class map, values in {0, ..., num_classes-1}."""

    classes: np.ndarray
    num_classes: int = 2

    def __post_init__(self):
        c = np.asarray(self.classes)
        if c.ndim != 3:
            raise ValueError(f"LabelVolume must be 3D, got shape {c.shape}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_classes > 256:
            raise ValueError("num_classes > 256 not representable as u8")
        c = c.astype(np.uint8)
        if c.size and int(c.max()) >= self.num_classes:
            raise ValueError(
                f"label value {int(c.max())} >= num_classes {self.num_classes}"
            )
        object.__setattr__(self, "classes", _freeze(c))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.classes.shape


@dataclass(frozen=True)
class ProbVolume:
    """Per-voxel class probabilities, shape (K, D, H, W), simplex per voxel."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 4:
            raise ValueError(f"ProbVolume must be 4D (K,D,H,W), got {v.shape}")
        violation = validate_prob_array(v)
        if violation is not None:
            raise ValueError(violation)
        object.__setattr__(self, "values", _freeze(v))

    @property
    def num_classes(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape[1:]


@dataclass(frozen=True)
class LogitVolume:
    """Raw per-class network outputs, shape (K, D, H, W), finite."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 4:
            raise ValueError(f"LogitVolume must be 4D (K,D,H,W), got {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("LogitVolume contains non-finite values")
        object.__setattr__(self, "values", _freeze(v))

    @property
    def num_classes(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape[1:]


@dataclass(frozen=True)
class Sample:
    """One image volume with an optional label map and a stable id."""

    image: Volume
    label: LabelVolume | None = None
    id: str = field(default="")

    def __post_init__(self):
        if self.label is not None and self.label.shape != self.image.shape:
            raise ValueError(
                f"label shape {self.label.shape} != image shape {self.image.shape}"
            )


def validate_prob_array(values: np.ndarray) -> str | None:
    """Check the per-voxel simplex constraint on a raw (K,D,H,W) array.

    Returns None when valid, otherwise a description naming the first
    violating voxel and its class sum.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 4:
        return f"expected 4D (K,D,H,W) array, got shape {v.shape}"
    if not np.isfinite(v).all():
        idx = np.argwhere(~np.isfinite(v))[0]
        return f"non-finite value at (class,voxel) index {tuple(int(i) for i in idx)}"
    if (v < 0).any() or (v > 1).any():
        idx = np.argwhere((v < 0) | (v > 1))[0]
        bad = v[tuple(idx)]
        return f"value {bad} out of [0,1] at (class,voxel) index {tuple(int(i) for i in idx)}"
    sums = v.sum(axis=0)
    off = np.abs(sums - 1.0) > PROB_SUM_TOL
    if off.any():
        idx = tuple(int(i) for i in np.argwhere(off)[0])
        return f"class sum {sums[idx]:.6f} != 1 at voxel {idx}"
    return None


def validate_prob_volume(p: ProbVolume) -> str | None:
    """Simplex check on an already-constructed ProbVolume (always None by
    construction, kept as the public validation entry point for raw data)."""
    return validate_prob_array(p.values)
