"""Input perturbations: single-cuboid CutMix masks and uniform noise."""

from dataclasses import dataclass

import numpy as np

from .volumes import ProbVolume, Volume

DEFAULT_NOISE_AMPLITUDE = 0.2
DEFAULT_RATIO_RANGE = (0.25, 0.5)
_MAX_TRIES = 1000


@dataclass(frozen=True)
class CutMixMask:
    """Binary cuboid mask: 1 inside the box, 0 outside."""

    mask: np.ndarray
    box: tuple  # (origin, size)

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=np.uint8)
        origin, size = self.box
        check = np.zeros(m.shape, dtype=np.uint8)
        sl = tuple(slice(o, o + s) for o, s in zip(origin, size))
        check[sl] = 1
        if not np.array_equal(m, check):
            raise ValueError("mask does not match its box")
        m.flags.writeable = False
        object.__setattr__(self, "mask", m)

    @property
    def fraction(self) -> float:
        origin, size = self.box
        return float(np.prod(size)) / float(np.prod(self.mask.shape))


def sample_cutmix_mask(shape, ratio_range, rng) -> CutMixMask:
    """Sample a cuboid whose volume fraction lies inside ``ratio_range``.

    Two box axes are drawn around the isotropic target edge length, the third
    is then solved from the admissible integer interval, so the fraction
    constraint holds exactly for every draw.
    """
    shape = tuple(int(s) for s in shape)
    r_min, r_max = float(ratio_range[0]), float(ratio_range[1])
    if not 0 < r_min <= r_max < 1:
        raise ValueError(f"need 0 < r_min <= r_max < 1, got ({r_min}, {r_max})")
    total = int(np.prod(shape))
    for _ in range(_MAX_TRIES):
        f = rng.uniform(r_min, r_max)
        edge = f ** (1.0 / 3.0)
        d0 = int(np.clip(round(shape[0] * edge * rng.uniform(0.7, 1.4)), 1, shape[0]))
        d1 = int(np.clip(round(shape[1] * edge * rng.uniform(0.7, 1.4)), 1, shape[1]))
        lo = int(np.ceil(r_min * total / (d0 * d1) - 1e-9))
        hi = int(np.floor(r_max * total / (d0 * d1) + 1e-9))
        lo, hi = max(lo, 1), min(hi, shape[2])
        if lo > hi:
            continue
        d2 = int(rng.integers(lo, hi + 1))
        size = (d0, d1, d2)
        if not r_min <= d0 * d1 * d2 / total <= r_max:  # guard edge rounding
            continue
        origin = tuple(int(rng.integers(0, s - b + 1)) for s, b in zip(shape, size))
        mask = np.zeros(shape, dtype=np.uint8)
        mask[tuple(slice(o, o + b) for o, b in zip(origin, size))] = 1
        return CutMixMask(mask=mask, box=(origin, size))
    raise ValueError(f"shape {shape} too small to realize ratio range ({r_min}, {r_max})")


def cutmix_array(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """mask*a + (1-mask)*b computed as an exact voxelwise selection.

    ``mask`` has spatial shape (D,H,W) and broadcasts over any leading axes.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.shape[-3:] != mask.shape:
        raise ValueError(f"mask shape {mask.shape} does not match {a.shape}")
    return np.where(mask.astype(bool), a, b)


def cutmix(a, b, mask: CutMixMask):
    """CutMix two same-kind volumes: box content from ``a``, rest from ``b``."""
    if type(a) is not type(b):
        raise ValueError(f"kind mismatch {type(a).__name__} vs {type(b).__name__}")
    if isinstance(a, Volume):
        return Volume(cutmix_array(a.voxels, b.voxels, mask.mask))
    if isinstance(a, ProbVolume):
        return ProbVolume(cutmix_array(a.values, b.values, mask.mask))
    raise TypeError(f"cutmix not defined for {type(a).__name__}")


def uniform_noise_like(shape, amplitude, rng) -> np.ndarray:
    if amplitude < 0:
        raise ValueError(f"amplitude must be >= 0, got {amplitude}")
    return rng.uniform(-amplitude, amplitude, size=shape).astype(np.float32)


def add_uniform_noise(v: Volume, amplitude, rng) -> Volume:
    """Add i.i.d. U(-amplitude, +amplitude) noise per voxel."""
    if amplitude < 0:
        raise ValueError(f"amplitude must be >= 0, got {amplitude}")
    if amplitude == 0:
        return v
    return Volume(v.voxels + uniform_noise_like(v.shape, amplitude, rng))
