"""Sliding-window full-volume prediction with overlap averaging."""

from dataclasses import dataclass
from itertools import product

import numpy as np

from .losses import softmax_array
from .volumes import LabelVolume, ProbVolume, Volume


@dataclass(frozen=True)
class SlidingWindowSpec:
    patch_size: tuple
    stride: tuple

    def __post_init__(self):
        ps = tuple(int(p) for p in self.patch_size)
        st = tuple(int(s) for s in self.stride)
        if len(ps) != 3 or len(st) != 3:
            raise ValueError("patch_size and stride must be 3-tuples")
        for p, s in zip(ps, st):
            if not 1 <= s <= p:
                raise ValueError(f"need 1 <= stride <= patch, got patch {ps} stride {st}")
        object.__setattr__(self, "patch_size", ps)
        object.__setattr__(self, "stride", st)


def _axis_origins(extent, patch, stride):
    if patch > extent:
        raise ValueError(f"patch {patch} larger than volume extent {extent}")
    origins = list(range(0, extent - patch + 1, stride))
    if origins[-1] + patch < extent:
        origins.append(extent - patch)  # clamped tail window
    return origins


def window_origins(volume_shape, spec: SlidingWindowSpec):
    """Ordered grid of window origins covering every voxel at least once."""
    per_axis = [
        _axis_origins(int(e), p, s)
        for e, p, s in zip(volume_shape, spec.patch_size, spec.stride)
    ]
    return [tuple(o) for o in product(*per_axis)]


def sliding_window_predict(model_forward, volume: Volume,
                           spec: SlidingWindowSpec) -> ProbVolume:
    """Tile the volume, softmax each window's logits, and average the
    probabilities over overlapping windows.

    ``model_forward`` maps a (d,h,w) patch array to (K,d,h,w) logits.
    """
    vox = volume.voxels
    origins = window_origins(vox.shape, spec)
    acc = None
    count = np.zeros(vox.shape, dtype=np.float64)
    for origin in origins:
        sl = tuple(slice(o, o + p) for o, p in zip(origin, spec.patch_size))
        probs = softmax_array(np.asarray(model_forward(vox[sl])))
        if acc is None:
            acc = np.zeros((probs.shape[0],) + vox.shape, dtype=np.float64)
        acc[(slice(None),) + sl] += probs
        count[sl] += 1.0
    return ProbVolume(acc / count[None])


def ensemble_predict(forward_a, forward_b, volume: Volume,
                     spec: SlidingWindowSpec, select="a") -> ProbVolume:
    """Single-model map by default; 'ensemble' averages both models."""
    if select == "a":
        return sliding_window_predict(forward_a, volume, spec)
    if select == "b":
        return sliding_window_predict(forward_b, volume, spec)
    if select == "ensemble":
        pa = sliding_window_predict(forward_a, volume, spec)
        pb = sliding_window_predict(forward_b, volume, spec)
        return ProbVolume((pa.values + pb.values) / 2.0)
    raise ValueError(f"unknown model selection {select!r}")


def labels_from_probs(p: ProbVolume) -> LabelVolume:
    """Per-voxel argmax segmentation (ties to the lowest class index)."""
    return LabelVolume(np.argmax(p.values, axis=0).astype(np.uint8),
                       num_classes=p.num_classes)
