"""Volume file format (VOL1), synthetic dataset generation, splitting,
patch extraction and batch composition.

VOL1 layout: 4 ASCII magic bytes "VOL1", one UTF-8 JSON header line ending
in 0x0A with {"shape":[D,H,W],"dtype":"f32"|"u8","kind":"image"|"label",
"num_classes":K?}, then the raw little-endian payload, row-major, W fastest.
"""

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volumes import LabelVolume, Sample, Volume

MAGIC = b"VOL1"
MAX_VOXELS = 2**31  # refuse absurd headers before allocating

# synthetic-data geometry: ellipsoid radii relative to the shortest axis,
# chosen so 1-3 blobs land in the 2%-20% foreground band for >=16^3 volumes
BLOB_RADIUS_REL = (0.17, 0.28)
FG_FRACTION_RANGE = (0.02, 0.20)
BLOB_SHARPNESS = 8.0
FG_THRESHOLD = 0.5


@dataclass(frozen=True)
class DatasetSplit:
    """Labeled/unlabeled partition of a sample pool."""

    labeled: list
    unlabeled: list
    seed: int

    def __post_init__(self):
        lab_ids = {s.id for s in self.labeled}
        unl_ids = {s.id for s in self.unlabeled}
        if lab_ids & unl_ids:
            raise ValueError(f"labeled/unlabeled ids overlap: {lab_ids & unl_ids}")
        for s in self.labeled:
            if s.label is None:
                raise ValueError(f"labeled sample {s.id} has no label")


@dataclass(frozen=True)
class Batch:
    """Half labeled patches with targets, half unlabeled patches."""

    labeled_images: list
    labeled_targets: list
    unlabeled_images: list
    patch_size: tuple

    def __post_init__(self):
        if len(self.labeled_images) != len(self.unlabeled_images):
            raise ValueError("labeled/unlabeled counts must match")
        if len(self.labeled_images) != len(self.labeled_targets):
            raise ValueError("every labeled image needs a target")


def write_volume(v, path) -> None:
    """Write a Volume or LabelVolume in VOL1 format (bit-exact roundtrip)."""
    if isinstance(v, Volume):
        header = {"shape": list(v.shape), "dtype": "f32", "kind": "image"}
        payload = v.voxels.astype("<f4").tobytes()
    elif isinstance(v, LabelVolume):
        header = {
            "shape": list(v.shape),
            "dtype": "u8",
            "kind": "label",
            "num_classes": v.num_classes,
        }
        payload = v.classes.astype("u1").tobytes()
    else:
        raise TypeError(f"cannot write {type(v).__name__} as VOL1")
    if int(np.prod(header["shape"])) > MAX_VOXELS:
        raise ValueError(f"shape {header['shape']} overflows the format limit")
    blob = MAGIC + json.dumps(header, separators=(",", ":")).encode() + b"\n" + payload
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def read_volume(path):
    """Read a VOL1 file back into a Volume or LabelVolume."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ValueError(f"bad magic {magic!r} in {path}")
        header_line = f.readline()
        if not header_line.endswith(b"\n"):
            raise ValueError(f"unterminated header in {path}")
        header = json.loads(header_line.decode())
        shape = tuple(int(s) for s in header["shape"])
        if len(shape) != 3 or any(s <= 0 for s in shape):
            raise ValueError(f"bad shape {shape} in {path}")
        count = int(np.prod(shape))
        if count > MAX_VOXELS:
            raise ValueError(f"shape {shape} overflows the format limit")
        dtype = header["dtype"]
        if dtype == "f32":
            np_dtype, itemsize = np.dtype("<f4"), 4
        elif dtype == "u8":
            np_dtype, itemsize = np.dtype("u1"), 1
        else:
            raise ValueError(f"unknown dtype {dtype!r} in {path}")
        payload = f.read()
    if len(payload) != count * itemsize:
        raise ValueError(
            f"payload length {len(payload)} != expected {count * itemsize} in {path}"
        )
    arr = np.frombuffer(payload, dtype=np_dtype).reshape(shape)
    if header["kind"] == "image":
        return Volume(arr)
    if header["kind"] == "label":
        return LabelVolume(arr, num_classes=int(header.get("num_classes", 2)))
    raise ValueError(f"unknown kind {header['kind']!r} in {path}")


def _smooth_noise_field(shape, rng, grid=4):
    """Low-frequency texture: random coarse grid upsampled smoothly."""
    coarse = rng.standard_normal((grid, grid, grid))
    zoom = [s / grid for s in shape]
    return ndimage.zoom(coarse, zoom, order=3, mode="nearest", grid_mode=True)


def _blob_field(shape, rng):
    """Smooth foreground intensity field and its exact mask.

    The field is max over 1-3 ellipsoids of sigmoid(k*(1 - d^2)); the mask is
    d^2 <= 1, which coincides exactly with field >= 0.5.
    """
    d, h, w = shape
    rmin = BLOB_RADIUS_REL[0] * min(shape)
    rmax = BLOB_RADIUS_REL[1] * min(shape)
    n_blobs = int(rng.integers(1, 4))
    zz, yy, xx = np.meshgrid(
        np.arange(d, dtype=np.float64),
        np.arange(h, dtype=np.float64),
        np.arange(w, dtype=np.float64),
        indexing="ij",
    )
    field = np.zeros(shape, dtype=np.float64)
    mask = np.zeros(shape, dtype=bool)
    for _ in range(n_blobs):
        radii = rng.uniform(rmin, rmax, size=3)
        center = np.array([rng.uniform(r, s - 1 - r) for r, s in zip(radii, shape)])
        d2 = (
            ((zz - center[0]) / radii[0]) ** 2
            + ((yy - center[1]) / radii[1]) ** 2
            + ((xx - center[2]) / radii[2]) ** 2
        )
        field = np.maximum(field, 1.0 / (1.0 + np.exp(-BLOB_SHARPNESS * (1.0 - d2))))
        mask |= d2 <= 1.0
    return field, mask


def generate_synthetic_dataset(seed, n_volumes, shape, difficulty):
    """Deterministic synthetic volumes: ellipsoid blobs over textured
    background, with noise and per-volume intensity drift scaled by
    ``difficulty``. Returns a list of fully labeled samples.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or any(s < 16 for s in shape):
        raise ValueError(f"shape must be >= 16 per axis, got {shape}")
    if n_volumes < 2:
        raise ValueError(f"need n_volumes >= 2, got {n_volumes}")
    if difficulty < 0:
        raise ValueError("difficulty must be >= 0")

    samples = []
    children = np.random.SeedSequence(seed).spawn(n_volumes)
    for i, ss in enumerate(children):
        rng = np.random.default_rng(ss)
        for _attempt in range(50):
            field, mask = _blob_field(shape, rng)
            frac = mask.mean()
            if FG_FRACTION_RANGE[0] <= frac <= FG_FRACTION_RANGE[1]:
                break
        else:
            raise RuntimeError(f"could not realize foreground fraction for sample {i}")
        img = field
        if difficulty > 0:
            texture = _smooth_noise_field(shape, rng)
            gain = 1.0 - difficulty * rng.uniform(0.0, 0.5)
            offset = difficulty * rng.uniform(-0.3, 0.3)
            noise = rng.standard_normal(shape)
            img = gain * field + difficulty * (0.3 * texture + 0.25 * noise) + offset
        samples.append(
            Sample(
                image=Volume(img.astype(np.float32)),
                label=LabelVolume(mask.astype(np.uint8), num_classes=2),
                id=f"s{i:03d}",
            )
        )
    return samples


def split_dataset(samples, labeled_ratio, seed) -> DatasetSplit:
    """Deterministic shuffle then split; unlabeled samples lose their labels."""
    if not 0 < labeled_ratio < 1:
        raise ValueError(f"labeled_ratio must be in (0,1), got {labeled_ratio}")
    n_labeled = int(len(samples) * labeled_ratio)
    if n_labeled == 0:
        raise ValueError(
            f"ratio {labeled_ratio} yields zero labeled samples out of {len(samples)}"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    labeled = [samples[i] for i in order[:n_labeled]]
    unlabeled = [
        Sample(image=samples[i].image, label=None, id=samples[i].id)
        for i in order[n_labeled:]
    ]
    return DatasetSplit(labeled=labeled, unlabeled=unlabeled, seed=seed)


def extract_patch(sample: Sample, origin, patch_size) -> Sample:
    """Crop image (and label, when present) at ``origin`` with ``patch_size``."""
    origin = tuple(int(o) for o in origin)
    patch_size = tuple(int(p) for p in patch_size)
    shape = sample.image.shape
    for o, p, s in zip(origin, patch_size, shape):
        if o < 0 or o + p > s:
            raise ValueError(f"patch {origin}+{patch_size} out of bounds for {shape}")
    sl = tuple(slice(o, o + p) for o, p in zip(origin, patch_size))
    label = None
    if sample.label is not None:
        label = LabelVolume(sample.label.classes[sl], num_classes=sample.label.num_classes)
    return Sample(
        image=Volume(sample.image.voxels[sl]),
        label=label,
        id=f"{sample.id}@{origin[0]},{origin[1]},{origin[2]}",
    )


def _random_origin(shape, patch_size, rng):
    return tuple(int(rng.integers(0, s - p + 1)) for s, p in zip(shape, patch_size))


def _draw_patch(sample, patch_size, rng, force_foreground):
    # bounded rejection; falls back to the last draw if no foreground found
    for _ in range(20):
        origin = _random_origin(sample.image.shape, patch_size, rng)
        patch = extract_patch(sample, origin, patch_size)
        if not force_foreground or patch.label is None or patch.label.classes.any():
            return patch
    return patch


def make_batch(split: DatasetSplit, batch_size, patch_size, rng,
               patches_per_volume=1) -> Batch:
    """Compose a batch of batch_size/2 labeled + batch_size/2 unlabeled
    patches, sampling volumes with replacement. Half of the labeled draws
    are forced to contain foreground. ``patches_per_volume`` patches are
    taken from each drawn volume before moving to the next.
    """
    if batch_size % 2 != 0 or batch_size <= 0:
        raise ValueError(f"batch_size must be positive and even, got {batch_size}")
    if not split.labeled:
        raise ValueError("labeled pool is empty")
    if not split.unlabeled:
        raise ValueError("unlabeled pool is empty")
    patch_size = tuple(int(p) for p in patch_size)
    n = batch_size // 2
    ppv = max(1, int(patches_per_volume))

    def draw_many(pool, count, force_fg_half):
        out = []
        while len(out) < count:
            s = pool[int(rng.integers(0, len(pool)))]
            for _ in range(min(ppv, count - len(out))):
                force = force_fg_half and bool(rng.integers(0, 2))
                out.append(_draw_patch(s, patch_size, rng, force))
        return out

    labeled = draw_many(split.labeled, n, True)
    unlabeled = draw_many(split.unlabeled, n, False)
    return Batch(
        labeled_images=[p.image for p in labeled],
        labeled_targets=[p.label for p in labeled],
        unlabeled_images=[p.image for p in unlabeled],
        patch_size=patch_size,
    )


def label_path_for(image_path) -> Path:
    """Label file convention: s000.vol1 -> s000.label.vol1."""
    p = Path(image_path)
    return p.with_suffix(".label.vol1")


def write_dataset(split: DatasetSplit, out_dir) -> Path:
    """Write all volumes plus a JSON manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"labeled": [], "unlabeled": [], "seed": split.seed}
    for s in split.labeled:
        img_path = out_dir / f"{s.id}.vol1"
        write_volume(s.image, img_path)
        write_volume(s.label, label_path_for(img_path))
        manifest["labeled"].append(img_path.name)
    for s in split.unlabeled:
        img_path = out_dir / f"{s.id}.vol1"
        write_volume(s.image, img_path)
        manifest["unlabeled"].append(img_path.name)
    manifest_path = out_dir / "manifest.json"
    tmp = str(manifest_path) + ".tmp"
    with open(tmp, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, manifest_path)
    return manifest_path


def read_dataset(manifest_path) -> DatasetSplit:
    """Load a dataset split from its manifest (paths relative to it)."""
    manifest_path = Path(manifest_path)
    with open(manifest_path) as f:
        manifest = json.load(f)
    base = manifest_path.parent
    labeled, unlabeled = [], []
    for rel in manifest["labeled"]:
        img = read_volume(base / rel)
        lab = read_volume(label_path_for(base / rel))
        labeled.append(Sample(image=img, label=lab, id=Path(rel).stem))
    for rel in manifest["unlabeled"]:
        img = read_volume(base / rel)
        unlabeled.append(Sample(image=img, label=None, id=Path(rel).stem))
    return DatasetSplit(labeled=labeled, unlabeled=unlabeled, seed=int(manifest["seed"]))
