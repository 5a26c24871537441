"""Checkpoint container: magic "CKPT", one JSON header line (architecture,
iteration, rng state, blob index), then named little-endian weight blobs."""

import json
import os

import numpy as np
import torch

MAGIC = b"CKPT"

_DTYPES = {"f32": "<f4", "f64": "<f8"}
_TORCH_TO_TAG = {torch.float32: "f32", torch.float64: "f64"}


def save_checkpoint(path, modules: dict, momenta: dict, extra_arrays: dict,
                    meta: dict) -> None:
    """Write modules' parameters, momentum buffers and extra named arrays.

    ``modules`` and ``momenta`` map a group name to {param_name: tensor};
    ``meta`` must be JSON-serializable and is stored in the header verbatim.
    """
    blobs = {}
    for group, mod in modules.items():
        for name, p in mod.state_dict().items():
            blobs[f"{group}/{name}"] = p.detach().cpu()
    for group, bufs in momenta.items():
        for name, v in bufs.items():
            blobs[f"{group}/{name}"] = v.detach().cpu()
    for name, arr in extra_arrays.items():
        blobs[name] = torch.as_tensor(np.asarray(arr))

    index = []
    chunks = []
    offset = 0
    for name in sorted(blobs):
        t = blobs[name]
        tag = _TORCH_TO_TAG.get(t.dtype)
        if tag is None:
            raise TypeError(f"unsupported checkpoint dtype {t.dtype} for {name}")
        raw = t.numpy().astype(_DTYPES[tag]).tobytes()
        index.append({"name": name, "dtype": tag, "shape": list(t.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = dict(meta)
    header["blobs"] = index
    blob = MAGIC + json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n" + payload
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Return (meta, {blob_name: numpy array})."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ValueError(f"bad magic {magic!r} in {path}")
        header = json.loads(f.readline().decode())
        payload = f.read()
    arrays = {}
    for entry in header.pop("blobs"):
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(payload):
            raise ValueError(f"truncated checkpoint payload in {path}")
        arr = np.frombuffer(payload[start:start + n], dtype=_DTYPES[entry["dtype"]])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return header, arrays


def load_group_tensors(arrays: dict, group: str) -> dict:
    prefix = group + "/"
    return {name[len(prefix):]: torch.as_tensor(arr)
            for name, arr in arrays.items() if name.startswith(prefix)}
