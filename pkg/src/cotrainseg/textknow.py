"""Offline text-knowledge pipeline: load task descriptions, embed them with
a pluggable provider, mean-pool, and project to the bottleneck width.

Embeddings are computed once at startup; the resulting pooled vector is
immutable and shared read-only. Only the projection MLP is trainable.
"""

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

EMB_MAGIC = b"EMB1"
PROJECTION_HIDDEN = 256


@dataclass(frozen=True)
class DescriptionSet:
    """Task descriptions: optional prompt lines plus one response per block."""

    prompts: tuple
    responses: tuple

    def __post_init__(self):
        if not self.responses:
            raise ValueError("DescriptionSet needs at least one response")
        if any(not r.strip() for r in self.responses):
            raise ValueError("empty response in DescriptionSet")


@dataclass(frozen=True)
class EmbeddingMatrix:
    """One embedding row per response."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2 or v.shape[0] == 0:
            raise ValueError(f"embedding matrix must be 2D and nonempty, got {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("embedding matrix contains non-finite values")
        v = np.ascontiguousarray(v)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class TextFeature:
    """Projected text vector matched to the bottleneck channel count."""

    z: np.ndarray
    provider_id: str
    projection_version: int = 0

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float32)
        if z.ndim != 1 or not np.isfinite(z).all():
            raise ValueError("z must be a finite 1D vector")
        z = np.ascontiguousarray(z)
        z.flags.writeable = False
        object.__setattr__(self, "z", z)


def load_descriptions(path) -> DescriptionSet:
    """Parse a UTF-8 descriptions file: leading '#' lines are prompt notes,
    responses are blank-line-separated blocks (whitespace-only blocks are
    dropped, inner text kept verbatim)."""
    with open(path, encoding="utf-8") as f:
        lines = f.read().split("\n")
    prompts = []
    body_start = 0
    for i, line in enumerate(lines):
        if line.startswith("#"):
            prompts.append(line.lstrip("#").strip())
            body_start = i + 1
        elif line.strip():
            break
        else:
            body_start = i + 1
    blocks, current = [], []
    for line in lines[body_start:]:
        if line.strip():
            current.append(line)
        elif current:
            blocks.append("\n".join(current))
            current = []
    if current:
        blocks.append("\n".join(current))
    if not blocks:
        raise ValueError(f"no responses found in {path}")
    return DescriptionSet(prompts=tuple(prompts), responses=tuple(blocks))


class HashEmbeddingProvider:
    """Deterministic stand-in encoder: each token hashes to a fixed Gaussian
    vector, token vectors are mean-pooled per response and unit-normalized.
    No model download, stable across platforms."""

    def __init__(self, dim=768):
        self.dim = int(dim)
        self.provider_id = f"hash/{self.dim}"

    def _token_vector(self, token: str) -> np.ndarray:
        digest = hashlib.sha256(token.encode("utf-8")).digest()
        seed = int.from_bytes(digest[:8], "little")
        rng = np.random.default_rng(seed)
        return rng.standard_normal(self.dim)

    def embed(self, responses) -> np.ndarray:
        rows = []
        for text in responses:
            tokens = [t for t in "".join(
                c.lower() if c.isalnum() else " " for c in text
            ).split()] or [""]
            vec = np.mean([self._token_vector(t) for t in tokens], axis=0)
            norm = np.linalg.norm(vec)
            if norm > 0:
                vec = vec / norm
            rows.append(vec)
        return np.asarray(rows, dtype=np.float32)


class FileEmbeddingProvider:
    """Reads precomputed per-response embeddings from an EMB1 file, e.g.
    produced offline by a pretrained text encoder."""

    def __init__(self, path):
        self.path = str(path)
        self.matrix = read_embeddings(path)
        self.provider_id = f"file/{os.path.basename(self.path)}"

    def embed(self, responses) -> np.ndarray:
        if len(responses) != self.matrix.rows:
            raise ValueError(
                f"{self.path} has {self.matrix.rows} rows for {len(responses)} responses"
            )
        return self.matrix.values


def embed_descriptions(provider, ds: DescriptionSet) -> EmbeddingMatrix:
    """Embed every response; validates row count and uniform dimensionality."""
    raw = provider.embed(ds.responses)
    try:
        raw = np.asarray(raw, dtype=np.float32)
    except (ValueError, TypeError) as e:
        raise ValueError(f"provider returned rows of mixed dimension: {e}") from e
    if raw.ndim != 2:
        raise ValueError(f"provider returned rows of mixed dimension: shape {raw.shape}")
    if raw.shape[0] != len(ds.responses):
        raise ValueError(f"provider returned {raw.shape[0]} rows for {len(ds.responses)} responses")
    return EmbeddingMatrix(raw)


def pool_embeddings(m: EmbeddingMatrix) -> np.ndarray:
    """Arithmetic mean across responses."""
    return m.values.astype(np.float64).mean(axis=0).astype(np.float32)


class TextProjector(nn.Module):
    """Two-layer perceptron mapping the pooled embedding to the bottleneck
    channel count (Linear -> ReLU -> Linear); trained jointly with the
    segmentation networks."""

    def __init__(self, in_dim, out_dim, hidden=PROJECTION_HIDDEN, dtype=torch.float32):
        super().__init__()
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.fc1 = nn.Linear(self.in_dim, hidden, dtype=dtype)
        self.fc2 = nn.Linear(hidden, self.out_dim, dtype=dtype)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.relu(self.fc1(pooled)))


def project_embedding(projector: TextProjector, pooled, provider_id="",
                      projection_version=0) -> TextFeature:
    """Run the projection MLP on a pooled embedding vector."""
    pooled = np.asarray(pooled)
    if pooled.ndim != 1 or pooled.shape[0] != projector.in_dim:
        raise ValueError(f"pooled shape {pooled.shape} != projector input {projector.in_dim}")
    p = next(projector.parameters())
    with torch.no_grad():
        z = projector(torch.as_tensor(pooled, dtype=p.dtype))
    return TextFeature(z=z.numpy().astype(np.float32), provider_id=provider_id,
                       projection_version=projection_version)


def write_embeddings(m: EmbeddingMatrix, path) -> None:
    """Write an EMB1 file: magic, {"rows":N,"dim":D} header line, f32 payload."""
    header = {"rows": m.rows, "dim": m.dim}
    blob = (EMB_MAGIC + json.dumps(header, separators=(",", ":")).encode() + b"\n"
            + m.values.astype("<f4").tobytes())
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def read_embeddings(path) -> EmbeddingMatrix:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != EMB_MAGIC:
            raise ValueError(f"bad magic {magic!r} in {path}")
        header = json.loads(f.readline().decode())
        rows, dim = int(header["rows"]), int(header["dim"])
        payload = f.read()
    if len(payload) != rows * dim * 4:
        raise ValueError(f"payload length {len(payload)} != {rows}x{dim} f32 in {path}")
    return EmbeddingMatrix(np.frombuffer(payload, dtype="<f4").reshape(rows, dim))


def get_provider(name, dim=768, path=None):
    """Provider factory used by the CLI: 'test' or 'file'."""
    if name == "test":
        return HashEmbeddingProvider(dim=dim)
    if name == "file":
        if path is None:
            raise ValueError("file provider needs an embeddings path")
        return FileEmbeddingProvider(path)
    raise ValueError(f"unknown provider {name!r}")
