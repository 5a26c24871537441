import numpy as np
import pytest
import torch

from cotrainseg.experiment import default_descriptions_path
from cotrainseg.textknow import (DescriptionSet, EmbeddingMatrix,
                                 FileEmbeddingProvider, HashEmbeddingProvider,
                                 TextFeature, TextProjector,
                                 embed_descriptions, load_descriptions,
                                 pool_embeddings, project_embedding,
                                 read_embeddings, write_embeddings)


def test_load_shipped_descriptions_has_15_responses():
    ds = load_descriptions(default_descriptions_path())
    assert len(ds.responses) == 15
    assert all(r.strip() for r in ds.responses)


def test_load_trailing_whitespace_block_ignored(tmp_path):
    p = tmp_path / "d.txt"
    p.write_text("first block\n\nsecond block\nwith two lines\n\n   \n\n")
    ds = load_descriptions(p)
    assert ds.responses == ("first block", "second block\nwith two lines")


def test_load_empty_file_errors(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("\n\n  \n")
    with pytest.raises(ValueError):
        load_descriptions(p)


def test_hash_provider_deterministic():
    prov = HashEmbeddingProvider(dim=64)
    a = prov.embed(["one small blob", "two bright blobs"])
    b = prov.embed(["one small blob", "two bright blobs"])
    assert np.array_equal(a, b)
    assert a.shape == (2, 64)
    # unit norm per row
    assert np.allclose(np.linalg.norm(a, axis=1), 1.0, atol=1e-5)


def test_file_provider_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    m = EmbeddingMatrix(rng.normal(size=(15, 768)).astype(np.float32))
    write_embeddings(m, tmp_path / "e.emb1")
    prov = FileEmbeddingProvider(tmp_path / "e.emb1")
    ds = DescriptionSet(prompts=(), responses=tuple(f"r{i}" for i in range(15)))
    out = embed_descriptions(prov, ds)
    assert out.rows == 15 and out.dim == 768
    assert np.array_equal(out.values, m.values)


def test_file_provider_row_mismatch(tmp_path):
    m = EmbeddingMatrix(np.zeros((3, 8), dtype=np.float32))
    write_embeddings(m, tmp_path / "e.emb1")
    prov = FileEmbeddingProvider(tmp_path / "e.emb1")
    ds = DescriptionSet(prompts=(), responses=("a", "b"))
    with pytest.raises(ValueError, match="rows"):
        embed_descriptions(prov, ds)


def test_mixed_dims_rejected():
    class Ragged:
        provider_id = "ragged"

        def embed(self, responses):
            return [np.zeros(4), np.zeros(5)]

    ds = DescriptionSet(prompts=(), responses=("a", "b"))
    with pytest.raises(ValueError, match="mixed dimension"):
        embed_descriptions(Ragged(), ds)


def test_pooling_single_row_identity():
    m = EmbeddingMatrix(np.arange(6, dtype=np.float32).reshape(1, 6))
    assert np.allclose(pool_embeddings(m), m.values[0])


def test_pooling_opposite_rows_cancel():
    v = np.random.default_rng(1).normal(size=8).astype(np.float32)
    m = EmbeddingMatrix(np.stack([v, -v]))
    assert np.allclose(pool_embeddings(m), 0.0, atol=1e-7)


def test_pooling_matches_bruteforce():
    rng = np.random.default_rng(2)
    vals = rng.normal(size=(15, 32)).astype(np.float32)
    pooled = pool_embeddings(EmbeddingMatrix(vals))
    manual = np.zeros(32, dtype=np.float64)
    for row in vals:
        manual += row
    manual /= 15
    assert np.allclose(pooled, manual, atol=1e-6)


def test_projection_zero_weights():
    proj = TextProjector(16, 8)
    with torch.no_grad():
        for p in proj.parameters():
            p.zero_()
    tf = project_embedding(proj, np.ones(16, dtype=np.float32))
    assert np.array_equal(tf.z, np.zeros(8, dtype=np.float32))


def test_projection_identity_like_passthrough():
    # identity-shaped weights with zero biases pass non-negative inputs through
    proj = TextProjector(8, 8, hidden=8)
    with torch.no_grad():
        proj.fc1.weight.copy_(torch.eye(8))
        proj.fc1.bias.zero_()
        proj.fc2.weight.copy_(torch.eye(8))
        proj.fc2.bias.zero_()
    x = np.abs(np.random.default_rng(3).normal(size=8)).astype(np.float32)
    tf = project_embedding(proj, x)
    assert np.allclose(tf.z, x, atol=1e-6)


def test_projection_matches_dense_reference():
    rng = np.random.default_rng(4)
    proj = TextProjector(12, 6, hidden=10)
    w1 = rng.normal(size=(10, 12)).astype(np.float32)
    b1 = rng.normal(size=10).astype(np.float32)
    w2 = rng.normal(size=(6, 10)).astype(np.float32)
    b2 = rng.normal(size=6).astype(np.float32)
    with torch.no_grad():
        proj.fc1.weight.copy_(torch.from_numpy(w1))
        proj.fc1.bias.copy_(torch.from_numpy(b1))
        proj.fc2.weight.copy_(torch.from_numpy(w2))
        proj.fc2.bias.copy_(torch.from_numpy(b2))
    x = rng.normal(size=12).astype(np.float32)
    hidden = np.maximum(0.0, w1 @ x + b1)
    expected = w2 @ hidden + b2
    tf = project_embedding(proj, x)
    assert np.allclose(tf.z, expected, atol=1e-5)


def test_pipeline_deterministic(tmp_path):
    ds = load_descriptions(default_descriptions_path())
    prov = HashEmbeddingProvider(dim=128)
    z1 = pool_embeddings(embed_descriptions(prov, ds))
    z2 = pool_embeddings(embed_descriptions(prov, ds))
    assert np.array_equal(z1, z2)


def test_text_feature_invariants():
    with pytest.raises(ValueError):
        TextFeature(z=np.array([[1.0, 2.0]]), provider_id="x")
    with pytest.raises(ValueError):
        TextFeature(z=np.array([np.inf]), provider_id="x")


def test_emb1_bad_magic(tmp_path):
    p = tmp_path / "bad.emb1"
    p.write_bytes(b"EMBX" + b'{"rows":1,"dim":1}\n' + b"\x00" * 4)
    with pytest.raises(ValueError, match="magic"):
        read_embeddings(p)
