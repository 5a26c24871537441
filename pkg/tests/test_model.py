import numpy as np
import pytest
import torch

from oracles import relative_grad_error

from cotrainseg.model import (FusionConfig, SegNet3D, init_parameters,
                              inject_text, parameter_count)


def make_model(**kw):
    kw.setdefault("num_classes", 2)
    kw.setdefault("base_channels", 8)
    kw.setdefault("levels", 3)
    m = SegNet3D(**kw)
    init_parameters(m, np.random.default_rng(0))
    return m


def test_bottleneck_shape_contract():
    m = make_model()
    x = torch.zeros(1, 32, 32, 32)
    bneck, skips = m.encode(x)
    assert tuple(bneck.shape) == (1, 32, 8, 8, 8)
    assert [tuple(s.shape[2:]) for s in skips] == [(32, 32, 32), (16, 16, 16)]


def test_indivisible_spatial_dims_error():
    m = make_model()
    with pytest.raises(ValueError, match="divisible"):
        m.encode(torch.zeros(1, 20, 20, 20))


def test_zero_weight_encoder_gives_zero_bottleneck():
    m = make_model(linear_mode=True)
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
    bneck, _ = m.encode(torch.randn(1, 16, 16, 16))
    assert torch.all(bneck == 0)


def test_output_shape_matches_input():
    m = make_model()
    for shape in [(16, 16, 16), (32, 32, 32), (16, 32, 16)]:
        y = m(torch.randn(2, *shape))
        assert tuple(y.shape) == (2, 2, *shape)


def test_zero_params_zero_logits():
    m = make_model(linear_mode=True)
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
    y = m(torch.randn(1, 16, 16, 16))
    assert torch.all(y == 0)


def test_logits_finite_for_small_random_weights():
    torch.manual_seed(0)
    m = make_model()
    with torch.no_grad():
        for p in m.parameters():
            p.uniform_(-0.1, 0.1)
    y = m(torch.randn(2, 16, 16, 16))
    assert torch.isfinite(y).all()


def test_inject_identities():
    bneck = torch.randn(2, 32, 4, 4, 4)
    z = torch.randn(32)
    assert inject_text(bneck, z, 0.0) is bneck
    out = inject_text(bneck, torch.zeros(32), 1.0)
    assert torch.equal(out, bneck)


def test_inject_broadcast_value():
    bneck = torch.zeros(1, 32, 4, 4, 4)
    fused = inject_text(bneck, torch.ones(32), 0.1)
    assert torch.allclose(fused, torch.full_like(bneck, 0.1))


def test_inject_channel_mismatch():
    with pytest.raises(ValueError, match="channels"):
        inject_text(torch.zeros(1, 32, 4, 4, 4), torch.ones(16), 1.0)


def test_beta_zero_bit_identical_to_text_free():
    m = make_model()
    x = torch.randn(1, 16, 16, 16)
    z = torch.randn(32)
    with torch.no_grad():
        y_none = m(x, None, 0.0)
        y_zero_beta = m(x, z, 0.0)
    assert torch.equal(y_none, y_zero_beta)


def test_doubled_z_halved_beta_invariance():
    m = make_model()
    x = torch.randn(1, 16, 16, 16)
    z = torch.randn(32)
    with torch.no_grad():
        a = m(x, z, 1.0)
        b = m(x, 2.0 * z, 0.5)
    assert torch.allclose(a, b, atol=1e-6)


def test_linear_mode_injection_independent_of_input():
    m = make_model(linear_mode=True, base_channels=4)
    z = torch.randn(16)
    beta = 0.7
    with torch.no_grad():
        x1, x2 = torch.randn(1, 16, 16, 16), torch.randn(1, 16, 16, 16)
        d1 = m(x1, z, beta) - m(x1, None, 0.0)
        d2 = m(x2, z, beta) - m(x2, None, 0.0)
    assert torch.allclose(d1, d2, atol=1e-4)


def test_fusion_config_validation():
    FusionConfig(beta_text=0.0)
    with pytest.raises(ValueError):
        FusionConfig(beta_text=-0.1)


def test_full_model_gradient_matches_finite_differences():
    # small double-precision net so every weight can be perturbed
    torch.manual_seed(0)
    m = SegNet3D(num_classes=2, base_channels=2, levels=2, dtype=torch.float64)
    init_parameters(m, np.random.default_rng(12))
    x = torch.as_tensor(np.random.default_rng(3).normal(size=(1, 8, 8, 8)))
    z = torch.as_tensor(np.random.default_rng(4).normal(size=(4,)))
    target = torch.as_tensor(
        np.random.default_rng(5).integers(0, 2, size=(1, 8, 8, 8)))

    def loss_fn():
        logits = m(x, z, 0.5)
        return torch.nn.functional.cross_entropy(logits, target)

    loss = loss_fn()
    loss.backward()

    # h small enough that no ReLU kink sits inside the probe interval for
    # this seed; larger steps cross kinks and poison the FD estimate
    h = 1e-5
    for name, p in m.named_parameters():
        analytic = p.grad.detach().numpy().copy()
        fd = np.zeros_like(analytic)
        flat_p = p.data.view(-1)
        flat_fd = fd.reshape(-1)
        with torch.no_grad():
            for i in range(flat_p.numel()):
                orig = flat_p[i].item()
                flat_p[i] = orig + h
                fp = loss_fn().item()
                flat_p[i] = orig - h
                fm = loss_fn().item()
                flat_p[i] = orig
                flat_fd[i] = (fp - fm) / (2 * h)
        # biases feeding GroupNorm have ~zero true gradient (mean
        # subtraction cancels them); the atol floor covers that case
        diff = np.linalg.norm(fd - analytic)
        bound = 1e-4 * max(np.linalg.norm(fd), np.linalg.norm(analytic)) + 1e-8
        assert diff <= bound, f"{name}: grad diff {diff:.2e} > {bound:.2e}"


def test_parameter_count_positive():
    assert parameter_count(make_model()) > 10_000
