"""Encoder-decoder volumetric segmentation network with channelwise text
injection at the bottleneck.

Desk-scale topology: L resolution levels, two conv blocks per level,
strided-conv downsampling, transposed-conv upsampling (trilinear init) with
skip concatenation, group normalization so tiny batches work. The text
vector z is added channelwise to the bottleneck scaled by beta_text; the
decoder output is K logit channels at input resolution.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn


@dataclass(frozen=True)
class FusionConfig:
    """Balance weight between image features and the injected text vector."""

    beta_text: float = 1.0

    def __post_init__(self):
        if self.beta_text < 0:
            raise ValueError(f"beta_text must be >= 0, got {self.beta_text}")


def _norm(channels, linear_mode):
    if linear_mode:
        return nn.Identity()
    groups = 4
    while channels % groups:
        groups -= 1
    return nn.GroupNorm(groups, channels)


def _act(linear_mode):
    return nn.Identity() if linear_mode else nn.ReLU(inplace=True)


def _block(cin, cout, linear_mode, stride=1):
    return nn.Sequential(
        nn.Conv3d(cin, cout, 3, stride=stride, padding=1),
        _norm(cout, linear_mode),
        _act(linear_mode),
    )


class SegNet3D(nn.Module):
    """Tiny 3D U-Net-style backbone exposing encode / inject / decode."""

    def __init__(self, num_classes=2, base_channels=8, levels=3,
                 in_channels=1, linear_mode=False, dtype=torch.float32):
        super().__init__()
        if levels < 2:
            raise ValueError("need at least 2 levels")
        self.num_classes = int(num_classes)
        self.base_channels = int(base_channels)
        self.levels = int(levels)
        self.in_channels = int(in_channels)
        self.linear_mode = bool(linear_mode)
        chans = [base_channels * 2**i for i in range(levels)]
        self.bottleneck_channels = chans[-1]

        self.enc_blocks = nn.ModuleList()
        self.down = nn.ModuleList()
        for i, c in enumerate(chans):
            cin = in_channels if i == 0 else c
            self.enc_blocks.append(nn.Sequential(
                _block(cin, c, linear_mode), _block(c, c, linear_mode)))
            if i + 1 < levels:
                self.down.append(nn.Conv3d(c, chans[i + 1], 3, stride=2, padding=1))

        self.up = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        for i in range(levels - 1, 0, -1):
            self.up.append(nn.ConvTranspose3d(chans[i], chans[i - 1], 4, stride=2, padding=1))
            self.dec_blocks.append(nn.Sequential(
                _block(2 * chans[i - 1], chans[i - 1], linear_mode),
                _block(chans[i - 1], chans[i - 1], linear_mode)))
        self.head = nn.Conv3d(chans[0], num_classes, 1)
        if dtype is not None:
            self.to(dtype)

    def _check_spatial(self, x):
        # downsampling halves L-1 times; requiring one spare factor of two
        # keeps every level's extent even
        div = 2**self.levels
        for s in x.shape[-3:]:
            if s % div:
                raise ValueError(
                    f"spatial dims {tuple(x.shape[-3:])} not divisible by {div}")

    def encode(self, x):
        """(N, D, H, W) -> bottleneck (N, C_bneck, d, h, w) plus skip list."""
        if x.ndim == 4:
            x = x.unsqueeze(1)
        self._check_spatial(x)
        skips = []
        for i, blk in enumerate(self.enc_blocks):
            x = blk(x)
            if i + 1 < self.levels:
                skips.append(x)
                x = self.down[i](x)
        return x, skips

    def decode(self, fused, skips):
        """Upsample with skip concatenation back to input resolution."""
        y = fused
        for up, blk, skip in zip(self.up, self.dec_blocks, reversed(skips)):
            y = blk(torch.cat([up(y), skip], dim=1))
        return self.head(y)

    def forward(self, x, z=None, beta_text=0.0):
        bneck, skips = self.encode(x)
        bneck = inject_text(bneck, z, beta_text)
        return self.decode(bneck, skips)


def inject_text(bottleneck: torch.Tensor, z, beta_text) -> torch.Tensor:
    """Add beta_text * z channelwise at every spatial position.

    beta_text == 0 (or z None) returns the bottleneck tensor unchanged, so a
    zero-weight forward is bit-identical to a text-free forward.
    """
    if z is None or beta_text == 0:
        return bottleneck
    z = torch.as_tensor(z, dtype=bottleneck.dtype)
    if z.ndim != 1 or z.shape[0] != bottleneck.shape[1]:
        raise ValueError(
            f"text feature length {tuple(z.shape)} != bottleneck channels "
            f"{bottleneck.shape[1]}")
    return bottleneck + beta_text * z.view(1, -1, 1, 1, 1)


def _tent_kernel(k):
    # 1D trilinear interpolation taps for an even-sized transposed conv
    center = (k - 1) / 2.0
    f = (k + 1) // 2
    return np.array([1.0 - abs(i - center) / f for i in range(k)])


def init_parameters(model: nn.Module, rng: np.random.Generator) -> None:
    """Deterministic init driven by a numpy generator.

    Convs/linears get uniform Kaiming-style weights, norms get identity,
    transposed convs get a trilinear interpolation kernel mapped
    channel-diagonally.
    """
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.ConvTranspose3d):
                k = module.kernel_size[0]
                tent = _tent_kernel(k)
                kern = tent[:, None, None] * tent[None, :, None] * tent[None, None, :]
                cin, cout = module.in_channels, module.out_channels
                w = np.zeros((cin, cout, k, k, k))
                for i in range(cin):
                    w[i, i % cout] = kern / max(1, cin // cout)
                module.weight.copy_(torch.as_tensor(w, dtype=module.weight.dtype))
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, (nn.Conv3d, nn.Linear)):
                fan_in = module.weight[0].numel()
                bound = math.sqrt(1.0 / fan_in)
                module.weight.copy_(torch.as_tensor(
                    rng.uniform(-bound, bound, size=tuple(module.weight.shape)),
                    dtype=module.weight.dtype))
                if module.bias is not None:
                    module.bias.copy_(torch.as_tensor(
                        rng.uniform(-bound, bound, size=tuple(module.bias.shape)),
                        dtype=module.bias.dtype))
            elif isinstance(module, nn.GroupNorm):
                module.weight.fill_(1.0)
                module.bias.zero_()


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
