"""Identity-aware generator: a multi-scale identity encoder over the raw
source frame, and a U-shaped decoder whose residual blocks are spatially
modulated by the identity skip features. The fused (motion|audio|attention)
map joins at the quarter-resolution bottleneck."""

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .keypoints import ContractError
from .nn import ConvBlock, ModulatedResBlock


@dataclass
class IdentityPyramid:
    levels: list  # feature maps at H/2, H/4, H/8


class IdentityEncoder(nn.Module):
    def __init__(self, widths=(32, 64, 64), in_channels=3):
        super().__init__()
        self.widths = tuple(widths)
        blocks, ch = [], in_channels
        for w in widths:
            blocks.append(ConvBlock(ch, w, stride=2))
            ch = w
        self.blocks = nn.ModuleList(blocks)

    def forward(self, source: torch.Tensor) -> IdentityPyramid:
        levels, x = [], source
        for b in self.blocks:
            x = b(x)
            levels.append(x)
        return IdentityPyramid(levels=levels)


class FiLM(nn.Module):
    """Per-channel affine modulation from a conditioning vector. Biases are
    zero-initialized so a zero vector is exactly the identity transform."""

    def __init__(self, cond_dim, channels):
        super().__init__()
        self.scale = nn.Linear(cond_dim, channels)
        self.shift = nn.Linear(cond_dim, channels)
        nn.init.zeros_(self.scale.bias)
        nn.init.zeros_(self.shift.bias)

    def forward(self, x: torch.Tensor, cond: torch.Tensor,
                region: torch.Tensor | None = None) -> torch.Tensor:
        """`region` (B or 1, 1, H, W in [0, 1]) restricts the modulation to a
        spatial window; outside it the features pass through unchanged."""
        gamma = 1.0 + self.scale(cond)[:, :, None, None]
        beta = self.shift(cond)[:, :, None, None]
        out = gamma * x + beta
        if region is None:
            return out
        return x + region * (out - x)


class Generator(nn.Module):
    """Decoder over the bottleneck [enc_dec | identity@H/4], upsampling with
    nearest-neighbor + convolution and identity-modulated residual blocks;
    final sigmoid keeps output in [0, 1]. An optional conditioning vector
    (the audio query) modulates each decoder stage via FiLM, giving audio a
    direct multiplicative path to full-resolution rendering."""

    def __init__(self, enc_dec_channels, id_widths=(32, 64, 64), bottleneck=128,
                 mask_identity_skips=False, cond_dim=None):
        super().__init__()
        self.identity_encoder = IdentityEncoder(id_widths)
        self.mask_identity_skips = mask_identity_skips
        self.cond_dim = cond_dim
        w2, w4, w8 = id_widths
        self.entry = ConvBlock(enc_dec_channels + w4, bottleneck)
        self.down = ConvBlock(bottleneck, bottleneck, stride=2)
        self.res8 = ModulatedResBlock(bottleneck, w8)
        self.up4 = ConvBlock(bottleneck, bottleneck // 2)
        self.res4 = ModulatedResBlock(bottleneck // 2, w4)
        self.up2 = ConvBlock(bottleneck // 2, bottleneck // 4)
        self.res2 = ModulatedResBlock(bottleneck // 4, w2)
        self.up1 = ConvBlock(bottleneck // 4, bottleneck // 4)
        self.out = nn.Conv2d(bottleneck // 4, 3, kernel_size=3, padding=1)
        if cond_dim is not None:
            self.film4 = FiLM(cond_dim, bottleneck // 2)
            self.film2 = FiLM(cond_dim, bottleneck // 4)
            self.film1 = FiLM(cond_dim, bottleneck // 4)

    def encode_identity(self, source: torch.Tensor) -> IdentityPyramid:
        pyramid = self.identity_encoder(source)
        if self.mask_identity_skips:
            pyramid = IdentityPyramid([torch.zeros_like(l) for l in pyramid.levels])
        return pyramid

    def forward(self, identity: IdentityPyramid, enc_dec: torch.Tensor,
                cond: torch.Tensor | None = None,
                cond_region: torch.Tensor | None = None) -> torch.Tensor:
        lvl2, lvl4, lvl8 = identity.levels
        if enc_dec.shape[2:] != lvl4.shape[2:]:
            raise ContractError(
                f"enc_dec spatial dims {tuple(enc_dec.shape[2:])} must match the "
                f"H/4 identity level {tuple(lvl4.shape[2:])}")
        use_film = cond is not None and self.cond_dim is not None

        def window(feat):
            if cond_region is None:
                return None
            return F.interpolate(cond_region, size=feat.shape[2:], mode="nearest")

        x = self.entry(torch.cat([enc_dec, lvl4], dim=1))
        x = self.res8(self.down(x), lvl8)
        x = self.res4(self.up4(F.interpolate(x, scale_factor=2, mode="nearest")), lvl4)
        if use_film:
            x = self.film4(x, cond, window(x))
        x = self.res2(self.up2(F.interpolate(x, scale_factor=2, mode="nearest")), lvl2)
        if use_film:
            x = self.film2(x, cond, window(x))
        x = self.up1(F.interpolate(x, scale_factor=2, mode="nearest"))
        if use_film:
            x = self.film1(x, cond, window(x))
        return torch.sigmoid(self.out(x))
