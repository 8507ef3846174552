"""Shared network building blocks (hourglass, blur-downsample, coordinate
grids, Gaussian keypoint embeddings, spatially-modulated residual blocks)."""

import torch
import torch.nn.functional as F
from torch import nn


def make_coordinate_grid(spatial_size, dtype=torch.float32, device=None):
    """(h, w) -> h x w x 2 grid of (x, y) coordinates spanning [-1, 1]."""
    h, w = spatial_size
    x = torch.linspace(-1.0, 1.0, w, dtype=dtype, device=device)
    y = torch.linspace(-1.0, 1.0, h, dtype=dtype, device=device)
    yy = y.view(-1, 1).expand(h, w)
    xx = x.view(1, -1).expand(h, w)
    return torch.stack([xx, yy], dim=2)


def kp2gaussian(positions, spatial_size, std=0.1):
    """Keypoint positions (B, K, 2) -> unnormalized Gaussian maps (B, K, h, w)."""
    grid = make_coordinate_grid(spatial_size, positions.dtype, positions.device)
    grid = grid.view(1, 1, *spatial_size, 2)
    mean = positions.view(*positions.shape[:2], 1, 1, 2)
    return torch.exp(-((grid - mean) ** 2).sum(-1) / (2 * std ** 2))


class AntiAliasInterpolation2d(nn.Module):
    """Gaussian blur followed by subsampling, for clean downscaling."""

    def __init__(self, channels, scale):
        super().__init__()
        sigma = (1 / scale - 1) / 2
        kernel_size = 2 * round(sigma * 4) + 1
        self.ka = kernel_size // 2
        grid = torch.arange(kernel_size, dtype=torch.float32)
        kernel = torch.exp(-((grid - self.ka) ** 2) / (2 * sigma ** 2))
        kernel = kernel / kernel.sum()
        kernel2d = kernel.view(-1, 1) * kernel.view(1, -1)
        self.register_buffer("weight", kernel2d.expand(channels, 1, -1, -1).clone())
        self.groups = channels
        self.int_inv_scale = int(1 / scale)

    def forward(self, x):
        x = F.pad(x, (self.ka, self.ka, self.ka, self.ka), mode="replicate")
        x = F.conv2d(x, weight=self.weight.to(x.dtype), groups=self.groups)
        return x[:, :, ::self.int_inv_scale, ::self.int_inv_scale]


class ConvBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1)
        self.norm = nn.InstanceNorm2d(out_ch, affine=True)

    def forward(self, x):
        return F.relu(self.norm(self.conv(x)))


class Hourglass(nn.Module):
    """Small encoder-decoder with skip connections."""

    def __init__(self, in_ch, base, num_blocks=2, max_ch=256):
        super().__init__()
        downs, chans = [], [in_ch]
        ch = in_ch
        for i in range(num_blocks):
            out = min(base * 2 ** i, max_ch)
            downs.append(ConvBlock(ch, out, stride=2))
            ch = out
            chans.append(ch)
        self.downs = nn.ModuleList(downs)
        ups = []
        for i in reversed(range(num_blocks)):
            skip = chans[i]
            out = min(base * 2 ** max(i - 1, 0), max_ch)
            ups.append(ConvBlock(ch + skip, out))
            ch = out
        self.ups = nn.ModuleList(ups)
        self.out_channels = ch

    def forward(self, x):
        skips = [x]
        for d in self.downs:
            x = d(x)
            skips.append(x)
        for i, u in enumerate(self.ups):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = u(torch.cat([x, skips[-2 - i]], dim=1))
        return x


class SpatialModulation(nn.Module):
    """Instance normalization whose scale/shift are predicted from a
    modulation feature map (resized to the input resolution)."""

    def __init__(self, ch, mod_ch, hidden=32):
        super().__init__()
        self.norm = nn.InstanceNorm2d(ch, affine=False)
        self.shared = nn.Conv2d(mod_ch, hidden, kernel_size=3, padding=1)
        self.gamma = nn.Conv2d(hidden, ch, kernel_size=3, padding=1)
        self.beta = nn.Conv2d(hidden, ch, kernel_size=3, padding=1)

    def forward(self, x, mod):
        if mod.shape[2:] != x.shape[2:]:
            mod = F.interpolate(mod, size=x.shape[2:], mode="nearest")
        a = F.relu(self.shared(mod))
        return self.norm(x) * (1 + self.gamma(a)) + self.beta(a)


class ModulatedResBlock(nn.Module):
    def __init__(self, ch, mod_ch):
        super().__init__()
        self.mod1 = SpatialModulation(ch, mod_ch)
        self.conv1 = nn.Conv2d(ch, ch, kernel_size=3, padding=1)
        self.mod2 = SpatialModulation(ch, mod_ch)
        self.conv2 = nn.Conv2d(ch, ch, kernel_size=3, padding=1)

    def forward(self, x, mod):
        h = self.conv1(F.leaky_relu(self.mod1(x, mod), 0.2))
        h = self.conv2(F.leaky_relu(self.mod2(h, mod), 0.2))
        return x + h
