"""Patch discriminator: four strided convolution blocks, every convolution
spectrally normalized, instance normalization on intermediate activations,
LeakyReLU throughout."""

import torch
from torch import nn
from torch.nn.utils import spectral_norm


class Discriminator(nn.Module):
    def __init__(self, widths=(32, 64, 128, 128), in_channels=3):
        super().__init__()
        layers, ch = [], in_channels
        for i, w in enumerate(widths):
            layers.append(spectral_norm(
                nn.Conv2d(ch, w, kernel_size=4, stride=2, padding=1)))
            if i > 0:
                layers.append(nn.InstanceNorm2d(w, affine=True))
            layers.append(nn.LeakyReLU(0.2))
            ch = w
        self.body = nn.Sequential(*layers)
        self.head = spectral_norm(nn.Conv2d(ch, 1, kernel_size=3, padding=1))

    def forward(self, frame: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> (B, 1, H/16, W/16) patch logits."""
        return self.head(self.body(frame))
