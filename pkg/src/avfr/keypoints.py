"""Keypoint detection from 5-channel inputs: quarter-resolution heatmaps,
soft-argmax positions, and heatmap-weighted 2x2 local affine estimates."""

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .nn import AntiAliasInterpolation2d, Hourglass, make_coordinate_grid


class ContractError(ValueError):
    """Shape or normalization contract violation."""


@dataclass
class KeypointSet:
    positions: torch.Tensor  # (B, K, 2) in [-1, 1], (x, y)
    jacobians: torch.Tensor  # (B, K, 2, 2)
    heatmaps: torch.Tensor   # (B, K, H/4, W/4), each summing to 1

    @property
    def num_keypoints(self) -> int:
        return self.positions.shape[1]


def soft_argmax(heatmap: torch.Tensor, renormalize: bool = False) -> torch.Tensor:
    """Expected (x, y) coordinate of a normalized heatmap.

    Accepts (..., h, w); returns (..., 2). The input must sum to 1 over the
    spatial grid unless ``renormalize`` is set.
    """
    total = heatmap.sum(dim=(-2, -1))
    if renormalize:
        heatmap = heatmap / total.clamp(min=1e-12).unsqueeze(-1).unsqueeze(-1)
    elif not torch.allclose(total.detach(), torch.ones_like(total), atol=1e-4):
        raise ContractError("heatmap must sum to 1 (pass renormalize=True to override)")
    grid = make_coordinate_grid(heatmap.shape[-2:], heatmap.dtype, heatmap.device)
    return (heatmap.unsqueeze(-1) * grid).sum(dim=(-3, -2))


class KeypointDetector(nn.Module):
    """Hourglass over the 5-channel input at quarter resolution, with a
    softmax heatmap head and a parallel per-pixel 2x2 regression head."""

    def __init__(self, num_kp=10, in_channels=5, base=32, temperature=0.1):
        super().__init__()
        self.num_kp = num_kp
        self.in_channels = in_channels
        self.temperature = temperature
        self.down = AntiAliasInterpolation2d(in_channels, 0.25)
        self.hourglass = Hourglass(in_channels, base, num_blocks=2)
        self.heatmap_head = nn.Conv2d(self.hourglass.out_channels, num_kp,
                                      kernel_size=7, padding=3)
        self.jacobian_head = nn.Conv2d(self.hourglass.out_channels, 4 * num_kp,
                                       kernel_size=7, padding=3)
        self.jacobian_head.weight.data.zero_()
        self.jacobian_head.bias.data.copy_(
            torch.tensor([1.0, 0.0, 0.0, 1.0] * num_kp))

    def forward(self, x: torch.Tensor) -> KeypointSet:
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ContractError(
                f"expected (B, {self.in_channels}, H, W) input, got {tuple(x.shape)}")
        feat = self.hourglass(self.down(x))
        b, _, h, w = feat.shape

        logits = self.heatmap_head(feat) / self.temperature
        heatmaps = F.softmax(logits.view(b, self.num_kp, -1), dim=-1)
        heatmaps = heatmaps.view(b, self.num_kp, h, w)
        positions = soft_argmax(heatmaps)

        jac = self.jacobian_head(feat).view(b, self.num_kp, 4, h, w)
        jac = (jac * heatmaps.unsqueeze(2)).sum(dim=(3, 4))
        return KeypointSet(positions=positions,
                           jacobians=jac.view(b, self.num_kp, 2, 2),
                           heatmaps=heatmaps)
