"""Dense motion from sparse keypoints: first-order candidate flows, a
mask/occlusion network, bilinear feature warping, and the warped motion
feature map at quarter resolution."""

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .keypoints import ContractError, KeypointSet
from .nn import AntiAliasInterpolation2d, ConvBlock, Hourglass, kp2gaussian, make_coordinate_grid

JACOBIAN_DET_EPS = 1e-6
JACOBIAN_REG = 1e-5


@dataclass
class MotionField:
    flow: torch.Tensor       # (B, h', w', 2) backward sampling grid in [-1, 1]
    masks: torch.Tensor      # (B, K+1, h', w'), softmax over candidates; index 0 is background
    occlusion: torch.Tensor  # (B, 1, h', w') in [0, 1]


def regularized_inverse(jac: torch.Tensor) -> torch.Tensor:
    """Inverse of (..., 2, 2) matrices; near-singular ones get +eps*I first."""
    det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
    eye = torch.eye(2, dtype=jac.dtype, device=jac.device)
    bad = (det.abs() < JACOBIAN_DET_EPS)[..., None, None]
    jac = torch.where(bad, jac + JACOBIAN_REG * eye, jac)
    return torch.inverse(jac)


def sparse_candidate_flows(kp_source: KeypointSet, kp_driving: KeypointSet,
                           spatial_size) -> torch.Tensor:
    """(B, K+1, h, w, 2) candidate backward flows: identity (background)
    followed by z -> X_s + J_s J_d^{-1} (z - X_d) per keypoint."""
    if kp_source.num_keypoints != kp_driving.num_keypoints:
        raise ContractError("source/driving keypoint counts differ")
    b, k = kp_source.positions.shape[:2]
    h, w = spatial_size
    grid = make_coordinate_grid(spatial_size, kp_source.positions.dtype,
                                kp_source.positions.device)
    identity = grid.view(1, 1, h, w, 2).expand(b, 1, h, w, 2)

    coord = grid.view(1, 1, h, w, 2) - kp_driving.positions.view(b, k, 1, 1, 2)
    jac = kp_source.jacobians @ regularized_inverse(kp_driving.jacobians)
    coord = (jac.view(b, k, 1, 1, 2, 2) @ coord.unsqueeze(-1)).squeeze(-1)
    per_kp = kp_source.positions.view(b, k, 1, 1, 2) + coord
    return torch.cat([identity, per_kp], dim=1)


def warp_features(features: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Bilinear backward sampling of (B, C, h, w) features by a (B, h, w, 2)
    grid; out-of-range samples clamp to the border."""
    if features.dim() != 4 or flow.dim() != 4 or flow.shape[-1] != 2 \
            or features.shape[0] != flow.shape[0] \
            or features.shape[2:] != flow.shape[1:3]:
        raise ContractError(
            f"shape mismatch: features {tuple(features.shape)} vs flow {tuple(flow.shape)}")
    return F.grid_sample(features, flow, mode="bilinear",
                         padding_mode="border", align_corners=True)


class DenseMotionNetwork(nn.Module):
    """Combines candidate-warped source views and keypoint difference
    heatmaps into softmax combination masks and a sigmoid occlusion map."""

    def __init__(self, num_kp=10, base=32, heatmap_std=0.1):
        super().__init__()
        self.num_kp = num_kp
        self.heatmap_std = heatmap_std
        self.down = AntiAliasInterpolation2d(3, 0.25)
        self.hourglass = Hourglass((num_kp + 1) * 4, base, num_blocks=2)
        self.mask_head = nn.Conv2d(self.hourglass.out_channels, num_kp + 1,
                                   kernel_size=7, padding=3)
        self.occlusion_head = nn.Conv2d(self.hourglass.out_channels, 1,
                                        kernel_size=7, padding=3)

    def forward(self, source_rgb: torch.Tensor, kp_source: KeypointSet,
                kp_driving: KeypointSet) -> MotionField:
        small = self.down(source_rgb)
        b, _, h, w = small.shape
        candidates = sparse_candidate_flows(kp_source, kp_driving, (h, w))
        k1 = candidates.shape[1]

        warped = F.grid_sample(
            small.unsqueeze(1).expand(b, k1, 3, h, w).reshape(b * k1, 3, h, w),
            candidates.reshape(b * k1, h, w, 2),
            mode="bilinear", padding_mode="border", align_corners=True)
        warped = warped.view(b, k1 * 3, h, w)

        diff = kp2gaussian(kp_driving.positions, (h, w), self.heatmap_std) \
            - kp2gaussian(kp_source.positions, (h, w), self.heatmap_std)
        heat = torch.cat([torch.zeros_like(diff[:, :1]), diff], dim=1)

        feat = self.hourglass(torch.cat([warped, heat], dim=1))
        masks = F.softmax(self.mask_head(feat), dim=1)
        occlusion = torch.sigmoid(self.occlusion_head(feat))
        flow = combine_candidate_flows(candidates, masks)
        return MotionField(flow=flow, masks=masks, occlusion=occlusion)


def combine_candidate_flows(candidates: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """Mask-weighted sum of (B, K+1, h, w, 2) candidates -> (B, h, w, 2)."""
    return (candidates * masks.unsqueeze(-1)).sum(dim=1)


class MotionEncoder(nn.Module):
    """Downsampling source encoder whose output is warped by the dense flow
    and gated by the occlusion map, giving the quarter-resolution motion
    feature map."""

    def __init__(self, channels=64, in_channels=3):
        super().__init__()
        self.channels = channels
        self.net = nn.Sequential(
            ConvBlock(in_channels, channels // 2),
            ConvBlock(channels // 2, channels, stride=2),
            ConvBlock(channels, channels, stride=2),
        )

    def encode(self, source_rgb: torch.Tensor) -> torch.Tensor:
        return self.net(source_rgb)

    def forward(self, source_rgb: torch.Tensor, motion: MotionField) -> torch.Tensor:
        encoded = self.encode(source_rgb)
        warped = warp_features(encoded, motion.flow)
        return warped * motion.occlusion
