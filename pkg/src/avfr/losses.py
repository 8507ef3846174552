"""Training losses: GAN objectives, the fixed-seed perceptual distance,
thin-plate-spline equivariance constraints, and the weighted total with a
per-term breakdown."""

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

LOG_EPS = 1e-8
PERCEPTUAL_SEED = 20240917
IDENTITY_EMBED_SEED = 77001

TPS_GRID = 5
TPS_SIGMA_AFFINE = 0.05
TPS_SIGMA_TPS = 0.005
TPS_MIN_DET = 1e-4


def _safe_log(x: torch.Tensor) -> torch.Tensor:
    return torch.log(x.clamp(min=LOG_EPS))


def disc_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """Negated discriminator objective E[log D(real)] + E[log(1 - D(fake))],
    returned for minimization."""
    real = torch.sigmoid(real_logits)
    fake = torch.sigmoid(fake_logits)
    return -(_safe_log(real).mean() + _safe_log(1 - fake).mean())


def adversarial_gen_term(fake_logits: torch.Tensor, non_saturating: bool = False) -> torch.Tensor:
    """Generator-side adversarial term. Default is the saturating form
    E[log(1 - D(fake))]; the non-saturating variant is -E[log D(fake)]."""
    fake = torch.sigmoid(fake_logits)
    if non_saturating:
        return -_safe_log(fake).mean()
    return _safe_log(1 - fake).mean()


class FrozenPyramid(nn.Module):
    """Fixed-seed random convolutional feature pyramid; the proxy for a
    pretrained perceptual/statistics network. Weights depend only on the seed."""

    def __init__(self, seed=PERCEPTUAL_SEED, widths=(16, 32, 64), in_channels=3):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        convs, ch = [], in_channels
        for w in widths:
            conv = nn.Conv2d(ch, w, kernel_size=3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen)
                                  * (2.0 / (9 * ch)) ** 0.5)
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen) * 0.1)
            convs.append(conv)
            ch = w
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list:
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
            feats.append(x)
        return feats

    def pooled(self, x: torch.Tensor) -> torch.Tensor:
        """Global-pooled concatenation of all levels (used for distribution
        and identity statistics)."""
        return torch.cat([f.mean(dim=(2, 3)) for f in self.forward(x)], dim=1)


def _unit_normalize(feat: torch.Tensor) -> torch.Tensor:
    return feat / (feat.pow(2).sum(dim=1, keepdim=True).sqrt() + 1e-10)


def perceptual_loss(target: torch.Tensor, generated: torch.Tensor,
                    extractor: FrozenPyramid) -> torch.Tensor:
    """Mean over layers of the L1 distance between channel-unit-normalized
    activations."""
    fa = extractor(target)
    fb = extractor(generated)
    terms = [(_unit_normalize(a) - _unit_normalize(b)).abs().mean()
             for a, b in zip(fa, fb)]
    return torch.stack(terms).mean()


class ThinPlateSpline:
    """Random TPS deformation of normalized [-1, 1] coordinates: a jittered
    affine part plus radial terms on a TPS_GRID x TPS_GRID control grid."""

    def __init__(self, rng: np.random.Generator, batch_size: int,
                 sigma_affine=TPS_SIGMA_AFFINE, sigma_tps=TPS_SIGMA_TPS,
                 points=TPS_GRID, dtype=torch.float32):
        noise = rng.normal(0, sigma_affine, size=(batch_size, 2, 3))
        self.theta = torch.as_tensor(noise, dtype=dtype) + torch.eye(2, 3, dtype=dtype)
        xs = torch.linspace(-1, 1, points, dtype=dtype)
        cp = torch.stack(torch.meshgrid(xs, xs, indexing="xy"), dim=-1).reshape(-1, 2)
        self.control_points = cp
        self.control_params = torch.as_tensor(
            rng.normal(0, sigma_tps, size=(batch_size, points ** 2, 2)), dtype=dtype)

    def warp_coordinates(self, coords: torch.Tensor) -> torch.Tensor:
        """coords: (B, N, 2) -> (B, N, 2)."""
        theta = self.theta.to(coords.dtype)
        out = coords @ theta[:, :, :2].transpose(1, 2) + theta[:, :, 2].unsqueeze(1)
        d2 = ((coords.unsqueeze(2) - self.control_points.to(coords.dtype)
               .view(1, 1, -1, 2)) ** 2).sum(-1)
        radial = d2 * torch.log(d2 + 1e-9)
        return out + radial @ self.control_params.to(coords.dtype)

    def jacobian(self, coords: torch.Tensor) -> torch.Tensor:
        """Local affine derivative of the warp at coords: (B, N, 2, 2)."""
        theta = self.theta.to(coords.dtype)
        diff = coords.unsqueeze(2) - self.control_points.to(coords.dtype).view(1, 1, -1, 2)
        d2 = (diff ** 2).sum(-1)
        # d/dz [d2 * log(d2)] = (log(d2) + 1) * 2 * (z - c)
        gl = (torch.log(d2 + 1e-9) + 1.0) * 2.0
        grad = torch.einsum("bnk,bnkc,bko->bnoc", gl, diff,
                            self.control_params.to(coords.dtype))
        return theta[:, None, :, :2] + grad

    def transform_frame(self, frame: torch.Tensor) -> torch.Tensor:
        b, _, h, w = frame.shape
        from .nn import make_coordinate_grid
        grid = make_coordinate_grid((h, w), frame.dtype, frame.device)
        grid = grid.view(1, h * w, 2).expand(b, h * w, 2)
        warped = self.warp_coordinates(grid).view(b, h, w, 2)
        return F.grid_sample(frame, warped, mode="bilinear",
                             padding_mode="border", align_corners=True)


def sample_nondegenerate_tps(rng: np.random.Generator, batch_size: int,
                             probe_points: torch.Tensor, max_tries: int = 20) -> ThinPlateSpline:
    """Draw transforms until |det T'| >= TPS_MIN_DET at all probe points."""
    for _ in range(max_tries):
        tps = ThinPlateSpline(rng, batch_size)
        jac = tps.jacobian(probe_points)
        det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
        if det.abs().min() >= TPS_MIN_DET:
            return tps
    raise RuntimeError("could not sample a non-degenerate TPS transform")


def equivariance_loss(detector, frames: torch.Tensor, tps: ThinPlateSpline):
    """Position and Jacobian consistency of the detector under a known
    deformation. Returns (total, position term, jacobian term)."""
    kp = detector(frames)
    kp_t = detector(tps.transform_frame(frames))
    warped_pos = tps.warp_coordinates(kp.positions)
    pos_term = (kp_t.positions - warped_pos).abs().mean()
    local_affine = tps.jacobian(kp.positions)
    jac_term = (kp_t.jacobians - local_affine @ kp.jacobians).abs().mean()
    return pos_term + jac_term, pos_term, jac_term


def gen_loss(driving: torch.Tensor, generated: torch.Tensor, *,
             perceptual_extractor: FrozenPyramid, fake_logits: torch.Tensor,
             eq_total: torch.Tensor, weights: dict,
             non_saturating: bool = False):
    """Weighted generator objective; returns (total, breakdown of weighted terms)."""
    terms = {
        "l1": weights["w_l1"] * (driving - generated).abs().mean(),
        "per": weights["w_per"] * perceptual_loss(driving, generated, perceptual_extractor),
        "eq": weights["w_eq"] * eq_total,
        "adv": weights["w_adv"] * adversarial_gen_term(fake_logits, non_saturating),
    }
    for name, value in terms.items():
        if not torch.isfinite(value):
            raise FloatingPointError(f"non-finite generator loss term: {name}")
    total = sum(terms.values())
    return total, {k: float(v.detach()) for k, v in terms.items()}
