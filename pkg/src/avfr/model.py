"""Full reenactment network: keypoint detection on 5-channel inputs, dense
motion, audio fusion, and the identity-aware generator, wired per the
resolution contract (all fused maps live at H/4 x W/4)."""

import numpy as np
import torch
from torch import nn

from .audio_features import (AudioEncoder, QueryEncoder, av_attention, fuse,
                             melspectrogram, select_audio_window)
from .generator import Generator, IdentityPyramid
from .keypoints import KeypointDetector
from .motion import DenseMotionNetwork, MotionEncoder, warp_features


class ReenactmentModel(nn.Module):
    def __init__(self, resolution=(64, 64), num_kp=10, channels=16, base=32,
                 bottleneck=128, use_audio=True, use_structural_priors=True,
                 mask_identity_skips=False):
        super().__init__()
        h, w = resolution
        if h % 4 or w % 4:
            raise ValueError("resolution must be multiples of 4")
        self.resolution = (h, w)
        self.num_kp = num_kp
        self.channels = channels
        self.use_audio = use_audio
        self.use_structural_priors = use_structural_priors

        self.kp_detector = KeypointDetector(num_kp=num_kp, base=base)
        self.dense_motion = DenseMotionNetwork(num_kp=num_kp, base=base)
        self.motion_encoder = MotionEncoder(channels=channels)
        self.audio_encoder = AudioEncoder(channels=channels,
                                          spatial_size=(h // 4, w // 4))
        self.query_encoder = QueryEncoder(channels=channels)
        self.generator = Generator(enc_dec_channels=2 * channels + 1,
                                   bottleneck=bottleneck,
                                   mask_identity_skips=mask_identity_skips,
                                   cond_dim=channels if use_audio else None)

    def detect(self, prior_stack: torch.Tensor):
        """Keypoints from a (B, 5, H, W) prior stack. With structural priors
        disabled, the mesh/segmentation channels are zeroed (shape-stable
        ablation)."""
        if not self.use_structural_priors:
            prior_stack = torch.cat(
                [prior_stack[:, :3], torch.zeros_like(prior_stack[:, 3:])], dim=1)
        return self.kp_detector(prior_stack)

    def neutral_audio(self, batch: int, dtype=torch.float32, device=None):
        """Audio-free preset: zero audio features, attention pinned at 0.5."""
        h, w = self.resolution
        enc_aud = torch.zeros(batch, self.channels, h // 4, w // 4,
                              dtype=dtype, device=device)
        attn = torch.full((batch, 1, h // 4, w // 4), 0.5, dtype=dtype, device=device)
        return enc_aud, attn

    # Normalized (x0, x1, y0, y1) box that covers the mouth across the whole
    # pose prior; the identity pathway never sees it, so mouth articulation
    # must come from the motion/audio pathways rather than source copying.
    MOUTH_MASK_BOX = (0.25, 0.76, 0.54, 0.82)

    def _mouth_window(self, like: torch.Tensor) -> torch.Tensor:
        """(1, 1, H, W) indicator of the mouth box at `like`'s resolution."""
        h, w = like.shape[2:]
        x0, x1, y0, y1 = self.MOUTH_MASK_BOX
        window = torch.zeros(1, 1, h, w, dtype=like.dtype, device=like.device)
        window[:, :, int(y0 * (h - 1)):int(y1 * (h - 1)) + 1,
               int(x0 * (w - 1)):int(x1 * (w - 1)) + 1] = 1.0
        return window

    def _mask_mouth(self, source_rgb: torch.Tensor) -> torch.Tensor:
        return source_rgb * (1.0 - self._mouth_window(source_rgb))

    def _warped_identity(self, source_rgb, motion) -> IdentityPyramid:
        """Identity skip features aligned to the driving pose: each pyramid
        level is warped by the dense flow (resampled to the level's
        resolution) and gated by the occlusion map, so the decoder cannot
        shortcut around the motion estimate by copying the static source."""
        pyramid = self.generator.encode_identity(self._mask_mouth(source_rgb))
        flow = motion.flow.permute(0, 3, 1, 2)
        levels = []
        for feat in pyramid.levels:
            size = feat.shape[2:]
            lvl_flow = nn.functional.interpolate(
                flow, size=size, mode="bilinear", align_corners=True)
            occ = nn.functional.interpolate(
                motion.occlusion, size=size, mode="bilinear", align_corners=True)
            levels.append(warp_features(feat, lvl_flow.permute(0, 2, 3, 1)) * occ)
        return IdentityPyramid(levels)

    def forward(self, source_prior, driving_prior, source_rgb, mel=None,
                kp_source=None, kp_driving=None):
        if kp_source is None:
            kp_source = self.detect(source_prior)
        if kp_driving is None:
            kp_driving = self.detect(driving_prior)
        motion = self.dense_motion(source_rgb, kp_source, kp_driving)
        enc_motion = self.motion_encoder(source_rgb, motion)

        if self.use_audio and mel is not None:
            enc_aud = self.audio_encoder(mel)
            query = self.query_encoder(mel)
            enc_attn = av_attention(query, enc_motion)
        else:
            enc_aud, enc_attn = self.neutral_audio(
                source_rgb.shape[0], source_rgb.dtype, source_rgb.device)
            query = None

        enc_dec = fuse(enc_motion, enc_aud, enc_attn)
        pyramid = self._warped_identity(source_rgb, motion)
        # Audio modulation is confined to the mouth window the identity
        # pathway is blind to; elsewhere the decoder is audio-independent.
        generated = self.generator(pyramid, enc_dec, cond=query,
                                   cond_region=self._mouth_window(source_rgb))
        return {"generated": generated, "kp_source": kp_source,
                "kp_driving": kp_driving, "motion": motion,
                "enc_motion": enc_motion, "attention": enc_attn}


def frames_to_tensor(frames) -> torch.Tensor:
    """List of HxWx3 [0,1] arrays -> (B, 3, H, W) float tensor."""
    arr = np.stack([np.asarray(f.pixels if hasattr(f, "pixels") else f) for f in frames])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).float()


def priors_to_tensor(priors) -> torch.Tensor:
    arr = np.stack([np.asarray(p.channels if hasattr(p, "channels") else p) for p in priors])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).float()


def mel_batch(clip, frame_indices) -> torch.Tensor:
    """Log-mel windows for the given driving frames of a clip: (B, 1, M, T)."""
    mels = []
    for idx in frame_indices:
        seg = select_audio_window(clip.audio, int(idx), clip.fps, clip.sample_rate)
        mels.append(melspectrogram(seg, clip.sample_rate, center_frame_index=int(idx)).mel)
    return torch.from_numpy(np.stack(mels)).unsqueeze(1).float()
