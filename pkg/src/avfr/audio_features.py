"""Audio pathway: 200ms window selection centered on the driving frame,
log-mel spectrograms, the audio feature map, the query vector, and the
sigmoid dot-product attention over the motion feature map."""

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .keypoints import ContractError

WINDOW_SECONDS = 0.2
LOG_MEL_FLOOR = 1e-5

# n_fft=512 (not 400): with 400-sample FFTs at 16 kHz the low mel filters are
# narrower than one FFT bin and a 220 Hz tone peaks one mel bin away from the
# bin whose center is nearest 220 Hz.
DEFAULT_MEL = {"n_fft": 512, "hop": 160, "n_mels": 80}
# Log-mels live in [log(1e-5), ~0]; shift/scale them to O(1) before any conv.
MEL_NORM_SHIFT = -math.log(LOG_MEL_FLOOR)
MEL_NORM_SCALE = 1.0 / MEL_NORM_SHIFT


def normalize_mel(mel: "torch.Tensor") -> "torch.Tensor":
    return (mel + MEL_NORM_SHIFT) * MEL_NORM_SCALE


@dataclass
class MelWindow:
    mel: np.ndarray  # (M, T) log power
    sample_rate: int
    center_frame_index: int
    window_ms: int = 200


def select_audio_window(audio: np.ndarray, frame_index: int, fps: float,
                        sample_rate: int) -> np.ndarray:
    """Exactly round(0.2*sr) samples centered on the frame center
    (frame_index + 0.5)/fps; out-of-clip regions are zero-padded."""
    if frame_index < 0:
        raise ValueError("frame_index must be nonnegative")
    audio = np.asarray(audio, dtype=np.float32)
    n = int(round(WINDOW_SECONDS * sample_rate))
    start = int(round((frame_index + 0.5) / fps * sample_rate)) - n // 2
    out = np.zeros(n, dtype=np.float32)
    lo, hi = max(start, 0), min(start + n, len(audio))
    if hi > lo:
        out[lo - start:hi - start] = audio[lo:hi]
    return out


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int) -> np.ndarray:
    """HTK-scale triangular filters, (n_mels, n_fft//2 + 1)."""
    fft_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    mel_pts = np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    fb = np.zeros((n_mels, len(fft_freqs)))
    for m in range(n_mels):
        left, center, right = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (fft_freqs - left) / max(center - left, 1e-10)
        down = (right - fft_freqs) / max(right - center, 1e-10)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def mel_center_frequencies(sample_rate: int, n_mels: int) -> np.ndarray:
    mel_pts = np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2)
    return mel_to_hz(mel_pts[1:-1])


def melspectrogram(segment: np.ndarray, sample_rate: int,
                   n_fft: int = DEFAULT_MEL["n_fft"],
                   hop: int = DEFAULT_MEL["hop"],
                   n_mels: int = DEFAULT_MEL["n_mels"],
                   center_frame_index: int = 0) -> MelWindow:
    """Power STFT -> HTK mel filterbank -> log with floor LOG_MEL_FLOOR."""
    segment = np.asarray(segment, dtype=np.float64)
    expected = int(round(WINDOW_SECONDS * sample_rate))
    if len(segment) != expected:
        raise ValueError(f"segment must hold {expected} samples, got {len(segment)}")
    pad = n_fft // 2
    padded = np.pad(segment, (pad, pad))
    idx = np.arange(0, len(padded) - n_fft + 1, hop)
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n_fft) / n_fft)
    frames = np.stack([padded[i:i + n_fft] * window for i in idx])
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    mel = mel_filterbank(sample_rate, n_fft, n_mels) @ power.T
    return MelWindow(mel=np.log(np.maximum(mel, LOG_MEL_FLOOR)).astype(np.float32),
                     sample_rate=sample_rate, center_frame_index=center_frame_index)


def save_mel(mel_window: MelWindow, path) -> None:
    """Raw little-endian float32 M x T with a JSON sidecar."""
    path = Path(path)
    path.write_bytes(mel_window.mel.astype("<f4").tobytes())
    meta = {"M": mel_window.mel.shape[0], "T": mel_window.mel.shape[1],
            "sample_rate": mel_window.sample_rate, "hop": DEFAULT_MEL["hop"]}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta))


class AudioEncoder(nn.Module):
    """Mel image -> c-vector per time step (averaged) -> spatial broadcast to
    (H/4, W/4) refined by two convolutions."""

    def __init__(self, channels=64, spatial_size=(16, 16), n_mels=80):
        super().__init__()
        self.spatial_size = spatial_size
        self.conv = nn.Sequential(
            nn.Conv2d(1, channels // 2, kernel_size=3, stride=(2, 1), padding=1),
            nn.ReLU(),
            nn.Conv2d(channels // 2, channels, kernel_size=3, stride=(2, 1), padding=1),
            nn.ReLU(),
            nn.Conv2d(channels, channels, kernel_size=3, stride=(2, 1), padding=1),
            nn.ReLU(),
        )
        self.project = nn.Linear(2 * channels, channels)
        self.refine = nn.Sequential(
            nn.Conv2d(channels, channels, kernel_size=3, padding=1),
            nn.ReLU(),
            nn.Conv2d(channels, channels, kernel_size=3, padding=1),
        )

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        # mel: (B, 1, M, T). Mean pooling alone drowns out the few active mel
        # bins of a narrowband signal, so max-pooled features are kept too.
        conv = self.conv(normalize_mel(mel))
        feat = self.project(torch.cat([conv.mean(dim=(2, 3)),
                                       conv.amax(dim=(2, 3))], dim=1))
        h, w = self.spatial_size
        grid = feat.view(*feat.shape, 1, 1).expand(*feat.shape, h, w)
        return self.refine(grid)


class QueryEncoder(nn.Module):
    """Mel image -> global pooled features -> bias-free linear head."""

    def __init__(self, channels=64, hidden=32):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(1, hidden, kernel_size=3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(hidden, hidden, kernel_size=3, stride=2, padding=1),
            nn.ReLU(),
        )
        self.head = nn.Linear(2 * hidden, channels, bias=False)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        conv = self.conv(normalize_mel(mel))
        return self.head(torch.cat([conv.mean(dim=(2, 3)),
                                    conv.amax(dim=(2, 3))], dim=1))


def av_attention(query: torch.Tensor, motion: torch.Tensor) -> torch.Tensor:
    """sigmoid(<query, motion(i, j)>) at every location.

    query: (B, c); motion: (B, c, h, w) -> (B, 1, h, w) strictly in (0, 1).
    """
    if query.shape[0] != motion.shape[0] or query.shape[1] != motion.shape[1]:
        raise ContractError(
            f"query dim {tuple(query.shape)} does not match motion channels "
            f"{tuple(motion.shape)}")
    return torch.sigmoid(torch.einsum("bc,bchw->bhw", query, motion)).unsqueeze(1)


def fuse(enc_motion: torch.Tensor, enc_aud: torch.Tensor,
         enc_attn: torch.Tensor) -> torch.Tensor:
    """Channel concatenation in fixed order [motion | audio | attention]."""
    if enc_motion.shape[2:] != enc_aud.shape[2:] or enc_motion.shape[2:] != enc_attn.shape[2:]:
        raise ContractError("spatial dimensions of fused maps must match")
    return torch.cat([enc_motion, enc_aud, enc_attn], dim=1)
