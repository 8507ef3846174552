import json

import numpy as np
import pytest
import torch

from avfr import world
from avfr.audio_features import (DEFAULT_MEL, LOG_MEL_FLOOR, WINDOW_SECONDS,
                                 AudioEncoder, QueryEncoder, av_attention,
                                 fuse, hz_to_mel, mel_center_frequencies,
                                 mel_filterbank, mel_to_hz, melspectrogram,
                                 save_mel, select_audio_window)
from avfr.keypoints import ContractError

SR = 16000
WIN = int(WINDOW_SECONDS * SR)  # 3200


# ------------------------------------------------------------ window selection

def test_window_length_always_3200():
    audio = np.arange(SR * 4, dtype=np.float32)
    for i in (0, 1, 40, 99):
        seg = select_audio_window(audio, i, fps=25.0, sample_rate=SR)
        assert seg.shape == (WIN,)


def test_window_middle_frame_exact():
    # frame 2 of 5 at 25 fps: center 0.1 s = sample 1600, window = [0, 3200)
    audio = np.arange(WIN, dtype=np.float32)
    seg = select_audio_window(audio, 2, fps=25.0, sample_rate=SR)
    assert np.array_equal(seg, audio)


def test_window_frame0_left_padding():
    # frame 0 at 25 fps: center sample 320, start = 320 - 1600 = -1280,
    # i.e. exactly two frame durations of zero padding
    audio = np.ones(SR, dtype=np.float32)
    seg = select_audio_window(audio, 0, fps=25.0, sample_rate=SR)
    assert np.all(seg[:1280] == 0.0)
    assert np.all(seg[1280:] == 1.0)


def test_window_right_padding():
    audio = np.ones(WIN, dtype=np.float32)
    seg = select_audio_window(audio, 4, fps=25.0, sample_rate=SR)
    # frame 4 center = 0.18 s = sample 2880; window [1280, 4480) -> 1280 pad
    assert np.all(seg[: WIN - 1280] == 1.0)
    assert np.all(seg[WIN - 1280:] == 0.0)


def test_window_centering_property():
    # the window midpoint equals the frame-center sample within rounding
    audio = np.zeros(SR * 2, dtype=np.float32)
    for fps in (24.0, 25.0, 30.0):
        for i in range(5):
            center = (i + 0.5) / fps * SR
            start = round(center) - WIN // 2
            seg = select_audio_window(audio, i, fps=fps, sample_rate=SR)
            assert seg.shape == (WIN,)
            assert abs((start + WIN / 2) - center) <= 0.5


def test_window_negative_index_rejected():
    with pytest.raises(ValueError):
        select_audio_window(np.zeros(SR), -1, fps=25.0, sample_rate=SR)


# ------------------------------------------------------------------------ mel

def test_mel_scale_round_trip():
    f = np.array([0.0, 220.0, 1000.0, 8000.0])
    assert np.allclose(mel_to_hz(hz_to_mel(f)), f, atol=1e-6)
    # HTK scale reference point: mel(700 Hz) = 2595 * log10(2)
    assert hz_to_mel(700.0) == pytest.approx(2595.0 * np.log10(2.0), abs=1e-9)


def test_filterbank_shape_and_coverage():
    fb = mel_filterbank(SR, DEFAULT_MEL["n_fft"], DEFAULT_MEL["n_mels"])
    assert fb.shape == (80, DEFAULT_MEL["n_fft"] // 2 + 1)
    assert np.all(fb >= 0)
    assert np.all(fb.sum(axis=1) > 0)


def test_mel_silence_hits_log_floor():
    mw = melspectrogram(np.zeros(WIN, dtype=np.float32), SR)
    assert mw.mel.shape == (80, 21)
    assert np.allclose(mw.mel, np.log(LOG_MEL_FLOOR), atol=1e-6)


def test_mel_sine_argmax_at_nearest_center():
    t = np.arange(WIN) / SR
    seg = (0.3 * np.sin(2 * np.pi * world.CARRIER_HZ * t)).astype(np.float32)
    mw = melspectrogram(seg, SR)
    centers = mel_center_frequencies(SR, DEFAULT_MEL["n_mels"])
    nearest = int(np.argmin(np.abs(centers - world.CARRIER_HZ)))
    energy = mw.mel.sum(axis=1)
    assert int(np.argmax(energy)) == nearest


def test_mel_amplitude_doubling_adds_log4():
    t = np.arange(WIN) / SR
    quiet = (0.1 * np.sin(2 * np.pi * 220.0 * t)).astype(np.float32)
    loud = (0.2 * np.sin(2 * np.pi * 220.0 * t)).astype(np.float32)
    a = melspectrogram(quiet, SR).mel
    b = melspectrogram(loud, SR).mel
    floor = np.log(LOG_MEL_FLOOR)
    active = (a > floor + 1e-5) & (b > floor + 1e-5)
    assert active.any()
    diff = (b - a)[active]
    assert np.allclose(diff, np.log(4.0), atol=1e-3)


def test_mel_rejects_wrong_length():
    with pytest.raises(ValueError):
        melspectrogram(np.zeros(WIN - 1, dtype=np.float32), SR)


def test_mel_export_round_trip(tmp_path):
    t = np.arange(WIN) / SR
    seg = (0.2 * np.sin(2 * np.pi * 300.0 * t)).astype(np.float32)
    mw = melspectrogram(seg, SR)
    path = tmp_path / "mel.f32"
    save_mel(mw, path)
    meta = json.loads((tmp_path / "mel.f32.json").read_text())
    raw = np.fromfile(path, dtype="<f4").reshape(meta["M"], meta["T"])
    assert np.array_equal(raw, mw.mel.astype(np.float32))
    assert meta["sample_rate"] == SR
    assert meta["M"] == 80 and meta["T"] == 21


# ------------------------------------------------------------------- encoders

def test_audio_encoder_shape_and_determinism():
    torch.manual_seed(0)
    enc = AudioEncoder(channels=16, spatial_size=(16, 16))
    mel = torch.randn(2, 1, 80, 21)
    a = enc(mel)
    b = enc(mel)
    assert a.shape == (2, 16, 16, 16)
    assert torch.equal(a, b)
    # spatially constant by construction (broadcast then refined)
    assert torch.isfinite(a).all()


def test_query_encoder_shapes():
    torch.manual_seed(0)
    for c in (16, 64):
        q = QueryEncoder(channels=c)(torch.randn(3, 1, 80, 21))
        assert q.shape == (3, c)


# ------------------------------------------------------------------ attention

def test_attention_zero_query_is_half():
    query = torch.zeros(2, 8)
    motion = torch.randn(2, 8, 4, 4)
    attn = av_attention(query, motion)
    assert attn.shape == (2, 1, 4, 4)
    assert torch.allclose(attn, torch.full_like(attn, 0.5), atol=1e-7)


def test_attention_log3_dot_is_three_quarters():
    # dot product ln(3) at every location: sigmoid(ln 3) = 0.75
    c = 4
    query = torch.full((1, c), 1.0)
    motion = torch.full((1, c, 2, 2), float(np.log(3.0)) / c)
    attn = av_attention(query, motion)
    assert torch.allclose(attn, torch.full_like(attn, 0.75), atol=1e-6)


def test_attention_matches_double_loop_oracle(rng):
    q = rng.standard_normal((2, 8)).astype(np.float32)
    m = rng.standard_normal((2, 8, 4, 4)).astype(np.float32)
    ref = np.zeros((2, 1, 4, 4))
    for b in range(2):
        for i in range(4):
            for j in range(4):
                ref[b, 0, i, j] = 1.0 / (1.0 + np.exp(-float(np.dot(q[b], m[b, :, i, j]))))
    got = av_attention(torch.from_numpy(q), torch.from_numpy(m)).numpy()
    assert np.max(np.abs(got - ref)) < 1e-6


def test_attention_dim_mismatch_rejected():
    with pytest.raises(ContractError):
        av_attention(torch.zeros(1, 8), torch.zeros(1, 16, 4, 4))


def test_attention_gradient_check():
    query = torch.randn(1, 4, dtype=torch.float64, requires_grad=True)
    motion = torch.randn(1, 4, 3, 3, dtype=torch.float64)
    av_attention(query, motion).sum().backward()
    grad = query.grad.clone()
    eps = 1e-6
    for i in range(4):
        qp = query.detach().clone(); qp[0, i] += eps
        qm = query.detach().clone(); qm[0, i] -= eps
        num = ((av_attention(qp, motion).sum()
                - av_attention(qm, motion).sum()) / (2 * eps)).item()
        assert abs(num - grad[0, i].item()) < 1e-6 * max(1.0, abs(num))


# ----------------------------------------------------------------------- fuse

def test_fuse_channel_order_and_width():
    c = 16
    motion = torch.rand(1, c, 8, 8)
    aud = torch.rand(1, c, 8, 8)
    attn = torch.rand(1, 1, 8, 8)
    fused = fuse(motion, aud, attn)
    assert fused.shape == (1, 2 * c + 1, 8, 8)
    assert torch.equal(fused[:, :c], motion)
    assert torch.equal(fused[:, c:2 * c], aud)
    assert torch.equal(fused[:, 2 * c:], attn)


def test_fuse_rejects_spatial_mismatch():
    with pytest.raises(ContractError):
        fuse(torch.rand(1, 4, 8, 8), torch.rand(1, 4, 4, 4), torch.rand(1, 1, 8, 8))
