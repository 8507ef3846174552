"""Procedural audiovisual scenes: parametric 2D faces with exact landmarks,
mesh/segmentation prior channels, and amplitude-modulated audio tied to the
mouth aperture.

Geometry conventions
--------------------
Positions are normalized to [0, 1]^2 with x to the right and y down; a pixel
(row r, col c) of an HxW image sits at (c/(W-1), r/(H-1)).

The mouth landmark pair (top, bottom) is separated, along the face's local
vertical axis, by the closed-form gap

    gap(a) = (GAP_MIN + GAP_RANGE * a) * pose.scale

which is strictly increasing in the aperture ``a``.

The audio carrier is a CARRIER_HZ sine whose envelope is piecewise-linear
between frame centers; the per-frame RMS equals

    rms(a) = RMS_FLOOR + RMS_SLOPE * a
"""

from __future__ import annotations

import hashlib
import json
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

CARRIER_HZ = 220.0
DEFAULT_SAMPLE_RATE = 16000
RMS_FLOOR = 0.05
RMS_SLOPE = 0.25
GAP_MIN = 0.012
GAP_RANGE = 0.10
NUM_LANDMARKS = 12
# Maximum allowed per-frame head_center displacement in normalized units.
SMOOTHNESS_BOUND = 0.02

# Landmark index layout (L = 12).
LM_MOUTH_TOP, LM_MOUTH_BOTTOM, LM_MOUTH_LEFT, LM_MOUTH_RIGHT = 0, 1, 2, 3
LM_LEYE_TOP, LM_LEYE_BOTTOM, LM_REYE_TOP, LM_REYE_BOTTOM = 4, 5, 6, 7
LM_HEAD_TOP, LM_HEAD_BOTTOM, LM_HEAD_LEFT, LM_HEAD_RIGHT = 8, 9, 10, 11


class ConfigurationError(ValueError):
    """Invalid resolution or other scene configuration problems."""


@dataclass
class ScenePose:
    head_center: tuple[float, float] = (0.5, 0.5)
    head_angle: float = 0.0
    mouth_aperture: float = 0.5
    eye_openness: float = 1.0
    scale: float = 1.0

    def __post_init__(self):
        vals = [*self.head_center, self.head_angle, self.mouth_aperture,
                self.eye_openness, self.scale]
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("ScenePose fields must be finite")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        self.mouth_aperture = float(np.clip(self.mouth_aperture, 0.0, 1.0))
        self.eye_openness = float(np.clip(self.eye_openness, 0.0, 1.0))


@dataclass
class Frame:
    pixels: np.ndarray  # HxWx3 float32 in [0,1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class PriorStack:
    channels: np.ndarray  # HxWx5: RGB, mesh, segmentation

    @property
    def rgb(self) -> np.ndarray:
        return self.channels[..., :3]

    @property
    def mesh(self) -> np.ndarray:
        return self.channels[..., 3]

    @property
    def segmentation(self) -> np.ndarray:
        return self.channels[..., 4]


@dataclass
class Clip:
    frames: list[Frame]
    poses: list[ScenePose]
    landmarks: list[np.ndarray]  # each Lx2 in [0,1]
    audio: np.ndarray  # mono float32
    sample_rate: int
    fps: float
    seed: int | None = None
    identity_seed: int | None = None
    priors: list[PriorStack] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.frames)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for f in self.frames:
            h.update(np.ascontiguousarray(f.pixels).tobytes())
        h.update(np.ascontiguousarray(self.audio).tobytes())
        for lm in self.landmarks:
            h.update(np.ascontiguousarray(lm).tobytes())
        return h.hexdigest()


def mouth_gap(aperture: float, scale: float = 1.0) -> float:
    """Closed-form separation of the mouth top/bottom landmarks."""
    return (GAP_MIN + GAP_RANGE * float(aperture)) * float(scale)


def _identity_params(identity_seed: int) -> dict:
    rng = np.random.default_rng(identity_seed)
    params = {
        "bg_color": rng.uniform([0.08, 0.12, 0.18], [0.22, 0.30, 0.40]),
        "skin_color": rng.uniform([0.62, 0.42, 0.32], [0.85, 0.62, 0.50]),
        "eye_color": rng.uniform([0.03, 0.03, 0.05], [0.16, 0.16, 0.20]),
        "mouth_color": rng.uniform([0.74, 0.02, 0.03], [0.94, 0.10, 0.12]),
        "face_ax": rng.uniform(0.24, 0.30),
        "face_ay": rng.uniform(0.33, 0.40),
        "eye_dx": rng.uniform(0.10, 0.13),
        "eye_dy": rng.uniform(0.10, 0.14),
        "eye_rx": rng.uniform(0.045, 0.06),
        "eye_ry_max": rng.uniform(0.028, 0.040),
        "mouth_dy": rng.uniform(0.16, 0.21),
        "mouth_rx": rng.uniform(0.13, 0.18),
        # Static clutter behind the head, painted in the identity's own skin
        # tone so the face outline is locally invisible in RGB where a blob
        # touches the head; the segmentation channel is then the only
        # reliable way to localize the head boundary. The blobs never move
        # within a clip, so they are trivial to reconstruct, and they are
        # confined to the upper part of the frame, away from the mouth
        # region.
        "blob_centers": np.stack([rng.uniform(0.05, 0.95, size=4),
                                  rng.uniform(0.05, 0.28, size=4)], axis=-1),
        "blob_radii": rng.uniform(0.10, 0.20, size=(4, 2)),
        "blob_dim": rng.uniform(0.85, 1.0, size=(4, 1)),
    }
    params["blob_colors"] = params["blob_dim"] * params["skin_color"]
    return params


def _rot(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def _ellipse_field(xn, yn, center, rx, ry, angle, px_scale):
    """Approximate signed distance (in pixels) to an ellipse boundary."""
    d = np.stack([xn - center[0], yn - center[1]], axis=-1) @ _rot(angle)
    f = np.sqrt((d[..., 0] / rx) ** 2 + (d[..., 1] / ry) ** 2 + 1e-12)
    return (f - 1.0) * min(rx, ry) * px_scale


def _coverage(dist_px):
    return np.clip(0.5 - dist_px, 0.0, 1.0)


def landmark_positions(pose: ScenePose, identity_seed: int) -> np.ndarray:
    """Exact landmark coordinates, independent of rasterization."""
    p = _identity_params(identity_seed)
    c = np.asarray(pose.head_center)
    s = pose.scale
    R = _rot(pose.head_angle)

    def at(offset):
        return c + R @ (np.asarray(offset) * s)

    gap = mouth_gap(pose.mouth_aperture, s)
    mouth_c = np.asarray([0.0, p["mouth_dy"]])
    eye_ry = 0.006 + p["eye_ry_max"] * pose.eye_openness
    leye = np.asarray([-p["eye_dx"], -p["eye_dy"]])
    reye = np.asarray([p["eye_dx"], -p["eye_dy"]])

    lm = np.stack([
        at(mouth_c + [0.0, -gap / (2 * s)]),
        at(mouth_c + [0.0, gap / (2 * s)]),
        at(mouth_c + [-p["mouth_rx"], 0.0]),
        at(mouth_c + [p["mouth_rx"], 0.0]),
        at(leye + [0.0, -eye_ry]),
        at(leye + [0.0, eye_ry]),
        at(reye + [0.0, -eye_ry]),
        at(reye + [0.0, eye_ry]),
        at([0.0, -p["face_ay"]]),
        at([0.0, p["face_ay"]]),
        at([-p["face_ax"], 0.0]),
        at([p["face_ax"], 0.0]),
    ])
    return lm.astype(np.float64)


def render_scene(pose: ScenePose, identity_seed: int,
                 resolution: tuple[int, int]) -> tuple[Frame, PriorStack, np.ndarray]:
    """Rasterize one scene. Deterministic in (pose, identity_seed, resolution)."""
    h, w = resolution
    if h <= 0 or w <= 0 or h % 4 != 0 or w % 4 != 0:
        raise ConfigurationError(f"resolution must be positive multiples of 4, got {resolution}")

    p = _identity_params(identity_seed)
    s = pose.scale
    c = pose.head_center
    ang = pose.head_angle
    px = float(min(h, w) - 1)

    ys, xs = np.mgrid[0:h, 0:w]
    xn = xs / (w - 1)
    yn = ys / (h - 1)

    d_head = _ellipse_field(xn, yn, c, p["face_ax"] * s, p["face_ay"] * s, ang, px)

    lm = landmark_positions(pose, identity_seed)
    eye_ry = (0.006 + p["eye_ry_max"] * pose.eye_openness) * s
    gap = mouth_gap(pose.mouth_aperture, s)
    R = _rot(ang)
    leye_c = c + R @ np.asarray([-p["eye_dx"], -p["eye_dy"]]) * s
    reye_c = c + R @ np.asarray([p["eye_dx"], -p["eye_dy"]]) * s
    mouth_c = c + R @ np.asarray([0.0, p["mouth_dy"]]) * s

    d_leye = _ellipse_field(xn, yn, leye_c, p["eye_rx"] * s, eye_ry, ang, px)
    d_reye = _ellipse_field(xn, yn, reye_c, p["eye_rx"] * s, eye_ry, ang, px)
    d_mouth = _ellipse_field(xn, yn, mouth_c, p["mouth_rx"] * s, gap / 2, ang, px)

    img = np.empty((h, w, 3))
    img[:] = p["bg_color"]
    for center, (rx, ry), color in zip(p["blob_centers"], p["blob_radii"],
                                       p["blob_colors"]):
        d_blob = _ellipse_field(xn, yn, center, rx, ry, 0.0, px)
        a = _coverage(d_blob)[..., None]
        img = img * (1 - a) + np.asarray(color) * a
    for dist, color in ((d_head, p["skin_color"]), (d_leye, p["eye_color"]),
                        (d_reye, p["eye_color"]), (d_mouth, p["mouth_color"])):
        a = _coverage(dist)[..., None]
        img = img * (1 - a) + np.asarray(color) * a

    # 8-bit quantization here makes the on-disk PNG round-trip bit-exact
    # (same op order as load_clip: uint8 -> float32 / 255).
    img_u8 = np.round(np.clip(img, 0, 1) * 255.0).astype(np.uint8)
    frame = Frame(pixels=img_u8.astype(np.float32) / 255.0)

    seg = (d_head <= 0).astype(np.float32)
    mesh = np.zeros((h, w), dtype=np.float64)
    for dist in (d_head, d_leye, d_reye, d_mouth):
        mesh = np.maximum(mesh, np.clip(1.0 - np.abs(dist) / 1.5, 0.0, 1.0))
    mesh = (mesh * seg).astype(np.float32)

    channels = np.concatenate(
        [frame.pixels, mesh[..., None], seg[..., None]], axis=-1)
    return frame, PriorStack(channels=channels), lm


def neutral_prior_stack(frame: Frame) -> PriorStack:
    """Prior provider for frames without scene metadata (e.g. codec anchors):
    full-frame segmentation and an empty mesh channel."""
    h, w = frame.pixels.shape[:2]
    channels = np.concatenate(
        [frame.pixels,
         np.zeros((h, w, 1), dtype=np.float32),
         np.ones((h, w, 1), dtype=np.float32)], axis=-1)
    return PriorStack(channels=channels)


def synth_audio(aperture_track, fps: float, sample_rate: int = DEFAULT_SAMPLE_RATE,
                n_samples: int | None = None) -> np.ndarray:
    """Amplitude-modulated sine whose per-frame RMS is RMS_FLOOR + RMS_SLOPE * a."""
    track = np.asarray(aperture_track, dtype=np.float64)
    if track.size == 0:
        raise ValueError("aperture track must be nonempty")
    if sample_rate < 8000:
        raise ValueError("sample_rate must be >= 8000")
    if np.any(track < 0) or np.any(track > 1):
        raise ValueError("apertures must lie in [0, 1]")

    n = int(round(len(track) / fps * sample_rate)) if n_samples is None else n_samples
    t = np.arange(n) / sample_rate
    centers = (np.arange(len(track)) + 0.5) / fps
    rms = RMS_FLOOR + RMS_SLOPE * track
    env = np.interp(t, centers, rms * np.sqrt(2.0))
    wav = env * np.sin(2 * np.pi * CARRIER_HZ * t)
    # Quantize to the int16 grid so the WAV round-trip is bit-exact.
    return (np.round(wav * 32767.0) / 32767.0).astype(np.float32)


def measure_rms_track(audio: np.ndarray, n_frames: int, fps: float,
                      sample_rate: int, carrier_hz: float = CARRIER_HZ) -> np.ndarray:
    """Per-frame RMS of the carrier envelope, recovered by least-squares
    demodulation at the known carrier frequency.

    The synthetic waveform is exactly env(t)*sin(2*pi*f*t) with env
    piecewise-linear and knots at frame centers, so fitting
    (e_i, left slope, right slope) over a few samples around each center
    recovers the envelope to float precision.
    """
    audio = np.asarray(audio, dtype=np.float64)
    out = np.empty(n_frames)
    half = 4
    for i in range(n_frames):
        tc = (i + 0.5) / fps
        n0 = int(round(tc * sample_rate))
        lo, hi = max(0, n0 - half), min(len(audio), n0 + half + 1)
        t = np.arange(lo, hi) / sample_rate
        s = np.sin(2 * np.pi * carrier_hz * t)
        dt = t - tc
        A = np.stack([s, s * np.minimum(dt, 0), s * np.maximum(dt, 0)], axis=1)
        coef, *_ = np.linalg.lstsq(A, audio[lo:hi], rcond=None)
        out[i] = coef[0] / np.sqrt(2.0)
    return out


def make_clip(seed: int, n_frames: int, fps: float = 25.0,
              resolution: tuple[int, int] = (64, 64),
              sample_rate: int = DEFAULT_SAMPLE_RATE,
              identity_seed: int | None = None,
              with_priors: bool = True) -> Clip:
    """Generate a deterministic clip with a smooth pose trajectory."""
    if n_frames < 5:
        raise ValueError("n_frames must be >= 5 (a 200ms window must fit)")
    rng = np.random.default_rng(seed)
    if identity_seed is None:
        identity_seed = int(rng.integers(0, 2**31 - 1))

    t = np.arange(n_frames) / fps
    # Low-frequency sinusoids: per-frame deltas stay below SMOOTHNESS_BOUND
    # by construction (amplitude * 2*pi*freq / fps <= 0.05*2*pi*0.5/25).
    def osc(amp, fmax):
        f = rng.uniform(0.1, fmax)
        ph = rng.uniform(0, 2 * np.pi)
        return amp * np.sin(2 * np.pi * f * t + ph)

    cx = 0.5 + osc(rng.uniform(0.01, 0.04), 0.5)
    cy = 0.5 + osc(rng.uniform(0.01, 0.04), 0.5)
    angle = osc(rng.uniform(0.05, 0.15), 0.5)
    aperture = np.clip(0.5 + 0.55 * np.sin(2 * np.pi * rng.uniform(0.8, 2.0) * t
                                           + rng.uniform(0, 2 * np.pi)), 0, 1)
    openness = np.clip(0.75 + 0.3 * np.sin(2 * np.pi * rng.uniform(0.2, 0.6) * t
                                           + rng.uniform(0, 2 * np.pi)), 0, 1)
    scale = float(rng.uniform(0.85, 1.05))

    frames, poses, landmarks, priors = [], [], [], []
    for i in range(n_frames):
        pose = ScenePose(head_center=(float(cx[i]), float(cy[i])),
                         head_angle=float(angle[i]),
                         mouth_aperture=float(aperture[i]),
                         eye_openness=float(openness[i]),
                         scale=scale)
        frame, prior, lm = render_scene(pose, identity_seed, resolution)
        frames.append(frame)
        poses.append(pose)
        landmarks.append(lm)
        if with_priors:
            priors.append(prior)

    audio = synth_audio(aperture, fps, sample_rate)
    return Clip(frames=frames, poses=poses, landmarks=landmarks, audio=audio,
                sample_rate=sample_rate, fps=fps, seed=seed,
                identity_seed=identity_seed, priors=priors)


def save_clip(clip: Clip, out_dir) -> None:
    """On-disk layout: frames/%05d.png, audio.wav, meta.json."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(clip.frames):
        arr = np.round(f.pixels * 255.0).astype(np.uint8)
        Image.fromarray(arr).save(out / "frames" / f"{i:05d}.png")
    pcm = np.round(np.asarray(clip.audio, dtype=np.float64) * 32767.0).astype("<i2")
    with wave.open(str(out / "audio.wav"), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate)
        wf.writeframes(pcm.tobytes())
    meta = {
        "fps": clip.fps,
        "sample_rate": clip.sample_rate,
        "seed": clip.seed,
        "identity_seed": clip.identity_seed,
        "poses": [{"head_center": list(p.head_center), "head_angle": p.head_angle,
                   "mouth_aperture": p.mouth_aperture, "eye_openness": p.eye_openness,
                   "scale": p.scale} for p in clip.poses],
        "landmarks": [lm.tolist() for lm in clip.landmarks],
    }
    (out / "meta.json").write_text(json.dumps(meta))


def load_clip(clip_dir, with_priors: bool = False) -> Clip:
    src = Path(clip_dir)
    meta = json.loads((src / "meta.json").read_text())
    frames = []
    for path in sorted((src / "frames").glob("*.png")):
        arr = np.asarray(Image.open(path), dtype=np.float32) / 255.0
        frames.append(Frame(pixels=arr))
    with wave.open(str(src / "audio.wav"), "rb") as wf:
        pcm = np.frombuffer(wf.readframes(wf.getnframes()), dtype="<i2")
        sample_rate = wf.getframerate()
    audio = (pcm.astype(np.float64) / 32767.0).astype(np.float32)
    poses = [ScenePose(head_center=tuple(p["head_center"]), head_angle=p["head_angle"],
                       mouth_aperture=p["mouth_aperture"], eye_openness=p["eye_openness"],
                       scale=p["scale"]) for p in meta["poses"]]
    landmarks = [np.asarray(lm, dtype=np.float64) for lm in meta["landmarks"]]
    priors = []
    if with_priors and meta.get("identity_seed") is not None:
        res = frames[0].pixels.shape[:2]
        for pose in poses:
            _, prior, _ = render_scene(pose, meta["identity_seed"], res)
            priors.append(prior)
    return Clip(frames=frames, poses=poses, landmarks=landmarks, audio=audio,
                sample_rate=sample_rate, fps=meta["fps"], seed=meta.get("seed"),
                identity_seed=meta.get("identity_seed"), priors=priors)
