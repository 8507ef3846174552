"""AVKP keypoint-stream container: one PNG anchor frame followed by per-frame
keypoint packets of K x 6 FP16 values.

Byte layout (little-endian throughout):
    0:4    magic b"AVKP"
    4:6    version (u16), currently 1
    6:8    K, keypoints per frame (u16)
    8:10   width (u16)
    10:12  height (u16)
    12:16  fps (f32)
    16:20  frame_count (u32)
    20:24  anchor PNG byte length (u32)
    ...    anchor PNG bytes
    ...    frame_count packets, each K*6*2 bytes: per keypoint
           (x, y, J00, J01, J10, J11) as IEEE-754 half precision,
           round-to-nearest-even, row-major by keypoint index.

For K=10 a packet is exactly 120 bytes = 960 bits.
"""

import io
import struct
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image

from . import world
from .keypoints import KeypointSet
from .model import frames_to_tensor, priors_to_tensor

MAGIC = b"AVKP"
VERSION = 1
HEADER = struct.Struct("<4sHHHHfI")
FLOATS_PER_KP = 6
FP16_MAX = 65504.0


class StreamFormatError(ValueError):
    pass


@dataclass
class StreamMeta:
    K: int
    width: int
    height: int
    fps: float
    frame_count: int


def packet_size(k: int) -> int:
    return k * FLOATS_PER_KP * 2


def keypoints_to_packet(kp: KeypointSet, frame_index: int = 0) -> bytes:
    """One frame's keypoints -> K*6*2 bytes of FP16."""
    pos = kp.positions.detach().cpu().numpy().reshape(-1, 2)
    jac = kp.jacobians.detach().cpu().numpy().reshape(-1, 2, 2)
    vals = np.concatenate([pos, jac.reshape(-1, 4)], axis=1).astype(np.float64)
    if not np.all(np.isfinite(vals)) or np.any(np.abs(vals) > FP16_MAX):
        bad = int(np.argwhere(~(np.isfinite(vals) & (np.abs(vals) <= FP16_MAX)))[0][0])
        raise ValueError(
            f"keypoint value out of FP16 range at frame {frame_index}, keypoint {bad}")
    return vals.astype("<f2").tobytes()


def packet_to_keypoints(raw: bytes, k: int) -> KeypointSet:
    vals = np.frombuffer(raw, dtype="<f2").astype(np.float32).reshape(k, 6)
    return KeypointSet(
        positions=torch.from_numpy(vals[:, :2].copy()).unsqueeze(0),
        jacobians=torch.from_numpy(vals[:, 2:].copy()).reshape(1, k, 2, 2),
        heatmaps=torch.zeros(1, k, 1, 1))


def encode_stream(anchor: world.Frame, keypoints: list, fps: float) -> bytes:
    """Serialize the anchor frame plus per-frame keypoint packets."""
    ks = {kp.num_keypoints for kp in keypoints}
    if len(ks) > 1:
        raise ValueError(f"all keypoint sets must share K, got {sorted(ks)}")
    k = ks.pop() if ks else 0
    h, w = anchor.pixels.shape[:2]
    buf = io.BytesIO()
    Image.fromarray(np.round(anchor.pixels * 255.0).astype(np.uint8)).save(buf, "PNG")
    png = buf.getvalue()
    out = bytearray()
    out += HEADER.pack(MAGIC, VERSION, k, w, h, float(fps), len(keypoints))
    out += struct.pack("<I", len(png))
    out += png
    for i, kp in enumerate(keypoints):
        out += keypoints_to_packet(kp, i)
    return bytes(out)


def decode_stream(data: bytes) -> tuple[world.Frame, list, float]:
    if len(data) < HEADER.size or data[:4] != MAGIC:
        raise StreamFormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    magic, version, k, w, h, fps, frame_count = HEADER.unpack_from(data, 0)
    if version != VERSION:
        raise StreamFormatError(f"unsupported stream version {version}")
    off = HEADER.size
    if len(data) < off + 4:
        raise StreamFormatError(f"truncated header at byte {len(data)}")
    (png_len,) = struct.unpack_from("<I", data, off)
    off += 4
    if len(data) < off + png_len:
        raise StreamFormatError(f"truncated anchor at byte {len(data)}")
    anchor_arr = np.asarray(
        Image.open(io.BytesIO(data[off:off + png_len])), dtype=np.float32) / 255.0
    off += png_len

    size = packet_size(k)
    keypoints = []
    for i in range(frame_count):
        chunk = data[off:off + size]
        if len(chunk) < size:
            raise StreamFormatError(
                f"truncated packet for frame {i} at byte offset {off + len(chunk)}")
        keypoints.append(packet_to_keypoints(chunk, k))
        off += size
    return world.Frame(pixels=anchor_arr), keypoints, fps


def bpp(k: int, width: int, height: int, frame_count: int | None = None,
        anchor_bytes: int | None = None) -> dict:
    """Headline bits-per-pixel counts keypoint payload only; the amortized
    figure also spreads the anchor over frame_count frames."""
    headline = k * FLOATS_PER_KP * 16 / (width * height)
    out = {"bpp": headline}
    if frame_count and anchor_bytes is not None:
        out["bpp_with_anchor"] = (k * FLOATS_PER_KP * 16
                                  + anchor_bytes * 8 / frame_count) / (width * height)
    return out


def compress_clip(clip: world.Clip, model) -> bytes:
    """Detect keypoints on every frame (anchor = frame 0) and encode."""
    with torch.no_grad():
        kps = [model.detect(priors_to_tensor([p])) for p in clip.priors]
    return encode_stream(clip.frames[0], kps, clip.fps)


def receive_and_render(data: bytes, checkpoint_path=None, model=None,
                       keypoint_override=None) -> world.Clip:
    """Decode a stream and drive the generator with the anchor as source and
    the decoded keypoints as driving keypoints. No audio is transmitted, so
    the neutral audio preset is used."""
    from .training import load_trained_model
    anchor, keypoints, fps = decode_stream(data)
    if model is None:
        model, _, _ = load_trained_model(checkpoint_path)
    if keypoint_override is not None:
        keypoints = keypoint_override
    if keypoints and keypoints[0].num_keypoints != model.num_kp:
        raise ValueError(
            f"stream K={keypoints[0].num_keypoints} does not match model K={model.num_kp}")

    src_prior = priors_to_tensor([world.neutral_prior_stack(anchor)])
    src_rgb = frames_to_tensor([anchor])
    frames = []
    with torch.no_grad():
        kp_source = model.detect(src_prior)
        for kp_d in keypoints:
            out = model(src_prior, src_prior, src_rgb, mel=None,
                        kp_source=kp_source, kp_driving=kp_d)
            gen = out["generated"][0].permute(1, 2, 0).numpy().astype(np.float32)
            frames.append(world.Frame(pixels=gen))
    n = len(frames)
    audio = np.zeros(int(round(n / fps * world.DEFAULT_SAMPLE_RATE)), dtype=np.float32)
    poses = [world.ScenePose() for _ in range(n)]
    landmarks = [np.zeros((world.NUM_LANDMARKS, 2)) for _ in range(n)]
    return world.Clip(frames=frames, poses=poses, landmarks=landmarks,
                      audio=audio, sample_rate=world.DEFAULT_SAMPLE_RATE, fps=fps)
