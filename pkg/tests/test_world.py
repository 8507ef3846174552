import hashlib
import subprocess
import sys

import numpy as np
import pytest

from avfr import world


def frames_digest(clip):
    h = hashlib.sha256()
    for f in clip.frames:
        h.update(np.ascontiguousarray(f.pixels).tobytes())
    return h.hexdigest()


# ----------------------------------------------------------------- geometry

def test_mouth_gap_closed_is_floor():
    assert world.mouth_gap(0.0) == pytest.approx(world.GAP_MIN)


def test_mouth_gap_derived_values():
    # gap(a) = (0.012 + 0.10 a) * scale, computed independently
    assert world.mouth_gap(0.25) == pytest.approx(0.012 + 0.10 * 0.25, abs=1e-12)
    assert world.mouth_gap(0.5) == pytest.approx(0.062, abs=1e-12)
    assert world.mouth_gap(1.0, scale=2.0) == pytest.approx(0.224, abs=1e-12)


def test_mouth_aperture_monotone_in_rendered_area():
    # rendered mouth pixel mass must be strictly increasing in aperture
    masses = []
    for a in np.linspace(0.0, 1.0, 20):
        pose = world.ScenePose(mouth_aperture=float(a))
        frame = world.render_scene(pose, identity_seed=3, resolution=(64, 64))[0].pixels
        red = np.clip(frame[..., 0] - frame[..., 1] - frame[..., 2], 0, None)
        masses.append(red.sum())
    diffs = np.diff(masses)
    assert np.all(diffs > 0)


def test_render_deterministic_bitwise():
    pose = world.ScenePose(head_center=(0.52, 0.49), scale=1.05, head_angle=0.1,
                           mouth_aperture=0.4, eye_openness=0.8)
    fa, pa, la = world.render_scene(pose, identity_seed=11, resolution=(64, 64))
    fb, pb, lb = world.render_scene(pose, identity_seed=11, resolution=(64, 64))
    assert np.array_equal(fa.pixels, fb.pixels)
    assert np.array_equal(pa.channels, pb.channels)
    assert np.array_equal(la, lb)


def test_render_identity_changes_appearance():
    pose = world.ScenePose()
    a = world.render_scene(pose, identity_seed=1, resolution=(64, 64))[0].pixels
    b = world.render_scene(pose, identity_seed=2, resolution=(64, 64))[0].pixels
    assert np.abs(a - b).mean() > 0.01


def test_prior_consistency_segmentation_covers_mesh():
    pose = world.ScenePose(mouth_aperture=0.6)
    prior = world.render_scene(pose, identity_seed=5, resolution=(64, 64))[1]
    mesh_on = prior.mesh > 0
    assert np.all(prior.segmentation[mesh_on] > 0)


def test_landmark_count_and_range():
    lms = world.landmark_positions(world.ScenePose(), identity_seed=4)
    assert lms.shape == (world.NUM_LANDMARKS, 2)
    assert np.all((lms >= 0.0) & (lms <= 1.0))


def test_landmarks_track_mouth_aperture():
    closed = world.landmark_positions(world.ScenePose(mouth_aperture=0.0), 4)
    open_ = world.landmark_positions(world.ScenePose(mouth_aperture=1.0), 4)
    gap_closed = closed[world.LM_MOUTH_BOTTOM, 1] - closed[world.LM_MOUTH_TOP, 1]
    gap_open = open_[world.LM_MOUTH_BOTTOM, 1] - open_[world.LM_MOUTH_TOP, 1]
    assert gap_open > gap_closed


# -------------------------------------------------------------------- audio

def test_synth_audio_sample_count():
    audio = world.synth_audio(np.zeros(5), fps=25.0)
    assert audio.shape == (3200,)  # 5 frames / 25 fps * 16 kHz


def test_synth_audio_closed_mouth_rms_floor():
    audio = world.synth_audio(np.zeros(25), fps=25.0).astype(np.float64)
    rms = np.sqrt(np.mean(audio ** 2))
    assert rms == pytest.approx(world.RMS_FLOOR, abs=1e-3)


def test_synth_audio_full_aperture_rms():
    # constant aperture 1.0 for one second: RMS = 0.05 + 0.25 = 0.30
    audio = world.synth_audio(np.ones(25), fps=25.0).astype(np.float64)
    rms = np.sqrt(np.mean(audio ** 2))
    assert rms == pytest.approx(world.RMS_FLOOR + world.RMS_SLOPE, abs=1e-3)


def test_synth_audio_peak_near_middle_frame_center():
    # aperture [0,1,0]: sliding-window RMS peaks within 1 ms of the middle
    # frame's center, (1 + 0.5)/25 s = 0.06 s
    fps, sr = 25.0, 16000
    audio = world.synth_audio(np.array([0.0, 1.0, 0.0]), fps=fps).astype(np.float64)
    win = 160  # 10 ms
    sq = audio ** 2
    csum = np.concatenate([[0.0], np.cumsum(sq)])
    energy = csum[win:] - csum[:-win]
    peak_center = (np.argmax(energy) + win / 2) / sr
    assert abs(peak_center - 0.06) < 1e-3


def test_measure_rms_track_recovers_envelope():
    rng = np.random.default_rng(0)
    track = rng.uniform(0.0, 1.0, 8)
    audio = world.synth_audio(track, fps=25.0)
    measured = world.measure_rms_track(audio, n_frames=8, fps=25.0, sample_rate=16000)
    expected = world.RMS_FLOOR + world.RMS_SLOPE * track
    assert np.max(np.abs(measured - expected)) < 1e-4


def test_audio_video_coupling_exact():
    clip = world.make_clip(seed=21, n_frames=12)
    apertures = np.array([p.mouth_aperture for p in clip.poses])
    measured = world.measure_rms_track(clip.audio, len(clip), clip.fps, clip.sample_rate)
    corr = np.corrcoef(apertures, measured)[0, 1]
    assert corr > 1 - 1e-6


def test_synth_audio_empty_track_rejected():
    with pytest.raises(ValueError):
        world.synth_audio(np.zeros(0), fps=25.0)
    with pytest.raises(ValueError):
        world.synth_audio(np.full(5, 2.0), fps=25.0)


# --------------------------------------------------------------------- clips

def test_make_clip_shapes_and_audio_length():
    clip = world.make_clip(seed=3, n_frames=10, fps=25.0)
    assert len(clip) == 10
    assert clip.audio.shape == (6400,)
    assert clip.frames[0].pixels.shape == (64, 64, 3)
    assert len(clip.priors) == 10 and len(clip.landmarks) == 10


def test_make_clip_smoothness_bound():
    clip = world.make_clip(seed=17, n_frames=16)
    centers = np.array([p.head_center for p in clip.poses])
    deltas = np.linalg.norm(np.diff(centers, axis=0), axis=1)
    assert np.all(deltas <= world.SMOOTHNESS_BOUND + 1e-9)


def test_make_clip_deterministic_same_process():
    a = world.make_clip(seed=42, n_frames=6)
    b = world.make_clip(seed=42, n_frames=6)
    assert frames_digest(a) == frames_digest(b)
    assert np.array_equal(a.audio, b.audio)


def test_make_clip_deterministic_across_processes():
    code = (
        "import hashlib, numpy as np\n"
        "from avfr import world\n"
        "c = world.make_clip(seed=42, n_frames=6)\n"
        "h = hashlib.sha256()\n"
        "for f in c.frames: h.update(np.ascontiguousarray(f.pixels).tobytes())\n"
        "h.update(np.ascontiguousarray(c.audio).tobytes())\n"
        "print(h.hexdigest())\n"
    )
    runs = {
        subprocess.run([sys.executable, "-c", code], capture_output=True,
                       text=True, check=True).stdout.strip()
        for _ in range(2)
    }
    assert len(runs) == 1


def test_make_clip_different_seeds_differ():
    a = world.make_clip(seed=1, n_frames=6)
    b = world.make_clip(seed=2, n_frames=6)
    assert frames_digest(a) != frames_digest(b)


def test_make_clip_rejects_short_clips():
    with pytest.raises(ValueError):
        world.make_clip(seed=0, n_frames=4)


def test_render_rejects_bad_resolution():
    with pytest.raises(world.ConfigurationError):
        world.render_scene(world.ScenePose(), 0, resolution=(0, 64))


def test_pose_validation():
    assert world.ScenePose(mouth_aperture=1.5).mouth_aperture == 1.0
    with pytest.raises(ValueError):
        world.ScenePose(scale=-1.0)
    with pytest.raises(ValueError):
        world.ScenePose(head_angle=float("nan"))


# ---------------------------------------------------------------- round trip

def test_clip_disk_round_trip_bit_exact(tmp_path, tiny_clip):
    world.save_clip(tiny_clip, tmp_path / "clip")
    loaded = world.load_clip(tmp_path / "clip", with_priors=True)
    assert loaded.fps == tiny_clip.fps
    assert loaded.sample_rate == tiny_clip.sample_rate
    for a, b in zip(tiny_clip.frames, loaded.frames):
        assert np.array_equal(a.pixels, b.pixels)
    assert np.array_equal(tiny_clip.audio, loaded.audio)
    for a, b in zip(tiny_clip.priors, loaded.priors):
        assert np.allclose(a.mesh, b.mesh, atol=1e-6)
        assert np.array_equal(a.segmentation > 0, b.segmentation > 0)
    for a, b in zip(tiny_clip.landmarks, loaded.landmarks):
        assert np.allclose(a, b, atol=1e-6)
