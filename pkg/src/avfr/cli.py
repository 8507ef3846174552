"""Command-line entry point: dataset generation, training, reenactment,
evaluation, and keypoint-stream compression."""

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import codec, metrics, world
from .config import ConfigError, echo_config, load_run_config
from .training import Trainer, load_trained_model


def _fail(message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


def _config(config_path, seed, preset, out):
    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
    if preset is not None:
        overrides["preset"] = preset
    if out is not None:
        overrides["out_dir"] = str(out)
    try:
        return load_run_config(config_path, overrides)
    except ConfigError as exc:
        _fail(str(exc))


common_options = [
    click.option("--config", "config_path", type=click.Path(exists=True), default=None),
    click.option("--seed", type=int, default=None),
    click.option("--preset", type=str, default=None),
    click.option("--out", type=click.Path(), default=None),
]


def with_common(f):
    for opt in reversed(common_options):
        f = opt(f)
    return f


@click.group()
def main():
    """Audio-visual face reenactment toolkit."""


@main.command()
@with_common
@click.option("--force", is_flag=True, default=False)
def dataset(config_path, seed, preset, out, force):
    """Generate a synthetic clip dataset with a manifest."""
    cfg = _config(config_path, seed, preset, out)
    out_dir = Path(cfg.out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        _fail(f"output directory {out_dir} is not empty (use --force)")
    out_dir.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out_dir)
    entries = []
    for i in range(cfg.n_clips):
        clip_seed = cfg.seed * 1_000_003 + i
        clip = world.make_clip(clip_seed, cfg.clip_length, cfg.fps,
                               (cfg.H, cfg.W), with_priors=False)
        clip_dir = out_dir / f"clip_{i:05d}"
        world.save_clip(clip, clip_dir)
        entries.append({"index": i, "seed": clip_seed,
                        "identity_seed": clip.identity_seed,
                        "path": clip_dir.name, "n_frames": len(clip)})
    (out_dir / "manifest.json").write_text(json.dumps(
        {"seed": cfg.seed, "n_clips": cfg.n_clips,
         "clip_length": cfg.clip_length, "clips": entries}, indent=2))
    click.echo(f"wrote {cfg.n_clips} clips to {out_dir}")


def load_dataset(dataset_dir, with_priors=True):
    manifest = json.loads((Path(dataset_dir) / "manifest.json").read_text())
    return [world.load_clip(Path(dataset_dir) / e["path"], with_priors=with_priors)
            for e in manifest["clips"]]


@main.command()
@with_common
@click.option("--dataset", "dataset_dir", type=click.Path(exists=True), required=True)
def train(config_path, seed, preset, out, dataset_dir):
    """Train on a generated dataset; checkpoints and metrics land in --out."""
    cfg = _config(config_path, seed, preset, out)
    out_dir = Path(cfg.out_dir)
    echo_config(cfg, out_dir)
    clips = load_dataset(dataset_dir)
    trainer = Trainer(cfg.train_config(), clips, out_dir)
    history = trainer.run()
    last_val = [h for h in history if h.get("val")][-1]
    click.echo(f"done: epoch {cfg.epochs} val_l1={last_val['val_l1']:.4f} "
               f"val_ssim={last_val['val_ssim']:.4f}")


@main.command()
@with_common
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--source-clip", type=click.Path(exists=True), required=True,
              help="clip directory whose frame 0 is the source")
@click.option("--driving-clip", type=click.Path(exists=True), required=True)
@click.option("--mode", type=click.Choice(["same-id", "cross-id"]), default="same-id")
def reenact(config_path, seed, preset, out, checkpoint, source_clip, driving_clip, mode):
    """Animate a source frame with a driving clip."""
    cfg = _config(config_path, seed, preset, out)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out_dir)
    src = world.load_clip(source_clip, with_priors=True)
    drv = world.load_clip(driving_clip, with_priors=True)
    job = metrics.ReenactmentJob(source=src.frames[0], driving=drv,
                                 mode=mode.replace("-", "_"),
                                 checkpoint_path=checkpoint,
                                 source_prior=src.priors[0])
    generated = metrics.reenact(job)
    world.save_clip(generated, out_dir / "generated")
    click.echo(f"wrote {len(generated)} frames to {out_dir / 'generated'}")


@main.command(name="eval")
@with_common
@click.option("--checkpoint", type=click.Path(exists=True), default=None)
@click.option("--reference-clip", type=click.Path(exists=True), required=True)
@click.option("--generated-clip", type=click.Path(exists=True), default=None,
              help="score an existing clip instead of reenacting")
@click.option("--mode", type=click.Choice(["same-id", "cross-id"]), default="same-id")
def eval_cmd(config_path, seed, preset, out, checkpoint, reference_clip,
             generated_clip, mode):
    """Evaluate reenactment quality against a reference clip."""
    cfg = _config(config_path, seed, preset, out)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out_dir)
    reference = world.load_clip(reference_clip, with_priors=True)
    if generated_clip:
        generated = world.load_clip(generated_clip)
    elif checkpoint:
        # Same-identity protocol: frame 0 is the source, the rest drives.
        drv = world.Clip(frames=reference.frames[1:], poses=reference.poses[1:],
                         landmarks=reference.landmarks[1:],
                         audio=world.synth_audio(
                             [p.mouth_aperture for p in reference.poses[1:]],
                             reference.fps, reference.sample_rate),
                         sample_rate=reference.sample_rate, fps=reference.fps,
                         priors=reference.priors[1:])
        job = metrics.ReenactmentJob(source=reference.frames[0], driving=drv,
                                     mode=mode.replace("-", "_"),
                                     checkpoint_path=checkpoint,
                                     source_prior=reference.priors[0])
        generated = metrics.reenact(job)
        reference = drv
    else:
        _fail("need either --checkpoint or --generated-clip")
    if mode == "same-id":
        report = metrics.evaluate_same_id(generated, reference)
    else:
        report = metrics.evaluate_cross_id(generated, reference.frames)
    (out_dir / "report.json").write_text(report.to_json())
    click.echo(report.table_row())


@main.command()
@with_common
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--clip", "clip_dir", type=click.Path(exists=True), required=True)
def compress(config_path, seed, preset, out, checkpoint, clip_dir):
    """Detect keypoints on a clip and write an .avkp stream."""
    cfg = _config(config_path, seed, preset, out)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out_dir)
    model, _, _ = load_trained_model(checkpoint)
    clip = world.load_clip(clip_dir, with_priors=True)
    data = codec.compress_clip(clip, model)
    path = out_dir / "stream.avkp"
    path.write_bytes(data)
    h, w = clip.frames[0].pixels.shape[:2]
    rates = codec.bpp(model.num_kp, w, h)
    click.echo(f"wrote {len(data)} bytes to {path} (bpp={rates['bpp']:.6f})")


@main.command()
@with_common
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--stream", type=click.Path(exists=True), required=True)
def decompress(config_path, seed, preset, out, checkpoint, stream):
    """Render a clip from an .avkp stream and a checkpoint."""
    cfg = _config(config_path, seed, preset, out)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out_dir)
    try:
        clip = codec.receive_and_render(Path(stream).read_bytes(), checkpoint)
    except (codec.StreamFormatError, ValueError) as exc:
        _fail(str(exc))
    world.save_clip(clip, out_dir / "decoded")
    click.echo(f"decoded {len(clip)} frames to {out_dir / 'decoded'}")


@main.command()
@click.argument("report_path", type=click.Path(exists=True))
def report(report_path):
    """Render a metric report as a table row."""
    rep = metrics.MetricReport.from_json(Path(report_path).read_text())
    click.echo("L1     | PSNR    | SSIM   | FID    | LMD    | AED    | Sync")
    click.echo(rep.table_row())


if __name__ == "__main__":
    main()
