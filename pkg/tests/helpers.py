"""Shared fixtures/helpers for the test suite.

Training-based tests reuse cached runs under tests/.cache keyed by the
training config hash, so repeated pytest invocations skip the expensive
optimisation once a matching artifact exists.
"""

import dataclasses
import json
from pathlib import Path

from avfr import world
from avfr.checkpoint import config_hash
from avfr.training import TrainConfig, Trainer

CACHE = Path(__file__).resolve().parent / ".cache"

SMOKE_N_CLIPS = 200
SMOKE_CLIP_LENGTH = 10
CLIP_SEED_STRIDE = 1_000_003


def dataset_clips(n_clips, clip_length, base_seed=0):
    return [
        world.make_clip(base_seed * CLIP_SEED_STRIDE + i, clip_length)
        for i in range(n_clips)
    ]


def smoke_config(**overrides) -> TrainConfig:
    cfg = dict(
        K=10, H=64, W=64, c=16, base=32, bottleneck=128,
        lr=0.001, milestones=[12, 16], batch_size=10, epochs=20,
        pairs_per_clip=1, seed=0,
    )
    cfg.update(overrides)
    return TrainConfig(**cfg)


def ensure_run(name: str, cfg: TrainConfig, clips=None) -> Path:
    """Train (or reuse a cached) run and return its output directory."""
    out = CACHE / name
    tag = config_hash(dataclasses.asdict(cfg))
    tag_file = out / "config.tag"
    if (out / "final.avck").exists() and tag_file.exists():
        if tag_file.read_text() == tag:
            return out
    if clips is None:
        clips = dataset_clips(SMOKE_N_CLIPS, SMOKE_CLIP_LENGTH)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(cfg, clips, str(out))
    trainer.run()
    tag_file.write_text(tag)
    return out


def read_metrics(out: Path):
    rows = []
    with open(out / "metrics.jsonl") as fh:
        for line in fh:
            rows.append(json.loads(line))
    return rows


def val_rows(out: Path):
    return [r for r in read_metrics(out) if r.get("val")]
