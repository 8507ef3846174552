"""Run configuration: flat JSON with a preset inheritance key, AVFR_*
environment overrides, and strict key validation."""

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .training import DEFAULT_LOSS_WEIGHTS, TrainConfig

PRESETS = {
    "desk": {"H": 64, "W": 64, "c": 16, "K": 10, "bottleneck": 128},
    "paper-scale": {"H": 256, "W": 256, "c": 256, "K": 10, "bottleneck": 512},
}

ENV_PREFIX = "AVFR_"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    preset: str = "desk"
    # training
    K: int = 10
    H: int = 64
    W: int = 64
    c: int = 16
    base: int = 32
    bottleneck: int = 128
    lr: float = 0.001
    milestones: list = field(default_factory=lambda: [60, 90])
    batch_size: int = 10
    epochs: int = 20
    pairs_per_clip: int = 4
    loss_weights: dict = field(default_factory=lambda: dict(DEFAULT_LOSS_WEIGHTS))
    non_saturating: bool = False
    use_audio: bool = True
    use_structural_priors: bool = True
    seed: int = 0
    # dataset
    n_clips: int = 200
    clip_length: int = 10
    fps: float = 25.0
    # outputs
    out_dir: str = "runs/default"

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            K=self.K, H=self.H, W=self.W, c=self.c, base=self.base,
            bottleneck=self.bottleneck, lr=self.lr,
            milestones=list(self.milestones), batch_size=self.batch_size,
            epochs=self.epochs, pairs_per_clip=self.pairs_per_clip,
            loss_weights=dict(self.loss_weights),
            non_saturating=self.non_saturating, use_audio=self.use_audio,
            use_structural_priors=self.use_structural_priors, seed=self.seed)

    def to_dict(self) -> dict:
        return asdict(self)


_FIELD_TYPES = {f: t for f, t in RunConfig.__dataclass_fields__.items()}


def _coerce(name: str, value: str):
    """Coerce an env-var string to the field's type."""
    current = getattr(RunConfig(), name)
    if isinstance(current, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, (list, dict)):
        return json.loads(value)
    return value


def load_run_config(config_path=None, overrides=None, env=None) -> RunConfig:
    """Resolution order: preset defaults, then config file keys, then AVFR_*
    environment variables, then explicit flag overrides. Unknown keys are all
    reported at once."""
    env = os.environ if env is None else env
    file_values = {}
    if config_path:
        file_values = json.loads(Path(config_path).read_text())

    bad = [k for k in file_values if k not in _FIELD_TYPES]
    preset = file_values.get("preset", (overrides or {}).get("preset", "desk"))
    if preset not in PRESETS:
        bad.append(f"preset={preset!r}")
    env_values = {}
    for key, raw in env.items():
        if not key.startswith(ENV_PREFIX):
            continue
        name = key[len(ENV_PREFIX):].lower()
        if name not in _FIELD_TYPES:
            bad.append(key)
            continue
        try:
            env_values[name] = _coerce(name, raw)
        except (ValueError, json.JSONDecodeError):
            bad.append(f"{key}={raw!r}")
    if overrides:
        for k in overrides:
            if k not in _FIELD_TYPES:
                bad.append(k)
    if bad:
        raise ConfigError("invalid configuration keys: " + ", ".join(sorted(set(map(str, bad)))))

    values = dict(PRESETS[preset], preset=preset)
    values.update(file_values)
    values.update(env_values)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig(**values)


def echo_config(config: RunConfig, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2))
