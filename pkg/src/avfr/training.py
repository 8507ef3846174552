"""Adversarial training loop: alternating discriminator/generator steps over
frame pairs sampled from the same clip, Adam with milestone LR decay,
JSON-lines metrics, and per-epoch checkpoints."""

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .discriminator import Discriminator
from .losses import (FrozenPyramid, disc_loss, gen_loss,
                     equivariance_loss, sample_nondegenerate_tps)
from .model import ReenactmentModel, frames_to_tensor, mel_batch, priors_to_tensor

DEFAULT_LOSS_WEIGHTS = {"w_l1": 10.0, "w_per": 10.0, "w_eq": 10.0, "w_adv": 1.0}
LR_DECAY = 0.1


@dataclass
class TrainConfig:
    K: int = 10
    H: int = 64
    W: int = 64
    c: int = 16
    base: int = 32
    bottleneck: int = 128
    lr: float = 0.001
    milestones: list = field(default_factory=lambda: [60, 90])
    batch_size: int = 10
    epochs: int = 100
    pairs_per_clip: int = 4
    loss_weights: dict = field(default_factory=lambda: dict(DEFAULT_LOSS_WEIGHTS))
    non_saturating: bool = False
    use_audio: bool = True
    use_structural_priors: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size <= 0 or self.epochs <= 0 or self.pairs_per_clip <= 0:
            raise ValueError("batch_size, epochs and pairs_per_clip must be positive")
        if self.K <= 0:
            raise ValueError("K must be positive")
        if self.H % 4 or self.W % 4:
            raise ValueError("H and W must be multiples of 4")
        if any(b >= a for a, b in zip(self.milestones[1:], self.milestones)):
            raise ValueError("milestones must be strictly increasing")
        if any(w < 0 for w in self.loss_weights.values()):
            raise ValueError("loss weights must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


def build_model(config: TrainConfig) -> ReenactmentModel:
    return ReenactmentModel(resolution=(config.H, config.W), num_kp=config.K,
                            channels=config.c, base=config.base,
                            bottleneck=config.bottleneck,
                            use_audio=config.use_audio,
                            use_structural_priors=config.use_structural_priors)


def load_trained_model(path) -> tuple[ReenactmentModel, TrainConfig, dict]:
    header, tensors = ckpt.load_checkpoint(path)
    config = TrainConfig(**header["config"])
    model = build_model(config)
    ckpt.restore_model(model, {k: v for k, v in tensors.items()
                               if not k.startswith("model/disc.")})
    model.eval()
    return model, config, header


def _parameter_hash(module) -> int:
    return hash(tuple(float(p.detach().sum()) for p in module.parameters()))


class Trainer:
    def __init__(self, config: TrainConfig, clips, out_dir, n_val_clips=5):
        if not clips:
            raise ValueError("dataset must be nonempty")
        self.config = config
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        n_val_clips = min(n_val_clips, max(1, len(clips) // 10))
        self.train_clips = clips[:-n_val_clips] if len(clips) > n_val_clips else clips
        self.val_clips = clips[-n_val_clips:] if len(clips) > n_val_clips else clips[:1]

        torch.manual_seed(config.seed)
        self.model = build_model(config)
        self.discriminator = Discriminator()
        self.perceptual = FrozenPyramid()
        self.opt_gen = torch.optim.Adam(self.model.parameters(), lr=config.lr)
        self.opt_disc = torch.optim.Adam(self.discriminator.parameters(), lr=config.lr)
        self.sched_gen = torch.optim.lr_scheduler.MultiStepLR(
            self.opt_gen, milestones=config.milestones, gamma=LR_DECAY)
        self.sched_disc = torch.optim.lr_scheduler.MultiStepLR(
            self.opt_disc, milestones=config.milestones, gamma=LR_DECAY)
        self.steps_per_epoch = math.ceil(len(self.train_clips) / config.batch_size) \
            * config.pairs_per_clip
        self.global_step = 0
        self._mel_cache = {}
        self.history = []

    def _sample_batch(self, step: int):
        """Batch composition is a pure function of (seed, step)."""
        rng = np.random.default_rng([self.config.seed, step])
        idx = rng.integers(0, len(self.train_clips), size=self.config.batch_size)
        rows = []
        for ci in idx:
            clip = self.train_clips[int(ci)]
            d = int(rng.integers(0, len(clip)))
            s = int(rng.integers(0, len(clip) - 1))
            if s >= d:
                s += 1  # any other frame of the same clip
            rows.append((int(ci), s, d))
        return rows, rng

    def _batch_tensors(self, rows):
        src_priors, drv_priors, src_rgb, drv_rgb, mels = [], [], [], [], []
        for ci, s, d in rows:
            clip = self.train_clips[ci]
            src_priors.append(clip.priors[s])
            drv_priors.append(clip.priors[d])
            src_rgb.append(clip.frames[s])
            drv_rgb.append(clip.frames[d])
            key = (ci, d)
            if key not in self._mel_cache:
                self._mel_cache[key] = mel_batch(clip, [d])[0]
            mels.append(self._mel_cache[key])
        return (priors_to_tensor(src_priors), priors_to_tensor(drv_priors),
                frames_to_tensor(src_rgb), frames_to_tensor(drv_rgb),
                torch.stack(mels))

    def train_step(self, step: int) -> dict:
        rows, rng = self._sample_batch(step)
        src_prior, drv_prior, src_rgb, drv_rgb, mel = self._batch_tensors(rows)

        out = self.model(src_prior, drv_prior, src_rgb, mel)
        generated = out["generated"]

        # Discriminator step on detached fakes.
        self.opt_disc.zero_grad()
        d_loss = disc_loss(self.discriminator(drv_rgb),
                           self.discriminator(generated.detach()))
        d_loss.backward()
        self.opt_disc.step()

        # Generator step.
        tps = sample_nondegenerate_tps(rng, drv_prior.shape[0],
                                       out["kp_driving"].positions.detach())
        eq_total, _, _ = equivariance_loss(self.model.detect, drv_prior, tps)
        self.opt_gen.zero_grad()
        total, breakdown = gen_loss(
            drv_rgb, generated,
            perceptual_extractor=self.perceptual,
            fake_logits=self.discriminator(generated),
            eq_total=eq_total,
            weights=self.config.loss_weights,
            non_saturating=self.config.non_saturating)
        if not torch.isfinite(total):
            raise FloatingPointError(f"non-finite generator loss at step {step}: {breakdown}")
        total.backward()
        # The discriminator must not receive gradients from the generator step.
        self.opt_disc.zero_grad(set_to_none=True)
        self.opt_gen.step()

        return {"step": step, "total": float(total.detach()),
                "disc": float(d_loss.detach()),
                "lr": self.opt_gen.param_groups[0]["lr"], **breakdown}

    @torch.no_grad()
    def validate(self) -> dict:
        from .metrics import l1 as metric_l1, ssim as metric_ssim
        l1s, ssims = [], []
        for clip in self.val_clips:
            n = min(len(clip), 6)
            src_prior = priors_to_tensor([clip.priors[0]] * (n - 1))
            drv_prior = priors_to_tensor([clip.priors[i] for i in range(1, n)])
            src_rgb = frames_to_tensor([clip.frames[0]] * (n - 1))
            mel = mel_batch(clip, range(1, n))
            out = self.model(src_prior, drv_prior, src_rgb, mel)
            gen = out["generated"].permute(0, 2, 3, 1).numpy()
            for i in range(1, n):
                ref = clip.frames[i].pixels
                l1s.append(metric_l1(gen[i - 1], ref))
                ssims.append(metric_ssim(gen[i - 1], ref))
        return {"val_l1": float(np.mean(l1s)), "val_ssim": float(np.mean(ssims))}

    def save(self, epoch: int, name: str) -> Path:
        named, scalars = ckpt.model_blobs(self.model)
        disc_named, disc_scalars = ckpt.model_blobs(self.discriminator)
        named.update({f"model/disc.{k[len('model/'):]}" : v
                      for k, v in disc_named.items()})
        opt_named, opt_scalars = ckpt.model_blobs(
            torch.nn.Module(), {"gen": self.opt_gen, "disc": self.opt_disc})
        named.update(opt_named)
        scalars.update(opt_scalars)
        path = self.out_dir / name
        ckpt.save_checkpoint(path, named, self.config.to_dict(), epoch, scalars)
        return path

    def run(self, log_path=None) -> list:
        log_file = open(log_path or self.out_dir / "metrics.jsonl", "a")
        try:
            for epoch in range(1, self.config.epochs + 1):
                self.model.train()
                for _ in range(self.steps_per_epoch):
                    record = self.train_step(self.global_step)
                    record["epoch"] = epoch
                    log_file.write(json.dumps(record) + "\n")
                    self.history.append(record)
                    self.global_step += 1
                self.sched_gen.step()
                self.sched_disc.step()
                self.model.eval()
                val = self.validate()
                val.update({"epoch": epoch, "val": True})
                log_file.write(json.dumps(val) + "\n")
                log_file.flush()
                self.history.append(val)
                self.save(epoch, "latest.avck")
            self.save(self.config.epochs, "final.avck")
        finally:
            log_file.close()
        return self.history


def train(config: TrainConfig, clips, out_dir) -> list:
    return Trainer(config, clips, out_dir).run()
