"""Training loop: L1-only pretraining followed by alternating discriminator/generator steps.

Iterations ``[0, pretrain_iterations)`` optimize the generator on L1 alone; the
remaining iterations up to ``total_iterations`` run the adversarial game. The
batch for iteration ``i`` depends only on ``(seed, i)``, so a run resumed from
a checkpoint replays exactly the batches of an uninterrupted run.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch

from . import config as cfgio
from .checkpoint import CheckpointIntegrityError, CheckpointKindError, read_payload, write_payload
from .degradation import DegradationConfig, synthesize_lr
from .discriminator import MultiScaleDiscriminator, UNetDiscriminatorConfig, build_discriminator
from .generator import Generator, GeneratorConfig, build_generator
from .imaging import Rng, ShapeError, extract_patch, list_images, load_image
from .losses import (
    FeatureExtractor,
    LossWeights,
    discriminator_loss,
    generator_adversarial_loss,
    generator_total_loss,
    l1_loss,
    perceptual_loss,
    total_discriminator_loss,
)

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("iter", "l_d_total", "l_d1", "l_d2", "l_g_adv", "l_percep", "l_l1", "l_g_total")
DATA_STREAM = 1


class TrainingDivergedError(RuntimeError):
    """A loss term became NaN or infinite."""


@dataclass(frozen=True)
class TrainConfig:
    """Everything that fixes a training run. Loss weight keys are flat (``lambda1`` ...)."""

    mode: str = "multi"
    total_iterations: int = 1000
    pretrain_iterations: int = 200
    learning_rate: float = 1e-4
    pretrain_learning_rate: float = 1e-3
    batch_size: int = 4
    hr_patch_size: int = 64
    betas: tuple[float, float] = (0.9, 0.99)
    lambda1: float = 1.0
    lambda2: float = 1.0
    eta: float = 1.0
    perceptual_weight: float = 1.0
    adversarial_weight: float = 0.1
    seed: int = 0
    checkpoint_interval: int = 500
    hflip_prob: float = 0.5
    data_dir: str = "data/mini_hr"
    output_dir: str = "runs/desk"
    degradation_config: Optional[str] = None
    feature_extractor: Optional[str] = None
    generator_init: Optional[str] = None
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: UNetDiscriminatorConfig = field(default_factory=UNetDiscriminatorConfig)

    def __post_init__(self):
        if self.mode not in ("single", "multi"):
            raise ValueError(f"mode must be 'single' or 'multi', got {self.mode!r}")
        div = 2 ** (self.discriminator.num_levels + 1)
        if self.hr_patch_size % div or self.hr_patch_size % 4:
            raise ValueError(f"hr_patch_size must be divisible by {div} and by 4")
        if self.total_iterations < 0 or not 0 <= self.pretrain_iterations <= self.total_iterations:
            raise ValueError("need 0 <= pretrain_iterations <= total_iterations")
        if self.batch_size < 1 or self.checkpoint_interval < 1:
            raise ValueError("batch_size and checkpoint_interval must be >= 1")
        if self.learning_rate < 0 or self.pretrain_learning_rate < 0:
            raise ValueError("learning rates must be non-negative")
        self.loss_weights()

    @property
    def num_scales(self) -> int:
        return 2 if self.mode == "multi" else 1

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.eta, self.perceptual_weight, self.adversarial_weight)

    @classmethod
    def full_scale(cls) -> "TrainConfig":
        return cls(total_iterations=400_000, pretrain_iterations=0, learning_rate=1e-4, batch_size=48,
                   hr_patch_size=256, checkpoint_interval=5000, generator=GeneratorConfig.full_scale(),
                   discriminator=UNetDiscriminatorConfig.full_scale())

    @classmethod
    def load(cls, path, base=None) -> "TrainConfig":
        return cfgio.load(cls, path, base)

    def save(self, path) -> None:
        cfgio.save(self, path)


@dataclass
class TrainState:
    config: TrainConfig
    generator: Generator
    discriminator: MultiScaleDiscriminator
    opt_g: torch.optim.Adam
    opt_d: list[torch.optim.Adam]
    iteration: int = 0

    @classmethod
    def initial(cls, config: TrainConfig) -> "TrainState":
        gen = build_generator(config.generator, seed=config.seed)
        if config.generator_init:
            gen.load_state_dict(load_generator(config.generator_init).state_dict())
        disc = build_discriminator(config.discriminator, config.num_scales, seed=config.seed + 1)
        opt_g = torch.optim.Adam(gen.parameters(), lr=config.learning_rate, betas=config.betas)
        nets = [disc.d1] if disc.d2 is None else [disc.d1, disc.d2]
        opt_d = [torch.optim.Adam(d.parameters(), lr=config.learning_rate, betas=config.betas) for d in nets]
        return cls(config, gen, disc, opt_g, opt_d)


# data

class PatchSampler:
    """Deterministic (lr, hr) batches from a directory of HR images.

    Each sample of iteration ``i`` gets its own stream ``Rng(seed, DATA_STREAM, i, k)``
    for image choice, crop, flip and degradation.
    """

    def __init__(self, images: list[torch.Tensor], batch_size: int, patch_size: int,
                 degradation: DegradationConfig, seed: int, hflip_prob: float = 0.5):
        if not images:
            raise cfgio.ConfigError("dataset is empty")
        small = [tuple(im.shape[-2:]) for im in images if min(im.shape[-2:]) < patch_size]
        if small:
            raise cfgio.ConfigError(f"{len(small)} dataset image(s) smaller than hr_patch_size {patch_size}")
        self.images = images
        self.batch_size = batch_size
        self.patch_size = patch_size
        self.degradation = degradation
        self.seed = seed
        self.hflip_prob = hflip_prob

    @classmethod
    def from_config(cls, config: TrainConfig) -> "PatchSampler":
        if not Path(config.data_dir).is_dir():
            raise cfgio.ConfigError(f"data_dir does not exist: {config.data_dir}")
        paths = list_images(config.data_dir)
        if not paths:
            raise cfgio.ConfigError(f"dataset is empty: no images in {config.data_dir}")
        deg = DegradationConfig.load(config.degradation_config) if config.degradation_config else DegradationConfig()
        return cls([load_image(p) for p in paths], config.batch_size, config.hr_patch_size, deg,
                   config.seed, config.hflip_prob)

    def sample(self, iteration: int, index: int) -> tuple[torch.Tensor, torch.Tensor]:
        rng = Rng(self.seed, DATA_STREAM, iteration, index)
        hr = extract_patch(rng.choice(self.images), self.patch_size, rng)
        if rng.bernoulli(self.hflip_prob):
            hr = hr.flip(-1)
        return synthesize_lr(hr, self.degradation, rng), hr

    def batch(self, iteration: int) -> tuple[torch.Tensor, torch.Tensor]:
        pairs = [self.sample(iteration, k) for k in range(self.batch_size)]
        return torch.cat([p[0] for p in pairs]), torch.cat([p[1] for p in pairs])


# steps

def _check_batch(lr: torch.Tensor, hr: torch.Tensor) -> None:
    if lr.ndim != 4 or hr.ndim != 4 or lr.shape[:2] != hr.shape[:2] \
            or hr.shape[-2] != 4 * lr.shape[-2] or hr.shape[-1] != 4 * lr.shape[-1]:
        raise ShapeError(f"inconsistent batch: lr {tuple(lr.shape)}, hr {tuple(hr.shape)}")


def _check_finite(terms: dict, iteration: int) -> None:
    for name, value in terms.items():
        if value is not None and not torch.isfinite(torch.as_tensor(value)).all():
            raise TrainingDivergedError(f"non-finite loss term {name} at iteration {iteration}")


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


def pretrain_step(batch, state: TrainState) -> tuple[TrainState, dict]:
    """One optimizer step on ``eta * L1``; discriminators are not touched."""
    lr, hr = batch
    _check_batch(lr, hr)
    cfg = state.config
    state.generator.train()
    _set_lr(state.opt_g, cfg.pretrain_learning_rate)
    l1 = l1_loss(state.generator(lr), hr)
    total = cfg.eta * l1
    _check_finite({"l_l1": l1}, state.iteration)
    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    state.opt_g.step()
    record = dict.fromkeys(METRIC_COLUMNS)
    record.update(iter=state.iteration + 1, l_l1=l1.item(), l_g_total=total.item())
    state.iteration += 1
    return state, record


def discriminator_step(batch, state: TrainState) -> dict:
    """One update of every discriminator on the weighted multi-scale loss; the generator is frozen."""
    lr, hr = batch
    _check_batch(lr, hr)
    w = state.config.loss_weights()
    gen, disc = state.generator, state.discriminator
    with torch.no_grad():
        gen.eval()
        sr = gen(lr)
    disc.train()
    disc.requires_grad_(True)
    real, fake = disc(hr), disc(sr)
    l_d1 = discriminator_loss(real[0].logits, fake[0].logits)
    l_d2 = discriminator_loss(real[1].logits, fake[1].logits) if len(real) == 2 else None
    l_d_total = total_discriminator_loss(l_d1, l_d2, w)
    _check_finite({"l_d1": l_d1, "l_d2": l_d2, "l_d_total": l_d_total}, state.iteration)
    for opt in state.opt_d:
        opt.zero_grad(set_to_none=True)
    l_d_total.backward()
    for opt in state.opt_d:
        opt.step()
    return {"l_d_total": l_d_total.item(), "l_d1": l_d1.item(), "l_d2": None if l_d2 is None else l_d2.item()}


def generator_step(batch, state: TrainState, extractor: FeatureExtractor) -> dict:
    """One generator update on perceptual + adversarial + L1.

    Discriminators run in eval mode with gradients off, so neither their
    weights nor their spectral-norm vectors change.
    """
    lr, hr = batch
    _check_batch(lr, hr)
    cfg = state.config
    w = cfg.loss_weights()
    gen, disc = state.generator, state.discriminator
    _set_lr(state.opt_g, cfg.learning_rate)
    disc.eval()
    disc.requires_grad_(False)
    try:
        gen.train()
        sr = gen(lr)
        with torch.no_grad():
            real = disc(hr)
        fake = disc(sr)
        adv1 = generator_adversarial_loss(real[0].logits, fake[0].logits)
        adv2 = generator_adversarial_loss(real[1].logits, fake[1].logits) if len(real) == 2 else None
        l_percep = perceptual_loss(sr, hr, extractor)
        l_l1 = l1_loss(sr, hr)
        l_g_total = generator_total_loss(l_percep, adv1, adv2, l_l1, w)
        l_g_adv = total_discriminator_loss(adv1, adv2, w)
        _check_finite({"l_g_adv": l_g_adv, "l_percep": l_percep, "l_l1": l_l1, "l_g_total": l_g_total},
                      state.iteration)
        state.opt_g.zero_grad(set_to_none=True)
        l_g_total.backward()
        state.opt_g.step()
    finally:
        disc.requires_grad_(True)
        disc.train()
    return {"l_g_adv": l_g_adv.item(), "l_percep": l_percep.item(), "l_l1": l_l1.item(),
            "l_g_total": l_g_total.item()}


def gan_train_step(batch, state: TrainState, extractor: FeatureExtractor) -> tuple[TrainState, dict]:
    """Discriminator step with the generator frozen, then generator step with the discriminators frozen."""
    record = {"iter": state.iteration + 1}
    record.update(discriminator_step(batch, state))
    record.update(generator_step(batch, state, extractor))
    state.iteration += 1
    return state, record


# checkpoints

def _payload(state: TrainState) -> dict:
    disc = state.discriminator
    payload = {
        "kind": "train",
        "config": cfgio.dumps(state.config),
        "iteration": state.iteration,
        "generator": state.generator.state_dict(),
        "opt_g": state.opt_g.state_dict(),
        "d1": disc.d1.state_dict(),
        "opt_d1": state.opt_d[0].state_dict(),
        "torch_rng": torch.get_rng_state(),
    }
    if disc.d2 is not None:
        payload["d2"] = disc.d2.state_dict()
        payload["opt_d2"] = state.opt_d[1].state_dict()
    return payload


def save_checkpoint(state: TrainState, path: str | os.PathLike) -> None:
    write_payload(_payload(state), path)


def load_checkpoint(path: str | os.PathLike, restore_rng: bool = False) -> TrainState:
    payload = read_payload(path)
    if payload.get("kind") != "train":
        raise CheckpointKindError(f"{path}: generator-only export, not a training checkpoint")
    config = cfgio.loads(TrainConfig, payload["config"])
    state = TrainState.initial(dataclasses.replace(config, generator_init=None))
    state.config = config
    state.generator.load_state_dict(payload["generator"])
    state.opt_g.load_state_dict(payload["opt_g"])
    state.discriminator.d1.load_state_dict(payload["d1"])
    state.opt_d[0].load_state_dict(payload["opt_d1"])
    if state.discriminator.d2 is not None:
        state.discriminator.d2.load_state_dict(payload["d2"])
        state.opt_d[1].load_state_dict(payload["opt_d2"])
    state.iteration = int(payload["iteration"])
    if restore_rng:
        torch.set_rng_state(payload["torch_rng"])
    return state


def export_generator(state_or_path, path: str | os.PathLike) -> None:
    """Write an inference-only checkpoint holding just the generator."""
    state = load_checkpoint(state_or_path) if isinstance(state_or_path, (str, os.PathLike)) else state_or_path
    write_payload({"kind": "generator", "generator_config": cfgio.dumps(state.config.generator),
                   "generator": state.generator.state_dict(), "iteration": state.iteration}, path)


def load_generator(path: str | os.PathLike) -> Generator:
    """Generator from either a training checkpoint or a generator-only export."""
    payload = read_payload(path)
    if payload.get("kind") == "train":
        gen_cfg = cfgio.loads(TrainConfig, payload["config"]).generator
    elif payload.get("kind") == "generator":
        gen_cfg = cfgio.loads(GeneratorConfig, payload["generator_config"])
    else:
        raise CheckpointIntegrityError(f"{path}: unknown checkpoint kind")
    gen = Generator(gen_cfg)
    gen.load_state_dict(payload["generator"])
    gen.eval()
    return gen


def load_discriminator(path: str | os.PathLike) -> MultiScaleDiscriminator:
    payload = read_payload(path)
    if payload.get("kind") != "train":
        raise CheckpointKindError(
            f"{path}: inference-only export has no discriminator weights; use a training checkpoint")
    config = cfgio.loads(TrainConfig, payload["config"])
    disc = MultiScaleDiscriminator(config.discriminator, config.num_scales)
    disc.d1.load_state_dict(payload["d1"])
    if disc.d2 is not None:
        disc.d2.load_state_dict(payload["d2"])
    disc.eval()
    return disc


# loop

def checkpoint_path(output_dir: str | os.PathLike, iteration: int) -> Path:
    return Path(output_dir) / f"ckpt_{iteration:07d}.pt"


def build_extractor(config: TrainConfig) -> FeatureExtractor:
    if config.feature_extractor:
        return FeatureExtractor.from_file(config.feature_extractor)
    return FeatureExtractor.random_pyramid(seed=config.seed)


def _format_metric(value) -> str:
    return "" if value is None else repr(float(value))


def _prepare_log(path: Path, resume_iteration: int | None) -> None:
    if resume_iteration is None or not path.exists():
        with path.open("w", newline="") as fh:
            csv.writer(fh).writerow(METRIC_COLUMNS)
        return
    # drop rows written after the checkpoint we resume from
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    kept = [rows[0]] + [r for r in rows[1:] if r and int(r[0]) <= resume_iteration]
    with path.open("w", newline="") as fh:
        csv.writer(fh).writerows(kept)


def train(config: TrainConfig, resume: str | os.PathLike | None = None, progress=None) -> TrainState:
    """Run (or continue) training; writes checkpoints and ``metrics.csv`` into ``config.output_dir``.

    Args:
        config: run configuration. When resuming, the stored configuration's
            trajectory-defining fields are used, while ``total_iterations``,
            ``output_dir`` and ``checkpoint_interval`` come from ``config``.
        resume: training checkpoint to continue from.
        progress: optional callable receiving each metrics record and the live state.
    """
    sampler = PatchSampler.from_config(config)
    if resume is not None:
        if not Path(resume).is_file():
            raise FileNotFoundError(f"checkpoint not found: {resume}")
        state = load_checkpoint(resume, restore_rng=True)
        state.config = dataclasses.replace(state.config, total_iterations=config.total_iterations,
                                           output_dir=config.output_dir,
                                           checkpoint_interval=config.checkpoint_interval)
        config = state.config
    else:
        state = TrainState.initial(config)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics = out / "metrics.csv"
    _prepare_log(metrics, state.iteration if resume is not None else None)
    extractor = build_extractor(config)

    with metrics.open("a", newline="") as fh:
        writer = csv.writer(fh)
        while state.iteration < config.total_iterations:
            batch = sampler.batch(state.iteration)
            if state.iteration < config.pretrain_iterations:
                state, record = pretrain_step(batch, state)
            else:
                state, record = gan_train_step(batch, state, extractor)
            writer.writerow([record["iter"]] + [_format_metric(record[c]) for c in METRIC_COLUMNS[1:]])
            fh.flush()
            if progress is not None:
                progress(record, state)
            done = state.iteration == config.total_iterations
            if state.iteration % config.checkpoint_interval == 0 or done:
                save_checkpoint(state, checkpoint_path(out, state.iteration))
                log.info("checkpoint at iteration %d", state.iteration)
    return state


def read_metrics(path: str | os.PathLike) -> list[dict]:
    """Parsed metrics rows; blank cells become ``None``."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "iter" else (None if v == "" else float(v))) for k, v in r.items()} for r in rows]


def is_finite_record(record: dict) -> bool:
    return all(v is None or math.isfinite(v) for v in record.values())
