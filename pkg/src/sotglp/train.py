"""SGD with momentum, warmup + cosine schedule, and the few-shot training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .config import RunConfig
from .encoders import ImageFeatures, LocalProjection
from .errors import ConfigError, DivergenceError, NonFiniteError
from .jsonio import pack_array, read_json, unpack_array, write_json
from .model import Model, featurize, forward, parameter_arrays
from .prompts import PromptBank, sample_prompt_dropout
from .synthdata import Episode

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
CURVE_FIELDS = ("epoch", "step", "lr", "L_global", "L_local", "L_total")


@dataclass(frozen=True)
class ScheduleConfig:
    base_lr: float
    warmup_epochs: int
    total_epochs: int
    steps_per_epoch: int

    def __post_init__(self):
        if self.total_epochs > 0 and self.warmup_epochs >= self.total_epochs:
            raise ConfigError("warmup_epochs must be < total_epochs")
        if self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be >= 1")

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch


def lr_at(cfg: ScheduleConfig, step: int) -> float:
    """Linear warmup from 0 to ``base_lr``, then half-cosine down to 0.

    Steps past the end of the schedule clamp to the final value 0.
    """
    total, warm = cfg.total_steps, cfg.warmup_steps
    if step >= total:
        return 0.0
    if step < warm:
        return cfg.base_lr * step / warm
    progress = (step - warm) / (total - warm)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimState:
    velocity: list[np.ndarray]
    lr: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 0.01
    step_count: int = 0

    @classmethod
    def zeros_like(cls, params, momentum=0.9, weight_decay=0.01) -> "OptimState":
        return cls([np.zeros_like(p) for p in params], 0.0, momentum, weight_decay)


def sgd_step(state: OptimState, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
    """In-place update with coupled L2 decay: ``v = mu v + g + wd theta``, ``theta -= lr v``."""
    if len(params) != len(grads) or len(params) != len(state.velocity):
        raise ConfigError("params, grads and velocity lists differ in length")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient at step {state.step_count}")
    for p, g, v in zip(params, grads, state.velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ConfigError(f"shape mismatch {p.shape} / {g.shape} / {v.shape}")
        v *= state.momentum
        v += g + state.weight_decay * p
        p -= state.lr * v
    state.step_count += 1


@dataclass
class TrainResult:
    model: Model
    curve: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def make_checkpoint(model: Model, epoch: int, seed: int) -> dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "kind": "checkpoint",
        "epoch": int(epoch),
        "seed": int(seed),
        "bank": model.bank.to_dict(),
        "projection": {"enabled": model.proj.enabled, "weight": pack_array(model.proj.weight)},
        "config": model.cfg.to_dict(),
        "encoder_checksum": model.encoders.checksum(),
    }


def save_checkpoint(model: Model, epoch: int, seed: int, path) -> None:
    write_json(make_checkpoint(model, epoch, seed), path)


def load_checkpoint(path) -> tuple[PromptBank, LocalProjection, RunConfig, dict]:
    obj = read_json(path, kind="checkpoint", version=CHECKPOINT_VERSION)
    bank = PromptBank.from_dict(obj["bank"])
    proj = LocalProjection(unpack_array(obj["projection"]["weight"], "projection.weight"), bool(obj["projection"]["enabled"]))
    return bank, proj, RunConfig.from_dict(obj["config"]), obj


def train_episode(
    episode: Episode,
    model: Model,
    seed: int,
    feats: ImageFeatures | None = None,
    checkpoint_dir=None,
) -> TrainResult:
    """Train prompts and the local projection on ``episode``'s training split.

    ``model`` is not modified; the returned result holds a trained copy.
    Frozen encoders are only read. One optimizer step per minibatch of
    ``cfg.batch_size`` images, global prompt dropout resampled every step.
    """
    cfg = model.cfg
    model = Model(model.encoders, model.bank.copy(), LocalProjection(model.proj.weight.copy(), model.proj.enabled), cfg)
    if feats is None:
        feats = featurize(model.encoders, episode.train_x)
    labels = np.asarray(episode.train_y)
    n = len(labels)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    sched = ScheduleConfig(cfg.lr, cfg.warmup_epochs, cfg.epochs, steps_per_epoch)
    params = parameter_arrays(model)
    state = OptimState.zeros_like(params, cfg.momentum, cfg.weight_decay)
    order_rng = np.random.default_rng([seed, 606])
    drop_rng = np.random.default_rng([seed, 707])
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    result = TrainResult(model)
    last_good = make_checkpoint(model, 0, seed)

    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            active = sample_prompt_dropout(model.bank.n_global, cfg.dropout, drop_rng)
            tape = nc.Tape()
            try:
                out = forward(model, feats.subset(idx), labels[idx], tape=tape, active=active)
                grads = nc.backward(out.loss, tape)
                state.lr = lr_at(sched, step)
                sgd_step(state, params, [grads[leaf.node_id] for leaf in out.leaves])
            except NonFiniteError as exc:
                raise DivergenceError(f"training diverged at step {step}: {exc}", last_good, step) from exc
            result.curve.append(
                {
                    "epoch": epoch,
                    "step": step,
                    "lr": state.lr,
                    "L_global": out.l_global.item(),
                    "L_local": out.l_local.item(),
                    "L_total": out.loss.item(),
                }
            )
            step += 1
        last_good = make_checkpoint(model, epoch, seed)
        if ckpt_dir is not None:
            path = ckpt_dir / f"checkpoint_epoch_{epoch:03d}.json"
            write_json(last_good, path)
            result.checkpoints.append(path)
        log.debug("seed %d epoch %d loss %.4f", seed, epoch, result.curve[-1]["L_total"])
    return result
