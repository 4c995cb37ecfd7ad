"""Run-level workflows shared by the CLI and the acceptance suite.

Each function takes a resolved :class:`RunConfig` plus an episode and
returns plain rows or reports; file layout decisions stay in the CLI.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics
from .config import RunConfig
from .errors import ConfigError, FormatError
from .model import ForwardOut, Model, build_encoders, featurize, init_model, predict
from .objective import class_probs, glmcm_scores
from .synthdata import Episode, OodPool, gen_episode, gen_ood_pool
from .train import TrainResult, load_checkpoint, train_episode

log = logging.getLogger(__name__)

EPISODE_FIELDS = ("num_classes", "num_patches", "input_dim", "n_parts")


def episode_from_config(cfg: RunConfig) -> Episode:
    return gen_episode(
        cfg.num_classes,
        cfg.shots,
        cfg.num_patches,
        cfg.input_dim,
        cfg.n_parts,
        cfg.noise_sigma,
        cfg.data_seed,
        test_shots=cfg.test_shots,
        background_scale=cfg.background_scale,
        context_strength=cfg.context_strength,
        shared_background=cfg.shared_background,
    )


def ood_pools_from_config(cfg: RunConfig, ep: Episode) -> dict[str, OodPool]:
    return {kind: gen_ood_pool(ep, cfg.ood_size, kind, cfg.data_seed) for kind in ("background", "foreign")}


def config_for_episode(cfg: RunConfig, ep: Episode) -> RunConfig:
    """Take the episode's own sizes where a loaded dataset and the config disagree."""
    changes = {}
    for name in ("num_classes", "shots", "test_shots", "num_patches", "input_dim", "n_parts", "noise_sigma",
                 "background_scale", "context_strength", "shared_background"):
        if getattr(cfg, name) != getattr(ep, name):
            changes[name] = getattr(ep, name)
    if ep.seed != cfg.data_seed:
        changes["data_seed"] = ep.seed
    if changes:
        log.info("config updated from episode: %s", changes)
        return cfg.replace(**changes)
    return cfg


@dataclass
class BranchAccuracy:
    fused: float
    global_only: float
    local_only: float


def branch_accuracy(out: ForwardOut, labels) -> BranchAccuracy:
    lg = out.logits
    return BranchAccuracy(
        metrics.top1_accuracy(lg.fused, labels),
        metrics.top1_accuracy(lg.global_logits, labels),
        metrics.top1_accuracy(lg.local_logits, labels),
    )


def true_class_plans(out: ForwardOut, labels) -> np.ndarray:
    """``(B, K, N_l)`` plans of each image against its own class."""
    labels = np.asarray(labels)
    return out.local.plan.plan.value[np.arange(len(labels)), labels]


def evaluate(model: Model, ep: Episode, feats=None) -> tuple[metrics.MetricsReport, ForwardOut]:
    feats = featurize(model.encoders, ep.test_x) if feats is None else feats
    out = predict(model, feats)
    acc = branch_accuracy(out, ep.test_y)
    plans = true_class_plans(out, ep.test_y)
    report = metrics.MetricsReport(
        top1=acc.fused,
        mean_plan_entropy=metrics.mean_plan_entropy(plans),
        prompt_overlap=metrics.prompt_overlap(plans) if model.bank.n_local >= 2 else None,
        per_class_accuracy=metrics.per_class_accuracy(out.logits.fused, ep.test_y, ep.num_classes),
        extra={"top1_global": acc.global_only, "top1_local": acc.local_only},
    )
    return report, out


def ood_scores(model: Model, images) -> dict[str, np.ndarray]:
    out = predict(model, featurize(model.encoders, images))
    gl = out.logits.global_logits
    return {
        "mcm": class_probs(gl).max(axis=-1),
        "glmcm": glmcm_scores(gl, out.patch_class_sims(), model.cfg.tau)[0],
    }


def ood_rows(model: Model, ep: Episode, pools: dict[str, OodPool], variant: str, seed: int) -> tuple[list[dict], dict]:
    """One row per (pool kind, score); also returns the raw scores for plotting."""
    id_s = ood_scores(model, ep.test_x)
    rows, raw = [], {}
    for kind, pool in pools.items():
        ood_s = ood_scores(model, pool.images)
        for score in ("mcm", "glmcm"):
            rows.append(
                {
                    "variant": variant,
                    "seed": seed,
                    "pool": kind,
                    "score": score,
                    "auroc": metrics.auroc(id_s[score], ood_s[score]),
                    "fpr95": metrics.fpr_at_tpr95(id_s[score], ood_s[score]),
                }
            )
            raw[f"{kind}/{score}"] = (id_s[score], ood_s[score])
    return rows, raw


def train_seeds(cfg: RunConfig, ep: Episode, out_dir=None, seeds=None) -> dict[int, TrainResult]:
    encoders = build_encoders(cfg, ep)
    feats = featurize(encoders, ep.train_x)
    results = {}
    for seed in cfg.seeds if seeds is None else seeds:
        ckpt_dir = None
        if out_dir is not None:
            ckpt_dir = Path(out_dir) / f"seed_{seed}"
            ckpt_dir.mkdir(parents=True, exist_ok=True)
        results[seed] = train_episode(ep, init_model(cfg, encoders, seed), seed, feats=feats, checkpoint_dir=ckpt_dir)
    return results


def model_from_checkpoint(path, ep: Episode, overrides: dict | None = None) -> tuple[Model, int]:
    """Rebuild a trained model; the frozen encoders are regenerated and checksum-verified."""
    bank, proj, cfg, obj = load_checkpoint(path)
    if overrides:
        cfg = cfg.replace(**overrides)
    cfg = config_for_episode(cfg, ep)
    encoders = build_encoders(cfg, ep)
    if encoders.checksum() != obj["encoder_checksum"]:
        raise FormatError(f"{path}: encoders rebuilt from this config and data do not match the checkpoint")
    if cfg.no_proj:
        proj = type(proj)(proj.weight, False)
    return Model(encoders, bank, proj, cfg), int(obj["seed"])


def clamp_k(k: int, num_patches: int) -> int:
    return max(1, min(int(k), num_patches))


def _sweep_point(args) -> list[dict]:
    cfg, ep, axis, value = args
    if axis == "lambda":
        run_cfg = cfg.replace(lam=float(value))
    else:
        run_cfg = cfg.replace(top_k=clamp_k(value, ep.num_patches))
    encoders = build_encoders(run_cfg, ep)
    feats_tr = featurize(encoders, ep.train_x)
    feats_te = featurize(encoders, ep.test_x)
    rows = []
    for seed in run_cfg.seeds:
        res = train_episode(ep, init_model(run_cfg, encoders, seed), seed, feats=feats_tr)
        acc = branch_accuracy(predict(res.model, feats_te), ep.test_y)
        rows.append(
            {
                "axis": axis,
                "value": float(value),
                "k_effective": run_cfg.top_k,
                "lam": run_cfg.lam,
                "seed": seed,
                "fused": acc.fused,
                "global": acc.global_only,
                "local": acc.local_only,
            }
        )
    return rows


def run_sweep(cfg: RunConfig, ep: Episode, axis: str, grid, parallel: bool = False, workers: int | None = None) -> list[dict]:
    """Train and evaluate every grid point over every seed; rows come back in grid order."""
    if axis not in ("lambda", "k"):
        raise ConfigError(f"sweep axis must be 'lambda' or 'k', got {axis!r}")
    grid = list(grid)
    if not grid:
        raise ConfigError("empty sweep grid")
    if axis == "k":
        for v in grid:
            if int(v) != v or v < 1:
                raise ConfigError(f"K grid values must be positive integers, got {v}")
            if v > ep.num_patches:
                log.warning("K=%s exceeds P=%d; clamped to P", v, ep.num_patches)
    jobs = [(cfg, ep, axis, v) for v in grid]
    if parallel and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_sweep_point, jobs))
    else:
        chunks = [_sweep_point(j) for j in jobs]
    return [row for chunk in chunks for row in chunk]


def summarize_sweep(rows: list[dict], key: str = "fused") -> dict[float, float]:
    """Seed-mean accuracy per grid value."""
    out: dict[float, list[float]] = {}
    for r in rows:
        out.setdefault(r["value"], []).append(r[key])
    return {v: float(np.mean(a)) for v, a in out.items()}
