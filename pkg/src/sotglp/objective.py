"""Scores, losses, fusion, and OOD scores."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ContractError, DimensionError
from .numcore import Mat


@dataclass(frozen=True)
class ScoringConfig:
    tau: float = 0.07
    lam: float = 0.25

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if not self.lam >= 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")


@dataclass
class BatchLogits:
    global_logits: Mat
    local_logits: Mat
    fused: Mat


def global_scores(z_global: Mat, global_embs: Mat, active, tau: float) -> Mat:
    """Average temperature-scaled cosine over the active global prompts, ``(B, C)``.

    ``global_embs`` is ``(C, N_g, d)``.
    """
    z_global, global_embs = nc.const(z_global), nc.const(global_embs)
    active = np.asarray(active, dtype=np.intp)
    if active.size == 0:
        raise ContractError("global_scores: no active global prompts")
    c, ng, d = global_embs.shape
    b = z_global.shape[0]
    if z_global.shape != (b, d):
        raise DimensionError(f"global_scores: z_global {z_global.shape} vs embeddings {global_embs.shape}")
    chosen = nc.take(global_embs, active, axis=1)  # (C, |A|, d)
    na = active.size
    sims = nc.matmul(z_global, nc.transpose(nc.reshape(chosen, (c * na, d))))  # (B, C*|A|)
    return nc.scale(nc.mean(nc.reshape(sims, (b, c, na)), axis=2), 1.0 / tau)


def local_logits(phi: Mat, tau: float) -> Mat:
    return nc.scale(phi, 1.0 / tau)


def class_probs(logits) -> np.ndarray:
    """Softmax over the last axis (plain values, no tape)."""
    return nc.softmax_rows(nc.Mat(np.asarray(logits.value if isinstance(logits, Mat) else logits, dtype=np.float64))).value


def cross_entropy(logits: Mat, labels) -> Mat:
    """Mean negative log-likelihood in log-sum-exp form."""
    logits = nc.const(logits)
    labels = np.asarray(labels, dtype=np.intp)
    b, c = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {b} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"cross_entropy: label outside [0, {c})")
    picked = nc.reshape(nc.take_along_axis(logits, labels[:, None], axis=1), (b,))
    return nc.mean(nc.sub(nc.logsumexp(logits, axis=1), picked))


def total_loss(l_global: Mat, l_local: Mat, lam: float) -> Mat:
    l_global, l_local = nc.const(l_global), nc.const(l_local)
    if not (np.all(np.isfinite(l_global.value)) and np.all(np.isfinite(l_local.value))):
        raise ContractError("total_loss: non-finite branch loss")
    return nc.add(l_global, nc.scale(l_local, lam))


def fused_logits(global_logits: Mat, local_logits_: Mat, lam: float) -> Mat:
    return nc.add(nc.const(global_logits), nc.scale(nc.const(local_logits_), lam))


def mcm_score(global_row) -> float:
    """Maximum softmax probability of one row of logits."""
    return float(np.max(class_probs(np.asarray(global_row, dtype=np.float64).reshape(1, -1))))


def glmcm_score(global_row, patch_class_sims, tau: float) -> float:
    """Global MCM plus the most confident per-patch class softmax.

    ``patch_class_sims`` is ``(P, C)``. With no patches the score falls back
    to the global term alone (see :func:`glmcm_scores` for the flag).
    """
    return float(glmcm_scores(np.asarray(global_row)[None], np.asarray(patch_class_sims)[None], tau)[0][0])


def glmcm_scores(global_logits, patch_class_sims, tau: float) -> tuple[np.ndarray, bool]:
    """Batched GL-MCM: ``global_logits (B, C)``, ``patch_class_sims (B, P, C)``.

    Returns ``(scores, fell_back)`` where ``fell_back`` is set when ``P == 0``.
    """
    gl = np.asarray(global_logits.value if isinstance(global_logits, Mat) else global_logits, dtype=np.float64)
    ps = np.asarray(patch_class_sims, dtype=np.float64)
    g_term = class_probs(gl).max(axis=-1)
    if ps.shape[1] == 0:
        return g_term, True
    l_term = class_probs(ps / tau).max(axis=-1).max(axis=-1)
    return g_term + l_term, False
