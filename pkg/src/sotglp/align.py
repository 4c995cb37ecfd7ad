"""Local branch: class-conditioned saliency, shared top-K support, OT scoring.

For each (image, class) pair the patches are ranked once by their mean
similarity to the class's local prompt ensemble. The top ``K`` patches form a
support shared by all of that class's prompts, and a balanced transport plan
partitions the support among the prompts. Ranking is not differentiated;
gradients reach the selected patch rows and the prompt embeddings.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import DimensionError, SizeError
from .numcore import Mat
from .otcore import SinkhornConfig, TransportPlan, cost_from_sim, marginal_violation, sinkhorn_plan, transport_score


@dataclass
class SparseSupport:
    indices: np.ndarray  # (..., K) ascending patch indices
    features: Mat  # (..., K, d)
    saliency: np.ndarray  # (..., K) saliency of the selected patches


@dataclass
class LocalScoreOut:
    phi: Mat
    plan: TransportPlan
    support: SparseSupport
    sim: Mat


def _sal(v) -> np.ndarray:
    return v.value if isinstance(v, Mat) else np.asarray(v, dtype=np.float64)


def saliency_map(z_local: Mat, local_emb: Mat) -> Mat:
    """Mean similarity of each patch to the prompt ensemble, ``(P,)``."""
    z_local, local_emb = nc.const(z_local), nc.const(local_emb)
    if z_local.ndim != 2 or local_emb.ndim != 2 or z_local.shape[1] != local_emb.shape[1]:
        raise DimensionError(f"saliency_map: {z_local.shape} vs {local_emb.shape}")
    return nc.mean(nc.matmul(z_local, nc.transpose(local_emb)), axis=1)


def top_k_indices(saliency: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries along the last axis, sorted ascending.

    Ties go to the smaller patch index.
    """
    saliency = np.asarray(saliency, dtype=np.float64)
    p = saliency.shape[-1]
    if not 1 <= k <= p:
        raise SizeError(f"K={k} must be within [1, P={p}]")
    # stable sort on -saliency keeps lower indices first among equal values
    order = np.argsort(-saliency, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


def top_k_select(saliency, z_local: Mat, k: int) -> SparseSupport:
    sal = _sal(saliency)
    z_local = nc.const(z_local)
    if sal.shape != z_local.shape[:-1]:
        raise DimensionError(f"top_k_select: saliency {sal.shape} vs features {z_local.shape}")
    idx = top_k_indices(sal, k)
    feats = nc.take_along_axis(z_local, idx[..., None].repeat(z_local.shape[-1], axis=-1), axis=-2)
    return SparseSupport(idx, feats, np.take_along_axis(sal, idx, axis=-1))


def local_class_score(
    z_local: Mat,
    local_emb: Mat,
    k: int,
    cfg: SinkhornConfig = SinkhornConfig(),
    check_cost: bool = True,
) -> LocalScoreOut:
    """Transport-weighted local score of one image against one class."""
    z_local, local_emb = nc.const(z_local), nc.const(local_emb)
    sal = saliency_map(z_local, local_emb)
    support = top_k_select(sal, z_local, k)
    if k < local_emb.shape[0]:
        warnings.warn(f"K={k} is smaller than the number of local prompts {local_emb.shape[0]}", stacklevel=2)
    sim = nc.matmul(support.features, nc.transpose(local_emb))
    plan = sinkhorn_plan(cost_from_sim(sim, check=check_cost), cfg)
    return LocalScoreOut(transport_score(plan, sim), plan, support, sim)


@dataclass
class BatchLocal:
    """Local-branch outputs for a ``B x C`` grid of (image, class) pairs."""

    phi: Mat  # (B, C)
    plan: TransportPlan  # plan (B, C, K, N_l)
    indices: np.ndarray  # (B, C, K)
    saliency: np.ndarray  # (B, C, P)
    sim: Mat  # (B, C, K, N_l)
    patch_sims: Mat  # (B, C, P, N_l)


def local_scores_batch(
    z_local: Mat,
    local_emb: Mat,
    k: int,
    cfg: SinkhornConfig = SinkhornConfig(),
    check_cost: bool = True,
    fixed_plan=None,
) -> BatchLocal:
    """Batched :func:`local_class_score` over all images and classes.

    ``z_local`` is ``(B, P, d)``, ``local_emb`` is ``(C, N_l, d)``. Every
    pair gets its own saliency ranking and its own transport problem.
    ``fixed_plan`` (``(B, C, K, N_l)``) skips the solver and scores with the
    given constant plan, which is the function a detached-plan gradient
    differentiates.
    """
    z_local, local_emb = nc.const(z_local), nc.const(local_emb)
    b, p, d = z_local.shape
    c, nl, d2 = local_emb.shape
    if d != d2:
        raise DimensionError(f"feature dims differ: {d} vs {d2}")
    if not 1 <= k <= p:
        raise SizeError(f"K={k} must be within [1, P={p}]")
    flat = nc.matmul(nc.reshape(z_local, (b * p, d)), nc.transpose(nc.reshape(local_emb, (c * nl, d))))
    patch_sims = nc.transpose(nc.reshape(flat, (b, p, c, nl)), (0, 2, 1, 3))  # (B, C, P, N_l)
    saliency = np.mean(patch_sims.value, axis=-1)
    idx = top_k_indices(saliency, k)
    sim = nc.take_along_axis(patch_sims, np.repeat(idx[..., None], nl, axis=-1), axis=2)
    if fixed_plan is None:
        plan = sinkhorn_plan(cost_from_sim(sim, check=check_cost), cfg)
    else:
        fixed = np.asarray(fixed_plan, dtype=np.float64)
        if fixed.shape != sim.shape:
            raise DimensionError(f"fixed plan {fixed.shape} vs support sims {sim.shape}")
        batch = fixed.shape[:-2]
        plan = TransportPlan(nc.Mat(fixed), np.zeros(batch, dtype=np.int64), marginal_violation(fixed), np.ones(batch, dtype=bool))
    phi = transport_score(plan, sim)
    return BatchLocal(phi, plan, idx, saliency, sim, patch_sims)
