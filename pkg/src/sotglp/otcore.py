"""Balanced entropic optimal transport.

The solver works on dual potentials in the log domain, so it stays stable at
small ``epsilon`` where the Gibbs kernel ``exp(-C/epsilon)`` underflows. Cost
tensors may carry leading batch axes ``(..., K, N)``; every instance in a
batch is solved with the same number of iterations (the loop stops once the
worst instance meets ``tol``).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ContractError, DimensionError, SizeError
from .numcore import Mat

MAX_ORACLE_SIZE = 8
OMEGA_MAX = 1.95


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float = 0.05
    max_iters: int = 200
    tol: float = 1e-6
    unroll_grad: bool = True
    overrelax: bool = True
    warmup: int = 10

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if not self.tol > 0:
            raise ConfigError(f"tol must be > 0, got {self.tol}")
        if int(self.max_iters) < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")


@dataclass
class TransportPlan:
    """Solver output.

    For batched solves ``iterations_used``, ``final_violation`` and
    ``converged`` are arrays over the batch axes; for a single ``K x N``
    instance they are scalars.
    """

    plan: Mat
    iterations_used: int | np.ndarray
    final_violation: float | np.ndarray
    converged: bool | np.ndarray


def cost_from_sim(sim: Mat, check: bool = True) -> Mat:
    """Transport cost ``1 - sim``.

    With ``check`` the similarities must lie in ``[-1, 1]`` (unit-norm
    features on both sides); pass ``check=False`` for unnormalized features.
    """
    sim = nc.const(sim)
    if check and np.max(np.abs(sim.value), initial=0.0) > 1.0 + 1e-9:
        raise ContractError("cost_from_sim: |sim| > 1; inputs were not normalized")
    return nc.add_scalar(nc.neg(sim), 1.0)


def marginal_violation(plan) -> float | np.ndarray:
    """L1 distance of the plan's marginals to the uniform marginals."""
    t = plan.value if isinstance(plan, Mat) else np.asarray(plan, dtype=np.float64)
    k, n = t.shape[-2], t.shape[-1]
    rows = np.abs(t.sum(axis=-1) - 1.0 / k).sum(axis=-1)
    cols = np.abs(t.sum(axis=-2) - 1.0 / n).sum(axis=-1)
    out = rows + cols
    return float(out) if np.ndim(out) == 0 else out


def _gibbs(f: np.ndarray, g: np.ndarray, c: np.ndarray, eps: float) -> np.ndarray:
    return np.exp((f[..., :, None] + g[..., None, :] - c) / eps)


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(x - m), axis=axis))


class _ArrayOps:
    """Dual updates on plain arrays (no tape). Leading axis: flattened batch."""

    def __init__(self, eps: float):
        self.eps = eps

    @staticmethod
    def wrap(x):
        return x

    @staticmethod
    def value(x):
        return x

    @staticmethod
    def to_mat(x):
        return Mat(x)

    @staticmethod
    def take(x, idx):
        return x[idx]

    @staticmethod
    def concat(xs):
        return np.concatenate(xs, axis=0)

    def row(self, g, cost, log_a):
        return -self.eps * _lse((g[:, None, :] - cost) / self.eps, axis=-1) + self.eps * log_a

    def col(self, f, cost, log_b):
        return -self.eps * _lse((f[:, :, None] - cost) / self.eps, axis=-2) + self.eps * log_b

    @staticmethod
    def relax(old, new, w):
        return new if w is None else (1.0 - w[:, None]) * old + w[:, None] * new


class _TapeOps:
    """The same updates recorded on the cost's tape."""

    def __init__(self, eps: float):
        self.eps = eps

    @staticmethod
    def wrap(x):
        return Mat(x)

    @staticmethod
    def value(x):
        return x.value

    @staticmethod
    def to_mat(x):
        return x

    @staticmethod
    def take(x, idx):
        return nc.take(x, idx, axis=0)

    @staticmethod
    def concat(xs):
        return nc.concat(xs, axis=0)

    def row(self, g, cost, log_a):
        return nc.add_scalar(nc.softmin_dual(g, cost, self.eps, -1), self.eps * log_a)

    def col(self, f, cost, log_b):
        return nc.add_scalar(nc.softmin_dual(f, cost, self.eps, -2), self.eps * log_b)

    @staticmethod
    def relax(old, new, w):
        if w is None:
            return new
        wb = np.broadcast_to(w[:, None], old.shape)
        return nc.add(nc.mul(old, nc.Mat(1.0 - wb)), nc.mul(new, nc.Mat(wb)))


def sinkhorn_plan(C: Mat, cfg: SinkhornConfig = SinkhornConfig()) -> TransportPlan:
    """Entropic OT plan between uniform marginals ``1/K`` (rows) and ``1/N`` (columns).

    Alternates row and column dual updates in the log domain. With
    ``cfg.overrelax`` the first ``cfg.warmup`` sweeps are plain; the observed
    contraction rate ``eta`` of the row residual then fixes a per-instance
    relaxation weight ``2 / (1 + sqrt(1 - eta))`` for the remaining sweeps.

    In a batch every instance stops at its own first sweep within
    tolerance, so a batched solve returns the same plans as solving each
    instance alone. The plan is always read out with an exact column update,
    so its column sums equal ``1/N`` to rounding and ``final_violation`` is
    the row residual. When ``cfg.unroll_grad`` is set and ``C`` is tracked,
    every executed iteration is recorded so the plan is differentiable in
    ``C``; otherwise the plan is a constant.
    """
    C = nc.const(C)
    if C.ndim < 2:
        raise DimensionError(f"sinkhorn_plan: cost must be at least 2-D, got {C.shape}")
    k, n = C.shape[-2], C.shape[-1]
    if k < 1 or n < 1:
        raise SizeError("sinkhorn_plan: empty cost matrix")
    eps = float(cfg.epsilon)
    batch = C.shape[:-2]
    size = int(np.prod(batch, dtype=np.int64))
    log_a = -math.log(k)
    log_b = -math.log(n)

    track = cfg.unroll_grad and C.tracked
    cost = C if track else nc.detach(C)
    # untracked solves iterate on raw arrays; tracked ones record every step
    ops = _TapeOps(eps) if track else _ArrayOps(eps)
    cost_a = nc.reshape(cost, (size, k, n)) if track else cost.value.reshape(size, k, n)

    warmup = max(2, int(cfg.warmup))
    half = warmup // 2
    act = np.arange(size)  # instances still iterating
    f = ops.wrap(np.zeros((size, k)))
    g = ops.wrap(np.zeros((size, n)))
    g_exact = g
    done_idx, done_f, done_g = [], [], []
    omega = None  # per-instance weights once over-relaxation starts
    history = []
    switch_violation = None
    first_hit = np.full(size, -1, dtype=np.int64)
    violation = np.full(size, np.inf)
    iters = 0
    for it in range(1, int(cfg.max_iters) + 1):
        w = None if omega is None else omega[act]
        f = ops.relax(f, ops.row(g, cost_a, log_a), w)
        g_exact = ops.col(f, cost_a, log_b)
        g = ops.relax(g, g_exact, w)
        iters = it
        cv = ops.value(cost_a)
        violation[act] = marginal_violation(_gibbs(ops.value(f), ops.value(g_exact), cv, eps))
        hit = violation[act] <= cfg.tol
        if hit.any():
            first_hit[act[hit]] = it
            hit_pos = np.flatnonzero(hit)
            done_idx.append(act[hit_pos])
            done_f.append(ops.take(f, hit_pos))
            done_g.append(ops.take(g_exact, hit_pos))
            keep = np.flatnonzero(~hit)
            act = act[keep]
            if act.size == 0:
                break
            f, g, g_exact, cost_a = (ops.take(x, keep) for x in (f, g, g_exact, cost_a))
        if not cfg.overrelax:
            continue
        if omega is None:
            history.append(violation.copy())
            if it == warmup:
                ratio = np.where(history[-half - 1] > 0, violation / np.maximum(history[-half - 1], 1e-300), 0.0)
                eta = np.clip(ratio, 0.0, 1.0) ** (1.0 / half)
                omega = np.minimum(2.0 / (1.0 + np.sqrt(1.0 - np.minimum(eta, 0.9999))), OMEGA_MAX)
                switch_violation = violation.copy()
        else:
            # fall back to plain sweeps on any instance the relaxation destabilises
            blown = violation[act] > 10.0 * np.maximum(switch_violation[act], cfg.tol)
            if np.any(blown & (omega[act] != 1.0)):
                omega[act[blown]] = 1.0
    if act.size or not done_idx:
        done_idx.append(act)
        done_f.append(f)
        done_g.append(g_exact)

    order = np.concatenate(done_idx)
    if len(done_f) == 1:
        f, g_exact = done_f[0], done_g[0]
    else:
        inv = np.argsort(order)
        f, g_exact = ops.take(ops.concat(done_f), inv), ops.take(ops.concat(done_g), inv)
    f = nc.reshape(ops.to_mat(f), batch + (k, 1))
    g_exact = nc.reshape(ops.to_mat(g_exact), batch + (1, n))
    fb = nc.broadcast_to(f, C.shape)
    gb = nc.broadcast_to(g_exact, C.shape)
    plan = nc.exp(nc.scale(nc.sub(nc.add(fb, gb), cost), 1.0 / eps))
    converged = first_hit >= 0
    used = np.where(converged, first_hit, iters).reshape(batch)
    violation = violation.reshape(batch)
    converged = converged.reshape(batch)
    if batch == ():
        return TransportPlan(plan, int(used), float(violation), bool(converged))
    return TransportPlan(plan, used, violation, converged)


def transport_score(plan, sim: Mat) -> Mat:
    """Transport-weighted similarity ``sum_uv T_uv * sim_uv`` (over the last two axes)."""
    t = plan.plan if isinstance(plan, TransportPlan) else nc.const(plan)
    sim = nc.const(sim)
    if t.shape != sim.shape:
        raise DimensionError(f"transport_score: plan {t.shape} vs sim {sim.shape}")
    return nc.sum(nc.sum(nc.mul(t, sim), axis=-1), axis=-1)


def exact_matching_oracle(C) -> tuple[float, tuple[int, ...]]:
    """Exact balanced OT on a square instance by enumerating permutations.

    With uniform marginals on a ``K x K`` cost the optimum sits on a vertex of
    the Birkhoff polytope, i.e. a permutation scaled by ``1/K``. Returns the
    optimal cost and the lexicographically smallest optimal permutation.
    """
    c = C.value if isinstance(C, Mat) else np.asarray(C, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise DimensionError(f"exact_matching_oracle: need a square matrix, got {c.shape}")
    k = c.shape[0]
    if k > MAX_ORACLE_SIZE:
        raise SizeError(f"exact_matching_oracle: K={k} exceeds {MAX_ORACLE_SIZE}")
    best_cost = math.inf
    best_perm: tuple[int, ...] = ()
    rows = range(k)
    # permutations() yields lexicographic order, so strict < keeps the first optimum
    for perm in itertools.permutations(rows):
        total = 0.0
        for i in rows:
            total += c[i, perm[i]]
        total /= k
        if total < best_cost:
            best_cost, best_perm = total, perm
    return best_cost, best_perm
