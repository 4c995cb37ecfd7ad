"""Built-in self-test: solver oracles, gradient checks and config validation.

Each check is seeded and returns a :class:`CheckResult`; the report is a
plain dict so two runs can be compared byte for byte.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numcore as nc
from .config import RunConfig
from .errors import ConfigError
from .model import build_encoders, featurize, forward, init_model
from .otcore import SinkhornConfig, cost_from_sim, exact_matching_oracle, marginal_violation, sinkhorn_plan
from .synthdata import gen_episode


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""

    def __post_init__(self):
        self.passed, self.value, self.threshold = bool(self.passed), float(self.value), float(self.threshold)


def random_unit_cost(rng: np.random.Generator, k: int, n: int, d: int = 32) -> np.ndarray:
    """``1 - cos`` between random unit vectors: the cost shape the local branch produces."""
    a = rng.normal(size=(k, d))
    b = rng.normal(size=(n, d))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    return cost_from_sim(nc.Mat(np.clip(a @ b.T, -1.0, 1.0))).value


def check_sinkhorn_feasibility(n_instances: int = 100, seed: int = 0, tol: float = 1e-6) -> CheckResult:
    rng = np.random.default_rng([seed, 1])
    cfg = SinkhornConfig(epsilon=0.05, max_iters=200, tol=tol)
    worst, worst_iters, failures = 0.0, 0, 0
    for _ in range(n_instances):
        k, n = int(rng.integers(2, 17)), int(rng.integers(1, 9))
        res = sinkhorn_plan(nc.Mat(random_unit_cost(rng, k, n)), cfg)
        viol = marginal_violation(res.plan)
        worst = max(worst, viol)
        worst_iters = max(worst_iters, res.iterations_used)
        failures += int(not res.converged or viol > tol)
    return CheckResult("sinkhorn_feasibility", failures == 0, worst, tol,
                       f"{failures} of {n_instances} failed; max iterations {worst_iters}")


def check_oracle_equivalence(n_instances: int = 20, seed: int = 0, tol: float = 1e-2) -> CheckResult:
    rng = np.random.default_rng([seed, 2])
    cfg = SinkhornConfig(epsilon=1e-3, max_iters=200, tol=1e-6)
    worst = 0.0
    for _ in range(n_instances):
        k = int(rng.integers(2, 5))
        c = rng.uniform(0.0, 2.0, size=(k, k))
        plan = sinkhorn_plan(nc.Mat(c), cfg).plan.value
        exact, _ = exact_matching_oracle(c)
        worst = max(worst, abs(float(np.sum(plan * c)) - exact))
    return CheckResult("ot_oracle_equivalence", worst <= tol, worst, tol)


def tiny_gradient_setup(seed: int, unroll: bool):
    """The small full-loss instance used by the gradient check (C=2, P=6, K=3, N_l=2, d=8).

    The text tower is left unaligned so the loss is far from saturation and
    every leaf carries a gradient well above finite-difference noise.
    """
    cfg = RunConfig(
        num_classes=2, shots=2, test_shots=1, num_patches=6, input_dim=4, n_parts=2,
        embed_dim=8, n_global=2, n_local=2, prompt_len=1, top_k=3, lam=0.25, align_text=False,
        sinkhorn_iters=5000, sinkhorn_tol=1e-13, detach_plan=not unroll, seeds=(seed,),
        data_seed=seed, encoder_seed=seed, epochs=1, warmup_epochs=0,
    )
    ep = gen_episode(2, 2, 6, 4, 2, 0.1, seed, test_shots=1)
    enc = build_encoders(cfg, ep)
    model = init_model(cfg, enc, seed)
    # move off the symmetric init so every leaf sees a generic gradient
    rng = np.random.default_rng([seed, 3])
    model.bank.global_prompts += rng.normal(scale=0.05, size=model.bank.global_prompts.shape)
    model.bank.local_prompts += rng.normal(scale=0.05, size=model.bank.local_prompts.shape)
    model.proj.weight += rng.normal(scale=0.05, size=model.proj.weight.shape)
    return model, featurize(enc, ep.train_x), ep.train_y


def gradient_relative_error(seed: int, unroll: bool, h: float = 1e-5) -> float:
    """Max over leaves of ``|g_tape - g_fd| / |g_fd|`` (2-norms) for the full loss.

    In detached mode the reference function holds the transport plan at its
    base-point value, which is the function that mode differentiates.
    """
    model, feats, labels = tiny_gradient_setup(seed, unroll)
    tape = nc.Tape()
    out = forward(model, feats, labels, tape=tape)
    grads = nc.backward(out.loss, tape)
    g_tape = [grads[leaf.node_id] for leaf in out.leaves]
    fixed = None if unroll else out.local.plan.plan.value
    params = [model.bank.global_prompts, model.bank.local_prompts, model.proj.weight]

    def loss_at(arrays):
        saved = [p.copy() for p in params]
        for p, a in zip(params, arrays):
            p[...] = a
        try:
            return forward(model, feats, labels, fixed_plan=fixed).loss.item()
        finally:
            for p, s in zip(params, saved):
                p[...] = s

    g_fd = nc.finite_diff_grad(loss_at, [p.copy() for p in params], h=h)
    return max(float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)) for a, b in zip(g_tape, g_fd))


def check_gradients(seeds=range(10), tol: float = 1e-4) -> list[CheckResult]:
    out = []
    for unroll in (True, False):
        worst = max(gradient_relative_error(s, unroll) for s in seeds)
        mode = "unrolled" if unroll else "detached"
        out.append(CheckResult(f"gradient_{mode}", worst <= tol, worst, tol))
    return out


def check_config_rejects_bad_epsilon() -> CheckResult:
    try:
        RunConfig(epsilon=-1.0)
    except ConfigError as exc:
        return CheckResult("config_rejects_bad_epsilon", True, 0.0, 0.0, str(exc))
    return CheckResult("config_rejects_bad_epsilon", False, 1.0, 0.0, "epsilon=-1 accepted")


def run_selftest(quick: bool = False) -> dict:
    seeds = range(3) if quick else range(10)
    checks = [check_sinkhorn_feasibility(), check_oracle_equivalence(), *check_gradients(seeds), check_config_rejects_bad_epsilon()]
    return {"passed": all(c.passed for c in checks), "checks": [asdict(c) for c in checks]}
