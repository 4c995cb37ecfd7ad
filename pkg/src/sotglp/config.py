"""Run configuration: one flat record covering every module's knobs."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .errors import ConfigError
from .objective import ScoringConfig
from .otcore import SinkhornConfig


@dataclass(frozen=True)
class RunConfig:
    # episode
    num_classes: int = 8
    shots: int = 16
    test_shots: int = 16
    num_patches: int = 49
    input_dim: int = 16
    n_parts: int = 3
    noise_sigma: float = 0.1
    background_scale: float = 1.0
    context_strength: float = 0.5
    shared_background: bool = False
    data_seed: int = 0
    ood_size: int = 100
    # encoders
    embed_dim: int = 32
    num_layers: int = 2
    encoder_seed: int = 0
    align_text: bool = True
    # prompts
    n_global: int = 4
    n_local: int = 4
    prompt_len: int = 4
    init_noise: float = 0.02
    dropout: float = 0.25
    # local branch / OT
    top_k: int = 10
    epsilon: float = 0.05
    sinkhorn_iters: int = 200
    sinkhorn_tol: float = 1e-6
    overrelax: bool = True
    # scoring
    tau: float = 0.07
    lam: float = 0.25
    # optimisation
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.01
    epochs: int = 50
    warmup_epochs: int = 5
    batch_size: int = 32
    seeds: tuple[int, ...] = (0, 1, 2)
    # ablations
    no_vv: bool = False
    no_proj: bool = False
    shared_local: bool = False
    detach_plan: bool = False
    no_normalize: bool = False
    # sweeps
    sweep_parallel: bool = False
    out_dir: str = "runs"

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        self.validate()

    def validate(self) -> None:
        positive = ("num_classes", "shots", "test_shots", "num_patches", "input_dim", "n_parts", "embed_dim",
                    "n_global", "n_local", "prompt_len", "top_k", "sinkhorn_iters", "batch_size")
        for name in positive:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.num_patches < self.n_parts:
            raise ConfigError("num_patches must be >= n_parts")
        if self.num_layers < 0 or self.epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("num_layers, epochs and warmup_epochs must be >= 0")
        if self.epochs > 0 and self.warmup_epochs >= self.epochs:
            raise ConfigError("warmup_epochs must be < epochs")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")
        if self.lr < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("lr and weight_decay must be >= 0, momentum in [0, 1)")
        if self.noise_sigma < 0 or self.init_noise < 0:
            raise ConfigError("noise scales must be >= 0")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        # the sub-configs check their own ranges
        self.sinkhorn()
        self.scoring()

    def sinkhorn(self) -> SinkhornConfig:
        return SinkhornConfig(
            epsilon=self.epsilon,
            max_iters=self.sinkhorn_iters,
            tol=self.sinkhorn_tol,
            unroll_grad=not self.detach_plan,
            overrelax=self.overrelax,
        )

    def scoring(self) -> ScoringConfig:
        return ScoringConfig(tau=self.tau, lam=self.lam)

    def effective_k(self) -> int:
        return min(self.top_k, self.num_patches)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["seeds"] = list(self.seeds)
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(obj) - names)
        if unknown:
            raise ConfigError(f"unknown config fields: {', '.join(unknown)}")
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
