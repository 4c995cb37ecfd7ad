"""Global/local prompt parameters, their text embeddings, and global prompt dropout."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .encoders import TextEncoder, encode_text_batch
from .errors import ConfigError, DimensionError, SizeError
from .jsonio import pack_array, unpack_array
from .numcore import Mat, Tape

INIT_NOISE = 0.02


@dataclass
class PromptBank:
    """Learnable prompt token sequences.

    ``global_prompts`` is ``(N_g, M, d)``. ``local_prompts`` is
    ``(C, N_l, M, d)``, or ``(N_l, M, d)`` when ``shared_local`` is set and
    one pool serves every class.
    """

    global_prompts: np.ndarray
    local_prompts: np.ndarray
    num_classes: int
    shared_local: bool = False

    @property
    def n_global(self) -> int:
        return self.global_prompts.shape[0]

    @property
    def n_local(self) -> int:
        return self.local_prompts.shape[-3]

    @property
    def prompt_len(self) -> int:
        return self.global_prompts.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.global_prompts.shape[2]

    def num_parameters(self) -> int:
        return int(self.global_prompts.size + self.local_prompts.size)

    def copy(self) -> "PromptBank":
        return PromptBank(self.global_prompts.copy(), self.local_prompts.copy(), self.num_classes, self.shared_local)

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "shared_local": self.shared_local,
            "global_prompts": pack_array(self.global_prompts),
            "local_prompts": pack_array(self.local_prompts),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "PromptBank":
        bank = cls(
            unpack_array(obj["global_prompts"], "global_prompts"),
            unpack_array(obj["local_prompts"], "local_prompts"),
            int(obj["num_classes"]),
            bool(obj["shared_local"]),
        )
        want = 3 if bank.shared_local else 4
        if bank.global_prompts.ndim != 3 or bank.local_prompts.ndim != want:
            raise DimensionError("prompt bank arrays have the wrong rank")
        return bank


def init_prompt_bank(
    C: int,
    N_g: int = 4,
    N_l: int = 4,
    M: int = 4,
    d: int = 32,
    seed: int = 0,
    *,
    template: np.ndarray | None = None,
    noise: float = INIT_NOISE,
    shared_local: bool = False,
) -> PromptBank:
    """Every prompt starts at the template token rows plus its own Gaussian draw."""
    if min(C, N_g, N_l, M, d) < 1:
        raise SizeError("all prompt bank sizes must be >= 1")
    if noise < 0:
        raise ConfigError("init noise must be nonnegative")
    base = np.zeros((M, d)) if template is None else np.asarray(template, dtype=np.float64)
    if base.shape != (M, d):
        raise DimensionError(f"template must be {M} x {d}, got {base.shape}")
    rng = np.random.default_rng([seed, 505])
    g = base + rng.normal(scale=noise, size=(N_g, M, d))
    local_shape = (N_l, M, d) if shared_local else (C, N_l, M, d)
    loc = base + rng.normal(scale=noise, size=local_shape)
    return PromptBank(g, loc, C, shared_local)


def local_prompts_for_embeddings(text: TextEncoder, targets, prompt_len: int) -> np.ndarray:
    """Class-specific local prompt tokens whose text embeddings equal ``targets``.

    ``targets`` is ``(C, N_l, d)`` of unit rows. Before its final
    normalization the text tower is linear with an orthogonal projection, so
    the inverse is closed-form; every token of a prompt gets an equal share.
    """
    targets = np.asarray(targets, dtype=np.float64)
    c, nl, d = targets.shape
    if d != text.embed_dim or c != text.num_classes:
        raise DimensionError(f"targets {targets.shape} do not fit a {text.num_classes}-class, d={text.embed_dim} encoder")
    fixed = text.fixed_part(np.arange(c))[:, None, :]
    scale = (prompt_len + 3) * float(np.mean(np.linalg.norm(text.vocab, axis=1)))
    sums = scale * targets @ text.out_proj.T - fixed
    return np.repeat((sums / prompt_len)[:, :, None, :], prompt_len, axis=2)


@dataclass
class BankLeaves:
    """Tracked views of a bank's parameters on one tape."""

    global_prompts: Mat
    local_prompts: Mat


def bank_leaves(bank: PromptBank, tape: Tape | None) -> BankLeaves:
    if tape is None:
        return BankLeaves(nc.Mat(bank.global_prompts), nc.Mat(bank.local_prompts))
    return BankLeaves(tape.leaf(bank.global_prompts), tape.leaf(bank.local_prompts))


def embed_all_classes(bank: PromptBank, text: TextEncoder, leaves: BankLeaves | None = None) -> tuple[Mat, Mat]:
    """Text embeddings for every class: global ``(C, N_g, d)``, local ``(C, N_l, d)``."""
    if leaves is None:
        leaves = bank_leaves(bank, None)
    C, ng, nl, m, d = bank.num_classes, bank.n_global, bank.n_local, bank.prompt_len, bank.embed_dim
    g_sum = nc.reshape(nc.sum(leaves.global_prompts, axis=1), (1, ng, d))
    g_sum = nc.reshape(nc.broadcast_to(g_sum, (C, ng, d)), (C * ng, d))
    g_emb = encode_text_batch(text, g_sum, np.repeat(np.arange(C), ng), m)
    l_sum = nc.sum(leaves.local_prompts, axis=-2)
    if bank.shared_local:
        l_sum = nc.broadcast_to(nc.reshape(l_sum, (1, nl, d)), (C, nl, d))
    l_emb = encode_text_batch(text, nc.reshape(l_sum, (C * nl, d)), np.repeat(np.arange(C), nl), m)
    return nc.reshape(g_emb, (C, ng, d)), nc.reshape(l_emb, (C, nl, d))


def embed_class_prompts(bank: PromptBank, text: TextEncoder, class_id: int, leaves: BankLeaves | None = None) -> tuple[Mat, Mat]:
    """``(N_g x d, N_l x d)`` unit-norm embeddings of one class's prompts."""
    if not 0 <= int(class_id) < bank.num_classes:
        raise IndexError(f"class id {class_id} outside [0, {bank.num_classes})")
    g, loc = embed_all_classes(bank, text, leaves)
    d = bank.embed_dim
    g = nc.reshape(nc.take(g, [class_id], axis=0), (bank.n_global, d))
    loc = nc.reshape(nc.take(loc, [class_id], axis=0), (bank.n_local, d))
    return g, loc


def sample_prompt_dropout(N_g: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Active global prompt indices (ascending); never empty."""
    if not 0 <= rate < 1:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    keep = rng.random(N_g) >= rate
    if not keep.any():
        keep[int(rng.integers(N_g))] = True
    return np.flatnonzero(keep)
