"""Planted-part few-shot episodes and out-of-distribution pools.

Each class owns ``n_parts`` unit prototype vectors. An image of class ``c``
is a grid of ``P`` patch descriptors: a random non-empty subset of class
``c``'s prototypes is planted at distinct random positions (plus Gaussian
noise of scale ``noise_sigma``), and every other patch is background.

Background patches are isotropic Gaussian noise around a context vector.
With ``shared_background=False`` each class gets its own context, which is
the signal a whole-image embedding can pick up. With
``shared_background=True`` all classes share one context, so the only class
evidence is in the planted parts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, GenerationError, SizeError
from .jsonio import pack_array, read_json, unpack_array, write_json

FORMAT_VERSION = 1
MAX_REJECTION_TRIES = 1000
FOREIGN_MAX_COSINE = 0.5


@dataclass
class Episode:
    num_classes: int
    shots: int
    test_shots: int
    num_patches: int
    input_dim: int
    n_parts: int
    noise_sigma: float
    background_scale: float
    context_strength: float
    shared_background: bool
    seed: int
    prototypes: np.ndarray  # (C, n_parts, d_in), unit rows
    contexts: np.ndarray  # (C, d_in), unit rows
    train_x: np.ndarray  # (n_train, P, d_in)
    train_y: np.ndarray
    train_mask: np.ndarray  # (n_train, P) bool
    test_x: np.ndarray
    test_y: np.ndarray
    test_mask: np.ndarray

    @property
    def grid_side(self) -> int | None:
        side = math.isqrt(self.num_patches)
        return side if side * side == self.num_patches else None

    def canonical_images(self) -> np.ndarray:
        """One noise-free image per class: context everywhere, each prototype once."""
        imgs = np.repeat(
            (self.context_strength * self.contexts)[:, None, :], self.num_patches, axis=1
        )
        imgs[:, : self.n_parts, :] = self.prototypes
        return imgs


@dataclass
class OodPool:
    kind: str
    seed: int
    images: np.ndarray  # (n, P, d_in)
    planted_mask: np.ndarray  # (n, P) bool
    prototypes: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))  # foreign prototypes


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _background(rng, n: int, p: int, d_in: int, scale: float, center: np.ndarray) -> np.ndarray:
    return center + rng.normal(scale=scale / math.sqrt(d_in), size=(n, p, d_in))


def _plant(rng, imgs, labels, prototypes, noise_sigma) -> np.ndarray:
    n, p, _ = imgs.shape
    n_parts = prototypes.shape[1]
    mask = np.zeros((n, p), dtype=bool)
    for i in range(n):
        count = int(rng.integers(1, n_parts + 1))
        parts = np.sort(rng.choice(n_parts, size=count, replace=False))
        where = rng.choice(p, size=count, replace=False)
        for part, pos in zip(parts, where):
            imgs[i, pos] = prototypes[labels[i], part] + rng.normal(scale=noise_sigma, size=imgs.shape[2])
            mask[i, pos] = True
    return mask


def gen_episode(
    C: int = 8,
    shots: int = 16,
    P: int = 49,
    d_in: int = 16,
    n_parts: int = 3,
    noise_sigma: float = 0.1,
    seed: int = 0,
    *,
    test_shots: int | None = None,
    background_scale: float = 1.0,
    context_strength: float = 0.5,
    shared_background: bool = False,
) -> Episode:
    """Generate a few-shot episode; bit-identical for identical arguments."""
    if C < 1 or shots < 1 or d_in < 1 or n_parts < 1:
        raise SizeError("C, shots, d_in and n_parts must all be >= 1")
    if P < n_parts:
        raise SizeError(f"P={P} must be >= n_parts={n_parts}")
    if noise_sigma < 0 or background_scale < 0 or context_strength < 0:
        raise SizeError("noise and scale parameters must be nonnegative")
    test_shots = shots if test_shots is None else int(test_shots)
    if test_shots < 1:
        raise SizeError("test_shots must be >= 1")
    rng = np.random.default_rng([seed, 303])
    prototypes = _unit(rng.normal(size=(C, n_parts, d_in)))
    contexts = _unit(rng.normal(size=(C, d_in)))
    if shared_background:
        contexts = np.repeat(contexts[:1], C, axis=0)

    def split(n_per_class):
        labels = np.repeat(np.arange(C), n_per_class)
        centers = (context_strength * contexts)[labels][:, None, :]
        imgs = _background(rng, len(labels), P, d_in, background_scale, centers)
        mask = _plant(rng, imgs, labels, prototypes, noise_sigma)
        return imgs, labels, mask

    train_x, train_y, train_mask = split(shots)
    test_x, test_y, test_mask = split(test_shots)
    return Episode(
        num_classes=C,
        shots=shots,
        test_shots=test_shots,
        num_patches=P,
        input_dim=d_in,
        n_parts=n_parts,
        noise_sigma=float(noise_sigma),
        background_scale=float(background_scale),
        context_strength=float(context_strength),
        shared_background=bool(shared_background),
        seed=int(seed),
        prototypes=prototypes,
        contexts=contexts,
        train_x=train_x,
        train_y=train_y,
        train_mask=train_mask,
        test_x=test_x,
        test_y=test_y,
        test_mask=test_mask,
    )


def gen_ood_pool(episode: Episode, size: int = 100, kind: str = "background", seed: int = 0) -> OodPool:
    """Images no in-distribution class could have produced.

    ``background``: pure zero-mean noise patches, nothing planted.
    ``foreign``: the same noise with freshly drawn prototypes planted, each
    at cosine below 0.5 to every episode prototype.
    """
    if kind not in ("background", "foreign"):
        raise SizeError(f"unknown OOD kind {kind!r}")
    if size < 0:
        raise SizeError("size must be nonnegative")
    rng = np.random.default_rng([seed, 404, 0 if kind == "background" else 1])
    p, d_in = episode.num_patches, episode.input_dim
    imgs = _background(rng, size, p, d_in, episode.background_scale, np.zeros(d_in))
    if kind == "background":
        return OodPool(kind, int(seed), imgs, np.zeros((size, p), dtype=bool), np.zeros((0, episode.n_parts, d_in)))

    known = episode.prototypes.reshape(-1, d_in)
    n_foreign = episode.num_classes
    foreign = np.zeros((n_foreign, episode.n_parts, d_in))
    for c in range(n_foreign):
        for j in range(episode.n_parts):
            for _ in range(MAX_REJECTION_TRIES):
                cand = _unit(rng.normal(size=d_in))
                if np.max(known @ cand) < FOREIGN_MAX_COSINE:
                    foreign[c, j] = cand
                    break
            else:
                raise GenerationError(
                    f"no foreign prototype with cosine < {FOREIGN_MAX_COSINE} after {MAX_REJECTION_TRIES} tries; "
                    f"d_in={d_in} is too small"
                )
    labels = rng.integers(0, n_foreign, size=size)
    mask = _plant(rng, imgs, labels, foreign, episode.noise_sigma)
    return OodPool(kind, int(seed), imgs, mask, foreign)


_EPISODE_SCALARS = {
    "num_classes": int,
    "shots": int,
    "test_shots": int,
    "num_patches": int,
    "input_dim": int,
    "n_parts": int,
    "noise_sigma": float,
    "background_scale": float,
    "context_strength": float,
    "shared_background": bool,
    "seed": int,
}
_EPISODE_ARRAYS = ("prototypes", "contexts", "train_x", "train_y", "train_mask", "test_x", "test_y", "test_mask")


def episode_to_dict(ep: Episode) -> dict:
    out = {"format_version": FORMAT_VERSION, "kind": "episode"}
    for k in _EPISODE_SCALARS:
        out[k] = getattr(ep, k)
    for k in _EPISODE_ARRAYS:
        out[k] = pack_array(getattr(ep, k))
    return out


def episode_from_dict(obj: dict, source: str = "episode") -> Episode:
    kwargs = {}
    for k, typ in _EPISODE_SCALARS.items():
        if k not in obj:
            raise FormatError(f"{source}: missing field {k!r}")
        val = obj[k]
        if typ is bool and not isinstance(val, bool):
            raise FormatError(f"{source}: field {k!r} must be a boolean")
        if typ is not bool and (isinstance(val, bool) or not isinstance(val, (int, float))):
            raise FormatError(f"{source}: field {k!r} must be numeric")
        kwargs[k] = typ(val)
    for k in _EPISODE_ARRAYS:
        if k not in obj:
            raise FormatError(f"{source}: missing field {k!r}")
        kwargs[k] = unpack_array(obj[k], f"{source}.{k}")
    ep = Episode(**kwargs)
    n_tr = ep.num_classes * ep.shots
    n_te = ep.num_classes * ep.test_shots
    expect = {
        "train_x": (n_tr, ep.num_patches, ep.input_dim),
        "test_x": (n_te, ep.num_patches, ep.input_dim),
        "train_mask": (n_tr, ep.num_patches),
        "test_mask": (n_te, ep.num_patches),
        "train_y": (n_tr,),
        "test_y": (n_te,),
        "prototypes": (ep.num_classes, ep.n_parts, ep.input_dim),
        "contexts": (ep.num_classes, ep.input_dim),
    }
    for k, shape in expect.items():
        if getattr(ep, k).shape != shape:
            raise FormatError(f"{source}.{k}: shape {getattr(ep, k).shape}, expected {shape}")
    return ep


def save_episode(ep: Episode, path) -> None:
    write_json(episode_to_dict(ep), path)


def load_episode(path) -> Episode:
    return episode_from_dict(read_json(path, kind="episode", version=FORMAT_VERSION), str(path))


def ood_to_dict(pool: OodPool) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "ood_pool",
        "ood_kind": pool.kind,
        "seed": pool.seed,
        "images": pack_array(pool.images),
        "planted_mask": pack_array(pool.planted_mask),
        "prototypes": pack_array(pool.prototypes),
    }


def save_ood_pool(pool: OodPool, path) -> None:
    write_json(ood_to_dict(pool), path)


def load_ood_pool(path) -> OodPool:
    obj = read_json(path, kind="ood_pool", version=FORMAT_VERSION)
    try:
        return OodPool(
            kind=str(obj["ood_kind"]),
            seed=int(obj["seed"]),
            images=unpack_array(obj["images"], f"{path}.images"),
            planted_mask=unpack_array(obj["planted_mask"], f"{path}.planted_mask"),
            prototypes=unpack_array(obj["prototypes"], f"{path}.prototypes"),
        )
    except KeyError as exc:
        raise FormatError(f"{path}: missing field {exc}") from exc
