"""Toy frozen text/vision encoders and the learnable local projection.

The vision encoder runs two streams from the same embedded token sequence:
a standard query-key stream whose final [CLS] token is the global image
embedding, and a value-value stream whose patch tokens feed the local
branch. Both use single-head attention with a residual connection and no MLP
or normalization sublayers.

The text encoder mean-pools ``[SOS; prompt; class token; EOT]``, applies a
frozen orthogonal projection and normalizes. Its class rows can be aligned to
the vision tower (:func:`align_text_to_vision`) to play the role of a
contrastively pretrained model.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import DegenerateInputError, DimensionError, FormatError, VersionError
from .jsonio import pack_array, read_json, unpack_array, write_json
from .numcore import Mat

FORMAT_VERSION = 1
TEMPLATE_TOKENS = ("a", "photo", "of", "a")
TEXT_TOKEN_SCALE = 0.2


def _orthogonal(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


@dataclass
class TextEncoder:
    embed_dim: int
    num_classes: int
    vocab: np.ndarray  # rows: classes first, then template words
    out_proj: np.ndarray
    sos: np.ndarray
    eot: np.ndarray
    words: tuple[str, ...] = ("a", "photo", "of")

    @classmethod
    def build(cls, num_classes: int, embed_dim: int = 32, seed: int = 0, token_scale: float = TEXT_TOKEN_SCALE) -> "TextEncoder":
        """Random token table with rows of typical norm ``token_scale``.

        The output is normalized, so a prompt's angular step per unit of
        gradient grows as the token rows shrink; small rows let prompts move
        at the optimizer's nominal learning rate.
        """
        rng = np.random.default_rng([seed, 101])
        d = embed_dim
        words = tuple(dict.fromkeys(TEMPLATE_TOKENS))
        std = token_scale / math.sqrt(d)
        vocab = rng.normal(scale=std, size=(num_classes + len(words), d))
        return cls(
            embed_dim=d,
            num_classes=num_classes,
            vocab=vocab,
            out_proj=_orthogonal(rng, d),
            sos=rng.normal(scale=std, size=d),
            eot=rng.normal(scale=std, size=d),
            words=words,
        )

    def class_row(self, class_id: int) -> np.ndarray:
        if not 0 <= int(class_id) < self.num_classes:
            raise IndexError(f"class id {class_id} outside [0, {self.num_classes})")
        return self.vocab[int(class_id)]

    def template_embedding(self, length: int = len(TEMPLATE_TOKENS)) -> np.ndarray:
        """Frozen embedding rows of the "a photo of a" template, cycled to ``length``."""
        rows = [self.vocab[self.num_classes + self.words.index(w)] for w in TEMPLATE_TOKENS]
        return np.stack([rows[i % len(rows)] for i in range(length)])

    def fixed_part(self, class_ids) -> np.ndarray:
        """Sum of the non-learnable token rows (SOS, class token, EOT) per class."""
        ids = np.asarray(class_ids, dtype=np.intp)
        if ids.size and (ids.min() < 0 or ids.max() >= self.num_classes):
            raise IndexError(f"class id outside [0, {self.num_classes})")
        return self.vocab[ids] + self.sos + self.eot


def encode_text_batch(enc: TextEncoder, prompt_sums: Mat, class_ids, prompt_len: int) -> Mat:
    """Encode ``n`` prompts given the per-prompt sum of their token rows.

    ``prompt_sums`` is ``(n, d)``; pooling over ``prompt_len + 3`` tokens is
    linear, so the sum is all the encoder needs from the learnable part.
    """
    prompt_sums = nc.const(prompt_sums)
    n, d = prompt_sums.shape
    fixed = nc.Mat(enc.fixed_part(class_ids).reshape(n, d))
    pooled = nc.scale(nc.add(prompt_sums, fixed), 1.0 / (prompt_len + 3))
    return nc.l2norm_rows(nc.matmul(pooled, nc.Mat(enc.out_proj)))


def encode_text(enc: TextEncoder, prompt_tokens: Mat, class_id: int) -> Mat:
    """Unit-norm text embedding of ``[SOS; prompt_tokens; class token; EOT]``."""
    prompt_tokens = nc.const(prompt_tokens)
    if prompt_tokens.ndim != 2 or prompt_tokens.shape[0] < 1 or prompt_tokens.shape[1] != enc.embed_dim:
        raise DimensionError(f"encode_text: prompt must be M x {enc.embed_dim}, got {prompt_tokens.shape}")
    enc.class_row(class_id)
    m = prompt_tokens.shape[0]
    s = nc.sum(prompt_tokens, axis=0, keepdims=True)
    return nc.reshape(encode_text_batch(enc, s, [class_id], m), (enc.embed_dim,))


@dataclass
class AttentionBlock:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray


@dataclass
class VisionEncoder:
    input_dim: int
    embed_dim: int
    patch_embed: np.ndarray
    cls_token: np.ndarray
    layers: list[AttentionBlock] = field(default_factory=list)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @classmethod
    def build(
        cls,
        input_dim: int = 16,
        embed_dim: int = 32,
        num_layers: int = 2,
        seed: int = 0,
        token_scale: float = 2.0,
        out_scale: float = 0.5,
    ) -> "VisionEncoder":
        """Random frozen weights.

        ``token_scale`` sets the typical token norm relative to the input
        norm; larger tokens give sharper attention. ``out_scale`` shrinks the
        per-layer output projection so the residual path dominates.
        """
        rng = np.random.default_rng([seed, 202])
        d = embed_dim
        patch_embed = rng.normal(scale=token_scale / math.sqrt(input_dim), size=(input_dim, d))
        cls_token = rng.normal(scale=0.1 / math.sqrt(d), size=d)
        layers = [
            AttentionBlock(
                w_q=rng.normal(scale=1.0 / math.sqrt(d), size=(d, d)),
                w_k=rng.normal(scale=1.0 / math.sqrt(d), size=(d, d)),
                w_v=rng.normal(scale=1.0 / math.sqrt(d), size=(d, d)),
                w_o=rng.normal(scale=out_scale / math.sqrt(d), size=(d, d)),
            )
            for _ in range(num_layers)
        ]
        return cls(input_dim, d, patch_embed, cls_token, layers)


def _attend(scores: Mat, values: Mat, z_prev: Mat, w_o: np.ndarray) -> Mat:
    a = nc.softmax_rows(scores)
    return nc.add(z_prev, nc.matmul(nc.matmul(a, values), nc.const(w_o)))


def vv_attention_layer(z_prev: Mat, w_v, w_o) -> Mat:
    """One value-value attention block: ``Z + softmax(V V^T / sqrt(d)) V W_o``."""
    z_prev = nc.const(z_prev)
    d = z_prev.shape[-1]
    v = nc.matmul(z_prev, nc.const(w_v))
    scores = nc.scale(nc.matmul(v, nc.transpose(v)), 1.0 / math.sqrt(d))
    return _attend(scores, v, z_prev, nc.const(w_o).value)


def qk_attention_layer(z_prev: Mat, w_q, w_k, w_v, w_o) -> Mat:
    """Standard query-key block with the same residual form."""
    z_prev = nc.const(z_prev)
    d = z_prev.shape[-1]
    q = nc.matmul(z_prev, nc.const(w_q))
    k = nc.matmul(z_prev, nc.const(w_k))
    v = nc.matmul(z_prev, nc.const(w_v))
    scores = nc.scale(nc.matmul(q, nc.transpose(k)), 1.0 / math.sqrt(d))
    return _attend(scores, v, z_prev, nc.const(w_o).value)


def embed_tokens(enc: VisionEncoder, patches: Mat) -> Mat:
    """Shared initial sequence ``[cls; patches @ patch_embed]``."""
    patches = nc.const(patches)
    if patches.ndim != 2 or patches.shape[1] != enc.input_dim:
        raise DimensionError(f"patches must be P x {enc.input_dim}, got {patches.shape}")
    if patches.shape[0] == 0:
        raise DegenerateInputError("image has no patches")
    tokens = nc.matmul(patches, nc.Mat(enc.patch_embed))
    return nc.concat([nc.Mat(enc.cls_token.reshape(1, -1)), tokens], axis=0)


def encode_image_dual(enc: VisionEncoder, patches: Mat) -> tuple[Mat, Mat, Mat]:
    """Returns ``(z_global, qk_patches, vv_patches)``.

    ``z_global`` is the unit-normalized final [CLS] token of the query-key
    stream; the patch outputs are the non-[CLS] rows of each stream, not
    normalized.
    """
    z0 = embed_tokens(enc, patches)
    z_qk = z0
    z_vv = z0
    for blk in enc.layers:
        z_qk = qk_attention_layer(z_qk, blk.w_q, blk.w_k, blk.w_v, blk.w_o)
        z_vv = vv_attention_layer(z_vv, blk.w_v, blk.w_o)
    p = z0.shape[0]
    z_global = nc.l2norm_rows(nc.take(z_qk, [0], axis=0))
    rest = list(range(1, p))
    return nc.reshape(z_global, (enc.embed_dim,)), nc.take(z_qk, rest, axis=0), nc.take(z_vv, rest, axis=0)


@dataclass
class ImageFeatures:
    """Frozen-encoder outputs for a stack of images."""

    z_global: np.ndarray  # (n, d), unit rows
    qk: np.ndarray  # (n, P, d)
    vv: np.ndarray  # (n, P, d)

    def __len__(self):
        return self.z_global.shape[0]

    def subset(self, idx) -> "ImageFeatures":
        idx = np.asarray(idx, dtype=np.intp)
        return ImageFeatures(self.z_global[idx], self.qk[idx], self.vv[idx])


def encode_images(enc: VisionEncoder, images: np.ndarray) -> ImageFeatures:
    images = np.asarray(images, dtype=np.float64)
    zg, qk, vv = [], [], []
    for img in images:
        a, b, c = encode_image_dual(enc, nc.Mat(img))
        zg.append(a.value)
        qk.append(b.value)
        vv.append(c.value)
    d = enc.embed_dim
    if not zg:
        return ImageFeatures(np.zeros((0, d)), np.zeros((0, 0, d)), np.zeros((0, 0, d)))
    return ImageFeatures(np.stack(zg), np.stack(qk), np.stack(vv))


@dataclass
class LocalProjection:
    weight: np.ndarray
    enabled: bool = True

    @classmethod
    def identity(cls, d: int, enabled: bool = True) -> "LocalProjection":
        return cls(np.eye(d), enabled)


def local_project(proj: LocalProjection, vv_patches: Mat, weight: Mat | None = None, normalize: bool = True) -> Mat:
    """Project value-value patch tokens and L2-normalize each row.

    ``weight`` overrides ``proj.weight`` (pass the tracked leaf during
    training). Accepts ``(P, d)`` or batched ``(B, P, d)`` inputs.
    """
    x = nc.const(vv_patches)
    if proj.enabled:
        w = nc.Mat(proj.weight) if weight is None else weight
        if x.ndim == 2:
            x = nc.matmul(x, w)
        else:
            lead = x.shape[:-1]
            x = nc.reshape(nc.matmul(nc.reshape(x, (-1, x.shape[-1])), w), lead + (w.shape[1],))
    return nc.l2norm_rows(x) if normalize else x


def align_text_to_vision(text: TextEncoder, vision: VisionEncoder, canonical_images, prompt_len: int = 4) -> TextEncoder:
    """Set each class row so the template prompt encodes to that class's image embedding.

    ``canonical_images`` is ``(C, P, d_in)``. This is the toy stand-in for
    contrastive pretraining: with the untrained "a photo of a" prompt the text
    embedding of class ``c`` equals the global embedding of its canonical
    image.
    """
    canonical_images = np.asarray(canonical_images, dtype=np.float64)
    if canonical_images.shape[0] != text.num_classes:
        raise DimensionError("one canonical image per class is required")
    template = text.template_embedding(prompt_len)
    template_sum = template.sum(axis=0)
    # keep the aligned class rows at the same typical norm as the other tokens
    beta = math.sqrt(prompt_len + 3) * float(np.sqrt(np.mean(np.sum(template**2, axis=1))))
    vocab = text.vocab.copy()
    for c, img in enumerate(canonical_images):
        target = encode_image_dual(vision, nc.Mat(img))[0].value
        # out_proj is orthogonal, so its inverse is its transpose
        vocab[c] = beta * target @ text.out_proj.T - text.sos - text.eot - template_sum
    return TextEncoder(text.embed_dim, text.num_classes, vocab, text.out_proj, text.sos, text.eot, text.words)


@dataclass
class Encoders:
    text: TextEncoder
    vision: VisionEncoder

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in _frozen_arrays(self):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def _frozen_arrays(enc: Encoders):
    t, v = enc.text, enc.vision
    yield from (t.vocab, t.out_proj, t.sos, t.eot, v.patch_embed, v.cls_token)
    for blk in v.layers:
        yield from (blk.w_q, blk.w_k, blk.w_v, blk.w_o)


def encoders_to_dict(enc: Encoders) -> dict:
    t, v = enc.text, enc.vision
    return {
        "format_version": FORMAT_VERSION,
        "kind": "encoders",
        "text": {
            "embed_dim": t.embed_dim,
            "num_classes": t.num_classes,
            "words": list(t.words),
            "vocab": pack_array(t.vocab),
            "out_proj": pack_array(t.out_proj),
            "sos": pack_array(t.sos),
            "eot": pack_array(t.eot),
        },
        "vision": {
            "input_dim": v.input_dim,
            "embed_dim": v.embed_dim,
            "patch_embed": pack_array(v.patch_embed),
            "cls_token": pack_array(v.cls_token),
            "layers": [
                {k: pack_array(getattr(blk, k)) for k in ("w_q", "w_k", "w_v", "w_o")} for blk in v.layers
            ],
        },
    }


def encoders_from_dict(obj: dict) -> Encoders:
    if obj.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"encoders: format_version {obj.get('format_version')!r} != {FORMAT_VERSION}")
    try:
        t, v = obj["text"], obj["vision"]
        text = TextEncoder(
            embed_dim=int(t["embed_dim"]),
            num_classes=int(t["num_classes"]),
            vocab=unpack_array(t["vocab"], "text.vocab"),
            out_proj=unpack_array(t["out_proj"], "text.out_proj"),
            sos=unpack_array(t["sos"], "text.sos"),
            eot=unpack_array(t["eot"], "text.eot"),
            words=tuple(t["words"]),
        )
        layers = [
            AttentionBlock(*(unpack_array(layer[k], f"vision.layers[{i}].{k}") for k in ("w_q", "w_k", "w_v", "w_o")))
            for i, layer in enumerate(v["layers"])
        ]
        vision = VisionEncoder(
            int(v["input_dim"]),
            int(v["embed_dim"]),
            unpack_array(v["patch_embed"], "vision.patch_embed"),
            unpack_array(v["cls_token"], "vision.cls_token"),
            layers,
        )
    except KeyError as exc:
        raise FormatError(f"encoders: missing field {exc}") from exc
    return Encoders(text, vision)


def save_encoders(enc: Encoders, path) -> None:
    write_json(encoders_to_dict(enc), path)


def load_encoders(path) -> Encoders:
    return encoders_from_dict(read_json(path, kind="encoders"))
