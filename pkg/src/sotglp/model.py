"""Assembles encoders, prompts, the local branch and the objective into one model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .align import BatchLocal, local_scores_batch
from .config import RunConfig
from .encoders import (
    Encoders,
    ImageFeatures,
    LocalProjection,
    TextEncoder,
    VisionEncoder,
    align_text_to_vision,
    encode_images,
    local_project,
)
from .numcore import Mat, Tape
from .otcore import TransportPlan
from .objective import BatchLogits, cross_entropy, fused_logits, global_scores, local_logits, total_loss
from .prompts import PromptBank, bank_leaves, embed_all_classes, init_prompt_bank
from .synthdata import Episode


@dataclass
class Model:
    encoders: Encoders
    bank: PromptBank
    proj: LocalProjection
    cfg: RunConfig


@dataclass
class ForwardOut:
    logits: BatchLogits
    local: BatchLocal
    leaves: list[Mat]
    l_global: Mat | None = None
    l_local: Mat | None = None
    loss: Mat | None = None

    def patch_class_sims(self) -> np.ndarray:
        """``(B, P, C)`` similarity of each patch to each class's mean local prompt."""
        return np.transpose(self.local.saliency, (0, 2, 1))


def build_encoders(cfg: RunConfig, episode: Episode | None = None) -> Encoders:
    vision = VisionEncoder.build(cfg.input_dim, cfg.embed_dim, cfg.num_layers, seed=cfg.encoder_seed)
    text = TextEncoder.build(cfg.num_classes, cfg.embed_dim, seed=cfg.encoder_seed)
    if cfg.align_text and episode is not None:
        text = align_text_to_vision(text, vision, episode.canonical_images(), cfg.prompt_len)
    return Encoders(text, vision)


def init_model(cfg: RunConfig, encoders: Encoders, seed: int) -> Model:
    bank = init_prompt_bank(
        cfg.num_classes,
        cfg.n_global,
        cfg.n_local,
        cfg.prompt_len,
        cfg.embed_dim,
        seed,
        template=encoders.text.template_embedding(cfg.prompt_len),
        noise=cfg.init_noise,
        shared_local=cfg.shared_local,
    )
    proj = LocalProjection.identity(cfg.embed_dim, enabled=not cfg.no_proj)
    return Model(encoders, bank, proj, cfg)


def featurize(encoders: Encoders, images) -> ImageFeatures:
    return encode_images(encoders.vision, images)


def parameter_arrays(model: Model) -> list[np.ndarray]:
    """The learnable arrays, in tape-leaf order."""
    params = [model.bank.global_prompts, model.bank.local_prompts]
    if model.proj.enabled:
        params.append(model.proj.weight)
    return params


def forward(
    model: Model,
    feats: ImageFeatures,
    labels=None,
    tape: Tape | None = None,
    active=None,
    top_k: int | None = None,
    fixed_plan=None,
) -> ForwardOut:
    cfg = model.cfg
    leaves = bank_leaves(model.bank, tape)
    w = None
    if model.proj.enabled:
        w = tape.leaf(model.proj.weight) if tape is not None else nc.Mat(model.proj.weight)
    g_emb, l_emb = embed_all_classes(model.bank, model.encoders.text, leaves)
    if active is None:
        active = np.arange(model.bank.n_global)
    gl = global_scores(nc.Mat(feats.z_global), g_emb, active, cfg.tau)
    patches = feats.qk if cfg.no_vv else feats.vv
    z_local = local_project(model.proj, nc.Mat(patches), weight=w, normalize=not cfg.no_normalize)
    k = min(top_k or cfg.top_k, patches.shape[1])
    loc = local_scores_batch(z_local, l_emb, k, cfg.sinkhorn(), check_cost=not cfg.no_normalize, fixed_plan=fixed_plan)
    ll = local_logits(loc.phi, cfg.tau)
    logits = BatchLogits(gl, ll, fused_logits(gl, ll, cfg.lam))
    param_leaves = [leaves.global_prompts, leaves.local_prompts] + ([w] if w is not None else [])
    out = ForwardOut(logits, loc, param_leaves)
    if labels is not None:
        out.l_global = cross_entropy(gl, labels)
        out.l_local = cross_entropy(ll, labels)
        out.loss = total_loss(out.l_global, out.l_local, cfg.lam)
    return out


def predict(model: Model, feats: ImageFeatures, batch_size: int = 256) -> ForwardOut:
    """Evaluation-mode forward (all global prompts active, no tape), concatenated over chunks."""
    if len(feats) <= batch_size:
        return forward(model, feats)
    parts = [forward(model, feats.subset(np.arange(i, min(i + batch_size, len(feats))))) for i in range(0, len(feats), batch_size)]
    return _concat_outputs(parts)


def _concat_outputs(parts: list[ForwardOut]) -> ForwardOut:
    def cat(ms):
        return nc.Mat(np.concatenate([m.value for m in ms], axis=0))

    logits = BatchLogits(
        cat([p.logits.global_logits for p in parts]),
        cat([p.logits.local_logits for p in parts]),
        cat([p.logits.fused for p in parts]),
    )
    pl = [p.local.plan for p in parts]
    plan = TransportPlan(
        cat([x.plan for x in pl]),
        np.concatenate([x.iterations_used for x in pl]),
        np.concatenate([x.final_violation for x in pl]),
        np.concatenate([x.converged for x in pl]),
    )
    loc = BatchLocal(
        cat([p.local.phi for p in parts]),
        plan,
        np.concatenate([p.local.indices for p in parts]),
        np.concatenate([p.local.saliency for p in parts]),
        cat([p.local.sim for p in parts]),
        cat([p.local.patch_sims for p in parts]),
    )
    return ForwardOut(logits, loc, [])
