"""Evaluation metrics: Top-1, AUROC, FPR at 95% TPR, and transport-plan statistics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractError, DimensionError
from .numcore import Mat
from .otcore import TransportPlan


def _arr(x) -> np.ndarray:
    if isinstance(x, Mat):
        return x.value
    if isinstance(x, TransportPlan):
        return x.plan.value
    return np.asarray(x, dtype=np.float64)


def predictions(logits) -> np.ndarray:
    """Row argmax; ``np.argmax`` already returns the first (smallest) index on ties."""
    return np.argmax(_arr(logits), axis=-1)


def top1_accuracy(logits, labels) -> float:
    scores = _arr(logits)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[0] < 1:
        raise ContractError(f"top1_accuracy: need a nonempty B x C array, got {scores.shape}")
    if labels.shape != (scores.shape[0],):
        raise DimensionError(f"top1_accuracy: {labels.shape} labels for {scores.shape[0]} rows")
    return float(np.mean(predictions(scores) == labels))


def per_class_accuracy(logits, labels, num_classes: int) -> list[float]:
    """Accuracy restricted to each true class; NaN-free (absent classes report 0)."""
    pred = predictions(logits)
    labels = np.asarray(labels)
    out = []
    for c in range(num_classes):
        sel = labels == c
        out.append(float(np.mean(pred[sel] == c)) if sel.any() else 0.0)
    return out


def _check_scores(id_scores, ood_scores) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(id_scores, dtype=np.float64).ravel()
    b = np.asarray(ood_scores, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ContractError("ID and OOD score sets must both be nonempty")
    return a, b


def auroc(id_scores, ood_scores) -> float:
    """P(id > ood) + 0.5 P(id == ood), computed from sorted ranks."""
    a, b = _check_scores(id_scores, ood_scores)
    b = np.sort(b)
    below = np.searchsorted(b, a, side="left")
    at_or_below = np.searchsorted(b, a, side="right")
    return float((below.sum() + 0.5 * (at_or_below - below).sum()) / (a.size * b.size))


def tpr95_threshold(id_scores) -> float:
    """Largest ``t`` with at least 95% of ID scores ``>= t`` (no interpolation)."""
    a = np.sort(np.asarray(id_scores, dtype=np.float64).ravel())[::-1]
    k = (95 * a.size + 99) // 100  # ceil(0.95 n) in exact integer arithmetic
    return float(a[k - 1])


def fpr_at_tpr95(id_scores, ood_scores) -> float:
    a, b = _check_scores(id_scores, ood_scores)
    return float(np.mean(b >= tpr95_threshold(a)))


def _plan_stack(plans) -> np.ndarray:
    if isinstance(plans, (list, tuple)):
        if not plans:
            raise ContractError("no plans given")
        arrs = [_arr(p) for p in plans]
        return np.concatenate([x.reshape((-1,) + x.shape[-2:]) for x in arrs], axis=0)
    x = _arr(plans)
    if x.ndim < 2:
        raise DimensionError(f"plans must be (..., K, N), got {x.shape}")
    return x.reshape((-1,) + x.shape[-2:])


def prompt_overlap(plans) -> float:
    """Mean fraction of prompt pairs whose heaviest patch coincides.

    Accepts a list of plans or one batched ``(..., K, N_l)`` array.
    """
    t = _plan_stack(plans)
    n = t.shape[-1]
    if n < 2:
        raise ContractError("prompt_overlap needs at least two prompts")
    top = np.argmax(t, axis=-2)  # (n_plans, N_l)
    i, j = np.triu_indices(n, k=1)
    return float(np.mean(top[:, i] == top[:, j]))


def plan_entropy(plans) -> np.ndarray:
    """Shannon entropy of each plan's mass, with ``0 log 0 = 0``."""
    t = _plan_stack(plans)
    logs = np.log(np.where(t > 0, t, 1.0))
    return -np.sum(t * logs, axis=(-2, -1))


def mean_plan_entropy(plans) -> float:
    return float(np.mean(plan_entropy(plans)))


@dataclass
class MetricsReport:
    top1: float
    auroc: float | None = None
    fpr95: float | None = None
    mean_plan_entropy: float | None = None
    prompt_overlap: float | None = None
    per_class_accuracy: list[float] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("top1", "auroc", "fpr95", "prompt_overlap"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ContractError(f"{name}={v} outside [0, 1]")
        if any(not 0.0 <= v <= 1.0 for v in self.per_class_accuracy):
            raise ContractError("per-class accuracy outside [0, 1]")
        if (self.auroc is None) != (self.fpr95 is None):
            raise ContractError("auroc and fpr95 come together from one ID/OOD pair")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, allow_nan=False) + "\n"

    def csv_row(self) -> dict:
        row = {k: v for k, v in self.to_dict().items() if k not in ("per_class_accuracy", "extra")}
        row.update({f"acc_class_{c}": v for c, v in enumerate(self.per_class_accuracy)})
        row.update(self.extra)
        return {k: ("" if v is None else v) for k, v in row.items()}

    def to_csv(self) -> str:
        row = self.csv_row()
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(row), lineterminator="\n")
        w.writeheader()
        w.writerow(row)
        return buf.getvalue()
