"""Classification and regression metrics written against plain arrays."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy.stats import rankdata

from .diffcore import softmax


@dataclass
class Metrics:
    accuracy: Optional[float] = None
    auroc: Optional[float] = None
    micro_f1: Optional[float] = None
    macro_f1: Optional[float] = None
    mse: Optional[float] = None
    n: int = 0
    per_class: Dict[str, List[int]] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)

    def headline(self) -> float:
        """Accuracy for classification, negative MSE for regression."""
        return self.accuracy if self.accuracy is not None else -self.mse


def auroc_binary(scores, labels) -> float:
    """Mann-Whitney estimate of P(score_pos > score_neg), ties counted as 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _nanmean(values) -> Optional[float]:
    values = [v for v in values if not np.isnan(v)]
    return float(np.mean(values)) if values else None


def auroc_ovr(probs: np.ndarray, labels: np.ndarray) -> Optional[float]:
    """One-vs-rest macro AUROC over classes that have both positives and negatives."""
    k = probs.shape[1]
    if k == 2:
        v = auroc_binary(probs[:, 1], labels == 1)
        return None if np.isnan(v) else v
    return _nanmean([auroc_binary(probs[:, c], labels == c) for c in range(k)])


def _f1(tp, fp, fn) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def f1_scores(pred: np.ndarray, true: np.ndarray) -> tuple:
    """Micro and macro F1 from 0/1 indicator matrices ``(N, C)``.

    Macro averages over classes that occur in either the truth or the predictions.
    """
    tp = (pred & true).sum(axis=0)
    fp = (pred & ~true).sum(axis=0)
    fn = (~pred & true).sum(axis=0)
    micro = _f1(tp.sum(), fp.sum(), fn.sum())
    seen = (true.sum(axis=0) + pred.sum(axis=0)) > 0
    macro = float(np.mean([_f1(a, b, c) for a, b, c, s in zip(tp, fp, fn, seen) if s])) if seen.any() else 0.0
    return float(micro), macro


def predicted_labels(task_kind: str, logits: np.ndarray) -> np.ndarray:
    """Argmax classes (multiclass) or a 0/1 matrix thresholded at logit 0 (multilabel)."""
    if task_kind == "multiclass":
        return np.argmax(logits, axis=-1)
    if task_kind == "multilabel":
        return (logits > 0).astype(np.int64)
    raise ValueError(f"no discrete prediction for task kind {task_kind!r}")


def compute_metrics(task_kind: str, logits: np.ndarray, targets: np.ndarray,
                    num_classes: Optional[int] = None) -> Metrics:
    logits = np.asarray(logits, dtype=np.float64)
    n = len(targets)
    if n == 0:
        raise ValueError("cannot compute metrics on an empty split")
    if task_kind == "regression":
        diff = logits.reshape(n) - np.asarray(targets, dtype=np.float64).reshape(n)
        return Metrics(mse=float(np.mean(diff * diff)), n=n)
    if task_kind == "multiclass":
        y = np.asarray(targets, dtype=np.int64)
        k = logits.shape[1] if num_classes is None else num_classes
        pred = np.argmax(logits, axis=1)
        eye = np.eye(k, dtype=bool)
        micro, macro = f1_scores(eye[pred], eye[y])
        per_class = {str(c): [int((y == c).sum()), int((pred == c).sum())] for c in range(k)}
        return Metrics(accuracy=float(np.mean(pred == y)), auroc=auroc_ovr(softmax(logits), y),
                       micro_f1=micro, macro_f1=macro, n=n, per_class=per_class)
    if task_kind == "multilabel":
        y = np.asarray(targets).astype(bool)
        pred = logits > 0
        micro, macro = f1_scores(pred, y)
        au = _nanmean([auroc_binary(logits[:, c], y[:, c]) for c in range(y.shape[1])])
        per_class = {str(c): [int(y[:, c].sum()), int(pred[:, c].sum())] for c in range(y.shape[1])}
        return Metrics(accuracy=float(np.mean(np.all(pred == y, axis=1))), auroc=au,
                       micro_f1=micro, macro_f1=macro, n=n, per_class=per_class)
    raise ValueError(f"unknown task kind {task_kind!r}")
