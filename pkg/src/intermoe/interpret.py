"""Per-sample and dataset-level views of how the reweighter uses its experts.

Every report here reads a frozen model: the local records expose weights,
expert logits and the weighted contributions that add up to the final
prediction; the global report summarises the weight distribution; the
agreement table and the expert comparison score the experts side by side.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .diffcore import ContractError
from .metrics import compute_metrics, predicted_labels
from .model import InteractionMoE
from .synthdata import MultimodalDataset

AGREEMENT_ROWS = ("Disagree, correct", "Disagree, incorrect", "Agree, correct", "Agree, incorrect")


class UnsupportedTask(ValueError):
    pass


@dataclass
class LocalRecord:
    index: int
    weights: List[float]
    expert_logits: List[List[float]]
    contributions: List[List[float]]
    prediction: List[float]
    label: object
    correct: Optional[bool]

    def as_dict(self) -> dict:
        return asdict(self)


def _infer(model: InteractionMoE, data: MultimodalDataset) -> dict:
    if not isinstance(model, InteractionMoE):
        raise UnsupportedTask("interpretation needs a model with a reweighter and experts")
    return model.infer(data.arrays)


def _correct(task_kind: str, logits: np.ndarray, targets) -> np.ndarray:
    if task_kind == "regression":
        return np.full(len(logits), None, dtype=object)
    pred = predicted_labels(task_kind, logits)
    y = np.asarray(targets)
    if task_kind == "multilabel":
        return np.all(pred == y.astype(np.int64), axis=1)
    return pred == y


def _label(value):
    value = np.asarray(value)
    return value.item() if value.ndim == 0 else value.tolist()


def local_report(model: InteractionMoE, data: MultimodalDataset,
                 indices: Optional[Sequence[int]] = None) -> List[LocalRecord]:
    """One record per sample; ``indices`` names the samples in the caller's numbering."""
    out = _infer(model, data)
    logits, w, pred = out["expert_logits"], out["weights"], out["prediction"]
    contrib = w[..., None] * logits
    correct = _correct(data.task_kind, pred, data.targets)
    idx = range(len(data)) if indices is None else indices
    return [LocalRecord(int(k), w[r].tolist(), logits[r].tolist(), contrib[r].tolist(),
                        pred[r].tolist(), _label(data.targets[r]),
                        None if correct[r] is None else bool(correct[r]))
            for r, k in enumerate(idx)]


@dataclass
class ExpertWeightStats:
    expert: str
    mean: float
    median: float
    min: float
    max: float
    std: float


@dataclass
class GlobalReport:
    experts: List[ExpertWeightStats]
    n_samples: int
    weights: np.ndarray

    def long_table(self) -> List[dict]:
        """``(sample, expert, weight)`` rows, ready for a box plot."""
        names = [e.expert for e in self.experts]
        return [{"sample": int(s), "expert": names[e], "weight": float(self.weights[s, e])}
                for s in range(self.weights.shape[0]) for e in range(self.weights.shape[1])]

    def as_dict(self, include_weights: bool = True) -> dict:
        d = {"n_samples": self.n_samples, "experts": [asdict(e) for e in self.experts]}
        if include_weights:
            d["weights"] = self.weights.tolist()
        return d


def global_report(records: Sequence[LocalRecord],
                  expert_names: Optional[Sequence[str]] = None) -> GlobalReport:
    if not records:
        raise ContractError("global report needs at least one record")
    w = np.array([r.weights for r in records], dtype=np.float64)
    names = list(expert_names) if expert_names is not None else [f"expert{e}" for e in range(w.shape[1])]
    if len(names) != w.shape[1]:
        raise ContractError(f"{len(names)} expert names for {w.shape[1]} experts")
    stats = [ExpertWeightStats(names[e], float(w[:, e].mean()), float(np.median(w[:, e])),
                               float(w[:, e].min()), float(w[:, e].max()), float(w[:, e].std()))
             for e in range(w.shape[1])]
    return GlobalReport(stats, len(records), w)


def agreement_analysis(model: InteractionMoE, data: MultimodalDataset) -> Dict[str, float]:
    """Percentages of samples split by expert agreement and ensemble correctness.

    Experts agree when their argmax (or thresholded label set) is identical.
    """
    if data.task_kind == "regression":
        raise UnsupportedTask("agreement analysis is defined for classification only")
    out = _infer(model, data)
    per_expert = [predicted_labels(data.task_kind, out["expert_logits"][:, e])
                  for e in range(out["expert_logits"].shape[1])]
    first = per_expert[0]
    agree = np.ones(len(data), dtype=bool)
    for p in per_expert[1:]:
        same = p == first
        agree &= same.all(axis=1) if same.ndim > 1 else same
    correct = _correct(data.task_kind, out["prediction"], data.targets).astype(bool)
    n = len(data)
    counts = [(~agree & correct).sum(), (~agree & ~correct).sum(),
              (agree & correct).sum(), (agree & ~correct).sum()]
    return {name: 100.0 * float(c) / n for name, c in zip(AGREEMENT_ROWS, counts)}


def expert_accuracy_comparison(model: InteractionMoE, data: MultimodalDataset) -> List[dict]:
    """Each expert scored on its own logits, then the reweighted ensemble."""
    out = _infer(model, data)
    k = data.num_classes
    rows = []
    for e, kind in enumerate(model.kinds):
        m = compute_metrics(data.task_kind, out["expert_logits"][:, e], data.targets, k)
        rows.append({"expert": kind.label, **m.as_dict()})
    m = compute_metrics(data.task_kind, out["prediction"], data.targets, k)
    rows.append({"expert": "ensemble", **m.as_dict()})
    return rows


# writers --------------------------------------------------------------------

def write_local(records: Sequence[LocalRecord], path) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r.as_dict()) + "\n")


def write_global(report: GlobalReport, path) -> None:
    Path(path).write_text(json.dumps(report.as_dict(), indent=2))


def write_long_table(report: GlobalReport, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["sample", "expert", "weight"])
        w.writeheader()
        w.writerows(report.long_table())


def write_agreement(table: Dict[str, float], path) -> None:
    Path(path).write_text(json.dumps(table, indent=2))


def write_expert_comparison(rows: Sequence[dict], path) -> None:
    cols = ["expert", "accuracy", "auroc", "micro_f1", "macro_f1", "mse", "n"]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def write_all(model: InteractionMoE, data: MultimodalDataset, out_dir,
              indices: Optional[Sequence[int]] = None) -> Dict[str, str]:
    """Write every report for ``data`` into ``out_dir``; returns the file paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = local_report(model, data, indices)
    report = global_report(records, [k.label for k in model.kinds])
    paths = {"local": out / "local.jsonl", "global": out / "global.json",
             "weights_long": out / "weights_long.csv", "experts": out / "experts.csv"}
    write_local(records, paths["local"])
    write_global(report, paths["global"])
    write_long_table(report, paths["weights_long"])
    write_expert_comparison(expert_accuracy_comparison(model, data), paths["experts"])
    if data.task_kind != "regression":
        paths["agreement"] = out / "agreement.json"
        write_agreement(agreement_analysis(model, data), paths["agreement"])
    return {k: str(v) for k, v in paths.items()}
