"""Training loop, data splits, ablation variants and overhead measurement.

One training step follows the masked-modality procedure: encode, run the
clean and masked passes of every expert, compute one interaction loss per
expert, reweight, combine the clean expert outputs, take the task loss and
minimise ``task + lambda_int * mean(interaction losses)`` with Adam.
"""
from __future__ import annotations

import logging
import statistics
import time
from dataclasses import asdict, dataclass, fields, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .diffcore import Node, Tape
from .interaction import (MASK_STRATEGIES, LossWeights, bundle_losses, forward_multiple,
                          less_forward_selection, total_loss)
from .metrics import Metrics, compute_metrics
from .model import ConfigError, FusionBaseline, InteractionMoE, ModelConfig, combined_prediction
from .rng import stream
from .synthdata import MultimodalDataset

logger = logging.getLogger(__name__)

ABLATIONS = ("none", "no-interaction", "latent-contrastive", "simple-weight", "less-forward",
             "synergy-redundancy")
BASELINES = ("none", "early-fusion", "late-fusion", "vanilla")


@dataclass
class TrainConfig:
    lr: float = 0.003
    train_epochs: int = 30
    batch_size: int = 32
    interaction_loss_weight: float = 0.5
    temperature_rw: float = 10.0
    hidden_dim_rw: int = 16
    num_layer_rw: int = 2
    hidden_dim: int = 16
    num_layers_enc: int = 1
    num_layers_fus: int = 2
    num_layers_pred: int = 1
    num_heads: int = 0
    activation: str = "tanh"
    mask_strategy: str = "random"
    triplet_margin: float = 1.0
    synergy_margin: float = 1.0
    normalize_triplet: bool = False
    interaction_space: str = "probs"
    seed: int = 0
    ablation: str = "none"
    baseline: str = "none"

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.train_epochs < 1 or self.batch_size < 1:
            raise ConfigError("train_epochs and batch_size must be >= 1")
        if self.mask_strategy not in MASK_STRATEGIES:
            raise ConfigError(f"unknown mask strategy {self.mask_strategy!r}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")
        if self.baseline not in BASELINES:
            raise ConfigError(f"unknown baseline {self.baseline!r}; choose from {BASELINES}")
        if self.baseline != "none" and self.ablation != "none":
            raise ConfigError("a baseline cannot be combined with an ablation")
        LossWeights(self.interaction_loss_weight, self.triplet_margin, self.synergy_margin,
                    self.normalize_triplet, self.interaction_space)

    @property
    def lambda_int(self) -> float:
        if self.ablation == "no-interaction" or self.baseline != "none":
            return 0.0
        return self.interaction_loss_weight

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_int, self.triplet_margin, self.synergy_margin,
                           self.normalize_triplet, self.interaction_space)

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    def as_dict(self) -> dict:
        return asdict(self)


def model_config(cfg: TrainConfig, dataset: MultimodalDataset) -> ModelConfig:
    kinds = None
    if cfg.ablation == "synergy-redundancy":
        kinds = ("syn", "red")
    elif cfg.baseline == "vanilla":
        kinds = ("syn",)
    return ModelConfig(
        input_dims=dataset.dims, output_dim=dataset.output_dim, task_kind=dataset.task_kind,
        hidden_dim=cfg.hidden_dim, num_layers_enc=cfg.num_layers_enc,
        num_layers_fus=cfg.num_layers_fus, num_layers_pred=cfg.num_layers_pred,
        hidden_dim_rw=cfg.hidden_dim_rw, num_layer_rw=cfg.num_layer_rw,
        temperature_rw=cfg.temperature_rw, num_heads=cfg.num_heads, activation=cfg.activation,
        expert_kinds=kinds,
        simple_weight=cfg.ablation == "simple-weight" or cfg.baseline == "vanilla")


def build_model(cfg: TrainConfig, dataset: MultimodalDataset):
    mc = model_config(cfg, dataset)
    rng = stream(cfg.seed, "init")
    if cfg.baseline in ("early-fusion", "late-fusion"):
        return FusionBaseline(mc, cfg.baseline, rng)
    return InteractionMoE(mc, rng)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            if name not in params:
                continue
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] = params[name] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# data handling
# ---------------------------------------------------------------------------

def split_sizes(n: int) -> tuple:
    train, val = int(np.floor(0.7 * n)), int(np.floor(0.15 * n))
    return train, val, n - train - val


def split(dataset: MultimodalDataset, seed: int):
    """Shuffled 70/15/15 train/validation/test split."""
    n = len(dataset)
    if n < 10:
        raise ConfigError(f"need at least 10 samples to split, got {n}")
    perm = stream(seed, "split").permutation(n)
    a, b, _ = split_sizes(n)
    return dataset.subset(perm[:a]), dataset.subset(perm[a:a + b]), dataset.subset(perm[a + b:])


def split_indices(n: int, seed: int):
    perm = stream(seed, "split").permutation(n)
    a, b, _ = split_sizes(n)
    return perm[:a], perm[a:a + b], perm[a + b:]


def task_loss(tape: Tape, prediction: Node, targets: np.ndarray, task_kind: str,
              num_classes: int) -> Node:
    if task_kind == "multiclass":
        return tape.cross_entropy(prediction, np.eye(num_classes)[np.asarray(targets, dtype=int)])
    if task_kind == "multilabel":
        return tape.bce_with_logits(prediction, np.asarray(targets, dtype=np.float64))
    return tape.mse(prediction, tape.constant(np.asarray(targets, dtype=np.float64).reshape(-1, 1)))


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int, last_finite: dict):
        self.epoch, self.step, self.last_finite = epoch, step, last_finite
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}")


@dataclass
class TrainResult:
    model: object
    config: TrainConfig
    log: List[dict]
    best_epoch: int
    best_model: object
    split_indices: tuple = ()

    @property
    def log_columns(self) -> List[str]:
        return list(self.log[0].keys()) if self.log else []


def predict_logits(model, dataset: MultimodalDataset, chunk: int = 4096) -> np.ndarray:
    outs = []
    for lo in range(0, len(dataset), chunk):
        outs.append(model.infer([x[lo:lo + chunk] for x in dataset.arrays])["prediction"])
    return np.concatenate(outs, axis=0)


def evaluate(model, dataset: MultimodalDataset) -> Metrics:
    """Metrics from one clean forward pass per sample."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty split")
    return compute_metrics(dataset.task_kind, predict_logits(model, dataset), dataset.targets,
                           dataset.num_classes)


def train_step(model, opt: Adam, cfg: TrainConfig, xb: Sequence[np.ndarray], yb: np.ndarray,
               task_kind: str, num_classes: int, mask_rng, ablation_rng):
    """One optimiser step. Returns (task loss, per-expert interaction losses, total)."""
    tape = Tape()
    if isinstance(model, FusionBaseline):
        pred = model.predict(tape, xb)["prediction"]
        loss = task_loss(tape, pred, yb, task_kind, num_classes)
        opt.step(model.params, tape.backward(loss))
        return float(loss.value), [], float(loss.value)
    emb = model.encode(tape, xb)
    if cfg.lambda_int == 0:
        # masked passes only feed the interaction losses, which carry zero weight here
        weights = model.reweight(tape, emb)
        logits = [model.expert_predict(tape, e, emb) for e in range(model.n_experts)]
        loss = task_loss(tape, combined_prediction(tape, weights, logits), yb, task_kind, num_classes)
        if np.isfinite(loss.value):
            opt.step(model.params, tape.backward(loss))
        return float(loss.value), [], float(loss.value)
    selection = None
    if cfg.ablation == "less-forward":
        selection = less_forward_selection(ablation_rng, len(yb), len(emb))
    bundle = forward_multiple(model, tape, emb, cfg.mask_strategy, mask_rng, selection)
    int_losses = bundle_losses(tape, model, bundle, task_kind, cfg.loss_weights(),
                               latent=cfg.ablation == "latent-contrastive")
    weights = model.reweight(tape, emb)
    pred = combined_prediction(tape, weights, [bundle.clean(e) for e in range(model.n_experts)])
    t_loss = task_loss(tape, pred, yb, task_kind, num_classes)
    loss = total_loss(tape, t_loss, int_losses, cfg.lambda_int)
    if not np.isfinite(loss.value):
        return float(t_loss.value), [float(x.value) for x in int_losses], float(loss.value)
    opt.step(model.params, tape.backward(loss))
    return float(t_loss.value), [float(x.value) for x in int_losses], float(loss.value)


def _score(metrics: Metrics) -> float:
    return metrics.headline()


CLASSIFICATION_ONLY_ABLATIONS = ("latent-contrastive",)


def preflight(cfg: TrainConfig, dataset: MultimodalDataset) -> None:
    """Reject config/dataset combinations before any training work starts."""
    if dataset.task_kind == "regression" and cfg.ablation in CLASSIFICATION_ONLY_ABLATIONS:
        raise ConfigError(f"ablation {cfg.ablation!r} is only defined for classification")
    if len(dataset.dims) < 2:
        raise ConfigError("training needs at least two modalities")


def train_run(cfg: TrainConfig, dataset: MultimodalDataset, splits=None,
              eval_each_epoch: bool = True) -> TrainResult:
    """Train on the 70% split and log per-epoch losses and accuracies."""
    preflight(cfg, dataset)
    if splits is None:
        idx = split_indices(len(dataset), cfg.seed)
        splits = tuple(dataset.subset(i) for i in idx)
    else:
        idx = ()
    train, val, _ = splits
    model = build_model(cfg, dataset)
    opt = Adam(cfg.lr)
    shuffle_rng = stream(cfg.seed, "shuffle")
    mask_rng = stream(cfg.seed, "mask")
    ablation_rng = stream(cfg.seed, "ablation")
    n_exp = model.n_experts
    log: List[dict] = []
    best_score, best_epoch, best_params = -np.inf, 0, None
    last_finite = {k: v.copy() for k, v in model.params.items()}
    arrays = train.arrays
    for epoch in range(1, cfg.train_epochs + 1):
        start = time.perf_counter()
        order = shuffle_rng.permutation(len(train))
        task_sum, int_sum, batches = 0.0, np.zeros(n_exp), 0
        for step, lo in enumerate(range(0, len(order), cfg.batch_size)):
            b = order[lo:lo + cfg.batch_size]
            t_loss, i_losses, total = train_step(model, opt, cfg, [x[b] for x in arrays],
                                                 train.targets[b], dataset.task_kind,
                                                 dataset.num_classes, mask_rng, ablation_rng)
            if not np.isfinite(total):
                raise TrainingDiverged(epoch, step, last_finite)
            last_finite = dict(model.params)
            task_sum += t_loss
            has_int = bool(i_losses)
            if has_int:
                int_sum += np.asarray(i_losses)
            batches += 1
        seconds = time.perf_counter() - start
        row = {"epoch": epoch, "task_loss": task_sum / batches}
        for e in range(n_exp):
            row[f"int_loss_expert_{e}"] = float(int_sum[e] / batches) if has_int else float("nan")
        if eval_each_epoch:
            tm, vm = evaluate(model, train), evaluate(model, val) if len(val) else None
            row["train_acc"] = tm.accuracy if tm.accuracy is not None else float("nan")
            row["val_acc"] = vm.accuracy if vm is not None and vm.accuracy is not None else float("nan")
            score = _score(vm) if vm is not None else -row["task_loss"]
        else:
            row["train_acc"] = row["val_acc"] = float("nan")
            score = -row["task_loss"]
        row["seconds"] = seconds
        log.append(row)
        if score > best_score:
            best_score, best_epoch = score, epoch
            best_params = {k: v.copy() for k, v in model.params.items()}
        logger.debug("epoch %d task %.4f val %.4f", epoch, row["task_loss"], row["val_acc"])
    best = model.copy()
    best.params = best_params
    return TrainResult(model, cfg, log, best_epoch, best, idx)


# ---------------------------------------------------------------------------
# multi-seed protocol, ablations, masking comparison, overhead
# ---------------------------------------------------------------------------

METRIC_KEYS = ("accuracy", "auroc", "micro_f1", "macro_f1", "mse")


def aggregate(metric_dicts: Sequence[dict]) -> dict:
    """Mean and sample standard deviation of every metric present in all runs."""
    out = {}
    for key in METRIC_KEYS:
        vals = [m[key] for m in metric_dicts if m.get(key) is not None]
        if len(vals) == len(metric_dicts) and vals:
            out[key] = {"mean": float(np.mean(vals)),
                        "std": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0}
    return out


@dataclass
class SeedRun:
    seed: int
    result: TrainResult
    test: Metrics
    test_split: MultimodalDataset


def run_seeds(cfg: TrainConfig, dataset: MultimodalDataset, seeds: Sequence[int],
              eval_each_epoch: bool = False) -> List[SeedRun]:
    runs = []
    for s in seeds:
        c = replace(cfg, seed=int(s))
        idx = split_indices(len(dataset), c.seed)
        parts = tuple(dataset.subset(i) for i in idx)
        res = train_run(c, dataset, parts, eval_each_epoch=eval_each_epoch)
        res.split_indices = idx
        runs.append(SeedRun(int(s), res, evaluate(res.model, parts[2]), parts[2]))
    return runs


def run_ablation(variant: str, cfg: TrainConfig, dataset: MultimodalDataset,
                 seeds: Sequence[int] = (0,), full_runs: Optional[List[SeedRun]] = None) -> dict:
    """Train ``variant`` under the same seeds/splits as the full model and report deltas."""
    if variant not in ABLATIONS or variant == "none":
        raise ConfigError(f"unknown ablation variant {variant!r}")
    if full_runs is None:
        full_runs = run_seeds(replace(cfg, ablation="none"), dataset, seeds)
    runs = run_seeds(replace(cfg, ablation=variant), dataset, [r.seed for r in full_runs])
    full = aggregate([r.test.as_dict() for r in full_runs])
    var = aggregate([r.test.as_dict() for r in runs])
    delta = {k: var[k]["mean"] - full[k]["mean"] for k in var if k in full}
    return {"variant": variant, "metrics": var, "full": full, "delta": delta,
            "per_seed": [{"seed": r.seed, **r.test.as_dict()} for r in runs],
            "n_experts": runs[0].result.model.n_experts,
            "reweighter_params": runs[0].result.model.parameter_count("rw")}


def masking_comparison(cfg: TrainConfig, dataset: MultimodalDataset,
                       seeds: Sequence[int] = (0, 1, 2),
                       reuse: Optional[Dict[str, List[SeedRun]]] = None) -> List[dict]:
    """Random / mean / zero replacement, same seeds; one aggregated row per strategy."""
    rows = []
    for strategy in MASK_STRATEGIES:
        runs = (reuse or {}).get(strategy)
        if runs is None:
            runs = run_seeds(replace(cfg, mask_strategy=strategy), dataset, seeds)
        rows.append({"strategy": strategy, **aggregate([r.test.as_dict() for r in runs])})
    return rows


def _median_time(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def measure_overhead(cfg: TrainConfig, dataset: MultimodalDataset, epochs: int = 3,
                     repeats: int = 3) -> dict:
    """Per-epoch training time, inference time and parameter counts: vanilla vs full."""
    epochs = max(epochs, 3)
    out = {"dataset": dataset.name, "modalities": len(dataset.dims)}
    idx = split_indices(len(dataset), cfg.seed)
    parts = tuple(dataset.subset(i) for i in idx)
    for arm, c in (("vanilla", replace(cfg, baseline="vanilla", ablation="none")),
                   ("full", replace(cfg, baseline="none"))):
        c = replace(c, train_epochs=epochs)
        res = train_run(c, dataset, parts, eval_each_epoch=False)
        test = parts[2]
        out[arm] = {
            "train_s_per_epoch": statistics.median(r["seconds"] for r in res.log),
            "inference_s": _median_time(lambda: predict_logits(res.model, test), repeats),
            "param_count": res.model.parameter_count(),
            "expert_param_count": res.model.parameter_count("expert"),
            "n_experts": res.model.n_experts,
        }
    out["expert_param_ratio"] = out["full"]["expert_param_count"] / out["vanilla"]["expert_param_count"]
    out["param_ratio"] = out["full"]["param_count"] / out["vanilla"]["param_count"]
    return out
