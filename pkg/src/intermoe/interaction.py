"""Masked forward passes and the interaction losses that specialise experts.

For every expert we run one clean pass and one pass per modality with that
modality's embedding replaced. Comparing the clean output (the anchor) with
the masked outputs gives weak supervision:

* uniqueness expert ``i``: masking ``i`` should change the output (negative),
  masking any other modality should not (positives); triplet margin loss.
* synergy expert: every masked output is a negative; minimise cosine similarity.
* redundancy expert: every masked output is a positive; minimise 1 - cosine.

Regression tasks swap distances for per-sample squared errors.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .diffcore import ContractError, Node, Tape
from .model import ConfigError, ExpertKind, InteractionMoE

MASK_STRATEGIES = ("random", "mean", "zero")
OUTPUT_SPACES = ("logits", "probs")


@dataclass
class LossWeights:
    lambda_int: float = 0.5
    triplet_margin: float = 1.0
    synergy_margin: float = 1.0
    normalize_triplet: bool = False
    output_space: str = "logits"

    def __post_init__(self):
        if self.output_space not in OUTPUT_SPACES:
            raise ConfigError(f"output_space must be one of {OUTPUT_SPACES}")
        if self.lambda_int < 0:
            raise ConfigError("lambda_int must be >= 0")
        if not (self.triplet_margin > 0 and self.synergy_margin > 0):
            raise ConfigError("margins must be > 0")


@dataclass
class ForwardBundle:
    """Per-expert outputs of the clean pass (index 0) and each masked pass.

    ``outputs[e][j]`` holds expert ``e``'s logits with modality ``j`` masked
    (``j = 0`` is clean); ``fused`` mirrors it for the fused embeddings.
    A ``None`` entry marks a masked pass that was skipped.
    """

    outputs: List[List[Optional[Node]]]
    fused: List[List[Optional[Node]]]
    selection: Optional[np.ndarray] = None

    @property
    def n_experts(self) -> int:
        return len(self.outputs)

    def clean(self, e: int) -> Node:
        return self.outputs[e][0]


def mask_embedding(tape: Tape, embeddings: Sequence[Node], k: int, strategy: str,
                   rng: Optional[np.random.Generator] = None,
                   batch: Optional[np.ndarray] = None) -> List[Node]:
    """Replace embedding ``k`` (1-based) according to ``strategy``.

    ``mean`` uses the per-dimension mean over ``batch`` (rows of modality-``k``
    embeddings), defaulting to the rows of the embedding being masked.
    The replacement is a constant: no gradient flows through it.
    """
    n = len(embeddings)
    if not 1 <= k <= n:
        raise ContractError(f"modality index {k} outside 1..{n}")
    target = embeddings[k - 1]
    shape = target.shape
    if strategy == "random":
        if rng is None:
            raise ConfigError("random masking needs an rng stream")
        value = rng.standard_normal(shape)
    elif strategy == "mean":
        rows = target.value if batch is None else np.asarray(batch, dtype=np.float64)
        rows = rows.reshape(-1, shape[-1]) if rows.size else rows
        if rows.size == 0 or rows.shape[0] == 0:
            raise ConfigError("mean masking needs a non-empty batch context")
        value = np.broadcast_to(rows.mean(axis=0), shape).copy()
    elif strategy == "zero":
        value = np.zeros(shape)
    else:
        raise ConfigError(f"unknown mask strategy {strategy!r}")
    tape.counts["mask"] += 1
    out = list(embeddings)
    out[k - 1] = tape.constant(value)
    return out


def forward_multiple(model: InteractionMoE, tape: Tape, embeddings: Sequence[Node],
                     strategy: str = "random", rng: Optional[np.random.Generator] = None,
                     selection: Optional[np.ndarray] = None) -> ForwardBundle:
    """Clean pass plus one masked pass per modality for every expert.

    ``selection`` (``(B, n)`` of 0/1) marks which masked passes each sample
    takes part in; columns that no sample selects are not computed.
    """
    n = len(embeddings)
    if n < 2:
        raise ContractError("masked passes need at least two modalities")
    active = [True] * n if selection is None else [bool(selection[:, j].any()) for j in range(n)]
    outputs, fused = [], []
    for e in range(model.n_experts):
        x0, y0 = model.expert_forward(tape, e, embeddings)
        row_y, row_x = [y0], [x0]
        for j in range(1, n + 1):
            if not active[j - 1]:
                row_y.append(None)
                row_x.append(None)
                continue
            masked = mask_embedding(tape, embeddings, j, strategy, rng)
            xj, yj = model.expert_forward(tape, e, masked)
            row_y.append(yj)
            row_x.append(xj)
        outputs.append(row_y)
        fused.append(row_x)
    return ForwardBundle(outputs, fused, selection)


def less_forward_selection(rng: np.random.Generator, batch: int, n: int, k: int = 2) -> np.ndarray:
    """Per sample, ``k`` distinct modalities drawn uniformly without replacement."""
    sel = np.zeros((batch, n))
    for b in range(batch):
        sel[b, rng.choice(n, size=min(k, n), replace=False)] = 1.0
    return sel


# ---------------------------------------------------------------------------
# per-pair terms and weighted averaging
# ---------------------------------------------------------------------------

def _average(tape: Tape, terms: List[Node], weights: Optional[List[np.ndarray]]) -> Node:
    """Mean over pair terms, then over the batch.

    With ``weights`` (one per-sample array per term) each sample averages
    only over its selected terms; samples with none contribute zero.
    """
    if not terms:
        return tape.constant(0.0)
    if weights is None:
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        return tape.mean(total * (1.0 / len(terms)))
    norm = np.maximum(sum(weights), 1.0)
    total = None
    for t, w in zip(terms, weights):
        piece = t * tape.constant(w / norm)
        total = piece if total is None else total + piece
    return tape.mean(total)


def _pair_weights(selection, anchor_cols, cols):
    if selection is None:
        return None
    out = []
    for j in cols:
        w = selection[:, j - 1].copy()
        for a in anchor_cols:
            w = w * selection[:, a - 1]
        out.append(w)
    return out


def _row_nodes(row: Sequence[Optional[Node]]) -> None:
    if len(row) < 3:
        raise ContractError(f"bundle row needs 1+n >= 3 outputs, got {len(row)}")


def _terms_for(row, cols):
    """Drop skipped passes from the column list."""
    return [j for j in cols if row[j] is not None]


def uniqueness_loss(tape: Tape, i: int, row: Sequence[Node], margin: float = 1.0,
                    normalize: bool = False, selection: Optional[np.ndarray] = None) -> Node:
    """Mean over ``j != i`` of ``max(0, d(y0, yj) - d(y0, yi) + margin)``.

    ``d`` is Euclidean distance on raw outputs (or on l2-normalised outputs
    when ``normalize`` is set).
    """
    _row_nodes(row)
    n = len(row) - 1
    if row[i] is None:
        return tape.constant(0.0)
    prep = (lambda x: tape.l2_normalize(x)) if normalize else (lambda x: x)
    anchor, negative = prep(row[0]), prep(row[i])
    d_neg = tape.euclidean_distance(anchor, negative)
    cols = _terms_for(row, [j for j in range(1, n + 1) if j != i])
    terms = [tape.hinge(tape.euclidean_distance(anchor, prep(row[j])) - d_neg + margin)
             for j in cols]
    if selection is None and len(cols) != n - 1:
        raise ContractError("uniqueness loss needs every masked pass")
    return _average(tape, terms, _pair_weights(selection, [i], cols))


def _cosines(tape, row, selection):
    _row_nodes(row)
    n = len(row) - 1
    cols = _terms_for(row, list(range(1, n + 1)))
    anchor = tape.l2_normalize(row[0])
    sims = [tape.sum(anchor * tape.l2_normalize(row[j]), axis=-1) for j in cols]
    return sims, _pair_weights(selection, [], cols)


def synergy_loss(tape: Tape, row: Sequence[Node], selection: Optional[np.ndarray] = None) -> Node:
    """Mean cosine similarity between the clean output and each masked output."""
    sims, weights = _cosines(tape, row, selection)
    return _average(tape, sims, weights)


def redundancy_loss(tape: Tape, row: Sequence[Node], selection: Optional[np.ndarray] = None) -> Node:
    """Mean of ``1 - cosine`` between the clean output and each masked output."""
    sims, weights = _cosines(tape, row, selection)
    return _average(tape, [1.0 - s for s in sims], weights)


def _per_sample_mse(tape, a, b):
    return tape.mean(tape.square(a - b), axis=-1)


def regression_interaction_loss(tape: Tape, kind: ExpertKind, row: Sequence[Node],
                                weights: LossWeights = LossWeights(),
                                selection: Optional[np.ndarray] = None) -> Node:
    """MSE-based counterpart of the three losses for scalar outputs."""
    _row_nodes(row)
    if any(r is not None and r.shape[-1] != 1 for r in row):
        raise ContractError("regression interaction loss needs scalar outputs")
    n = len(row) - 1
    if kind.kind == "redundancy":
        cols = _terms_for(row, list(range(1, n + 1)))
        terms = [_per_sample_mse(tape, row[0], row[j]) for j in cols]
        return _average(tape, terms, _pair_weights(selection, [], cols))
    if kind.kind == "synergy":
        cols = _terms_for(row, list(range(1, n + 1)))
        terms = [tape.hinge(weights.synergy_margin - _per_sample_mse(tape, row[0], row[j]))
                 for j in cols]
        return _average(tape, terms, _pair_weights(selection, [], cols))
    i = kind.modality
    if row[i] is None:
        return tape.constant(0.0)
    neg = _per_sample_mse(tape, row[0], row[i])
    cols = _terms_for(row, [j for j in range(1, n + 1) if j != i])
    terms = [tape.hinge(_per_sample_mse(tape, row[0], row[j]) - neg + weights.triplet_margin)
             for j in cols]
    return _average(tape, terms, _pair_weights(selection, [i], cols))


def interaction_loss(tape: Tape, kind: ExpertKind, row: Sequence[Node], task_kind: str,
                     weights: LossWeights = LossWeights(),
                     selection: Optional[np.ndarray] = None) -> Node:
    """Dispatch to the loss matching the expert kind and task."""
    if task_kind == "regression":
        return regression_interaction_loss(tape, kind, row, weights, selection)
    if kind.kind == "uniqueness":
        return uniqueness_loss(tape, kind.modality, row, weights.triplet_margin,
                               weights.normalize_triplet, selection)
    if kind.kind == "synergy":
        return synergy_loss(tape, row, selection)
    return redundancy_loss(tape, row, selection)


def _to_probs(tape: Tape, y: Optional[Node], task_kind: str) -> Optional[Node]:
    if y is None:
        return None
    return tape.softmax(y, axis=-1) if task_kind == "multiclass" else tape.sigmoid(y)


def bundle_losses(tape: Tape, model: InteractionMoE, bundle: ForwardBundle, task_kind: str,
                  weights: LossWeights = LossWeights(), latent: bool = False) -> List[Node]:
    """One interaction loss per expert; ``latent`` applies them to fused embeddings."""
    if latent:
        if task_kind == "regression":
            raise ContractError("latent interaction losses are defined for classification only")
        return [interaction_loss(tape, k, bundle.fused[e], "multiclass", weights, bundle.selection)
                for e, k in enumerate(model.kinds)]
    rows = bundle.outputs
    if weights.output_space == "probs" and task_kind != "regression":
        rows = [[_to_probs(tape, y, task_kind) for y in row] for row in rows]
    return [interaction_loss(tape, k, rows[e], task_kind, weights, bundle.selection)
            for e, k in enumerate(model.kinds)]


def total_loss(tape: Tape, task_loss: Node, interaction_losses: Sequence[Node],
               lambda_int: float) -> Node:
    """``task + lambda_int * mean(interaction losses)``; exactly ``task`` when lambda is 0."""
    if lambda_int == 0 or not interaction_losses:
        return task_loss
    total = interaction_losses[0]
    for x in interaction_losses[1:]:
        total = total + x
    return task_loss + total * (lambda_int / len(interaction_losses))
