"""Encoders, interaction experts, the reweighting model and their assembly.

A model over ``n`` modalities holds ``n`` uniqueness experts, one synergy
expert and one redundancy expert. Each expert is a fusion body over the
concatenated modality embeddings followed by a prediction head; the
reweighting model maps the same embeddings to a temperature softmax over
experts, and the prediction is the weighted sum of expert logits.

Parameters live in plain numpy arrays keyed by dotted names. The forward
functions take a :class:`~intermoe.diffcore.Tape` and bind parameters onto
it lazily, so the same code serves training (with gradients) and inference.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .diffcore import ContractError, Node, Tape

FORMAT_VERSION = 1
ACTIVATIONS = ("relu", "tanh", "sigmoid")
TASK_KINDS = ("multiclass", "multilabel", "regression")


class InputError(ValueError):
    """Sample does not match the model's declared modalities."""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExpertKind:
    """``uniqueness`` (with a 1-based modality index), ``synergy`` or ``redundancy``."""

    kind: str
    modality: int = 0

    def __post_init__(self):
        if self.kind not in ("uniqueness", "synergy", "redundancy"):
            raise ConfigError(f"unknown expert kind {self.kind!r}")
        if self.kind == "uniqueness" and self.modality < 1:
            raise ConfigError("uniqueness expert needs a modality index >= 1")

    @classmethod
    def uniqueness(cls, k: int) -> "ExpertKind":
        return cls("uniqueness", k)

    @classmethod
    def parse(cls, label: str) -> "ExpertKind":
        if label == "syn":
            return cls("synergy")
        if label == "red":
            return cls("redundancy")
        if label.startswith("uni") and label[3:].isdigit():
            return cls("uniqueness", int(label[3:]))
        raise ConfigError(f"cannot parse expert label {label!r}")

    @property
    def label(self) -> str:
        if self.kind == "uniqueness":
            return f"uni{self.modality}"
        return "syn" if self.kind == "synergy" else "red"


SYNERGY = ExpertKind("synergy")
REDUNDANCY = ExpertKind("redundancy")


def default_expert_kinds(n: int) -> List[ExpertKind]:
    return [ExpertKind.uniqueness(k) for k in range(1, n + 1)] + [SYNERGY, REDUNDANCY]


@dataclass
class ModelConfig:
    """Architecture hyperparameters. Names follow the usual config-table names."""

    input_dims: Tuple[int, ...]
    output_dim: int
    task_kind: str = "multiclass"
    hidden_dim: int = 16
    num_layers_enc: int = 1
    num_layers_fus: int = 2
    num_layers_pred: int = 1
    hidden_dim_rw: int = 16
    num_layer_rw: int = 2
    temperature_rw: float = 1.0
    num_heads: int = 0
    activation: str = "relu"
    expert_kinds: Optional[Tuple[str, ...]] = None
    simple_weight: bool = False

    def __post_init__(self):
        self.input_dims = tuple(int(d) for d in self.input_dims)
        if len(self.input_dims) < 1:
            raise ConfigError("need at least one modality")
        if self.expert_kinds is not None:
            self.expert_kinds = tuple(self.expert_kinds)
        for name in ("output_dim", "hidden_dim", "num_layers_enc", "num_layers_fus",
                     "num_layers_pred", "hidden_dim_rw", "num_layer_rw"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if min(self.input_dims) < 1:
            raise ConfigError("input dims must be >= 1")
        if not self.temperature_rw > 0:
            raise ConfigError("temperature_rw must be > 0")
        if self.task_kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.task_kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.num_heads < 0 or (self.num_heads and self.hidden_dim % self.num_heads):
            raise ConfigError("num_heads must divide hidden_dim")

    @property
    def n_modalities(self) -> int:
        return len(self.input_dims)

    @property
    def kinds(self) -> List[ExpertKind]:
        if self.expert_kinds is None:
            return default_expert_kinds(self.n_modalities)
        return [ExpertKind.parse(k) for k in self.expert_kinds]

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _mlp_shapes(prefix: str, dims: Sequence[int]) -> List[Tuple[str, Tuple[int, ...]]]:
    shapes = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        shapes.append((f"{prefix}.l{i}.W", (a, b)))
        shapes.append((f"{prefix}.l{i}.b", (b,)))
    return shapes


class InteractionMoE:
    """Mixture of interaction experts with a sample-adaptive reweighter."""

    MODEL_TYPE = "moe"

    def __init__(self, config: ModelConfig, rng: Optional[np.random.Generator] = None):
        self.config = config
        self.kinds = config.kinds
        self._check_kinds()
        self.shapes: Dict[str, Tuple[int, ...]] = dict(self._layout())
        self.params: Dict[str, np.ndarray] = {}
        if rng is None:
            self.params = {k: np.zeros(s) for k, s in self.shapes.items()}
        else:
            self.init_params(rng)

    def _check_kinds(self):
        n = self.config.n_modalities
        for k in self.kinds:
            if k.kind == "uniqueness" and k.modality > n:
                raise ConfigError(f"{k.label}: only {n} modalities")
        if self.config.expert_kinds is None:
            assert len(self.kinds) == n + 2

    # layout -------------------------------------------------------------
    def _layout(self):
        c = self.config
        h, n = c.hidden_dim, c.n_modalities
        for m, d in enumerate(c.input_dims):
            yield from _mlp_shapes(f"enc{m}", [d] + [h] * c.num_layers_enc)
        for e in range(len(self.kinds)):
            if c.num_heads:
                for w in ("Wq", "Wk", "Wv", "Wo"):
                    yield f"expert{e}.attn.{w}", (h, h)
            yield from _mlp_shapes(f"expert{e}.fus", [n * h] + [h] * c.num_layers_fus)
            yield from _mlp_shapes(f"expert{e}.head", [h] * c.num_layers_pred + [c.output_dim])
        if c.simple_weight:
            yield "rw.global", (len(self.kinds),)
        else:
            yield from _mlp_shapes("rw", [n * h] + [c.hidden_dim_rw] * (c.num_layer_rw - 1)
                                   + [len(self.kinds)])

    def init_params(self, rng: np.random.Generator) -> None:
        """Glorot-uniform weights, zero biases, drawn in layout order."""
        self.params = {}
        for name, shape in self.shapes.items():
            if len(shape) == 2:
                self.params[name] = glorot(rng, *shape)
            else:
                self.params[name] = np.zeros(shape)

    @property
    def n_experts(self) -> int:
        return len(self.kinds)

    def parameter_count(self, prefix: str = "") -> int:
        return int(sum(int(np.prod(s)) for k, s in self.shapes.items() if k.startswith(prefix)))

    def expert_parameter_count(self) -> int:
        return self.parameter_count("expert")

    def reweighter_parameter_count(self) -> int:
        return self.parameter_count("rw")

    def copy(self) -> "InteractionMoE":
        other = InteractionMoE(self.config)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    # forward pieces -------------------------------------------------------
    def _p(self, tape: Tape, name: str) -> Node:
        return tape.param(name, self.params[name])

    def _act(self, tape: Tape, x: Node) -> Node:
        return tape.apply(self.config.activation, x)

    def _mlp(self, tape: Tape, prefix: str, x: Node, layers: int, last_act: bool) -> Node:
        for i in range(layers):
            x = tape.matmul(x, self._p(tape, f"{prefix}.l{i}.W")) + self._p(tape, f"{prefix}.l{i}.b")
            if last_act or i < layers - 1:
                x = self._act(tape, x)
        return x

    def _check_sample(self, inputs: Sequence[np.ndarray]) -> None:
        dims = self.config.input_dims
        if len(inputs) != len(dims):
            raise InputError(f"expected {len(dims)} modalities, got {len(inputs)}")
        for m, (x, d) in enumerate(zip(inputs, dims)):
            if np.shape(x)[-1] != d:
                raise InputError(f"modality {m + 1}: expected width {d}, got {np.shape(x)[-1]}")

    def encode(self, tape: Tape, inputs: Sequence[np.ndarray]) -> List[Node]:
        """One embedding of width ``hidden_dim`` per modality."""
        self._check_sample(inputs)
        return [self._mlp(tape, f"enc{m}", tape.constant(np.asarray(x, dtype=np.float64)),
                          self.config.num_layers_enc, last_act=True)
                for m, x in enumerate(inputs)]

    def _attention(self, tape: Tape, e: int, embeddings: Sequence[Node]) -> Node:
        c = self.config
        n, h, heads = len(embeddings), c.hidden_dim, c.num_heads
        dh = h // heads
        tokens = tape.stack(embeddings, axis=-2)  # (B, n, h)
        lead = tokens.shape[:-2]

        def split(w):
            x = tape.matmul(tokens, self._p(tape, f"expert{e}.attn.{w}"))
            x = tape.reshape(x, lead + (n, heads, dh))
            return tape.transpose(x, _swap(-3, -2, x.value.ndim))

        q, k, v = split("Wq"), split("Wk"), split("Wv")
        kt = tape.transpose(k, _swap(-2, -1, k.value.ndim))
        att = tape.softmax(tape.matmul(q, kt) * (1.0 / np.sqrt(dh)), axis=-1)
        mixed = tape.matmul(att, v)
        mixed = tape.transpose(mixed, _swap(-3, -2, mixed.value.ndim))
        mixed = tape.reshape(mixed, lead + (n, h))
        out = tape.matmul(mixed, self._p(tape, f"expert{e}.attn.Wo")) + tokens
        return tape.reshape(out, lead + (n * h,))

    def expert_forward(self, tape: Tape, e: int, embeddings: Sequence[Node]) -> Tuple[Node, Node]:
        """Fused embedding and logits of expert ``e``."""
        c = self.config
        if len(embeddings) != c.n_modalities:
            raise InputError(f"expected {c.n_modalities} embeddings, got {len(embeddings)}")
        if c.num_heads:
            x = self._attention(tape, e, embeddings)
        else:
            x = tape.concat(embeddings, axis=-1)
        fused = self._mlp(tape, f"expert{e}.fus", x, c.num_layers_fus, last_act=True)
        logits = self._mlp(tape, f"expert{e}.head", fused, c.num_layers_pred, last_act=False)
        return fused, logits

    def expert_predict(self, tape: Tape, e: int, embeddings: Sequence[Node]) -> Node:
        return self.expert_forward(tape, e, embeddings)[1]

    def reweight(self, tape: Tape, embeddings: Sequence[Node],
                 temperature: Optional[float] = None) -> Node:
        """Softmax weights over experts, shape ``(..., E)``."""
        t = self.config.temperature_rw if temperature is None else temperature
        if not t > 0:
            raise ConfigError(f"temperature must be > 0, got {t}")
        if self.config.simple_weight:
            w = tape.softmax(self._p(tape, "rw.global"), temperature=t)
            lead = embeddings[0].shape[:-1]
            return w + tape.constant(np.zeros(lead + (self.n_experts,)))
        x = tape.concat(embeddings, axis=-1)
        return tape.softmax(self._mlp(tape, "rw", x, self.config.num_layer_rw, last_act=False),
                            temperature=t)

    def predict(self, tape: Tape, inputs: Sequence[np.ndarray]) -> dict:
        """Single clean forward pass: embeddings, expert logits, weights, prediction."""
        emb = self.encode(tape, inputs)
        logits = [self.expert_predict(tape, e, emb) for e in range(self.n_experts)]
        weights = self.reweight(tape, emb)
        return {"embeddings": emb, "expert_logits": logits, "weights": weights,
                "prediction": combined_prediction(tape, weights, logits)}

    def infer(self, inputs: Sequence[np.ndarray]) -> dict:
        """Numpy outputs of :meth:`predict` for a batch."""
        tape = Tape()
        out = self.predict(tape, inputs)
        return {"expert_logits": np.stack([n.value for n in out["expert_logits"]], axis=-2),
                "weights": out["weights"].value, "prediction": out["prediction"].value}

    # checkpoints ------------------------------------------------------------
    def to_json(self, extra: Optional[dict] = None) -> str:
        return dump_checkpoint(self, extra)

    @classmethod
    def from_json(cls, text: str) -> "InteractionMoE":
        model = load_checkpoint_text(text)
        if not isinstance(model, cls):
            raise ContractError(f"checkpoint holds a {type(model).__name__}")
        return model

    def save(self, path, extra: Optional[dict] = None) -> None:
        with open(path, "w") as f:
            f.write(self.to_json(extra))

    @classmethod
    def load(cls, path) -> "InteractionMoE":
        with open(path) as f:
            return cls.from_json(f.read())


def _swap(a: int, b: int, ndim: int) -> Tuple[int, ...]:
    axes = list(range(ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return tuple(axes)


def combined_prediction(tape: Tape, weights: Node, expert_logits: Sequence[Node]) -> Node:
    """Weighted sum of expert logits in fixed expert order.

    ``weights`` has shape ``(..., E)`` and each logit node ``(..., C)``.
    """
    if weights.shape[-1] != len(expert_logits):
        raise ContractError(f"{weights.shape[-1]} weights for {len(expert_logits)} experts")
    stacked = tape.stack(expert_logits, axis=-2)  # (..., E, C)
    w = tape.reshape(weights, weights.shape + (1,))
    return tape.sum(w * stacked, axis=-2)


def combine(weights, expert_logits) -> np.ndarray:
    """Array version of :func:`combined_prediction`."""
    tape = Tape()
    return combined_prediction(tape, tape.constant(weights),
                               [tape.constant(x) for x in expert_logits]).value


class FusionBaseline:
    """Early fusion (concatenated raw features into one MLP) or late fusion
    (one MLP per modality, logits averaged). Trained with the task loss only."""

    MODEL_TYPE = "baseline"

    def __init__(self, config: ModelConfig, style: str = "early-fusion",
                 rng: Optional[np.random.Generator] = None):
        if style not in ("early-fusion", "late-fusion"):
            raise ConfigError(f"unknown baseline {style!r}")
        self.config = config
        self.style = style
        c = config
        h = c.hidden_dim
        depth = [h] * (c.num_layers_enc + c.num_layers_fus)
        if style == "early-fusion":
            layout = _mlp_shapes("early", [sum(c.input_dims)] + depth + [c.output_dim])
        else:
            layout = [s for m, d in enumerate(c.input_dims)
                      for s in _mlp_shapes(f"late{m}", [d] + depth + [c.output_dim])]
        self.shapes = dict(layout)
        self.params = {k: np.zeros(v) for k, v in self.shapes.items()}
        if rng is not None:
            for name, shape in self.shapes.items():
                if len(shape) == 2:
                    self.params[name] = glorot(rng, *shape)

    @property
    def n_experts(self) -> int:
        return 0

    def parameter_count(self, prefix: str = "") -> int:
        return int(sum(int(np.prod(s)) for k, s in self.shapes.items() if k.startswith(prefix)))

    def copy(self) -> "FusionBaseline":
        other = FusionBaseline(self.config, self.style)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def _mlp(self, tape, prefix, x):
        layers = len([k for k in self.shapes if k.startswith(prefix + ".") and k.endswith(".W")])
        for i in range(layers):
            x = tape.matmul(x, tape.param(f"{prefix}.l{i}.W", self.params[f"{prefix}.l{i}.W"])) \
                + tape.param(f"{prefix}.l{i}.b", self.params[f"{prefix}.l{i}.b"])
            if i < layers - 1:
                x = tape.apply(self.config.activation, x)
        return x

    def predict(self, tape: Tape, inputs: Sequence[np.ndarray]) -> dict:
        dims = self.config.input_dims
        if len(inputs) != len(dims) or any(np.shape(x)[-1] != d for x, d in zip(inputs, dims)):
            raise InputError("inputs do not match the declared modalities")
        xs = [tape.constant(np.asarray(x, dtype=np.float64)) for x in inputs]
        if self.style == "early-fusion":
            return {"prediction": self._mlp(tape, "early", tape.concat(xs, axis=-1))}
        outs = [self._mlp(tape, f"late{m}", x) for m, x in enumerate(xs)]
        total = outs[0]
        for o in outs[1:]:
            total = total + o
        return {"prediction": total * (1.0 / len(outs))}

    def infer(self, inputs: Sequence[np.ndarray]) -> dict:
        return {"prediction": self.predict(Tape(), inputs)["prediction"].value}

    def to_json(self, extra: Optional[dict] = None) -> str:
        return dump_checkpoint(self, extra)

    def save(self, path, extra: Optional[dict] = None) -> None:
        with open(path, "w") as f:
            f.write(self.to_json(extra))


def dump_checkpoint(model, extra: Optional[dict] = None) -> str:
    """JSON checkpoint; parameter values written with 17 significant digits."""
    head = {"format_version": FORMAT_VERSION, "config": asdict(model.config),
            "model_type": getattr(model, "MODEL_TYPE", "moe")}
    if isinstance(model, FusionBaseline):
        head["style"] = model.style
    if extra:
        head.update(extra)
    rows = []
    for name, value in model.params.items():
        data = ",".join(format(float(v), ".17g") for v in value.ravel())
        rows.append('{"name": %s, "shape": %s, "data": [%s]}'
                    % (json.dumps(name), json.dumps(list(value.shape)), data))
    body = json.dumps(head, sort_keys=True)[:-1]
    return body + ', "parameters": [\n' + ",\n".join(rows) + "\n]}\n"


def load_checkpoint_text(text: str):
    doc = json.loads(text)
    if doc.get("format_version") != FORMAT_VERSION:
        raise ContractError(f"unsupported checkpoint version {doc.get('format_version')}")
    config = ModelConfig.from_dict(doc["config"])
    if doc.get("model_type", "moe") == "baseline":
        model = FusionBaseline(config, doc.get("style", "early-fusion"))
    else:
        model = InteractionMoE(config)
    seen = set()
    for row in doc["parameters"]:
        name = row["name"]
        if name not in model.shapes:
            raise ContractError(f"unexpected parameter {name!r} in checkpoint")
        value = np.asarray(row["data"], dtype=np.float64).reshape(row["shape"])
        if value.shape != tuple(model.shapes[name]):
            raise ContractError(f"{name}: shape {value.shape} != {model.shapes[name]}")
        model.params[name] = value
        seen.add(name)
    missing = set(model.shapes) - seen
    if missing:
        raise ContractError(f"checkpoint lacks parameters {sorted(missing)}")
    return model


def load_checkpoint(path):
    """Load either model type from a checkpoint file."""
    if not os.path.exists(path):
        raise ContractError(f"missing checkpoint {path}")
    with open(path) as f:
        return load_checkpoint_text(f.read())
