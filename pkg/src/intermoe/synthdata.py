"""Synthetic multimodal datasets with a known dominant interaction, plus file I/O.

Each latent bit ``b`` in {-1, +1} is written into a modality as
``[b + sigma * noise, noise, noise, ...]``: the first coordinate carries the
signal and the remaining coordinates are standard normal distractors.
Modalities that carry no signal are standard normal throughout.

* ``unique(k)``   label = [b > 0], b lives only in modality k
* ``redundant``   one bit copied (independent noise) into every modality
* ``synergy-xor`` one bit per modality, label = parity of the bits
* ``mixture``     each sample drawn from one of the above; tagged

Tags use the expert labels (``uni1``, ``uni2``, ..., ``syn``, ``red``).
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .pidoracle import DiscreteJoint
from .rng import stream

FORMAT_VERSION = 1
KINDS = ("unique", "redundant", "synergy-xor", "mixture")


class DatasetError(ValueError):
    """Problem loading or validating a dataset directory."""

    def __init__(self, message: str, path: Optional[str] = None, modality: Optional[str] = None):
        self.path = path
        self.modality = modality
        super().__init__(message)


@dataclass
class MultimodalDataset:
    modalities: Dict[str, np.ndarray]
    targets: np.ndarray
    task_kind: str = "multiclass"
    num_classes: int = 2
    tags: Optional[np.ndarray] = None
    name: str = "dataset"

    def __post_init__(self):
        rows = {k: v.shape[0] for k, v in self.modalities.items()}
        n = len(self.targets)
        if any(r != n for r in rows.values()):
            raise DatasetError(f"row counts differ: {rows} vs {n} targets")
        if self.tags is not None and len(self.tags) != n:
            raise DatasetError(f"{len(self.tags)} tags for {n} samples")

    def __len__(self):
        return len(self.targets)

    @property
    def names(self) -> List[str]:
        return list(self.modalities)

    @property
    def arrays(self) -> List[np.ndarray]:
        return list(self.modalities.values())

    @property
    def dims(self) -> Tuple[int, ...]:
        return tuple(v.shape[1] for v in self.modalities.values())

    @property
    def output_dim(self) -> int:
        return 1 if self.task_kind == "regression" else self.num_classes

    def subset(self, idx) -> "MultimodalDataset":
        idx = np.asarray(idx)
        return MultimodalDataset(
            {k: v[idx] for k, v in self.modalities.items()}, self.targets[idx],
            self.task_kind, self.num_classes,
            None if self.tags is None else self.tags[idx], self.name)

    def equals(self, other: "MultimodalDataset") -> bool:
        same_tags = (self.tags is None) == (other.tags is None) and (
            self.tags is None or list(self.tags) == list(other.tags))
        return (self.task_kind == other.task_kind and self.num_classes == other.num_classes
                and self.names == other.names and same_tags
                and all(np.array_equal(a, b) for a, b in zip(self.arrays, other.arrays))
                and np.array_equal(self.targets, other.targets))


@dataclass
class GenSpec:
    n_samples: int = 2000
    dims: Tuple[int, ...] = (8, 8)
    noise_sigma: float = 0.2
    seed: int = 0
    kind: str = "synergy-xor"
    k: int = 1
    proportions: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if self.kind not in KINDS:
            raise ValueError(f"unknown generator kind {self.kind!r}")
        if len(self.dims) < 2 or min(self.dims) < 1:
            raise ValueError("need >= 2 modalities with dim >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 1 <= self.k <= len(self.dims):
            raise ValueError(f"k={self.k} outside 1..{len(self.dims)}")
        if self.kind == "mixture":
            p = np.asarray(self.proportions if self.proportions is not None
                           else [1.0 / (len(self.dims) + 2)] * (len(self.dims) + 2))
            if len(p) != len(self.dims) + 2 or np.any(p < 0) or abs(p.sum() - 1) > 1e-9:
                raise ValueError("mixture proportions need n+2 non-negative entries summing to 1")
            self.proportions = tuple(float(x) for x in p)


def component_labels(n: int) -> List[str]:
    return [f"uni{k}" for k in range(1, n + 1)] + ["syn", "red"]


def _bits(rng, n):
    return np.where(rng.random(n) < 0.5, -1.0, 1.0)


def _embed(rng, bits, dim, sigma):
    x = rng.standard_normal((len(bits), dim))
    x[:, 0] = bits + sigma * x[:, 0]
    return x


def _noise(rng, n, dim):
    return rng.standard_normal((n, dim))


def _draw(rng, component: str, n: int, dims, sigma):
    """Features and labels for ``n`` samples of one component."""
    if component.startswith("uni"):
        k = int(component[3:])
        b = _bits(rng, n)
        feats = [_embed(rng, b, d, sigma) if m == k - 1 else _noise(rng, n, d)
                 for m, d in enumerate(dims)]
        return feats, (b > 0).astype(np.int64)
    if component == "red":
        b = _bits(rng, n)
        return [_embed(rng, b, d, sigma) for d in dims], (b > 0).astype(np.int64)
    bits = [_bits(rng, n) for _ in dims]
    parity = np.sum([bb < 0 for bb in bits], axis=0) % 2
    return [_embed(rng, b, d, sigma) for b, d in zip(bits, dims)], parity.astype(np.int64)


def _assemble(spec: GenSpec, feats, labels, tags, name):
    mods = {f"m{m + 1}": f for m, f in enumerate(feats)}
    return MultimodalDataset(mods, labels, "multiclass", 2, np.asarray(tags, dtype=object), name)


def gen_unique(spec: GenSpec, k: Optional[int] = None) -> MultimodalDataset:
    k = spec.k if k is None else k
    if not 1 <= k <= len(spec.dims):
        raise ValueError(f"k={k} outside 1..{len(spec.dims)}")
    rng = stream(spec.seed, "data")
    feats, y = _draw(rng, f"uni{k}", spec.n_samples, spec.dims, spec.noise_sigma)
    return _assemble(spec, feats, y, [f"uni{k}"] * spec.n_samples, f"unique{k}")


def gen_redundant(spec: GenSpec) -> MultimodalDataset:
    rng = stream(spec.seed, "data")
    feats, y = _draw(rng, "red", spec.n_samples, spec.dims, spec.noise_sigma)
    return _assemble(spec, feats, y, ["red"] * spec.n_samples, "redundant")


def gen_synergy_xor(spec: GenSpec) -> MultimodalDataset:
    rng = stream(spec.seed, "data")
    feats, y = _draw(rng, "syn", spec.n_samples, spec.dims, spec.noise_sigma)
    return _assemble(spec, feats, y, ["syn"] * spec.n_samples, "synergy-xor")


def gen_mixture(spec: GenSpec) -> MultimodalDataset:
    """Per-sample component drawn from ``spec.proportions`` (order uni1..unin, syn, red)."""
    rng = stream(spec.seed, "data")
    labels = component_labels(len(spec.dims))
    comp = rng.choice(len(labels), size=spec.n_samples, p=spec.proportions)
    feats = [np.empty((spec.n_samples, d)) for d in spec.dims]
    y = np.empty(spec.n_samples, dtype=np.int64)
    for c, label in enumerate(labels):
        idx = np.flatnonzero(comp == c)
        if idx.size == 0:
            continue
        f, yc = _draw(rng, label, idx.size, spec.dims, spec.noise_sigma)
        for m in range(len(spec.dims)):
            feats[m][idx] = f[m]
        y[idx] = yc
    return _assemble(spec, feats, y, [labels[c] for c in comp], "mixture")


def generate(spec: GenSpec) -> MultimodalDataset:
    if spec.kind == "unique":
        return gen_unique(spec)
    if spec.kind == "redundant":
        return gen_redundant(spec)
    if spec.kind == "synergy-xor":
        return gen_synergy_xor(spec)
    return gen_mixture(spec)


def noiseless_joint(component: str, pair: Tuple[int, int] = (1, 2)) -> DiscreteJoint:
    """Exact joint of (sign bits of the two modalities' signal coordinates, label).

    Computed analytically at ``sigma = 0``. A modality that carries no signal
    contributes the sign of a standard normal: a fair coin independent of all else.
    For more than two modalities ``pair`` picks the projected sources; the
    parity label of ``syn`` is then uniform given the pair unless n == 2.
    """
    a, b = pair
    table = np.zeros((2, 2, 2))
    for x1 in (0, 1):
        for x2 in (0, 1):
            for t in (0, 1):
                table[x1, x2, t] = _joint_entry(component, a, b, x1, x2, t)
    return DiscreteJoint(table)


def _joint_entry(component, a, b, x1, x2, t):
    if component.startswith("uni"):
        k = int(component[3:])
        if k == a:
            return 0.25 * (x1 == t)
        if k == b:
            return 0.25 * (x2 == t)
        return 0.125
    if component == "red":
        return 0.5 * (x1 == x2 == t)
    return 0.25 * ((x1 ^ x2) == t)


def sign_discretizer(dataset: MultimodalDataset, pair: Tuple[int, int] = (1, 2)) -> DiscreteJoint:
    """Empirical joint of sign bits of the two signal coordinates and the label."""
    if dataset.task_kind == "regression":
        raise DatasetError("sign discretizer needs class labels")
    arrays = dataset.arrays
    x1 = (arrays[pair[0] - 1][:, 0] > 0).astype(int)
    x2 = (arrays[pair[1] - 1][:, 0] > 0).astype(int)
    t = np.asarray(dataset.targets, dtype=int)
    table = np.zeros((2, 2, int(t.max()) + 1))
    np.add.at(table, (x1, x2, t), 1.0)
    return DiscreteJoint(table / table.sum())


# ---------------------------------------------------------------------------
# directory format
# ---------------------------------------------------------------------------

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_dataset(dataset: MultimodalDataset, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    mods = []
    for name, x in dataset.modalities.items():
        fname = f"{name}.csv"
        _write_csv(os.path.join(directory, fname), [f"{name}_{i}" for i in range(x.shape[1])],
                   ([_fmt(v) for v in row] for row in x))
        mods.append({"name": name, "file": fname, "dim": int(x.shape[1])})
    y = dataset.targets
    if dataset.task_kind == "multiclass":
        _write_csv(os.path.join(directory, "labels.csv"), ["label"], ([int(v)] for v in y))
    elif dataset.task_kind == "multilabel":
        _write_csv(os.path.join(directory, "labels.csv"),
                   [f"class_{c}" for c in range(y.shape[1])], ([int(v) for v in r] for r in y))
    else:
        _write_csv(os.path.join(directory, "labels.csv"), ["target"], ([_fmt(v)] for v in y))
    manifest = {"format_version": FORMAT_VERSION, "name": dataset.name,
                "task_kind": dataset.task_kind, "num_classes": int(dataset.num_classes),
                "modalities": mods, "labels_file": "labels.csv"}
    if dataset.tags is not None:
        _write_csv(os.path.join(directory, "tags.csv"), ["tag"], ([t] for t in dataset.tags))
        manifest["tags_file"] = "tags.csv"
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _read_csv(path, modality=None):
    if not os.path.exists(path):
        raise DatasetError(f"missing file {path}", path, modality)
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise DatasetError(f"empty file {path}", path, modality)
    return rows[0], rows[1:]


def read_dataset(directory) -> MultimodalDataset:
    mpath = os.path.join(directory, "manifest.json")
    if not os.path.exists(mpath):
        raise DatasetError(f"missing manifest {mpath}", mpath)
    with open(mpath) as f:
        manifest = json.load(f)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported format_version {manifest.get('format_version')}", mpath)
    mods = {}
    for m in manifest["modalities"]:
        path = os.path.join(directory, m["file"])
        header, rows = _read_csv(path, m["name"])
        if len(header) != m["dim"] or any(len(r) != m["dim"] for r in rows):
            raise DatasetError(f"modality {m['name']!r}: manifest dim {m['dim']} but "
                               f"{path} has {len(header)} columns", path, m["name"])
        mods[m["name"]] = np.array(rows, dtype=np.float64).reshape(len(rows), m["dim"])
    task = manifest["task_kind"]
    lpath = os.path.join(directory, manifest.get("labels_file") or "labels.csv")
    _, rows = _read_csv(lpath)
    if task == "multiclass":
        y = np.array([int(r[0]) for r in rows], dtype=np.int64)
    elif task == "multilabel":
        y = np.array(rows, dtype=np.int64).reshape(len(rows), -1)
    else:
        y = np.array([float(r[0]) for r in rows], dtype=np.float64)
    tags = None
    if manifest.get("tags_file"):
        _, trows = _read_csv(os.path.join(directory, manifest["tags_file"]))
        tags = np.array([r[0] for r in trows], dtype=object)
    counts = {k: len(v) for k, v in mods.items()}
    if any(c != len(y) for c in counts.values()):
        raise DatasetError(f"row-count mismatch: {counts} vs {len(y)} labels", directory)
    return MultimodalDataset(mods, y, task, int(manifest["num_classes"]), tags,
                             manifest.get("name", "dataset"))
