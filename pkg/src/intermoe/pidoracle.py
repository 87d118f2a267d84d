"""Brute-force two-source partial information decomposition.

Redundancy is the Williams-Beer ``I_min``: the expected (over target
outcomes) minimum specific information either source carries about that
outcome. Unique and synergistic parts follow from the mutual informations:

    unq_i = I(T; X_i) - red
    syn   = I(T; X1, X2) - unq1 - unq2 - red

Everything is in bits and computed by enumerating a small probability table.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

MAX_ALPHABET = 16
COMPONENTS = ("red", "unq1", "unq2", "syn")


class PidError(ValueError):
    pass


class AmbiguousClassification(PidError):
    pass


class NoInformation(AmbiguousClassification):
    """The target carries (numerically) zero information about the sources."""


class DiscreteJoint:
    """Probability table ``p[x1, x2, t]``."""

    def __init__(self, table, labels: Optional[Sequence[Sequence]] = None):
        p = np.asarray(table, dtype=np.float64)
        if p.ndim != 3:
            raise PidError(f"joint table must be 3-D (x1, x2, t), got shape {p.shape}")
        if max(p.shape) > MAX_ALPHABET:
            raise PidError(f"alphabets limited to {MAX_ALPHABET} symbols, got {p.shape}")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise PidError("joint has negative or non-finite entries")
        if abs(p.sum() - 1.0) > 1e-12:
            raise PidError(f"joint sums to {p.sum()!r}, not 1")
        self.p = p
        self.labels = labels

    @classmethod
    def from_rows(cls, rows) -> "DiscreteJoint":
        """Build from ``(x1, x2, t, prob)`` rows; symbols may be any hashables."""
        rows = [tuple(r) for r in rows]
        alph = [sorted({r[i] for r in rows}, key=str) for i in range(3)]
        index = [{s: k for k, s in enumerate(a)} for a in alph]
        table = np.zeros(tuple(len(a) for a in alph))
        for x1, x2, t, prob in rows:
            table[index[0][x1], index[1][x2], index[2][t]] += float(prob)
        return cls(table, alph)

    def swap_sources(self) -> "DiscreteJoint":
        labels = None if self.labels is None else [self.labels[1], self.labels[0], self.labels[2]]
        return DiscreteJoint(np.transpose(self.p, (1, 0, 2)), labels)


def read_joint_csv(path) -> DiscreteJoint:
    """Rows ``x1,x2,t,p``; a non-numeric first row is taken as a header."""
    with open(path, newline="") as f:
        rows = [r for r in csv.reader(f) if r and not r[0].startswith("#")]
    if rows:
        try:
            float(rows[0][3])
        except (ValueError, IndexError):
            rows = rows[1:]
    if any(len(r) != 4 for r in rows):
        raise PidError(f"{path}: every row needs 4 fields x1,x2,t,p")
    return DiscreteJoint.from_rows((r[0].strip(), r[1].strip(), r[2].strip(), float(r[3]))
                                   for r in rows)


def _mi_2d(pxy: np.ndarray) -> float:
    """Mutual information (bits) of a 2-D joint; 0 log 0 = 0."""
    px = pxy.sum(axis=1, keepdims=True)
    py = pxy.sum(axis=0, keepdims=True)
    nz = pxy > 0
    return float(np.sum(pxy[nz] * np.log2(pxy[nz] / (px @ py)[nz])))


def _source_target(joint: DiscreteJoint, which: str) -> np.ndarray:
    p = joint.p
    if which == "T;X1":
        return p.sum(axis=1)
    if which == "T;X2":
        return p.sum(axis=0)
    if which == "T;X1X2":
        return p.reshape(-1, p.shape[2])
    raise PidError(f"unknown mutual information {which!r}")


def mutual_info(joint: DiscreteJoint, which: str) -> float:
    """``I(T;X1)``, ``I(T;X2)`` or ``I(T;X1X2)`` in bits."""
    return _mi_2d(_source_target(joint, which))


def specific_information(pat: np.ndarray) -> np.ndarray:
    """``I(T=t; A) = sum_a p(a|t) log2(p(t|a) / p(t))`` for every ``t``.

    ``pat`` is the 2-D joint ``p(a, t)``; outcomes with ``p(t) = 0`` get 0.
    """
    pa = pat.sum(axis=1)
    pt = pat.sum(axis=0)
    out = np.zeros(pat.shape[1])
    for t in range(pat.shape[1]):
        if pt[t] == 0:
            continue
        for a in range(pat.shape[0]):
            if pat[a, t] > 0:
                out[t] += (pat[a, t] / pt[t]) * np.log2((pat[a, t] / pa[a]) / pt[t])
    return out


def redundancy_imin(joint: DiscreteJoint) -> float:
    pt = joint.p.sum(axis=(0, 1))
    s1 = specific_information(_source_target(joint, "T;X1"))
    s2 = specific_information(_source_target(joint, "T;X2"))
    return float(np.sum(pt * np.minimum(s1, s2)))


@dataclass(frozen=True)
class PidResult:
    red: float
    unq1: float
    unq2: float
    syn: float
    total_mi: float

    def as_tuple(self):
        return (self.red, self.unq1, self.unq2, self.syn)

    def as_dict(self):
        return {"red": self.red, "unq1": self.unq1, "unq2": self.unq2, "syn": self.syn,
                "total_mi": self.total_mi}


def _clamp(x: float) -> float:
    return 0.0 if -1e-12 <= x < 0 else x


def pid_decompose(joint: DiscreteJoint) -> PidResult:
    i1 = mutual_info(joint, "T;X1")
    i2 = mutual_info(joint, "T;X2")
    i12 = mutual_info(joint, "T;X1X2")
    red = redundancy_imin(joint)
    unq1, unq2 = i1 - red, i2 - red
    syn = i12 - unq1 - unq2 - red
    return PidResult(_clamp(red), _clamp(unq1), _clamp(unq2), _clamp(syn), i12)


_COMPONENT_LABELS = {"red": "red", "unq1": "uni1", "unq2": "uni2", "syn": "syn"}


def classify_dominant(source: Union[DiscreteJoint, object],
                      discretizer: Optional[Callable] = None, tol: float = 1e-9) -> str:
    """Label (``uni1``, ``uni2``, ``syn``, ``red``) of the strictly largest component.

    ``source`` is a joint, or a dataset turned into one by ``discretizer``.
    """
    joint = source if isinstance(source, DiscreteJoint) else discretizer(source)
    res = pid_decompose(joint)
    if res.total_mi <= tol:
        raise NoInformation("target carries no information about the sources")
    values = dict(zip(COMPONENTS, res.as_tuple()))
    ranked = sorted(values, key=values.get, reverse=True)
    if values[ranked[0]] - values[ranked[1]] <= tol:
        raise AmbiguousClassification(
            f"tie between {ranked[0]} and {ranked[1]} ({values[ranked[0]]:.3g} bits)")
    return _COMPONENT_LABELS[ranked[0]]


# fixtures used by tests, docs and the CLI
def xor_joint() -> DiscreteJoint:
    return DiscreteJoint.from_rows([(a, b, a ^ b, 0.25) for a in (0, 1) for b in (0, 1)])


def and_joint() -> DiscreteJoint:
    return DiscreteJoint.from_rows([(a, b, a & b, 0.25) for a in (0, 1) for b in (0, 1)])


def copy_joint() -> DiscreteJoint:
    return DiscreteJoint.from_rows([(a, a, a, 0.5) for a in (0, 1)])


def unique1_joint() -> DiscreteJoint:
    return DiscreteJoint.from_rows([(a, b, a, 0.25) for a in (0, 1) for b in (0, 1)])
