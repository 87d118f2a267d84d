import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from intermoe.pidoracle import (AmbiguousClassification, DiscreteJoint, NoInformation, PidError,
                                and_joint, classify_dominant, copy_joint, mutual_info,
                                pid_decompose, read_joint_csv, redundancy_imin, unique1_joint,
                                xor_joint)


def brute_mi(p, groups):
    """I(T; sources) by summing over every cell; ``groups`` picks source axes."""
    pa, pt, pat = {}, {}, {}
    for x1, x2, t in itertools.product(*(range(s) for s in p.shape)):
        v = p[x1, x2, t]
        a = tuple((x1, x2)[g] for g in groups)
        pa[a] = pa.get(a, 0) + v
        pt[t] = pt.get(t, 0) + v
        pat[a, t] = pat.get((a, t), 0) + v
    return sum(v * math.log2(v / (pa[a] * pt[t])) for (a, t), v in pat.items() if v > 0)


def brute_imin(p):
    total = 0.0
    for t in range(p.shape[2]):
        pt = p[:, :, t].sum()
        if pt == 0:
            continue
        spec = []
        for axis in (0, 1):
            s = 0.0
            for a in range(p.shape[axis]):
                pat = p[a, :, t].sum() if axis == 0 else p[:, a, t].sum()
                pa = p[a].sum() if axis == 0 else p[:, a].sum()
                if pat > 0:
                    s += (pat / pt) * math.log2((pat / pa) / pt)
            spec.append(s)
        total += pt * min(spec)
    return total


def random_joint(rng, shape=(2, 2, 2)):
    p = rng.random(shape) ** 2
    return DiscreteJoint(p / p.sum())


def test_fixture_values():
    np.testing.assert_allclose(pid_decompose(xor_joint()).as_tuple(), (0, 0, 0, 1), atol=1e-9)
    np.testing.assert_allclose(pid_decompose(copy_joint()).as_tuple(), (1, 0, 0, 0), atol=1e-9)
    np.testing.assert_allclose(pid_decompose(unique1_joint()).as_tuple(), (0, 1, 0, 0), atol=1e-9)


def test_and_gate_against_enumeration():
    j = and_joint()
    res = pid_decompose(j)
    red = brute_imin(j.p)
    i1, i2, i12 = (brute_mi(j.p, g) for g in ((0,), (1,), (0, 1)))
    assert res.red == pytest.approx(red, abs=1e-6)
    assert res.unq1 == pytest.approx(i1 - red, abs=1e-6)
    assert res.unq2 == pytest.approx(i2 - red, abs=1e-6)
    assert res.syn == pytest.approx(i12 - i1 - i2 + red, abs=1e-6)
    assert res.red == pytest.approx(0.3113, abs=1e-4)
    assert res.syn == pytest.approx(0.5, abs=1e-9)


def test_mutual_information_examples():
    bits = DiscreteJoint(np.full((2, 2, 2), 0.125))
    assert mutual_info(bits, "T;X1X2") == pytest.approx(0.0, abs=1e-15)
    assert mutual_info(unique1_joint(), "T;X1") == pytest.approx(1.0)
    with pytest.raises(PidError):
        mutual_info(bits, "T;X3")


def test_imin_examples():
    assert redundancy_imin(xor_joint()) == pytest.approx(0.0, abs=1e-15)
    assert redundancy_imin(copy_joint()) == pytest.approx(1.0)


def test_random_joints_sum_to_joint_information():
    rng = np.random.default_rng(0)
    for _ in range(100):
        j = random_joint(rng)
        res = pid_decompose(j)
        assert sum(res.as_tuple()) == pytest.approx(mutual_info(j, "T;X1X2"), abs=1e-9)
        assert mutual_info(j, "T;X1X2") == pytest.approx(brute_mi(j.p, (0, 1)), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.tuples(st.integers(2, 4), st.integers(2, 4), st.integers(2, 3)))
def test_redundancy_bounds_and_source_symmetry(seed, shape):
    j = random_joint(np.random.default_rng(seed), shape)
    res = pid_decompose(j)
    bound = min(mutual_info(j, "T;X1"), mutual_info(j, "T;X2"))
    assert -1e-12 <= res.red <= bound + 1e-12
    swapped = pid_decompose(j.swap_sources())
    assert swapped.red == pytest.approx(res.red, abs=1e-12)
    assert swapped.unq1 == pytest.approx(res.unq2, abs=1e-12)
    assert swapped.syn == pytest.approx(res.syn, abs=1e-12)


def test_relabelling_symbols_changes_nothing():
    rng = np.random.default_rng(5)
    j = random_joint(rng, (3, 2, 2))
    perm = j.p[[2, 0, 1]][:, :, [1, 0]]
    np.testing.assert_allclose(pid_decompose(DiscreteJoint(perm)).as_tuple(),
                               pid_decompose(j).as_tuple(), atol=1e-12)


def test_classification_errors():
    with pytest.raises(NoInformation):
        classify_dominant(DiscreteJoint(np.full((2, 2, 2), 0.125)))
    tie = DiscreteJoint.from_rows([(a, b, (a, b), 0.25) for a in (0, 1) for b in (0, 1)])
    with pytest.raises(AmbiguousClassification):
        classify_dominant(tie)


def test_joint_validation():
    with pytest.raises(PidError):
        DiscreteJoint(np.full((2, 2, 2), 0.2))
    with pytest.raises(PidError):
        DiscreteJoint(np.full((2, 2), 0.25))
    with pytest.raises(PidError):
        DiscreteJoint(np.full((17, 1, 1), 1 / 17))
    bad = np.full((2, 2, 2), 0.125)
    bad[0, 0, 0], bad[0, 0, 1] = -0.125, 0.375
    with pytest.raises(PidError):
        DiscreteJoint(bad)


def test_read_joint_csv(tmp_path):
    path = tmp_path / "xor.csv"
    path.write_text("x1,x2,t,p\n0,0,0,0.25\n0,1,1,0.25\n1,0,1,0.25\n1,1,0,0.25\n")
    np.testing.assert_allclose(pid_decompose(read_joint_csv(path)).as_tuple(), (0, 0, 0, 1),
                               atol=1e-12)
    (tmp_path / "bad.csv").write_text("0,0,0\n")
    with pytest.raises(PidError):
        read_joint_csv(tmp_path / "bad.csv")
