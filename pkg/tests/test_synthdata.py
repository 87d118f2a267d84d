import json
import os

import numpy as np
import pytest

from intermoe.pidoracle import classify_dominant, pid_decompose
from intermoe.synthdata import (DatasetError, GenSpec, gen_mixture, gen_redundant, gen_synergy_xor,
                                gen_unique, generate, noiseless_joint, read_dataset,
                                sign_discretizer, write_dataset)


def probe_accuracy(features, y):
    """Least-squares linear probe with a bias, scored on its own training data."""
    x = np.column_stack([features, np.ones(len(features))])
    coef, *_ = np.linalg.lstsq(x, 2.0 * y - 1.0, rcond=None)
    return float(np.mean((x @ coef > 0) == (y == 1)))


def test_unique_noiseless_probes():
    ds = gen_unique(GenSpec(n_samples=2000, noise_sigma=0.0, seed=0), k=1)
    assert probe_accuracy(ds.arrays[0], ds.targets) == 1.0
    assert abs(probe_accuracy(ds.arrays[1], ds.targets) - 0.5) <= 0.05


def test_unique_k2_uses_second_modality():
    ds = gen_unique(GenSpec(n_samples=2000, noise_sigma=0.0, seed=1, dims=(4, 4, 4)), k=2)
    assert probe_accuracy(ds.arrays[1], ds.targets) == 1.0
    assert abs(probe_accuracy(ds.arrays[0], ds.targets) - 0.5) <= 0.05


def test_redundant_probes_and_noise():
    ds = gen_redundant(GenSpec(n_samples=2000, noise_sigma=0.0, seed=0))
    for x in ds.arrays:
        assert probe_accuracy(x, ds.targets) == 1.0
    noisy = gen_redundant(GenSpec(n_samples=50, noise_sigma=0.2, seed=0))
    assert not np.array_equal(noisy.arrays[0], noisy.arrays[1])


def test_xor_probes():
    ds = gen_synergy_xor(GenSpec(n_samples=2000, noise_sigma=0.3, seed=0))
    for x in ds.arrays:
        assert abs(probe_accuracy(x, ds.targets) - 0.5) <= 0.05
    a, b = ds.arrays
    bilinear = np.column_stack([a, b, np.einsum("ni,nj->nij", a, b).reshape(len(a), -1)])
    assert probe_accuracy(bilinear, ds.targets) >= 0.95


@pytest.mark.parametrize("component,expected", [
    ("uni1", "uni1"), ("uni2", "uni2"), ("red", "red"), ("syn", "syn")])
def test_noiseless_joints_certify(component, expected):
    assert classify_dominant(noiseless_joint(component)) == expected


def test_noiseless_xor_joint_is_pure_synergy():
    np.testing.assert_allclose(pid_decompose(noiseless_joint("syn")).as_tuple(), (0, 0, 0, 1),
                               atol=1e-12)


@pytest.mark.parametrize("kind", ["unique", "redundant", "synergy-xor"])
def test_sampled_joint_matches_intent(kind):
    ds = generate(GenSpec(kind=kind, n_samples=4000, noise_sigma=0.0, seed=3))
    expected = {"unique": "uni1", "redundant": "red", "synergy-xor": "syn"}[kind]
    assert classify_dominant(ds, sign_discretizer) == expected


def test_mixture_tags_partition_and_counts():
    n = 4000
    ds = gen_mixture(GenSpec(kind="mixture", n_samples=n, seed=0))
    tags = list(ds.tags)
    assert len(tags) == n and set(tags) <= {"uni1", "uni2", "syn", "red"}
    sd = np.sqrt(n * 0.25 * 0.75)
    for t in ("uni1", "uni2", "syn", "red"):
        assert abs(tags.count(t) - n / 4) <= 3 * sd


def test_mixture_of_one_component_matches_unique_in_law():
    mix = gen_mixture(GenSpec(kind="mixture", n_samples=3000, seed=4, proportions=(1, 0, 0, 0)))
    assert set(mix.tags) == {"uni1"}
    assert probe_accuracy(mix.arrays[0], mix.targets) > 0.99
    assert abs(probe_accuracy(mix.arrays[1], mix.targets) - 0.5) <= 0.05


def test_generator_validation():
    with pytest.raises(ValueError):
        GenSpec(kind="mystery")
    with pytest.raises(ValueError):
        GenSpec(kind="mixture", proportions=(0.5, 0.5))
    with pytest.raises(ValueError):
        GenSpec(dims=(4,))
    with pytest.raises(ValueError):
        GenSpec(k=3)


def test_generation_is_deterministic():
    spec = GenSpec(kind="mixture", n_samples=200, seed=9)
    assert generate(spec).equals(generate(spec))
    assert not generate(spec).equals(generate(GenSpec(kind="mixture", n_samples=200, seed=10)))


def test_round_trip(tmp_path):
    ds = generate(GenSpec(kind="mixture", n_samples=120, seed=2))
    write_dataset(ds, tmp_path)
    back = read_dataset(tmp_path)
    assert back.equals(ds)
    np.testing.assert_array_equal(back.tags, ds.tags)


def test_dim_mismatch_names_modality(tmp_path):
    write_dataset(generate(GenSpec(n_samples=30, dims=(4, 4))), tmp_path)
    man = json.loads((tmp_path / "manifest.json").read_text())
    man["modalities"][0]["dim"] = 5
    (tmp_path / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(DatasetError) as info:
        read_dataset(tmp_path)
    assert info.value.modality == "m1"


def test_missing_labels_file(tmp_path):
    write_dataset(generate(GenSpec(n_samples=30)), tmp_path)
    os.remove(tmp_path / "labels.csv")
    with pytest.raises(DatasetError):
        read_dataset(tmp_path)


def test_row_count_mismatch(tmp_path):
    write_dataset(generate(GenSpec(n_samples=30)), tmp_path)
    lines = (tmp_path / "labels.csv").read_text().splitlines()
    (tmp_path / "labels.csv").write_text("\n".join(lines[:-3]) + "\n")
    with pytest.raises(DatasetError):
        read_dataset(tmp_path)
