from dataclasses import replace

import numpy as np
import pytest

from intermoe.model import ConfigError
from intermoe.rng import stream
from intermoe.synthdata import GenSpec, MultimodalDataset, generate
from intermoe.trainer import (Adam, TrainConfig, aggregate, build_model, evaluate, measure_overhead,
                              preflight, run_ablation, run_seeds, split, split_indices,
                              split_sizes, train_run, train_step)

SMALL = TrainConfig(train_epochs=2, batch_size=16)


@pytest.fixture(scope="module")
def mixture():
    return generate(GenSpec(kind="mixture", n_samples=240, seed=0))


def test_split_sizes():
    assert split_sizes(100) == (70, 15, 15)
    assert split_sizes(10) == (7, 1, 2)


def test_split_indices_partition():
    parts = split_indices(103, seed=4)
    joined = np.sort(np.concatenate(parts))
    np.testing.assert_array_equal(joined, np.arange(103))
    assert [len(p) for p in parts] == list(split_sizes(103))


def test_split_returns_datasets(mixture):
    tr, va, te = split(mixture, seed=0)
    assert (len(tr), len(va), len(te)) == split_sizes(len(mixture))


def test_adam_zero_gradient_and_first_step():
    params = {"w": np.array([1.0, -2.0])}
    opt = Adam(lr=0.1)
    opt.step(params, {"w": np.zeros(2)})
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])
    opt = Adam(lr=0.1)
    opt.step(params, {"w": np.array([3.0, -0.5])})
    np.testing.assert_allclose(params["w"], [0.9, -1.9], atol=1e-7)


def test_lambda_property_and_validation():
    assert TrainConfig(ablation="no-interaction").lambda_int == 0.0
    assert TrainConfig(baseline="vanilla").lambda_int == 0.0
    assert TrainConfig(interaction_loss_weight=0.5).lambda_int == 0.5
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigError):
        TrainConfig(ablation="no-interaction", baseline="vanilla")
    with pytest.raises(ConfigError):
        TrainConfig(mask_strategy="blur")


def test_small_learning_rate_accepted():
    assert TrainConfig(lr=0.0001, interaction_loss_weight=0.5, temperature_rw=2.0).lr == 0.0001


# ---------------------------------------------------------------------------
# independent single-model trainer used as an oracle
# ---------------------------------------------------------------------------

def _hand_forward_backward(p, xs, y, n_classes):
    hs = [np.tanh(x @ p[f"enc{m}.l0.W"] + p[f"enc{m}.l0.b"]) for m, x in enumerate(xs)]
    h = np.concatenate(hs, axis=1)
    f1 = np.tanh(h @ p["expert0.fus.l0.W"] + p["expert0.fus.l0.b"])
    f2 = np.tanh(f1 @ p["expert0.fus.l1.W"] + p["expert0.fus.l1.b"])
    z = f2 @ p["expert0.head.l0.W"] + p["expert0.head.l0.b"]
    z = z - z.max(axis=1, keepdims=True)
    prob = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    onehot = np.eye(n_classes)[y]
    loss = -np.mean(np.log((prob * onehot).sum(axis=1)))
    g = {"rw.global": np.zeros_like(p["rw.global"])}
    dz = (prob - onehot) / len(y)
    g["expert0.head.l0.W"], g["expert0.head.l0.b"] = f2.T @ dz, dz.sum(0)
    d2 = (dz @ p["expert0.head.l0.W"].T) * (1 - f2 ** 2)
    g["expert0.fus.l1.W"], g["expert0.fus.l1.b"] = f1.T @ d2, d2.sum(0)
    d1 = (d2 @ p["expert0.fus.l1.W"].T) * (1 - f1 ** 2)
    g["expert0.fus.l0.W"], g["expert0.fus.l0.b"] = h.T @ d1, d1.sum(0)
    dh = d1 @ p["expert0.fus.l0.W"].T
    width = hs[0].shape[1]
    for m, (x, hm) in enumerate(zip(xs, hs)):
        dm = dh[:, m * width:(m + 1) * width] * (1 - hm ** 2)
        g[f"enc{m}.l0.W"], g[f"enc{m}.l0.b"] = x.T @ dm, dm.sum(0)
    return loss, g


def _hand_adam(p, g, state, lr, t):
    for k in p:
        m = state.setdefault(("m", k), np.zeros_like(p[k]))
        v = state.setdefault(("v", k), np.zeros_like(p[k]))
        m[...] = 0.9 * m + 0.1 * g[k]
        v[...] = 0.999 * v + 0.001 * g[k] ** 2
        p[k] = p[k] - lr * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)


def test_vanilla_matches_hand_rolled_trainer(mixture):
    cfg = TrainConfig(baseline="vanilla", activation="tanh", batch_size=16, seed=3)
    model = build_model(cfg, mixture)
    assert model.n_experts == 1
    hand = {k: v.copy() for k, v in model.params.items()}
    opt, state = Adam(cfg.lr), {}
    order = stream(cfg.seed, "shuffle").permutation(len(mixture))
    for step in range(3):
        b = order[step * 16:(step + 1) * 16]
        xs, y = [x[b] for x in mixture.arrays], mixture.targets[b]
        ours, int_losses, total = train_step(model, opt, cfg, xs, y, "multiclass", 2, None, None)
        ref, grads = _hand_forward_backward(hand, xs, y, 2)
        assert int_losses == [] and total == ours
        assert ours == pytest.approx(ref, abs=1e-9)
        _hand_adam(hand, grads, state, cfg.lr, step + 1)
    for k in hand:
        np.testing.assert_allclose(model.params[k], hand[k], atol=1e-9)


def test_training_is_deterministic(mixture):
    a = train_run(SMALL, mixture)
    b = train_run(SMALL, mixture)
    strip = lambda log: [{k: v for k, v in r.items() if k != "seconds"} for r in log]
    assert strip(a.log) == strip(b.log)
    assert all(np.isfinite(r["int_loss_expert_0"]) for r in a.log)
    assert a.model.to_json() == b.model.to_json()
    assert a.best_model.to_json() == b.best_model.to_json()


def test_log_columns(mixture):
    res = train_run(SMALL, mixture)
    assert res.log_columns == ["epoch", "task_loss", "int_loss_expert_0", "int_loss_expert_1",
                               "int_loss_expert_2", "int_loss_expert_3", "train_acc", "val_acc",
                               "seconds"]
    assert 1 <= res.best_epoch <= SMALL.train_epochs


def test_seeds_differ_only_in_random_quantities(mixture):
    runs = run_seeds(replace(SMALL, train_epochs=1), mixture, [0, 1, 2])
    flat = [np.concatenate([v.ravel() for v in r.result.model.params.values()]) for r in runs]
    assert not np.array_equal(flat[0], flat[1]) and not np.array_equal(flat[1], flat[2])
    assert {r.result.model.n_experts for r in runs} == {4}
    assert {len(r.test_split) for r in runs} == {split_sizes(len(mixture))[2]}


def test_aggregate_mean_and_sample_std():
    agg = aggregate([{"accuracy": 0.5}, {"accuracy": 0.7}, {"accuracy": 0.9}])
    assert agg["accuracy"]["mean"] == pytest.approx(0.7)
    assert agg["accuracy"]["std"] == pytest.approx(0.2)


def test_ablation_structures():
    three = generate(GenSpec(kind="mixture", n_samples=120, dims=(4, 4, 4), seed=1))
    cfg = replace(SMALL, train_epochs=1)
    sr = run_ablation("synergy-redundancy", cfg, three, [0])
    assert sr["n_experts"] == 2
    sw = run_ablation("simple-weight", cfg, three, [0])
    assert sw["n_experts"] == 5 and sw["reweighter_params"] == 5
    assert set(sw["delta"]) >= {"accuracy", "auroc"}
    with pytest.raises(ConfigError):
        run_ablation("none", cfg, three, [0])


@pytest.mark.parametrize("variant", ["no-interaction", "latent-contrastive", "less-forward"])
def test_remaining_variants_run(mixture, variant):
    res = run_ablation(variant, replace(SMALL, train_epochs=1), mixture, [0])
    assert np.isfinite(res["metrics"]["accuracy"]["mean"])


@pytest.mark.parametrize("baseline", ["early-fusion", "late-fusion", "vanilla"])
def test_baselines_train(mixture, baseline):
    res = train_run(replace(SMALL, baseline=baseline), mixture)
    assert np.isfinite(res.log[-1]["task_loss"])


def test_preflight_rejects_latent_regression():
    rng = np.random.default_rng(0)
    reg = MultimodalDataset({"a": rng.normal(size=(30, 2)), "b": rng.normal(size=(30, 2))},
                            rng.normal(size=30), "regression", 1)
    with pytest.raises(ConfigError):
        preflight(TrainConfig(ablation="latent-contrastive"), reg)
    res = train_run(TrainConfig(train_epochs=1, batch_size=8), reg)
    assert res.log[0]["val_acc"] != res.log[0]["val_acc"]  # accuracy undefined for regression
    assert evaluate(res.model, reg).mse is not None


def test_multilabel_training_runs():
    rng = np.random.default_rng(0)
    y = (rng.random((40, 3)) > 0.5).astype(np.int64)
    ds = MultimodalDataset({"a": rng.normal(size=(40, 2)), "b": rng.normal(size=(40, 2))},
                           y, "multilabel", 3)
    res = train_run(TrainConfig(train_epochs=1, batch_size=8), ds)
    assert 0.0 <= res.log[0]["train_acc"] <= 1.0


def test_overhead_report(mixture):
    rep = measure_overhead(replace(SMALL, train_epochs=1), mixture, epochs=3, repeats=1)
    assert rep["full"]["n_experts"] == 4 and rep["vanilla"]["n_experts"] == 1
    assert rep["expert_param_ratio"] == pytest.approx(4.0)
    assert rep["full"]["train_s_per_epoch"] > 0 and rep["full"]["inference_s"] > 0
    assert rep["dataset"] == mixture.name


@pytest.mark.slow
def test_default_config_learns_xor():
    ds = generate(GenSpec(kind="synergy-xor", n_samples=2000, noise_sigma=0.2, seed=0))
    res = train_run(TrainConfig(seed=0), ds)
    assert res.log[-1]["train_acc"] > 0.9
