import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from intermoe.diffcore import ContractError, Tape
from intermoe.model import (ConfigError, ExpertKind, FusionBaseline, InputError, InteractionMoE,
                            ModelConfig, combine, combined_prediction, load_checkpoint,
                            load_checkpoint_text)


def make_model(dims=(5, 7), seed=0, **kw):
    cfg = ModelConfig(input_dims=dims, output_dim=kw.pop("output_dim", 2), **kw)
    return InteractionMoE(cfg, np.random.default_rng(seed))


def batch(dims, n=4, seed=1):
    rng = np.random.default_rng(seed)
    return [rng.normal(size=(n, d)) for d in dims]


@pytest.mark.parametrize("n", [2, 3, 4])
def test_expert_count_is_modalities_plus_two(n):
    model = make_model(dims=(3,) * n)
    assert model.n_experts == n + 2
    assert [k.label for k in model.kinds] == [f"uni{i}" for i in range(1, n + 1)] + ["syn", "red"]


def test_expert_kind_labels_round_trip():
    for label in ("uni1", "uni3", "syn", "red"):
        assert ExpertKind.parse(label).label == label
    with pytest.raises(ConfigError):
        ExpertKind.parse("mystery")
    with pytest.raises(ConfigError):
        ExpertKind("uniqueness", 0)


def test_embedding_shapes():
    model = make_model(dims=(5, 7), hidden_dim=16)
    emb = model.encode(Tape(), batch((5, 7)))
    assert [e.shape for e in emb] == [(4, 16), (4, 16)]


def test_zero_weights_give_zero_embeddings_and_logits():
    model = InteractionMoE(ModelConfig(input_dims=(5, 7), output_dim=3))
    out = model.infer(batch((5, 7)))
    np.testing.assert_array_equal(out["expert_logits"], np.zeros((4, 4, 3)))
    np.testing.assert_allclose(out["weights"], 0.25)


def test_same_seed_same_embedding():
    x = batch((5, 7))
    a = make_model(seed=42).encode(Tape(), x)
    b = make_model(seed=42).encode(Tape(), x)
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u.value, v.value)


def test_hand_set_fusion_and_linear_head():
    cfg = ModelConfig(input_dims=(2, 2), output_dim=2, hidden_dim=2, num_layers_fus=1,
                      activation="relu")
    model = InteractionMoE(cfg)
    model.params["expert0.fus.l0.W"] = np.array([[1.0, 0], [0, 1], [0, 0], [0, 0]])
    head = np.array([[1.0, 2.0], [3.0, 4.0]])
    model.params["expert0.head.l0.W"] = head
    t = Tape()
    emb = [t.constant(np.array([[1.0, 0.0]])), t.constant(np.array([[0.0, 1.0]]))]
    _, logits = model.expert_forward(t, 0, emb)
    np.testing.assert_allclose(logits.value, [head[0]])


def test_output_dim_controls_logit_width():
    out = make_model(output_dim=3).infer(batch((5, 7)))
    assert out["expert_logits"].shape == (4, 4, 3)
    assert out["prediction"].shape == (4, 3)


def test_reweighter_temperature_limits():
    model = make_model()
    t = Tape()
    emb = model.encode(t, batch((5, 7)))
    w = model.reweight(t, emb, temperature=1e6).value
    np.testing.assert_allclose(w, 0.25, atol=1e-4)
    with pytest.raises(ConfigError):
        model.reweight(t, emb, temperature=0.0)


def test_low_temperature_value_accepted():
    assert ModelConfig(input_dims=(3, 3), output_dim=2, temperature_rw=2.0).temperature_rw == 2.0


def test_combined_prediction_examples():
    logits = [np.array([[1.0, -1.0]]), np.array([[3.0, 5.0]]), np.array([[0.0, 2.0]]),
              np.array([[7.0, 7.0]])]
    np.testing.assert_array_equal(combine(np.array([[1.0, 0, 0, 0]]), logits), [[1.0, -1.0]])
    same = [np.array([[1.0, -1.0]])] * 4
    np.testing.assert_allclose(combine(np.full((1, 4), 0.25), same), [[1.0, -1.0]])
    three = [np.array([[2.0]]), np.array([[0.0]]), np.array([[-1.0]])]
    np.testing.assert_allclose(combine(np.array([[0.5, 0.3, 0.2]]), three), [[0.8]], atol=1e-15)


def test_combined_prediction_rejects_mismatched_counts():
    t = Tape()
    with pytest.raises(ContractError):
        combined_prediction(t, t.constant(np.ones((1, 3)) / 3), [t.constant(np.ones((1, 2)))] * 2)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_combined_prediction_matches_loop(e, c, seed):
    rng = np.random.default_rng(seed)
    w = rng.dirichlet(np.ones(e), size=3)
    logits = [rng.normal(size=(3, c)) for _ in range(e)]
    expected = np.zeros((3, c))
    for i in range(e):
        expected += w[:, i:i + 1] * logits[i]
    np.testing.assert_allclose(combine(w, logits), expected, atol=1e-12)


def test_weights_on_simplex():
    w = make_model().infer(batch((5, 7), n=10))["weights"]
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)


def test_parameter_counts():
    cfg = ModelConfig(input_dims=(3,), output_dim=2, hidden_dim=2, num_layers_enc=1)
    assert InteractionMoE(cfg).parameter_count("enc0") == 8  # 3*2 + 2
    four = InteractionMoE(ModelConfig(input_dims=(3, 3), output_dim=2))
    one = InteractionMoE(ModelConfig(input_dims=(3, 3), output_dim=2, expert_kinds=("syn",)))
    assert four.expert_parameter_count() == 4 * one.expert_parameter_count()
    small = InteractionMoE(ModelConfig(input_dims=(3, 3), output_dim=2, hidden_dim=8))
    big = InteractionMoE(ModelConfig(input_dims=(3, 3), output_dim=2, hidden_dim=16))
    assert big.parameter_count("expert0.fus") >= 2 * small.parameter_count("expert0.fus")


def test_simple_weight_reweighter_has_one_parameter_per_expert():
    model = make_model(simple_weight=True)
    assert model.reweighter_parameter_count() == model.n_experts
    w = model.infer(batch((5, 7)))["weights"]
    np.testing.assert_allclose(w, np.broadcast_to(w[0], w.shape))


def test_inference_runs_no_masked_passes():
    model = make_model()
    t = Tape()
    model.predict(t, batch((5, 7)))
    assert t.counts["mask"] == 0
    assert t.counts["concat"] == model.n_experts + 1  # one per expert, one for the reweighter


def test_attention_variant_runs_and_checkpoints(tmp_path):
    model = make_model(num_heads=2, hidden_dim=8)
    out = model.infer(batch((5, 7)))
    assert out["prediction"].shape == (4, 2)
    model.save(tmp_path / "m.json")
    again = load_checkpoint(tmp_path / "m.json")
    np.testing.assert_array_equal(again.infer(batch((5, 7)))["prediction"], out["prediction"])


def test_checkpoint_round_trip_is_exact():
    model = make_model(seed=3)
    back = load_checkpoint_text(model.to_json())
    assert back.config == model.config
    for k, v in model.params.items():
        np.testing.assert_array_equal(back.params[k], v)


def test_checkpoint_errors(tmp_path):
    with pytest.raises(ContractError):
        load_checkpoint(tmp_path / "absent.json")
    text = make_model().to_json().replace('"format_version": 1', '"format_version": 99')
    with pytest.raises(ContractError):
        load_checkpoint_text(text)


def test_input_validation():
    model = make_model()
    with pytest.raises(InputError):
        model.infer(batch((5,)))
    with pytest.raises(InputError):
        model.infer(batch((5, 6)))


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(input_dims=(3, 3), output_dim=2, temperature_rw=0)
    with pytest.raises(ConfigError):
        ModelConfig(input_dims=(3, 3), output_dim=2, hidden_dim=6, num_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(input_dims=(3, 3), output_dim=2, activation="gelu")
    with pytest.raises(ConfigError):
        InteractionMoE(ModelConfig(input_dims=(3, 3), output_dim=2, expert_kinds=("uni3",)))


@pytest.mark.parametrize("style", ["early-fusion", "late-fusion"])
def test_fusion_baselines(style):
    cfg = ModelConfig(input_dims=(5, 7), output_dim=2)
    model = FusionBaseline(cfg, style, np.random.default_rng(0))
    out = model.infer(batch((5, 7)))["prediction"]
    assert out.shape == (4, 2)
    back = load_checkpoint_text(model.to_json())
    assert isinstance(back, FusionBaseline) and back.style == style
    np.testing.assert_array_equal(back.infer(batch((5, 7)))["prediction"], out)
