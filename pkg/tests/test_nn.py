import numpy as np
import pytest

from conftest import max_rel_error, numeric_grad
from distillkit.autograd import ShapeError, Tensor
from distillkit.nn import (Conv, MaxPool, NetworkSpec, ResidualBlock, SpecError, build, embed, forward,
                           load_params, predict, preset, save_params)


def small_spec(**kw):
    base = dict(input_shape=(1, 8, 8), blocks=(Conv(4), MaxPool(2), Conv(4)), embedding_dim=6, num_classes=3)
    base.update(kw)
    return NetworkSpec(**base)


def test_build_is_deterministic():
    spec = preset("plain-small")
    a, b = build(spec, 7), build(spec, 7)
    assert a.equals(b)
    assert not a.equals(build(spec, 8))


def test_conv_weight_shape_rule():
    params = build(NetworkSpec((1, 8, 8), (Conv(4, kernel=3),)), 0)
    assert params["block0.conv.weight"].shape == (4, 1, 3, 3)
    assert np.all(params["block0.conv.bias"].data == 0)


def test_initializer_mean_is_centred():
    params = build(preset("plain-small"), 3)
    w = np.concatenate([t.data.ravel() for name, t in params.items() if name.endswith("weight")])
    assert w.size >= 10_000
    # each layer has its own std, so use the pooled standard error
    se = np.sqrt(np.sum([t.data.size * t.data.var() for n, t in params.items() if n.endswith("weight")])) / w.size
    assert abs(w.mean()) < 3 * se


def test_he_scale_per_layer():
    params = build(preset("plain-small"), 0)
    w = params["embed.weight"].data
    assert abs(w.std() - np.sqrt(2.0 / w.shape[0])) < 0.05 * np.sqrt(2.0 / w.shape[0])


@pytest.mark.parametrize("bad,idx", [
    ((Conv(4), MaxPool(3)), 1),
    ((Conv(4, kernel=2),), 0),
    ((Conv(4), Conv(0)), 1),
])
def test_invalid_spec_names_block(bad, idx):
    with pytest.raises(SpecError, match=f"block {idx}"):
        build(NetworkSpec((1, 8, 8), bad), 0)


def test_unknown_block_type_in_dict():
    d = small_spec().to_dict()
    d["blocks"][1]["type"] = "dropout"
    with pytest.raises(SpecError, match="block 1"):
        NetworkSpec.from_dict(d)


def test_spec_dict_round_trip():
    for spec in (small_spec(), preset("residual-small", head="regressor")):
        assert NetworkSpec.from_dict(spec.to_dict()) == spec


def test_zero_head_gives_uniform_prediction():
    spec = small_spec()
    params = build(spec, 0)
    for name in ("head.weight", "head.bias"):
        params[name].data = np.zeros(params[name].shape)
    out = forward(params, spec, np.zeros((2, 1, 8, 8)))
    np.testing.assert_array_equal(out.logits.data, 0.0)
    np.testing.assert_allclose(out.prediction.data, 1 / 3)


def test_batch_dimension_and_output_shapes():
    spec = small_spec()
    out = forward(build(spec, 0), spec, np.random.default_rng(0).random((3, 1, 8, 8)))
    assert out.logits.shape == (3, 3)
    assert out.embedding.shape == (3, spec.embedding_dim)
    assert out.hint is out.embedding
    assert len(out.features) == 3


def test_prediction_rows_are_distributions():
    spec = preset("plain-small")
    out = forward(build(spec, 1), spec, np.random.default_rng(1).random((5, 1, 16, 16)))
    assert np.all(np.abs(out.prediction.data.sum(axis=1) - 1.0) <= 1e-9)


def test_hint_block_selects_feature_map():
    spec = small_spec(hint_block_index=1)
    out = forward(build(spec, 0), spec, np.ones((2, 1, 8, 8)))
    assert out.hint.shape == (2, 4, 4, 4)
    with pytest.raises(SpecError):
        build(small_spec(hint_block_index=3), 0)


def test_regressor_head_outputs_scalars():
    spec = preset("plain-small", head="regressor")
    out = forward(build(spec, 0), spec, np.ones((4, 16, 16)))
    assert out.prediction.shape == (4,)
    assert predict(build(spec, 0), spec, np.ones((4, 16, 16))).shape == (4,)


def test_shape_mismatch_rejected():
    spec = small_spec()
    with pytest.raises(ShapeError):
        forward(build(spec, 0), spec, np.ones((2, 1, 9, 8)))


def test_teacher_and_student_shapes_agree():
    spec = preset("residual-small")
    t, s = build(spec, 0, role="teacher"), build(spec, 1, role="student")
    assert {k: v.shape for k, v in t.items()} == {k: v.shape for k, v in s.items()}


def test_residual_with_zero_branch_is_identity():
    res = NetworkSpec((3, 6, 6), (ResidualBlock(3), ResidualBlock(3)), embedding_dim=5, num_classes=3,
                      pooling="global_avg")
    bare = NetworkSpec((3, 6, 6), (), embedding_dim=5, num_classes=3, pooling="global_avg")
    p_res, p_bare = build(res, 0), build(bare, 0)
    for name, t in p_res.items():
        if name.startswith("block"):
            t.data = np.zeros(t.shape)
    for name in ("embed.weight", "embed.bias", "head.weight", "head.bias"):
        p_res[name].data = p_bare[name].data.copy()
    x = np.random.default_rng(0).random((4, 3, 6, 6))  # non-negative, so the block relu is the identity
    np.testing.assert_array_equal(forward(p_res, res, x).logits.data, forward(p_bare, bare, x).logits.data)


def test_residual_projection_inserted_on_channel_change():
    params = build(preset("residual-small"), 0)
    assert "block0.proj.weight" in params.tensors
    assert "block4.proj.weight" not in params.tensors


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    spec = preset("residual-small")
    params = build(spec, 5, role="student")
    params["embed.weight"].data[0, 0] = 1 / 3  # a value with a long binary expansion
    save_params(params, tmp_path / "p.json", spec, extra={"note": "x"})
    loaded, spec2 = load_params(tmp_path / "p.json")
    assert spec2 == spec and loaded.role == "student"
    assert all(loaded[k].data.tobytes() == params[k].data.tobytes() for k in params)


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "x.json").write_text('{"format": "other"}')
    with pytest.raises(ValueError, match="checkpoint"):
        load_params(tmp_path / "x.json")


def test_embedding_extraction_is_deterministic():
    spec = preset("plain-small")
    params = build(spec, 0)
    x = np.random.default_rng(0).random((5, 16, 16))
    x[3] = x[1]
    e1, e2 = embed(params, spec, x), embed(params, spec, x, batch_size=2)
    assert e1.shape == (5, 64)
    assert e1.tobytes() == embed(params, spec, x).tobytes()
    np.testing.assert_array_equal(e1[3], e1[1])
    np.testing.assert_allclose(e1, e2, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("first", [Conv(2), ResidualBlock(2)])
def test_network_gradient_matches_finite_differences(first):
    from distillkit.losses import cross_entropy

    spec = NetworkSpec((1, 4, 4), (first, MaxPool(2)), embedding_dim=5, num_classes=3)
    params = build(spec, 2)
    x = np.random.default_rng(2).random((2, 1, 4, 4))
    target = np.array([0, 2])

    def loss_value(p):
        return cross_entropy(forward(p, spec, x).logits, target)

    loss_value(params).backward()
    checked = 0
    for key in ("block0.conv.weight", "block0.conv1.weight", "block0.proj.weight", "embed.weight", "head.bias"):
        if key not in params.tensors:
            continue

        def f(v, key=key):
            q = params.copy(requires_grad=False)
            q[key].data = v
            return loss_value(q).item()

        assert max_rel_error(params[key].grad, numeric_grad(f, params[key].data.copy())) <= 1e-3
        checked += 1
    assert checked >= 3
