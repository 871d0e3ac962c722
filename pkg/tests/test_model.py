import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cptp import diffcore as dc
from cptp.diffcore import DimensionError, Graph, Tensor
from cptp.model import (BaselineConfig, BaselineModel, CheckpointError, ConvFilters, DgnConfig, DgnModel,
                        LstmParams, VocabularyError, baseline_predict_total, bilstm_layer, conv_encode, dgn_encode,
                        embed_lookup, gate_layer, load_checkpoint, predict_charge_term, save_checkpoint)

SMALL = dict(vocab_size=20, charge_count=4, embed_dim=6, charge_dim=3, hidden_dim=5, filters=4,
             filter_widths=(1, 2, 3))


def small_dgn(**kw):
    model = DgnModel(DgnConfig(**{**SMALL, "depth": 2, **kw}))
    model.head_b.value[:] = 10.0  # keep the ReLU head active
    return model


def test_embed_lookup_example():
    table = Tensor(np.arange(6.0).reshape(3, 2))
    assert embed_lookup([[2, 0]], table).value.tolist() == [[[4.0, 5.0], [0.0, 1.0]]]
    with pytest.raises(VocabularyError):
        embed_lookup([[3]], table)


def scalar_lstm(xs, w_in, w_rec, b):
    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))
    h = c = 0.0
    out = []
    for x in xs:
        z = [x * w_in[k] + h * w_rec[k] + b[k] for k in range(4)]
        i, f, g, o = sig(z[0]), sig(z[1]), math.tanh(z[2]), sig(z[3])
        c = f * c + i * g
        h = o * math.tanh(c)
        out.append(h)
    return out


def test_bilstm_matches_scalar_hand_computation():
    fw = ([0.5, -0.3, 0.8, 0.2], [0.1, 0.4, -0.6, 0.3], [0.0, 1.0, 0.1, -0.2])
    bw = ([-0.2, 0.7, 0.3, 0.5], [0.2, -0.1, 0.9, 0.4], [0.3, 1.0, -0.1, 0.0])

    def params(p):
        return LstmParams(Tensor(np.array([p[0]])), Tensor(np.array([p[1]])), Tensor(np.array(p[2])))

    xs = [1.5, -0.7]
    out = bilstm_layer(Tensor(np.array(xs).reshape(1, 2, 1)), params(fw), params(bw)).value[0]
    left = scalar_lstm(xs, *fw)
    right = scalar_lstm(xs[::-1], *bw)[::-1]
    np.testing.assert_allclose(out[:, 0], left, rtol=1e-13)
    np.testing.assert_allclose(out[:, 1], right, rtol=1e-13)


def test_bilstm_zero_parameters_give_zero_states():
    zero = LstmParams(Tensor(np.zeros((3, 8))), Tensor(np.zeros((2, 8))), Tensor(np.zeros(8)))
    out = bilstm_layer(Tensor(np.ones((2, 4, 3))), zero, zero)
    assert out.shape == (2, 4, 4) and not out.value.any()


def test_bilstm_single_position_directions_agree_with_shared_weights():
    rng = np.random.default_rng(0)
    p = LstmParams.init(rng, 3, 2, "p")
    out = bilstm_layer(Tensor(rng.normal(size=(1, 1, 3))), p, p).value
    np.testing.assert_array_equal(out[..., :2], out[..., 2:])


def test_gate_examples():
    h = Tensor(np.array([[[2.0, -4.0]]]))
    c = Tensor(np.array([[1.0]]))
    half = gate_layer(h, c, Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)))
    assert half.value.tolist() == [[[1.0, -2.0]]]
    w = np.zeros((2, 3))
    w[:, 2] = 1000.0  # saturate the gate through the charge column only
    assert gate_layer(h, c, Tensor(w), Tensor(np.zeros(2))).value.tolist() == [[[2.0, -4.0]]]
    shut = gate_layer(h, Tensor(np.array([[-1.0]])), Tensor(w), Tensor(np.zeros(2)))
    assert np.all(np.abs(shut.value) < 1e-300)


@settings(deadline=None)
@given(st.integers(0, 10_000))
def test_gate_output_within_input_range(seed):
    rng = np.random.default_rng(seed)
    h = rng.normal(0, 3, size=(2, 3, 4))
    out = gate_layer(Tensor(h), Tensor(rng.normal(size=(2, 2))), Tensor(rng.normal(0, 3, (4, 6))),
                     Tensor(rng.normal(size=4))).value
    assert np.all(np.abs(out) <= np.abs(h))
    assert np.all(out * h >= 0)


def test_conv_encode_hand_example():
    filters = ConvFilters([Tensor(np.ones((1, 2)))], [Tensor(np.zeros(1))], (2,))
    h = Tensor(np.array([[[1.0], [2.0], [3.0]]]))
    assert conv_encode(h, filters).value.tolist() == [[5.0]]
    # the window covering the padded third position is excluded
    assert conv_encode(h, filters, np.array([[True, True, False]])).value.tolist() == [[3.0]]
    with pytest.raises(DimensionError):
        conv_encode(Tensor(np.ones((1, 1, 1))), filters)


def test_head_clamps_at_zero_and_passes_bias():
    model = small_dgn()
    model.head_w.value[:] = 0.0
    tokens = np.arange(2, 8)
    model.head_b.value[:] = -3.0
    assert predict_charge_term(tokens, 0, model) == 0.0
    model.head_b.value[:] = 7.0
    assert predict_charge_term(tokens, 1, model) == 7.0


def test_dgn_depth_one_is_the_composition():
    model = small_dgn(depth=1)
    tokens = np.array([[3, 4, 5, 6, 7]])
    blk = model.blocks[0]
    h = embed_lookup(tokens, model.word_emb)
    c = embed_lookup([2], model.charge_emb)
    manual = gate_layer(bilstm_layer(h, blk.fwd, blk.bwd), c, blk.gate_w, blk.gate_b)
    np.testing.assert_array_equal(dgn_encode(tokens, [2], model).value, manual.value)
    assert manual.shape == (1, 5, 2 * SMALL["hidden_dim"])


def test_dgn_rejects_bad_ids():
    model = small_dgn()
    with pytest.raises(VocabularyError):
        predict_charge_term(np.array([1, 2, 30, 4, 5]), 0, model)
    with pytest.raises(VocabularyError):
        predict_charge_term(np.array([1, 2, 3, 4, 5]), 9, model)


def test_charge_changes_prediction_unless_blind():
    tokens = np.array([2, 5, 7, 3, 9, 11, 4])
    model = small_dgn()
    preds = {predict_charge_term(tokens, c, model) for c in range(4)}
    assert len(preds) == 4
    blind = small_dgn(charge_blind=True)
    assert len({predict_charge_term(tokens, c, blind) for c in range(4)}) == 1


def test_token_order_matters():
    model = small_dgn()
    tokens = np.array([2, 5, 7, 3, 9, 11, 4])
    assert predict_charge_term(tokens, 1, model) != predict_charge_term(tokens[::-1], 1, model)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000), st.integers(5, 12), st.integers(1, 6))
def test_padding_and_batch_mates_do_not_change_prediction(seed, length, extra):
    rng = np.random.default_rng(seed)
    model = small_dgn(seed=seed % 7)
    tokens = rng.integers(2, 20, size=length)
    alone = predict_charge_term(tokens, 2, model)
    batch = rng.integers(0, 20, size=(3, length + extra))
    mask = np.ones(batch.shape, dtype=bool)
    batch[1, :length] = tokens
    batch[1, length:] = rng.integers(0, 20, size=extra)  # garbage under the mask
    mask[1, length:] = False
    out = predict_charge_term(batch, np.array([0, 2, 3]), model, mask)
    assert out[1] == alone


def test_every_parameter_receives_gradient():
    model = small_dgn()
    tokens = np.random.default_rng(1).integers(2, 20, size=(3, 8))
    params = model.parameters()
    with Graph() as g:
        loss = dc.sum_all(model.forward(tokens, np.ones_like(tokens, dtype=bool), np.array([0, 1, 2])))
    grads = dc.backward(g, loss, params)
    dead = [p.name for p, gr in zip(params, grads) if not np.any(gr)]
    assert dead == []
    assert len({p.name for p in params}) == len(params)


def test_baseline_representation_sizes():
    tokens = np.array([[3, 4, 5, 6, 7, 0]])
    mask = tokens > 0
    for kind, size in (("cnn", 12), ("rnn", 10), ("rcnn", 12)):
        model = BaselineModel(BaselineConfig(kind=kind, **SMALL))
        assert model.represent(tokens, mask).shape == (1, size)
        aware = BaselineModel(BaselineConfig(kind=kind, charge_aware=True, **SMALL))
        assert aware.represent(tokens, mask, [1]).shape == (1, size + SMALL["charge_dim"])


def test_rnn_baseline_uses_final_directional_states():
    model = BaselineModel(BaselineConfig(kind="rnn", **SMALL))
    tokens = np.array([[3, 4, 5, 6, 7, 0, 0]])
    mask = tokens > 0
    states = bilstm_layer(embed_lookup(tokens[:, :5], model.word_emb), *model.lstm).value[0]
    d = SMALL["hidden_dim"]
    expected = np.concatenate([states[4, :d], states[0, d:]])
    np.testing.assert_array_equal(model.represent(tokens, mask).value[0], expected)


def test_cnn_baseline_is_conv_over_embeddings():
    model = BaselineModel(BaselineConfig(kind="cnn", **SMALL))
    tokens = np.array([[3, 4, 5, 6]])
    expected = conv_encode(embed_lookup(tokens, model.word_emb), model.conv).value
    np.testing.assert_array_equal(model.represent(tokens).value, expected)
    model.head_b.value[:] = 4.0
    assert baseline_predict_total(tokens[0], model) > 0


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    model = small_dgn(seed=3)
    model.word_emb.value += 0.125
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    back = load_checkpoint(path, expected_config=model.config)
    for a, b in zip(model.parameters(), back.parameters()):
        np.testing.assert_array_equal(a.value, b.value)
    tokens = np.array([2, 5, 7, 3, 9])
    assert predict_charge_term(tokens, 1, model) == predict_charge_term(tokens, 1, back)


def test_checkpoint_rejects_mismatch_and_garbage(tmp_path):
    model = small_dgn()
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expected_config=DgnConfig(**{**SMALL, "depth": 3}))
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a model at all")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)


def test_baseline_checkpoint_round_trip(tmp_path):
    model = BaselineModel(BaselineConfig(kind="rcnn", charge_aware=True, **SMALL))
    save_checkpoint(model, tmp_path / "b.ckpt")
    back = load_checkpoint(tmp_path / "b.ckpt")
    assert back.config == model.config
    tokens = np.array([2, 5, 7, 3, 9])
    assert baseline_predict_total(tokens, back, charge_id=1) == baseline_predict_total(tokens, model, charge_id=1)


@pytest.mark.parametrize("kw", [{"depth": 0}, {"filter_widths": (2, 1)}, {"hidden_dim": 0}])
def test_invalid_configs(kw):
    with pytest.raises(ValueError):
        DgnConfig(**{**SMALL, **kw})
