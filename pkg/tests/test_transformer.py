import numpy as np
import pytest

from conftest import fd_check, randomize_routing, tiny_model
from lexgen import autodiff as ad
from lexgen.data import BOS_ID, PAD_ID, Vocab, LexiconEntry
from lexgen.errors import ConfigError, ShapeError
from lexgen.transformer import ModelConfig, Transformer, prepare_source, sinusoidal_positions


def _batch(rng, v=12, b=3, s=5, t=4):
    src = rng.integers(4, v, size=(b, s))
    tgt_out = rng.integers(4, v, size=(b, t))
    tgt_in = np.concatenate([np.full((b, 1), BOS_ID), tgt_out[:, :-1]], axis=1)
    return src, tgt_in, tgt_out


def _logits(model, src, tgt_in):
    with ad.no_grad():
        enc, mask = model.encode_batch(src)
        return model.decode_batch(tgt_in, enc, mask).data


def test_decoder_is_causal():
    rng = np.random.default_rng(0)
    model = tiny_model()
    src, tgt_in, _ = _batch(rng)
    base = _logits(model, src, tgt_in)
    changed = tgt_in.copy()
    changed[:, 2:] = rng.integers(4, 12, size=changed[:, 2:].shape)
    np.testing.assert_allclose(_logits(model, src, changed)[:, :2], base[:, :2], atol=1e-12)


def test_source_padding_is_ignored():
    rng = np.random.default_rng(1)
    model = tiny_model()
    src, tgt_in, _ = _batch(rng, b=1)
    padded = np.concatenate([src, np.full((1, 3), PAD_ID)], axis=1)
    np.testing.assert_allclose(_logits(model, padded, tgt_in), _logits(model, src, tgt_in), atol=1e-10)


def test_batch_permutation_equivariance():
    rng = np.random.default_rng(2)
    model = tiny_model()
    src, tgt_in, _ = _batch(rng, b=4)
    perm = np.array([2, 0, 3, 1])
    np.testing.assert_allclose(_logits(model, src[perm], tgt_in[perm]), _logits(model, src, tgt_in)[perm], atol=1e-12)


def test_incremental_steps_replay_teacher_forcing():
    rng = np.random.default_rng(3)
    model = tiny_model()
    src, tgt_in, _ = _batch(rng, b=1)
    full = _logits(model, src, tgt_in)[0]
    enc = model.encode(src[0])
    for k in range(1, tgt_in.shape[1] + 1):
        step = model.decode_step(tgt_in[0, :k], enc).data
        np.testing.assert_allclose(step[-1], full[k - 1], atol=1e-10)
        lp = model.next_log_probs(enc, [tuple(tgt_in[0, 1:k])])[0]
        ref = full[k - 1] - np.log(np.exp(full[k - 1] - full[k - 1].max()).sum()) - full[k - 1].max()
        np.testing.assert_allclose(lp, ref, atol=1e-10)


def test_initial_loss_is_close_to_log_vocab():
    rng = np.random.default_rng(4)
    model = tiny_model(d=16, vocab_size=40, dtype="float32")
    src, tgt_in, tgt_out = _batch(rng, v=40, b=8)
    loss = model.loss(src, tgt_in, tgt_out, label_smoothing=0.1).item()
    assert loss == pytest.approx(np.log(40), abs=0.15)


@pytest.mark.parametrize("position", ["after_san", "after_can", "shared_only", "none"])
def test_model_gradients_match_finite_differences(position):
    rng = np.random.default_rng(5)
    model = tiny_model(position)
    randomize_routing(model, rng)
    src, tgt_in, tgt_out = _batch(rng)
    errs = fd_check(lambda: model.loss(src, tgt_in, tgt_out, 0.1), model.named_parameters(), rng, n_coords=4)
    assert max(errs.values()) < 1e-4, {k: v for k, v in errs.items() if v >= 1e-4}


def test_pre_norm_gradients_match_finite_differences():
    rng = np.random.default_rng(6)
    model = tiny_model(pre_norm=True)
    randomize_routing(model, rng)
    assert "enc.ln_f.g" in model.named_parameters()
    src, tgt_in, tgt_out = _batch(rng)
    errs = fd_check(lambda: model.loss(src, tgt_in, tgt_out, 0.1), model.named_parameters(), rng, n_coords=4)
    assert max(errs.values()) < 1e-4


def test_routing_parameters_are_shared_across_blocks():
    model = tiny_model("after_san", n_dec_layers=3)
    dr_names = [n for n in model.named_parameters() if n.startswith("dr.")]
    assert sorted(dr_names) == ["dr.b", "dr.w1", "dr.w2", "dr.w_dom", "dr.w_shared"]
    trace = model.gate_trace([4, 5, 6, 3], [BOS_ID, 7, 8])
    assert [(r["block"], r["site"]) for r in trace] == [(0, "san"), (1, "san"), (2, "san")]
    assert all(r["gate"].shape == (1, 3) for r in trace)


def test_none_mode_is_a_plain_transformer():
    plain = tiny_model("none")
    assert not any(n.startswith("dr.") for n in plain.named_parameters())
    routed = tiny_model("after_san")
    backbone = {n for n in routed.named_parameters() if not n.startswith("dr.")}
    assert backbone == set(plain.named_parameters())
    for n in backbone:
        np.testing.assert_array_equal(routed.named_parameters()[n].data, plain.named_parameters()[n].data)


def test_after_san_and_after_can_differ():
    rng = np.random.default_rng(7)
    san, can = tiny_model("after_san"), tiny_model("after_can")
    randomize_routing(san, np.random.default_rng(8))
    randomize_routing(can, np.random.default_rng(8))
    src, tgt_in, _ = _batch(rng)
    assert np.abs(_logits(san, src, tgt_in) - _logits(can, src, tgt_in)).max() > 1e-6


def test_from_tensors_rejects_mismatched_parameter_sets():
    shared = tiny_model("shared_only")
    with pytest.raises(ConfigError, match="parameter-set mismatch"):
        Transformer.from_tensors(tiny_model("after_san").config, shared.state_dict())
    rebuilt = Transformer.from_tensors(shared.config, shared.state_dict())
    for k, v in shared.state_dict().items():
        np.testing.assert_array_equal(rebuilt.state_dict()[k], v)


def test_sinusoidal_positions_interleave_sin_and_cos():
    pe = sinusoidal_positions(5, 8)
    pos, i = 3, 2
    angle = pos / 10000 ** (2 * i / 8)
    assert pe[pos, 2 * i] == pytest.approx(np.sin(angle), rel=1e-6)
    assert pe[pos, 2 * i + 1] == pytest.approx(np.cos(angle), rel=1e-6)


def test_positions_beyond_max_len_rejected():
    with pytest.raises((ConfigError, ShapeError)):
        sinusoidal_positions(10, 8, max_len=4)


def test_prepare_source_prefixes_language_tag_and_appends_eos():
    e = LexiconEntry("bio", "en", "hi", "cell", ("कोशिका",))
    vocab = Vocab.build([e])
    ids = prepare_source("hi", "cell", vocab)
    assert vocab.tokens[ids[0]] == "<2hi>" and vocab.tokens[ids[-1]] == "<eos>"
    assert [vocab.tokens[i] for i in ids[1:-1]] == list("cell")


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig.toy(d_model=10, n_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"d_model": 8, "bogus": 1})
    with pytest.raises(ConfigError):
        Transformer.init(ModelConfig.toy(), 0)
    assert ModelConfig.paper_scale().d_model == 1536
