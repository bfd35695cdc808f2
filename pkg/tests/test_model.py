import numpy as np
import pytest

from replyrank.encoding import EncodedInput
from replyrank.model import (
    ModelConfig,
    NumericError,
    backward,
    embed,
    forward,
    forward_batch,
    init_params,
    load_checkpoint,
    param_shapes,
    save_checkpoint,
    score,
    stack_inputs,
    validate_params,
    zero_speaker_table,
)
from replyrank.tokenizer import CLS, PAD, SEP
from helpers import (
    combined_loss,
    combined_loss_grads,
    finite_difference_grads,
    gradcheck_setup,
    max_relative_error,
    random_encoded,
    tiny_model_config,
)


def simple_input(length=12, content=(7, 8, 9, 10), speakers=(1, 1, 2, 2)):
    tokens = [CLS, *content[:2], SEP, *content[2:], SEP]
    spk = [0, *speakers[:2], 0, *speakers[2:], 0]
    seg = [0, 0, 0, 0, 1, 1, 1]
    pad = length - len(tokens)
    return EncodedInput(
        token_ids=tuple(tokens + [PAD] * pad),
        segment_ids=tuple(seg + [0] * pad),
        position_ids=tuple(range(length)),
        speaker_ids=tuple(spk + [0] * pad),
        attention_mask=tuple([1] * len(tokens) + [0] * pad),
    )


class TestEmbed:
    def test_zero_tables_zero_output(self):
        config = tiny_model_config(vocab_size=16, max_seq_len=12)
        params = init_params(config)
        for name in ("token_table", "segment_table", "position_table", "speaker_table"):
            params[name][:] = 0.0
        out = embed(simple_input(), params, config)
        assert np.all(out == 0.0)

    def test_reserved_speaker_row(self):
        config = tiny_model_config(vocab_size=16, max_seq_len=12)
        params = init_params(config)
        enc = simple_input()
        baseline = embed(enc, params, config)
        # position 0 is [CLS] with speaker 0; the zero row contributes nothing
        expected = (
            params["token_table"][CLS]
            + params["segment_table"][0]
            + params["position_table"][0]
        )
        assert np.allclose(baseline[0], expected)

    def test_hand_computed_sum(self):
        config = ModelConfig(vocab_size=8, hidden_dim=4, num_layers=1, num_heads=1,
                             ffn_dim=4, max_seq_len=8, num_speaker_roles=3)
        params = init_params(config)
        for name in ("token_table", "segment_table", "position_table", "speaker_table"):
            params[name][:] = 0.0
        params["token_table"][7] = [1, 0, 0, 0]
        params["segment_table"][0] = [0, 2, 0, 0]
        params["position_table"][1] = [0, 0, 3, 0]
        params["speaker_table"][1] = [0, 0, 0, 4]
        enc = EncodedInput(
            token_ids=(CLS, 7, SEP, 7, SEP, PAD, PAD, PAD),
            segment_ids=(0, 0, 0, 1, 1, 0, 0, 0),
            position_ids=tuple(range(8)),
            speaker_ids=(0, 1, 0, 1, 0, 0, 0, 0),
            attention_mask=(1, 1, 1, 1, 1, 0, 0, 0),
        )
        out = embed(enc, params, config)
        assert np.allclose(out[1], [1, 2, 3, 4])

    def test_out_of_range_names_track(self):
        config = tiny_model_config(vocab_size=16, max_seq_len=12)
        params = init_params(config)
        enc = simple_input(content=(7, 8, 9, 15))
        bad = EncodedInput(
            token_ids=tuple(99 if t == 15 else t for t in enc.token_ids),
            segment_ids=enc.segment_ids,
            position_ids=enc.position_ids,
            speaker_ids=enc.speaker_ids,
            attention_mask=enc.attention_mask,
        )
        with pytest.raises(ValueError, match="token_ids"):
            embed(bad, params, config)


class TestForward:
    def test_deterministic(self):
        config = tiny_model_config(vocab_size=16, max_seq_len=12)
        params = init_params(config)
        enc = simple_input()
        a = forward(enc, params, config)
        b = forward(enc, params, config)
        assert a[0] == b[0]
        assert np.array_equal(a[1], b[1])
        assert np.array_equal(a[2], b[2])

    def test_padding_invariance_bitwise(self, rng):
        config = tiny_model_config(vocab_size=16, max_seq_len=16)
        params = init_params(config)
        enc = simple_input(length=16)
        live = [i for i, m in enumerate(enc.attention_mask) if m == 1]
        tampered_tokens = list(enc.token_ids)
        for i in range(len(enc.token_ids)):
            if enc.attention_mask[i] == 0:
                tampered_tokens[i] = int(rng.integers(0, config.vocab_size))
        tampered = EncodedInput(
            token_ids=tuple(tampered_tokens),
            segment_ids=enc.segment_ids,
            position_ids=enc.position_ids,
            speaker_ids=enc.speaker_ids,
            attention_mask=enc.attention_mask,
        )
        m1, mlm1, nsp1, _ = forward(enc, params, config)
        m2, mlm2, nsp2, _ = forward(tampered, params, config)
        assert m1 == m2
        assert np.array_equal(nsp1, nsp2)
        assert np.array_equal(mlm1[live], mlm2[live])

    def test_attention_rows_sum_to_one(self, rng):
        config = tiny_model_config(vocab_size=32, max_seq_len=32)
        params = init_params(config)
        batch = stack_inputs([random_encoded(rng, max_len=32) for _ in range(4)])
        _, _, _, trace = forward_batch(batch, params, config)
        for attn in trace.attention_weights:
            sums = attn.sum(axis=-1)
            assert np.all(np.abs(sums - 1.0) < 1e-6)
            # masked keys carry exactly zero weight
            key_mask = batch.attention_mask[:, None, None, :]
            assert np.all(attn * (1 - key_mask) == 0.0)

    def test_zero_match_head_gives_zero_logit(self, rng):
        config = tiny_model_config(vocab_size=32, max_seq_len=32)
        params = init_params(config)
        params["match_head.w"][:] = 0.0
        params["match_head.b"][:] = 0.0
        for _ in range(5):
            enc = random_encoded(rng, max_len=32)
            match_logit, _, _, _ = forward(enc, params, config)
            assert match_logit == 0.0

    def test_nonfinite_raises_with_layer_index(self):
        config = tiny_model_config(vocab_size=16, max_seq_len=12)
        params = init_params(config)
        params["layer1.ffn.w2"][:] = 1e308
        with np.errstate(all="ignore"), pytest.raises(NumericError, match="layer 1"):
            forward(simple_input(), params, config)

    def test_dropout_requires_rng_and_changes_output(self, rng):
        config = tiny_model_config(vocab_size=16, max_seq_len=12, dropout_rate=0.5)
        params = init_params(config)
        enc = simple_input()
        with pytest.raises(ValueError):
            forward_batch(stack_inputs([enc]), params, config)
        out1 = forward_batch(stack_inputs([enc]), params, config, rng=np.random.default_rng(0))
        out2 = forward_batch(stack_inputs([enc]), params, config, rng=np.random.default_rng(0))
        out3 = forward_batch(stack_inputs([enc]), params, config, rng=np.random.default_rng(1))
        assert out1[0][0] == out2[0][0]
        assert out1[0][0] != out3[0][0]


class TestScore:
    def test_sigmoid_of_zero(self):
        config = tiny_model_config(vocab_size=16, max_seq_len=12)
        params = init_params(config)
        params["match_head.w"][:] = 0.0
        params["match_head.b"][:] = 0.0
        assert score(simple_input(), params, config) == 0.5

    def test_large_logit_saturates_monotonically(self):
        config = tiny_model_config(vocab_size=16, max_seq_len=12)
        params = init_params(config)
        values = []
        for bias in (0.0, 2.0, 8.0, 30.0):
            params["match_head.b"][:] = bias
            values.append(score(simple_input(), params, config))
        assert values == sorted(values)
        assert values[-1] > 0.999999
        assert all(0.0 < v < 1.0 for v in values)

    def test_speaker_ids_change_score(self):
        config = tiny_model_config(vocab_size=16, max_seq_len=12)
        params = init_params(config, np.random.default_rng(3))
        a = simple_input(speakers=(1, 1, 2, 2))
        b = simple_input(speakers=(2, 2, 1, 1))
        assert score(a, params, config) != score(b, params, config)

    def test_speaker_ablation_identity(self):
        config = tiny_model_config(vocab_size=16, max_seq_len=12)
        params = init_params(config, np.random.default_rng(3))
        zero_speaker_table(params)
        a = simple_input(speakers=(1, 1, 2, 2))
        b = simple_input(speakers=(2, 2, 1, 1))
        la, _, _, _ = forward(a, params, config)
        lb, _, _, _ = forward(b, params, config)
        assert la == lb  # bitwise


class TestBackward:
    def test_zero_head_gradients_give_zero_param_gradients(self, rng):
        config = tiny_model_config(vocab_size=16, max_seq_len=12)
        params = init_params(config)
        batch = stack_inputs([simple_input()])
        _, mlm, nsp, trace = forward_batch(batch, params, config)
        grads = backward(trace, params, np.zeros(1), np.zeros((1, 2)), np.zeros_like(mlm))
        for name, grad in grads.items():
            assert np.all(grad == 0.0), name

    def test_gradients_match_finite_differences_small(self, rng):
        config = ModelConfig(vocab_size=12, hidden_dim=8, num_layers=1, num_heads=2,
                             ffn_dim=12, max_seq_len=10, num_speaker_roles=3, seed=5)
        params = init_params(config, np.random.default_rng(5))
        batch, mlm_targets, match_labels, nsp_labels = gradcheck_setup(config, np.random.default_rng(11), batch_size=1)
        analytic = combined_loss_grads(params, batch, config, mlm_targets, match_labels, nsp_labels)

        def loss_fn(p):
            return combined_loss(p, batch, config, mlm_targets, match_labels, nsp_labels)

        numeric = finite_difference_grads(loss_fn, params, eps=1e-4)
        for name in params:
            err = max_relative_error(analytic[name], numeric[name])
            assert err < 1e-4, "%s: %g" % (name, err)

    def test_incomplete_trace_rejected(self):
        config = tiny_model_config(vocab_size=16, max_seq_len=12)
        params = init_params(config)
        batch = stack_inputs([simple_input()])
        _, mlm, _, trace = forward_batch(batch, params, config)
        trace.final_hidden = None
        with pytest.raises(ValueError):
            backward(trace, params, np.zeros(1), np.zeros((1, 2)), np.zeros_like(mlm))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        config = tiny_model_config(vocab_size=16, max_seq_len=12)
        params = init_params(config)
        path = tmp_path / "model.npz"
        save_checkpoint(path, config, params)
        loaded_config, loaded_params = load_checkpoint(path)
        assert loaded_config == config
        for name, tensor in params.items():
            assert np.array_equal(loaded_params[name], tensor)

    def test_shape_validation(self):
        config = tiny_model_config(vocab_size=16, max_seq_len=12)
        params = init_params(config)
        params["match_head.w"] = np.zeros((3, 3))
        with pytest.raises(ValueError, match="match_head.w"):
            validate_params(config, params)

    def test_missing_key_detected(self):
        config = tiny_model_config(vocab_size=16, max_seq_len=12)
        params = init_params(config)
        del params["nsp_head.b"]
        with pytest.raises(ValueError, match="nsp_head.b"):
            validate_params(config, params)


class TestConfig:
    def test_head_divisibility(self):
        with pytest.raises(ValueError):
            ModelConfig(vocab_size=16, hidden_dim=10, num_heads=3)

    def test_speaker_role_floor(self):
        with pytest.raises(ValueError):
            ModelConfig(vocab_size=16, num_speaker_roles=2)

    def test_init_is_seeded(self):
        config = tiny_model_config(vocab_size=16)
        a = init_params(config, np.random.default_rng(9))
        b = init_params(config, np.random.default_rng(9))
        for name in a:
            assert np.array_equal(a[name], b[name])

    def test_param_shapes_cover_all_tensors(self):
        config = tiny_model_config(vocab_size=16)
        shapes = param_shapes(config)
        assert "layer0.attn.wq" in shapes and "layer1.ln_ffn.gain" in shapes
        assert shapes["mlm_head.w"] == (config.hidden_dim, config.vocab_size)
