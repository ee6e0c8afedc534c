import numpy as np
import pytest

from memground import autodiff as ad
from memground.autodiff import Tensor
from memground.encoders import (AttentionParams, BiLSTMParams, EncoderParams,
                                LSTMParams, bilstm, encode_query, encode_video,
                                lstm_sequence, self_attention)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


class TestSelfAttention:
    def test_single_position_weight_is_one(self, rng):
        p = AttentionParams.build(rng, 4)
        x = Tensor(rng.standard_normal((1, 4)))
        out, weights = self_attention(x, p, return_weights=True)
        assert weights.values[0, 0] == pytest.approx(1.0)
        assert np.allclose(out.values, (x @ p.wv).values)

    def test_identical_rows_give_identical_outputs(self, rng):
        p = AttentionParams.build(rng, 5)
        row = rng.standard_normal((1, 5))
        x = Tensor(np.repeat(row, 4, axis=0))
        out = self_attention(x, p)
        assert np.allclose(out.values, out.values[0], atol=1e-12)

    def test_weight_rows_sum_to_one(self, rng):
        p = AttentionParams.build(rng, 8)
        x = Tensor(rng.standard_normal((4, 8)))
        _, weights = self_attention(x, p, return_weights=True)
        assert np.allclose(weights.values.sum(axis=1), 1.0, atol=1e-9)

    def test_output_shape_matches_input(self, rng):
        p = AttentionParams.build(rng, 6)
        for s in (1, 3, 9):
            out = self_attention(Tensor(rng.standard_normal((s, 6))), p)
            assert out.shape == (s, 6)


class TestBiLSTM:
    def test_zero_params_give_zero_output(self, rng):
        p = BiLSTMParams.build(rng, 3, 2)
        for lstm_p in (p.fwd, p.bwd):
            lstm_p.w_in.values[...] = 0.0
            lstm_p.w_rec.values[...] = 0.0
            lstm_p.bias.values[...] = 0.0
        out = bilstm(Tensor(rng.standard_normal((5, 3))), p)
        assert np.all(out.values == 0.0)

    def test_single_step_concat_of_two_cells(self, rng):
        p = BiLSTMParams.build(rng, 3, 2)
        x = Tensor(rng.standard_normal((1, 3)))
        out = bilstm(x, p)
        fwd = lstm_sequence(x @ p.fwd.w_in + p.fwd.bias, p.fwd.w_rec, False)
        bwd = lstm_sequence(x @ p.bwd.w_in + p.bwd.bias, p.bwd.w_rec, True)
        assert out.shape == (1, 4)
        assert np.allclose(out.values, np.concatenate([fwd.values, bwd.values], axis=1))

    def test_three_step_hand_recurrence(self, rng):
        """Scalar-gate oracle: replay the documented recurrence step by step
        with plain floats (gate order input, forget, output, cell)."""
        p = LSTMParams.build(rng, 2, 1)
        x = rng.standard_normal((3, 2))
        out = lstm_sequence(Tensor(x) @ p.w_in + p.bias, p.w_rec, reverse=False)

        def sig(v):
            return 1.0 / (1.0 + np.exp(-v))

        w, u, b = p.w_in.values, p.w_rec.values, p.bias.values
        h = c = 0.0
        for t in range(3):
            a = x[t] @ w + b[0] + h * u[0]
            i, f, o, g = sig(a[0]), sig(a[1]), sig(a[2]), np.tanh(a[3])
            c = f * c + i * g
            h = o * np.tanh(c)
            assert out.values[t, 0] == pytest.approx(h, abs=1e-12)

    def test_reverse_direction_mirrors_reversed_input(self, rng):
        p = LSTMParams.build(rng, 2, 2)
        x = rng.standard_normal((4, 2))
        rev = lstm_sequence(Tensor(x) @ p.w_in + p.bias, p.w_rec, reverse=True)
        fwd_flip = lstm_sequence(Tensor(x[::-1].copy()) @ p.w_in + p.bias,
                                 p.w_rec, reverse=False)
        assert np.allclose(rev.values, fwd_flip.values[::-1], atol=1e-12)

    def test_gradients(self, rng):
        p = BiLSTMParams.build(rng, 3, 2)
        x = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        params = [x, p.fwd.w_in, p.fwd.w_rec, p.fwd.bias,
                  p.bwd.w_in, p.bwd.w_rec, p.bwd.bias]
        assert ad.grad_check(lambda: bilstm(x, p).sum(), params, h=1e-4) <= 1e-4


class TestEncoders:
    def test_shapes(self, rng):
        p = EncoderParams.build(rng, vocab_size=11, d_raw=5, d_model=6)
        assert encode_video(rng.standard_normal((1, 5)), p).shape == (1, 6)
        assert encode_video(rng.standard_normal((7, 5)), p).shape == (7, 6)
        assert encode_query([0, 3, 10], p).shape == (3, 6)

    def test_identical_queries_encode_identically(self, rng):
        p = EncoderParams.build(rng, vocab_size=9, d_raw=4, d_model=4)
        a = encode_query([1, 4, 2], p)
        b = encode_query([1, 4, 2], p)
        assert np.array_equal(a.values, b.values)

    def test_out_of_vocabulary_rejected(self, rng):
        p = EncoderParams.build(rng, vocab_size=5, d_raw=4, d_model=4)
        with pytest.raises(ValueError):
            encode_query([0, 5], p)

    def test_odd_width_rejected(self, rng):
        with pytest.raises(ValueError):
            EncoderParams.build(rng, vocab_size=5, d_raw=4, d_model=5)

    def test_encode_query_gradients(self, rng):
        p = EncoderParams.build(rng, vocab_size=7, d_raw=4, d_model=4)
        params = [p.embed_table, p.query_attn.wq, p.query_attn.wk,
                  p.query_attn.wv, p.query_lstm.fwd.w_in, p.query_lstm.fwd.w_rec,
                  p.query_lstm.fwd.bias, p.query_lstm.bwd.w_in,
                  p.query_lstm.bwd.w_rec, p.query_lstm.bwd.bias]
        err = ad.grad_check(lambda: encode_query([0, 3, 6], p).sum(), params, h=1e-3)
        assert err <= 1e-4

    def test_encode_video_gradients(self, rng):
        p = EncoderParams.build(rng, vocab_size=7, d_raw=3, d_model=4)
        frames = rng.standard_normal((3, 3))
        params = [p.frame_proj, p.video_attn.wq, p.video_attn.wk, p.video_attn.wv,
                  p.video_lstm.fwd.w_in, p.video_lstm.fwd.w_rec, p.video_lstm.fwd.bias,
                  p.video_lstm.bwd.w_in, p.video_lstm.bwd.w_rec, p.video_lstm.bwd.bias]
        err = ad.grad_check(lambda: encode_video(frames, p).sum(), params, h=1e-3)
        assert err <= 1e-4
