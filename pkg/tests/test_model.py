"""Seq2seq model tests: initialization, encoding, adaptation modes,
sentence losses, and parameter accounting."""

import math

import numpy as np
import pytest

from spknmt import autodiff as ad
from spknmt.autodiff import Tape, Tensor
from spknmt.data import EOS_ID, PAD_ID
from spknmt.model import (
    ModelConfig,
    Seq2SeqModel,
    UnknownSpeakerError,
    count_params,
    fact_vs_full_reduction,
    param_shapes,
)


def toy_config(mode="base", **kw):
    defaults = dict(
        src_vocab_size=12,
        trg_vocab_size=12,
        n_speakers=3,
        mode=mode,
        d_emb=8,
        d_h=8,
        d_a=4,
        rank=2,
        lstm_dropout=0.0,
        output_dropout=0.0,
        word_dropout=0.0,
        seed=7,
    )
    defaults.update(kw)
    return ModelConfig(**defaults)


class TestInit:
    def test_same_seed_bit_identical(self):
        a, b = Seq2SeqModel(toy_config()), Seq2SeqModel(toy_config())
        for name, p in a.named_parameters().items():
            np.testing.assert_array_equal(p.data, b.params[name].data)

    def test_full_bias_starts_at_zero(self):
        m = Seq2SeqModel(toy_config("full_bias"))
        assert not m.params["speaker_bias"].data.any()

    def test_fact_bias_basis_zero_mix_random(self):
        m = Seq2SeqModel(toy_config("fact_bias"))
        assert not m.params["bias_basis"].data.any()
        assert m.params["speaker_mix"].data.any()

    def test_embedding_distribution_at_full_scale(self):
        # law of large numbers on a 40k x 512 table: std within 5% of 1/sqrt(512)
        cfg = ModelConfig(
            src_vocab_size=40_000, trg_vocab_size=40_000, n_speakers=1,
            lstm_dropout=0.0, output_dropout=0.0, seed=1,
        )
        m = Seq2SeqModel(cfg)
        table = m.params["trg_embed"].data
        target = 1.0 / math.sqrt(512)
        assert abs(table.mean()) < 0.001
        assert abs(table.std() - target) / target < 0.05

    def test_weight_tying_is_one_parameter(self):
        # the softmax weight IS the target embedding table
        m = Seq2SeqModel(toy_config())
        assert m.params["trg_embed"] is m.named_parameters()["trg_embed"]
        tape = Tape()
        enc, proj = m.encode_batch(tape, np.array([[4, 5]]))
        step = m.decode_step_batch(tape, np.array([1]), m.init_state(1), enc, proj, np.array([-1]))
        tape.backward(ad.smoothed_nll(step.log_probs, [5], eps=0.0))
        assert m.params["trg_embed"].grad.any()

    def test_invalid_mode_rejected(self):
        with pytest.raises(ValueError):
            toy_config("bias_full")


class TestEncode:
    def test_single_position_shape(self):
        m = Seq2SeqModel(toy_config())
        out = m.encode(None, [5])
        assert out.shape == (1, 16)

    def test_zero_parameters_give_zero_states(self):
        m = Seq2SeqModel(toy_config())
        for p in m.parameters():
            p.data[...] = 0.0
        out = m.encode(None, [3, 4, 5])
        np.testing.assert_allclose(out.data, 0.0)

    def test_palindrome_symmetry_with_shared_directions(self):
        """With backward params tied to forward ones and a palindromic
        input, position i's forward state equals position S-1-i's backward
        state."""
        m = Seq2SeqModel(toy_config())
        m.params["enc_bw.w"].data[...] = m.params["enc_fw.w"].data
        m.params["enc_bw.b"].data[...] = m.params["enc_fw.b"].data
        out = m.encode(None, [4, 9, 4]).data
        d = m.config.d_h
        for i in range(3):
            np.testing.assert_allclose(out[i, :d], out[2 - i, d:], rtol=1e-5, atol=1e-7)

    def test_empty_source_rejected(self):
        m = Seq2SeqModel(toy_config())
        with pytest.raises(ValueError):
            m.encode(None, [])


class TestSpeakerBias:
    def test_base_and_token_modes_are_zero(self):
        for mode in ("base", "spk_token"):
            m = Seq2SeqModel(toy_config(mode))
            np.testing.assert_allclose(m.speaker_bias(0).data, 0.0)

    def test_one_hot_mix_selects_basis_row(self):
        m = Seq2SeqModel(toy_config("fact_bias"))
        m.params["speaker_mix"].data[...] = 0.0
        m.params["speaker_mix"].data[1, 1] = 1.0
        m.params["bias_basis"].data[...] = np.arange(24.0).reshape(2, 12)
        np.testing.assert_allclose(m.speaker_bias(1).data, np.arange(12.0, 24.0), rtol=1e-6)

    def test_zero_mix_gives_zero_bias(self):
        m = Seq2SeqModel(toy_config("fact_bias"))
        m.params["speaker_mix"].data[0] = 0.0
        m.params["bias_basis"].data[...] = 1.0
        np.testing.assert_allclose(m.speaker_bias(0).data, 0.0)

    def test_mix_is_linear(self):
        m = Seq2SeqModel(toy_config("fact_bias"))
        rng = np.random.default_rng(0)
        m.params["bias_basis"].data[...] = rng.normal(size=(2, 12))
        m.params["speaker_mix"].data[2] = [1.0, 1.0]
        expect = m.params["bias_basis"].data.sum(axis=0)
        np.testing.assert_allclose(m.speaker_bias(2).data, expect, rtol=1e-5)

    def test_index_out_of_range(self):
        m = Seq2SeqModel(toy_config("full_bias"))
        with pytest.raises(IndexError):
            m.speaker_bias(3)

    def test_rank_bound_of_stacked_biases(self):
        cfg = toy_config("fact_bias", n_speakers=8, rank=2)
        m = Seq2SeqModel(cfg)
        rng = np.random.default_rng(1)
        m.params["speaker_mix"].data[...] = rng.normal(size=(8, 2))
        m.params["bias_basis"].data[...] = rng.normal(size=(2, 12))
        stacked = np.stack([m.speaker_bias(s).data for s in range(8)])
        sv = np.linalg.svd(stacked, compute_uv=False)
        assert (sv[2:] < 1e-6 * sv[0]).all()


class TestDecodeStep:
    def setup_method(self):
        self.src = np.array([[4, 5, 6]])

    def run_step(self, m, speaker):
        enc, proj = m.encode_batch(None, self.src)
        return m.decode_step_batch(
            None, np.array([1]), m.init_state(1), enc, proj, np.array([speaker])
        )

    def test_base_ignores_speaker(self):
        m = Seq2SeqModel(toy_config())
        a = self.run_step(m, 0).log_probs.data
        b = self.run_step(m, 2).log_probs.data
        np.testing.assert_array_equal(a, b)

    def test_zero_bias_matches_base(self):
        base = Seq2SeqModel(toy_config("base"))
        for mode in ("full_bias", "fact_bias"):
            adapted = Seq2SeqModel(toy_config(mode))
            a = self.run_step(base, 0).log_probs.data
            b = self.run_step(adapted, 1).log_probs.data
            np.testing.assert_allclose(a, b, atol=1e-7)

    def test_positive_bias_raises_token_probability(self):
        base = Seq2SeqModel(toy_config("base"))
        bumped = Seq2SeqModel(toy_config("full_bias"))
        bumped.params["speaker_bias"].data[1, 7] = 10.0
        p_base = np.exp(self.run_step(base, 0).log_probs.data[0])
        p_bump = np.exp(self.run_step(bumped, 1).log_probs.data[0])
        assert p_bump[7] > p_base[7]
        others = np.arange(12) != 7
        assert (p_bump[others] < p_base[others]).all()

    def test_argmax_monotone_in_own_logit(self):
        # softmax is monotone in each coordinate's own logit
        m = Seq2SeqModel(toy_config("full_bias"))
        probs = []
        for bump in (0.0, 0.5, 1.0, 5.0):
            m.params["speaker_bias"].data[...] = 0.0
            m.params["speaker_bias"].data[0, 3] = bump
            probs.append(np.exp(self.run_step(m, 0).log_probs.data[0, 3]))
        assert all(b > a for a, b in zip(probs, probs[1:]))

    def test_unknown_speaker_default_fallback(self):
        m = Seq2SeqModel(toy_config("full_bias"))
        m.params["speaker_bias"].data[...] = 5.0
        res = self.run_step(m, -1)
        assert res.unknown_speaker
        base_like = self.run_step(Seq2SeqModel(toy_config("base")), 0)
        np.testing.assert_allclose(res.log_probs.data, base_like.log_probs.data, atol=1e-7)

    def test_unknown_speaker_strict_raises(self):
        m = Seq2SeqModel(toy_config("full_bias", strict_speakers=True))
        with pytest.raises(UnknownSpeakerError):
            self.run_step(m, -1)


class TestSentenceLoss:
    def test_zero_parameter_model_uniform_loss(self):
        m = Seq2SeqModel(toy_config())
        for p in m.parameters():
            p.data[...] = 0.0
        trg = [5, 6, 7]
        loss = m.sentence_loss(None, [4, 5], trg, None, label_smoothing=0.0)
        expect = (len(trg) + 1) * math.log(12)  # w_1..w_n plus EOS
        np.testing.assert_allclose(loss.item(), expect, rtol=1e-5)

    def test_spk_token_zero_parameter_loss_over_extended_vocab(self):
        m = Seq2SeqModel(toy_config("spk_token"))
        for p in m.parameters():
            p.data[...] = 0.0
        loss = m.sentence_loss(None, [4], [5, 6], 1, label_smoothing=0.0)
        expect = 3 * math.log(12 + 3)  # the forced token is not scored
        np.testing.assert_allclose(loss.item(), expect, rtol=1e-5)

    def test_duplicated_pair_doubles_loss(self):
        m = Seq2SeqModel(toy_config("full_bias"))
        single = m.sentence_loss(None, [4, 5], [6, 7], 1).item()
        double, _ = m.batch_loss(
            None, np.array([[4, 5], [4, 5]]), [[6, 7], [6, 7]], [1, 1]
        )
        np.testing.assert_allclose(double.item(), 2 * single, rtol=1e-5)

    def test_eval_mode_is_deterministic(self):
        m = Seq2SeqModel(toy_config(lstm_dropout=0.3, output_dropout=0.3, word_dropout=0.1))
        a = m.sentence_loss(None, [4, 5, 6], [7, 8], None, train=False).item()
        b = m.sentence_loss(None, [4, 5, 6], [7, 8], None, train=False).item()
        assert a == b

    def test_train_mode_deterministic_under_seed(self):
        m = Seq2SeqModel(toy_config(lstm_dropout=0.3, output_dropout=0.3, word_dropout=0.3))
        a = m.sentence_loss(None, [4, 5, 6], [7, 8], None, train=True, seed=3).item()
        b = m.sentence_loss(None, [4, 5, 6], [7, 8], None, train=True, seed=3).item()
        assert a == b

    def test_empty_sides_rejected(self):
        m = Seq2SeqModel(toy_config())
        with pytest.raises(ValueError):
            m.sentence_loss(None, [], [5], None)
        with pytest.raises(ValueError):
            m.sentence_loss(None, [5], [], None)


class TestModeEquivalenceAtInit:
    def test_fresh_bias_models_match_base(self):
        """All shared tensors share init streams, and bias terms start at
        zero, so freshly initialized bias modes score exactly like base."""
        base = Seq2SeqModel(toy_config("base"))
        src, trg = [4, 5, 6], [7, 8]
        want = base.sentence_loss(None, src, trg, 0).item()
        for mode in ("full_bias", "fact_bias"):
            m = Seq2SeqModel(toy_config(mode))
            got = m.sentence_loss(None, src, trg, 2).item()
            np.testing.assert_allclose(got, want, rtol=1e-6)


class TestGradients:
    @pytest.mark.parametrize("mode", ["base", "spk_token", "full_bias", "fact_bias"])
    def test_sentence_loss_all_modes(self, mode):
        with ad.precision("float64"):
            m = Seq2SeqModel(toy_config(mode))

            def f():
                tape = Tape()
                return m.sentence_loss(tape, [4, 5], [6, 7], 1, train=False)

            err = ad.grad_check(
                f, m.parameters(), eps=1e-5,
                max_coords_per_param=10, rng=np.random.default_rng(0),
            )
            assert err < 1e-4, f"{mode}: {err}"

    def test_train_mode_with_dropout_paths(self):
        with ad.precision("float64"):
            m = Seq2SeqModel(
                toy_config("fact_bias", lstm_dropout=0.2, output_dropout=0.2, word_dropout=0.2)
            )

            def f():
                tape = Tape()
                return m.sentence_loss(tape, [4, 5, 6], [6, 7], 2, train=True, seed=11)

            err = ad.grad_check(
                f, m.parameters(), eps=1e-5,
                max_coords_per_param=8, rng=np.random.default_rng(1),
            )
            assert err < 1e-4


class TestParamAccounting:
    def paper_config(self, mode, n_speakers):
        return ModelConfig(
            src_vocab_size=40_000, trg_vocab_size=40_000,
            n_speakers=n_speakers, mode=mode,
        )

    def test_base_total_near_reported_size(self):
        acc = count_params(self.paper_config("base", 1887))
        assert 45_000_000 <= acc.base_total <= 53_000_000
        assert acc.adaptation_total == 0
        assert acc.per_speaker == 0

    def test_full_bias_overhead_fraction(self):
        acc = count_params(self.paper_config("full_bias", 1887))
        assert acc.per_speaker == 40_000
        assert 0.0007 <= acc.per_speaker_fraction <= 0.0011
        assert acc.adaptation_total == 1887 * 40_000

    def test_factored_reduction_en_fr(self):
        r = fact_vs_full_reduction(1887, 40_000, 10)
        assert f"{100 * r:.2f}" == "99.45"

    def test_factored_reduction_en_de(self):
        r = fact_vs_full_reduction(1670, 40_000, 10)
        assert f"{100 * r:.2f}" == "99.38"

    def test_fact_bias_adaptation_total(self):
        acc = count_params(self.paper_config("fact_bias", 1887))
        assert acc.adaptation_total == 10 * (1887 + 40_000)
        assert acc.per_speaker == 10

    def test_spk_token_extends_target_table(self):
        cfg = self.paper_config("spk_token", 1887)
        names = dict((n, s) for n, s in param_shapes(cfg))
        assert names["trg_embed"] == (40_000 + 1887, 512)
        assert names["vocab_bias"] == (40_000 + 1887,)
        acc = count_params(cfg)
        assert acc.per_speaker == 512 + 1

    def test_breakdown_covers_total(self):
        acc = count_params(self.paper_config("fact_bias", 1887))
        assert sum(c for _, _, c in acc.rows) == acc.total
        assert "per-speaker overhead" in acc.format_table()
