"""Layer-level tests: embeddings, LSTM cell, attention, word dropout,
label-smoothed loss."""

import math

import numpy as np
import pytest

from spknmt import autodiff as ad
from spknmt.autodiff import Parameter, Tape, Tensor
from spknmt import layers
from spknmt.layers import Attention, LstmCell, LstmMasks


class TestEmbed:
    def test_lookup_row_zero(self):
        table = Parameter("e", np.arange(12.0).reshape(4, 3))
        out = layers.embed(None, table, [0])
        np.testing.assert_allclose(out.data, [[0.0, 1.0, 2.0]])

    def test_repeated_id_sums_gradients(self):
        table = Parameter("e", np.arange(12.0).reshape(4, 3))
        tape = Tape()
        out = layers.embed(tape, table, [2, 2, 2])
        tape.backward(ad.sum_all(out))
        expect = np.zeros((4, 3))
        expect[2] = 3.0
        np.testing.assert_allclose(table.grad, expect)

    def test_gradient_is_one_hot_rows(self):
        """Finite-difference oracle: d sum(embed(3)) / d table."""
        with ad.precision("float64"):
            rng = np.random.default_rng(0)
            table = Parameter("e", rng.normal(size=(5, 4)))

            def f():
                tape = Tape()
                return ad.sum_all(layers.embed(tape, table, [3]))

            assert ad.grad_check(f, [table], eps=1e-5) < 1e-4
            tape = Tape()
            table.zero_grad()
            tape.backward(ad.sum_all(layers.embed(tape, table, [3])))
            expect = np.zeros((5, 4))
            expect[3] = 1.0
            np.testing.assert_allclose(table.grad, expect)

    def test_id_out_of_range(self):
        table = Parameter("e", np.zeros((4, 3)))
        with pytest.raises(IndexError):
            layers.embed(None, table, [4])


class TestLstmCell:
    def test_zero_params_zero_state_gives_zero_output(self):
        # gates sigmoid(0)=0.5, candidate tanh(0)=0 -> c'=0, h'=0.5*tanh(0)=0
        rng = np.random.default_rng(1)
        cell = LstmCell("c", 3, 4, rng)
        cell.w.data[...] = 0.0
        cell.b.data[...] = 0.0
        h, c = cell.zero_state(2)
        x = Tensor(rng.normal(size=(2, 3)).astype(np.float32))
        h2, c2 = cell.step(None, x, (h, c), LstmMasks.ones())
        np.testing.assert_allclose(h2.data, 0.0)
        np.testing.assert_allclose(c2.data, 0.0)

    def test_zero_dropout_masks_are_none(self):
        cell = LstmCell("c", 3, 4, np.random.default_rng(2), dropout=0.0)
        masks = cell.make_masks(np.random.default_rng(3), 2, train=True)
        assert masks.x_mask is None and masks.h_mask is None

    def test_eval_mode_masks_off(self):
        cell = LstmCell("c", 3, 4, np.random.default_rng(2), dropout=0.5)
        masks = cell.make_masks(np.random.default_rng(3), 2, train=False)
        assert masks.x_mask is None and masks.h_mask is None

    def test_deterministic_trajectory(self):
        def run():
            cell = LstmCell("c", 3, 3, np.random.default_rng(4))
            h, c = cell.zero_state(1)
            xs = np.random.default_rng(5).normal(size=(4, 1, 3))
            for x in xs:
                h, c = cell.step(None, Tensor(x.astype(np.float32)), (h, c), LstmMasks.ones())
            return h.data.copy()

        np.testing.assert_array_equal(run(), run())

    def test_variational_mask_constant_across_steps(self):
        """One mask per sequence: with identical inputs at every step, the
        same coordinates are dropped each time; resampling per step (the
        non-variational variant) produces a different trajectory."""
        rng = np.random.default_rng(6)
        cell = LstmCell("c", 4, 4, rng, dropout=0.5)
        x = Tensor(np.ones((1, 4), dtype=np.float32))

        masks = cell.make_masks(np.random.default_rng(7), 1, train=True)
        h, c = cell.zero_state(1)
        for _ in range(3):
            h, c = cell.step(None, x, (h, c), masks)
        variational = h.data.copy()

        mask_rng = np.random.default_rng(7)
        h, c = cell.zero_state(1)
        for _ in range(3):
            per_step = cell.make_masks(mask_rng, 1, train=True)
            h, c = cell.step(None, x, (h, c), per_step)
        resampled = h.data.copy()

        assert not np.allclose(variational, resampled)

    def test_gradients(self):
        with ad.precision("float64"):
            rng = np.random.default_rng(8)
            cell = LstmCell("c", 3, 4, rng)
            x_val = rng.normal(size=(2, 3))

            def f():
                tape = Tape()
                h, c = cell.zero_state(2)
                h, c = cell.step(tape, Tensor(x_val), (h, c), LstmMasks.ones())
                h, c = cell.step(tape, Tensor(x_val), (h, c), LstmMasks.ones())
                return ad.sum_all(ad.mul(h, h))

            assert ad.grad_check(f, cell.parameters(), eps=1e-5) < 1e-4

    def test_shape_mismatch(self):
        cell = LstmCell("c", 3, 4, np.random.default_rng(9))
        h, c = cell.zero_state(2)
        with pytest.raises(ad.ShapeError):
            cell.step(None, Tensor(np.zeros((2, 5))), (h, c), LstmMasks.ones())


class TestAttention:
    def test_single_encoding_gets_all_weight(self):
        rng = np.random.default_rng(10)
        attn = Attention("a", 4, 3, 6, rng)
        enc = Tensor(rng.normal(size=(1, 6)).astype(np.float32))
        res = attn.attend(None, Tensor(rng.normal(size=3).astype(np.float32)), enc)
        np.testing.assert_allclose(res.weights.data, [1.0])
        np.testing.assert_allclose(res.context.data, enc.data[0], rtol=1e-6)

    def test_zero_score_vector_gives_uniform_weights(self):
        rng = np.random.default_rng(11)
        attn = Attention("a", 4, 3, 6, rng)
        attn.score_v.data[...] = 0.0
        enc = Tensor(rng.normal(size=(5, 6)).astype(np.float32))
        res = attn.attend(None, Tensor(rng.normal(size=3).astype(np.float32)), enc)
        np.testing.assert_allclose(res.weights.data, np.full(5, 0.2), atol=1e-6)
        np.testing.assert_allclose(res.context.data, enc.data.mean(axis=0), rtol=1e-5)

    def test_hand_computed_two_way_softmax(self):
        """d_a=1, two encodings; scores reduce to tanh scalars, then a
        two-class softmax computed directly with math functions."""
        attn = Attention("a", 1, 1, 2, np.random.default_rng(12))
        attn.enc_w.data[...] = [[1.0, 0.0]]
        attn.query_w.data[...] = [[2.0]]
        attn.score_b.data[...] = [0.0]
        attn.score_v.data[...] = [1.0]
        enc = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32))
        res = attn.attend(None, Tensor(np.array([0.5], dtype=np.float32)), enc)
        s1, s2 = math.tanh(1.0 + 1.0), math.tanh(0.0 + 1.0)
        z = math.exp(s1) + math.exp(s2)
        np.testing.assert_allclose(res.weights.data, [math.exp(s1) / z, math.exp(s2) / z], rtol=1e-5)

    def test_weights_normalized_for_random_inputs(self):
        rng = np.random.default_rng(13)
        attn = Attention("a", 4, 3, 6, rng)
        for _ in range(10):
            n = int(rng.integers(1, 7))
            res = attn.attend(
                None,
                Tensor(rng.normal(size=3).astype(np.float32)),
                Tensor(rng.normal(size=(n, 6)).astype(np.float32)),
            )
            assert (res.weights.data >= 0).all()
            assert abs(res.weights.data.sum() - 1.0) <= 1e-6

    def test_empty_encodings_rejected(self):
        attn = Attention("a", 4, 3, 6, np.random.default_rng(14))
        with pytest.raises(ValueError):
            attn.attend(None, Tensor(np.zeros(3)), Tensor(np.zeros((0, 6))))

    def test_gradients(self):
        with ad.precision("float64"):
            rng = np.random.default_rng(15)
            attn = Attention("a", 3, 2, 4, rng)
            q = rng.normal(size=(2, 2))
            enc_val = rng.normal(size=(2, 3, 4))

            def f():
                tape = Tape()
                enc = Tensor(enc_val)
                proj = attn.project(tape, enc)
                res = attn.attend_batch(tape, Tensor(q), enc, proj)
                return ad.sum_all(ad.tanh(res.context))

            assert ad.grad_check(f, attn.parameters(), eps=1e-5) < 1e-4


class TestWordDropout:
    def test_zero_rate_is_identity(self):
        ids = np.arange(10)
        out = layers.word_dropout(ids, 0.0, 99, np.random.default_rng(0))
        np.testing.assert_array_equal(out, ids)

    def test_rate_one_replaces_all_eligible(self):
        ids = np.arange(10)
        eligible = np.ones(10, dtype=bool)
        eligible[0] = False
        out = layers.word_dropout(ids, 1.0, 99, np.random.default_rng(0), eligible)
        assert out[0] == 0
        assert (out[1:] == 99).all()

    def test_replacement_fraction_concentrates(self):
        # binomial: 10k draws at p=0.1 lands in [0.08, 0.12] w.h.p.
        ids = np.zeros(10_000, dtype=np.int64)
        out = layers.word_dropout(ids, 0.1, 1, np.random.default_rng(1))
        frac = (out == 1).mean()
        assert 0.08 <= frac <= 0.12

    def test_deterministic_under_seed(self):
        ids = np.arange(100)
        a = layers.word_dropout(ids, 0.3, -1, np.random.default_rng(42))
        b = layers.word_dropout(ids, 0.3, -1, np.random.default_rng(42))
        np.testing.assert_array_equal(a, b)

    def test_input_not_mutated(self):
        ids = np.arange(10)
        layers.word_dropout(ids, 1.0, 99, np.random.default_rng(2))
        np.testing.assert_array_equal(ids, np.arange(10))


class TestLabelSmoothedNll:
    def test_eps_zero_equals_pick(self):
        lp = Tensor(np.log([0.2, 0.3, 0.5]))
        a = layers.label_smoothed_nll(lp, 2, eps=0.0)
        b = ad.pick_neg_log_prob(Tensor(np.log([0.2, 0.3, 0.5])), 2)
        np.testing.assert_allclose(a.item(), b.item(), rtol=1e-6)

    @pytest.mark.parametrize("eps", [0.0, 0.1, 0.5])
    def test_uniform_log_probs_fixed_point(self, eps):
        n = 7
        lp = Tensor(np.full(n, -math.log(n)))
        out = layers.label_smoothed_nll(lp, 3, eps=eps)
        np.testing.assert_allclose(out.item(), math.log(n), rtol=1e-5)

    def test_two_class_hand_value(self):
        lp = Tensor(np.log([0.9, 0.1]))
        out = layers.label_smoothed_nll(lp, 0, eps=0.1)
        expect = 0.95 * -math.log(0.9) + 0.05 * -math.log(0.1)
        np.testing.assert_allclose(out.item(), expect, rtol=1e-5)

    def test_matches_direct_formula_on_random_inputs(self):
        """Oracle: the definition written out longhand, with and without an
        excluded class."""
        with ad.precision("float64"):
            rng = np.random.default_rng(16)
            for _ in range(20):
                n = int(rng.integers(3, 9))
                lp = np.log(rng.dirichlet(np.ones(n)))
                gold = int(rng.integers(0, n))
                eps = float(rng.uniform(0, 0.9))
                exclude = int(rng.integers(0, n)) if rng.random() < 0.5 else None
                got = layers.label_smoothed_nll(Tensor(lp), gold, eps, exclude).item()
                support = [v for v in range(n) if v != exclude]
                expect = -(1 - eps) * lp[gold] - (eps / len(support)) * sum(
                    lp[v] for v in support
                )
                assert abs(got - expect) < 1e-8

    def test_gold_out_of_range(self):
        with pytest.raises(IndexError):
            layers.label_smoothed_nll(Tensor(np.zeros(3)), 3)

    def test_gradients(self):
        with ad.precision("float64"):
            rng = np.random.default_rng(17)
            p = Parameter("p", rng.normal(size=6))

            def f():
                tape = Tape()
                lp = ad.log_softmax(tape.leaf(p))
                return layers.label_smoothed_nll(lp, 2, eps=0.1, exclude=0)

            assert ad.grad_check(f, [p], eps=1e-5) < 1e-4
