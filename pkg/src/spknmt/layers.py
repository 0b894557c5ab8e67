"""Neural building blocks: embeddings, LSTM cell with variational dropout,
MLP attention, word dropout, and label-smoothed cross-entropy.

Everything operates on [batch, dim] matrices; single-vector convenience
wrappers exist where tests or callers want them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Tensor, lift


def glorot(rng: np.random.Generator, shape) -> np.ndarray:
    """Uniform Glorot initialization; vectors use fan_out = 1."""
    if len(shape) == 2:
        fan_in, fan_out = shape[1], shape[0]
    else:
        fan_in, fan_out = shape[0], 1
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def embedding_table(rng: np.random.Generator, n_rows: int, dim: int) -> np.ndarray:
    """Word vectors drawn from a normal with std 1/sqrt(dim)."""
    return rng.normal(0.0, 1.0 / math.sqrt(dim), size=(n_rows, dim))


def embed(tape: Tape | None, table: Parameter, ids) -> Tensor:
    """Look up rows of an embedding table; gradients flow to those rows only."""
    return ad.rows(lift(tape, table), ids)


def dropout_mask(rng: np.random.Generator, shape, rate: float) -> np.ndarray | None:
    """Inverted-dropout mask, or None when the rate is zero."""
    if rate <= 0.0:
        return None
    keep = (rng.random(shape) >= rate).astype(ad.default_dtype())
    return keep / ad.default_dtype()(1.0 - rate)


def apply_mask(x: Tensor, mask: np.ndarray | None) -> Tensor:
    if mask is None:
        return x
    return ad.mul(x, Tensor(mask))


@dataclass
class LstmMasks:
    """Variational dropout masks, sampled once per sequence and reused at
    every timestep on the input and recurrent connections."""

    x_mask: np.ndarray | None
    h_mask: np.ndarray | None

    @staticmethod
    def ones() -> "LstmMasks":
        return LstmMasks(None, None)


class LstmCell:
    """Single LSTM cell: gates parameterized by one (d_in + d_h) -> 4*d_h map."""

    def __init__(self, name: str, d_in: int, d_h: int, rng: np.random.Generator,
                 dropout: float = 0.0):
        self.d_in = d_in
        self.d_h = d_h
        self.dropout = dropout
        self.w = Parameter(f"{name}.w", glorot(rng, (d_in + d_h, 4 * d_h)))
        self.b = Parameter(f"{name}.b", np.zeros(4 * d_h))

    @classmethod
    def from_params(cls, w: Parameter, b: Parameter, d_in: int, d_h: int,
                    dropout: float = 0.0) -> "LstmCell":
        cell = cls.__new__(cls)
        cell.d_in, cell.d_h, cell.dropout, cell.w, cell.b = d_in, d_h, dropout, w, b
        return cell

    def parameters(self):
        return [self.w, self.b]

    def make_masks(self, rng: np.random.Generator, batch: int, train: bool) -> LstmMasks:
        if not train or self.dropout <= 0.0:
            return LstmMasks.ones()
        return LstmMasks(
            dropout_mask(rng, (batch, self.d_in), self.dropout),
            dropout_mask(rng, (batch, self.d_h), self.dropout),
        )

    def zero_state(self, batch: int) -> tuple[Tensor, Tensor]:
        z = np.zeros((batch, self.d_h), dtype=ad.default_dtype())
        return Tensor(z), Tensor(z.copy())

    def step(self, tape: Tape | None, x: Tensor, state: tuple[Tensor, Tensor],
             masks: LstmMasks) -> tuple[Tensor, Tensor]:
        h, c = state
        if x.shape != (x.shape[0], self.d_in) or h.shape != (x.shape[0], self.d_h):
            raise ad.ShapeError(
                f"lstm step got input {x.shape}, state {h.shape}; "
                f"cell is {self.d_in} -> {self.d_h}"
            )
        x = apply_mask(x, masks.x_mask)
        h = apply_mask(h, masks.h_mask)
        z = ad.add(ad.matmul(ad.concat([x, h], axis=1), lift(tape, self.w)),
                   lift(tape, self.b))
        d = self.d_h
        i_gate = ad.sigmoid(ad.narrow(z, 1, 0, d))
        f_gate = ad.sigmoid(ad.narrow(z, 1, d, d))
        g_cand = ad.tanh(ad.narrow(z, 1, 2 * d, d))
        o_gate = ad.sigmoid(ad.narrow(z, 1, 3 * d, d))
        c_new = ad.add(ad.mul(f_gate, c), ad.mul(i_gate, g_cand))
        h_new = ad.mul(o_gate, ad.tanh(c_new))
        return h_new, c_new


@dataclass
class AttentionResult:
    context: Tensor
    weights: Tensor


class Attention:
    """MLP attention: score_i = v . tanh(W_enc e_i + W_query h + b)."""

    def __init__(self, name: str, d_a: int, d_query: int, d_enc: int,
                 rng: np.random.Generator):
        self.d_a = d_a
        self.d_enc = d_enc
        self.enc_w = Parameter(f"{name}.enc_w", glorot(rng, (d_a, d_enc)))
        self.query_w = Parameter(f"{name}.query_w", glorot(rng, (d_a, d_query)))
        self.score_b = Parameter(f"{name}.score_b", np.zeros(d_a))
        self.score_v = Parameter(f"{name}.score_v", glorot(rng, (d_a,)))

    @classmethod
    def from_params(cls, enc_w: Parameter, query_w: Parameter, score_b: Parameter,
                    score_v: Parameter) -> "Attention":
        attn = cls.__new__(cls)
        attn.d_a, attn.d_enc = enc_w.shape
        attn.enc_w, attn.query_w = enc_w, query_w
        attn.score_b, attn.score_v = score_b, score_v
        return attn

    def parameters(self):
        return [self.enc_w, self.query_w, self.score_b, self.score_v]

    def project(self, tape: Tape | None, enc: Tensor) -> Tensor:
        """Precompute W_enc e_i for all positions: [B,S,D] -> [B*S, d_a]."""
        b, s, d = enc.shape
        flat = ad.reshape(enc, (b * s, d))
        return ad.matmul(flat, ad.transpose(lift(tape, self.enc_w)))

    def attend_batch(self, tape: Tape | None, query: Tensor, enc: Tensor,
                     enc_proj: Tensor) -> AttentionResult:
        b, s, d = enc.shape
        if s < 1:
            raise ValueError("attention needs at least one encoding")
        q = ad.affine(query, lift(tape, self.query_w), lift(tape, self.score_b))
        u = ad.tanh(ad.add(enc_proj, ad.repeat_rows(q, s)))
        v_col = ad.reshape(lift(tape, self.score_v), (self.d_a, 1))
        scores = ad.reshape(ad.matmul(u, v_col), (b, s))
        alpha = ad.softmax(scores)
        context = ad.context_mix(alpha, enc)
        return AttentionResult(context, alpha)

    def attend(self, tape: Tape | None, query: Tensor, encodings: Tensor) -> AttentionResult:
        """Single-query form: query [d_h], encodings [S, D] -> context [D]."""
        if encodings.shape[0] < 1:
            raise ValueError("attention needs at least one encoding")
        s, d = encodings.shape
        enc3 = ad.reshape(encodings, (1, s, d))
        proj = self.project(tape, enc3)
        res = self.attend_batch(tape, ad.reshape(query, (1, -1)), enc3, proj)
        return AttentionResult(
            ad.reshape(res.context, (d,)),
            ad.reshape(res.weights, (s,)),
        )


def word_dropout(ids, p: float, unk_id: int, rng: np.random.Generator,
                 eligible=None) -> np.ndarray:
    """Replace token ids with UNK independently with probability p.

    Training-time regularization for decoder inputs; never applied to the
    gold labels. ``eligible`` masks out positions that must survive
    (sequence-start markers, forced speaker tokens, padding).
    """
    ids = np.array(ids, dtype=np.int64)
    if p <= 0.0:
        return ids
    hit = rng.random(ids.shape) < p
    if eligible is not None:
        hit &= np.asarray(eligible, dtype=bool)
    ids[hit] = unk_id
    return ids


def label_smoothed_nll(log_probs: Tensor, gold: int, eps: float = 0.1,
                       exclude: int | None = None) -> Tensor:
    """Cross-entropy against a (1-eps) gold / eps-uniform mixture.

    The uniform part spreads over the vocabulary minus ``exclude`` (the
    padding id in the translation model; None means the full vocabulary).
    """
    n = log_probs.shape[-1]
    lp2 = ad.reshape(log_probs, (1, n))
    return ad.smoothed_nll(lp2, [gold], eps=eps, exclude=exclude)
