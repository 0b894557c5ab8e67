"""Bidirectional-LSTM encoder, MLP attention, LSTM decoder, and a tied
embedding/softmax output layer, with four per-speaker adaptation modes:

* ``base``       - no speaker conditioning
* ``spk_token``  - a per-speaker pseudo-token forced as the first decoder
                   input (its embedding lives in the target table)
* ``full_bias``  - one learned bias vector over the target vocabulary per
                   speaker, added to the output logits
* ``fact_bias``  - the per-speaker bias is a rank-limited mixture of a few
                   shared bias vectors (speaker coefficients x bias basis)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Tensor, lift
from .data import BOS_ID, EOS_ID, PAD_ID, UNK_ID
from .layers import Attention, LstmCell, LstmMasks, dropout_mask, embed, glorot, \
    embedding_table, word_dropout
from .seeding import derive_rng

MODES = ("base", "spk_token", "full_bias", "fact_bias")


class UnknownSpeakerError(KeyError):
    """Raised in strict mode when a bias-adapted model meets a speaker it
    has no parameters for."""


@dataclass
class ModelConfig:
    src_vocab_size: int
    trg_vocab_size: int          # includes the 4 specials, excludes speaker tokens
    n_speakers: int
    mode: str = "base"
    d_emb: int = 512
    d_h: int = 512
    d_a: int = 256
    rank: int = 10               # fact_bias mixture size
    lstm_dropout: float = 0.2
    output_dropout: float = 0.2
    label_smoothing: float = 0.1
    word_dropout: float = 0.1
    strict_speakers: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("src_vocab_size", "trg_vocab_size", "d_emb", "d_h", "d_a", "rank"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_speakers < 0:
            raise ValueError("n_speakers must be >= 0")

    @property
    def target_rows(self) -> int:
        """Rows of the target embedding/softmax table (speaker tokens extend
        the target vocabulary in spk_token mode)."""
        extra = self.n_speakers if self.mode == "spk_token" else 0
        return self.trg_vocab_size + extra

    def as_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Every learned tensor's name and shape; single source of truth for
    initialization, checkpointing, and parameter accounting."""
    c = config
    rows = c.target_rows
    shapes = [
        ("src_embed", (c.src_vocab_size, c.d_emb)),
        ("trg_embed", (rows, c.d_emb)),
        ("enc_fw.w", (c.d_emb + c.d_h, 4 * c.d_h)),
        ("enc_fw.b", (4 * c.d_h,)),
        ("enc_bw.w", (c.d_emb + c.d_h, 4 * c.d_h)),
        ("enc_bw.b", (4 * c.d_h,)),
        ("dec.w", (c.d_emb + 2 * c.d_h + c.d_h, 4 * c.d_h)),
        ("dec.b", (4 * c.d_h,)),
        ("attn.enc_w", (c.d_a, 2 * c.d_h)),
        ("attn.query_w", (c.d_a, c.d_h)),
        ("attn.score_b", (c.d_a,)),
        ("attn.score_v", (c.d_a,)),
        ("out.h_w", (c.d_emb, c.d_h)),
        ("out.ctx_w", (c.d_emb, 2 * c.d_h)),
        ("out.prev_w", (c.d_emb, c.d_emb)),
        ("out.bias", (c.d_emb,)),
        ("vocab_bias", (rows,)),
    ]
    if c.mode == "full_bias":
        shapes.append(("speaker_bias", (c.n_speakers, c.trg_vocab_size)))
    elif c.mode == "fact_bias":
        shapes.append(("speaker_mix", (c.n_speakers, c.rank)))
        shapes.append(("bias_basis", (c.rank, c.trg_vocab_size)))
    return shapes


def _init_values(name: str, shape, rng: np.random.Generator, config: ModelConfig):
    if name in ("src_embed", "trg_embed"):
        return embedding_table(rng, shape[0], shape[1])
    if name == "speaker_bias" or name == "bias_basis":
        # zero so a fresh bias-adapted model scores exactly like base; the
        # basis still receives gradient through the random mixture weights
        return np.zeros(shape)
    if name == "speaker_mix":
        return rng.normal(0.0, 1.0 / math.sqrt(config.rank), size=shape)
    if name.endswith(".b") or name.endswith("bias") or name.endswith("score_b"):
        return np.zeros(shape)
    return glorot(rng, shape)


class DecoderState(NamedTuple):
    h: Tensor
    c: Tensor
    ctx: Tensor  # previous attention context, zero at step 0


@dataclass
class DecodeStep:
    output: Tensor          # pre-softmax output-layer vector(s)
    log_probs: Tensor       # over the (possibly extended) target vocabulary
    state: DecoderState
    attn_weights: Tensor
    unknown_speaker: bool = False


class Seq2SeqModel:
    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, Parameter] = {}
        for name, shape in param_shapes(config):
            rng = derive_rng(config.seed, "init", name)
            self.params[name] = Parameter(name, _init_values(name, shape, rng, config))

        c = config
        self.enc_fw = self._cell("enc_fw", c.d_emb, c.d_h)
        self.enc_bw = self._cell("enc_bw", c.d_emb, c.d_h)
        self.dec = self._cell("dec", c.d_emb + 2 * c.d_h, c.d_h)
        self.attn = Attention.from_params(
            self.params["attn.enc_w"],
            self.params["attn.query_w"],
            self.params["attn.score_b"],
            self.params["attn.score_v"],
        )

    def _cell(self, name: str, d_in: int, d_h: int) -> LstmCell:
        return LstmCell.from_params(
            self.params[f"{name}.w"], self.params[f"{name}.b"],
            d_in, d_h, self.config.lstm_dropout,
        )

    # -- parameter access ---------------------------------------------------

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def named_parameters(self) -> dict[str, Parameter]:
        return dict(self.params)

    def state_values(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_values(self, values: dict[str, np.ndarray]):
        for name, p in self.params.items():
            if name not in values:
                raise KeyError(f"missing tensor {name!r}")
            if values[name].shape != p.data.shape:
                raise ad.ShapeError(
                    f"tensor {name!r}: expected {p.data.shape}, got {values[name].shape}"
                )
            p.data[...] = values[name]

    # -- speakers -----------------------------------------------------------

    def speaker_token_id(self, speaker: int | None) -> int:
        """Vocabulary id of a speaker's pseudo-token (UNK for unknowns)."""
        if speaker is None or speaker < 0:
            return UNK_ID
        if speaker >= self.config.n_speakers:
            raise IndexError(f"speaker {speaker} out of range")
        return self.config.trg_vocab_size + speaker

    def speaker_bias(self, speaker: int, tape: Tape | None = None) -> Tensor:
        """Additive output-logit bias for one speaker ([target_rows])."""
        c = self.config
        if c.mode in ("base", "spk_token"):
            return Tensor(np.zeros(c.target_rows, dtype=ad.default_dtype()))
        if not 0 <= speaker < c.n_speakers:
            raise IndexError(f"speaker {speaker} out of range for {c.n_speakers}")
        if c.mode == "full_bias":
            row = ad.rows(lift(tape, self.params["speaker_bias"]), [speaker])
        else:
            mix = ad.rows(lift(tape, self.params["speaker_mix"]), [speaker])
            row = ad.matmul(mix, lift(tape, self.params["bias_basis"]))
        return ad.reshape(row, (c.target_rows,))

    def _speaker_bias_rows(self, tape: Tape | None, speakers: np.ndarray) -> tuple[Tensor | None, bool]:
        """Batched bias lookup; unknown speakers (index < 0) fall back to a
        zero bias unless strict mode is on."""
        c = self.config
        unknown = speakers < 0
        if unknown.any() and c.strict_speakers and c.mode != "base":
            raise UnknownSpeakerError("unknown speaker under strict policy")
        if c.mode in ("base", "spk_token"):
            return None, bool(unknown.any()) and c.mode == "spk_token"
        safe = np.where(unknown, 0, speakers)
        if (safe >= c.n_speakers).any():
            raise IndexError("speaker index out of range")
        if c.mode == "full_bias":
            bias = ad.rows(lift(tape, self.params["speaker_bias"]), safe)
        else:
            mix = ad.rows(lift(tape, self.params["speaker_mix"]), safe)
            bias = ad.matmul(mix, lift(tape, self.params["bias_basis"]))
        if unknown.any():
            keep = np.broadcast_to(
                (~unknown).astype(ad.default_dtype())[:, None], bias.shape
            ).copy()
            bias = ad.mul(bias, Tensor(keep))
        return bias, bool(unknown.any())

    # -- encoder ------------------------------------------------------------

    def encode_batch(
        self,
        tape: Tape | None,
        src: np.ndarray,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> tuple[Tensor, Tensor]:
        """Run both encoder directions over [B, S] source ids.

        Returns the per-position states [B, S, 2*d_h] and their attention
        projection [(B*S), d_a].
        """
        src = np.asarray(src, dtype=np.int64)
        if src.ndim != 2 or src.shape[1] < 1:
            raise ValueError("encoder needs a non-empty [batch, length] id array")
        b, s = src.shape
        table = self.params["src_embed"]
        embs = [embed(tape, table, src[:, t]) for t in range(s)]

        fw_masks = self.enc_fw.make_masks(rng, b, train) if rng is not None else LstmMasks.ones()
        bw_masks = self.enc_bw.make_masks(rng, b, train) if rng is not None else LstmMasks.ones()
        h, c = self.enc_fw.zero_state(b)
        fw_states = []
        for t in range(s):
            h, c = self.enc_fw.step(tape, embs[t], (h, c), fw_masks)
            fw_states.append(h)
        h, c = self.enc_bw.zero_state(b)
        bw_states: list = [None] * s
        for t in reversed(range(s)):
            h, c = self.enc_bw.step(tape, embs[t], (h, c), bw_masks)
            bw_states[t] = h
        enc = ad.stack_steps([ad.concat([fw_states[t], bw_states[t]], axis=1) for t in range(s)])
        return enc, self.attn.project(tape, enc)

    def encode(self, tape: Tape | None, src_ids) -> Tensor:
        """Single-sentence encoder surface: [S] ids -> [S, 2*d_h] states."""
        src = np.asarray(src_ids, dtype=np.int64)
        if src.ndim != 1 or src.size < 1:
            raise ValueError("encode expects a non-empty id sequence")
        enc, _ = self.encode_batch(tape, src[None, :])
        return ad.reshape(enc, (src.size, 2 * self.config.d_h))

    # -- decoder ------------------------------------------------------------

    def init_state(self, batch: int) -> DecoderState:
        z = np.zeros((batch, self.config.d_h), dtype=ad.default_dtype())
        ctx = np.zeros((batch, 2 * self.config.d_h), dtype=ad.default_dtype())
        return DecoderState(Tensor(z), Tensor(z.copy()), Tensor(ctx))

    def decode_step_batch(
        self,
        tape: Tape | None,
        prev_ids: np.ndarray,
        state: DecoderState,
        enc: Tensor,
        enc_proj: Tensor,
        speakers: np.ndarray,
        train: bool = False,
        dec_masks: LstmMasks | None = None,
        rng: np.random.Generator | None = None,
    ) -> DecodeStep:
        c = self.config
        prev_ids = np.asarray(prev_ids, dtype=np.int64)
        emb = embed(tape, self.params["trg_embed"], prev_ids)
        x = ad.concat([emb, state.ctx], axis=1)
        h, cell = self.dec.step(tape, x, (state.h, state.c), dec_masks or LstmMasks.ones())
        att = self.attn.attend_batch(tape, h, enc, enc_proj)

        out = ad.affine(h, lift(tape, self.params["out.h_w"]), lift(tape, self.params["out.bias"]))
        out = ad.add(out, ad.matmul_t(att.context, lift(tape, self.params["out.ctx_w"])))
        out = ad.add(out, ad.matmul_t(emb, lift(tape, self.params["out.prev_w"])))
        dropped = out
        if train and c.output_dropout > 0.0 and rng is not None:
            mask = dropout_mask(rng, out.shape, c.output_dropout)
            dropped = ad.mul(out, Tensor(mask))

        logits = ad.add(
            ad.matmul_t(dropped, lift(tape, self.params["trg_embed"])),
            lift(tape, self.params["vocab_bias"]),
        )
        bias, unk = self._speaker_bias_rows(tape, np.asarray(speakers, dtype=np.int64))
        if bias is not None:
            logits = ad.add(logits, bias)
        log_probs = ad.log_softmax(logits)
        return DecodeStep(out, log_probs, DecoderState(h, cell, att.context), att.weights, unk)

    def decode_step(
        self,
        tape: Tape | None,
        prev_id: int,
        state: DecoderState,
        enc: Tensor,
        enc_proj: Tensor,
        speaker: int | None,
        train: bool = False,
        dec_masks: LstmMasks | None = None,
        rng: np.random.Generator | None = None,
    ) -> DecodeStep:
        """Single-hypothesis decode step (batch of one)."""
        spk = -1 if speaker is None else speaker
        return self.decode_step_batch(
            tape, np.array([prev_id]), state, enc, enc_proj,
            np.array([spk]), train=train, dec_masks=dec_masks, rng=rng,
        )

    # -- losses -------------------------------------------------------------

    def _decoder_arrays(self, trgs: list[list[int]], speakers: np.ndarray):
        """Teacher-forcing input/target/weight matrices, PAD-padded.

        Targets cover w_1 .. EOS. In spk_token mode the speaker pseudo-token
        is forced as the decoder input after BOS and its own prediction is
        excluded from the loss.
        """
        spk_mode = self.config.mode == "spk_token"
        ins, tgts = [], []
        for trg, spk in zip(trgs, speakers):
            if len(trg) == 0:
                raise ValueError("empty target sequence")
            if spk_mode:
                tok = self.speaker_token_id(int(spk) if spk >= 0 else None)
                ins.append([BOS_ID, tok] + list(trg))
                tgts.append([tok] + list(trg) + [EOS_ID])
            else:
                ins.append([BOS_ID] + list(trg))
                tgts.append(list(trg) + [EOS_ID])
        t_max = max(len(seq) for seq in ins)
        b = len(ins)
        in_arr = np.full((b, t_max), PAD_ID, dtype=np.int64)
        tgt_arr = np.full((b, t_max), PAD_ID, dtype=np.int64)
        weight = np.zeros((b, t_max), dtype=ad.default_dtype())
        eligible = np.zeros((b, t_max), dtype=bool)
        first_real = 2 if spk_mode else 1
        for i, (seq, tgt) in enumerate(zip(ins, tgts)):
            in_arr[i, : len(seq)] = seq
            tgt_arr[i, : len(tgt)] = tgt
            weight[i, : len(tgt)] = 1.0
            if spk_mode:
                weight[i, 0] = 0.0  # the forced token is not predicted
            eligible[i, first_real : len(seq)] = True
        return in_arr, tgt_arr, weight, eligible

    def batch_loss(
        self,
        tape: Tape | None,
        srcs: np.ndarray,
        trgs: list[list[int]],
        speakers,
        train: bool = False,
        rng: np.random.Generator | None = None,
        label_smoothing: float | None = None,
    ) -> tuple[Tensor, int]:
        """Summed per-token loss over a batch plus the number of scored
        target tokens. ``srcs`` is [B, S] (equal source lengths)."""
        c = self.config
        speakers = np.asarray(speakers, dtype=np.int64)
        eps = c.label_smoothing if label_smoothing is None else label_smoothing
        in_arr, tgt_arr, weight, eligible = self._decoder_arrays(trgs, speakers)
        if train and c.word_dropout > 0.0 and rng is not None:
            in_arr = word_dropout(in_arr, c.word_dropout, UNK_ID, rng, eligible)

        enc, enc_proj = self.encode_batch(tape, srcs, train=train, rng=rng)
        b = in_arr.shape[0]
        dec_masks = self.dec.make_masks(rng, b, train) if rng is not None else LstmMasks.ones()
        state = self.init_state(b)
        total: Tensor | None = None
        for t in range(in_arr.shape[1]):
            step = self.decode_step_batch(
                tape, in_arr[:, t], state, enc, enc_proj, speakers,
                train=train, dec_masks=dec_masks, rng=rng,
            )
            state = step.state
            loss_t = ad.smoothed_nll(
                step.log_probs, tgt_arr[:, t], eps=eps, exclude=PAD_ID, mask=weight[:, t]
            )
            total = loss_t if total is None else ad.add(total, loss_t)
        return total, int(weight.sum())

    def sentence_loss(
        self,
        tape: Tape | None,
        src_ids,
        trg_ids,
        speaker: int | None,
        train: bool = False,
        seed: int = 0,
        label_smoothing: float | None = None,
    ) -> Tensor:
        """Loss of one (source, target) pair for one speaker."""
        src = np.asarray(src_ids, dtype=np.int64)
        trg = list(trg_ids)
        if src.size == 0 or len(trg) == 0:
            raise ValueError("sentence_loss needs non-empty source and target")
        rng = derive_rng(seed, "sentence_loss") if train else None
        spk = -1 if speaker is None else int(speaker)
        loss, _ = self.batch_loss(
            tape, src[None, :], [trg], [spk], train=train, rng=rng,
            label_smoothing=label_smoothing,
        )
        return loss


# ---------------------------------------------------------------------------
# parameter accounting


@dataclass
class ParamAccounting:
    rows: list[tuple[str, tuple[int, ...], int]]
    total: int
    base_total: int
    adaptation_total: int
    per_speaker: int
    per_speaker_fraction: float
    fact_vs_full_reduction: float

    def format_table(self) -> str:
        lines = [f"{'tensor':<18} {'shape':<18} {'params':>12}"]
        for name, shape, count in self.rows:
            lines.append(f"{name:<18} {str(shape):<18} {count:>12,}")
        lines.append(f"{'total':<18} {'':<18} {self.total:>12,}")
        lines.append(f"base-model total: {self.base_total:,}")
        lines.append(f"adaptation total: {self.adaptation_total:,}")
        lines.append(
            f"per-speaker overhead: {self.per_speaker:,} "
            f"({100.0 * self.per_speaker_fraction:.4f}% of base total)"
        )
        lines.append(
            "factored vs full adaptation parameters: "
            f"{100.0 * self.fact_vs_full_reduction:.2f}% fewer"
        )
        return "\n".join(lines)


def fact_vs_full_reduction(n_speakers: int, vocab_size: int, rank: int) -> float:
    """Fraction of adaptation parameters saved by the factored form:
    1 - rank*(S + V) / (S * V)."""
    return 1.0 - rank * (n_speakers + vocab_size) / (n_speakers * vocab_size)


def count_params(config: ModelConfig) -> ParamAccounting:
    """Exact integer parameter accounting, no tensors allocated."""
    rows = [
        (name, shape, int(np.prod(shape))) for name, shape in param_shapes(config)
    ]
    total = sum(count for _, _, count in rows)
    base_total = sum(
        int(np.prod(shape)) for _, shape in param_shapes(replace(config, mode="base"))
    )
    per_speaker = {
        "base": 0,
        "spk_token": config.d_emb + 1,
        "full_bias": config.trg_vocab_size,
        "fact_bias": config.rank,
    }[config.mode]
    return ParamAccounting(
        rows=rows,
        total=total,
        base_total=base_total,
        adaptation_total=total - base_total,
        per_speaker=per_speaker,
        per_speaker_fraction=per_speaker / base_total,
        fact_vs_full_reduction=fact_vs_full_reduction(
            max(config.n_speakers, 1), config.trg_vocab_size, config.rank
        ),
    )
