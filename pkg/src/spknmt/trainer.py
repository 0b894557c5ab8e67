"""Training loop: Adam with global-norm gradient clipping, perplexity-driven
learning-rate restarts from the best checkpoint, patience-based early
stopping, and an optional plain-SGD fine-tuning pass with a tighter clip.

Policy per epoch: train over shuffled equal-length batches, evaluate dev
perplexity; on improvement checkpoint as best, otherwise reload the best
parameters, decay the learning rate, and reset optimizer moments. Stop
after ``patience`` consecutive non-improving epochs.
"""

from __future__ import annotations

import json
import math
import sys
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Parameter, Tape
from .data import EncodedExample, make_batches
from .model import Seq2SeqModel
from .seeding import derive_rng, derive_seed


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    clip_norm: float = 1.0
    restart_decay: float = 0.5
    patience: int = 3
    finetune_learning_rate: float = 0.1
    finetune_clip_norm: float = 0.1
    batch_size: int = 32
    max_epochs: int | None = None
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "clip_norm", "finetune_learning_rate",
                     "finetune_clip_norm"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0.0 < self.restart_decay < 1.0:
            raise ValueError("restart_decay must be in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float          # mean loss per scored target token
    dev_perplexity: float
    learning_rate: float       # rate in effect during this epoch
    restart: bool
    wall_time: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord):
        self.records.append(record)

    def best_epoch(self) -> int:
        return min(self.records, key=lambda r: r.dev_perplexity).epoch

    def save_jsonl(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec.as_dict()) + "\n")


# ---------------------------------------------------------------------------
# optimizers


def zero_grads(params: list[Parameter]):
    for p in params:
        p.zero_grad()


def global_grad_norm(params: list[Parameter]) -> float:
    total = 0.0
    for p in params:
        g = p.grad
        total += float(np.dot(g.reshape(-1), g.reshape(-1)))
    return math.sqrt(total)


def clip_gradients(params: list[Parameter], max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most ``max_norm``;
    returns the factor applied (1.0 when under the threshold)."""
    norm = global_grad_norm(params)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    factor = max_norm / norm
    for p in params:
        p.grad *= factor
    return factor


class Adam:
    """Standard Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params: list[Parameter], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {id(p): np.zeros_like(p.data) for p in params}
        self.v = {id(p): np.zeros_like(p.data) for p in params}

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            g = p.grad
            m = self.m[id(p)]
            v = self.v[id(p)]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


class Sgd:
    """Plain stochastic gradient descent (the fine-tuning optimizer)."""

    def __init__(self, params: list[Parameter], lr: float):
        self.params = params
        self.lr = lr

    def step(self):
        for p in self.params:
            p.data -= self.lr * p.grad


# ---------------------------------------------------------------------------
# evaluation


def validate_perplexity(model, dev: list[EncodedExample], batch_size: int = 32) -> float:
    """exp(total unsmoothed NLL / total scored target tokens), eval mode."""
    if not dev:
        raise ValueError("dev set is empty")
    total_nll = 0.0
    total_tokens = 0
    for batch in make_batches(dev, batch_size, seed=0):
        srcs = np.array([ex.src for ex in batch.examples], dtype=np.int64)
        trgs = [ex.trg for ex in batch.examples]
        spks = [ex.speaker for ex in batch.examples]
        loss, n_tokens = model.batch_loss(
            None, srcs, trgs, spks, train=False, label_smoothing=0.0
        )
        total_nll += float(loss.data)
        total_tokens += n_tokens
    return math.exp(total_nll / total_tokens)


# ---------------------------------------------------------------------------
# the fit/restart/stop engine


def _train_epoch(model: Seq2SeqModel, train: list[EncodedExample], optimizer,
                 clip_norm: float, epoch: int, seed: int, batch_size: int) -> float:
    params = model.parameters()
    total_loss = 0.0
    total_tokens = 0
    batches = make_batches(train, batch_size, seed=derive_seed(seed, "batch-order", epoch))
    for i, batch in enumerate(batches):
        srcs = np.array([ex.src for ex in batch.examples], dtype=np.int64)
        trgs = [ex.trg for ex in batch.examples]
        spks = [ex.speaker for ex in batch.examples]
        tape = Tape()
        rng = derive_rng(seed, "train", epoch, i)
        loss, n_tokens = model.batch_loss(tape, srcs, trgs, spks, train=True, rng=rng)
        zero_grads(params)
        tape.backward(loss)
        clip_gradients(params, clip_norm)
        optimizer.step()
        total_loss += float(loss.data)
        total_tokens += n_tokens
    return total_loss / max(total_tokens, 1)


def _run(
    model: Seq2SeqModel,
    train: list[EncodedExample],
    dev: list[EncodedExample],
    config: TrainConfig,
    make_optimizer: Callable[[float], object],
    lr0: float,
    clip_norm: float,
    validate_fn: Callable[[Seq2SeqModel], float] | None,
    on_improve: Callable[[Seq2SeqModel], None] | None,
    progress: bool,
    seed_best_with_initial: bool = False,
) -> tuple[Seq2SeqModel, TrainLog]:
    if not train:
        raise ValueError("training set is empty")
    if not dev and validate_fn is None:
        raise ValueError("dev set is empty")
    if validate_fn is None:
        validate_fn = lambda m: validate_perplexity(m, dev, config.batch_size)

    lr = lr0
    optimizer = make_optimizer(lr)
    best_ppl = math.inf
    best_state = None
    if seed_best_with_initial:
        # fine-tuning starts from a fitted model; keep it as the fallback so
        # the phase can never return something worse than its input
        best_ppl = validate_fn(model)
        best_state = model.state_values()
    bad_epochs = 0
    log = TrainLog()
    epoch = 0
    while True:
        epoch += 1
        started = time.time()
        lr_used = lr
        train_loss = _train_epoch(model, train, optimizer, clip_norm, epoch,
                                  config.seed, config.batch_size)
        ppl = validate_fn(model)
        restart = ppl >= best_ppl
        if not restart:
            best_ppl = ppl
            best_state = model.state_values()
            bad_epochs = 0
            if on_improve is not None:
                on_improve(model)
        else:
            bad_epochs += 1
            lr *= config.restart_decay
            if best_state is not None:
                model.load_state_values(best_state)
            optimizer = make_optimizer(lr)
        log.append(EpochRecord(epoch, train_loss, ppl, lr_used, restart,
                               time.time() - started))
        if progress:
            flag = " (restart)" if restart else ""
            print(
                f"epoch {epoch}: loss/token {train_loss:.4f} "
                f"dev ppl {ppl:.3f} lr {lr_used:g}{flag}",
                file=sys.stderr,
            )
        if bad_epochs >= config.patience:
            break
        if config.max_epochs is not None and epoch >= config.max_epochs:
            break
    if best_state is not None:
        model.load_state_values(best_state)
    return model, log


def fit(
    model: Seq2SeqModel,
    train: list[EncodedExample],
    dev: list[EncodedExample],
    config: TrainConfig,
    validate_fn=None,
    on_improve=None,
    progress: bool = False,
) -> tuple[Seq2SeqModel, TrainLog]:
    """Adam phase: returns the best-dev-perplexity model and the epoch log."""
    return _run(
        model, train, dev, config,
        make_optimizer=lambda lr: Adam(model.parameters(), lr),
        lr0=config.learning_rate,
        clip_norm=config.clip_norm,
        validate_fn=validate_fn,
        on_improve=on_improve,
        progress=progress,
    )


def finetune_sgd(
    model: Seq2SeqModel,
    train: list[EncodedExample],
    dev: list[EncodedExample],
    config: TrainConfig,
    validate_fn=None,
    on_improve=None,
    progress: bool = False,
) -> tuple[Seq2SeqModel, TrainLog]:
    """Fine-tuning phase: the same restart/stop loop with plain SGD and the
    tighter gradient clip."""
    return _run(
        model, train, dev, config,
        make_optimizer=lambda lr: Sgd(model.parameters(), lr),
        lr0=config.finetune_learning_rate,
        clip_norm=config.finetune_clip_norm,
        validate_fn=validate_fn,
        on_improve=on_improve,
        progress=progress,
        seed_best_with_initial=True,
    )
