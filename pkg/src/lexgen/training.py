"""Optimisation: warmup/inverse-sqrt schedule, Adam, token-budget batching, early stopping."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .data import BOS_ID, EOS_ID, PAD_ID, DatasetSplits, LexiconEntry, Vocab, detokenize, tokenize
from .errors import ConfigError, DataError, NumericalError
from .transformer import Transformer, prepare_source

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    warmup_steps: int = 4000
    label_smoothing: float = 0.1
    dropout: float = 0.2
    max_tokens_per_batch: int = 1024
    max_updates: int = 200_000
    max_epochs: int = 10_000
    patience_epochs: int = 5
    seed: int = 1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    grad_clip_norm: float | None = None
    valid_chrf_every: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.patience_epochs < 1:
            raise ConfigError("patience_epochs must be >= 1")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must be in [0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.max_tokens_per_batch < 1 or self.max_updates < 1:
            raise ConfigError("max_tokens_per_batch and max_updates must be >= 1")

    @classmethod
    def toy(cls, **overrides) -> "TrainConfig":
        base = dict(lr=1e-3, warmup_steps=200, dropout=0.1, max_tokens_per_batch=2048, max_updates=5000)
        return cls(**{**base, **overrides})

    @classmethod
    def paper_scale(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self) -> dict:
        return asdict(self)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``cfg.lr`` then ``lr * sqrt(warmup / step)``."""
    if step < 1:
        raise ConfigError(f"step must be >= 1, got {step}")
    w = cfg.warmup_steps
    if w == 0:
        return cfg.lr
    if step <= w:
        return cfg.lr * step / w
    return cfg.lr * math.sqrt(w / step)


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, ad.Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr_t: float,
    beta1: float = 0.9,
    beta2: float = 0.98,
    eps: float = 1e-9,
) -> None:
    """One bias-corrected Adam update, in place. Parameters without a gradient are skipped."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int((~np.isfinite(g)).sum())
            raise NumericalError(f"gradient of {name} has {bad} non-finite values; aborting")
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p.data -= (lr_t * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)


# ---------------------------------------------------------------- data plumbing


@dataclass(frozen=True)
class Example:
    src: tuple[int, ...]
    tgt: tuple[int, ...]  # target tokens followed by <eos>


def encode_entries(entries: Sequence[LexiconEntry], vocab: Vocab, max_len: int, all_targets: bool = True) -> list[Example]:
    """One example per (entry, reference); the source carries the target-language tag."""
    out = []
    for e in entries:
        src = prepare_source(e.tgt_lang, e.source, vocab)
        refs = e.targets if all_targets else e.targets[:1]
        for ref in refs:
            tgt = tokenize(ref, vocab) + [EOS_ID]
            if len(src) > max_len or len(tgt) > max_len:
                raise DataError(f"entry {e.source!r} is longer than max_len={max_len}")
            out.append(Example(tuple(src), tuple(tgt)))
    return out


def collate(batch: Sequence[Example]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    s = max(len(x.src) for x in batch)
    t = max(len(x.tgt) for x in batch)
    src = np.full((len(batch), s), PAD_ID, dtype=np.int64)
    tgt_in = np.full((len(batch), t), PAD_ID, dtype=np.int64)
    tgt_out = np.full((len(batch), t), PAD_ID, dtype=np.int64)
    for i, x in enumerate(batch):
        src[i, : len(x.src)] = x.src
        tgt_out[i, : len(x.tgt)] = x.tgt
        tgt_in[i, 0] = BOS_ID
        tgt_in[i, 1: len(x.tgt)] = x.tgt[:-1]
    return src, tgt_in, tgt_out


def make_batches(examples: Sequence[Example], max_tokens: int, seed: int, epoch: int) -> list[list[Example]]:
    """Length-bucketed batches under a padded-token budget, shuffled per (seed, epoch)."""
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(examples))
    # stable sort keeps the shuffled order among equal lengths
    order = sorted(order, key=lambda i: len(examples[i].src) + len(examples[i].tgt))
    batches: list[list[Example]] = []
    cur: list[Example] = []
    width = 0
    for i in order:
        x = examples[i]
        w = max(width, len(x.src) + len(x.tgt))
        if cur and w * (len(cur) + 1) > max_tokens:
            batches.append(cur)
            cur, w = [], len(x.src) + len(x.tgt)
        cur.append(x)
        width = w
    if cur:
        batches.append(cur)
    perm = rng.permutation(len(batches))
    return [batches[i] for i in perm]


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Counter-based generator for one update: same (seed, step) -> same dropout masks."""
    return np.random.Generator(np.random.Philox(key=seed & (2**64 - 1), counter=[step, 0, 0, 0]))


# ---------------------------------------------------------------- logging and early stopping


@dataclass
class TrainLog:
    steps: list[tuple[int, float, float, float]] = field(default_factory=list)
    epochs: list[tuple[int, int, float, float]] = field(default_factory=list)

    def record_step(self, step: int, loss: float, lr: float, grad_norm: float) -> None:
        if self.steps and step <= self.steps[-1][0]:
            raise ValueError("step indices must increase")
        self.steps.append((step, loss, lr, grad_norm))

    def record_epoch(self, epoch: int, step: int, val_loss: float, val_chrf: float) -> None:
        self.epochs.append((epoch, step, val_loss, val_chrf))

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        with (out / "train_log.tsv").open("w", encoding="utf-8") as fh:
            fh.write("step\tloss\tlr\tgrad_norm\n")
            for s, l, lr, gn in self.steps:
                fh.write(f"{s}\t{l:.6f}\t{lr:.6g}\t{gn:.6f}\n")
        with (out / "valid_log.tsv").open("w", encoding="utf-8") as fh:
            fh.write("epoch\tstep\tval_loss\tval_chrf\n")
            for e, s, vl, vc in self.epochs:
                fh.write(f"{e}\t{s}\t{vl:.6f}\t{vc:.4f}\n")


class EarlyStopping:
    """Tracks the best validation loss; ``update`` returns True once patience runs out."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ConfigError("patience must be >= 1")
        self.patience = patience
        self.best = math.inf
        self.best_epoch: int | None = None
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class TrainResult:
    model: Transformer
    log: TrainLog
    best_val_loss: float
    best_step: int
    epochs: int
    stop_reason: str


def dataset_loss(model: Transformer, examples: Sequence[Example], label_smoothing: float, max_tokens: int) -> float:
    """Token-weighted mean loss without dropout."""
    total = 0.0
    count = 0
    with ad.no_grad():
        for batch in make_batches(examples, max_tokens, 0, 0):
            src, tgt_in, tgt_out = collate(batch)
            n = int((tgt_out != PAD_ID).sum())
            total += model.loss(src, tgt_in, tgt_out, label_smoothing, train=False).item() * n
            count += n
    return total / count


def translate(model: Transformer, vocab: Vocab, entries: Sequence[LexiconEntry], max_len: int | None = None) -> list[str]:
    from .decoding import greedy

    out = []
    limit = max_len or model.config.max_len
    for e in entries:
        hyp = greedy(model, prepare_source(e.tgt_lang, e.source, vocab), limit)
        out.append(detokenize(hyp.body(EOS_ID), vocab))
    return out


def _grad_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def train(
    model: Transformer,
    splits: DatasetSplits,
    cfg: TrainConfig,
    vocab: Vocab,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Teacher-forced training with per-epoch validation and best-checkpoint restore.

    Without a validation split the final parameters are returned and only
    ``max_updates``/``max_epochs`` stop training.
    """
    from .evaluation import chrf_pp

    if not splits.train:
        raise ConfigError("training split is empty")
    max_len = model.config.max_len
    train_ex = encode_entries(splits.train, vocab, max_len)
    valid_ex = encode_entries(splits.valid, vocab, max_len) if splits.valid else []
    params = model.named_parameters()
    state = AdamState()
    tlog = TrainLog()
    stopper = EarlyStopping(cfg.patience_epochs)
    best_state = model.state_dict()
    best_step = 0
    step = 0
    epoch = 0
    reason = "max_epochs"

    while epoch < cfg.max_epochs:
        epoch += 1
        for batch in make_batches(train_ex, cfg.max_tokens_per_batch, cfg.seed, epoch):
            step += 1
            src, tgt_in, tgt_out = collate(batch)
            for p in params.values():
                p.grad = None
            loss = model.loss(
                src, tgt_in, tgt_out, cfg.label_smoothing, train=True,
                rng=step_rng(cfg.seed, step), dropout_p=cfg.dropout,
            )
            loss.backward()
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            gnorm = _grad_norm(grads)
            if cfg.grad_clip_norm and gnorm > cfg.grad_clip_norm:
                factor = cfg.grad_clip_norm / (gnorm + 1e-12)
                grads = {k: g * factor for k, g in grads.items()}
            lr = lr_schedule(step, cfg)
            adam_step(params, grads, state, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            tlog.record_step(step, loss.item(), lr, gnorm)
            if step >= cfg.max_updates:
                break

        if valid_ex:
            val_loss = dataset_loss(model, valid_ex, cfg.label_smoothing, cfg.max_tokens_per_batch)
            val_chrf = float("nan")
            if cfg.valid_chrf_every and epoch % cfg.valid_chrf_every == 0:
                hyps = translate(model, vocab, splits.valid)
                val_chrf = float(np.mean([chrf_pp(h, e.targets) for h, e in zip(hyps, splits.valid)]))
            tlog.record_epoch(epoch, step, val_loss, val_chrf)
            if on_epoch is not None:
                on_epoch(epoch, val_loss)
            improved = val_loss < stopper.best
            stop = stopper.update(epoch, val_loss)
            if improved:
                best_state = model.state_dict()
                best_step = step
            if stop:
                reason = "patience"
                break
        if step >= cfg.max_updates:
            reason = "max_updates"
            break

    if valid_ex:
        model.load_state_dict(best_state)
    else:
        best_step = step
    log.info("training stopped after %d epochs / %d updates (%s)", epoch, step, reason)
    return TrainResult(model, tlog, stopper.best, best_step, epoch, reason)
