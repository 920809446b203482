"""Encoder-decoder Transformer with an optional routing layer in each decoder block.

Encoder block:  z <- LN(z + SAN(z));  z <- LN(z + FFN(z))
Decoder block:  h <- LN(z + S(z));  h <- LN(h + C(h, enc));  h <- LN(h + FFN(h))

``S`` is self-attention, wrapped by the shared routing layer when
``dr_position`` is ``after_san`` or ``shared_only``. ``C`` is cross-attention,
wrapped when ``dr_position`` is ``after_can``. With ``pre_norm=True`` each
sublayer instead sees ``LN(z)`` and the stack ends with a final LN.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import BOS_ID, EOS_ID, PAD_ID, Vocab, tokenize
from .errors import ConfigError, DataError, ShapeError, VocabError
from .routing import PLACEMENTS, DRParams, dr_forward, init_dr, placement_mode

NEG_INF = -1e9
DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 64
    d_gate_hidden: int = 16
    dropout_p: float = 0.1
    max_len: int = 64
    vocab_size: int = 0
    dr_position: str = "after_san"
    dr_noise: bool = False
    dr_noise_std: float = 1.0
    pre_norm: bool = False
    tie_embeddings: bool = False
    ln_eps: float = 1e-5
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} must be a positive multiple of n_heads={self.n_heads}")
        if self.d_gate_hidden < 1:
            raise ConfigError("d_gate_hidden must be >= 1")
        if self.n_enc_layers < 0 or self.n_dec_layers < 0 or self.d_ff < 1:
            raise ConfigError("layer counts must be >= 0 and d_ff >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.dr_position not in PLACEMENTS:
            raise ConfigError(f"unknown dr_position {self.dr_position!r}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")
        if self.max_len < 1:
            raise ConfigError("max_len must be >= 1")

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        return cls(**{**dict(d_model=32, n_heads=4, d_ff=64, d_gate_hidden=16), **overrides})

    @classmethod
    def paper_scale(cls, **overrides) -> "ModelConfig":
        base = dict(
            d_model=1536, n_heads=16, n_enc_layers=6, n_dec_layers=6, d_ff=4096,
            d_gate_hidden=256, dropout_p=0.2, max_len=1024,
        )
        return cls(**{**base, **overrides})

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]


def prepare_source(lang: str, source, vocab: Vocab, domain_tag_policy: str = "none") -> list[int]:
    """``[<2lang>] + tokens + [<eos>]``; the domain is never part of the input."""
    if domain_tag_policy != "none":
        raise ConfigError("domain tags are never injected into the source")
    tag = vocab.lang_id(lang)
    ids = tokenize(source, vocab) if isinstance(source, str) else [int(i) for i in source]
    return [tag, *ids, EOS_ID]


def sinusoidal_positions(length: int, d_model: int, max_len: int | None = None, dtype=np.float32) -> np.ndarray:
    """Interleaved sine/cosine table: even columns sin, odd columns cos, base 10000."""
    if max_len is not None and length > max_len:
        raise ShapeError(f"sequence length {length} exceeds max_len {max_len}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(d_model)
    rate = 1.0 / np.power(10000.0, (2 * (i // 2)) / d_model)
    angles = pos * rate[None, :]
    table = np.where(i % 2 == 0, np.sin(angles), np.cos(angles))
    return table.astype(dtype).reshape(length, d_model)


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out))


class Transformer:
    """Parameter container plus forward passes. Parameters are held in ``self.params``."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], dr: DRParams | None):
        self.config = config
        self.params = params
        self.dr = dr
        self.routing = placement_mode(config)
        if self.routing.enabled and dr is None:
            raise ConfigError(f"dr_position={config.dr_position} needs routing parameters")
        if dr is not None and dr.gated != self.routing.gated:
            raise ConfigError("routing parameter set does not match dr_position")
        self._pos_cache: dict[int, np.ndarray] = {}

    # ------------------------------------------------------------ construction

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "Transformer":
        if config.vocab_size < 1:
            raise ConfigError("vocab_size must be set before building a model")
        dt = config.np_dtype
        d, f, v = config.d_model, config.d_ff, config.vocab_size
        rng = np.random.default_rng(seed)
        p: dict[str, Tensor] = {}

        def put(name, arr):
            p[name] = ad.parameter(arr, name, dt)

        emb = rng.normal(0.0, d ** -0.5, (v, d))
        emb[PAD_ID] = 0.0
        put("embed.tokens", emb)

        def attn(prefix):
            for w in ("q", "k", "v", "o"):
                put(f"{prefix}.w{w}", _xavier(rng, d, d))
                put(f"{prefix}.b{w}", np.zeros(d))

        def ln(prefix):
            put(f"{prefix}.g", np.ones(d))
            put(f"{prefix}.b", np.zeros(d))

        def ffn(prefix):
            put(f"{prefix}.w1", _xavier(rng, d, f))
            put(f"{prefix}.b1", np.zeros(f))
            put(f"{prefix}.w2", _xavier(rng, f, d))
            put(f"{prefix}.b2", np.zeros(d))

        for i in range(config.n_enc_layers):
            attn(f"enc.{i}.san")
            ln(f"enc.{i}.ln1")
            ffn(f"enc.{i}.ffn")
            ln(f"enc.{i}.ln2")
        for i in range(config.n_dec_layers):
            attn(f"dec.{i}.san")
            ln(f"dec.{i}.ln1")
            attn(f"dec.{i}.can")
            ln(f"dec.{i}.ln2")
            ffn(f"dec.{i}.ffn")
            ln(f"dec.{i}.ln3")
        if config.pre_norm:
            ln("enc.ln_f")
            ln("dec.ln_f")
        if not config.tie_embeddings:
            # small output weights keep the initial prediction close to uniform
            put("out.proj", rng.normal(0.0, 0.02, (d, v)))

        routing = placement_mode(config)
        dr = None
        if routing.enabled:
            # separate stream so the backbone init does not depend on dr_position
            dr = init_dr(
                d, config.d_gate_hidden, np.random.SeedSequence([seed, 0xD2]),
                gated=routing.gated,
                noise_std=config.dr_noise_std if config.dr_noise else 0.0,
                dtype=dt,
            )
        return cls(config, p, dr)

    def named_parameters(self) -> dict[str, Tensor]:
        out = dict(self.params)
        if self.dr is not None:
            out.update(self.dr.named_tensors())
        return out

    def num_parameters(self) -> int:
        return sum(t.size for t in self.named_parameters().values())

    @classmethod
    def from_tensors(cls, config: ModelConfig, tensors: dict[str, np.ndarray]) -> "Transformer":
        """Rebuild a model from named arrays; names must match the config exactly."""
        template = cls.init(config, seed=0)
        expected = template.named_parameters()
        missing = sorted(set(expected) - set(tensors))
        unexpected = sorted(set(tensors) - set(expected))
        if missing or unexpected:
            raise ConfigError(
                f"parameter-set mismatch for dr_position={config.dr_position}: "
                f"missing {missing}, unexpected {unexpected}"
            )
        for name, t in expected.items():
            arr = np.asarray(tensors[name])
            if arr.shape != t.shape:
                raise ConfigError(f"parameter {name}: shape {arr.shape} != expected {t.shape}")
            t.data = np.ascontiguousarray(arr, dtype=config.np_dtype)
        return template

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self.named_parameters().items():
            t.data = state[k].copy()

    # ------------------------------------------------------------ building blocks

    def _positions(self, length: int) -> Tensor:
        table = self._pos_cache.get(length)
        if table is None:
            table = sinusoidal_positions(length, self.config.d_model, self.config.max_len, self.config.np_dtype)
            self._pos_cache[length] = table
        return Tensor(table)

    def _linear(self, x: Tensor, w: str, b: str | None = None) -> Tensor:
        y = ad.matmul(x, self.params[w])
        return y + self.params[b] if b else y

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return ad.layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"], self.config.ln_eps)

    def _attention(self, prefix: str, xq: Tensor, xkv: Tensor, mask: Tensor | None) -> Tensor:
        b, t, d = xq.shape
        s = xkv.shape[1]
        h = self.config.n_heads
        dh = d // h
        q = self._linear(xq, f"{prefix}.wq", f"{prefix}.bq").reshape(b, t, h, dh).transpose(0, 2, 1, 3)
        k = self._linear(xkv, f"{prefix}.wk", f"{prefix}.bk").reshape(b, s, h, dh).transpose(0, 2, 3, 1)
        v = self._linear(xkv, f"{prefix}.wv", f"{prefix}.bv").reshape(b, s, h, dh).transpose(0, 2, 1, 3)
        scores = ad.scale(ad.matmul(q, k), 1.0 / math.sqrt(dh))
        if mask is not None:
            scores = scores + mask
        ctx = ad.matmul(ad.softmax(scores, axis=-1), v)
        ctx = ctx.transpose(0, 2, 1, 3).reshape(b, t, d)
        return self._linear(ctx, f"{prefix}.wo", f"{prefix}.bo")

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        hidden = ad.relu(self._linear(x, f"{prefix}.w1", f"{prefix}.b1"))
        return self._linear(hidden, f"{prefix}.w2", f"{prefix}.b2")

    def _embed(self, ids: np.ndarray, train: bool, rng, p: float) -> Tensor:
        if ids.size and ids.max() >= self.config.vocab_size:
            raise VocabError(f"token id {int(ids.max())} outside vocabulary of {self.config.vocab_size}")
        x = ad.scale(ad.embedding(self.params["embed.tokens"], ids), math.sqrt(self.config.d_model))
        x = x + self._positions(ids.shape[1])
        return ad.dropout(x, p, rng, train)

    def _sublayer(self, x: Tensor, fn, ln_prefix: str, train: bool, rng, p: float) -> Tensor:
        """Residual + LN around ``fn``; ``fn`` receives the sublayer input and returns its output."""
        if self.config.pre_norm:
            return x + ad.dropout(fn(self._ln(x, ln_prefix)), p, rng, train)
        return self._ln(x + ad.dropout(fn(x), p, rng, train), ln_prefix)

    def _routed(self, fn, train: bool, rng, trace, block: int, site: str):
        def wrapped(z):
            out = fn(z)
            sink = None
            if trace is not None:
                sink = []
            y = dr_forward(z, out, self.dr, train, rng, sink)
            if sink:
                trace.append({"block": block, "site": site, "gate": sink[0]})
            return y

        return wrapped

    # ------------------------------------------------------------ forward passes

    def _dropout_p(self, dropout_p: float | None) -> float:
        return self.config.dropout_p if dropout_p is None else dropout_p

    def encode_batch(
        self, src: np.ndarray, train: bool = False, rng=None, dropout_p: float | None = None
    ) -> tuple[Tensor, Tensor]:
        """Encode a padded ``[B, S]`` id array. Returns states and the additive key mask."""
        src = np.asarray(src, dtype=np.int64)
        if src.ndim != 2:
            raise ShapeError(f"encode_batch expects [B, S] ids, got shape {src.shape}")
        p = self._dropout_p(dropout_p)
        mask = Tensor(np.where(src == PAD_ID, NEG_INF, 0.0)[:, None, None, :], dtype=self.config.np_dtype)
        z = self._embed(src, train, rng, p)
        for i in range(self.config.n_enc_layers):
            z = self._sublayer(z, lambda x, i=i: self._attention(f"enc.{i}.san", x, x, mask), f"enc.{i}.ln1", train, rng, p)
            z = self._sublayer(z, lambda x, i=i: self._ffn(f"enc.{i}.ffn", x), f"enc.{i}.ln2", train, rng, p)
        if self.config.pre_norm:
            z = self._ln(z, "enc.ln_f")
        return z, mask

    def encode(self, src_ids: Sequence[int]) -> Tensor:
        """Encode one sequence; returns ``[S, d_model]``."""
        ids = np.asarray(src_ids, dtype=np.int64)[None, :]
        with ad.no_grad():
            z, _ = self.encode_batch(ids)
        return z.reshape(ids.shape[1], self.config.d_model)

    def decode_batch(
        self,
        tgt_in: np.ndarray,
        enc: Tensor,
        src_mask: Tensor | None,
        train: bool = False,
        rng=None,
        dropout_p: float | None = None,
        trace: list | None = None,
    ) -> Tensor:
        """Teacher-forced decoder over ``[B, T]`` inputs; returns ``[B, T, V]`` logits."""
        tgt_in = np.asarray(tgt_in, dtype=np.int64)
        if enc.shape[-1] != self.config.d_model:
            raise ShapeError(f"encoder states width {enc.shape[-1]} != d_model {self.config.d_model}")
        p = self._dropout_p(dropout_p)
        t = tgt_in.shape[1]
        causal = Tensor(np.triu(np.full((t, t), NEG_INF), k=1)[None, None], dtype=self.config.np_dtype)
        r = self.routing
        h = self._embed(tgt_in, train, rng, p)
        for i in range(self.config.n_dec_layers):
            san = lambda x, i=i: self._attention(f"dec.{i}.san", x, x, causal)
            can = lambda x, i=i: self._attention(f"dec.{i}.can", x, enc, src_mask)
            if r.after_san:
                san = self._routed(san, train, rng, trace, i, "san")
            if r.after_can:
                can = self._routed(can, train, rng, trace, i, "can")
            h = self._sublayer(h, san, f"dec.{i}.ln1", train, rng, p)
            h = self._sublayer(h, can, f"dec.{i}.ln2", train, rng, p)
            h = self._sublayer(h, lambda x, i=i: self._ffn(f"dec.{i}.ffn", x), f"dec.{i}.ln3", train, rng, p)
        if self.config.pre_norm:
            h = self._ln(h, "dec.ln_f")
        if self.config.tie_embeddings:
            return ad.matmul(h, ad.transpose(self.params["embed.tokens"], (1, 0)))
        return ad.matmul(h, self.params["out.proj"])

    def decode_step(self, tgt_prefix_ids: Sequence[int], enc_states: Tensor) -> Tensor:
        """Logits ``[T, V]`` for a single target prefix (starting with ``<bos>``)."""
        if enc_states.ndim != 2 or enc_states.shape[1] != self.config.d_model:
            raise ShapeError(f"encoder states must be [S, {self.config.d_model}], got {enc_states.shape}")
        ids = np.asarray(tgt_prefix_ids, dtype=np.int64)[None, :]
        with ad.no_grad():
            enc = enc_states.reshape(1, *enc_states.shape)
            logits = self.decode_batch(ids, enc, None)
        return logits.reshape(ids.shape[1], self.config.vocab_size)

    def loss(
        self,
        src: np.ndarray,
        tgt_in: np.ndarray,
        tgt_out: np.ndarray,
        label_smoothing: float = 0.1,
        train: bool = False,
        rng=None,
        dropout_p: float | None = None,
    ) -> Tensor:
        enc, mask = self.encode_batch(src, train, rng, dropout_p)
        logits = self.decode_batch(tgt_in, enc, mask, train, rng, dropout_p)
        return ad.cross_entropy_label_smoothed(logits, tgt_out, label_smoothing, PAD_ID)

    # ------------------------------------------------------------ incremental decoding protocol

    @property
    def eos_id(self) -> int:
        return EOS_ID

    @property
    def banned_ids(self) -> tuple[int, ...]:
        return (PAD_ID, BOS_ID)

    def start(self, src_ids: Sequence[int]) -> Tensor:
        return self.encode(src_ids)

    def next_log_probs(self, enc_states: Tensor, prefixes: Sequence[Sequence[int]]) -> np.ndarray:
        """Log-probabilities ``[n, V]`` of the next token after each (bos-less) prefix."""
        n = len(prefixes)
        lengths = {len(p) for p in prefixes}
        if len(lengths) != 1:
            raise DataError("all prefixes in one call must have the same length")
        tgt = np.empty((n, lengths.pop() + 1), dtype=np.int64)
        tgt[:, 0] = BOS_ID
        for row, pref in enumerate(prefixes):
            tgt[row, 1:] = pref
        with ad.no_grad():
            enc = Tensor(np.broadcast_to(enc_states.data, (n, *enc_states.shape)).copy())
            logits = self.decode_batch(tgt, enc, None).data[:, -1, :].astype(np.float64)
        shifted = logits - logits.max(axis=1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def gate_trace(self, src_ids: Sequence[int], tgt_in: Sequence[int]) -> list[dict]:
        """Gate values per routing site for one teacher-forced example."""
        trace: list[dict] = []
        with ad.no_grad():
            enc, mask = self.encode_batch(np.asarray(src_ids, dtype=np.int64)[None, :])
            self.decode_batch(np.asarray(tgt_in, dtype=np.int64)[None, :], enc, mask, trace=trace)
        return trace
