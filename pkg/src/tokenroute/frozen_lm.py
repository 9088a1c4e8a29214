"""A small seeded causal transformer that stays frozen after construction.

The model only has to provide stable contextual features: hidden states for
routing, per-token embeddings for the similarity scorer, and a word-token
distribution that agent-token masking must reproduce. It is never trained.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ChecksumMismatch, ConfigError

FORMAT_VERSION = 1

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
SPECIALS = (PAD, UNK, BOS, EOS)
PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3

_TOKEN_RE = re.compile(r"[a-z0-9_]+|[^\sa-z0-9_]")

# Query/key weights are scaled down: a random untrained model has no useful
# content-based attention, so attention is set by the distance penalty below.
_QK_SCALE = 0.1
# Per-layer distance penalty. The first layer pools the whole prefix evenly so
# the last position carries every word of the prompt (several tasks in one
# prompt stay visible side by side); later layers attend almost only to the
# current position and act as per-token mixing.
_POOL_SLOPE = 0.0
_LOCAL_SLOPE = 3.0
# Attention output gain relative to the residual stream. Value and output maps
# are orthogonal so pooling keeps the geometry of the token embeddings.
_ATTN_GAIN = 10.0


def split_words(text: str) -> list[str]:
    """Lowercase and split on whitespace, keeping punctuation as tokens."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    hidden_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_context: int = 256
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "hidden_dim", "n_layers", "n_heads", "max_context"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.hidden_dim % self.n_heads:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}"
            )
        if self.max_context < 8:
            raise ConfigError(f"max_context must be >= 8, got {self.max_context}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "hidden_dim": self.hidden_dim,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "max_context": self.max_context,
            "seed": self.seed,
        }


class Vocabulary:
    """Bijective token/id map whose first four ids are the special tokens."""

    def __init__(self, tokens: Iterable[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != SPECIALS:
            raise ConfigError("vocabulary must start with the four special tokens")
        self.token_strings: list[str] = tokens
        self.id_of: dict[str, int] = {t: i for i, t in enumerate(tokens)}
        if len(self.id_of) != len(tokens):
            raise ConfigError("vocabulary contains duplicate tokens")

    @classmethod
    def from_corpus(cls, texts: Iterable[str]) -> "Vocabulary":
        words = set()
        for text in texts:
            words.update(split_words(text))
        words.difference_update(SPECIALS)
        return cls([*SPECIALS, *sorted(words)])

    def __len__(self) -> int:
        return len(self.token_strings)

    def __contains__(self, token: str) -> bool:
        return token in self.id_of

    def dump(self) -> str:
        return "".join(t + "\n" for t in self.token_strings)

    @classmethod
    def load(cls, text: str) -> "Vocabulary":
        return cls(text.splitlines())

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.token_strings == other.token_strings


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class HiddenStates:
    matrix: np.ndarray

    @property
    def last(self) -> np.ndarray:
        return self.matrix[-1]


@dataclass(frozen=True)
class FrozenModel:
    config: ModelConfig
    weights: dict = field(repr=False)
    vocab: Vocabulary | None = field(default=None, repr=False, compare=False)

    def tokenize(self, text: str) -> TokenSequence:
        if self.vocab is None:
            raise ConfigError("model has no vocabulary attached")
        return tokenize(text, self.vocab, self.config.max_context)

    @property
    def word_head(self) -> np.ndarray:
        # The output head is tied to the input embedding table.
        return self.weights["tok_emb"]

    def checksum(self) -> str:
        digest = hashlib.sha256()
        digest.update(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        for name in sorted(self.weights):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(self.weights[name]).tobytes())
        if self.vocab is not None:
            digest.update(self.vocab.dump().encode())
        return digest.hexdigest()


def _freeze(arrays: dict) -> dict:
    for arr in arrays.values():
        arr.flags.writeable = False
    return arrays


def _orthogonal(a: np.ndarray) -> np.ndarray:
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))  # sign fix makes the factor unique


def build_model(config: ModelConfig, vocab: Vocabulary | None = None) -> FrozenModel:
    if vocab is not None and len(vocab) != config.vocab_size:
        raise ConfigError(f"vocabulary has {len(vocab)} tokens but vocab_size is {config.vocab_size}")
    rng = np.random.default_rng(config.seed)
    d, V = config.hidden_dim, config.vocab_size
    w: dict[str, np.ndarray] = {}
    w["tok_emb"] = 0.5 / np.sqrt(d) * rng.standard_normal((V, d))
    w["pos_emb"] = 0.02 * rng.standard_normal((config.max_context, d))
    w["alibi"] = np.full((config.n_layers, config.n_heads), _LOCAL_SLOPE)
    w["alibi"][0] = _POOL_SLOPE
    scale = 1.0 / np.sqrt(d)
    for layer in range(config.n_layers):
        qkv = scale * rng.standard_normal((d, 3 * d))
        qkv[:, : 2 * d] *= _QK_SCALE
        qkv[:, 2 * d:] = _orthogonal(qkv[:, 2 * d:])
        w[f"l{layer}.qkv"] = qkv
        w[f"l{layer}.proj"] = _ATTN_GAIN * _orthogonal(rng.standard_normal((d, d)))
        w[f"l{layer}.fc1"] = scale * rng.standard_normal((d, 4 * d))
        w[f"l{layer}.fc2"] = 0.5 / np.sqrt(4 * d) * rng.standard_normal((4 * d, d))
    return FrozenModel(config, _freeze(w), vocab)


def tokenize(text: str, vocab: Vocabulary, max_context: int = 256) -> TokenSequence:
    ids = [BOS_ID] + [vocab.id_of.get(t, UNK_ID) for t in split_words(text)]
    truncated = len(ids) > max_context
    return TokenSequence(tuple(ids[:max_context]), truncated)


def _layer_norm(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x**3)))


def _row_matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # Row-at-a-time products keep each output row independent of how many rows
    # are in the batch, so causal prefixes are reproduced bit-for-bit.
    return np.stack([r @ w for r in x])


def _check_ids(ids: np.ndarray, cfg: ModelConfig) -> None:
    if len(ids) and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ValueError("token id out of range for this model")


def _forward(ids: np.ndarray, model: FrozenModel, past=None, offset: int = 0):
    """Run rows ``offset..offset+len(ids)`` given cached keys/values for earlier rows."""
    cfg, w = model.config, model.weights
    H, hd, d = cfg.n_heads, cfg.head_dim, cfg.hidden_dim
    n = len(ids)
    x = w["tok_emb"][ids] + w["pos_emb"][offset:offset + n]
    kv = []
    for layer in range(cfg.n_layers):
        qkv = _row_matmul(_layer_norm(x), w[f"l{layer}.qkv"])
        q, k, v = (qkv[:, i * d:(i + 1) * d].reshape(n, H, hd) for i in range(3))
        if past is not None:
            k = np.concatenate([past[layer][0], k])
            v = np.concatenate([past[layer][1], v])
        kv.append((k, v))
        att = np.empty((n, H, hd))
        for r in range(n):
            p = offset + r
            scores = np.einsum("hd,thd->ht", q[r], k[: p + 1]) / np.sqrt(hd)
            scores -= w["alibi"][layer][:, None] * np.arange(p, -1, -1)
            scores -= scores.max(axis=1, keepdims=True)
            probs = np.exp(scores)
            probs /= probs.sum(axis=1, keepdims=True)
            att[r] = np.einsum("ht,thd->hd", probs, v[: p + 1])
        x = x + _row_matmul(att.reshape(n, d), w[f"l{layer}.proj"])
        hidden = _gelu(_row_matmul(_layer_norm(x), w[f"l{layer}.fc1"]))
        x = x + _row_matmul(hidden, w[f"l{layer}.fc2"])
    return _layer_norm(x), kv


def encode(tokens: TokenSequence | Iterable[int], model: FrozenModel) -> HiddenStates:
    ids = np.asarray(tokens.ids if isinstance(tokens, TokenSequence) else list(tokens), dtype=np.int64)
    n = len(ids)
    if n == 0:
        raise ValueError("cannot encode an empty token sequence")
    if n > model.config.max_context:
        raise ValueError(f"sequence length {n} exceeds max_context {model.config.max_context}")
    _check_ids(ids, model.config)
    return HiddenStates(_forward(ids, model)[0])


class PrefixCache:
    """Keys/values of a fixed prompt prefix, reused across many suffixes.

    ``cache.encode(suffix)`` equals ``encode(prefix + suffix)`` bit-for-bit
    because every row is computed by the same per-row operations.
    """

    def __init__(self, model: FrozenModel, prefix_ids: Iterable[int]):
        self.model = model
        self.prefix_ids = tuple(int(i) for i in prefix_ids)
        if not self.prefix_ids:
            raise ValueError("prefix must contain at least one token")
        hidden = encode(self.prefix_ids, model)
        self._rows = hidden.matrix
        _, self._kv = _forward(np.asarray(self.prefix_ids), model)

    def encode(self, suffix_ids: Iterable[int]) -> HiddenStates:
        suffix = np.asarray(list(suffix_ids), dtype=np.int64)
        total = len(self.prefix_ids) + len(suffix)
        if total > self.model.config.max_context:
            raise ValueError(f"sequence length {total} exceeds max_context {self.model.config.max_context}")
        if len(suffix) == 0:
            return HiddenStates(self._rows)
        _check_ids(suffix, self.model.config)
        rows, _ = _forward(suffix, self.model, self._kv, offset=len(self.prefix_ids))
        return HiddenStates(np.concatenate([self._rows, rows]))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits)
    e = np.exp(z)
    return e / e.sum()


def base_distribution(h: np.ndarray, model: FrozenModel) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (model.config.hidden_dim,):
        raise ValueError(f"hidden vector has shape {h.shape}, expected ({model.config.hidden_dim},)")
    if not np.all(np.isfinite(h)):
        raise ValueError("hidden vector contains non-finite entries")
    return softmax(model.word_head @ h)


def save_model(model: FrozenModel, path: str | Path) -> None:
    payload = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "seed": model.config.seed,
        "checksum": model.checksum(),
        "vocab": model.vocab.token_strings if model.vocab is not None else None,
        "weights": {
            name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
            for name, arr in sorted(model.weights.items())
        },
    }
    Path(path).write_text(json.dumps(payload))


def load_model(path: str | Path) -> FrozenModel:
    payload = json.loads(Path(path).read_text())
    if payload.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported model format {payload.get('format_version')!r}")
    config = ModelConfig(**payload["config"])
    weights = {
        name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in payload["weights"].items()
    }
    vocab = Vocabulary(payload["vocab"]) if payload.get("vocab") is not None else None
    model = FrozenModel(config, _freeze(weights), vocab)
    if model.checksum() != payload["checksum"]:
        raise ChecksumMismatch("model checkpoint checksum does not match its weights")
    return model
