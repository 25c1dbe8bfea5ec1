"""Token, order and static embeddings and their weighted composition.

The model input for one episode is ``x = w * (P + O) + (1 - w) * S`` where ``P``
stacks token embeddings, ``O`` is the sinusoidal order encoding of the token
positions and ``S`` is the sum of static-category embeddings, added to every row.
"""
from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .netcore import autodiff as ad
from .netcore.autodiff import Parameter, Tensor


class ConfigError(ValueError):
    pass


def check_weight(w: float) -> float:
    if not 0.0 <= w <= 1.0:
        raise ConfigError(f"composition weight w must lie in [0, 1], got {w}")
    return float(w)


# "normal" keeps a token row on the same scale as an order-encoding row; with
# the 1/sqrt(d) uniform draw the mean of O over positions (a function of the
# sequence length alone) dominates the pooled input.
_INITIALIZERS = {
    "normal": lambda rng, shape: rng.normal(0.0, 1.0, size=shape),
    "uniform": lambda rng, shape: rng.uniform(-1.0, 1.0, size=shape) / np.sqrt(shape[1]),
}


class EmbeddingTables:
    """Trainable token table ``v`` and one table per static variable."""

    def __init__(
        self,
        vocab_size: int,
        static_categories: Mapping[str, int],
        dim: int,
        w: float,
        rng: np.random.Generator | None = None,
        init: str = "normal",
    ):
        if dim % 2:
            raise ConfigError(f"embedding dimension must be even for the order encoding, got {dim}")
        self.dim = dim
        self.w = check_weight(w)
        rng = rng if rng is not None else np.random.default_rng(0)
        draw = _INITIALIZERS.get(init)
        if draw is None:
            raise ConfigError(f"unknown embedding init {init!r}; choose from {sorted(_INITIALIZERS)}")
        self.tokens = Parameter(draw(rng, (vocab_size, dim)), name="v")
        self.statics = {
            name: Parameter(draw(rng, (n, dim)), name=f"E[{name}]") for name, n in static_categories.items()
        }

    @property
    def static_names(self) -> list[str]:
        return list(self.statics)

    def parameters(self) -> list[Tensor]:
        return [self.tokens, *self.statics.values()]


def lookup_tokens(indices: Sequence[int], tables: EmbeddingTables) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    return ad.gather(tables.tokens, idx)


_ORDER_CACHE: dict[tuple[int, int], np.ndarray] = {}


def order_encoding(length: int, dim: int) -> np.ndarray:
    """Sinusoidal encoding of positions ``0..length-1`` (Transformer style)."""
    if dim % 2:
        raise ConfigError(f"order encoding needs an even dimension, got {dim}")
    key = (length, dim)
    cached = _ORDER_CACHE.get(key)
    if cached is None:
        pos = np.arange(length, dtype=float)[:, None]
        freq = np.power(10000.0, np.arange(0, dim, 2, dtype=float) / dim)
        cached = np.zeros((length, dim))
        cached[:, 0::2] = np.sin(pos / freq)
        cached[:, 1::2] = np.cos(pos / freq)
        cached.setflags(write=False)
        if length <= 4096:
            _ORDER_CACHE[key] = cached
    return cached


def static_embedding(statics: Mapping[str, int], tables: EmbeddingTables) -> Tensor:
    """Sum over static variables of the row picked by the episode's category."""
    total: Tensor = Tensor(np.zeros(tables.dim))
    for name, table in tables.statics.items():
        if name not in statics:
            raise KeyError(f"episode lacks static variable {name!r}")
        c = int(statics[name])
        if not 0 <= c < table.shape[0]:
            raise ValueError(f"unknown category {c} for static variable {name!r}")
        total = ad.add(total, ad.gather(table, c))
    return total


def compose_input(P: Tensor, O, S: Tensor, w: float) -> Tensor:
    w = check_weight(w)
    return ad.add(ad.mul(ad.add(P, O), w), ad.mul(S, 1.0 - w))


def pad_sequences(sequences: Sequence[Sequence[int]], max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Truncate/pad index sequences to a common length; returns ``(indices, mask)``."""
    longest = min(max((len(s) for s in sequences), default=0), max_len)
    L = max(longest, 1)
    idx = np.zeros((len(sequences), L), dtype=np.int64)
    mask = np.zeros((len(sequences), L))
    for i, s in enumerate(sequences):
        s = list(s)[:max_len]
        idx[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return idx, mask


def static_matrix(statics: Sequence[Mapping[str, int]], tables: EmbeddingTables) -> np.ndarray:
    cats = np.zeros((len(statics), len(tables.statics)), dtype=np.int64)
    for j, (name, table) in enumerate(tables.statics.items()):
        for i, s in enumerate(statics):
            c = int(s[name])
            if not 0 <= c < table.shape[0]:
                raise ValueError(f"unknown category {c} for static variable {name!r}")
            cats[i, j] = c
    return cats


def batch_static_embedding(cats: np.ndarray, tables: EmbeddingTables) -> Tensor:
    S: Tensor = Tensor(np.zeros((cats.shape[0], tables.dim)))
    for j, table in enumerate(tables.statics.values()):
        S = ad.add(S, ad.gather(table, cats[:, j]))
    return S


def encode_tokens_batch(idx: np.ndarray, mask: np.ndarray, tables: EmbeddingTables) -> Tensor:
    """Token-level ``P + O`` for a padded batch, zeroed on padding rows: ``(N, L, d)``."""
    P = ad.gather(tables.tokens, idx)
    O = order_encoding(idx.shape[1], tables.dim)
    return ad.mul(ad.add(P, O), mask[:, :, None])


def pooled_input(idx: np.ndarray, mask: np.ndarray, cats: np.ndarray, tables: EmbeddingTables) -> Tensor:
    """Masked mean over the rows of ``x``, shape ``(N, d)``.

    Written as ``w * mean(P + O) + (1 - w) * S`` which equals the row mean of
    ``x`` for any non-empty sequence and reduces to ``(1 - w) * S`` when the
    episode has no in-window tokens.
    """
    tokens = encode_tokens_batch(idx, mask, tables)
    counts = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
    mean_tokens = ad.mul(ad.sum(tokens, axis=1), 1.0 / counts)
    S = batch_static_embedding(cats, tables)
    return ad.add(ad.mul(mean_tokens, tables.w), ad.mul(S, 1.0 - tables.w))


def token_input(idx: np.ndarray, mask: np.ndarray, cats: np.ndarray, tables: EmbeddingTables) -> Tensor:
    """Token-level ``x`` for a padded batch, ``(N, L, d)``; padding rows are zero."""
    tokens = encode_tokens_batch(idx, mask, tables)
    S = batch_static_embedding(cats, tables)
    S_rows = ad.mul(ad.expand_rows(S, idx.shape[1]), mask[:, :, None])
    return ad.add(ad.mul(tokens, tables.w), ad.mul(S_rows, 1.0 - tables.w))
