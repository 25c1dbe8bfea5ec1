"""Quantile binning of measurements into ``VARIABLE-bin`` tokens.

Cut points are fitted on training data only and are then frozen; applying the
saved thresholds to another cohort must reproduce the same tokens exactly.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .cohort import Episode

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
UNK_TOKEN = "[UNK]"
UNK_INDEX = 0


class VersionMismatchError(ValueError):
    pass


@dataclass
class BinThresholds:
    """Per-variable cut points; ``cuts[var]`` holds ``n_bins - 1`` non-decreasing values."""

    n_bins: int
    cuts: dict[str, tuple[float, ...]]
    effective_bins: dict[str, int] = field(default_factory=dict)
    n_train_values: dict[str, int] = field(default_factory=dict)

    @property
    def variables(self) -> list[str]:
        return list(self.cuts)

    def to_dict(self) -> dict:
        return {
            "n_bins": self.n_bins,
            "cuts": {k: list(v) for k, v in self.cuts.items()},
            "effective_bins": dict(self.effective_bins),
            "n_train_values": dict(self.n_train_values),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BinThresholds":
        return cls(
            n_bins=int(d["n_bins"]),
            cuts={k: tuple(float(x) for x in v) for k, v in d["cuts"].items()},
            effective_bins={k: int(v) for k, v in d.get("effective_bins", {}).items()},
            n_train_values={k: int(v) for k, v in d.get("n_train_values", {}).items()},
        )


@dataclass(frozen=True)
class PseudoText:
    tokens: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


def equal_frequency_cuts(values: Sequence[float], n_bins: int) -> tuple[float, ...]:
    """Cut points giving equal-count bins under the right-open convention.

    With sorted values ``s``, cut ``j`` is ``s[floor(j * n / B)]`` so bin ``j``
    holds ranks ``floor((j-1) n / B) .. floor(j n / B) - 1``.
    """
    s = np.sort(np.asarray(values, dtype=float))
    n = s.size
    if n == 0:
        raise ValueError("cannot fit bins without values")
    idx = [(j * n) // n_bins for j in range(1, n_bins)]
    return tuple(float(s[min(i, n - 1)]) for i in idx)


def fit_bins(
    training_episodes: Sequence[Episode],
    n_bins: int = 10,
    window_hours: float = 6.0,
    variables: Iterable[str] | None = None,
) -> BinThresholds:
    """Fit per-variable quantile cut points on in-window training measurements."""
    if n_bins < 2:
        raise ValueError(f"need at least 2 bins, got {n_bins}")
    values: dict[str, list[float]] = {}
    for e in training_episodes:
        for m in e.window_events(window_hours):
            values.setdefault(m.variable, []).append(m.value)
    names = sorted(values) if variables is None else list(variables)
    cuts, effective, counts = {}, {}, {}
    for name in names:
        vals = values.get(name)
        if not vals:
            log.warning("variable %s has no training values; it will not be binned", name)
            continue
        c = equal_frequency_cuts(vals, n_bins)
        cuts[name] = c
        counts[name] = len(vals)
        bins = np.searchsorted(np.asarray(c), np.asarray(vals), side="right")
        effective[name] = int(np.unique(bins).size)
        if effective[name] < n_bins:
            log.warning(
                "variable %s: %d distinct training value(s) give %d effective bin(s) of %d",
                name,
                len(set(vals)),
                effective[name],
                n_bins,
            )
    return BinThresholds(n_bins=n_bins, cuts=cuts, effective_bins=effective, n_train_values=counts)


def bin_value(variable: str, value: float, thresholds: BinThresholds) -> int:
    """Bin index in ``[1, B]``; a value equal to a cut point goes to the upper bin."""
    try:
        cuts = thresholds.cuts[variable]
    except KeyError:
        raise KeyError(f"no bin thresholds fitted for variable {variable!r}") from None
    return 1 + int(np.searchsorted(np.asarray(cuts), value, side="right"))


def make_token(variable: str, bin_index: int) -> str:
    return f"{variable}-{bin_index}"


def episode_to_pseudotext(episode: Episode, thresholds: BinThresholds, window_hours: float = 6.0) -> PseudoText:
    tokens = []
    for m in episode.window_events(window_hours):
        if m.variable not in thresholds.cuts:
            log.debug("skipping %s: variable has no thresholds", m.variable)
            continue
        tokens.append(make_token(m.variable, bin_value(m.variable, m.value, thresholds)))
    return PseudoText(tuple(tokens))


def _token_sort_key(token: str):
    var, _, b = token.rpartition("-")
    return (var, int(b)) if b.isdigit() else (token, -1)


class Vocabulary:
    """Token <-> index map with index 0 reserved for unknown tokens."""

    def __init__(self, tokens: Sequence[str]):
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        if UNK_TOKEN in tokens:
            raise ValueError(f"{UNK_TOKEN} is reserved")
        self._itos = [UNK_TOKEN, *tokens]
        self._stoi = {t: i for i, t in enumerate(self._itos)}

    def __len__(self) -> int:
        return len(self._itos)

    def __contains__(self, token: str) -> bool:
        return token in self._stoi and token != UNK_TOKEN

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._itos == other._itos

    def index(self, token: str) -> int:
        return self._stoi.get(token, UNK_INDEX)

    def token(self, index: int) -> str:
        return self._itos[index]

    @property
    def tokens(self) -> list[str]:
        return self._itos[1:]

    def to_dict(self) -> dict:
        return {"tokens": self.tokens}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(list(d["tokens"]))


def build_vocab(training_pseudotexts: Iterable[PseudoText]) -> Vocabulary:
    seen = {t for pt in training_pseudotexts for t in pt.tokens}
    return Vocabulary(sorted(seen, key=_token_sort_key))


def tokenize(pseudotext: PseudoText, vocab: Vocabulary) -> list[int]:
    return [vocab.index(t) for t in pseudotext.tokens]


def tokenizer_to_dict(thresholds: BinThresholds, vocab: Vocabulary) -> dict:
    return {
        "format": "npcnet-tokenizer",
        "version": FORMAT_VERSION,
        "thresholds": thresholds.to_dict(),
        "vocabulary": vocab.to_dict(),
    }


def tokenizer_from_dict(d: dict) -> tuple[BinThresholds, Vocabulary]:
    if d.get("format") != "npcnet-tokenizer" or d.get("version") != FORMAT_VERSION:
        raise VersionMismatchError(
            f"tokenizer file has format {d.get('format')!r} version {d.get('version')!r}; "
            f"expected 'npcnet-tokenizer' version {FORMAT_VERSION}"
        )
    return BinThresholds.from_dict(d["thresholds"]), Vocabulary.from_dict(d["vocabulary"])


def save_tokenizer(path, thresholds: BinThresholds, vocab: Vocabulary) -> None:
    Path(path).write_text(json.dumps(tokenizer_to_dict(thresholds, vocab), indent=1, sort_keys=True), encoding="utf-8")


def load_tokenizer(path) -> tuple[BinThresholds, Vocabulary]:
    return tokenizer_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
