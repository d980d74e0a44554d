"""Shared domain types, log-space arithmetic, and seeded randomness.

Conventions used throughout the package:

- Ordinary tokens are integers ``0 .. vocab.size - 1``.  EOS is the extra
  outcome index ``vocab.size`` in every conditional distribution; BOS is a
  context-only symbol (it is never emitted) and, where a context digit is
  needed, also uses index ``vocab.size``.
- A sequence is a tuple of ordinary token ids.  BOS/EOS are implicit.
- All probabilities live in natural-log space.  Zero probability is exactly
  ``-inf``, never a sentinel; NaN is never a legal log-probability.
"""

from __future__ import annotations

import itertools
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence as SequenceType

import numpy as np

Sequence = tuple[int, ...]

NEG_INF = float("-inf")

# Named RNG substreams.  Every stochastic stage of an experiment owns exactly
# one stream so runs reproduce module-by-module.
STREAM_LANG_BUILD = 0
STREAM_SAMPLING = 1
STREAM_TEST_SAMPLING = 2
STREAM_VALID_SPLIT = 3
STREAM_TRAIN_INIT = 4
STREAM_TRAIN_SHUFFLE = 5
STREAM_PERTURBATION = 6
STREAM_BOOTSTRAP = 7
STREAM_RANDOM_SEQUENCES = 8
STREAM_SUBSET = 9


@dataclass(frozen=True)
class Vocabulary:
    """A token inventory of ``size`` ordinary tokens plus reserved BOS/EOS.

    ``size`` counts ordinary tokens only.  Conditional distributions are
    vectors of length ``size + 1`` (ordinary tokens followed by EOS).
    """

    size: int

    def __post_init__(self) -> None:
        if self.size < 2:
            raise ValueError(f"vocabulary needs at least 2 ordinary tokens, got {self.size}")

    @property
    def eos(self) -> int:
        """Outcome index of the end-of-sequence marker."""
        return self.size

    @property
    def bos(self) -> int:
        """Context digit of the begin-of-sequence padding symbol."""
        return self.size

    @property
    def n_outcomes(self) -> int:
        """Number of emission outcomes per step (ordinary tokens + EOS)."""
        return self.size + 1

    def check_sequence(self, x: SequenceType[int]) -> None:
        for t in x:
            if not 0 <= t < self.size:
                raise ValueError(f"token id {t} outside vocabulary of size {self.size}")


def log_sum_exp(values: Iterable[float]) -> float:
    """Stable ``log(sum(exp(v)))`` via max-shift.

    Returns ``-inf`` when every input is ``-inf``.  Raises on empty input.
    """
    arr = np.asarray(list(values) if not isinstance(values, np.ndarray) else values, dtype=float)
    if arr.size == 0:
        raise ValueError("log_sum_exp of empty input")
    if np.isnan(arr).any():
        raise ValueError("log_sum_exp received NaN")
    m = arr.max()
    if m == NEG_INF:
        return NEG_INF
    return float(m + math.log(np.exp(arr - m).sum()))


@dataclass(frozen=True)
class SeededRng:
    """A (seed, stream-key) pair that reproduces an identical draw sequence.

    ``child(*ids)`` derives an independent substream; the same (seed, key)
    always yields a bit-identical :class:`numpy.random.Generator`.
    """

    seed: int
    key: tuple[int, ...] = ()

    def child(self, *ids: int) -> "SeededRng":
        return SeededRng(self.seed, self.key + tuple(ids))

    def generator(self) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(entropy=self.seed, spawn_key=self.key))


class SequenceModel(ABC):
    """A locally normalized autoregressive model over variable-length sequences.

    Subclasses provide ``conditional_log_probs`` (the next-symbol distribution
    given a prefix of ordinary tokens, already including any tempering).  The
    base class supplies chain-rule scoring, ancestral sampling, and the
    forced-EOS closure at ``max_length`` that makes the support finite and the
    distribution sum to exactly one over it.
    """

    vocab: Vocabulary
    max_length: int

    @abstractmethod
    def conditional_log_probs(self, prefix: Sequence) -> np.ndarray:
        """log p(next symbol | prefix) over ordinary tokens + EOS (length |Σ|+1)."""

    def step_log_probs(self, prefix: Sequence) -> np.ndarray:
        """Conditional distribution with EOS forced at the length cap."""
        if len(prefix) >= self.max_length:
            out = np.full(self.vocab.n_outcomes, NEG_INF)
            out[self.vocab.eos] = 0.0
            return out
        return self.conditional_log_probs(prefix)

    def token_log_probs(self, x: Sequence) -> np.ndarray:
        """Per-step log-probabilities of ``x``: one entry per token plus the EOS step."""
        self._check(x)
        out = np.empty(len(x) + 1)
        for i, t in enumerate(x):
            out[i] = self.step_log_probs(x[:i])[t]
        out[len(x)] = self.step_log_probs(x)[self.vocab.eos]
        return out

    def sequence_log_prob(self, x: Sequence) -> float:
        """Chain-rule log-probability of the complete sequence, EOS included."""
        steps = self.token_log_probs(x)
        if (steps == NEG_INF).any():
            return NEG_INF
        return float(steps.sum())

    def sequence_log_probs(self, corpus: SequenceType[Sequence]) -> np.ndarray:
        return np.array([self.sequence_log_prob(x) for x in corpus])

    def sample(self, rng: np.random.Generator) -> Sequence:
        """Ancestral sampling until EOS; EOS is forced at ``max_length``."""
        tokens: list[int] = []
        eos = self.vocab.eos
        while True:
            probs = np.exp(self.step_log_probs(tuple(tokens)))
            sym = int(rng.choice(self.vocab.n_outcomes, p=probs / probs.sum()))
            if sym == eos:
                return tuple(tokens)
            tokens.append(sym)

    def _check(self, x: Sequence) -> None:
        if len(x) > self.max_length:
            raise ValueError(f"sequence of length {len(x)} exceeds max length {self.max_length}")
        self.vocab.check_sequence(x)


def enumerate_sequences(vocab: Vocabulary, max_length: int) -> Iterator[Sequence]:
    """All token sequences of length 0..max_length, shortest first."""
    for length in range(max_length + 1):
        yield from itertools.product(range(vocab.size), repeat=length)


def total_probability_mass(model: SequenceModel) -> float:
    """Brute-force Σ_x p(x) over the model's finite support.

    Equals 1 for any locally normalized model with EOS forced at the cap;
    only feasible for tiny vocabularies and short caps.
    """
    scores = model.sequence_log_probs(list(enumerate_sequences(model.vocab, model.max_length)))
    finite = scores[scores > NEG_INF]
    return float(np.exp(finite - 0.0).sum()) if finite.size else 0.0
