"""Ground-truth languages with exactly computable sequence probabilities.

A language is an order-k tabular conditional model (one raw score row per
context) wrapped with a softmax temperature and a hard length cap.  Because
EOS is forced at the cap, the support is finite and probabilities sum to
exactly one over it, which brute-force enumeration can verify.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import (
    NEG_INF,
    STREAM_LANG_BUILD,
    SeededRng,
    Sequence,
    SequenceModel,
    Vocabulary,
)


def log_temper(logits: np.ndarray, temperature: float) -> np.ndarray:
    """Log of the tempered softmax: divide scores by T, then normalize.

    Accepts 1-D score vectors or 2-D stacks of rows.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=float) / temperature
    m = np.max(z, axis=-1, keepdims=True)
    if not np.isfinite(m).all():
        raise ValueError("tempering requires at least one finite logit per row")
    with np.errstate(divide="ignore"):
        lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    return z - lse


def temper(logits: np.ndarray, temperature: float) -> np.ndarray:
    """Tempered softmax probability vector: exp(x_i/T) / Σ_j exp(x_j/T)."""
    return np.exp(log_temper(logits, temperature))


@dataclass(frozen=True)
class LanguageSpec:
    """Recipe for a random tabular language; (spec, seed) is fully deterministic.

    ``concentration`` is the symmetric Dirichlet parameter for each context
    row: values below 1 give peaked, heavy-tailed rows; ``math.inf`` gives
    exactly uniform rows.  ``eos_bias`` multiplies each row's EOS weight to
    control expected sequence length.
    """

    vocab_size: int
    order: int
    concentration: float
    eos_bias: float
    seed: int
    max_length: int = 40
    temperature: float = 1.0

    def __post_init__(self) -> None:
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")
        if self.order < 1:
            raise ValueError("order must be positive")
        if not self.concentration > 0:
            raise ValueError("concentration must be positive")
        if not self.eos_bias > 0:
            raise ValueError("eos_bias must be positive")
        if self.max_length < 1:
            raise ValueError("max_length must be positive")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


class TabularAutoregressiveModel:
    """Raw score table: one row of |Σ|+1 log-weights per length-k context.

    Contexts are tuples over ordinary tokens plus the BOS padding digit, so
    the table has (|Σ|+1)^k rows; rows whose context places BOS after an
    ordinary token exist but are unreachable.
    """

    def __init__(self, vocab: Vocabulary, order: int, log_weights: np.ndarray):
        log_weights = np.asarray(log_weights, dtype=float)
        expected = (vocab.n_outcomes ** order, vocab.n_outcomes)
        if log_weights.shape != expected:
            raise ValueError(f"log_weights shape {log_weights.shape} != {expected}")
        if np.isnan(log_weights).any():
            raise ValueError("log_weights contain NaN")
        if not np.isfinite(log_weights.max(axis=1)).all():
            raise ValueError("every context row needs at least one finite score")
        self.vocab = vocab
        self.order = order
        self.log_weights = log_weights
        base = vocab.n_outcomes
        self._powers = base ** np.arange(order - 1, -1, -1, dtype=np.int64)

    @property
    def context_count(self) -> int:
        return self.log_weights.shape[0]

    def context_index(self, prefix: Sequence) -> int:
        """Row index of the (BOS-padded, truncated-to-k) context of a prefix."""
        ctx = ((self.vocab.bos,) * self.order + tuple(prefix))[-self.order:]
        return int(np.dot(ctx, self._powers))

    def row(self, prefix: Sequence) -> np.ndarray:
        return self.log_weights[self.context_index(prefix)]


class GroundTruthLanguage(SequenceModel):
    """A tabular model + temperature + length cap; the distribution p_L.

    Tempering is applied per step to the conditional rows, so a sequence's
    probability is the product of tempered conditionals.
    """

    def __init__(self, base: TabularAutoregressiveModel, temperature: float = 1.0,
                 max_length: int = 40, spec: LanguageSpec | None = None):
        if not temperature > 0:
            raise ValueError("temperature must be positive")
        if max_length < 1:
            raise ValueError("max_length must be positive")
        self.base = base
        self.vocab = base.vocab
        self.temperature = float(temperature)
        self.max_length = int(max_length)
        self.spec = spec
        self._log_cond: np.ndarray | None = None
        self._cdf: np.ndarray | None = None

    def retempered(self, temperature: float) -> "GroundTruthLanguage":
        """The same base table sampled/scored at a different temperature."""
        return GroundTruthLanguage(self.base, temperature, self.max_length, self.spec)

    def conditional_log_probs(self, prefix: Sequence) -> np.ndarray:
        return self._conditionals()[self.base.context_index(prefix)]

    def token_log_probs(self, x: Sequence) -> np.ndarray:
        self._check(x)
        idx, targets = self._step_indices(x)
        out = self._conditionals()[idx, targets]
        if len(x) == self.max_length:
            out[-1] = 0.0
        return out

    def sequence_log_probs(self, corpus) -> np.ndarray:
        table = self._conditionals()
        out = np.empty(len(corpus))
        for i, x in enumerate(corpus):
            self._check(x)
            idx, targets = self._step_indices(x)
            steps = table[idx, targets]
            if len(x) == self.max_length:
                steps[-1] = 0.0
            out[i] = steps.sum() if not (steps == NEG_INF).any() else NEG_INF
        return out

    def sequence_log_prob(self, x: Sequence) -> float:
        steps = self.token_log_probs(x)
        return float(steps.sum()) if not (steps == NEG_INF).any() else NEG_INF

    def sample(self, rng: np.random.Generator) -> Sequence:
        cdf = self._sampling_cdf()
        vocab = self.vocab
        base = vocab.n_outcomes
        trail = base ** (self.base.order - 1)
        idx = base ** self.base.order - 1  # all-BOS context
        tokens: list[int] = []
        while len(tokens) < self.max_length:
            sym = int(np.searchsorted(cdf[idx], rng.random(), side="right"))
            if sym == vocab.eos:
                return tuple(tokens)
            tokens.append(sym)
            idx = (idx % trail) * base + sym
        return tuple(tokens)

    def _step_indices(self, x: Sequence) -> tuple[np.ndarray, np.ndarray]:
        k = self.base.order
        padded = np.concatenate([np.full(k, self.vocab.bos, dtype=np.int64),
                                 np.asarray(x, dtype=np.int64)])
        idx = sliding_window_view(padded, k) @ self.base._powers
        targets = np.append(np.asarray(x, dtype=np.int64), self.vocab.eos)
        return idx, targets

    def _conditionals(self) -> np.ndarray:
        if self._log_cond is None:
            self._log_cond = log_temper(self.base.log_weights, self.temperature)
        return self._log_cond

    def _sampling_cdf(self) -> np.ndarray:
        if self._cdf is None:
            cdf = np.cumsum(np.exp(self._conditionals()), axis=1)
            self._cdf = cdf / cdf[:, -1:]
        return self._cdf


def build_language(spec: LanguageSpec) -> GroundTruthLanguage:
    """Draw a random language from a spec; identical (spec, seed) rebuilds identically.

    Each context row is a symmetric Dirichlet draw stored as log-weights with
    the EOS weight multiplied by ``eos_bias``.
    """
    vocab = Vocabulary(spec.vocab_size)
    n_contexts = vocab.n_outcomes ** spec.order
    if math.isinf(spec.concentration):
        weights = np.full((n_contexts, vocab.n_outcomes), 1.0 / vocab.n_outcomes)
    else:
        rng = SeededRng(spec.seed, (STREAM_LANG_BUILD,)).generator()
        weights = rng.dirichlet(np.full(vocab.n_outcomes, spec.concentration), size=n_contexts)
    with np.errstate(divide="ignore"):
        log_weights = np.log(weights)
    log_weights[:, vocab.eos] += math.log(spec.eos_bias)
    base = TabularAutoregressiveModel(vocab, spec.order, log_weights)
    return GroundTruthLanguage(base, spec.temperature, spec.max_length, spec)


def next_distribution(model: SequenceModel, prefix: Sequence) -> np.ndarray:
    """Probability vector over Σ ∪ {EOS} for the next step after ``prefix``.

    At the length cap this is the forced all-EOS distribution.
    """
    return np.exp(model.step_log_probs(tuple(prefix)))


def sample_sequence(model: SequenceModel, rng: np.random.Generator) -> Sequence:
    """One ancestral sample (BOS/EOS excluded from the returned tuple)."""
    return model.sample(rng)


def sample_corpus(model: SequenceModel, rng: np.random.Generator, n: int) -> list[Sequence]:
    return [model.sample(rng) for _ in range(n)]


def score_sequence(model: SequenceModel, x: Sequence) -> float:
    """Chain-rule log-probability of ``x`` including the terminal EOS step."""
    return model.sequence_log_prob(tuple(x))


_FORMAT = "taillab-language"
_VERSION = 1


def save_language(lang: GroundTruthLanguage, path: str | Path) -> None:
    """Write a self-describing JSON document that round-trips scores exactly."""
    doc = {
        "format": _FORMAT,
        "version": _VERSION,
        "vocab_size": lang.vocab.size,
        "order": lang.base.order,
        "temperature": lang.temperature,
        "max_length": lang.max_length,
        "spec": asdict(lang.spec) if lang.spec is not None else None,
        "log_weights": lang.base.log_weights.tolist(),
    }
    Path(path).write_text(json.dumps(doc))


def load_language(path: str | Path) -> GroundTruthLanguage:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != _FORMAT:
        raise ValueError(f"{path}: not a {_FORMAT} file")
    if doc.get("version") != _VERSION:
        raise ValueError(f"{path}: unsupported version {doc.get('version')}")
    vocab = Vocabulary(doc["vocab_size"])
    base = TabularAutoregressiveModel(vocab, doc["order"], np.array(doc["log_weights"], dtype=float))
    spec = LanguageSpec(**doc["spec"]) if doc.get("spec") else None
    return GroundTruthLanguage(base, doc["temperature"], doc["max_length"], spec)
