"""Large-number-of-rare-events machinery: spectra, Good-Turing, productivity.

The potential productivity of a process after N draws is the Good-Turing
estimate of unseen-event mass, which reduces to the hapax proportion N1/N.
Plotted against N it shows whether a sample is still inside the LNRE zone.
"""

from __future__ import annotations

import csv
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Iterator, Sequence as SequenceType


class SparseSpectrumWarning(UserWarning):
    """A Good-Turing estimate hit an empty next frequency class."""


@dataclass
class FrequencySpectrum:
    """Counts-of-counts: ``counts[m]`` is the number of types seen exactly m times."""

    total: int = 0
    counts: Counter = field(default_factory=Counter)

    @property
    def type_count(self) -> int:
        return sum(self.counts.values())

    @property
    def hapax_count(self) -> int:
        return self.counts.get(1, 0)

    def check(self) -> None:
        if sum(m * n for m, n in self.counts.items()) != self.total:
            raise ValueError("spectrum identity violated: sum(m * N_m) != N")


def count_spectrum(events: Iterable[Hashable]) -> FrequencySpectrum:
    """Exact frequency spectrum of an event sample."""
    freq = Counter(events)
    spectrum = FrequencySpectrum(total=sum(freq.values()), counts=Counter(freq.values()))
    return spectrum


def good_turing(m: int, spectrum: FrequencySpectrum) -> float:
    """Good-Turing probability of an event seen m times: ((m+1)/N) * N_{m+1}/N_m.

    No spectrum smoothing is applied; an empty next class yields 0 with a
    :class:`SparseSpectrumWarning`.
    """
    if spectrum.total <= 0:
        raise ValueError("spectrum is empty")
    n_m = spectrum.counts.get(m, 0)
    if n_m == 0:
        raise ValueError(f"no types with frequency {m}; estimate undefined")
    n_next = spectrum.counts.get(m + 1, 0)
    if n_next == 0:
        warnings.warn(f"empty frequency class {m + 1}; returning 0",
                      SparseSpectrumWarning, stacklevel=2)
        return 0.0
    return (m + 1) / spectrum.total * (n_next / n_m)


def potential_productivity(spectrum: FrequencySpectrum) -> float:
    """Unseen-event mass estimate: the hapax proportion N1/N."""
    if spectrum.total <= 0:
        raise ValueError("spectrum is empty")
    return spectrum.hapax_count / spectrum.total


@dataclass
class CurvePoint:
    n: int
    hapax_count: int
    type_count: int
    productivity: float


@dataclass
class ProductivityCurve:
    """Hapax proportion at growing sample sizes, for one event kind."""

    label: str
    points: list[CurvePoint]
    truncated: bool = False

    @property
    def checkpoints(self) -> list[tuple[int, float]]:
        return [(p.n, p.productivity) for p in self.points]


def productivity_curve(events: Iterable[Hashable], checkpoints: SequenceType[int],
                       label: str = "") -> ProductivityCurve:
    """Single-pass productivity estimates at each checkpoint sample size.

    Maintains the spectrum incrementally.  If the stream ends before the last
    checkpoint the curve is returned partial with ``truncated`` set.
    """
    checkpoints = list(checkpoints)
    if any(b <= a for a, b in zip(checkpoints, checkpoints[1:])):
        raise ValueError("checkpoints must be strictly increasing")
    if checkpoints and checkpoints[0] < 1:
        raise ValueError("checkpoints must be positive")
    freq: Counter = Counter()
    spectrum: Counter = Counter()
    points: list[CurvePoint] = []
    pending = iter(checkpoints)
    target = next(pending, None)
    n = 0
    n_types = 0
    for event in events:
        if target is None:
            break
        old = freq[event]
        freq[event] = old + 1
        if old:
            spectrum[old] -= 1
            if spectrum[old] == 0:
                del spectrum[old]
        else:
            n_types += 1
        spectrum[old + 1] += 1
        n += 1
        if n == target:
            points.append(CurvePoint(n, spectrum.get(1, 0), n_types, spectrum.get(1, 0) / n))
            target = next(pending, None)
    return ProductivityCurve(label, points, truncated=target is not None)


def default_checkpoints(limit: int, start: int = 100) -> list[int]:
    """Log-spaced sample sizes {start, 10*start, ...} capped at ``limit``."""
    out = []
    n = start
    while n <= limit:
        out.append(n)
        n *= 10
    if not out or out[-1] != limit:
        out.append(limit)
    return out


def extract_ngrams(tokens: SequenceType[Hashable], n: int) -> Iterator[tuple]:
    """Sliding n-token windows of one document; empty when the document is shorter."""
    if n < 1:
        raise ValueError("n must be positive")
    for i in range(len(tokens) - n + 1):
        yield tuple(tokens[i:i + n])


def extract_ngrams_documents(documents: Iterable[SequenceType[Hashable]], n: int) -> Iterator[tuple]:
    """n-grams per document; windows never span a document boundary."""
    for doc in documents:
        yield from extract_ngrams(doc, n)


def read_token_file(path: str | Path) -> list[list[str]]:
    """Whitespace-separated tokens, one document per line; blank lines skipped."""
    documents = []
    with open(path) as fh:
        for line in fh:
            tokens = line.split()
            if tokens:
                documents.append(tokens)
    return documents


def write_productivity_csv(path: str | Path, curves: list[tuple[int, ProductivityCurve]]) -> None:
    """Rows of (n-gram order, sample size, hapax count, type count, productivity)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "N", "hapax_count", "type_count", "productivity"])
        for order, curve in curves:
            for p in curve.points:
                w.writerow([order, p.n, p.hapax_count, p.type_count, repr(p.productivity)])
