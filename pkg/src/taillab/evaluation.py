"""Instance-level estimation-error analysis.

Everything here operates on pairs ⟨log p under the ground truth, log p under
the candidate⟩.  The error convention is estimate minus target: negative
means the candidate underestimates the sequence's probability.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Sequence, SequenceModel


@dataclass(frozen=True)
class ProbPair:
    """One sequence's ⟨target, estimate⟩ log-probability record."""

    sequence_id: int
    length: int
    target: float
    estimate: float

    @property
    def error(self) -> float:
        return self.estimate - self.target


@dataclass
class BinSummary:
    """Aggregate of estimation errors whose targets fall in [lo, hi)."""

    lo: float
    hi: float
    count: int
    mean_error: float
    ci_lo: float
    ci_hi: float
    ci_level: float


@dataclass
class ResidualRecord:
    """Bins dropped from a report for holding too few sequences."""

    omitted_bins: int
    omitted_pairs: int


def estimation_error(estimate: float, target: float) -> float:
    """Log-probability ratio ``estimate - target``; negative = underestimation."""
    if not (math.isfinite(estimate) and math.isfinite(target)):
        raise ValueError(f"estimation error needs finite inputs, got ({estimate}, {target})")
    return estimate - target


def collect_pairs(lang: SequenceModel, model: SequenceModel,
                  data: list[Sequence]) -> tuple[list[ProbPair], list[ProbPair]]:
    """Score every sequence under both distributions, in corpus order.

    Returns (pairs, quarantined): pairs whose estimate is -inf are kept out
    of aggregates but never silently dropped.
    """
    targets = lang.sequence_log_probs(data)
    estimates = model.sequence_log_probs(data)
    pairs: list[ProbPair] = []
    quarantined: list[ProbPair] = []
    for i, x in enumerate(data):
        pair = ProbPair(i, len(x), float(targets[i]), float(estimates[i]))
        if math.isfinite(pair.target) and math.isfinite(pair.estimate):
            pairs.append(pair)
        else:
            quarantined.append(pair)
    return pairs, quarantined


def bootstrap_ci(values, draws: int = 10000, level: float = 0.95,
                 rng: np.random.Generator | None = None) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean.

    Resamples ``len(values)`` points with replacement ``draws`` times and
    takes the ((1-level)/2, 1-(1-level)/2) percentiles of the resample means.
    """
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("bootstrap_ci of empty input")
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    if rng is None:
        rng = np.random.default_rng(0)
    n = values.size
    means = np.empty(draws)
    # chunked so draws x n never allocates more than ~2e7 indices
    chunk = max(1, min(draws, int(2e7) // max(n, 1)))
    for lo in range(0, draws, chunk):
        hi = min(lo + chunk, draws)
        idx = rng.integers(0, n, size=(hi - lo, n))
        means[lo:hi] = values[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lo_q, hi_q = np.quantile(means, [alpha, 1.0 - alpha])
    return float(lo_q), float(hi_q)


def _summaries(groups, edges, draws, level, rng) -> list[BinSummary]:
    out = []
    for (lo, hi), errs in zip(edges, groups):
        errs = np.asarray(errs, dtype=float)
        if rng is None:
            ci = (float(errs.mean()), float(errs.mean()))
        else:
            ci = bootstrap_ci(errs, draws=draws, level=level, rng=rng)
        out.append(BinSummary(lo, hi, len(errs), float(errs.mean()), ci[0], ci[1], level))
    return out


def bin_equal_range(pairs: list[ProbPair], n_bins: int, min_count: int = 10,
                    rng: np.random.Generator | None = None, draws: int = 10000,
                    level: float = 0.95) -> tuple[list[BinSummary], ResidualRecord]:
    """Equal-width bins over the target log-probability range.

    Boundary rule: lower-inclusive, upper-exclusive, last bin upper-inclusive.
    Bins holding <= ``min_count`` pairs are omitted from the report and
    tallied in the residual record.  Without an rng the intervals degenerate
    to (mean, mean).
    """
    if n_bins < 1:
        raise ValueError("n_bins must be at least 1")
    if len(pairs) < 2:
        raise ValueError("need at least 2 pairs to bin by range")
    targets = np.array([p.target for p in pairs])
    errors = np.array([p.error for p in pairs])
    lo, hi = targets.min(), targets.max()
    if lo == hi:
        edges = np.array([lo, hi])
        idx = np.zeros(len(pairs), dtype=int)
        n_bins = 1
    else:
        edges = np.linspace(lo, hi, n_bins + 1)
        idx = np.clip(np.searchsorted(edges, targets, side="right") - 1, 0, n_bins - 1)
    kept_groups, kept_edges = [], []
    residual = ResidualRecord(0, 0)
    for b in range(n_bins):
        errs = errors[idx == b]
        if errs.size == 0:
            continue
        if errs.size <= min_count:
            residual.omitted_bins += 1
            residual.omitted_pairs += errs.size
            continue
        kept_groups.append(errs)
        kept_edges.append((float(edges[b]), float(edges[b + 1])))
    return _summaries(kept_groups, kept_edges, draws, level, rng), residual


def bin_equal_count(pairs: list[ProbPair], k: int = 50) -> list[list[ProbPair]]:
    """Quantile bins: sort by target ascending, split into k near-equal groups.

    Bin 0 holds the rarest sequences; remainders go to the lowest-probability
    bins, so sizes differ by at most one.  Ties order stably by sequence id.
    """
    if len(pairs) < k:
        raise ValueError(f"need at least {k} pairs for {k} bins, got {len(pairs)}")
    ordered = sorted(pairs, key=lambda p: (p.target, p.sequence_id))
    base, rem = divmod(len(ordered), k)
    bins, pos = [], 0
    for b in range(k):
        size = base + (1 if b < rem else 0)
        bins.append(ordered[pos:pos + size])
        pos += size
    return bins


@dataclass
class JointHistogram:
    """2D counts over (target, estimate) cells plus an out-of-range tally."""

    x_edges: np.ndarray
    y_edges: np.ndarray
    counts: np.ndarray
    out_of_range: int

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.out_of_range


def joint_histogram(pairs: list[ProbPair], x_edges, y_edges) -> JointHistogram:
    """Count pairs per (target-bin, estimate-bin) cell; totals are conserved."""
    x_edges = np.asarray(x_edges, dtype=float)
    y_edges = np.asarray(y_edges, dtype=float)
    if (np.diff(x_edges) <= 0).any() or (np.diff(y_edges) <= 0).any():
        raise ValueError("histogram edges must be strictly increasing")
    x = np.array([p.target for p in pairs])
    y = np.array([p.estimate for p in pairs])
    inside = (x >= x_edges[0]) & (x <= x_edges[-1]) & (y >= y_edges[0]) & (y <= y_edges[-1])
    counts, _, _ = np.histogram2d(x[inside], y[inside], bins=(x_edges, y_edges))
    return JointHistogram(x_edges, y_edges, counts.astype(int), int((~inside).sum()))


def relative_change(series) -> list[float]:
    """Step-to-step relative change ``(s[i] - s[i-1]) / |s[i-1]|``.

    Entries with a zero previous value are undefined and flagged as NaN.
    """
    series = list(series)
    if len(series) < 2:
        raise ValueError("need at least 2 values")
    out = []
    for prev, cur in zip(series, series[1:]):
        out.append((cur - prev) / abs(prev) if prev != 0 else math.nan)
    return out


@dataclass
class LengthSummary:
    length: int
    count: int
    observed_mean: float
    expected: float
    ci_lo: float
    ci_hi: float


@dataclass
class LengthAnalysis:
    """Expected (compounding) vs observed estimation error by sequence length.

    ``mean_token_error`` is the corpus mean of per-token conditional
    log-probability differences; the expected curve at length n is n times
    it.  Lengths count every chain-rule step, EOS included.
    """

    mean_token_error: float
    rows: list[LengthSummary]


def length_analysis(lang: SequenceModel, model: SequenceModel, data: list[Sequence],
                    rng: np.random.Generator | None = None, draws: int = 10000,
                    level: float = 0.95) -> LengthAnalysis:
    if not data:
        raise ValueError("data is empty")
    per_token_means = []
    by_length: dict[int, list[float]] = {}
    skipped = 0
    for x in data:
        diff = model.token_log_probs(tuple(x)) - lang.token_log_probs(tuple(x))
        if not np.isfinite(diff).all():
            skipped += 1
            continue
        per_token_means.append(diff.mean())
        by_length.setdefault(len(diff), []).append(float(diff.sum()))
    if not per_token_means:
        raise ValueError("no finitely scored sequences")
    eps_bar = float(np.mean(per_token_means))
    rows = []
    for n in sorted(by_length):
        errs = np.asarray(by_length[n])
        if rng is None:
            ci = (float(errs.mean()), float(errs.mean()))
        else:
            ci = bootstrap_ci(errs, draws=draws, level=level, rng=rng)
        rows.append(LengthSummary(n, errs.size, float(errs.mean()), n * eps_bar, ci[0], ci[1]))
    return LengthAnalysis(eps_bar, rows)


# ---------------------------------------------------------------------------
# CSV emission (figures are rendered from these files by external tooling)
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    # plain-float repr round-trips exactly and never carries a numpy prefix
    return repr(float(x))


def write_pairs_csv(path: str | Path, pairs: list[ProbPair]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "length", "log_pL", "log_pM", "error"])
        for p in pairs:
            err = p.estimate - p.target if math.isfinite(p.estimate) and math.isfinite(p.target) else math.nan
            w.writerow([p.sequence_id, p.length, _fmt(p.target), _fmt(p.estimate), _fmt(err)])


def write_bins_csv(path: str | Path, bins: list[BinSummary]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lo", "hi", "count", "mean_error", "ci_lo", "ci_hi"])
        for b in bins:
            w.writerow([_fmt(b.lo), _fmt(b.hi), b.count, _fmt(b.mean_error),
                        _fmt(b.ci_lo), _fmt(b.ci_hi)])


def write_histogram_csv(path: str | Path, hist: JointHistogram) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x_lo", "x_hi", "y_lo", "y_hi", "count"])
        for i in range(hist.counts.shape[0]):
            for j in range(hist.counts.shape[1]):
                w.writerow([_fmt(hist.x_edges[i]), _fmt(hist.x_edges[i + 1]),
                            _fmt(hist.y_edges[j]), _fmt(hist.y_edges[j + 1]),
                            int(hist.counts[i, j])])


def write_curves_csv(path: str | Path, rows: list[tuple[int, int, float]]) -> None:
    """Per-epoch quantile-bin means: (epoch, bin_index, mean_error) rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "bin_index", "mean_error"])
        for epoch, bin_index, mean_error in rows:
            w.writerow([epoch, bin_index, _fmt(mean_error)])
