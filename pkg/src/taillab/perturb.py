"""Sequence perturbation: edit operators, recursive chains, random sequences.

Perturbed sequences probe the space of ill-formed strings near the
ground-truth language's support; the rarity-by-depth heat map shows where a
candidate's probability mass migrated.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Sequence, Vocabulary


class PerturbationKind(enum.Enum):
    SWAP = "swap"
    DELETE = "delete"
    INSERT = "insert"
    SUBSTITUTE = "substitute"


class PerturbationError(RuntimeError):
    """No novel perturbation found within the retry cap."""

    def __init__(self, x: Sequence, step: int | None = None):
        at = f" at chain step {step}" if step is not None else ""
        super().__init__(f"could not produce a novel perturbation of {x!r}{at}")
        self.sequence = x
        self.step = step


def apply_swap(x: Sequence, i: int, j: int) -> Sequence:
    out = list(x)
    out[i], out[j] = out[j], out[i]
    return tuple(out)


def apply_delete(x: Sequence, i: int) -> Sequence:
    return x[:i] + x[i + 1:]


def apply_insert(x: Sequence, i: int, token: int) -> Sequence:
    return x[:i] + (token,) + x[i:]


def apply_substitute(x: Sequence, i: int, token: int) -> Sequence:
    return x[:i] + (token,) + x[i + 1:]


def applicable_kinds(x: Sequence, vocab: Vocabulary,
                     max_length: int | None = None) -> list[PerturbationKind]:
    """Kinds that can possibly change ``x`` as a token string.

    Swap needs two positions holding distinct tokens; Insert is blocked only
    when the result would exceed the length cap.
    """
    kinds = []
    if len(x) >= 2 and len(set(x)) >= 2:
        kinds.append(PerturbationKind.SWAP)
    if len(x) >= 1:
        kinds.append(PerturbationKind.DELETE)
    if max_length is None or len(x) < max_length:
        kinds.append(PerturbationKind.INSERT)
    if len(x) >= 1 and vocab.size >= 2:
        kinds.append(PerturbationKind.SUBSTITUTE)
    return kinds


def perturb_once(x: Sequence, vocab: Vocabulary, rng: np.random.Generator,
                 max_length: int | None = None,
                 retry_cap: int = 100) -> tuple[Sequence, PerturbationKind]:
    """Apply one uniformly chosen applicable edit; the output always differs.

    Novelty is enforced against the input only, by redrawing kind and
    positions up to ``retry_cap`` times.
    """
    x = tuple(x)
    for _ in range(retry_cap):
        kinds = applicable_kinds(x, vocab, max_length)
        if not kinds:
            break
        kind = kinds[int(rng.integers(len(kinds)))]
        if kind is PerturbationKind.SWAP:
            i, j = rng.choice(len(x), size=2, replace=False)
            out = apply_swap(x, int(i), int(j))
        elif kind is PerturbationKind.DELETE:
            out = apply_delete(x, int(rng.integers(len(x))))
        elif kind is PerturbationKind.INSERT:
            out = apply_insert(x, int(rng.integers(len(x) + 1)), int(rng.integers(vocab.size)))
        else:
            out = apply_substitute(x, int(rng.integers(len(x))), int(rng.integers(vocab.size)))
        if out != x:
            return out, kind
    raise PerturbationError(x)


def perturb_chain(x: Sequence, vocab: Vocabulary, rng: np.random.Generator,
                  depth: int = 30, max_length: int | None = None,
                  retry_cap: int = 100) -> list[tuple[int, Sequence, PerturbationKind]]:
    """Recursively perturb ``x`` and return every intermediate step 1..depth."""
    if depth < 1:
        raise ValueError("depth must be at least 1")
    out = []
    cur = tuple(x)
    for step in range(1, depth + 1):
        try:
            cur, kind = perturb_once(cur, vocab, rng, max_length, retry_cap)
        except PerturbationError as err:
            raise PerturbationError(err.sequence, step) from err
        out.append((step, cur, kind))
    return out


def random_sequence(vocab: Vocabulary, rng: np.random.Generator,
                    mean_len: float = 10.0) -> Sequence:
    """Poisson-length sequence of i.i.d. uniform ordinary tokens."""
    if not mean_len > 0:
        raise ValueError("mean_len must be positive")
    length = int(rng.poisson(mean_len))
    return tuple(int(t) for t in rng.integers(0, vocab.size, size=length))


@dataclass(frozen=True)
class PerturbationRecord:
    """A scored sequence at some perturbation depth (0 = unperturbed)."""

    origin_id: int
    depth: int
    kind: str
    length: int
    target: float
    estimate: float

    @property
    def error(self) -> float:
        return self.estimate - self.target


@dataclass
class HeatmapGrid:
    """(rarity bin x depth) grid of estimation-error means.

    ``counts[d, b]`` and ``mean_errors[d, b]`` cover depth d and target-bin b;
    empty cells hold NaN means.  Records outside the x range are clipped into
    the edge bins so per-depth totals are conserved.
    """

    x_edges: np.ndarray
    depths: np.ndarray
    counts: np.ndarray
    mean_errors: np.ndarray


def build_heatmap(records: list[PerturbationRecord], x_edges) -> HeatmapGrid:
    """Aggregate finite-error records into the rarity-by-depth grid."""
    x_edges = np.asarray(x_edges, dtype=float)
    if (np.diff(x_edges) <= 0).any():
        raise ValueError("x_edges must be strictly increasing")
    if not records:
        raise ValueError("no records to aggregate")
    max_depth = max(r.depth for r in records)
    n_bins = len(x_edges) - 1
    counts = np.zeros((max_depth + 1, n_bins), dtype=int)
    sums = np.zeros((max_depth + 1, n_bins))
    for r in records:
        if not (math.isfinite(r.target) and math.isfinite(r.estimate)):
            continue
        b = int(np.clip(np.searchsorted(x_edges, r.target, side="right") - 1, 0, n_bins - 1))
        counts[r.depth, b] += 1
        sums[r.depth, b] += r.error
    with np.errstate(invalid="ignore"):
        means = np.where(counts > 0, sums / np.maximum(counts, 1), math.nan)
    return HeatmapGrid(x_edges, np.arange(max_depth + 1), counts, means)


def write_records_csv(path: str | Path, records: list[PerturbationRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["origin_id", "depth", "kind", "length", "log_pL", "log_pM", "error"])
        for r in records:
            err = r.error if math.isfinite(r.target) and math.isfinite(r.estimate) else math.nan
            w.writerow([r.origin_id, r.depth, r.kind, r.length,
                        repr(r.target), repr(r.estimate), repr(err)])


def write_heatmap_csv(path: str | Path, grid: HeatmapGrid) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x_lo", "x_hi", "depth", "count", "mean_error"])
        for d in grid.depths:
            for b in range(len(grid.x_edges) - 1):
                w.writerow([repr(float(grid.x_edges[b])), repr(float(grid.x_edges[b + 1])),
                            int(d), int(grid.counts[d, b]), repr(float(grid.mean_errors[d, b]))])
