import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from taillab.core import SeededRng, SequenceModel
from taillab.evaluation import (
    ProbPair,
    bin_equal_count,
    bin_equal_range,
    bootstrap_ci,
    collect_pairs,
    estimation_error,
    joint_histogram,
    length_analysis,
    relative_change,
    write_bins_csv,
    write_pairs_csv,
)
from taillab.lang import LanguageSpec, build_language, sample_corpus
from taillab.learner import train_ngram


def make_pairs(targets, errors=None, lengths=None):
    errors = errors if errors is not None else [0.0] * len(targets)
    lengths = lengths if lengths is not None else [1] * len(targets)
    return [ProbPair(i, lengths[i], t, t + e) for i, (t, e) in enumerate(zip(targets, errors))]


def small_language(seed=5):
    return build_language(LanguageSpec(vocab_size=4, order=1, concentration=0.5,
                                       eos_bias=1.5, seed=seed, max_length=12))


class TestEstimationError:
    def test_perfect_estimate(self):
        assert estimation_error(-29.3811, -29.3811) == 0.0

    def test_underestimation_is_negative(self):
        assert estimation_error(-31.0000, -29.3811) == pytest.approx(-1.6189, abs=1e-12)

    def test_overestimation_is_positive(self):
        assert estimation_error(-16.0, -17.4128) == pytest.approx(1.4128, abs=1e-12)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            estimation_error(-math.inf, -1.0)
        with pytest.raises(ValueError):
            estimation_error(-1.0, math.nan)

    @given(st.floats(-200, 0), st.floats(-200, 0))
    def test_antisymmetric(self, a, b):
        assert estimation_error(a, b) == -estimation_error(b, a)


class TestCollectPairs:
    def test_self_scoring_gives_exact_zero(self):
        lang = small_language()
        data = sample_corpus(lang, SeededRng(1, (0,)).generator(), 100)
        pairs, quarantined = collect_pairs(lang, lang, data)
        assert quarantined == []
        assert all(p.error == 0.0 for p in pairs)

    def test_empty_corpus(self):
        lang = small_language()
        assert collect_pairs(lang, lang, []) == ([], [])

    def test_conservation_with_quarantine(self):
        lang = small_language()
        data = sample_corpus(lang, SeededRng(2, (0,)).generator(), 300)
        # an unsmoothed low-order model leaves some test events unseen
        model = train_ngram(data[:20], lang.vocab, 2, 0.0, lang.max_length)
        pairs, quarantined = collect_pairs(lang, model, data)
        assert len(pairs) + len(quarantined) == len(data)
        assert all(p.estimate == -math.inf for p in quarantined)

    def test_order_preserved(self):
        lang = small_language()
        data = sample_corpus(lang, SeededRng(3, (0,)).generator(), 50)
        pairs, _ = collect_pairs(lang, lang, data)
        assert [p.sequence_id for p in pairs] == list(range(50))


class TestBinEqualRange:
    def test_identical_targets_single_bin(self):
        pairs = make_pairs([-5.0] * 30)
        bins, residual = bin_equal_range(pairs, n_bins=4, min_count=10)
        assert len(bins) == 1
        assert bins[0].count == 30
        assert residual.omitted_pairs == 0

    def test_exactly_min_count_is_omitted(self):
        # strict "> 10" reading: a bin with exactly 10 pairs is dropped
        pairs = make_pairs([-10.0] * 10 + [-1.0] * 11)
        bins, residual = bin_equal_range(pairs, n_bins=2, min_count=10)
        assert len(bins) == 1
        assert bins[0].count == 11
        assert residual.omitted_bins == 1
        assert residual.omitted_pairs == 10

    def test_uniform_grid_partitions_evenly(self):
        # hand partition: targets -1..-100 into 10 equal-width bins of 10
        pairs = make_pairs([-float(i) for i in range(1, 101)])
        bins, _ = bin_equal_range(pairs, n_bins=10, min_count=0)
        assert [b.count for b in bins] == [10] * 10

    def test_boundary_rule(self):
        # lower-inclusive, upper-exclusive, last bin upper-inclusive
        pairs = make_pairs([0.0, -1.0, -2.0, -3.0, -4.0])
        bins, _ = bin_equal_range(pairs, n_bins=2, min_count=0)
        assert [b.count for b in bins] == [2, 3]  # -2 lands in [-2, 0], not [-4, -2)

    def test_weighted_bin_means_reassemble_global_mean(self):
        rng = np.random.default_rng(7)
        pairs = make_pairs(list(rng.uniform(-50, -1, 500)), list(rng.normal(0, 2, 500)))
        bins, residual = bin_equal_range(pairs, n_bins=13, min_count=0)
        assert residual.omitted_pairs == 0
        total = sum(b.count for b in bins)
        weighted = sum(b.count * b.mean_error for b in bins) / total
        global_mean = np.mean([p.error for p in pairs])
        assert weighted == pytest.approx(global_mean, abs=1e-12)

    def test_too_few_pairs_rejected(self):
        with pytest.raises(ValueError):
            bin_equal_range(make_pairs([-1.0]), n_bins=3)

    def test_ci_attached_with_rng(self):
        pairs = make_pairs([-2.0] * 40, [1.0] * 40)
        bins, _ = bin_equal_range(pairs, 1, min_count=0, rng=np.random.default_rng(0), draws=200)
        assert bins[0].ci_lo == bins[0].ci_hi == bins[0].mean_error == 1.0


class TestBinEqualCount:
    def test_even_split(self):
        bins = bin_equal_count(make_pairs(list(np.linspace(-90, -1, 100))), k=50)
        assert [len(b) for b in bins] == [2] * 50

    def test_remainder_goes_to_rarest(self):
        bins = bin_equal_count(make_pairs(list(np.linspace(-101, -1, 101))), k=50)
        assert len(bins[0]) == 3
        assert all(len(b) == 2 for b in bins[1:])
        # bin 0 holds the lowest-probability sequences
        assert max(p.target for p in bins[0]) <= min(p.target for p in bins[-1])

    def test_ties_stable_by_sequence_id(self):
        pairs = make_pairs([-1.0] * 6)
        bins = bin_equal_count(pairs, k=3)
        assert [[p.sequence_id for p in b] for b in bins] == [[0, 1], [2, 3], [4, 5]]

    def test_too_few_pairs_rejected(self):
        with pytest.raises(ValueError):
            bin_equal_count(make_pairs([-1.0] * 5), k=10)

    @given(st.integers(50, 400), st.integers(2, 50))
    def test_sizes_differ_by_at_most_one(self, n, k):
        rng = np.random.default_rng(n * k)
        bins = bin_equal_count(make_pairs(list(rng.uniform(-60, -1, n))), k=k)
        sizes = {len(b) for b in bins}
        assert len(sizes) <= 2
        assert max(sizes) - min(sizes) <= 1
        assert sum(len(b) for b in bins) == n


class TestBootstrapCI:
    def test_constant_values(self):
        lo, hi = bootstrap_ci([3.5] * 20, draws=500, rng=np.random.default_rng(1))
        assert lo == hi == 3.5

    def test_single_value(self):
        lo, hi = bootstrap_ci([2.0], draws=100, rng=np.random.default_rng(1))
        assert lo == hi == 2.0

    def test_bernoulli_width_matches_normal_approximation(self):
        # oracle: width = 2 * 1.96 * sqrt(0.25 / 1000) = 0.06198
        values = np.array([0.0, 1.0] * 500)
        lo, hi = bootstrap_ci(values, draws=10_000, rng=np.random.default_rng(9))
        width = hi - lo
        assert lo < 0.5 < hi
        assert abs(width - 0.062) / 0.062 < 0.15

    def test_deterministic_under_seed(self):
        values = np.random.default_rng(2).normal(size=100)
        a = bootstrap_ci(values, draws=1000, rng=np.random.default_rng(5))
        b = bootstrap_ci(values, draws=1000, rng=np.random.default_rng(5))
        assert a == b

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            bootstrap_ci([], rng=np.random.default_rng(0))

    @given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=40),
           st.sampled_from([0.5, 0.8, 0.95]))
    def test_contains_sample_mean(self, values, level):
        lo, hi = bootstrap_ci(values, draws=400, level=level, rng=np.random.default_rng(0))
        mean = float(np.mean(values))
        assert lo <= mean + 1e-9
        assert hi >= mean - 1e-9


class TestJointHistogram:
    def test_single_diagonal_pair(self):
        hist = joint_histogram(make_pairs([-2.5]), [-3, -2, -1], [-3, -2, -1])
        assert hist.counts[0, 0] == 1
        assert hist.counts.sum() == 1

    def test_total_conserved_with_out_of_range(self):
        pairs = make_pairs([-1.0, -2.0, -50.0])
        hist = joint_histogram(pairs, [-3, 0], [-3, 0])
        assert hist.total == 3
        assert hist.out_of_range == 1

    def test_self_scoring_stays_on_diagonal(self):
        lang = small_language()
        data = sample_corpus(lang, SeededRng(4, (0,)).generator(), 200)
        pairs, _ = collect_pairs(lang, lang, data)
        targets = [p.target for p in pairs]
        edges = np.linspace(min(targets) - 1e-9, max(targets) + 1e-9, 9)
        hist = joint_histogram(pairs, edges, edges)
        off_diagonal = hist.counts.sum() - np.trace(hist.counts)
        assert off_diagonal == 0
        assert hist.out_of_range == 0

    def test_bad_edges_rejected(self):
        with pytest.raises(ValueError):
            joint_histogram([], [0, 0], [0, 1])


class TestRelativeChange:
    def test_constant_series(self):
        assert relative_change([2.0, 2.0, 2.0]) == [0.0, 0.0]

    def test_improving_negative_series(self):
        assert relative_change([-2.0, -1.0]) == [0.5]

    def test_worsening_negative_series(self):
        assert relative_change([-1.0, -2.0]) == [-1.0]

    def test_zero_previous_flagged_nan(self):
        out = relative_change([0.0, 1.0, 2.0])
        assert math.isnan(out[0])
        assert out[1] == 1.0

    def test_too_short_rejected(self):
        with pytest.raises(ValueError):
            relative_change([1.0])


class _OffsetModel(SequenceModel):
    """Wraps a model so every conditional log-probability shifts by delta."""

    def __init__(self, base, delta):
        self.base = base
        self.delta = delta
        self.vocab = base.vocab
        self.max_length = base.max_length

    def conditional_log_probs(self, prefix):
        return self.base.conditional_log_probs(prefix) + self.delta


class TestLengthAnalysis:
    def test_self_scoring_all_zero(self):
        lang = small_language()
        data = sample_corpus(lang, SeededRng(6, (0,)).generator(), 150)
        out = length_analysis(lang, lang, data)
        assert out.mean_token_error == 0.0
        assert all(r.observed_mean == 0.0 and r.expected == 0.0 for r in out.rows)

    def test_single_length_dataset(self):
        lang = small_language()
        data = [(0, 1, 2)] * 10
        out = length_analysis(lang, _OffsetModel(lang, 0.25), data)
        assert len(out.rows) == 1
        assert out.rows[0].length == 4  # 3 tokens + EOS step

    def test_constant_token_error_makes_observed_equal_expected(self):
        lang = small_language()
        delta = -0.125
        data = [x for x in sample_corpus(lang, SeededRng(7, (0,)).generator(), 200)
                if len(x) < lang.max_length]
        out = length_analysis(lang, _OffsetModel(lang, delta), data)
        assert out.mean_token_error == pytest.approx(delta, abs=1e-12)
        for row in out.rows:
            assert row.observed_mean == pytest.approx(row.length * delta, abs=1e-9)
            assert row.expected == pytest.approx(row.length * delta, abs=1e-9)

    def test_empty_data_rejected(self):
        lang = small_language()
        with pytest.raises(ValueError):
            length_analysis(lang, lang, [])


class TestCsvDeterminism:
    def test_identical_bytes_on_rewrite(self, tmp_path):
        pairs = make_pairs(list(np.random.default_rng(3).uniform(-40, -1, 60)),
                           list(np.random.default_rng(4).normal(0, 1, 60)))
        bins, _ = bin_equal_range(pairs, 5, min_count=0,
                                  rng=np.random.default_rng(11), draws=300)
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        write_pairs_csv(a, pairs)
        write_pairs_csv(b, pairs)
        assert a.read_bytes() == b.read_bytes()
        write_bins_csv(a, bins)
        bins2, _ = bin_equal_range(pairs, 5, min_count=0,
                                   rng=np.random.default_rng(11), draws=300)
        write_bins_csv(b, bins2)
        assert a.read_bytes() == b.read_bytes()
