"""Config-driven experiment pipelines emitting CSV reports and a run manifest.

Five pipeline kinds:

- ``fixed``: train once on a fixed sample, report test-set error by target
  probability (equal-range bins with bootstrap CIs) plus the joint histogram.
- ``epochs``: per-epoch error curves over 50 quantile bins for train/test
  subsets.
- ``online``: a fresh training sample every iteration; mean test error and
  its relative change across iterations.
- ``perturb``: recursive perturbation chains scored at every depth, plus the
  rarity-by-depth heat map and optional random-sequence scoring.
- ``tempsweep``: retemper the same base table over a temperature grid and
  train one candidate per temperature.

Defaults are desk scale so the full suite runs in minutes.  Full-scale
reference constants: 1M-sequence training sets, 500k test sets, 60 online
iterations of 500k fresh sequences each.

Every stochastic stage draws from its own substream of the master seed, so a
rerun of the same config reproduces byte-identical CSVs.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    STREAM_BOOTSTRAP,
    STREAM_PERTURBATION,
    STREAM_RANDOM_SEQUENCES,
    STREAM_SAMPLING,
    STREAM_SUBSET,
    STREAM_TEST_SAMPLING,
    STREAM_TRAIN_INIT,
    STREAM_VALID_SPLIT,
    SeededRng,
    SequenceModel,
)
from . import evaluation as ev
from . import perturb as pt
from .lang import GroundTruthLanguage, LanguageSpec, build_language, load_language, save_language
from .learner import (
    NeuralLM,
    NeuralTrainer,
    NGramModel,
    TrainConfig,
    train_neural,
    train_ngram,
    update_ngram,
)

EXPERIMENT_KINDS = ("fixed", "epochs", "online", "perturb", "tempsweep")
CANDIDATE_KINDS = ("oracle", "ngram", "neural")


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name for diagnostics."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


@dataclass
class CandidateSpec:
    """Which candidate to train and how."""

    kind: str = "neural"
    ngram_order: int = 3
    ngram_alpha: float = 0.1
    window: int | None = None  # None: language order + 1, enough to express p_L
    embed_dim: int = 16
    hidden_dim: int = 64
    init_scale: float = 0.1
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self) -> None:
        if self.kind not in CANDIDATE_KINDS:
            raise ValueError(f"candidate kind must be one of {CANDIDATE_KINDS}, got {self.kind!r}")


def _default_language() -> LanguageSpec:
    return LanguageSpec(vocab_size=32, order=2, concentration=0.3, eos_bias=4.0,
                        seed=0, max_length=40, temperature=0.85)


@dataclass
class ExperimentConfig:
    kind: str
    language: LanguageSpec = field(default_factory=_default_language)
    language_file: str | None = None  # load instead of building from spec
    candidate: CandidateSpec = field(default_factory=CandidateSpec)
    train_size: int = 50_000
    test_size: int = 10_000
    valid_fraction: float = 0.05
    seed: int = 0
    out_dir: str = "run-output"
    range_bins: int = 30
    count_bins: int = 50
    min_bin_count: int = 10
    bootstrap_draws: int = 10_000
    ci_level: float = 0.95
    epoch_subset: int = 10_000
    online_iterations: int = 30
    fresh_size: int = 5_000
    smoothing_window: int = 5
    reset_optimizer_each_iteration: bool = False
    perturb_depth: int = 30
    random_sequences: int = 0
    random_mean_len: float = 10.0
    temperatures: list[float] = field(default_factory=lambda: [0.70, 0.85, 1.00, 1.15])

    def __post_init__(self) -> None:
        if self.kind not in EXPERIMENT_KINDS:
            raise ValueError(f"kind must be one of {EXPERIMENT_KINDS}, got {self.kind!r}")
        for name in ("train_size", "test_size", "range_bins", "count_bins",
                     "online_iterations", "fresh_size", "perturb_depth", "epoch_subset"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if not 0 < self.valid_fraction < 1:
            raise ValueError("valid_fraction must be in (0, 1)")
        if self.kind == "epochs" and self.candidate.kind == "ngram":
            raise ValueError("per-epoch tracking needs a neural or oracle candidate")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        if isinstance(data.get("language"), dict):
            data["language"] = LanguageSpec(**data["language"])
        if isinstance(data.get("candidate"), dict):
            cand = dict(data["candidate"])
            if isinstance(cand.get("train"), dict):
                cand["train"] = TrainConfig(**cand["train"])
            data["candidate"] = CandidateSpec(**cand)
        return cls(**data)


@dataclass
class RunManifest:
    """Everything needed to reproduce a run plus what it produced."""

    kind: str
    config: dict
    language_hash: str
    model_hash: str | None
    stage_seconds: dict[str, float]
    outputs: list[str]
    quarantined: int = 0

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def _sha256(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def language_hash(lang: GroundTruthLanguage) -> str:
    doc = {"log_weights": lang.base.log_weights.tolist(),
           "temperature": lang.temperature, "max_length": lang.max_length}
    return _sha256(json.dumps(doc))


def model_hash(model: SequenceModel) -> str:
    if isinstance(model, GroundTruthLanguage):
        return language_hash(model)
    if isinstance(model, NGramModel):
        doc = {"order": model.order, "alpha": model.alpha,
               "counts": [[list(c), r.tolist()] for c, r in sorted(model.counts.items())]}
        return _sha256(json.dumps(doc))
    if isinstance(model, NeuralLM):
        return _sha256(json.dumps({k: v.tolist() for k, v in sorted(model.params.items())}))
    raise TypeError(f"cannot hash {type(model).__name__}")


class _Run:
    """Shared pipeline scaffolding: staging, timing, output registration."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.stage_seconds: dict[str, float] = {}
        self.outputs: list[str] = []

    @contextmanager
    def stage(self, name: str):
        start = time.perf_counter()
        try:
            yield
        except Exception as err:
            raise StageError(name, err) from err
        self.stage_seconds[name] = time.perf_counter() - start

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out / name

    def manifest(self, lang, model, quarantined: int = 0) -> RunManifest:
        m = RunManifest(
            kind=self.cfg.kind,
            config=self.cfg.to_dict(),
            language_hash=language_hash(lang),
            model_hash=model_hash(model) if model is not None else None,
            stage_seconds=self.stage_seconds,
            outputs=sorted(set(self.outputs)),
            quarantined=quarantined,
        )
        m.save(self.out / "manifest.json")
        return m


def _get_language(cfg: ExperimentConfig) -> GroundTruthLanguage:
    if cfg.language_file:
        return load_language(cfg.language_file)
    return build_language(cfg.language)


def _sample_corpus(lang, rng, n):
    return [lang.sample(rng) for _ in range(n)]


def _train_valid_split(cfg: ExperimentConfig, sample: list) -> tuple[list, list]:
    """Hold out a seeded fraction of the training sample for validation."""
    n_valid = max(1, int(round(len(sample) * cfg.valid_fraction)))
    perm = SeededRng(cfg.seed, (STREAM_VALID_SPLIT,)).generator().permutation(len(sample))
    valid_idx = set(perm[:n_valid].tolist())
    train = [x for i, x in enumerate(sample) if i not in valid_idx]
    valid = [sample[i] for i in sorted(valid_idx)]
    return train, valid


def _init_neural(cfg: ExperimentConfig, lang) -> NeuralLM:
    cand = cfg.candidate
    window = cand.window if cand.window is not None else lang.base.order + 1
    rng = SeededRng(cfg.seed, (STREAM_TRAIN_INIT,)).generator()
    return NeuralLM.initialize(lang.vocab, window, cand.embed_dim, cand.hidden_dim,
                               lang.max_length, rng, scale=cand.init_scale)


def _train_config(cfg: ExperimentConfig) -> TrainConfig:
    # one master seed drives every substream, the optimizer's included
    return dataclasses.replace(cfg.candidate.train, seed=cfg.seed)


def _train_candidate(run: _Run, lang, train, valid):
    """Train per the candidate spec; returns (model, trace-or-None)."""
    cfg = run.cfg
    kind = cfg.candidate.kind
    if kind == "oracle":
        return lang, None
    if kind == "ngram":
        model = train_ngram(train, lang.vocab, cfg.candidate.ngram_order,
                            cfg.candidate.ngram_alpha, lang.max_length)
        return model, None
    model = _init_neural(cfg, lang)
    best, trace = train_neural(train, valid, _train_config(cfg), model)
    trace.write_csv(run.path("trace.csv"))
    return best, trace


def _range_bins(run: _Run, pairs):
    rng = SeededRng(run.cfg.seed, (STREAM_BOOTSTRAP,)).generator()
    return ev.bin_equal_range(pairs, run.cfg.range_bins, run.cfg.min_bin_count,
                              rng=rng, draws=run.cfg.bootstrap_draws, level=run.cfg.ci_level)


def _count_bin_rows(pairs, k: int, index: int):
    """(index, bin, mean error) rows over k quantile bins; bin 0 is rarest."""
    rows = []
    for b, members in enumerate(ev.bin_equal_count(pairs, k)):
        rows.append((index, b, float(np.mean([p.error for p in members]))))
    return rows


def _moving_average(series, window: int):
    out = []
    for i in range(len(series)):
        lo = max(0, i - window + 1)
        out.append(float(np.mean(series[lo:i + 1])))
    return out


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------


def run_fixed_data(cfg: ExperimentConfig) -> RunManifest:
    """Fixed-sample training followed by instance-level test-set analysis."""
    run = _Run(cfg)
    with run.stage("language"):
        lang = _get_language(cfg)
        save_language(lang, run.path("language.json"))
    with run.stage("sampling"):
        sample = _sample_corpus(lang, SeededRng(cfg.seed, (STREAM_SAMPLING,)).generator(),
                                cfg.train_size)
        train, valid = _train_valid_split(cfg, sample)
        test = _sample_corpus(lang, SeededRng(cfg.seed, (STREAM_TEST_SAMPLING,)).generator(),
                              cfg.test_size)
    with run.stage("training"):
        model, _ = _train_candidate(run, lang, train, valid)
    with run.stage("scoring"):
        pairs, quarantined = ev.collect_pairs(lang, model, test)
        ev.write_pairs_csv(run.path("pairs.csv"), pairs + quarantined)
    with run.stage("analysis"):
        bins, _residual = _range_bins(run, pairs)
        ev.write_bins_csv(run.path("bins.csv"), bins)
        targets = [p.target for p in pairs]
        estimates = [p.estimate for p in pairs]
        x_edges = np.linspace(min(targets), max(targets) + 1e-9, cfg.range_bins + 1)
        y_edges = np.linspace(min(estimates), max(estimates) + 1e-9, cfg.range_bins + 1)
        ev.write_histogram_csv(run.path("histogram.csv"),
                               ev.joint_histogram(pairs, x_edges, y_edges))
    return run.manifest(lang, model, len(quarantined))


def run_epoch_tracking(cfg: ExperimentConfig) -> RunManifest:
    """Quantile-binned error curves for train/test subsets at every epoch."""
    run = _Run(cfg)
    with run.stage("language"):
        lang = _get_language(cfg)
        save_language(lang, run.path("language.json"))
    with run.stage("sampling"):
        sample = _sample_corpus(lang, SeededRng(cfg.seed, (STREAM_SAMPLING,)).generator(),
                                cfg.train_size)
        train, valid = _train_valid_split(cfg, sample)
        test = _sample_corpus(lang, SeededRng(cfg.seed, (STREAM_TEST_SAMPLING,)).generator(),
                              cfg.test_size)

        def subset(data, stream_id):
            if len(data) <= cfg.epoch_subset:
                return list(data)
            rng = SeededRng(cfg.seed, (STREAM_SUBSET, stream_id)).generator()
            idx = np.sort(rng.choice(len(data), size=cfg.epoch_subset, replace=False))
            return [data[i] for i in idx]

        train_subset = subset(train, 0)
        test_subset = subset(test, 1)

    train_rows: list[tuple[int, int, float]] = []
    test_rows: list[tuple[int, int, float]] = []
    quarantined_total = 0

    def record(epoch: int, model):
        nonlocal quarantined_total
        for data, rows in ((train_subset, train_rows), (test_subset, test_rows)):
            pairs, quarantined = ev.collect_pairs(lang, model, data)
            quarantined_total += len(quarantined)
            rows.extend(_count_bin_rows(pairs, cfg.count_bins, epoch))

    with run.stage("training"):
        if cfg.candidate.kind == "oracle":
            model = lang
            for epoch in range(1, cfg.candidate.train.max_epochs + 1):
                record(epoch, lang)
        else:
            model = _init_neural(cfg, lang)
            model, trace = train_neural(train, valid, _train_config(cfg), model,
                                        epoch_callback=record)
            trace.write_csv(run.path("trace.csv"))
    with run.stage("analysis"):
        ev.write_curves_csv(run.path("curves_train.csv"), train_rows)
        ev.write_curves_csv(run.path("curves_test.csv"), test_rows)
    return run.manifest(lang, model, quarantined_total)


def run_online(cfg: ExperimentConfig) -> RunManifest:
    """Fresh-sample-per-iteration training; error trajectory on a fixed test set."""
    run = _Run(cfg)
    with run.stage("language"):
        lang = _get_language(cfg)
        save_language(lang, run.path("language.json"))
    with run.stage("sampling"):
        test = _sample_corpus(lang, SeededRng(cfg.seed, (STREAM_TEST_SAMPLING,)).generator(),
                              cfg.test_size)

    kind = cfg.candidate.kind
    trainer = None
    if kind == "neural":
        model = _init_neural(cfg, lang)
        trainer = NeuralTrainer(model, _train_config(cfg))
    elif kind == "ngram":
        model = NGramModel(lang.vocab, cfg.candidate.ngram_order,
                           cfg.candidate.ngram_alpha, lang.max_length)
    else:
        model = lang

    mean_errors: list[float] = []
    bin_rows: list[tuple[int, int, float]] = []
    quarantined_total = 0
    with run.stage("iterations"):
        for it in range(1, cfg.online_iterations + 1):
            fresh = _sample_corpus(lang, SeededRng(cfg.seed, (STREAM_SAMPLING, it)).generator(),
                                   cfg.fresh_size)
            if kind == "neural":
                if cfg.reset_optimizer_each_iteration:
                    trainer.reset_optimizer()
                trainer.run_epoch(trainer.prepare(fresh))
            elif kind == "ngram":
                update_ngram(model, fresh)
            pairs, quarantined = ev.collect_pairs(lang, model, test)
            quarantined_total += len(quarantined)
            mean_errors.append(float(np.mean([p.error for p in pairs])) if pairs else math.nan)
            if len(pairs) >= cfg.count_bins:
                bin_rows.extend(_count_bin_rows(pairs, cfg.count_bins, it))
    with run.stage("analysis"):
        smoothed = _moving_average(mean_errors, cfg.smoothing_window)
        changes = [math.nan]
        if len(smoothed) >= 2:
            changes += ev.relative_change(smoothed)
        with open(run.path("online.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "mean_error", "smoothed_mean_error", "relative_change"])
            for i, (m, s, c) in enumerate(zip(mean_errors, smoothed, changes), start=1):
                w.writerow([i, repr(float(m)), repr(float(s)), repr(float(c))])
        ev.write_curves_csv(run.path("online_bins.csv"), bin_rows)
    return run.manifest(lang, model, quarantined_total)


def run_perturbation(cfg: ExperimentConfig) -> RunManifest:
    """Score recursive perturbation chains of test sequences at every depth."""
    run = _Run(cfg)
    with run.stage("language"):
        lang = _get_language(cfg)
        save_language(lang, run.path("language.json"))
    with run.stage("sampling"):
        sample = _sample_corpus(lang, SeededRng(cfg.seed, (STREAM_SAMPLING,)).generator(),
                                cfg.train_size)
        train, valid = _train_valid_split(cfg, sample)
        test = _sample_corpus(lang, SeededRng(cfg.seed, (STREAM_TEST_SAMPLING,)).generator(),
                              cfg.test_size)
    with run.stage("training"):
        model, _ = _train_candidate(run, lang, train, valid)

    with run.stage("perturbation"):
        depths, seqs, origins, kinds = [], [], [], []
        for i, x in enumerate(test):
            depths.append(0)
            seqs.append(x)
            origins.append(i)
            kinds.append("none")
            rng = SeededRng(cfg.seed, (STREAM_PERTURBATION, i)).generator()
            for step, seq, kind in pt.perturb_chain(x, lang.vocab, rng, cfg.perturb_depth,
                                                    max_length=lang.max_length):
                depths.append(step)
                seqs.append(seq)
                origins.append(i)
                kinds.append(kind.value)
    with run.stage("scoring"):
        targets = lang.sequence_log_probs(seqs)
        estimates = model.sequence_log_probs(seqs)
        records = [pt.PerturbationRecord(origins[j], depths[j], kinds[j], len(seqs[j]),
                                         float(targets[j]), float(estimates[j]))
                   for j in range(len(seqs))]
        pt.write_records_csv(run.path("perturb_records.csv"), records)
        quarantined = sum(1 for r in records
                          if not (math.isfinite(r.target) and math.isfinite(r.estimate)))
    with run.stage("analysis"):
        finite_targets = [r.target for r in records if math.isfinite(r.target)]
        x_edges = np.linspace(min(finite_targets), max(finite_targets) + 1e-9,
                              cfg.range_bins + 1)
        pt.write_heatmap_csv(run.path("heatmap.csv"), pt.build_heatmap(records, x_edges))
        if cfg.random_sequences > 0:
            _score_random_sequences(run, lang, model)
    return run.manifest(lang, model, quarantined)


def _score_random_sequences(run: _Run, lang, model) -> None:
    cfg = run.cfg
    rng = SeededRng(cfg.seed, (STREAM_RANDOM_SEQUENCES,)).generator()
    seqs = []
    while len(seqs) < cfg.random_sequences:
        x = pt.random_sequence(lang.vocab, rng, cfg.random_mean_len)
        if len(x) <= lang.max_length:  # Poisson overshoot past the cap is unscoreable
            seqs.append(x)
    targets = lang.sequence_log_probs(seqs)
    estimates = model.sequence_log_probs(seqs)
    with open(run.path("random_sequences.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "length", "log_pL", "log_pM", "error"])
        for i, x in enumerate(seqs):
            t, e = float(targets[i]), float(estimates[i])
            err = e - t if math.isfinite(t) and math.isfinite(e) else math.nan
            w.writerow([i, len(x), repr(t), repr(e), repr(err)])


def run_temperature_sweep(cfg: ExperimentConfig) -> RunManifest:
    """One candidate per temperature over retemperings of the same base table."""
    run = _Run(cfg)
    with run.stage("language"):
        base = _get_language(cfg)
        save_language(base, run.path("language.json"))

    summary_rows = []
    bin_rows = []
    last_model = base
    quarantined_total = 0
    for t_index, temperature in enumerate(cfg.temperatures):
        lang = base.retempered(temperature)
        label = f"T{temperature:.2f}"
        with run.stage(f"sample[{label}]"):
            sample = _sample_corpus(
                lang, SeededRng(cfg.seed, (STREAM_SAMPLING, t_index)).generator(), cfg.train_size)
            train, valid = _train_valid_split(cfg, sample)
            test = _sample_corpus(
                lang, SeededRng(cfg.seed, (STREAM_TEST_SAMPLING, t_index)).generator(),
                cfg.test_size)
        with run.stage(f"train[{label}]"):
            if cfg.candidate.kind == "oracle":
                model = lang
            elif cfg.candidate.kind == "ngram":
                model = train_ngram(train, lang.vocab, cfg.candidate.ngram_order,
                                    cfg.candidate.ngram_alpha, lang.max_length)
            else:
                model = _init_neural(cfg, lang)
                model, trace = train_neural(train, valid, _train_config(cfg), model)
                trace.write_csv(run.path(f"trace_{label}.csv"))
        with run.stage(f"score[{label}]"):
            pairs, quarantined = ev.collect_pairs(lang, model, test)
            quarantined_total += len(quarantined)
            bins = ev.bin_equal_count(pairs, cfg.count_bins)
            bin_abs_means = []
            for b, members in enumerate(bins):
                errs = [p.error for p in members]
                mean_target = float(np.mean([p.target for p in members]))
                mean_error = float(np.mean(errs))
                bin_rows.append((temperature, b, len(members), mean_target, mean_error))
                bin_abs_means.append(abs(mean_error))
            summary_rows.append((temperature, float(np.mean([p.error for p in pairs])),
                                 float(np.mean(bin_abs_means))))
        last_model = model

    with run.stage("analysis"):
        with open(run.path("tempsweep_bins.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["temperature", "bin_index", "count", "mean_target", "mean_error"])
            for temperature, b, count, mean_target, mean_error in bin_rows:
                w.writerow([repr(float(temperature)), b, count,
                            repr(mean_target), repr(mean_error)])
        with open(run.path("tempsweep_summary.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["temperature", "mean_error", "mean_abs_bin_error"])
            for temperature, mean_error, mean_abs in summary_rows:
                w.writerow([repr(float(temperature)), repr(mean_error), repr(mean_abs)])
    return run.manifest(base, last_model, quarantined_total)


_RUNNERS = {
    "fixed": run_fixed_data,
    "epochs": run_epoch_tracking,
    "online": run_online,
    "perturb": run_perturbation,
    "tempsweep": run_temperature_sweep,
}


def run_experiment(cfg: ExperimentConfig) -> RunManifest:
    return _RUNNERS[cfg.kind](cfg)


def rerun(manifest_path: str | Path, out_dir: str | Path) -> RunManifest:
    """Re-execute the configuration recorded in a manifest into a new directory."""
    manifest = RunManifest.load(manifest_path)
    cfg = ExperimentConfig.from_dict(manifest.config)
    cfg = dataclasses.replace(cfg, out_dir=str(out_dir))
    return run_experiment(cfg)
