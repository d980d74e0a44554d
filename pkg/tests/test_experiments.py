import csv
import json
import math
from pathlib import Path

import pytest

from taillab.experiments import (
    CandidateSpec,
    ExperimentConfig,
    RunManifest,
    StageError,
    rerun,
    run_experiment,
)
from taillab.lang import LanguageSpec
from taillab.learner import TrainConfig

TINY_LANG = LanguageSpec(vocab_size=6, order=1, concentration=0.4, eos_bias=1.5,
                         seed=3, max_length=12, temperature=0.85)


def tiny_config(kind, candidate, out_dir, **overrides):
    defaults = dict(
        language=TINY_LANG, train_size=300, test_size=120, epoch_subset=100,
        online_iterations=5, fresh_size=150, perturb_depth=5, bootstrap_draws=200,
        count_bins=10, range_bins=8, random_sequences=40, seed=11,
    )
    defaults.update(overrides)
    return ExperimentConfig(kind=kind, candidate=candidate, out_dir=str(out_dir), **defaults)


def neural_candidate(max_epochs=2):
    return CandidateSpec(kind="neural", embed_dim=4, hidden_dim=8,
                         train=TrainConfig(max_epochs=max_epochs))


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def csv_bytes(out_dir):
    return {p.name: p.read_bytes() for p in sorted(Path(out_dir).glob("*.csv"))}


class TestOracleNull:
    """With the ground truth as candidate every statistic is exactly zero."""

    def test_fixed(self, tmp_path):
        cfg = tiny_config("fixed", CandidateSpec(kind="oracle"), tmp_path)
        run_experiment(cfg)
        for row in read_csv(tmp_path / "pairs.csv"):
            assert float(row["error"]) == 0.0
        for row in read_csv(tmp_path / "bins.csv"):
            assert float(row["mean_error"]) == 0.0
            assert float(row["ci_lo"]) == 0.0 and float(row["ci_hi"]) == 0.0

    def test_epochs(self, tmp_path):
        cfg = tiny_config("epochs", CandidateSpec(kind="oracle", train=TrainConfig(max_epochs=3)),
                          tmp_path)
        run_experiment(cfg)
        for name in ("curves_train.csv", "curves_test.csv"):
            rows = read_csv(tmp_path / name)
            assert len(rows) == 3 * cfg.count_bins
            assert all(float(r["mean_error"]) == 0.0 for r in rows)

    def test_online(self, tmp_path):
        cfg = tiny_config("online", CandidateSpec(kind="oracle"), tmp_path)
        run_experiment(cfg)
        rows = read_csv(tmp_path / "online.csv")
        assert len(rows) == cfg.online_iterations
        assert all(float(r["mean_error"]) == 0.0 for r in rows)

    def test_perturb(self, tmp_path):
        cfg = tiny_config("perturb", CandidateSpec(kind="oracle"), tmp_path)
        run_experiment(cfg)
        for row in read_csv(tmp_path / "heatmap.csv"):
            mean = float(row["mean_error"])
            assert math.isnan(mean) or mean == 0.0
        for row in read_csv(tmp_path / "random_sequences.csv"):
            err = float(row["error"])
            assert math.isnan(err) or err == 0.0

    def test_tempsweep(self, tmp_path):
        cfg = tiny_config("tempsweep", CandidateSpec(kind="oracle"), tmp_path,
                          temperatures=[0.85, 1.0])
        run_experiment(cfg)
        rows = read_csv(tmp_path / "tempsweep_summary.csv")
        assert len(rows) == 2
        assert all(float(r["mean_error"]) == 0.0 for r in rows)
        assert all(float(r["mean_abs_bin_error"]) == 0.0 for r in rows)


class TestReproducibility:
    @pytest.mark.parametrize("kind,candidate", [
        ("fixed", CandidateSpec(kind="ngram", ngram_order=2)),
        ("fixed", None),  # neural, see below
        ("epochs", None),
        ("online", None),
        ("perturb", CandidateSpec(kind="ngram", ngram_order=2)),
        ("tempsweep", CandidateSpec(kind="ngram", ngram_order=2)),
    ])
    def test_identical_bytes_across_runs(self, tmp_path, kind, candidate):
        candidate = candidate or neural_candidate()
        extra = {"temperatures": [0.85, 1.0]} if kind == "tempsweep" else {}
        a = tiny_config(kind, candidate, tmp_path / "a", **extra)
        b = tiny_config(kind, candidate, tmp_path / "b", **extra)
        run_experiment(a)
        run_experiment(b)
        bytes_a, bytes_b = csv_bytes(tmp_path / "a"), csv_bytes(tmp_path / "b")
        assert bytes_a.keys() == bytes_b.keys() and len(bytes_a) > 0
        for name in bytes_a:
            assert bytes_a[name] == bytes_b[name], f"{name} differs between runs"

    def test_rerun_from_manifest(self, tmp_path):
        cfg = tiny_config("fixed", neural_candidate(), tmp_path / "orig")
        run_experiment(cfg)
        rerun(tmp_path / "orig" / "manifest.json", tmp_path / "replay")
        orig, replay = csv_bytes(tmp_path / "orig"), csv_bytes(tmp_path / "replay")
        assert orig.keys() == replay.keys()
        for name in orig:
            assert orig[name] == replay[name]
        assert ((tmp_path / "orig" / "language.json").read_bytes()
                == (tmp_path / "replay" / "language.json").read_bytes())

    def test_different_seed_changes_outputs(self, tmp_path):
        a = tiny_config("fixed", neural_candidate(), tmp_path / "a", seed=1)
        b = tiny_config("fixed", neural_candidate(), tmp_path / "b", seed=2)
        run_experiment(a)
        run_experiment(b)
        assert (tmp_path / "a" / "pairs.csv").read_bytes() != (tmp_path / "b" / "pairs.csv").read_bytes()


class TestConservation:
    def test_every_test_sequence_emitted_once(self, tmp_path):
        cfg = tiny_config("fixed", CandidateSpec(kind="ngram", ngram_order=2, ngram_alpha=0.0),
                          tmp_path)
        manifest = run_experiment(cfg)
        rows = read_csv(tmp_path / "pairs.csv")
        assert len(rows) == cfg.test_size
        assert manifest.quarantined == sum(1 for r in rows if math.isnan(float(r["error"])))

    def test_perturb_record_cardinality(self, tmp_path):
        cfg = tiny_config("perturb", CandidateSpec(kind="ngram", ngram_order=2), tmp_path)
        run_experiment(cfg)
        rows = read_csv(tmp_path / "perturb_records.csv")
        assert len(rows) == cfg.test_size * (cfg.perturb_depth + 1)
        depth0 = [r for r in rows if r["depth"] == "0"]
        assert len(depth0) == cfg.test_size

    def test_epoch_curve_cardinality(self, tmp_path):
        cfg = tiny_config("epochs", neural_candidate(max_epochs=3), tmp_path)
        run_experiment(cfg)
        rows = read_csv(tmp_path / "curves_train.csv")
        assert len(rows) == 3 * cfg.count_bins

    def test_online_relative_change_length(self, tmp_path):
        cfg = tiny_config("online", neural_candidate(max_epochs=1), tmp_path)
        run_experiment(cfg)
        rows = read_csv(tmp_path / "online.csv")
        changes = [float(r["relative_change"]) for r in rows]
        assert math.isnan(changes[0])
        assert sum(1 for c in changes if not math.isnan(c)) == cfg.online_iterations - 1


class TestConfig:
    def test_round_trips_through_json(self):
        cfg = tiny_config("fixed", neural_candidate(), "somewhere")
        doc = json.loads(json.dumps(cfg.to_dict()))
        assert ExperimentConfig.from_dict(doc) == cfg

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            ExperimentConfig(kind="mystery")

    def test_epochs_with_ngram_rejected(self):
        with pytest.raises(ValueError):
            ExperimentConfig(kind="epochs", candidate=CandidateSpec(kind="ngram"))

    def test_bad_candidate_kind_rejected(self):
        with pytest.raises(ValueError):
            CandidateSpec(kind="quantum")


class TestDirection:
    def test_ngram_candidate_underestimates_on_peaked_language(self, tmp_path):
        peaked = LanguageSpec(vocab_size=32, order=2, concentration=0.3, eos_bias=4.0,
                              seed=0, max_length=40, temperature=0.85)
        cfg = ExperimentConfig(
            kind="fixed", language=peaked,
            candidate=CandidateSpec(kind="ngram", ngram_order=3, ngram_alpha=0.1),
            train_size=5_000, test_size=2_000, bootstrap_draws=200,
            seed=2, out_dir=str(tmp_path))
        run_experiment(cfg)
        errors = [float(r["error"]) for r in read_csv(tmp_path / "pairs.csv")
                  if not math.isnan(float(r["error"]))]
        assert sum(errors) / len(errors) < 0


class TestStageErrors:
    def test_missing_language_file_names_stage(self, tmp_path):
        cfg = tiny_config("fixed", CandidateSpec(kind="oracle"), tmp_path,
                          language_file=str(tmp_path / "missing.json"))
        with pytest.raises(StageError) as exc:
            run_experiment(cfg)
        assert exc.value.stage == "language"

    def test_manifest_records_stages_and_hashes(self, tmp_path):
        cfg = tiny_config("fixed", CandidateSpec(kind="ngram", ngram_order=2), tmp_path)
        manifest = run_experiment(cfg)
        assert set(manifest.stage_seconds) == {"language", "sampling", "training",
                                               "scoring", "analysis"}
        assert len(manifest.language_hash) == 64
        assert manifest.model_hash is not None
        loaded = RunManifest.load(tmp_path / "manifest.json")
        assert loaded.language_hash == manifest.language_hash
