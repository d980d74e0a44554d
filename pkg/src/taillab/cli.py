"""Command-line front end.

Subcommands mirror the library pipelines::

    taillab lang build --spec spec.json --out lang.json
    taillab lang inspect lang.json
    taillab sample --lang lang.json --n 1000 --seed 7 --out samples.txt
    taillab train --lang lang.json --candidate cand.json --train samples.txt --out model.json
    taillab score --lang lang.json --model model.json --data samples.txt --out pairs.csv
    taillab eval fixed|epochs|online|perturb|tempsweep --config exp.json --out-dir runs/x
    taillab lnre curve --tokens tokens.txt --orders 1,2,3 --out curve.csv

Configs are JSON documents; ``--seed``/``--out-dir`` override the config.
Exit code 0 on success; failures print the failing stage and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .core import STREAM_SAMPLING, STREAM_VALID_SPLIT, SeededRng
from . import evaluation as ev
from .experiments import (
    CandidateSpec,
    ExperimentConfig,
    StageError,
    run_experiment,
)
from .lang import build_language, LanguageSpec, load_language, save_language
from .learner import TrainConfig, load_model, save_model, train_neural, train_ngram
from .lnre import default_checkpoints, extract_ngrams_documents, productivity_curve, \
    read_token_file, write_productivity_csv
from .experiments import _init_neural, _train_config  # reuse candidate wiring


def write_sequences(path: str | Path, sequences) -> None:
    """One sequence per line, token ids space-separated; empty lines are empty sequences."""
    with open(path, "w") as fh:
        for x in sequences:
            fh.write(" ".join(str(t) for t in x) + "\n")


def read_sequences(path: str | Path) -> list[tuple[int, ...]]:
    text = Path(path).read_text()
    return [tuple(int(t) for t in line.split()) for line in text.splitlines()]


def _load_json(path: str) -> dict:
    return json.loads(Path(path).read_text())


def _cmd_lang_build(args) -> int:
    spec_doc = _load_json(args.spec)
    if args.seed is not None:
        spec_doc["seed"] = args.seed
    lang = build_language(LanguageSpec(**spec_doc))
    save_language(lang, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_lang_inspect(args) -> int:
    lang = load_language(args.path)
    probs = np.exp(lang._conditionals())
    print(f"vocabulary size : {lang.vocab.size}")
    print(f"order           : {lang.base.order}")
    print(f"contexts        : {lang.base.context_count}")
    print(f"temperature     : {lang.temperature}")
    print(f"max length      : {lang.max_length}")
    print(f"mean EOS mass   : {probs[:, lang.vocab.eos].mean():.4f}")
    entropies = -(np.where(probs > 0, probs * np.log(np.maximum(probs, 1e-300)), 0.0)).sum(axis=1)
    print(f"row entropy     : mean {entropies.mean():.4f} nats, max {entropies.max():.4f} nats")
    if lang.spec is not None:
        print(f"spec            : {lang.spec}")
    return 0


def _cmd_sample(args) -> int:
    lang = load_language(args.lang)
    rng = SeededRng(args.seed, (STREAM_SAMPLING,)).generator()
    write_sequences(args.out, (lang.sample(rng) for _ in range(args.n)))
    print(f"wrote {args.n} sequences to {args.out}")
    return 0


def _cmd_train(args) -> int:
    lang = load_language(args.lang)
    cand_doc = _load_json(args.candidate)
    if isinstance(cand_doc.get("train"), dict):
        cand_doc["train"] = TrainConfig(**cand_doc["train"])
    cand = CandidateSpec(**cand_doc)
    corpus = read_sequences(args.train)
    if cand.kind == "ngram":
        model = train_ngram(corpus, lang.vocab, cand.ngram_order, cand.ngram_alpha,
                            lang.max_length)
    elif cand.kind == "neural":
        if args.valid:
            train_set, valid_set = corpus, read_sequences(args.valid)
        else:
            n_valid = max(1, len(corpus) // 20)
            perm = SeededRng(args.seed, (STREAM_VALID_SPLIT,)).generator().permutation(len(corpus))
            hold = set(perm[:n_valid].tolist())
            train_set = [x for i, x in enumerate(corpus) if i not in hold]
            valid_set = [corpus[i] for i in sorted(hold)]
        cfg = ExperimentConfig(kind="fixed", candidate=cand, seed=args.seed)
        model = _init_neural(cfg, lang)
        model, trace = train_neural(train_set, valid_set, _train_config(cfg), model)
        if args.trace:
            trace.write_csv(args.trace)
    else:
        raise ValueError("train requires a 'ngram' or 'neural' candidate")
    save_model(model, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_score(args) -> int:
    lang = load_language(args.lang)
    model = lang if args.model == "oracle" else load_model(args.model)
    data = read_sequences(args.data)
    pairs, quarantined = ev.collect_pairs(lang, model, data)
    ev.write_pairs_csv(args.out, pairs + quarantined)
    print(f"wrote {len(pairs) + len(quarantined)} pairs to {args.out} "
          f"({len(quarantined)} quarantined)")
    return 0


def _cmd_eval(args) -> int:
    cfg_doc = _load_json(args.config)
    cfg_doc["kind"] = args.experiment
    if args.seed is not None:
        cfg_doc["seed"] = args.seed
    if args.out_dir is not None:
        cfg_doc["out_dir"] = args.out_dir
    manifest = run_experiment(ExperimentConfig.from_dict(cfg_doc))
    print(f"wrote {len(manifest.outputs)} report files to {cfg_doc.get('out_dir', manifest.config['out_dir'])}")
    return 0


def _cmd_lnre_curve(args) -> int:
    documents = read_token_file(args.tokens)
    orders = [int(n) for n in args.orders.split(",") if n.strip()]
    curves = []
    for n in orders:
        events = list(extract_ngrams_documents(documents, n))
        checkpoints = ([int(c) for c in args.checkpoints.split(",")]
                       if args.checkpoints else default_checkpoints(len(events)))
        checkpoints = [c for c in checkpoints if c <= len(events)] or [len(events)]
        curves.append((n, productivity_curve(events, checkpoints, label=f"{n}-gram")))
    write_productivity_csv(args.out, curves)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="taillab",
                                     description="heavy-tail estimation-error laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p_lang = sub.add_parser("lang", help="build or inspect ground-truth languages")
    lang_sub = p_lang.add_subparsers(dest="lang_command", required=True)
    p_build = lang_sub.add_parser("build")
    p_build.add_argument("--spec", required=True, help="LanguageSpec JSON file")
    p_build.add_argument("--seed", type=int, default=None)
    p_build.add_argument("--out", required=True)
    p_build.set_defaults(func=_cmd_lang_build)
    p_inspect = lang_sub.add_parser("inspect")
    p_inspect.add_argument("path")
    p_inspect.set_defaults(func=_cmd_lang_inspect)

    p_sample = sub.add_parser("sample", help="ancestral-sample sequences from a language")
    p_sample.add_argument("--lang", required=True)
    p_sample.add_argument("--n", type=int, required=True)
    p_sample.add_argument("--seed", type=int, default=0)
    p_sample.add_argument("--out", required=True)
    p_sample.set_defaults(func=_cmd_sample)

    p_train = sub.add_parser("train", help="train a candidate model on a sample file")
    p_train.add_argument("--lang", required=True)
    p_train.add_argument("--candidate", required=True, help="CandidateSpec JSON file")
    p_train.add_argument("--train", required=True)
    p_train.add_argument("--valid", default=None)
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--trace", default=None)
    p_train.add_argument("--out", required=True)
    p_train.set_defaults(func=_cmd_train)

    p_score = sub.add_parser("score", help="score sequences under language and model")
    p_score.add_argument("--lang", required=True)
    p_score.add_argument("--model", required=True, help="model file, or 'oracle'")
    p_score.add_argument("--data", required=True)
    p_score.add_argument("--out", required=True)
    p_score.set_defaults(func=_cmd_score)

    p_eval = sub.add_parser("eval", help="run a full experiment pipeline")
    p_eval.add_argument("experiment",
                        choices=["fixed", "epochs", "online", "perturb", "tempsweep"])
    p_eval.add_argument("--config", required=True, help="ExperimentConfig JSON file")
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.add_argument("--out-dir", default=None)
    p_eval.set_defaults(func=_cmd_eval)

    p_lnre = sub.add_parser("lnre", help="vocabulary-growth analyses")
    lnre_sub = p_lnre.add_subparsers(dest="lnre_command", required=True)
    p_curve = lnre_sub.add_parser("curve")
    p_curve.add_argument("--tokens", required=True, help="one document per line")
    p_curve.add_argument("--orders", default="1,2,3,4")
    p_curve.add_argument("--checkpoints", default=None)
    p_curve.add_argument("--out", required=True)
    p_curve.set_defaults(func=_cmd_lnre_curve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except StageError as err:
        print(f"error in stage {err.stage!r}: {err}", file=sys.stderr)
        return 1
    except (ValueError, OSError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
