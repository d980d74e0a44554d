"""Candidate sequence models trained on samples from a ground-truth language.

Two model families share the chain-rule scoring conventions of
:class:`taillab.core.SequenceModel`:

- :class:`NGramModel`: add-alpha smoothed counts over fixed-length contexts.
- :class:`NeuralLM`: a fixed-window feedforward network (embedding ->
  concatenation -> tanh hidden layer -> output logits) with hand-derived
  analytic gradients, trained by Adam with validation-driven learning-rate
  halving and best-epoch selection.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import (
    NEG_INF,
    STREAM_TRAIN_SHUFFLE,
    SeededRng,
    Sequence,
    SequenceModel,
    Vocabulary,
)


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss becomes non-finite."""

    def __init__(self, epoch: int):
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}")
        self.epoch = epoch


# ---------------------------------------------------------------------------
# n-gram candidate
# ---------------------------------------------------------------------------


class NGramModel(SequenceModel):
    """Add-alpha smoothed conditional model over length-n contexts.

    ``order`` is the number of previous tokens conditioned on (BOS-padded).
    With ``alpha = 0`` unseen events have probability exactly zero.
    """

    def __init__(self, vocab: Vocabulary, order: int, alpha: float, max_length: int,
                 counts: dict[Sequence, np.ndarray] | None = None):
        if order < 1:
            raise ValueError("order must be positive")
        if alpha < 0:
            raise ValueError("alpha must be non-negative")
        self.vocab = vocab
        self.order = order
        self.alpha = float(alpha)
        self.max_length = int(max_length)
        self.counts = counts if counts is not None else {}
        self._cond_cache: dict[Sequence, np.ndarray] = {}

    def context_of(self, prefix: Sequence) -> Sequence:
        return ((self.vocab.bos,) * self.order + tuple(prefix))[-self.order:]

    def conditional_log_probs(self, prefix: Sequence) -> np.ndarray:
        ctx = self.context_of(prefix)
        cached = self._cond_cache.get(ctx)
        if cached is None:
            c = self.counts.get(ctx)
            n_out = self.vocab.n_outcomes
            if c is None:
                c = np.zeros(n_out)
            denom = c.sum() + self.alpha * n_out
            with np.errstate(divide="ignore"):
                if denom == 0:  # alpha = 0 and unseen context
                    cached = np.full(n_out, NEG_INF)
                else:
                    cached = np.log((c + self.alpha) / denom)
            self._cond_cache[ctx] = cached
        return cached


def update_ngram(model: NGramModel, corpus: list[Sequence]) -> None:
    """Add a corpus's BOS-padded context/outcome events to the count tables."""
    counts = model.counts
    vocab = model.vocab
    eos = vocab.eos
    for x in corpus:
        model._check(x)
        ctx = (vocab.bos,) * model.order
        for t in tuple(x) + (eos,):
            row = counts.get(ctx)
            if row is None:
                row = counts.setdefault(ctx, np.zeros(vocab.n_outcomes))
            row[t] += 1
            ctx = ctx[1:] + (t,)
    model._cond_cache.clear()


def train_ngram(corpus: list[Sequence], vocab: Vocabulary, order: int, alpha: float,
                max_length: int) -> NGramModel:
    """Count BOS-padded context/outcome events (terminal EOS included).

    The smoothed conditional is ``(count + alpha) / (total + alpha * (|Σ|+1))``.
    """
    if not corpus:
        raise ValueError("corpus is empty")
    model = NGramModel(vocab, order, alpha, max_length)
    update_ngram(model, corpus)
    return model


# ---------------------------------------------------------------------------
# neural candidate
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    """Optimization protocol: minibatch Adam with validation-driven LR halving."""

    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 20
    halve_lr_on_increase: bool = True
    patience: int = 0  # epochs without a new best before stopping; 0 disables
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be non-negative")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    valid_loss: float
    lr: float


@dataclass
class TrainTrace:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "valid_loss", "lr"])
            for row in self.epochs:
                writer.writerow([row.epoch, repr(row.train_loss), repr(row.valid_loss), repr(row.lr)])


class NeuralLM(SequenceModel):
    """Fixed-window feedforward LM: embed w context tokens, one tanh layer, logits.

    The context window is BOS-padded; BOS shares embedding index ``|Σ|``.
    All-zero parameters give exactly uniform predictions.
    """

    def __init__(self, vocab: Vocabulary, window: int, max_length: int,
                 params: dict[str, np.ndarray]):
        if window < 1:
            raise ValueError("window must be positive")
        self.vocab = vocab
        self.window = window
        self.max_length = int(max_length)
        self.params = params

    @classmethod
    def initialize(cls, vocab: Vocabulary, window: int, embed_dim: int, hidden_dim: int,
                   max_length: int, rng: np.random.Generator, scale: float = 0.1) -> "NeuralLM":
        n_in = vocab.size + 1  # ordinary tokens + BOS
        n_out = vocab.n_outcomes
        params = {
            "embed": rng.normal(0.0, scale, size=(n_in, embed_dim)),
            "w1": rng.normal(0.0, scale, size=(window * embed_dim, hidden_dim)),
            "b1": np.zeros(hidden_dim),
            "w2": rng.normal(0.0, scale, size=(hidden_dim, n_out)),
            "b2": np.zeros(n_out),
        }
        return cls(vocab, window, max_length, params)

    @classmethod
    def zeros(cls, vocab: Vocabulary, window: int, embed_dim: int, hidden_dim: int,
              max_length: int) -> "NeuralLM":
        rng = np.random.default_rng(0)
        model = cls.initialize(vocab, window, embed_dim, hidden_dim, max_length, rng)
        model.params = {k: np.zeros_like(v) for k, v in model.params.items()}
        return model

    @property
    def embed_dim(self) -> int:
        return self.params["embed"].shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.params["b1"].shape[0]

    @property
    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def copy(self) -> "NeuralLM":
        return NeuralLM(self.vocab, self.window, self.max_length,
                        {k: v.copy() for k, v in self.params.items()})

    def forward(self, contexts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Hidden activations and log-softmax outputs for a (N, window) context batch."""
        p = self.params
        n = contexts.shape[0]
        z = p["embed"][contexts].reshape(n, -1)
        h = np.tanh(z @ p["w1"] + p["b1"])
        logits = h @ p["w2"] + p["b2"]
        m = logits.max(axis=1, keepdims=True)
        log_probs = logits - (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))
        return z, h, log_probs

    def conditional_log_probs(self, prefix: Sequence) -> np.ndarray:
        ctx = ((self.vocab.bos,) * self.window + tuple(prefix))[-self.window:]
        return self.forward(np.asarray([ctx]))[2][0]

    def token_log_probs(self, x: Sequence) -> np.ndarray:
        self._check(x)
        contexts, targets = _step_events(self.vocab, self.window, x)
        out = self.forward(contexts)[2][np.arange(len(targets)), targets]
        if len(x) == self.max_length:
            out[-1] = 0.0  # EOS forced at the cap
        return out

    def sequence_log_probs(self, corpus) -> np.ndarray:
        events = prepare_events(corpus, self.vocab, self.window, self.max_length)
        step_lp = np.empty(len(events.targets))
        for lo in range(0, len(events.targets), 65536):
            hi = min(lo + 65536, len(events.targets))
            lp = self.forward(events.contexts[lo:hi])[2]
            step_lp[lo:hi] = lp[np.arange(hi - lo), events.targets[lo:hi]]
        return np.add.reduceat(step_lp, events.offsets[:-1]) if len(corpus) else np.empty(0)


def _step_events(vocab: Vocabulary, window: int, x: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """Context rows and targets for every prediction step of one sequence."""
    padded = np.concatenate([np.full(window, vocab.bos, dtype=np.int64),
                             np.asarray(x, dtype=np.int64)])
    contexts = sliding_window_view(padded, window)
    targets = np.append(np.asarray(x, dtype=np.int64), vocab.eos)
    return contexts, targets


@dataclass
class PreparedEvents:
    """Flattened (context, target) prediction events for a corpus.

    EOS steps forced by the length cap are omitted: they carry probability one
    and no gradient.  ``offsets`` delimits each sequence's event range.
    """

    contexts: np.ndarray
    targets: np.ndarray
    offsets: np.ndarray

    @property
    def n_sequences(self) -> int:
        return len(self.offsets) - 1


def prepare_events(corpus, vocab: Vocabulary, window: int, max_length: int) -> PreparedEvents:
    ctx_parts, tgt_parts, steps = [], [], np.empty(len(corpus), dtype=np.int64)
    for i, x in enumerate(corpus):
        contexts, targets = _step_events(vocab, window, x)
        if len(x) >= max_length:  # drop the forced EOS step
            contexts, targets = contexts[: len(x)], targets[: len(x)]
        ctx_parts.append(contexts)
        tgt_parts.append(targets)
        steps[i] = len(targets)
    offsets = np.concatenate([[0], np.cumsum(steps)])
    if not corpus:
        w = window
        return PreparedEvents(np.empty((0, w), dtype=np.int64), np.empty(0, dtype=np.int64), offsets)
    return PreparedEvents(np.concatenate(ctx_parts), np.concatenate(tgt_parts), offsets)


def _forward_backward(model: NeuralLM, contexts: np.ndarray, targets: np.ndarray):
    """Token-mean NLL and its exact gradients for one event batch."""
    p = model.params
    n = len(targets)
    z, h, log_probs = model.forward(contexts)
    loss = -float(log_probs[np.arange(n), targets].mean())

    dlogits = np.exp(log_probs)
    dlogits[np.arange(n), targets] -= 1.0
    dlogits /= n
    dh = dlogits @ p["w2"].T
    da = dh * (1.0 - h * h)
    dz = da @ p["w1"].T
    grads = {
        "w2": h.T @ dlogits,
        "b2": dlogits.sum(axis=0),
        "w1": z.T @ da,
        "b1": da.sum(axis=0),
        "embed": np.zeros_like(p["embed"]),
    }
    np.add.at(grads["embed"], contexts.ravel(),
              dz.reshape(n * model.window, model.embed_dim))
    return loss, grads


def loss_and_gradients(model: NeuralLM, batch: list[Sequence]) -> tuple[float, dict[str, np.ndarray]]:
    """Mean per-token NLL over the batch and analytic gradients w.r.t. every parameter."""
    if not batch:
        raise ValueError("batch is empty")
    events = prepare_events(batch, model.vocab, model.window, model.max_length)
    return _forward_backward(model, events.contexts, events.targets)


class AdamState:
    """First/second moment accumulators for one parameter dict."""

    def __init__(self, params: dict[str, np.ndarray]):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def update(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               lr: float, beta1: float, beta2: float, epsilon: float) -> None:
        self.t += 1
        bc1 = 1.0 - beta1 ** self.t
        bc2 = 1.0 - beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = beta1 * self.m[k] + (1.0 - beta1) * g
            self.v[k] = beta2 * self.v[k] + (1.0 - beta2) * (g * g)
            params[k] -= lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + epsilon)


class NeuralTrainer:
    """Stateful minibatch Adam driver; each ``run_epoch`` shuffles sequences.

    Used directly for online training continuations; :func:`train_neural`
    wraps it with the validation protocol.
    """

    def __init__(self, model: NeuralLM, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.lr = cfg.learning_rate
        self.state = AdamState(model.params)
        self.epochs_run = 0
        self._shuffle_rng = SeededRng(cfg.seed, (STREAM_TRAIN_SHUFFLE,)).generator()

    def reset_optimizer(self) -> None:
        self.state = AdamState(self.model.params)

    def prepare(self, corpus) -> PreparedEvents:
        return prepare_events(corpus, self.model.vocab, self.model.window, self.model.max_length)

    def run_epoch(self, events: PreparedEvents) -> float:
        """One pass over the corpus; returns the token-mean training loss."""
        cfg = self.cfg
        n_seq = events.n_sequences
        perm = self._shuffle_rng.permutation(n_seq)
        steps = events.offsets[perm + 1] - events.offsets[perm]
        ends = np.cumsum(steps)
        starts = ends - steps
        order = np.arange(ends[-1]) - np.repeat(starts, steps) + np.repeat(events.offsets[perm], steps)

        total_nll, total_tok = 0.0, 0
        for lo_seq in range(0, n_seq, cfg.batch_size):
            hi_seq = min(lo_seq + cfg.batch_size, n_seq)
            lo = starts[lo_seq]
            hi = ends[hi_seq - 1]
            idx = order[lo:hi]
            loss, grads = _forward_backward(self.model, events.contexts[idx], events.targets[idx])
            if not math.isfinite(loss):
                raise TrainingDivergedError(self.epochs_run + 1)
            self.state.update(self.model.params, grads, self.lr, cfg.beta1, cfg.beta2, cfg.epsilon)
            total_nll += loss * (hi - lo)
            total_tok += hi - lo
        self.epochs_run += 1
        return total_nll / total_tok

    def evaluate(self, events: PreparedEvents) -> float:
        """Token-mean NLL without touching optimizer state."""
        n = len(events.targets)
        total = 0.0
        for lo in range(0, n, 65536):
            hi = min(lo + 65536, n)
            lp = self.model.forward(events.contexts[lo:hi])[2]
            total -= float(lp[np.arange(hi - lo), events.targets[lo:hi]].sum())
        return total / n

    def halve_lr(self) -> None:
        self.lr /= 2.0


def train_neural(train: list[Sequence], valid: list[Sequence], cfg: TrainConfig,
                 model: NeuralLM, epoch_callback=None) -> tuple[NeuralLM, TrainTrace]:
    """Train with LR halving on validation increase; return the best-validation model.

    After any epoch whose validation loss strictly exceeds the previous
    epoch's, the learning rate is halved.  The returned model carries the
    parameters of the epoch with the lowest validation loss; the input model
    keeps its final-epoch state.
    """
    if not train or not valid:
        raise ValueError("train and valid corpora must be non-empty")
    trainer = NeuralTrainer(model, cfg)
    train_events = trainer.prepare(train)
    valid_events = trainer.prepare(valid)

    trace = TrainTrace()
    best_loss, best_params = math.inf, {k: v.copy() for k, v in model.params.items()}
    prev_valid = None
    for epoch in range(1, cfg.max_epochs + 1):
        lr_in_effect = trainer.lr
        train_loss = trainer.run_epoch(train_events)
        valid_loss = trainer.evaluate(valid_events)
        if not math.isfinite(valid_loss):
            raise TrainingDivergedError(epoch)
        trace.epochs.append(EpochStats(epoch, train_loss, valid_loss, lr_in_effect))
        if valid_loss < best_loss:
            best_loss = valid_loss
            trace.best_epoch = epoch
            best_params = {k: v.copy() for k, v in model.params.items()}
        if cfg.halve_lr_on_increase and prev_valid is not None and valid_loss > prev_valid:
            trainer.halve_lr()
        prev_valid = valid_loss
        if epoch_callback is not None:
            epoch_callback(epoch, model)
        if cfg.patience > 0 and epoch - trace.best_epoch >= cfg.patience:
            break
    best_model = NeuralLM(model.vocab, model.window, model.max_length, best_params)
    return best_model, trace


# ---------------------------------------------------------------------------
# shared candidate operations
# ---------------------------------------------------------------------------


def score_sequence_model(model: SequenceModel, x: Sequence) -> float:
    """Chain-rule log-probability under a candidate (same BOS/EOS convention as p_L)."""
    return model.sequence_log_prob(tuple(x))


def perplexity(model: SequenceModel, data: list[Sequence]) -> float:
    """Mean over sequences of exp(per-token mean NLL); EOS counts as a token."""
    if not data:
        raise ValueError("data is empty")
    per_seq = np.empty(len(data))
    for i, x in enumerate(data):
        steps = model.token_log_probs(tuple(x))
        if (steps == NEG_INF).any():
            raise ValueError(f"sequence {i} has a zero-probability step: {tuple(x)}")
        per_seq[i] = math.exp(-steps.mean())
    return float(per_seq.mean())


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

_FORMAT = "taillab-model"
_VERSION = 1


def save_model(model: SequenceModel, path: str | Path) -> None:
    """Versioned JSON snapshot; reload reproduces scores exactly."""
    doc = {
        "format": _FORMAT,
        "version": _VERSION,
        "vocab_size": model.vocab.size,
        "max_length": model.max_length,
    }
    if isinstance(model, NGramModel):
        doc["kind"] = "ngram"
        doc["order"] = model.order
        doc["alpha"] = model.alpha
        doc["counts"] = [[list(ctx), row.astype(int).tolist()]
                         for ctx, row in sorted(model.counts.items())]
    elif isinstance(model, NeuralLM):
        doc["kind"] = "neural"
        doc["window"] = model.window
        doc["params"] = {k: v.tolist() for k, v in model.params.items()}
    else:
        raise TypeError(f"cannot persist model of type {type(model).__name__}")
    Path(path).write_text(json.dumps(doc))


def load_model(path: str | Path) -> SequenceModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != _FORMAT:
        raise ValueError(f"{path}: not a {_FORMAT} file")
    if doc.get("version") != _VERSION:
        raise ValueError(f"{path}: unsupported version {doc.get('version')}")
    vocab = Vocabulary(doc["vocab_size"])
    if doc["kind"] == "ngram":
        counts = {tuple(ctx): np.asarray(row, dtype=float) for ctx, row in doc["counts"]}
        return NGramModel(vocab, doc["order"], doc["alpha"], doc["max_length"], counts)
    if doc["kind"] == "neural":
        params = {k: np.asarray(v, dtype=float) for k, v in doc["params"].items()}
        return NeuralLM(vocab, doc["window"], doc["max_length"], params)
    raise ValueError(f"{path}: unknown model kind {doc['kind']!r}")
