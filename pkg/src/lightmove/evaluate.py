"""Ranking metrics, baseline predictors, and evaluation reports.

Every prediction row is scored by the rank of the true location (ties
broken toward the smaller index). Hits@k and MRR are pooled over all
(example, step) target pairs. Unknown-vocabulary targets are excluded
from both numerator and denominator, with the count reported.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import model as model_mod
from .errors import ConfigError, ShapeError

BASELINE_KINDS = ("frequency", "markov1", "plain_gru")
SMOOTHING = 1e-6


def rank_of_target(row: np.ndarray, target: int, unknown_index: int | None = None):
    """1-based rank of the target under strict-greater counting.

    Ties rank the smaller location index first. Returns None when the
    target is the unknown index (excluded sentinel).
    """
    if unknown_index is not None and target == unknown_index:
        return None
    if not 0 <= target < row.shape[0]:
        raise ShapeError(f"target {target} outside row of length {row.shape[0]}")
    p = row[target]
    greater = int((row > p).sum())
    tied_before = int((row[:target] == p).sum())
    return 1 + greater + tied_before


def compute_metrics(ranks, ks=(1, 5, 10)):
    """Pooled Hits@k and MRR over a list of ranks."""
    if len(ranks) == 0:
        raise ValueError("compute_metrics needs at least one rank")
    arr = np.asarray(ranks, dtype=np.float64)
    hits = {k: float((arr <= k).mean()) for k in ks}
    mrr = float((1.0 / arr).mean())
    return hits, mrr


@dataclass
class EvalReport:
    hits_at: dict
    mrr: float
    num_params: int
    inference_seconds: float
    num_examples: int
    num_targets: int
    excluded_targets: int = 0
    threads: int = 1
    label: str = "model"

    def to_dict(self):
        return {
            "label": self.label,
            "hits_at": {str(k): v for k, v in self.hits_at.items()},
            "mrr": self.mrr,
            "num_params": self.num_params,
            "inference_seconds": self.inference_seconds,
            "num_examples": self.num_examples,
            "num_targets": self.num_targets,
            "excluded_targets": self.excluded_targets,
            "threads": self.threads,
        }

    def to_text(self) -> str:
        lines = [f"label\t{self.label}"]
        for k in sorted(self.hits_at):
            lines.append(f"hits@{k}\t{self.hits_at[k]:.6f}")
        lines.append(f"mrr\t{self.mrr:.6f}")
        lines.append(f"num_params\t{self.num_params}")
        lines.append(f"inference_seconds\t{self.inference_seconds:.6f}")
        lines.append(f"num_examples\t{self.num_examples}")
        lines.append(f"num_targets\t{self.num_targets}")
        lines.append(f"excluded_targets\t{self.excluded_targets}")
        lines.append(f"threads\t{self.threads}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Prediction adapters


def model_predictor(params, config):
    """Closure running the network forward with dropout off."""

    def predict(batch):
        return model_mod.forward(batch, params, config, training=False).data

    return predict


def collect_ranks(predict, examples, unknown_index=None):
    """Ranks for every (example, step) target; returns (ranks, excluded)."""
    ranks = []
    excluded = 0
    for ex in examples:
        p = predict(ex.batch)
        for step, target in enumerate(ex.targets):
            r = rank_of_target(p[step], int(target), unknown_index)
            if r is None:
                excluded += 1
            else:
                ranks.append(r)
    return ranks, excluded


def timed_evaluate(predict, examples, num_params=0, unknown_index=None,
                   threads=1, ks=(1, 5, 10), label="model") -> EvalReport:
    """Forward over the whole test set with wall-clock timing."""
    if not examples:
        raise ValueError("timed_evaluate needs at least one example")
    start = time.perf_counter()
    if threads > 1:
        def one(ex):
            p = predict(ex.batch)
            out = []
            skipped = 0
            for step, target in enumerate(ex.targets):
                r = rank_of_target(p[step], int(target), unknown_index)
                if r is None:
                    skipped += 1
                else:
                    out.append(r)
            return out, skipped
        ranks = []
        excluded = 0
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for out, skipped in pool.map(one, examples):
                ranks.extend(out)
                excluded += skipped
    else:
        ranks, excluded = collect_ranks(predict, examples, unknown_index)
    elapsed = time.perf_counter() - start
    if not ranks:
        raise ValueError("all targets were unknown; nothing to score")
    hits, mrr = compute_metrics(ranks, ks)
    return EvalReport(hits, mrr, num_params, elapsed, len(examples),
                      len(ranks), excluded, threads, label)


# ---------------------------------------------------------------------------
# Baselines


@dataclass
class FrequencyBaseline:
    """Per-user empirical location distribution over training data."""

    num_locations: int
    horizon: int
    counts: dict = field(default_factory=dict)  # user index -> count vector

    def observe(self, user: int, location: int):
        vec = self.counts.setdefault(user, np.zeros(self.num_locations))
        vec[location] += 1.0

    def distribution(self, user: int) -> np.ndarray:
        vec = self.counts.get(user)
        if vec is None:
            vec = np.zeros(self.num_locations)
        smoothed = vec + SMOOTHING
        return smoothed / smoothed.sum()

    def predict(self, batch) -> np.ndarray:
        row = self.distribution(batch.user)
        return np.tile(row, (self.horizon, 1))


@dataclass
class MarkovBaseline:
    """Per-user first-order transition model with frequency backoff.

    Step m > 1 chains the distribution through the transition matrix, so
    later rows spread over reachable states.
    """

    num_locations: int
    horizon: int
    transitions: dict = field(default_factory=dict)  # user -> (X, X) counts
    frequency: FrequencyBaseline = None

    def __post_init__(self):
        if self.frequency is None:
            self.frequency = FrequencyBaseline(self.num_locations, self.horizon)

    def observe_pair(self, user: int, src: int, dst: int):
        mat = self.transitions.setdefault(
            user, np.zeros((self.num_locations, self.num_locations))
        )
        mat[src, dst] += 1.0

    def transition_matrix(self, user: int) -> np.ndarray:
        """Row-stochastic matrix; count-free rows back off to frequency."""
        counts = self.transitions.get(user)
        backoff = self.frequency.distribution(user)
        if counts is None:
            return np.tile(backoff, (self.num_locations, 1))
        sums = counts.sum(axis=1, keepdims=True)
        out = np.where(sums > 0, counts / np.where(sums > 0, sums, 1.0), backoff)
        return out

    def predict(self, batch) -> np.ndarray:
        t = self.transition_matrix(batch.user)
        state = np.zeros(self.num_locations)
        state[int(batch.session[-1, 0])] = 1.0
        rows = []
        for _ in range(self.horizon):
            state = state @ t
            rows.append(state.copy())
        return np.stack(rows)


def fit_count_baselines(splits_train, loc_vocab, user_vocab, num_locations, horizon):
    """Build frequency and markov1 from training-split check-ins.

    Transition pairs are counted over each user's flat training stream,
    ignoring session boundaries.
    """
    from .data import location_index

    freq = FrequencyBaseline(num_locations, horizon)
    markov = MarkovBaseline(num_locations, horizon, frequency=freq)
    for user_id, sessions in splits_train.items():
        if user_id not in user_vocab:
            continue
        u = user_vocab[user_id]
        stream = [location_index(loc_vocab, c.location_id)
                  for s in sessions for c in s.checkins]
        for loc in stream:
            freq.observe(u, loc)
        for src, dst in zip(stream, stream[1:]):
            markov.observe_pair(u, src, dst)
    return freq, markov


def baseline_predict(kind: str, baseline_or_model, batch) -> np.ndarray:
    """Uniform dispatch; plain_gru expects a (params, config) pair."""
    if kind in ("frequency", "markov1"):
        return baseline_or_model.predict(batch)
    if kind == "plain_gru":
        params, config = baseline_or_model
        if config.arch != "gru":
            raise ConfigError("plain_gru baseline needs a gru-arch config")
        return model_mod.forward(batch, params, config, training=False).data
    raise ConfigError(f"unsupported baseline kind {kind!r}; known: {BASELINE_KINDS}")
