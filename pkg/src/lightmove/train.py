"""Training loop: one gradient step per user example, cross-entropy plus
an L2 penalty on weight tensors, Adam with per-epoch learning-rate decay,
and validation-metric checkpointing."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import evaluate
from . import model as model_mod
from . import numerics as nm
from .errors import ConfigError, ShapeError
from .numerics import ParamStore, Tape, backward

log = logging.getLogger(__name__)

CHECKPOINT_METRICS = ("mrr", "hits1")


@dataclass
class TrainConfig:
    lr: float = 0.01
    decay: float = 0.9
    min_lr: float = 5e-4
    l2: float = 1e-5
    epochs: int = 50
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_metric: str = "mrr"
    convergence_tol: float = 1e-5
    convergence_window: int = 3

    def __post_init__(self):
        if not 0.0 < self.decay <= 1.0:
            raise ConfigError(f"decay must be in (0, 1], got {self.decay}")
        if self.min_lr > self.lr:
            raise ConfigError(f"min_lr {self.min_lr} exceeds lr {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.l2 < 0:
            raise ConfigError(f"l2 weight must be >= 0, got {self.l2}")
        if self.checkpoint_metric not in CHECKPOINT_METRICS:
            raise ConfigError(f"checkpoint_metric must be one of {CHECKPOINT_METRICS}")

    def to_dict(self):
        from dataclasses import asdict
        return asdict(self)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: ParamStore) -> "AdamState":
        state = cls()
        for name, tensor in params.items():
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        return state


@dataclass
class Checkpoint:
    params: ParamStore
    epoch: int
    valid_metric: float
    metric_name: str
    adam: AdamState


def loss(pred, targets, params: ParamStore, l2_weight: float, unknown_index=None):
    """Mean negative log-likelihood over known-target rows plus the
    weight penalty. Rows whose target is the unknown index are excluded;
    an all-unknown batch is an error."""
    targets = np.asarray(targets)
    if pred.shape[0] != targets.shape[0]:
        raise ShapeError(f"{pred.shape[0]} prediction rows vs {targets.shape[0]} targets")
    keep = np.arange(targets.shape[0])
    if unknown_index is not None:
        keep = keep[targets != unknown_index]
    if keep.size == 0:
        raise ValueError("every target is out of vocabulary; nothing to score")
    picked = nm.pick(pred, keep, targets[keep])
    total = nm.scale(nm.sumall(nm.log(picked)), -1.0 / keep.size)
    if l2_weight > 0.0:
        for name in params.penalized_names():
            w = params[name]
            total = nm.add(total, nm.scale(nm.sumall(nm.hadamard(w, w)), l2_weight))
    return total


def adam_step(params: ParamStore, grads: dict, state: AdamState, lr: float,
              beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """Standard bias-corrected Adam update, in place.

    Parameters without a gradient this step act as zero-gradient: the
    moments decay but the value barely moves.
    """
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, tensor in params.items():
        g = grads.get(tensor)
        m = state.m[name]
        v = state.v[name]
        if g is None:
            m *= beta1
            v *= beta2
        else:
            if g.shape != tensor.data.shape:
                raise ShapeError(f"gradient for {name!r} has shape {g.shape}, want {tensor.data.shape}")
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * (g * g)
        tensor.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def train_epoch(examples, params: ParamStore, config, tconfig: TrainConfig,
                state: AdamState, lr: float, rng: np.random.Generator,
                unknown_index=None) -> float:
    """One pass over the examples in seed-shuffled order; returns mean loss."""
    if not examples:
        raise ValueError("train_epoch needs at least one example")
    order = rng.permutation(len(examples))
    total = 0.0
    for idx in order:
        ex = examples[idx]
        with Tape() as tape:
            pred = model_mod.forward(ex.batch, params, config, training=True, rng=rng)
            value = loss(pred, ex.targets, params, tconfig.l2, unknown_index)
        grads = backward(value, tape)
        adam_step(params, grads, state, lr, tconfig.beta1, tconfig.beta2, tconfig.adam_eps)
        total += value.item()
    return total / len(examples)


def _validate(params, config, examples, unknown_index):
    """(hits@1, mrr) on the given examples with dropout off."""
    predict = evaluate.model_predictor(params, config)
    ranks, _ = evaluate.collect_ranks(predict, examples, unknown_index)
    if not ranks:
        return 0.0, 0.0
    hits, mrr = evaluate.compute_metrics(ranks, ks=(1,))
    return hits[1], mrr


@dataclass
class FitResult:
    best: Checkpoint
    history: list  # per-epoch dicts
    converged: bool


def fit(train_examples, valid_examples, params: ParamStore, config,
        tconfig: TrainConfig, unknown_index=None, log_fn=None) -> FitResult:
    """Full training run.

    Per epoch: train, decay the learning rate (floored at min_lr),
    validate with dropout off, and keep the checkpoint with the best
    validation metric (strictly better replaces). Stops early once the
    relative train-loss change stays below the tolerance for the
    configured number of consecutive epochs.
    """
    if not train_examples:
        raise ValueError("fit needs training examples")
    if not valid_examples:
        raise ValueError("fit needs validation examples")
    rng = np.random.default_rng(tconfig.seed)
    state = AdamState.for_params(params)
    lr = tconfig.lr
    best = None
    history = []
    losses = []
    small_changes = 0
    converged = False
    for epoch in range(1, tconfig.epochs + 1):
        mean_loss = train_epoch(train_examples, params, config, tconfig,
                                state, lr, rng, unknown_index)
        hits1, mrr = _validate(params, config, valid_examples, unknown_index)
        metric = mrr if tconfig.checkpoint_metric == "mrr" else hits1
        row = {"epoch": epoch, "lr": lr, "train_loss": mean_loss,
               "valid_hits1": hits1, "valid_mrr": mrr}
        history.append(row)
        if log_fn is not None:
            log_fn(row)
        if best is None or metric > best.valid_metric:
            best = Checkpoint(
                params=params.clone(), epoch=epoch, valid_metric=metric,
                metric_name=tconfig.checkpoint_metric,
                adam=AdamState({k: a.copy() for k, a in state.m.items()},
                               {k: a.copy() for k, a in state.v.items()}, state.t),
            )
        if losses:
            prev = losses[-1]
            rel = abs(mean_loss - prev) / max(abs(prev), 1e-12)
            small_changes = small_changes + 1 if rel < tconfig.convergence_tol else 0
            if small_changes >= tconfig.convergence_window:
                losses.append(mean_loss)
                converged = True
                log.info("converged at epoch %d (relative change < %g for %d epochs)",
                         epoch, tconfig.convergence_tol, tconfig.convergence_window)
                break
        losses.append(mean_loss)
        lr = max(lr * tconfig.decay, tconfig.min_lr)
    return FitResult(best, history, converged)


def history_log_text(history) -> str:
    """Training log: one tab-separated line per epoch."""
    lines = ["epoch\tlr\ttrain_loss\tvalid_hits1\tvalid_mrr"]
    for row in history:
        lines.append("%d\t%.10g\t%.10g\t%.10g\t%.10g" % (
            row["epoch"], row["lr"], row["train_loss"],
            row["valid_hits1"], row["valid_mrr"]))
    return "\n".join(lines) + "\n"
