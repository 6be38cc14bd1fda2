"""BCE training loop: Adam updates, per-epoch validation, early stopping.

Validation metrics are always computed on parameters round-tripped
through checkpoint precision (float32), so a logged value is exactly what
re-evaluating the stored checkpoint reproduces; training itself continues
in float64.  Validation negatives are drawn once per user with a fixed
seed and reused across epochs so early stopping compares like with like.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ProtocolError
from .evaluation import evaluate
from .model import RecModel

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 128
    patience: int = 20
    max_epochs: int = 200
    negatives_per_positive: int = 1
    seed: int = 42
    eval_negatives: int = 100

    def __post_init__(self):
        for name in ("batch_size", "patience", "max_epochs", "negatives_per_positive", "eval_negatives"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")


@dataclass
class TrainState:
    epoch: int = 0
    best_epoch: int = 0
    best_val_ndcg10: float = -np.inf
    epochs_since_best: int = 0
    n_validations: int = 0
    loss_history: list[float] = field(default_factory=list)
    val_history: list[float] = field(default_factory=list)
    wall_seconds: float = 0.0
    stopped_early: bool = False


def bce_loss(scores, labels) -> float:
    """Mean binary cross entropy with probabilities clamped to [1e-7, 1-1e-7]."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("empty candidate pool")
    if scores.shape != labels.shape:
        raise ValueError(f"scores shape {scores.shape} != labels shape {labels.shape}")
    p = np.clip(scores, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p)).mean())


class Adam:
    """Adaptive-moment optimizer over named parameter groups."""

    def __init__(self, groups: dict[str, dict[str, np.ndarray]], lr: float):
        self.groups = groups
        self.lr = lr
        self.t = 0
        self.m = {g: {n: np.zeros_like(p) for n, p in ps.items()} for g, ps in groups.items()}
        self.v = {g: {n: np.zeros_like(p) for n, p in ps.items()} for g, ps in groups.items()}

    def step(self, grads: dict[str, dict[str, np.ndarray]]) -> None:
        self.t += 1
        bc1 = 1.0 - BETA1 ** self.t
        bc2 = 1.0 - BETA2 ** self.t
        for group in sorted(self.groups):
            for name in sorted(self.groups[group]):
                g = grads[group][name]
                m = self.m[group][name]
                v = self.v[group][name]
                m *= BETA1
                m += (1.0 - BETA1) * g
                v *= BETA2
                v += (1.0 - BETA2) * g * g
                update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
                self.groups[group][name] -= self.lr * update


@dataclass(frozen=True)
class TrainBatch:
    users: np.ndarray
    inputs: np.ndarray
    mask: np.ndarray
    targets: np.ndarray
    negatives: np.ndarray


def _non_history(ds, user) -> np.ndarray:
    return np.setdiff1d(np.arange(ds.item_count, dtype=np.int64), ds.history(user))


def make_training_batch(split, ds, cfg: TrainConfig, rng, users=None, max_seq_len: int = 100) -> TrainBatch:
    """Shift-by-one batch: inputs are prefix[:-1], targets prefix[1:].

    Per real position, ``negatives_per_positive`` uniform draws from the
    user's non-history items; padded positions carry mask 0.
    """
    if len(split) == 0:
        raise ProtocolError("empty split")
    if users is None:
        users = split.users[: cfg.batch_size]
    users = [u for u in users if len(split.entries[u].train_prefix) >= 2]
    if not users:
        raise ProtocolError("no user in the batch has a trainable prefix (length >= 2)")

    rows_in, rows_tg = [], []
    for u in users:
        prefix = split.entries[u].train_prefix
        rows_in.append(prefix[:-1][-max_seq_len:])
        rows_tg.append(prefix[1:][-max_seq_len:])
    L = max(len(r) for r in rows_in)
    B = len(users)
    inputs = np.zeros((B, L), dtype=np.int64)
    targets = np.zeros((B, L), dtype=np.int64)
    mask = np.zeros((B, L), dtype=bool)
    negatives = np.zeros((B, L, cfg.negatives_per_positive), dtype=np.int64)
    for b, u in enumerate(users):
        n = len(rows_in[b])
        inputs[b, L - n:] = rows_in[b]
        targets[b, L - n:] = rows_tg[b]
        mask[b, L - n:] = True
        pool = _non_history(ds, u)
        draws = rng.integers(len(pool), size=(n, cfg.negatives_per_positive))
        negatives[b, L - n:] = pool[draws]
    return TrainBatch(np.asarray(users, dtype=np.int64), inputs, mask, targets, negatives)


def train_epoch(model: RecModel, split, ds, cfg: TrainConfig, state: TrainState,
                adam: Adam, rng, dropout_rng, max_seq_len: int) -> TrainState:
    """One pass over the split in a seeded shuffle order; appends mean loss."""
    trainable = [u for u in split.users if len(split.entries[u].train_prefix) >= 2]
    if not trainable:
        raise ProtocolError("no trainable users (all prefixes shorter than 2)")
    order = rng.permutation(len(trainable))
    total, count = 0.0, 0.0
    for bi, start in enumerate(range(0, len(order), cfg.batch_size)):
        chunk = [trainable[i] for i in order[start : start + cfg.batch_size]]
        batch = make_training_batch(split, ds, cfg, rng, users=chunk, max_seq_len=max_seq_len)
        loss, grads, n_pairs = model.loss_and_grads(batch, training=True, rng=dropout_rng)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss at epoch {state.epoch + 1}, batch {bi}")
        adam.step(grads)
        total += loss * n_pairs
        count += n_pairs
    state.epoch += 1
    state.loss_history.append(float(total / count))
    return state


def fit(model: RecModel, split, ds, cfg: TrainConfig, max_seq_len: int = 100,
        log=None) -> tuple[RecModel, TrainState]:
    """Train until validation NDCG@10 stalls for ``patience`` epochs.

    Returns the model restored to its best (checkpoint-precision)
    parameters plus the training state.  ``log`` receives one
    ``(epoch, mean_loss, val_ndcg10)`` tuple per epoch.
    """
    if len(split) == 0:
        raise ProtocolError("empty validation set: leave-one-out split has no users")
    start = time.perf_counter()
    state = TrainState()
    adam = Adam(model.parameter_groups(), cfg.lr)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    dropout_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))

    best_snapshot = None
    for _ in range(cfg.max_epochs):
        train_epoch(model, split, ds, cfg, state, adam, shuffle_rng, dropout_rng, max_seq_len)

        exact = model.snapshot(precision="f64")
        quantized = model.snapshot(precision="f32")
        model.load_snapshot(quantized)
        report, _ = evaluate(
            model, split, ds, which="valid",
            eval_negatives=cfg.eval_negatives, seed=cfg.seed, max_seq_len=max_seq_len,
        )
        model.load_snapshot(exact)
        val = report.ndcg[10]
        state.n_validations += 1
        state.val_history.append(val)
        if log is not None:
            log(state.epoch, state.loss_history[-1], val)

        if val > state.best_val_ndcg10:
            state.best_val_ndcg10 = val
            state.best_epoch = state.epoch
            state.epochs_since_best = 0
            best_snapshot = quantized
        else:
            state.epochs_since_best += 1
            if state.epochs_since_best >= cfg.patience:
                state.stopped_early = True
                break

    model.load_snapshot(best_snapshot)
    state.wall_seconds = time.perf_counter() - start
    return model, state
