"""Training recipe and cross-validation protocols.

Optimizer: AdamW with decoupled weight decay.  Loss: softmax cross-entropy
wrapped in flooding (|L - b| + b) so the training loss hovers at level b.
Plateau learning-rate decay and early stopping both watch the validation
loss; the best-epoch weights are kept for evaluation.  Fold schemes:
10-fold cross-subject, leave-one-subject-out, leave-one-trial-out and
10-fold cross-trial.
"""
from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import ConvTransformer, ModelConfig
from .preprocess import SegmentSet
from .tensor import Tensor


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 16
    max_epochs: int = 100
    plateau_patience: int = 10
    plateau_factor: float = 0.1
    flooding_level: float = 1.3
    early_stop_patience: int = 15
    min_delta: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.weight_decay < 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("lr/weight_decay/batch_size/max_epochs out of range")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must be in (0, 1)")


# ---------------------------------------------------------------------------
# loss


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over the batch."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label outside [0, {k})")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    picked = T.mul(T.log_softmax(logits, axis=-1), Tensor(onehot))
    return T.scale(T.reduce_sum(picked), -1.0 / n)


def flood(loss: Tensor, level: float) -> Tensor:
    """|L - b| + b: gradients flip sign when the loss dips below b."""
    return T.abs_(loss - level) + level


def flooding_cross_entropy(logits: Tensor, labels: np.ndarray, level: float) -> Tensor:
    return flood(cross_entropy(logits, labels), level)


# ---------------------------------------------------------------------------
# optimizer


def adamw_update(theta: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
                 t: int, lr: float, weight_decay: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One AdamW step; returns (theta, m, v).  Weight decay is decoupled
    from the moment estimates."""
    if t < 1:
        raise ValueError("step index t must be >= 1")
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    theta = theta - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * theta)
    return theta, m, v


class AdamW:
    def __init__(self, params, lr: float, weight_decay: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params.items())
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.moments = {name: (np.zeros_like(p.data), np.zeros_like(p.data))
                        for name, p in self.params}

    def step(self):
        self.t += 1
        for name, p in self.params:
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.moments[name]
            p.data, m, v = adamw_update(p.data, grad, m, v, self.t,
                                        self.lr, self.weight_decay,
                                        self.beta1, self.beta2, self.eps)
            self.moments[name] = (m, v)

    def state(self) -> dict:
        return {"t": self.t, "moments": self.moments}


class PlateauScheduler:
    """Cut the learning rate by `factor` after `patience` epochs without the
    monitored loss improving by at least `min_delta`."""

    def __init__(self, lr: float, factor: float = 0.1, patience: int = 10,
                 min_delta: float = 1e-4):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, loss: float) -> float:
        if loss < self.best - self.min_delta:
            self.best = loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


class EarlyStopping:
    def __init__(self, patience: int = 15, min_delta: float = 1e-4):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, loss: float, epoch: int) -> bool:
        """Returns True when training should stop."""
        if loss < self.best - self.min_delta:
            self.best = loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


# ---------------------------------------------------------------------------
# cross-validation splits


@dataclass(frozen=True)
class Fold:
    train_ids: tuple
    val_ids: tuple
    test_ids: tuple

    def __post_init__(self):
        tr, va, te = set(self.train_ids), set(self.val_ids), set(self.test_ids)
        if tr & va or tr & te or va & te:
            raise ValueError("train/val/test ids overlap within a fold")


@dataclass(frozen=True)
class SplitPlan:
    scheme: str
    folds: tuple[Fold, ...]
    # When a fold has no val ids, the harness holds out this fraction of the
    # training segments as validation (seeded).
    segment_val_fraction: float = 0.0


def _partition(ids: list, n_groups: int) -> list[list]:
    base, rem = divmod(len(ids), n_groups)
    groups, start = [], 0
    for g in range(n_groups):
        size = base + (1 if g < rem else 0)
        groups.append(ids[start:start + size])
        start += size
    return groups


def make_splits(scheme: str, ids, seed: int = 0, n_folds: int = 10,
                val_share: float = 0.2) -> SplitPlan:
    """Build a fold plan.  `ids` are subject ids for csv10/loso and trial
    ids for loto/ctv10."""
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    rng = np.random.default_rng(np.random.SeedSequence(seed))

    if scheme == "csv10":
        if len(ids) < n_folds:
            raise ValueError(f"csv10 needs >= {n_folds} ids, got {len(ids)}")
        shuffled = [ids[i] for i in rng.permutation(len(ids))]
        groups = _partition(shuffled, n_folds)
        folds = [Fold(tuple(x for g2, g in enumerate(groups) if g2 != gi for x in g),
                      (), tuple(g))
                 for gi, g in enumerate(groups)]
        return SplitPlan("csv10", tuple(folds))

    if scheme == "loso":
        if len(ids) < 3:
            raise ValueError("loso needs at least 3 ids")
        folds = []
        for test_id in ids:
            rest = [i for i in ids if i != test_id]
            order = rng.permutation(len(rest))
            n_train = int(round((1 - val_share) * len(rest)))
            n_train = min(max(n_train, 1), len(rest) - 1)
            train = tuple(rest[i] for i in order[:n_train])
            val = tuple(rest[i] for i in order[n_train:])
            folds.append(Fold(train, val, (test_id,)))
        return SplitPlan("loso", tuple(folds))

    if scheme == "loto":
        if len(ids) < 2:
            raise ValueError("loto needs at least 2 trial ids")
        folds = [Fold(tuple(i for i in ids if i != test_id), (), (test_id,))
                 for test_id in ids]
        return SplitPlan("loto", tuple(folds))

    if scheme == "ctv10":
        if len(ids) < n_folds:
            raise ValueError(f"ctv10 needs >= {n_folds} trial ids, got {len(ids)}")
        shuffled = [ids[i] for i in rng.permutation(len(ids))]
        groups = _partition(shuffled, n_folds)
        folds = [Fold(tuple(x for g2, g in enumerate(groups) if g2 != gi for x in g),
                      (), tuple(g))
                 for gi, g in enumerate(groups)]
        return SplitPlan("ctv10", tuple(folds), segment_val_fraction=val_share)

    raise ValueError(f"unknown scheme {scheme!r}")


# ---------------------------------------------------------------------------
# metrics


@dataclass
class FoldMetrics:
    accuracy: float
    f1_macro: float
    confusion: np.ndarray  # rows: true class, cols: predicted
    n_test: int
    test_ids: tuple = ()


def evaluate(model: ConvTransformer, segments: np.ndarray, labels: np.ndarray,
             batch_size: int = 64) -> FoldMetrics:
    """Accuracy, macro-averaged F1 and the confusion matrix, in eval mode."""
    labels = np.asarray(labels)
    k = model.config.n_classes
    if len(labels) and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label outside [0, {k})")
    confusion = np.zeros((k, k), dtype=np.int64)
    for lo in range(0, len(segments), batch_size):
        batch = segments[lo:lo + batch_size]
        pred = model.predict(batch)
        for yt, yp in zip(labels[lo:lo + batch_size], pred):
            confusion[yt, yp] += 1
    total = confusion.sum()
    acc = confusion.trace() / total if total else 0.0
    f1s = []
    for c in range(k):
        tp = confusion[c, c]
        precision = tp / confusion[:, c].sum() if confusion[:, c].sum() else 0.0
        recall = tp / confusion[c].sum() if confusion[c].sum() else 0.0
        f1s.append(2 * precision * recall / (precision + recall)
                   if precision + recall else 0.0)
    return FoldMetrics(float(acc), float(np.mean(f1s)), confusion, int(total))


@dataclass
class MetricsReport:
    scheme: str
    folds: list[FoldMetrics]

    @property
    def acc_mean(self) -> float:
        return float(np.mean([f.accuracy for f in self.folds]))

    @property
    def acc_std(self) -> float:
        return float(np.std([f.accuracy for f in self.folds]))

    @property
    def f1_mean(self) -> float:
        return float(np.mean([f.f1_macro for f in self.folds]))

    @property
    def f1_std(self) -> float:
        return float(np.std([f.f1_macro for f in self.folds]))

    def to_text(self) -> str:
        lines = [f"scheme: {self.scheme}",
                 f"{'fold':>4}  {'test_ids':<24} {'acc(%)':>8} {'f1(%)':>8} {'n':>6}"]
        for i, f in enumerate(self.folds):
            ids = ",".join(str(x) for x in f.test_ids) or "-"
            lines.append(f"{i:>4}  {ids:<24} {100 * f.accuracy:>8.2f} "
                         f"{100 * f.f1_macro:>8.2f} {f.n_test:>6}")
        lines.append(
            f"{'mean':>4}  {'':<24} {100 * self.acc_mean:>8.2f} {100 * self.f1_mean:>8.2f}")
        lines.append(
            f"{'std':>4}  {'':<24} {100 * self.acc_std:>8.2f} {100 * self.f1_std:>8.2f}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "folds": [
                {"accuracy": f.accuracy, "f1_macro": f.f1_macro, "n_test": f.n_test,
                 "test_ids": list(f.test_ids), "confusion": f.confusion.tolist()}
                for f in self.folds
            ],
            "acc_mean": self.acc_mean, "acc_std": self.acc_std,
            "f1_mean": self.f1_mean, "f1_std": self.f1_std,
        }


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    seconds: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    step_losses: list[tuple[float, float]] = field(default_factory=list)  # (flooded, ce)

    def to_dict(self) -> dict:
        return {
            "epochs": [
                {"epoch": e.epoch, "train_loss": e.train_loss, "val_loss": e.val_loss,
                 "lr": e.lr, "seconds": e.seconds}
                for e in self.epochs
            ],
            "step_losses": [[f, c] for f, c in self.step_losses],
        }

    def to_text(self) -> str:
        lines = [f"{'epoch':>5} {'train_loss':>11} {'val_loss':>11} {'lr':>10} {'sec':>7}"]
        for e in self.epochs:
            lines.append(f"{e.epoch:>5} {e.train_loss:>11.6f} {e.val_loss:>11.6f} "
                         f"{e.lr:>10.2e} {e.seconds:>7.2f}")
        return "\n".join(lines) + "\n"


@dataclass
class TrainResult:
    history: TrainHistory
    best_epoch: int
    touched_indices: set
    optimizer_state: dict


def _epoch_loss(model, segments, labels, batch_size) -> float:
    """Mean cross-entropy in eval mode (frozen BN stats, no flooding)."""
    total, count = 0.0, 0
    with T.no_grad():
        for lo in range(0, len(segments), batch_size):
            batch, yb = segments[lo:lo + batch_size], labels[lo:lo + batch_size]
            logits, _ = model.forward(batch, training=False)
            ce = cross_entropy(logits, yb)
            total += float(ce.data) * len(yb)
            count += len(yb)
    return total / max(count, 1)


def train(model: ConvTransformer, segset: SegmentSet, train_idx: np.ndarray,
          val_idx: np.ndarray, config: TrainConfig, on_step=None) -> TrainResult:
    """Run the full recipe on one fold's data.  Deterministic given
    config.seed.  When val_idx is empty, the train loss is monitored instead."""
    train_idx = np.asarray(train_idx, dtype=np.int64)
    val_idx = np.asarray(val_idx, dtype=np.int64)
    if len(train_idx) == 0:
        raise ValueError("empty training split")
    ss = np.random.SeedSequence(config.seed)
    shuffle_seed, dropout_seed = ss.spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    model.dropout_rng = np.random.default_rng(dropout_seed)

    x_train, y_train = segset.segments[train_idx], segset.labels[train_idx]
    x_val, y_val = segset.segments[val_idx], segset.labels[val_idx]

    opt = AdamW(model.params, config.lr, config.weight_decay)
    sched = PlateauScheduler(config.lr, config.plateau_factor,
                             config.plateau_patience, config.min_delta)
    stopper = EarlyStopping(config.early_stop_patience, config.min_delta)
    history = TrainHistory()
    touched: set = set()
    best_snap = model.state_snapshot()
    best_epoch = 0

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(len(train_idx))
        flood_sum, n_batches = 0.0, 0
        for lo in range(0, len(order), config.batch_size):
            sel = order[lo:lo + config.batch_size]
            touched.update(int(i) for i in train_idx[sel])
            logits, _ = model.forward(x_train[sel], training=True)
            ce = cross_entropy(logits, y_train[sel])
            loss = flood(ce, config.flooding_level)
            model.zero_grad()
            T.backward(loss)
            opt.lr = sched.lr
            opt.step()
            flood_val, ce_val = float(loss.data), float(ce.data)
            history.step_losses.append((flood_val, ce_val))
            flood_sum += flood_val
            n_batches += 1
            if on_step is not None:
                on_step(logits.data, y_train[sel], flood_val, ce_val)
        train_loss = flood_sum / n_batches
        if len(val_idx):
            monitored = _epoch_loss(model, x_val, y_val, config.batch_size)
        else:
            monitored = _epoch_loss(model, x_train, y_train, config.batch_size)
        lr_now = sched.step(monitored)
        improved = monitored < stopper.best - stopper.min_delta
        stop = stopper.update(monitored, epoch)
        if improved:
            best_snap = model.state_snapshot()
            best_epoch = epoch
        history.epochs.append(EpochRecord(epoch, train_loss, monitored, lr_now,
                                          time.perf_counter() - t0))
        if stop:
            break

    model.load_state(best_snap)
    return TrainResult(history, best_epoch, touched, opt.state())


# ---------------------------------------------------------------------------
# fold orchestration


def _fold_indices(segset: SegmentSet, fold: Fold, id_kind: str,
                  segment_val_fraction: float, rng: np.random.Generator):
    key = segset.subjects if id_kind == "subject" else segset.trials

    def members(ids):
        if not ids:
            return np.array([], dtype=np.int64)
        if id_kind == "subject":
            mask = np.isin(key, np.asarray([str(i) for i in ids]))
        else:
            mask = np.isin(key, np.asarray(list(ids), dtype=np.int64))
        return np.flatnonzero(mask)

    train_idx = members(fold.train_ids)
    val_idx = members(fold.val_ids)
    test_idx = members(fold.test_ids)
    if len(val_idx) == 0 and segment_val_fraction > 0 and len(train_idx) > 1:
        order = rng.permutation(len(train_idx))
        n_val = max(1, int(round(segment_val_fraction * len(train_idx))))
        val_idx = train_idx[order[:n_val]]
        train_idx = train_idx[order[n_val:]]
    return train_idx, val_idx, test_idx


@dataclass
class FoldRun:
    fold_index: int
    metrics: FoldMetrics
    result: TrainResult
    model: ConvTransformer


def run_fold(segset: SegmentSet, fold: Fold, fold_index: int, model_config: ModelConfig,
             train_config: TrainConfig, id_kind: str = "subject",
             segment_val_fraction: float = 0.0, on_step=None) -> FoldRun:
    fold_ss = np.random.SeedSequence([train_config.seed, fold_index])
    model_seed, split_seed, train_seed = [int(s.generate_state(1)[0]) for s in fold_ss.spawn(3)]
    rng = np.random.default_rng(split_seed)
    train_idx, val_idx, test_idx = _fold_indices(segset, fold, id_kind,
                                                 segment_val_fraction, rng)
    if len(test_idx) == 0:
        raise ValueError(f"fold {fold_index}: empty test split")
    model = ConvTransformer(model_config, seed=model_seed)
    cfg = dataclasses.replace(train_config, seed=train_seed)
    result = train(model, segset, train_idx, val_idx, cfg, on_step=on_step)
    # No test-set leakage: nothing touched during training may appear in test.
    overlap = result.touched_indices & {int(i) for i in test_idx}
    if overlap:
        raise AssertionError(f"fold {fold_index}: test segments {sorted(overlap)[:5]} leaked")
    metrics = evaluate(model, segset.segments[test_idx], segset.labels[test_idx])
    metrics.test_ids = tuple(fold.test_ids)
    return FoldRun(fold_index, metrics, result, model)


def run_cross_validation(segset: SegmentSet, plan: SplitPlan, model_config: ModelConfig,
                         train_config: TrainConfig, id_kind: str = "subject",
                         workers: int = 1, fold_indices=None) -> tuple[MetricsReport, list[FoldRun]]:
    """Train/evaluate every fold (or `fold_indices`).  Folds are independent
    jobs; results merge by fold index, so worker count never changes them."""
    chosen = list(range(len(plan.folds))) if fold_indices is None else list(fold_indices)
    runs: list[FoldRun] = []
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_fold, segset, plan.folds[i], i, model_config,
                                   train_config, id_kind, plan.segment_val_fraction)
                       for i in chosen]
            runs = [f.result() for f in futures]
    else:
        for i in chosen:
            runs.append(run_fold(segset, plan.folds[i], i, model_config, train_config,
                                 id_kind, plan.segment_val_fraction))
    runs.sort(key=lambda r: r.fold_index)
    report = MetricsReport(plan.scheme, [r.metrics for r in runs])
    return report, runs


# ---------------------------------------------------------------------------
# paired significance test


def wilcoxon_signed_rank(a, b) -> tuple[float, float]:
    """Two-sided Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped.  Exact null distribution (dynamic program
    over rank sums) for n <= 25; normal approximation with tie correction
    beyond.  Returns (W, p) with W = min(W+, W-).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise ValueError("all differences are zero: test is degenerate")
    if n < 5:
        raise ValueError(f"need >= 5 nonzero differences, got {n}")

    absd = np.abs(d)
    order = np.argsort(absd, kind="stable")
    ranks = np.empty(n)
    sorted_abs = absd[order]
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sorted_abs[j + 1] == sorted_abs[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1  # midrank
        i = j + 1
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    stat = min(w_plus, w_minus)

    if n <= 25:
        # Doubled ranks are integers even with .5 midranks.
        r2 = np.rint(2 * ranks).astype(np.int64)
        total = int(r2.sum())
        counts = np.zeros(total + 1)
        counts[0] = 1.0
        for r in r2:
            shifted = np.zeros_like(counts)
            shifted[r:] = counts[:len(counts) - r]
            counts = counts + shifted
        counts /= 2.0 ** n
        w2 = int(round(2 * w_plus))
        p_le = float(counts[:w2 + 1].sum())
        p_ge = float(counts[w2:].sum())
        p = min(1.0, 2.0 * min(p_le, p_ge))
    else:
        mean = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0
        _, tie_counts = np.unique(absd, return_counts=True)
        var -= (tie_counts.astype(float) ** 3 - tie_counts).sum() / 48.0
        z = (w_plus - mean) / math.sqrt(var)
        p = min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))
    return stat, p
