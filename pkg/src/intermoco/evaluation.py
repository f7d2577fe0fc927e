"""Downstream evaluation: label-fraction subsets, fine-tuning, metrics, bootstrap CIs."""

from __future__ import annotations

import copy
import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit, softmax
from scipy.stats import rankdata

from . import tensor as T
from .encoder import Encoder
from .engine import SGD
from .errors import ConfigError, DataError, UndefinedMetricError
from .nn import Linear, Module
from .tensor import Tensor, no_grad, parameters_checksum

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: P(s+ > s-) + 0.5 P(s+ == s-)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC is undefined when only one class is present")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def macro_auroc(scores, labels) -> tuple[float, list[float]]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        scores, labels = scores[:, None], labels.reshape(-1, 1)
    per = [auroc(scores[:, j], labels[:, j]) for j in range(labels.shape[1])]
    return float(np.mean(per)), per


def f1(predictions, labels) -> float:
    predictions = np.asarray(predictions).ravel().astype(bool)
    labels = np.asarray(labels).ravel().astype(bool)
    if predictions.size == 0:
        raise ValueError("f1 needs at least one sample")
    tp = int((predictions & labels).sum())
    fp = int((predictions & ~labels).sum())
    fn = int((~predictions & labels).sum())
    if tp == 0:
        return 0.0
    precision, recall = tp / (tp + fp), tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def task_kind(labels: np.ndarray) -> str:
    """'binary' (one column), 'multiclass' (one-hot rows) or 'multilabel'."""
    labels = np.asarray(labels)
    if labels.ndim == 1 or labels.shape[1] == 1:
        return "binary"
    if np.all(labels.sum(axis=1) == 1):
        return "multiclass"
    return "multilabel"


def scores_from_logits(logits: np.ndarray, kind: str) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if kind == "multiclass":
        return softmax(logits, axis=1)
    return expit(logits)


def predictions_from_scores(scores: np.ndarray, kind: str) -> np.ndarray:
    if kind == "multiclass":
        out = np.zeros_like(scores, dtype=np.int64)
        out[np.arange(len(scores)), scores.argmax(axis=1)] = 1
        return out
    return (scores >= 0.5).astype(np.int64)


def accuracy(scores, labels) -> float:
    scores, labels = np.asarray(scores), np.asarray(labels)
    kind = task_kind(labels)
    preds = predictions_from_scores(scores, kind)
    if kind == "multiclass":
        return float(np.mean(preds.argmax(axis=1) == labels.argmax(axis=1)))
    return float(np.mean(preds == labels))


def metric_fn(name: str) -> Callable[[np.ndarray, np.ndarray], float]:
    """Metric over (scores, labels) matrices: 'auroc' (macro), 'f1' or 'accuracy'."""
    if name == "auroc":
        return lambda s, y: macro_auroc(s, y)[0]
    if name == "f1":
        def _f1(s, y):
            kind = task_kind(y)
            p = predictions_from_scores(np.asarray(s), kind)
            y = np.asarray(y)
            return float(np.mean([f1(p[:, j], y[:, j]) for j in range(y.shape[1])]))
        return _f1
    if name == "accuracy":
        return accuracy
    raise ConfigError(f"unknown metric {name!r}; expected auroc, f1 or accuracy")


def per_class_values(name: str, scores: np.ndarray, labels: np.ndarray, label_names=None) -> dict[str, float]:
    labels = np.asarray(labels).reshape(len(labels), -1)
    scores = np.asarray(scores).reshape(len(scores), -1)
    names = label_names or [f"label_{j}" for j in range(labels.shape[1])]
    out = {}
    kind = task_kind(labels)
    for j, lname in enumerate(names):
        try:
            if name == "auroc":
                out[lname] = auroc(scores[:, j], labels[:, j])
            elif name == "f1":
                out[lname] = f1(predictions_from_scores(scores, kind)[:, j], labels[:, j])
            else:
                preds = predictions_from_scores(scores, kind)[:, j]
                out[lname] = float(np.mean(preds == labels[:, j]))
        except UndefinedMetricError:
            out[lname] = float("nan")
    return out


# ---------------------------------------------------------------------------
# bootstrap
# ---------------------------------------------------------------------------

@dataclass
class BootstrapResult:
    point: float
    mu: float
    sigma: float
    n: int
    ci_low: float
    ci_high: float
    method: str = "paper"
    skipped: int = 0
    replicates: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)

    @property
    def half_width(self) -> float:
        return (self.ci_high - self.ci_low) / 2.0


def bootstrap_ci(
    metric: Callable[[np.ndarray, np.ndarray], float],
    scores,
    labels,
    n_replicates: int = 1000,
    seed: int = 0,
    method: str = "paper",
    max_skip_fraction: float = 0.1,
) -> BootstrapResult:
    """Bootstrap the test set ``n_replicates`` times.

    ``method='paper'`` reports mu +/- 1.96 * sigma / sqrt(N), with N the number of
    evaluated replicates and sigma the sample standard deviation;
    ``method='percentile'`` reports the 2.5/97.5 percentiles instead. Replicates
    on which the metric is undefined are skipped and counted.
    """
    if n_replicates < 2:
        raise ConfigError(f"need at least 2 bootstrap replicates, got {n_replicates}")
    if method not in ("paper", "percentile"):
        raise ConfigError(f"unknown bootstrap method {method!r}")
    scores, labels = np.asarray(scores), np.asarray(labels)
    n = len(labels)
    point = metric(scores, labels)
    streams = np.random.SeedSequence(seed).spawn(n_replicates)
    values, skipped = [], 0
    for ss in streams:
        idx = np.random.default_rng(ss).integers(0, n, size=n)
        try:
            values.append(metric(scores[idx], labels[idx]))
        except UndefinedMetricError:
            skipped += 1
    if skipped > max_skip_fraction * n_replicates:
        raise UndefinedMetricError(f"{skipped}/{n_replicates} bootstrap replicates had an undefined metric")
    reps = np.asarray(values, dtype=np.float64)
    # compensated sums keep a constant metric exactly constant
    mu = math.fsum(values) / len(values)
    sigma = math.sqrt(math.fsum((v - mu) ** 2 for v in values) / (len(values) - 1)) if len(values) > 1 else 0.0
    if method == "paper":
        half = 1.96 * sigma / np.sqrt(len(reps))
        lo, hi = mu - half, mu + half
    else:
        lo, hi = (float(v) for v in np.percentile(reps, [2.5, 97.5]))
    return BootstrapResult(float(point), mu, sigma, len(reps), float(lo), float(hi), method, skipped, reps)


@dataclass
class MetricReport:
    metric: str
    per_class: dict[str, float]
    bootstrap: BootstrapResult

    def to_json(self) -> dict:
        b = self.bootstrap
        return {"metric": self.metric, "point": b.point, "mu": b.mu, "sigma": b.sigma, "n": b.n,
                "ci_low": b.ci_low, "ci_high": b.ci_high, "method": b.method, "skipped": b.skipped,
                "per_class": self.per_class}


def metric_report(name: str, logits: np.ndarray, labels: np.ndarray, n_replicates=1000, seed=0,
                  method="paper", label_names=None) -> MetricReport:
    kind = task_kind(labels)
    scores = scores_from_logits(logits, kind)
    fn = metric_fn(name)
    boot = bootstrap_ci(fn, scores, labels, n_replicates, seed, method)
    return MetricReport(name, per_class_values(name, scores, labels, label_names), boot)


# ---------------------------------------------------------------------------
# label-fraction subsets
# ---------------------------------------------------------------------------

def stratified_subsample(labels, fraction: float, seed: int = 0) -> np.ndarray:
    """Sorted row indices of a subset of size round(fraction * n) matching label prevalence.

    Labels are visited from rarest to most common; each gets round(fraction *
    positives) positive rows (at least one when it has any). Remaining slots
    are filled preferring rows that add no positives to labels already at
    their target. One-hot multiclass labels use largest-remainder allocation so
    the class counts sum exactly to the subset size.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if n == 0:
        raise DataError("cannot subsample an empty dataset")
    labels = labels.reshape(n, -1).astype(np.int64)
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    size = int(round(fraction * n))
    if size < 2:
        raise ConfigError(f"fraction {fraction} of {n} samples yields {size} < 2 samples")
    if fraction == 1.0:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    positives = labels.sum(axis=0)

    if labels.shape[1] > 1 and np.all(labels.sum(axis=1) == 1):
        quota = fraction * positives
        counts = np.floor(quota).astype(np.int64)
        remainder = size - counts.sum()
        order = np.lexsort((np.arange(len(quota)), -(quota - counts)))
        counts[order[:remainder]] += 1
        chosen = [rng.permutation(np.flatnonzero(labels[:, c]))[: counts[c]] for c in range(labels.shape[1])]
        return np.sort(np.concatenate(chosen))

    targets = np.where(positives > 0, np.maximum(1, np.round(fraction * positives)), 0).astype(np.int64)
    selected = np.zeros(n, dtype=bool)
    for lab in np.argsort(positives, kind="stable"):
        have = int(labels[selected, lab].sum())
        need = int(targets[lab] - have)
        if need <= 0:
            continue
        current = labels[selected].sum(axis=0)
        saturated = current >= targets
        cand = np.flatnonzero(~selected & (labels[:, lab] == 1))
        cand = rng.permutation(cand)
        # prefer candidates that do not push other labels past their targets
        overshoot = (labels[cand][:, saturated] == 1).sum(axis=1)
        cand = cand[np.argsort(overshoot, kind="stable")]
        selected[cand[:need]] = True
    remaining = size - int(selected.sum())
    if remaining > 0:
        current = labels[selected].sum(axis=0)
        saturated = current >= targets
        cand = rng.permutation(np.flatnonzero(~selected))
        cost = (labels[cand][:, saturated] == 1).sum(axis=1) * n + labels[cand].sum(axis=1)
        cand = cand[np.argsort(cost, kind="stable")]
        selected[cand[:remaining]] = True
    return np.flatnonzero(selected)


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------

class FineTuneMode(str, enum.Enum):
    LL = "LL"
    E2E = "E2E"


@dataclass
class FineTuneConfig:
    epochs: int = 10
    learning_rate: float = 0.3
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    metric: str = "auroc"
    random_init: bool = False
    standardize: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("fine-tune epochs >= 0, batch_size >= 1 and learning_rate > 0 required")
        metric_fn(self.metric)


class Classifier(Module):
    """Encoder trunk with a linear head on the pooled final block."""

    def __init__(self, encoder: Encoder, num_outputs: int, seed: int = 0):
        self.encoder = encoder
        rng = np.random.default_rng(seed)
        self.classifier = Linear(encoder.feature_dim, num_outputs, rng, dtype=np.dtype(encoder.config.dtype))

    def forward(self, images: Tensor) -> Tensor:
        taps = self.encoder.forward_taps(images)
        return self.classifier(T.global_avg_pool2d(taps[-1]))

    def trunk_parameters(self):
        return self.encoder.parameters()


def classification_loss(logits: Tensor, labels: np.ndarray, kind: str) -> Tensor:
    if kind == "multiclass":
        return T.cross_entropy(logits, labels.argmax(axis=1))
    return T.binary_cross_entropy_with_logits(logits, labels)


def _batches(n: int, batch_size: int, rng: np.random.Generator, min_size: int = 1):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) >= min_size:
            yield idx


def _safe_metric(fn, scores, labels) -> float:
    try:
        return fn(scores, labels)
    except UndefinedMetricError:
        return float("nan")


def _better(value: float, best: float | None) -> bool:
    if np.isnan(value):
        return best is None
    return best is None or np.isnan(best) or value > best


@dataclass
class HeadResult:
    head: Linear
    history: list[dict]
    best_epoch: int


def train_linear_head(
    train_x: np.ndarray,
    train_y: np.ndarray,
    val_x: np.ndarray,
    val_y: np.ndarray,
    cfg: FineTuneConfig,
    head: Linear | None = None,
) -> HeadResult:
    """Fit a linear classifier on fixed features, keeping the best-validation weights.

    With ``cfg.standardize`` optimization runs on z-scored features and the
    scaling is folded back into the returned head, which therefore still
    consumes raw features.
    """
    train_y = np.asarray(train_y).reshape(len(train_y), -1)
    val_y = np.asarray(val_y).reshape(len(val_y), -1)
    kind = task_kind(train_y)
    dtype = train_x.dtype if train_x.dtype in (np.float32, np.float64) else np.float64
    rng = np.random.default_rng(cfg.seed)
    if head is None:
        head = Linear(train_x.shape[1], train_y.shape[1], rng, dtype=dtype)
    if cfg.standardize:
        shift = train_x.mean(axis=0)
        scale = train_x.std(axis=0)
        scale = np.where(scale > 1e-12, scale, 1.0)
    else:
        shift = np.zeros(train_x.shape[1])
        scale = np.ones(train_x.shape[1])
    zx_train = ((train_x - shift) / scale).astype(dtype)
    zx_val = ((val_x - shift) / scale).astype(dtype)

    opt = SGD(head.parameters(), cfg.learning_rate, cfg.sgd_momentum, cfg.weight_decay)
    fn = metric_fn(cfg.metric)
    history: list[dict] = []
    best_state, best_val, best_epoch = head.state_dict(), None, 0
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for idx in _batches(len(zx_train), cfg.batch_size, rng):
            logits = head(Tensor(zx_train[idx], dtype=dtype))
            loss = classification_loss(logits, train_y[idx], kind)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        with no_grad():
            val_logits = head(Tensor(zx_val, dtype=dtype)).data
        val = _safe_metric(fn, scores_from_logits(val_logits, kind), val_y)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), f"val_{cfg.metric}": val})
        if _better(val, best_val):
            best_state, best_val, best_epoch = head.state_dict(), val, epoch
    head.load_state_dict(best_state)
    if cfg.standardize:
        w = head.weight.data / scale
        head.weight.data = w.astype(dtype)
        head.bias.data = (head.bias.data - w @ shift).astype(dtype)
    return HeadResult(head, history, best_epoch)


def encode_pooled(encoder: Encoder, images: np.ndarray, block: int | None = None, batch_size: int = 128) -> np.ndarray:
    """Eval-mode global-average-pooled features of one block (default: last)."""
    block = block or encoder.config.num_blocks
    was_training = encoder.training
    encoder.eval()
    out = []
    try:
        with no_grad():
            for start in range(0, len(images), batch_size):
                x = Tensor(images[start:start + batch_size], dtype=encoder.config.dtype)
                taps = encoder.forward_taps(x, upto=block)
                out.append(T.global_avg_pool2d(taps[block - 1]).data)
    finally:
        encoder.train(was_training)
    return np.concatenate(out) if out else np.empty((0, encoder.config.channels_per_block[block - 1]))


def predict_logits(model: Classifier, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    try:
        with no_grad():
            for start in range(0, len(images), batch_size):
                out.append(model(Tensor(images[start:start + batch_size], dtype=model.encoder.config.dtype)).data)
    finally:
        model.train(was_training)
    return np.concatenate(out)


@dataclass
class FineTuneResult:
    model: Classifier
    history: list[dict]
    best_epoch: int
    mode: FineTuneMode


def fine_tune(
    encoder: Encoder,
    mode: FineTuneMode | str,
    train: tuple[np.ndarray, np.ndarray],
    val: tuple[np.ndarray, np.ndarray],
    cfg: FineTuneConfig | None = None,
) -> FineTuneResult:
    """LL or E2E fine-tuning of a copy of ``encoder``; the best-validation model is returned.

    With ``cfg.random_init`` the encoder weights are re-initialized first (the
    supervised baseline).
    """
    cfg = cfg or FineTuneConfig()
    mode = FineTuneMode(mode)
    if len(train[0]) == 0 or len(val[0]) == 0:
        raise DataError("fine_tune needs non-empty train and validation sets")
    train_x, train_y = train[0], np.asarray(train[1]).reshape(len(train[1]), -1)
    val_x, val_y = val[0], np.asarray(val[1]).reshape(len(val[1]), -1)
    trunk = Encoder(encoder.config, seed=cfg.seed + 17) if cfg.random_init else copy.deepcopy(encoder)
    model = Classifier(trunk, train_y.shape[1], seed=cfg.seed)
    kind = task_kind(train_y)

    if mode is FineTuneMode.LL:
        before = parameters_checksum(list(trunk.parameters()) + [b for _, b in trunk.named_buffers()])
        trunk.eval().requires_grad_(False)
        feats_tr = encode_pooled(trunk, train_x)
        feats_va = encode_pooled(trunk, val_x)
        result = train_linear_head(feats_tr, train_y, feats_va, val_y, cfg, head=model.classifier)
        after = parameters_checksum(list(trunk.parameters()) + [b for _, b in trunk.named_buffers()])
        assert before == after, "LL fine-tuning modified frozen trunk parameters"
        return FineTuneResult(model, result.history, result.best_epoch, mode)

    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = SGD(params, cfg.learning_rate, cfg.sgd_momentum, cfg.weight_decay)
    fn = metric_fn(cfg.metric)
    history: list[dict] = []
    best_state, best_val, best_epoch = model.state_dict(), None, 0
    dtype = trunk.config.dtype
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        losses = []
        for idx in _batches(len(train_x), cfg.batch_size, rng, min_size=2):
            logits = model(Tensor(train_x[idx], dtype=dtype))
            loss = classification_loss(logits, train_y[idx], kind)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        val_scores = scores_from_logits(predict_logits(model, val_x), kind)
        val = _safe_metric(fn, val_scores, val_y)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else float("nan"),
                        f"val_{cfg.metric}": val})
        if _better(val, best_val):
            best_state, best_val, best_epoch = model.state_dict(), val, epoch
    model.load_state_dict(best_state)
    model.eval()
    return FineTuneResult(model, history, best_epoch, mode)
