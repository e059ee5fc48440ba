"""Losses, Adam, metrics and deterministic training loops."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import ndmath as nd
from .graphstore import Graph, induced_subgraph, partition_bfs, random_node_batches
from .model import Model, readout
from .ndmath import ContractError, NonFiniteGradient, ParamStore, Tape, Tensor

log = logging.getLogger(__name__)

HIGHER_IS_BETTER = {"accuracy": True, "roc_auc": True, "macro_f1": True, "ap": True, "mae": False}


class UndefinedMetric(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, reason: str = "loss is not finite"):
        self.epoch = epoch
        super().__init__(f"training diverged at epoch {epoch}: {reason}")


# ---------------------------------------------------------------------------
# losses


def _mask_rows(mask) -> np.ndarray:
    rows = np.flatnonzero(np.asarray(mask, dtype=bool))
    if rows.size == 0:
        raise ContractError("loss mask selects no rows")
    return rows


def cross_entropy(logits: Tensor, labels, mask) -> Tensor:
    """Mean of -log softmax(logits)[label] over masked rows."""
    rows = _mask_rows(mask)
    y = np.asarray(labels, dtype=np.int64)[rows]
    if np.any(y < 0) or np.any(y >= logits.cols):
        raise ContractError("masked labels must be valid class ids")
    picked = nd.select(nd.log_softmax(logits), rows, y)
    return nd.scale(nd.mean_all(picked), -1.0)


def mae_loss(pred: Tensor, target, mask) -> Tensor:
    target = np.asarray(target, dtype=np.float64).reshape(pred.rows, -1)
    if target.shape != pred.shape:
        raise ContractError(f"mae_loss: target {target.shape} vs prediction {pred.shape}")
    rows = _mask_rows(mask)
    diff = nd.sub(nd.gather_rows(pred, rows), Tensor(target[rows]))
    return nd.mean_all(nd.abs_(diff))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamStore, grads: dict[Tensor, np.ndarray], state: OptimState) -> OptimState:
    """Bias-corrected Adam update applied in place to every parameter."""
    for name, t in params.items():
        g = grads.get(t)
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in params.items():
        g = grads.get(t)
        g = np.zeros(t.shape) if g is None else g
        if state.weight_decay:
            g = g + state.weight_decay * t.data
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        t.data = t.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def clip_global_norm(grads: dict[Tensor, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if total > max_norm > 0:
        s = max_norm / total
        for k in grads:
            grads[k] = grads[k] * s
    return total


# ---------------------------------------------------------------------------
# metrics


def _binary(labels, scores, mask):
    m = np.ones(len(labels), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    y = np.asarray(labels)[m]
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim == 2:
        s = s[:, -1] if s.shape[1] in (1, 2) else None
        if s is None:
            raise UndefinedMetric("binary metric needs one score column (or two logits)")
    s = s[m]
    if not set(np.unique(y)) <= {0, 1}:
        raise UndefinedMetric("binary metric needs 0/1 labels")
    if y.sum() == 0 or y.sum() == y.size:
        raise UndefinedMetric("both classes must be present in the mask")
    return y.astype(np.int64), s


def roc_auc(scores, labels, mask=None) -> float:
    """Rank-sum (Mann-Whitney) AUC with midranks for ties."""
    y, s = _binary(labels, scores, mask)
    ranks = rankdata(s, method="average")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_auc_pairwise(scores, labels, mask=None) -> float:
    """O(P·N) reference: fraction of positive-negative pairs ranked correctly, ties count 1/2."""
    y, s = _binary(labels, scores, mask)
    pos, neg = s[y == 1], s[y == 0]
    wins = 0.0
    for a in pos:
        for b in neg:
            wins += 1.0 if a > b else 0.5 if a == b else 0.0
    return float(wins / (pos.size * neg.size))


def average_precision(scores, labels, mask=None) -> float:
    """Σ_k (R_k - R_{k-1}) P_k over distinct score thresholds, highest first."""
    y, s = _binary(labels, scores, mask)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    cut = np.flatnonzero(np.diff(s)) if s.size > 1 else np.empty(0, dtype=np.int64)
    ends = np.r_[cut, y.size - 1]
    tp = np.cumsum(y)[ends]
    predicted = ends + 1
    precision = tp / predicted
    recall = tp / y.sum()
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def accuracy(scores, labels, mask=None) -> float:
    s = np.asarray(scores)
    pred = s.argmax(axis=1) if s.ndim == 2 else s
    m = np.ones(len(labels), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not m.any():
        raise UndefinedMetric("accuracy over an empty mask")
    return float(np.mean(pred[m] == np.asarray(labels)[m]))


def macro_f1(scores, labels, mask=None) -> float:
    """Unweighted mean F1 over classes that occur in the labels or predictions."""
    s = np.asarray(scores)
    pred = s.argmax(axis=1) if s.ndim == 2 else s
    m = np.ones(len(labels), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    y, p = np.asarray(labels)[m], pred[m]
    if y.size == 0:
        raise UndefinedMetric("macro_f1 over an empty mask")
    f1s = []
    for c in np.union1d(y, p):
        tp = np.sum((p == c) & (y == c))
        fp = np.sum((p == c) & (y != c))
        fn = np.sum((p != c) & (y == c))
        f1s.append(2 * tp / (2 * tp + fp + fn))
    return float(np.mean(f1s))


def mae(scores, labels, mask=None) -> float:
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(labels, dtype=np.float64).reshape(s.shape)
    m = np.ones(s.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not m.any():
        raise UndefinedMetric("mae over an empty mask")
    return float(np.mean(np.abs(s[m] - t[m])))


_METRICS = {"accuracy": accuracy, "roc_auc": roc_auc, "macro_f1": macro_f1,
            "ap": average_precision, "mae": mae}


def metric(kind: str, scores, labels, mask=None) -> float:
    try:
        fn = _METRICS[kind]
    except KeyError:
        raise ValueError(f"unknown metric {kind!r}; expected one of {sorted(_METRICS)}") from None
    return fn(scores, labels, mask)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 1000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float = 0.0          # 0 disables clipping
    mode: str = "full"              # full | cluster | random
    k: int = 4                      # clusters in cluster mode
    batch_size: int = 1024          # nodes per batch in random mode
    metric: str = "accuracy"
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.mode not in ("full", "cluster", "random"):
            raise ValueError(f"mode must be full, cluster or random, got {self.mode!r}")
        if self.metric not in _METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_metric: float | None
    val_metric: float | None
    test_metric: float | None
    seconds: float


@dataclass
class RunReport:
    run_id: str
    config: dict
    epochs: list[EpochRecord] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]

    def to_dict(self, timing: bool = True) -> dict:
        rows = []
        for e in self.epochs:
            row = asdict(e)
            if not timing:
                row.pop("seconds")
            rows.append(row)
        summary = dict(self.summary)
        if not timing:
            summary.pop("seconds_total", None)
        return {"run_id": self.run_id, "config": self.config, "epochs": rows, "summary": summary}

    def to_json(self, timing: bool = True) -> str:
        return json.dumps(self.to_dict(timing), indent=2, sort_keys=True)

    def write(self, directory) -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        jpath, cpath = directory / "report.json", directory / "report.csv"
        jpath.write_text(self.to_json())
        with open(cpath, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "train_metric", "val_metric", "test_metric", "seconds"])
            for e in self.epochs:
                w.writerow([e.epoch, repr(e.loss), e.train_metric, e.val_metric, e.test_metric, e.seconds])
        return jpath, cpath

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        d = json.loads(text)
        eps = [EpochRecord(**{"seconds": 0.0, **e}) for e in d["epochs"]]
        return cls(d["run_id"], d["config"], eps, d["summary"])


def run_id_for(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _safe_metric(kind, scores, labels, mask):
    if not np.any(mask):
        return None
    try:
        return metric(kind, scores, labels, mask)
    except UndefinedMetric:
        return None


def _loss(model: Model, logits: Tensor, graph: Graph, mask) -> Tensor:
    return cross_entropy(logits, graph.labels, mask)


def training_step(model: Model, ctx, graph: Graph, mask, state: OptimState,
                  clip_norm: float = 0.0) -> tuple[float, np.ndarray]:
    """One forward/backward/Adam step; returns the loss and the pre-step logits."""
    with Tape() as tape:
        logits = readout(model.forward(ctx).reps, model)
        loss = _loss(model, logits, graph, mask)
    grads = tape.backward(loss, wrt=model.params.values())
    if clip_norm:
        clip_global_norm(grads, clip_norm)
    adam_step(model.params, grads, state)
    return loss.item(), logits.data


def train(model: Model, graph: Graph, config: TrainConfig, run_config: dict | None = None) -> RunReport:
    """Node-classification training; deterministic given ``config.seed``.

    Full mode takes one step per epoch on all training nodes and reports the
    metrics of that same forward pass.  Cluster and random modes take one
    step per batch (induced subgraph) and evaluate on the full graph after
    each epoch.
    """
    config.validate()
    if graph.n_classes and model.config.out_dim != graph.n_classes:
        raise ContractError(f"model predicts {model.config.out_dim} classes, graph has {graph.n_classes}")
    echo = run_config if run_config is not None else {"model": asdict(model.config), "train": asdict(config)}
    report = RunReport(run_id_for(echo), echo)
    state = OptimState(config.lr, config.beta1, config.beta2, config.eps, config.weight_decay)
    rng = np.random.default_rng(config.seed)
    full_ctx = model.context(graph)
    labels = graph.labels

    batches = None
    if config.mode == "cluster":
        part = partition_bfs(graph, min(config.k, graph.n), seed=config.seed)
        batches = [part.members(c) for c in range(part.k)]
    start = time.perf_counter()
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        try:
            if batches is None and config.mode == "full":
                loss, scores = training_step(model, full_ctx, graph, graph.train_mask, state, config.clip_norm)
            else:
                if config.mode == "cluster":
                    order = rng.permutation(len(batches))
                    epoch_batches = [batches[i] for i in order]
                else:
                    epoch_batches = random_node_batches(graph.n, config.batch_size, rng)
                total, count = 0.0, 0
                for nodes in epoch_batches:
                    sub, _ = induced_subgraph(graph, nodes)
                    if not sub.train_mask.any():
                        continue
                    bl, _ = training_step(model, model.context(sub), sub, sub.train_mask, state, config.clip_norm)
                    k = int(sub.train_mask.sum())
                    total += bl * k
                    count += k
                loss = total / max(count, 1)
                scores = readout(model.forward(full_ctx).reps, model).data
        except (nd.NumericalError, NonFiniteGradient) as exc:
            raise TrainingDiverged(epoch, str(exc)) from exc
        if not np.isfinite(loss):
            raise TrainingDiverged(epoch)
        rec = EpochRecord(epoch, float(loss),
                          _safe_metric(config.metric, scores, labels, graph.train_mask),
                          _safe_metric(config.metric, scores, labels, graph.val_mask),
                          _safe_metric(config.metric, scores, labels, graph.test_mask),
                          time.perf_counter() - t0)
        report.epochs.append(rec)
    report.summary = summarize(report.epochs, config.metric)
    report.summary["seconds_total"] = time.perf_counter() - start
    return report


def summarize(epochs: list[EpochRecord], kind: str) -> dict:
    sign = 1.0 if HIGHER_IS_BETTER[kind] else -1.0
    best, best_epoch = None, None
    for e in epochs:
        if e.val_metric is None:
            continue
        if best is None or sign * e.val_metric > sign * best:
            best, best_epoch = e.val_metric, e.epoch
    train_vals = [e.train_metric for e in epochs if e.train_metric is not None]
    out = {
        "metric": kind,
        "best_val_epoch": best_epoch,
        "best_val_metric": best,
        "test_at_best_val": None if best_epoch is None else epochs[best_epoch].test_metric,
        "final_loss": epochs[-1].loss if epochs else None,
        "best_train_metric": (max(train_vals) if sign > 0 else min(train_vals)) if train_vals else None,
    }
    return out


def majority_baseline(graph: Graph, mask=None) -> float:
    """Test accuracy of always predicting the most frequent training label."""
    mask = graph.test_mask if mask is None else mask
    train_labels = graph.labels[graph.train_mask]
    majority = np.bincount(train_labels[train_labels >= 0]).argmax()
    return float(np.mean(graph.labels[mask] == majority))
