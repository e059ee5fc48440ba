"""Analytic FLOP / activation-byte model, scaling runs and linear fits.

Cost conventions (shared with the op counter in :mod:`g2lformer.ndmath`):
a dense ``(m x k) @ (k x n)`` product is ``2mkn`` FLOPs, a sparse product is
``2 · nnz · cols``, elementwise and broadcast ops are one FLOP per output
entry, reductions one per input entry, and the Frobenius norm two per entry.
Pure data movement (concat, slice, gather, transpose) is free.  Activation
bytes are 8 per entry of every op output, since the tape keeps them all
alive until the backward pass.
"""

from __future__ import annotations

import csv
import logging
import math
import statistics
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import ndmath as nd
from .graphstore import generate_er
from .model import Model, ModelConfig, build, readout
from .ndmath import ContractError
from .trainkit import OptimState, training_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Cost:
    flops: int = 0
    elems: int = 0

    def __add__(self, other: "Cost") -> "Cost":
        return Cost(self.flops + other.flops, self.elems + other.elems)

    def __mul__(self, k: int) -> "Cost":
        return Cost(self.flops * k, self.elems * k)

    __rmul__ = __mul__


def _mm(m, k, n) -> Cost:
    return Cost(2 * m * k * n, m * n)


def _ew(size) -> Cost:
    return Cost(size, size)


def _move(size) -> Cost:
    return Cost(0, size)


def _ffn(rows, d, d_ffn) -> Cost:
    if not d_ffn:
        return Cost()
    return _mm(rows, d, d_ffn) + _ew(rows * d_ffn) * 2 + _mm(rows, d_ffn, d) + _ew(rows * d)


def attention_cost(n, d_in, d, d_ffn) -> Cost:
    qkv = _mm(n, d_in, d) * 3
    norms = Cost(2 * n * d, 1) * 2 + _ew(n * d) * 2            # frobenius + divide
    normalizer = (Cost(n * d, d) + _move(d) + _mm(n, d, 1)     # K~ᵀ1, transpose, Q~(·)
                  + _ew(n) * 3)                                  # 1/N, +1, reciprocal
    update = _move(n * d) + _mm(d, n, d) + _mm(n, d, d) + _ew(n * d) * 3
    return qkv + norms + normalizer + update + _ffn(n, d, d_ffn)


def gcn_cost(n, nnz, d_in, d, d_ffn) -> Cost:
    return _mm(n, d_in, d) + Cost(2 * nnz * d, n * d) + _ffn(n, d, d_ffn)


def gated_cost(n, e, d) -> Cost:
    edge = (_mm(n, d, d) + _move(e * d)) * 2 + _mm(e, d, d) + _ew(e * d) * 6
    gate = _ew(e * d) + Cost(e * d, n * d) + _move(e * d) + _ew(e * d) * 2
    msg = _mm(n, d, d) + _move(e * d) + _ew(e * d) + Cost(e * d, n * d)
    node = _mm(n, d, d) + _ew(n * d) * 5
    return edge + gate + msg + node


def gate_cost(n, d, d_fuse, d_gate, first: bool) -> Cost:
    """One fusion gate: β, γ, and the filter + η accumulation."""
    beta = _mm(n, d, d_fuse) + _move(2 * n * d_fuse)
    if not first:
        beta = beta + _mm(n, d, d_fuse)
    gamma = _mm(n, 2 * d_fuse, d_gate) + _ew(n * d_gate) * 2 + _mm(n, d_gate, 1) + _ew(n) * 2
    return beta + gamma + _ew(n * d) * 2


@dataclass(frozen=True)
class CostModel:
    global_attention: int
    fusion: int
    local: int
    readout: int
    activation_bytes: int

    @property
    def total(self) -> int:
        return self.global_attention + self.fusion + self.local + self.readout


def flop_count(config: ModelConfig, n: int, e: int) -> CostModel:
    """Closed-form forward cost (model + readout) on a graph with ``n`` nodes
    and ``e`` stored directed edges, full-graph mode."""
    c = config.validate()
    d, f = c.hidden, c.ffn_dim
    nnz = e + n
    raw_in = c.scheme != "global_to_local"

    att = attention_cost(n, d if c.scheme == "local_to_global" else c.in_dim, d, f)

    local = Cost()
    if c.backbone == "gcn":
        for i in range(1, c.n_local_layers + 1):
            local = local + gcn_cost(n, nnz, c.in_dim if (i == 1 and raw_in) else d, d, f)
    else:
        if c.edge_dim:
            local = local + _mm(e, c.edge_dim, d)
        if raw_in:
            local = local + _mm(n, c.in_dim, d)
        local = local + gated_cost(n, e, d) * c.n_local_layers

    fusion = Cost()
    if c.fusion_active:
        fusion = gate_cost(n, d, c.fusion_dim, c.gate_dim, True)
        fusion = fusion + gate_cost(n, d, c.fusion_dim, c.gate_dim, False) * (c.n_local_layers - 1)

    head = Cost()
    if c.scheme == "local_and_global":
        head = head + _ew(n * d)                  # branch sum
    if c.readout == "graph_mean":
        head = head + Cost(n * d, d) + _mm(1, d, c.out_dim) + _ew(c.out_dim)
    else:
        head = head + _mm(n, d, c.out_dim) + _ew(n * c.out_dim)

    elems = att.elems + local.elems + fusion.elems + head.elems
    return CostModel(att.flops, fusion.flops, local.flops, head.flops, 8 * elems)


def instrumented_count(model: Model, graph) -> nd.OpCounter:
    """Run one forward + readout under the op counter."""
    ctx = model.context(graph)
    with nd.count_ops() as counter:
        readout(model.forward(ctx).reps, model)
    return counter


# ---------------------------------------------------------------------------
# scaling


@dataclass
class ScalingRow:
    n: int
    edges: int
    epoch_seconds: float
    flops: int
    activation_bytes: int
    failed: str | None = None


CSV_HEADER = ["n", "edges", "epoch_seconds", "flops", "activation_bytes"]


def run_scaling(sizes, config: ModelConfig, seed: int = 0, avg_degree: float = 10.0,
                feat_dim: int = 128, epochs: int = 5, warmup: int = 2, lr: float = 1e-3) -> list[ScalingRow]:
    """Median full-batch training epoch time per graph size on ER graphs."""
    sizes = list(sizes)
    if sizes != sorted(sizes):
        raise ContractError("sizes must be ascending")
    config = replace(config, in_dim=feat_dim)
    rows = []
    for n in sizes:
        try:
            g = generate_er(n, avg_degree, feat_dim, seed)
            rng = np.random.default_rng(seed)
            labels = rng.integers(0, config.out_dim, size=n)
            g = g.with_task(labels, np.ones(n, dtype=bool), None, None, config.out_dim)
            model, _ = build(config)
            ctx = model.context(g)
            state = OptimState(lr=lr)
            times = []
            for i in range(warmup + epochs):
                t0 = time.perf_counter()
                training_step(model, ctx, g, g.train_mask, state)
                if i >= warmup:
                    times.append(time.perf_counter() - t0)
            cost = flop_count(config, n, g.num_edges)
            rows.append(ScalingRow(n, g.num_edges, statistics.median(times), cost.total, cost.activation_bytes))
            log.info("n=%d edges=%d epoch=%.4fs", n, g.num_edges, rows[-1].epoch_seconds)
        except MemoryError as exc:
            rows.append(ScalingRow(n, 0, float("nan"), 0, 0, failed=f"MemoryError: {exc}"))
    return rows


def write_scaling_csv(rows: list[ScalingRow], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in rows:
            if r.failed is None:
                w.writerow([r.n, r.edges, f"{r.epoch_seconds:.6f}", r.flops, r.activation_bytes])
            else:
                w.writerow([r.n, r.edges, "failed", "", ""])
    return path


def fit_linear(xs, ys) -> tuple[float, float, float]:
    """Ordinary least squares ``y = slope·x + intercept`` and its r², clamped to [0, 1].

    Constant ``ys`` are fitted exactly, so r² = 1 by convention.
    """
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.size < 3 or x.size != y.size:
        raise ContractError("fit_linear needs at least 3 (x, y) pairs")
    if np.unique(x).size < 2:
        raise ContractError("fit_linear needs distinct x values")
    xm, ym = x.mean(), y.mean()
    slope = float(np.sum((x - xm) * (y - ym)) / np.sum((x - xm) ** 2))
    intercept = float(ym - slope * xm)
    ss_tot = float(np.sum((y - ym) ** 2))
    if ss_tot == 0.0:
        return slope, intercept, 1.0
    ss_res = float(np.sum((y - (slope * x + intercept)) ** 2))
    r2 = 1.0 - ss_res / ss_tot
    return slope, intercept, float(min(1.0, max(0.0, r2)))


def doubling_excess(config: ModelConfig, n: int, avg_degree: float = 10.0) -> int:
    """count(2N) - 2·count(N) with |E| = avg_degree·N; any N² term would show up here."""
    e1 = int(round(avg_degree * n))
    return flop_count(config, 2 * n, 2 * e1).total - 2 * flop_count(config, n, e1).total
