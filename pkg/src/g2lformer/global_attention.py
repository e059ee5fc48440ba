"""Single-layer, single-head linear global attention with a dense oracle.

The layer computes

    Q, K, V = X W_Q, X W_K, X W_V
    Q~, K~  = Q / ||Q||_F, K / ||K||_F
    D       = diag(1 + Q~ (K~ᵀ 1) / N)^{-1}
    h       = FFN(D (V + Q~ (K~ᵀ V) / N))

right to left, so nothing N x N is ever formed.  ``quadratic_oracle``
evaluates the same map through the explicit all-pairs score matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndmath as nd
from .ndmath import DegeneracyError, ShapeError, Tensor

ORACLE_MAX_NODES = 4096


class OracleGuardError(ValueError):
    pass


@dataclass
class FFNParams:
    """affine -> ReLU -> affine."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def create(cls, store: nd.ParamStore, prefix: str, d: int, d_ffn: int) -> "FFNParams":
        return cls(store.glorot(f"{prefix}.W1", d, d_ffn), store.zeros(f"{prefix}.b1", 1, d_ffn),
                   store.glorot(f"{prefix}.W2", d_ffn, d), store.zeros(f"{prefix}.b2", 1, d))


def feed_forward(x: Tensor, p: FFNParams | None) -> Tensor:
    """Apply the FFN; ``None`` is the identity FFN."""
    if p is None:
        return x
    hidden = nd.apply_activation(nd.add_row(nd.matmul(x, p.w1), p.b1), "relu")
    return nd.add_row(nd.matmul(hidden, p.w2), p.b2)


def _ffn_numpy(x: np.ndarray, p: FFNParams | None) -> np.ndarray:
    if p is None:
        return x
    hidden = np.maximum(x @ p.w1.data + p.b1.data, 0.0)
    return hidden @ p.w2.data + p.b2.data


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    ffn: FFNParams | None = None

    @classmethod
    def create(cls, store: nd.ParamStore, prefix: str, d_in: int, d: int,
               d_ffn: int | None) -> "AttentionParams":
        wq = store.glorot(f"{prefix}.WQ", d_in, d)
        wk = store.glorot(f"{prefix}.WK", d_in, d)
        wv = store.glorot(f"{prefix}.WV", d_in, d)
        ffn = FFNParams.create(store, f"{prefix}.ffn", d, d_ffn) if d_ffn else None
        return cls(wq, wk, wv, ffn)


@dataclass
class AttentionOutput:
    h: Tensor
    pre_ffn: Tensor
    diagnostics: dict = field(default_factory=dict)


def project_qkv(x: Tensor, p: AttentionParams) -> tuple[Tensor, Tensor, Tensor]:
    if x.cols != p.wq.rows:
        raise ShapeError(f"project_qkv: input {x.shape} does not match W_Q {p.wq.shape}")
    return nd.matmul(x, p.wq), nd.matmul(x, p.wk), nd.matmul(x, p.wv)


def normalize_qk(q: Tensor, k: Tensor) -> tuple[Tensor, Tensor, dict]:
    nq, nk = nd.frobenius_norm(q), nd.frobenius_norm(k)
    if nq.item() == 0.0:
        raise DegeneracyError("Q has zero Frobenius norm")
    if nk.item() == 0.0:
        raise DegeneracyError("K has zero Frobenius norm")
    diag = {"q_norm": nq.item(), "k_norm": nk.item()}
    return nd.div_scalar(q, nq), nd.div_scalar(k, nk), diag


def attention_normalizer(qt: Tensor, kt: Tensor) -> tuple[Tensor, dict]:
    """Column of 1 / (1 + q~_i · (Σ_j k~_j) / N), via two matrix-vector products."""
    n = qt.rows
    k_sum = nd.sum_rows(kt)                                  # 1 x d  (K~ᵀ 1)
    corr = nd.scale(nd.matmul(qt, nd.transpose(k_sum)), 1.0 / n)   # N x 1
    c = corr.data[:, 0]
    bound = np.linalg.norm(qt.data, axis=1) * np.linalg.norm(k_sum.data) / n
    if np.any(np.abs(c) > bound * (1 + 1e-9) + 1e-15):
        raise DegeneracyError("normalizer correction exceeds its Cauchy-Schwarz bound")
    denom = nd.add_scalar(corr, 1.0)
    if np.any(denom.data <= 0.0):
        raise DegeneracyError("attention normalizer has a non-positive denominator")
    d_col = nd.reciprocal(denom)
    diag = {"normalizer_min": float(d_col.data.min()), "normalizer_max": float(d_col.data.max())}
    return d_col, diag


def linear_attention(x: Tensor, p: AttentionParams) -> AttentionOutput:
    n = x.rows
    if n < 1:
        raise ShapeError("linear_attention needs at least one node")
    q, k, v = project_qkv(x, p)
    qt, kt, diag = normalize_qk(q, k)
    d_col, ndiag = attention_normalizer(qt, kt)
    kv = nd.matmul(nd.transpose(kt), v)                      # d x d
    num = nd.add(v, nd.scale(nd.matmul(qt, kv), 1.0 / n))
    pre = nd.hadamard_broadcast(num, d_col)
    return AttentionOutput(feed_forward(pre, p.ffn), pre, {**diag, **ndiag})


def quadratic_oracle(x: Tensor, p: AttentionParams) -> AttentionOutput:
    """Same attention through the explicit N x N score matrix (plain numpy)."""
    X = x.data
    n = X.shape[0]
    if n > ORACLE_MAX_NODES:
        raise OracleGuardError(f"quadratic oracle limited to {ORACLE_MAX_NODES} nodes, got {n}")
    Q, K, V = X @ p.wq.data, X @ p.wk.data, X @ p.wv.data
    qn, kn = np.sqrt((Q ** 2).sum()), np.sqrt((K ** 2).sum())
    if qn == 0.0:
        raise DegeneracyError("Q has zero Frobenius norm")
    if kn == 0.0:
        raise DegeneracyError("K has zero Frobenius norm")
    scores = (Q / qn) @ (K / kn).T
    out = np.empty_like(V)
    for i in range(n):
        num = V[i] + scores[i] @ V / n
        den = 1.0 + scores[i].sum() / n
        out[i] = num / den
    pre = Tensor(out)
    return AttentionOutput(Tensor(_ffn_numpy(out, p.ffn)), pre, {"q_norm": qn, "k_norm": kn})
