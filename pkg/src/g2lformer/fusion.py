"""Cross-layer information fusion: gate scores per node and the accumulator η.

For gate index ``l``:

    β^1 = h_TL W_h ∥ 0                      (l = 1)
    β^l = η^l W_η ∥ h^l W_h                 (l > 1)
    γ^l = sigmoid(LeakyReLU(β^l W_1 + b_1) W_2 + b_2)
    F_f(h, γ) = h ∘ B(γ)
    η^{l+1} = η^l + F_f(h^l, γ^l)
"""

from __future__ import annotations

from dataclasses import dataclass

from . import ndmath as nd
from .ndmath import ShapeError, Tensor


@dataclass
class FusionParams:
    w_h: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w_eta: Tensor | None = None   # absent for the first gate

    @classmethod
    def create(cls, store: nd.ParamStore, prefix: str, d: int, d_fuse: int, d_gate: int,
               first: bool) -> "FusionParams":
        w_h = store.glorot(f"{prefix}.Wh", d, d_fuse)
        w_eta = None if first else store.glorot(f"{prefix}.Weta", d, d_fuse)
        return cls(w_h=w_h, w1=store.glorot(f"{prefix}.W1", 2 * d_fuse, d_gate),
                   b1=store.zeros(f"{prefix}.b1", 1, d_gate),
                   w2=store.glorot(f"{prefix}.W2", d_gate, 1),
                   b2=store.zeros(f"{prefix}.b2", 1, 1), w_eta=w_eta)

    @property
    def d_fuse(self) -> int:
        return self.w_h.cols


@dataclass
class FusionState:
    eta: Tensor
    layer: int = 1

    @classmethod
    def start(cls, h_tl: Tensor) -> "FusionState":
        return cls(h_tl, 1)


def aggregate_beta(state: FusionState, h: Tensor, p: FusionParams, l: int) -> Tensor:
    """N x 2d' record for gate ``l``; at ``l == 1`` the right half is zero."""
    if l < 1:
        raise ValueError(f"gate index starts at 1, got {l}")
    if h.cols != p.w_h.rows:
        raise ShapeError(f"aggregate_beta: h {h.shape} does not match W_h {p.w_h.shape}")
    if l == 1:
        return nd.concat_cols(nd.matmul(h, p.w_h), nd.zeros(h.rows, p.d_fuse))
    if p.w_eta is None:
        raise ShapeError(f"gate {l} needs W_eta")
    if state.eta.shape != h.shape:
        raise ShapeError(f"aggregate_beta: eta {state.eta.shape} vs h {h.shape}")
    return nd.concat_cols(nd.matmul(state.eta, p.w_eta), nd.matmul(h, p.w_h))


def node_importance(beta: Tensor, p: FusionParams) -> Tensor:
    if beta.cols != p.w1.rows:
        raise ShapeError(f"node_importance: beta {beta.shape} does not match W_1 {p.w1.shape}")
    hidden = nd.apply_activation(nd.add_row(nd.matmul(beta, p.w1), p.b1), "leaky_relu")
    return nd.apply_activation(nd.add_row(nd.matmul(hidden, p.w2), p.b2), "sigmoid")


def filter_apply(h: Tensor, gamma: Tensor) -> Tensor:
    return nd.hadamard_broadcast(h, gamma)


def eta_update(state: FusionState, h: Tensor, gamma: Tensor) -> FusionState:
    return eta_accumulate(state, filter_apply(h, gamma))


def eta_accumulate(state: FusionState, filtered: Tensor) -> FusionState:
    """η update when F_f(h, γ) has already been computed."""
    return FusionState(nd.add(state.eta, filtered), state.layer + 1)
