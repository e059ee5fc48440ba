"""Local message-passing layers: GCN (Ã h W then FFN) and residual GatedGCN."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndmath as nd
from .global_attention import FFNParams, feed_forward
from .graphstore import Graph, Partition, induced_subgraph, normalize_adjacency
from .ndmath import ContractError, ShapeError, SparseCSR, Tensor

GATE_EPS = 1e-6


@dataclass
class GcnLayerParams:
    w: Tensor
    ffn: FFNParams | None = None

    @classmethod
    def create(cls, store: nd.ParamStore, prefix: str, d_in: int, d: int,
               d_ffn: int | None) -> "GcnLayerParams":
        w = store.glorot(f"{prefix}.W", d_in, d)
        return cls(w, FFNParams.create(store, f"{prefix}.ffn", d, d_ffn) if d_ffn else None)


@dataclass
class GatedLayerParams:
    u: Tensor
    v_msg: Tensor
    a_e: Tensor
    b_e: Tensor
    c_e: Tensor
    node_scale: Tensor
    node_shift: Tensor
    edge_scale: Tensor
    edge_shift: Tensor

    @classmethod
    def create(cls, store: nd.ParamStore, prefix: str, d: int) -> "GatedLayerParams":
        mats = {k: store.glorot(f"{prefix}.{k}", d, d) for k in ("U", "V", "A", "B", "C")}
        return cls(mats["U"], mats["V"], mats["A"], mats["B"], mats["C"],
                   store.constant(f"{prefix}.node_scale", 1, d, 1.0),
                   store.zeros(f"{prefix}.node_shift", 1, d),
                   store.constant(f"{prefix}.edge_scale", 1, d, 1.0),
                   store.zeros(f"{prefix}.edge_shift", 1, d))


def gcn_layer(h_prev: Tensor, adj: SparseCSR, p: GcnLayerParams) -> Tensor:
    if adj.rows != h_prev.rows or adj.cols != h_prev.rows:
        raise ShapeError(f"gcn_layer: adjacency {adj.shape} vs features {h_prev.shape}")
    if h_prev.cols != p.w.rows:
        raise ShapeError(f"gcn_layer: features {h_prev.shape} vs W {p.w.shape}")
    return feed_forward(nd.spmm(adj, nd.matmul(h_prev, p.w)), p.ffn)


def _affine_norm(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    return nd.add_row(nd.mul_row(x, scale), shift)


def gatedgcn_layer(h_prev: Tensor, e_prev: Tensor, graph: Graph,
                   p: GatedLayerParams) -> tuple[Tensor, Tensor]:
    """One residual gated-GCN step over the stored (receiver <- sender) edges.

    ê_ij = e_ij + ReLU(Norm(A h_i + B h_j + C e_ij))
    σ_ij = sigmoid(ê_ij) / (Σ_j' sigmoid(ê_ij') + ε)
    h_i' = h_i + ReLU(Norm(U h_i + Σ_j σ_ij ∘ V h_j))
    """
    n = graph.n
    if h_prev.rows != n or e_prev.rows != graph.num_edges:
        raise ShapeError(f"gatedgcn_layer: h {h_prev.shape} / e {e_prev.shape} vs graph "
                         f"({n} nodes, {graph.num_edges} edges)")
    dst, src = graph.edge_index()
    h_a = nd.gather_rows(nd.matmul(h_prev, p.a_e), dst)
    h_b = nd.gather_rows(nd.matmul(h_prev, p.b_e), src)
    e_c = nd.matmul(e_prev, p.c_e)
    e_pre = nd.add(nd.add(h_a, h_b), e_c)
    e_hat = nd.add(e_prev, nd.apply_activation(_affine_norm(e_pre, p.edge_scale, p.edge_shift), "relu"))

    sig = nd.apply_activation(e_hat, "sigmoid")
    denom = nd.add_scalar(nd.gather_rows(nd.scatter_add_rows(sig, dst, n), dst), GATE_EPS)
    gate = nd.div(sig, denom)
    msg = nd.mul(gate, nd.gather_rows(nd.matmul(h_prev, p.v_msg), src))
    agg = nd.scatter_add_rows(msg, dst, n)
    h_pre = nd.add(nd.matmul(h_prev, p.u), agg)
    h_new = nd.add(h_prev, nd.apply_activation(_affine_norm(h_pre, p.node_scale, p.node_shift), "relu"))
    return h_new, e_hat


@dataclass
class ClusterView:
    """Subgraph induced by one cluster, with its re-normalized adjacency."""

    nodes: np.ndarray
    edge_ids: np.ndarray
    graph: Graph
    adj: SparseCSR


def cluster_views(graph: Graph, partition: Partition) -> list[ClusterView]:
    if partition.cluster_id.shape != (graph.n,):
        raise ContractError("partition does not match graph size")
    dst, src = graph.edge_index()
    views = []
    for c in range(partition.k):
        sub, nodes = induced_subgraph(graph, partition.members(c))
        inside = np.zeros(graph.n, dtype=bool)
        inside[nodes] = True
        edge_ids = np.flatnonzero(inside[dst] & inside[src])
        views.append(ClusterView(nodes, edge_ids, sub, normalize_adjacency(sub)))
    return views


def cluster_forward(h_prev: Tensor, graph: Graph, partition: Partition, cluster_id: int,
                    p: GcnLayerParams, views: list[ClusterView] | None = None) -> Tensor:
    """GCN layer on the subgraph induced by one cluster; rows follow ``partition.members``."""
    if not 0 <= cluster_id < partition.k:
        raise ContractError(f"cluster id {cluster_id} outside [0, {partition.k})")
    if views is None:
        sub, nodes = induced_subgraph(graph, partition.members(cluster_id))
        adj = normalize_adjacency(sub)
    else:
        nodes, adj = views[cluster_id].nodes, views[cluster_id].adj
    return gcn_layer(nd.gather_rows(h_prev, nodes), adj, p)


class GraphContext:
    """Per-graph tensors reused across forward passes.

    With a partition, local layers run per cluster on the re-normalized
    induced subgraphs and their outputs are merged back by node id.
    """

    def __init__(self, graph: Graph, partition: Partition | None = None):
        self.graph = graph
        self.n = graph.n
        self.x = Tensor(graph.features)
        self.adj = normalize_adjacency(graph)
        self.partition = partition
        self.views = cluster_views(graph, partition) if partition is not None else None
        if graph.edge_features is not None:
            self.edge_features = Tensor(graph.edge_features)
        else:
            self.edge_features = None

    def gcn(self, h: Tensor, p: GcnLayerParams) -> Tensor:
        if self.views is None:
            return gcn_layer(h, self.adj, p)
        out = None
        for view in self.views:
            part = nd.scatter_add_rows(gcn_layer(nd.gather_rows(h, view.nodes), view.adj, p),
                                       view.nodes, self.n)
            out = part if out is None else nd.add(out, part)
        return out

    def gated(self, h: Tensor, e: Tensor, p: GatedLayerParams) -> tuple[Tensor, Tensor]:
        if self.views is None:
            return gatedgcn_layer(h, e, self.graph, p)
        out_h = out_e = None
        m = self.graph.num_edges
        for view in self.views:
            hc, ec = gatedgcn_layer(nd.gather_rows(h, view.nodes), nd.gather_rows(e, view.edge_ids),
                                    view.graph, p)
            hc = nd.scatter_add_rows(hc, view.nodes, self.n)
            ec = nd.scatter_add_rows(ec, view.edge_ids, m)
            out_h = hc if out_h is None else nd.add(out_h, hc)
            out_e = ec if out_e is None else nd.add(out_e, ec)
        return out_h, out_e
