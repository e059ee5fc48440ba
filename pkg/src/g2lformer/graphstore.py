"""Graph data model, generators, partitioning and the binary container."""

from __future__ import annotations

import csv
import heapq
import struct
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .ndmath import SparseCSR

MAGIC = b"G2LG"
VERSION = 1


class GraphValidationError(ValueError):
    pass


class ContainerError(ValueError):
    pass


class BadMagic(ContainerError):
    def __init__(self, found: bytes):
        super().__init__(f"bad magic: expected {MAGIC!r}, found {found!r}")


class VersionMismatch(ContainerError):
    def __init__(self, found: int):
        super().__init__(f"version mismatch: expected {VERSION}, found {found}")


class TruncatedSection(ContainerError):
    def __init__(self, section: str):
        self.section = section
        super().__init__(f"truncated section: {section}")


@dataclass(frozen=True, eq=False)
class Graph:
    """Immutable CSR graph with node features, labels and split masks.

    Row ``i`` of the CSR lists the neighbors whose messages node ``i`` receives.
    Undirected graphs store both directions.
    """

    n: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    features: np.ndarray
    edge_features: np.ndarray | None = None
    labels: np.ndarray | None = None
    train_mask: np.ndarray | None = None
    val_mask: np.ndarray | None = None
    test_mask: np.ndarray | None = None
    n_classes: int = 0

    def __post_init__(self):
        n = int(self.n)
        ro = np.ascontiguousarray(self.row_offsets, dtype=np.int64)
        ci = np.ascontiguousarray(self.col_indices, dtype=np.int64)
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != n:
            raise GraphValidationError(f"features must be {n} x d, got {feats.shape}")
        if ro.shape != (n + 1,) or ro[0] != 0 or np.any(np.diff(ro) < 0) or ro[-1] != ci.size:
            raise GraphValidationError("row_offsets must be nondecreasing from 0 to |E|")
        if ci.size and (ci.min() < 0 or ci.max() >= n):
            raise GraphValidationError("col_indices must lie in [0, n)")
        dst = np.repeat(np.arange(n), np.diff(ro))
        if np.any(dst == ci):
            raise GraphValidationError("self-loops are not stored in the raw adjacency")
        ef = self.edge_features
        if ef is not None:
            ef = np.ascontiguousarray(ef, dtype=np.float64)
            if ef.ndim != 2 or ef.shape[0] != ci.size:
                raise GraphValidationError(f"edge_features must be |E| x d_e, got {ef.shape}")
            if ef.shape[1] == 0:
                ef = None
        labels = np.full(n, -1, dtype=np.int64) if self.labels is None else np.ascontiguousarray(self.labels, dtype=np.int64)
        if labels.shape != (n,):
            raise GraphValidationError("labels must have one entry per node")
        masks = []
        for m in (self.train_mask, self.val_mask, self.test_mask):
            m = np.zeros(n, dtype=bool) if m is None else np.ascontiguousarray(m, dtype=bool)
            if m.shape != (n,):
                raise GraphValidationError("masks must have one entry per node")
            masks.append(m)
        if np.any(masks[0] & masks[1]) or np.any(masks[0] & masks[2]) or np.any(masks[1] & masks[2]):
            raise GraphValidationError("train/val/test masks must be disjoint")
        for arr in (ro, ci, feats, labels, *masks) + ((ef,) if ef is not None else ()):
            arr.flags.writeable = False
        s = object.__setattr__
        s(self, "n", n)
        s(self, "row_offsets", ro)
        s(self, "col_indices", ci)
        s(self, "features", feats)
        s(self, "edge_features", ef)
        s(self, "labels", labels)
        s(self, "train_mask", masks[0])
        s(self, "val_mask", masks[1])
        s(self, "test_mask", masks[2])
        s(self, "n_classes", int(self.n_classes))

    @property
    def num_edges(self) -> int:
        return int(self.col_indices.size)

    @property
    def feat_dim(self) -> int:
        return self.features.shape[1]

    @property
    def edge_dim(self) -> int:
        return 0 if self.edge_features is None else self.edge_features.shape[1]

    def degrees(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    def edge_index(self) -> tuple[np.ndarray, np.ndarray]:
        """(dst, src) per stored edge: ``dst`` is the CSR row, ``src`` its column."""
        return np.repeat(np.arange(self.n), self.degrees()), self.col_indices

    def neighbors(self, v: int) -> np.ndarray:
        return self.col_indices[self.row_offsets[v]:self.row_offsets[v + 1]]

    def with_task(self, labels, train_mask, val_mask, test_mask, n_classes: int) -> "Graph":
        return replace(self, labels=labels, train_mask=train_mask, val_mask=val_mask,
                       test_mask=test_mask, n_classes=n_classes)

    def equals(self, other: "Graph") -> bool:
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and a.tobytes() == b.tobytes()
        return (self.n == other.n and self.n_classes == other.n_classes
                and all(same(getattr(self, f), getattr(other, f)) for f in
                        ("row_offsets", "col_indices", "features", "edge_features", "labels",
                         "train_mask", "val_mask", "test_mask")))


def build_csr(edges, n: int, undirected: bool = True, features=None, edge_features=None) -> Graph:
    """CSR graph from an edge list; duplicates and self-loops are dropped.

    ``edge_features`` (one row per input edge) is only accepted for directed
    input without duplicates, where the mapping to stored edges is one-to-one.
    """
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= n):
        bad = e[(e >= n).any(axis=1) | (e < 0).any(axis=1)][0]
        raise GraphValidationError(f"edge ({bad[0]}, {bad[1]}) has an endpoint outside [0, {n})")
    src, dst = e[:, 0], e[:, 1]
    keep = src != dst
    src, dst = src[keep], dst[keep]
    order_data = None
    if undirected:
        src, dst = np.concatenate([src, dst]), np.concatenate([dst, src])
    elif edge_features is not None:
        order_data = np.asarray(edge_features, dtype=np.float64)[keep]
    # stored row = src endpoint, column = dst endpoint
    key = src * n + dst
    uniq, first = np.unique(key, return_index=True)
    rows, cols = uniq // n, uniq % n
    row_offsets = np.zeros(n + 1, dtype=np.int64)
    np.add.at(row_offsets, rows + 1, 1)
    row_offsets = np.cumsum(row_offsets)
    ef = None
    if edge_features is not None:
        if order_data is None or len(first) != len(key):
            raise GraphValidationError("edge_features need directed, duplicate-free edges")
        ef = order_data[first]
    feats = np.zeros((n, 0)) if features is None else features
    return Graph(n=n, row_offsets=row_offsets, col_indices=cols, features=feats, edge_features=ef)


def read_edge_list(path, n: int | None = None, undirected: bool = True) -> Graph:
    """Import ``src,dst`` CSV lines (an optional non-numeric header is skipped)."""
    edges = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row or not "".join(row).strip():
                continue
            try:
                edges.append((int(row[0]), int(row[1])))
            except (ValueError, IndexError):
                if i == 0:
                    continue
                raise GraphValidationError(f"{path}:{i + 1}: expected 'src,dst', got {row!r}")
    if n is None:
        n = 1 + max((max(a, b) for a, b in edges), default=-1)
    return build_csr(edges, n, undirected=undirected)


def normalize_adjacency(g: Graph) -> SparseCSR:
    """D̂^{-1/2} (A + I) D̂^{-1/2}, with D̂ the row degrees of A + I."""
    dst, src = g.edge_index()
    a = sp.csr_matrix((np.ones(g.num_edges), (dst, src)), shape=(g.n, g.n))
    a = (a + sp.identity(g.n, format="csr")).tocsr()
    a.sort_indices()
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv_sqrt = 1.0 / np.sqrt(deg)
    rows = np.repeat(np.arange(g.n), np.diff(a.indptr))
    vals = inv_sqrt[rows] * a.data * inv_sqrt[a.indices]
    return SparseCSR(g.n, g.n, a.indptr, a.indices, vals)


def generate_er(n: int, avg_degree: float, feat_dim: int, seed: int) -> Graph:
    """Undirected G(n, p) with p = avg_degree / (n - 1) and N(0, 1) features.

    The edge count is drawn from its binomial law, then that many distinct
    pairs are drawn uniformly, which samples G(n, p) exactly without
    enumerating all pairs.
    """
    if n < 2:
        raise GraphValidationError(f"n must be >= 2, got {n}")
    if not 0 <= avg_degree < n:
        raise GraphValidationError(f"avg_degree must lie in [0, n), got {avg_degree}")
    rng = np.random.default_rng(seed)
    total = n * (n - 1) // 2
    p = avg_degree / (n - 1)
    m = int(rng.binomial(total, min(p, 1.0)))
    found = np.empty(0, dtype=np.int64)
    while found.size < m:
        need = m - found.size
        i = rng.integers(0, n, size=need + need // 8 + 16)
        j = rng.integers(0, n, size=i.size)
        ok = i != j
        lo, hi = np.minimum(i[ok], j[ok]), np.maximum(i[ok], j[ok])
        cand = lo * n + hi
        # keep first occurrences in draw order so the result is seed-determined
        merged = np.concatenate([found, cand])
        _, first = np.unique(merged, return_index=True)
        found = merged[np.sort(first)][:m]
    edges = np.stack([found // n, found % n], axis=1)
    feats = rng.standard_normal((n, feat_dim))
    return build_csr(edges, n, undirected=True, features=feats)


def connected_components(g: Graph) -> np.ndarray:
    a = sp.csr_matrix((np.ones(g.num_edges), g.col_indices, g.row_offsets), shape=(g.n, g.n))
    _, comp = sp.csgraph.connected_components(a, directed=True, connection="weak")
    return comp


def bfs_distances(g: Graph, sources) -> np.ndarray:
    """Multi-source hop distances; unreachable nodes get -1."""
    dist = np.full(g.n, -1, dtype=np.int64)
    q = deque()
    for s in sources:
        if dist[s] < 0:
            dist[s] = 0
            q.append(int(s))
    ro, ci = g.row_offsets, g.col_indices
    while q:
        v = q.popleft()
        for u in ci[ro[v]:ro[v + 1]]:
            if dist[u] < 0:
                dist[u] = dist[v] + 1
                q.append(int(u))
    return dist


@dataclass(frozen=True)
class Partition:
    cluster_id: np.ndarray
    k: int

    def __post_init__(self):
        cid = np.asarray(self.cluster_id, dtype=np.int64)
        if cid.size and (cid.min() < 0 or cid.max() >= self.k):
            raise GraphValidationError("cluster ids must lie in [0, k)")
        if np.bincount(cid, minlength=self.k).min(initial=1) == 0:
            raise GraphValidationError("partition has an empty cluster")
        object.__setattr__(self, "cluster_id", cid)

    def members(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.cluster_id == c)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.cluster_id, minlength=self.k)


def partition_bfs(g: Graph, k: int, seed: int = 0, seeds=None) -> Partition:
    """Balanced multi-source BFS growth from ``k`` seed nodes.

    At every step the smallest cluster (lowest id on ties) claims the next
    unassigned node from its BFS frontier.  A cluster whose frontier is
    exhausted claims the lowest-numbered unassigned node instead, so cluster
    sizes never differ by more than one.
    """
    if not 1 <= k <= g.n:
        raise GraphValidationError(f"k must lie in [1, {g.n}], got {k}")
    if seeds is None:
        seeds = np.random.default_rng(seed).choice(g.n, size=k, replace=False)
    seeds = [int(s) for s in seeds]
    if len(seeds) != k or len(set(seeds)) != k:
        raise GraphValidationError("need k distinct seeds")
    cid = np.full(g.n, -1, dtype=np.int64)
    frontier = []
    for c, s in enumerate(seeds):
        cid[s] = c
        frontier.append(deque(int(u) for u in g.neighbors(s)))
    heap = [(1, c) for c in range(k)]
    heapq.heapify(heap)
    remaining = g.n - k
    scan = 0
    while remaining:
        size, c = heapq.heappop(heap)
        q = frontier[c]
        v = -1
        while q:
            u = q.popleft()
            if cid[u] < 0:
                v = u
                break
        if v < 0:
            while cid[scan] >= 0:
                scan += 1
            v = scan
        cid[v] = c
        q.extend(int(u) for u in g.neighbors(v) if cid[u] < 0)
        remaining -= 1
        heapq.heappush(heap, (size + 1, c))
    return Partition(cid, k)


@dataclass(frozen=True)
class PlantedTask:
    labels: np.ndarray
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    histogram: np.ndarray
    community: np.ndarray = field(repr=False)
    local_class: np.ndarray = field(repr=False)
    global_class: np.ndarray = field(repr=False)
    features: np.ndarray | None = field(default=None, repr=False)

    def apply(self, g: Graph, n_classes: int) -> Graph:
        """``g`` with these labels and masks (and planted features, if any)."""
        g = g.with_task(self.labels, self.train_mask, self.val_mask, self.test_mask, n_classes)
        return g if self.features is None else replace(g, features=self.features)


def split_masks(n: int, rng: np.random.Generator, fractions=(0.5, 0.25, 0.25)):
    perm = rng.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    masks = [np.zeros(n, dtype=bool) for _ in range(3)]
    masks[0][perm[:n_train]] = True
    masks[1][perm[n_train:n_train + n_val]] = True
    masks[2][perm[n_train + n_val:]] = True
    return masks


def plant_task(g: Graph, n_classes: int, local_weight: float, global_weight: float, seed: int,
               community_size: int = 50, bucket_width: int = 1,
               feature_signal: float = 0.0) -> PlantedTask:
    """Synthetic labels mixing a local and a global structural signal.

    Local class: BFS communities of about ``community_size`` nodes, each
    mapped to a class at random.  Global class: for each of
    ceil(log2(n_classes)) anchor sets (one anchor per connected component),
    the parity of the hop-distance bucket gives one bit; the bits form a class
    id mod n_classes.  With the weights normalized to sum 1, the label is
    floor(w_local * local + w_global * global).

    With ``feature_signal > 0`` the returned features are the graph's
    features plus ``feature_signal`` times a random unit embedding of the
    node's local class plus one of its global class, so each node carries a
    noisy copy of both components.  Labels and masks do not depend on it.
    """
    if not 2 <= n_classes <= 16:
        raise GraphValidationError(f"n_classes must lie in [2, 16], got {n_classes}")
    if local_weight < 0 or global_weight < 0 or local_weight + global_weight <= 0:
        raise GraphValidationError("weights must be nonnegative with a positive sum")
    rng = np.random.default_rng(seed)
    k = max(1, min(g.n, g.n // community_size))
    community = partition_bfs(g, k, seed=int(rng.integers(2**31))).cluster_id
    local_class = rng.integers(0, n_classes, size=k)[community]

    comp = connected_components(g)
    comp_nodes = [np.flatnonzero(comp == c) for c in range(comp.max() + 1)]
    n_bits = int(np.ceil(np.log2(n_classes)))
    code = np.zeros(g.n, dtype=np.int64)
    for b in range(n_bits):
        anchors = [int(rng.choice(nodes)) for nodes in comp_nodes]
        dist = bfs_distances(g, anchors)
        code += ((dist // bucket_width) % 2) << b
    global_class = code % n_classes

    wl = local_weight / (local_weight + global_weight)
    wg = global_weight / (local_weight + global_weight)
    mixed = np.floor(wl * local_class + wg * global_class + 1e-9).astype(np.int64)
    labels = np.clip(mixed, 0, n_classes - 1)
    train, val, test = split_masks(g.n, rng)
    hist = np.bincount(labels, minlength=n_classes)
    feats = None
    if feature_signal:
        d = g.feat_dim
        emb = rng.standard_normal((2, n_classes, d))
        emb /= np.linalg.norm(emb, axis=2, keepdims=True)
        feats = g.features + feature_signal * (emb[0][local_class] + emb[1][global_class])
    return PlantedTask(labels, train, val, test, hist, community, local_class, global_class, feats)


def induced_subgraph(g: Graph, nodes) -> tuple[Graph, np.ndarray]:
    """Subgraph on ``nodes`` (sorted, relabeled 0..m-1); edges leaving it are dropped."""
    nodes = np.unique(np.asarray(nodes, dtype=np.int64))
    local = np.full(g.n, -1, dtype=np.int64)
    local[nodes] = np.arange(nodes.size)
    dst, src = g.edge_index()
    keep = (local[dst] >= 0) & (local[src] >= 0)
    new_dst, new_src = local[dst[keep]], local[src[keep]]
    ro = np.zeros(nodes.size + 1, dtype=np.int64)
    np.add.at(ro, new_dst + 1, 1)
    ro = np.cumsum(ro)
    ef = None if g.edge_features is None else g.edge_features[keep]
    sub = Graph(n=nodes.size, row_offsets=ro, col_indices=new_src, features=g.features[nodes],
                edge_features=ef, labels=g.labels[nodes], train_mask=g.train_mask[nodes],
                val_mask=g.val_mask[nodes], test_mask=g.test_mask[nodes], n_classes=g.n_classes)
    return sub, nodes


def random_node_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [np.sort(perm[i:i + batch_size]) for i in range(0, n, batch_size)]


# ---------------------------------------------------------------------------
# container


_HEADER = struct.Struct("<4sIQQQQQ")


def container_bytes(g: Graph) -> bytes:
    d_e = g.edge_dim
    parts = [
        _HEADER.pack(MAGIC, VERSION, g.n, g.num_edges, g.feat_dim, d_e, g.n_classes),
        g.row_offsets.astype("<u8").tobytes(),
        g.col_indices.astype("<u8").tobytes(),
        g.features.astype("<f8").tobytes(),
    ]
    if d_e:
        parts.append(g.edge_features.astype("<f8").tobytes())
    parts.append(g.labels.astype("<i8").tobytes())
    for m in (g.train_mask, g.val_mask, g.test_mask):
        parts.append(m.astype(np.uint8).tobytes())
    return b"".join(parts)


def parse_container(buf: bytes) -> Graph:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagic(bytes(buf[:4]))
    if len(buf) < _HEADER.size:
        raise TruncatedSection("header")
    _, version, n, e, d, d_e, n_classes = _HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise VersionMismatch(version)
    pos = _HEADER.size

    def take(section, count, dtype):
        nonlocal pos
        nbytes = count * np.dtype(dtype).itemsize
        if pos + nbytes > len(buf):
            raise TruncatedSection(section)
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos)
        pos += nbytes
        return arr

    ro = take("row_offsets", n + 1, "<u8").astype(np.int64)
    ci = take("col_indices", e, "<u8").astype(np.int64)
    feats = take("features", n * d, "<f8").reshape(n, d)
    ef = take("edge_features", e * d_e, "<f8").reshape(e, d_e) if d_e else None
    labels = take("labels", n, "<i8")
    masks = take("masks", 3 * n, np.uint8).reshape(3, n)
    if pos != len(buf):
        raise ContainerError(f"{len(buf) - pos} trailing bytes after masks")
    if np.any(masks > 1):
        raise ContainerError("mask bytes must be 0 or 1")
    return Graph(n=n, row_offsets=ro, col_indices=ci, features=feats.copy(), edge_features=None if ef is None else ef.copy(),
                 labels=labels.copy(), train_mask=masks[0] == 1, val_mask=masks[1] == 1,
                 test_mask=masks[2] == 1, n_classes=n_classes)


def write_container(g: Graph, path) -> None:
    Path(path).write_bytes(container_bytes(g))


def read_container(path) -> Graph:
    return parse_container(Path(path).read_bytes())
