"""Network assembly for the three attention-scheme orderings.

* ``global_to_local``: one global attention layer, then ``n`` local layers;
  fusion gates sit between consecutive layers and the last local layer is
  read out unfiltered.
* ``local_to_global``: ``n`` local layers (fusion between them), then the
  global layer.
* ``local_and_global``: local stack and global layer both read the input;
  outputs are summed.

Gate 1 always scores the first representation of the chain (h_TL, or the
first local output) and seeds η; gates 2..n filter the following layers.
With ``n == 1`` there is nothing to filter and fusion is inert.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import ndmath as nd
from .fusion import (FusionParams, FusionState, aggregate_beta, eta_accumulate, eta_update,
                     filter_apply, node_importance)
from .global_attention import AttentionParams, FFNParams, linear_attention
from .graphstore import Graph, Partition
from .local_gnn import GatedLayerParams, GcnLayerParams, GraphContext
from .ndmath import ParamStore, ShapeError, Tensor

SCHEMES = ("global_to_local", "local_to_global", "local_and_global")
BACKBONES = ("gcn", "gatedgcn")
READOUTS = ("node", "graph_mean")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    in_dim: int
    out_dim: int
    scheme: str = "global_to_local"
    fusion: bool = True
    n_local_layers: int = 2
    hidden: int = 64
    fusion_dim: int | None = None       # d', defaults to hidden
    gate_dim: int | None = None         # d'', defaults to ceil(hidden / 2)
    ffn_dim: int | None = None          # 0 = identity FFNs; defaults to hidden
    backbone: str = "gcn"
    readout: str = "node"
    edge_dim: int = 0
    seed: int = 0

    def resolved(self) -> "ModelConfig":
        c = ModelConfig(**asdict(self))
        if c.fusion_dim is None:
            c.fusion_dim = c.hidden
        if c.gate_dim is None:
            c.gate_dim = max(1, math.ceil(c.hidden / 2))
        if c.ffn_dim is None:
            c.ffn_dim = c.hidden
        return c

    def validate(self) -> "ModelConfig":
        c = self.resolved()
        bad = []
        if c.scheme not in SCHEMES:
            bad.append(f"scheme={c.scheme!r} (expected one of {SCHEMES})")
        if c.backbone not in BACKBONES:
            bad.append(f"backbone={c.backbone!r} (expected one of {BACKBONES})")
        if c.readout not in READOUTS:
            bad.append(f"readout={c.readout!r} (expected one of {READOUTS})")
        for name, lo in (("in_dim", 1), ("out_dim", 1), ("n_local_layers", 1), ("hidden", 1),
                         ("fusion_dim", 1), ("gate_dim", 1), ("ffn_dim", 0), ("edge_dim", 0)):
            v = getattr(c, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < lo:
                bad.append(f"{name}={v!r} (must be an integer >= {lo})")
        if bad:
            raise ConfigError("invalid model config: " + "; ".join(bad))
        return c

    @property
    def fusion_active(self) -> bool:
        return bool(self.fusion) and self.n_local_layers >= 2

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ForwardResult:
    reps: Tensor
    gammas: list[Tensor] = field(default_factory=list)
    filters_applied: int = 0
    eta: Tensor | None = None
    attention: dict = field(default_factory=dict)

    @property
    def gates_computed(self) -> int:
        return len(self.gammas)


class Model:
    """Structured views over a ParamStore for one ModelConfig."""

    def __init__(self, config: ModelConfig, params: ParamStore):
        self.config = config
        self.params = params

    # parameter views -------------------------------------------------
    def attention_params(self) -> AttentionParams:
        p = self.params
        ffn = None
        if "global.ffn.W1" in p:
            ffn = FFNParams(p["global.ffn.W1"], p["global.ffn.b1"], p["global.ffn.W2"], p["global.ffn.b2"])
        return AttentionParams(p["global.WQ"], p["global.WK"], p["global.WV"], ffn)

    def local_params(self, i: int):
        p, pre = self.params, f"local.{i}"
        if self.config.backbone == "gcn":
            ffn = None
            if f"{pre}.ffn.W1" in p:
                ffn = FFNParams(p[f"{pre}.ffn.W1"], p[f"{pre}.ffn.b1"], p[f"{pre}.ffn.W2"], p[f"{pre}.ffn.b2"])
            return GcnLayerParams(p[f"{pre}.W"], ffn)
        return GatedLayerParams(p[f"{pre}.U"], p[f"{pre}.V"], p[f"{pre}.A"], p[f"{pre}.B"], p[f"{pre}.C"],
                                p[f"{pre}.node_scale"], p[f"{pre}.node_shift"],
                                p[f"{pre}.edge_scale"], p[f"{pre}.edge_shift"])

    def fusion_params(self, l: int) -> FusionParams:
        p, pre = self.params, f"fusion.{l}"
        return FusionParams(p[f"{pre}.Wh"], p[f"{pre}.W1"], p[f"{pre}.b1"], p[f"{pre}.W2"], p[f"{pre}.b2"],
                            p[f"{pre}.Weta"] if l > 1 else None)

    # forward -----------------------------------------------------------
    def context(self, graph: Graph, partition: Partition | None = None) -> GraphContext:
        if graph.feat_dim != self.config.in_dim:
            raise ShapeError(f"graph has {graph.feat_dim}-d features, model expects {self.config.in_dim}")
        return GraphContext(graph, partition)

    def forward(self, data: Graph | GraphContext, partition: Partition | None = None) -> ForwardResult:
        ctx = data if isinstance(data, GraphContext) else self.context(data, partition)
        fn = {"global_to_local": forward_g2l, "local_to_global": forward_l2g,
              "local_and_global": forward_lag}[self.config.scheme]
        return fn(self, ctx)

    def logits(self, data: Graph | GraphContext, partition: Partition | None = None) -> Tensor:
        return readout(self.forward(data, partition).reps, self)


def build(config: ModelConfig) -> tuple[Model, ParamStore]:
    """Create parameters in a fixed order from ``config.seed``."""
    c = config.validate()
    store = ParamStore(seed=c.seed)
    d, ffn = c.hidden, c.ffn_dim or None
    global_in = d if c.scheme == "local_to_global" else c.in_dim
    AttentionParams.create(store, "global", global_in, d, ffn)
    for i in range(1, c.n_local_layers + 1):
        if c.backbone == "gcn":
            d_in = c.in_dim if (i == 1 and c.scheme != "global_to_local") else d
            GcnLayerParams.create(store, f"local.{i}", d_in, d, ffn)
        else:
            GatedLayerParams.create(store, f"local.{i}", d)
    if c.backbone == "gatedgcn":
        if c.scheme != "global_to_local":
            store.glorot("local.embed", c.in_dim, d)
        if c.edge_dim:
            store.glorot("local.edge_embed", c.edge_dim, d)
    if c.fusion_active:
        for l in range(1, c.n_local_layers + 1):
            FusionParams.create(store, f"fusion.{l}", d, c.fusion_dim, c.gate_dim, first=(l == 1))
    store.glorot("readout.W", d, c.out_dim)
    store.zeros("readout.b", 1, c.out_dim)
    return Model(c, store), store


class _FusionChain:
    """Gate/filter/accumulate bookkeeping along one sequential chain."""

    def __init__(self, model: Model, first: Tensor, result: ForwardResult):
        self.model = model
        self.result = result
        self.active = model.config.fusion_active
        self.state = None
        if self.active:
            p = model.fusion_params(1)
            start = FusionState.start(first)
            gamma = node_importance(aggregate_beta(start, first, p, 1), p)
            result.gammas.append(gamma)
            self.state = eta_update(start, first, gamma)

    def gate(self, h_gl: Tensor, l: int) -> Tensor:
        if not self.active:
            return h_gl
        p = self.model.fusion_params(l)
        gamma = node_importance(aggregate_beta(self.state, h_gl, p, l), p)
        filtered = filter_apply(h_gl, gamma)
        self.state = eta_accumulate(self.state, filtered)
        self.result.gammas.append(gamma)
        self.result.filters_applied += 1
        return filtered

    def finish(self):
        if self.state is not None:
            self.result.eta = self.state.eta


def _initial_edges(model: Model, ctx: GraphContext) -> Tensor | None:
    if model.config.backbone != "gatedgcn":
        return None
    if model.config.edge_dim:
        if ctx.edge_features is None or ctx.edge_features.cols != model.config.edge_dim:
            raise ShapeError("model expects edge features of width edge_dim")
        return nd.matmul(ctx.edge_features, model.params["local.edge_embed"])
    return nd.zeros(ctx.graph.num_edges, model.config.hidden)


def _local(model: Model, ctx: GraphContext, i: int, h: Tensor, e: Tensor | None):
    p = model.local_params(i)
    if model.config.backbone == "gcn":
        return ctx.gcn(h, p), e
    return ctx.gated(h, e, p)


def _local_chain(model: Model, ctx: GraphContext, result: ForwardResult) -> Tensor:
    """Local stack reading raw features; every layer after the first is gated."""
    e = _initial_edges(model, ctx)
    h = ctx.x
    if model.config.backbone == "gatedgcn":
        h = nd.matmul(h, model.params["local.embed"])
    h, e = _local(model, ctx, 1, h, e)
    chain = _FusionChain(model, h, result)
    for i in range(2, model.config.n_local_layers + 1):
        h_gl, e = _local(model, ctx, i, h, e)
        h = chain.gate(h_gl, i)
    chain.finish()
    return h


def forward_g2l(model: Model, ctx: GraphContext) -> ForwardResult:
    if model.config.scheme != "global_to_local":
        raise ShapeError("forward_g2l needs scheme=global_to_local")
    att = linear_attention(ctx.x, model.attention_params())
    result = ForwardResult(att.h, attention=att.diagnostics)
    n = model.config.n_local_layers
    h = att.h
    e = _initial_edges(model, ctx)
    chain = _FusionChain(model, h, result)
    for i in range(1, n + 1):
        h_gl, e = _local(model, ctx, i, h, e)
        # gate index of local layer i is i + 1; the last layer stays unfiltered
        h = chain.gate(h_gl, i + 1) if i < n else h_gl
    chain.finish()
    result.reps = h
    return result


def forward_l2g(model: Model, ctx: GraphContext) -> ForwardResult:
    if model.config.scheme != "local_to_global":
        raise ShapeError("forward_l2g needs scheme=local_to_global")
    result = ForwardResult(ctx.x)
    h = _local_chain(model, ctx, result)
    att = linear_attention(h, model.attention_params())
    result.reps, result.attention = att.h, att.diagnostics
    return result


def forward_lag(model: Model, ctx: GraphContext) -> ForwardResult:
    if model.config.scheme != "local_and_global":
        raise ShapeError("forward_lag needs scheme=local_and_global")
    result = ForwardResult(ctx.x)
    h_local = _local_chain(model, ctx, result)
    att = linear_attention(ctx.x, model.attention_params())
    result.reps, result.attention = nd.add(h_local, att.h), att.diagnostics
    return result


def readout(reps: Tensor, model: Model) -> Tensor:
    """Node logits (N x C), or a 1 x C prediction from the mean node representation."""
    w, b = model.params["readout.W"], model.params["readout.b"]
    if model.config.readout == "graph_mean":
        reps = nd.mean_rows(reps)
    return nd.add_row(nd.matmul(reps, w), b)


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"G2LP"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(params: ParamStore) -> bytes:
    out = [CKPT_MAGIC, struct.pack("<IQ", CKPT_VERSION, len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw + struct.pack("<QQ", t.rows, t.cols))
        out.append(t.data.astype("<f8").tobytes())
    return b"".join(out)


def parse_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad magic: expected {CKPT_MAGIC!r}, found {bytes(buf[:4])!r}")
    if len(buf) < 16:
        raise CheckpointError("truncated section: header")
    version, count = struct.unpack_from("<IQ", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"version mismatch: expected {CKPT_VERSION}, found {version}")
    pos, entries = 16, {}
    for _ in range(count):
        try:
            (length,) = struct.unpack_from("<I", buf, pos)
            name = buf[pos + 4:pos + 4 + length].decode("utf-8")
            pos += 4 + length
            rows, cols = struct.unpack_from("<QQ", buf, pos)
            pos += 16
        except struct.error:
            raise CheckpointError("truncated section: entry header") from None
        nbytes = rows * cols * 8
        if pos + nbytes > len(buf):
            raise CheckpointError(f"truncated section: {name}")
        entries[name] = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).copy()
        pos += nbytes
    if pos != len(buf):
        raise CheckpointError("trailing bytes after last entry")
    return entries


def save_checkpoint(params: ParamStore, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path, params: ParamStore | None = None) -> dict[str, np.ndarray]:
    """Read a checkpoint; when ``params`` is given, load the values into it."""
    entries = parse_checkpoint(Path(path).read_bytes())
    if params is not None:
        missing = set(params.names()) - set(entries)
        if missing:
            raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)}")
        params.load(entries)
    return entries
