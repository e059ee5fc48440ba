"""Self-verification suites: attention oracle, gradients, fusion, cluster mode, metrics.

Each suite returns a :class:`SuiteResult` with the worst error it observed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import ndmath as nd
from . import trainkit as tk
from .fusion import FusionParams, FusionState, eta_update, node_importance
from .global_attention import AttentionParams, linear_attention, quadratic_oracle
from .graphstore import Partition, build_csr, generate_er
from .model import ModelConfig, SCHEMES, build, readout
from .ndmath import DegeneracyError, Tensor


@dataclass
class SuiteResult:
    name: str
    passed: bool
    max_error: float
    tolerance: float
    detail: str = ""
    cases: int = 0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: max_error={self.max_error:.3e} tol={self.tolerance:.0e} "
                f"cases={self.cases}" + (f" ({self.detail})" if self.detail else ""))


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(b))), 1e-300)
    return float(np.max(np.abs(a - b))) / scale


# ---------------------------------------------------------------------------
# attention


def _broken_attention(x: Tensor, p: AttentionParams):
    """Fault injection: inflate the pre-FFN output by 0.1%."""
    out = linear_attention(x, p)
    return type(out)(out.h, nd.scale(out.pre_ffn, 1.0 + 1e-3), out.diagnostics)


def attention_suite(configs: int = 100, tolerance: float = 1e-10, seed: int = 0,
                    break_attention: bool = False) -> SuiteResult:
    """Linear attention vs the explicit N x N oracle on random (N, d) draws."""
    rng = np.random.default_rng(seed)
    attn = _broken_attention if break_attention else linear_attention
    worst, done, degenerate = 0.0, 0, 0
    while done < configs:
        n = int(rng.integers(1, 65))
        d_in = int(rng.integers(2, 17))
        d = int(rng.integers(2, 17))
        store = nd.ParamStore(int(rng.integers(2**32)))
        p = AttentionParams.create(store, "att", d_in, d, 0)
        x = Tensor(rng.standard_normal((n, d_in)))
        try:
            fast = attn(x, p).pre_ffn.data
        except DegeneracyError:
            degenerate += 1
            continue
        slow = quadratic_oracle(x, p).pre_ffn.data
        worst = max(worst, _rel(fast, slow))
        done += 1
    detail = f"{degenerate} degenerate draws resampled" if degenerate else ""
    return SuiteResult("attention_equivalence", worst <= tolerance, worst, tolerance, detail, done)


# ---------------------------------------------------------------------------
# gradients


def gradient_suite(tolerance: float = 1e-5, n_nodes: int = 12, hidden: int = 8, seed: int = 0,
                   backbone: str = "gcn", samples: int = 32) -> SuiteResult:
    """grad_check on every scheme x fusion setting; ``samples`` caps entries checked per tensor."""
    g = generate_er(n_nodes, 3.0, hidden, seed)
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, size=n_nodes)
    worst, failed, skipped = 0.0, [], 0
    cases = 0
    for scheme in SCHEMES:
        for fusion in (True, False):
            cfg = ModelConfig(in_dim=hidden, out_dim=3, scheme=scheme, fusion=fusion, n_local_layers=2,
                              hidden=hidden, backbone=backbone, seed=seed)
            model, store = build(cfg)
            # move zero-initialized biases off their initial values
            for t in store.values():
                t.data = t.data + 0.1 * rng.standard_normal(t.shape)
            ctx = model.context(g)

            def loss_fn():
                return tk.cross_entropy(readout(model.forward(ctx).reps, model), labels, np.ones(n_nodes, bool))

            rep = nd.grad_check(loss_fn, store, tolerance=tolerance, samples=samples, seed=seed)
            worst = max(worst, rep.max_rel_error)
            skipped += rep.skipped_kinks
            cases += 1
            if not rep.passed:
                failed.append(f"{scheme}/fusion={fusion}")
    detail = ("failed: " + ", ".join(failed)) if failed else f"{skipped} kink entries skipped"
    return SuiteResult(f"gradients[{backbone}]", not failed, worst, tolerance, detail, cases)


# ---------------------------------------------------------------------------
# fusion


def fusion_suite(samples: int = 1000, tolerance: float = 1e-12, seed: int = 0) -> SuiteResult:
    """γ range, the zero-parameter midpoint, and η telescoping under γ ≡ 1."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    problems = []

    # γ ∈ (0, 1) on random inputs; float64 sigmoid itself rounds to 1.0 past logit ~36.7
    for i in range(samples):
        n, d, df, dg = (int(rng.integers(1, 9)), int(rng.integers(1, 9)),
                        int(rng.integers(1, 9)), int(rng.integers(1, 9)))
        store = nd.ParamStore(int(rng.integers(2**32)))
        p = FusionParams.create(store, "f", d, df, dg, first=False)
        for t in store.values():
            t.data = rng.standard_normal(t.shape)
        beta = Tensor(rng.standard_normal((n, 2 * df)) * rng.choice([0.1, 1.0]))
        gamma = node_importance(beta, p).data
        if not np.all((gamma > 0.0) & (gamma < 1.0)):
            problems.append("gamma outside (0,1)")
            break

    # all gate parameters zero -> γ = 0.5 exactly
    store = nd.ParamStore(0)
    p = FusionParams.create(store, "f", 4, 4, 2, first=False)
    for t in store.values():
        t.data = np.zeros(t.shape)
    gamma = node_importance(Tensor(rng.standard_normal((7, 8))), p).data
    if not np.all(gamma == 0.5):
        problems.append("zero parameters do not give gamma = 0.5")

    # γ ≡ 1 telescoping: η_final = h_TL + Σ h^l
    for _ in range(20):
        n, d, layers = int(rng.integers(1, 20)), int(rng.integers(1, 10)), int(rng.integers(1, 6))
        h_tl = rng.standard_normal((n, d))
        hs = [rng.standard_normal((n, d)) for _ in range(layers)]
        state = FusionState.start(Tensor(h_tl))
        for h in hs:
            state = eta_update(state, Tensor(h), Tensor(np.ones((n, 1))))
        expected = h_tl.copy()
        for h in hs:
            expected = expected + h
        worst = max(worst, float(np.max(np.abs(state.eta.data - expected))))
        if state.layer != layers + 1:
            problems.append("layer index not advanced")

    # the same identity through a full model with saturated gates (W2 = 0, b2 large)
    g = generate_er(30, 4.0, 6, seed)
    for scheme in SCHEMES:
        cfg = ModelConfig(in_dim=6, out_dim=2, scheme=scheme, n_local_layers=3, hidden=6, seed=seed)
        model, store = build(cfg)
        for name, t in store.items():
            if name.startswith("fusion.") and name.endswith(".W2"):
                t.data = np.zeros(t.shape)
            elif name.startswith("fusion.") and name.endswith(".b2"):
                t.data = np.full(t.shape, 1000.0)
        assert expit(1000.0) == 1.0
        res = model.forward(g)
        gammas = [gm.data for gm in res.gammas]
        if not all(np.all(gm == 1.0) for gm in gammas):
            problems.append(f"{scheme}: saturated gates are not exactly 1")
            continue
        # chain layout: η = first + first + Σ (gated layers); with γ ≡ 1 every filter is the identity
        worst = max(worst, _telescoping_residual(model, g, res))

    passed = not problems and worst <= tolerance
    return SuiteResult("fusion_invariants", passed, worst, tolerance, "; ".join(problems), samples)


def _telescoping_residual(model, g, res) -> float:
    """Recompute the chain by hand with γ ≡ 1 and compare its η with the model's."""
    from .model import _initial_edges, _local

    ctx = model.context(g)
    cfg = model.config
    e = _initial_edges(model, ctx)
    if cfg.scheme == "global_to_local":
        h = linear_attention(ctx.x, model.attention_params()).h
        first = h.data
        parts = []
        for i in range(1, cfg.n_local_layers + 1):
            h, e = _local(model, ctx, i, h, e)
            if i < cfg.n_local_layers:
                parts.append(h.data)
    else:
        h = ctx.x
        if cfg.backbone == "gatedgcn":
            h = nd.matmul(h, model.params["local.embed"])
        h, e = _local(model, ctx, 1, h, e)
        first = h.data
        parts = []
        for i in range(2, cfg.n_local_layers + 1):
            h, e = _local(model, ctx, i, h, e)
            parts.append(h.data)
    expected = first + first
    for part in parts:
        expected = expected + part
    return float(np.max(np.abs(res.eta.data - expected)))


# ---------------------------------------------------------------------------
# cluster mode


def two_component_graph(size: int = 50, feat_dim: int = 6, seed: int = 0):
    """Two disjoint ER components of ``size`` nodes and the partition along them."""
    a = generate_er(size, 4.0, feat_dim, seed)
    b = generate_er(size, 4.0, feat_dim, seed + 1)
    da, sa = a.edge_index()
    db, sb = b.edge_index()
    edges = np.concatenate([np.stack([da, sa], 1), np.stack([db + size, sb + size], 1)])
    feats = np.vstack([a.features, b.features])
    g = build_csr(edges, 2 * size, undirected=True, features=feats)
    part = Partition(np.repeat(np.arange(2), size), 2)
    return g, part


def cluster_suite(tolerance: float = 1e-12, seed: int = 0) -> SuiteResult:
    g, part = two_component_graph(seed=seed)
    worst, cases = 0.0, 0
    for scheme in SCHEMES:
        for backbone in ("gcn", "gatedgcn"):
            for fusion in (True, False):
                cfg = ModelConfig(in_dim=g.feat_dim, out_dim=3, scheme=scheme, fusion=fusion,
                                  backbone=backbone, hidden=8, seed=seed)
                model, _ = build(cfg)
                full = readout(model.forward(g).reps, model).data
                clustered = readout(model.forward(g, part).reps, model).data
                worst = max(worst, float(np.max(np.abs(full - clustered))))
                cases += 1
    return SuiteResult("cluster_equivalence", worst <= tolerance, worst, tolerance, "", cases)


# ---------------------------------------------------------------------------
# metrics


_HAND_CASES = [
    ("accuracy", np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.3, 0.7]]), np.array([0, 1, 1, 1]), 0.75),
    ("mae", np.array([1.0, 2.0, 3.0]), np.array([1.5, 2.0, 1.0]), 2.5 / 3),
    ("macro_f1", np.array([0, 0, 1, 1, 2]), np.array([0, 1, 1, 1, 2]), (2 / 3 + 0.8 + 1.0) / 3),
    ("ap", np.array([0.9, 0.8, 0.7, 0.6]), np.array([1, 0, 1, 0]), (1.0 + 2 / 3) / 2),
    ("roc_auc", np.array([0.1, 0.4, 0.35, 0.8]), np.array([0, 0, 1, 1]), 0.75),
]


def metric_suite(instances: int = 200, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst, problems = 0.0, []
    done = 0
    while done < instances:
        m = int(rng.integers(2, 101))
        labels = rng.integers(0, 2, size=m)
        if labels.min() == labels.max():
            continue
        # coarse scores so that ties are frequent
        scores = rng.integers(0, int(rng.integers(2, 12)), size=m).astype(float)
        diff = abs(tk.roc_auc(scores, labels) - tk.roc_auc_pairwise(scores, labels))
        worst = max(worst, diff)
        done += 1
    if worst != 0.0:
        problems.append("roc_auc differs from the pairwise statistic")
    for kind, scores, labels, expected in _HAND_CASES:
        got = tk.metric(kind, scores, labels)
        err = abs(got - expected)
        if err > 1e-12:
            problems.append(f"{kind}: {got} != {expected}")
    return SuiteResult("metric_oracles", not problems, worst, 0.0, "; ".join(problems), instances)


# ---------------------------------------------------------------------------


@dataclass
class VerifyReport:
    suites: list[SuiteResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.suites)


def run_all(break_attention: bool = False, seed: int = 0, echo=None) -> VerifyReport:
    report = VerifyReport()
    runners = [
        lambda: attention_suite(seed=seed, break_attention=break_attention),
        lambda: gradient_suite(seed=seed, backbone="gcn"),
        lambda: gradient_suite(seed=seed, backbone="gatedgcn"),
        lambda: fusion_suite(seed=seed),
        lambda: cluster_suite(seed=seed),
        lambda: metric_suite(seed=seed),
    ]
    for run in runners:
        res = run()
        report.suites.append(res)
        if echo is not None:
            echo(res.line())
    return report
