"""Command-line front end: gen, train, ablate, verify, bench, inspect.

Exit codes: 0 success, 1 verification failure, 2 usage/config error,
3 training divergence, 4 insufficient data.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import benchkit, verify
from .graphstore import (ContainerError, Graph, GraphValidationError, generate_er, plant_task,
                         read_container, write_container)
from .model import ConfigError, ModelConfig, build, save_checkpoint
from .trainkit import TrainConfig, TrainingDiverged, run_id_for, train

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_DIVERGED, EXIT_DATA = 0, 1, 2, 3, 4

log = logging.getLogger("g2lformer")


class UsageError(Exception):
    """Bad flags or config; maps to exit code 2."""


# ---------------------------------------------------------------------------
# config


@dataclass
class GeneratorSpec:
    nodes: int
    avg_degree: float = 10.0
    feat_dim: int = 128
    seed: int = 0
    n_classes: int = 4
    local_weight: float = 0.5
    global_weight: float = 0.5
    feature_signal: float = 0.0


@dataclass
class RunConfig:
    data: dict
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)
    seeds: list | None = None           # defaults to [train.seed]

    SECTIONS = ("data", "model", "train", "output", "seeds")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise UsageError("config must be a JSON object")
        unknown = set(d) - set(cls.SECTIONS)
        if unknown:
            raise UsageError(f"unknown config sections: {sorted(unknown)}")
        if "data" not in d:
            raise UsageError("config needs a 'data' section")
        cfg = cls(**d)
        if cfg.seeds is None:
            cfg.seeds = [cfg.train.get("seed", 0)]
        data_keys = set(cfg.data)
        if data_keys - {"path", "generator"} or len(data_keys) != 1:
            raise UsageError("data section needs exactly one of 'path' or 'generator'")
        if "generator" in cfg.data:
            _strict(GeneratorSpec, cfg.data["generator"], "data.generator")
        if set(cfg.output) - {"directory"}:
            raise UsageError(f"unknown output keys: {sorted(set(cfg.output) - {'directory'})}")
        try:
            TrainConfig.from_dict(cfg.train)
            ModelConfig.from_dict({"in_dim": 1, "out_dim": 1, **cfg.model})
        except (ValueError, TypeError) as exc:
            raise UsageError(str(exc)) from None
        if not cfg.seeds or not all(isinstance(s, int) and s >= 0 for s in cfg.seeds):
            raise UsageError("seeds must be a nonempty list of nonnegative integers")
        return cfg

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.SECTIONS}


def _strict(cls, d, where: str):
    if not isinstance(d, dict):
        raise UsageError(f"{where} must be an object")
    known = {f.name for f in fields(cls)}
    if set(d) - known:
        raise UsageError(f"unknown {where} keys: {sorted(set(d) - known)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise UsageError(f"{where}: {exc}") from None


def load_run_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        return RunConfig.from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None


def load_data(cfg: RunConfig, base: Path | None = None) -> Graph:
    if "path" in cfg.data:
        path = Path(cfg.data["path"])
        if base is not None and not path.is_absolute():
            path = base / path
        if not path.exists():
            raise UsageError(f"data file not found: {path}")
        return read_container(path)
    spec = _strict(GeneratorSpec, cfg.data["generator"], "data.generator")
    return generate(spec)


def generate(spec: GeneratorSpec, plant: bool = True) -> Graph:
    if spec.nodes < 2:
        raise GraphValidationError(f"nodes must be >= 2, got {spec.nodes}")
    g = generate_er(spec.nodes, spec.avg_degree, spec.feat_dim, spec.seed)
    if plant:
        task = plant_task(g, spec.n_classes, spec.local_weight, spec.global_weight, spec.seed,
                          feature_signal=spec.feature_signal)
        g = task.apply(g, spec.n_classes)
    return g


def output_root(args) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(os.environ.get("G2L_OUT", "runs"))


def model_config_for(cfg: RunConfig, g: Graph, seed: int) -> ModelConfig:
    if g.n_classes < 1 or not g.train_mask.any():
        raise UsageError("data has no labels or training nodes")
    d = {"seed": seed, **cfg.model, "in_dim": g.feat_dim, "out_dim": g.n_classes}
    if g.edge_dim and "edge_dim" not in cfg.model:
        d["edge_dim"] = g.edge_dim
    try:
        return ModelConfig.from_dict(d).validate()
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def _echo(cfg: RunConfig, seed: int) -> dict:
    """Config record for one seed; its hash names the run."""
    return {**cfg.to_dict(), "seeds": [seed]}


def _run_one(cfg: RunConfig, g: Graph, seed: int):
    mcfg = model_config_for(cfg, g, seed)
    tcfg = TrainConfig.from_dict({**cfg.train, "seed": seed})
    model, params = build(mcfg)
    return train(model, g, tcfg, run_config=_echo(cfg, seed)), params


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    spec = GeneratorSpec(args.nodes, args.avg_degree, args.feat_dim, args.seed,
                         args.plant_task or 4, args.local_weight, args.global_weight, args.feature_signal)
    g = generate(spec, plant=args.plant_task is not None)
    target = args.out_file or args.out
    if not target:
        raise UsageError("gen needs an output file (--out FILE)")
    out = Path(target)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_container(g, out)
    print(_summary_line(g))
    return EXIT_OK


def _summary_line(g: Graph) -> str:
    mean_deg = g.num_edges / g.n
    hist = np.bincount(g.labels[g.labels >= 0], minlength=g.n_classes).tolist() if g.n_classes else []
    return (f"n={g.n} edges={g.num_edges // 2} directed_entries={g.num_edges} mean_degree={mean_deg:.3f} "
            f"feat_dim={g.feat_dim} classes={g.n_classes} histogram={hist}")


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    g = load_data(cfg, Path(args.config).parent)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    run_dir = _run_dir(args, cfg, seed)
    try:
        report, params = _run_one(cfg, g, seed)
    except TrainingDiverged as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    report.write(run_dir)
    save_checkpoint(params, run_dir / "checkpoint.g2lp")
    s = report.summary
    print(f"run {report.run_id}: best_val_epoch={s['best_val_epoch']} best_val={_fmt(s['best_val_metric'])} "
          f"test_at_best_val={_fmt(s['test_at_best_val'])} final_loss={_fmt(s['final_loss'])} -> {run_dir}")
    return EXIT_OK


def _run_dir(args, cfg: RunConfig, seed: int) -> Path:
    root = Path(cfg.output["directory"]) if "directory" in cfg.output and not args.out else output_root(args)
    return root / run_id_for(_echo(cfg, seed))


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


ABLATION_SCHEMES = ("global_to_local", "local_to_global", "local_and_global")


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config)
    g = load_data(cfg, Path(args.config).parent)
    root = Path(cfg.output["directory"]) if "directory" in cfg.output and not args.out else output_root(args)
    run_dir = root / ("ablate-" + run_id_for(cfg.to_dict()))
    cells = run_ablation(cfg, g, run_dir)
    csv_path, txt_path = write_ablation(cells, run_dir)
    print(txt_path.read_text(), end="")
    print(f"-> {csv_path}")
    return EXIT_OK


def run_ablation(cfg: RunConfig, g: Graph, run_dir: Path) -> dict:
    """Train every scheme x fusion cell over all seeds; per-run reports land in ``run_dir/runs``."""
    cells = {}
    for scheme in ABLATION_SCHEMES:
        for fusion in (True, False):
            sub = RunConfig(cfg.data, {**cfg.model, "scheme": scheme, "fusion": fusion},
                            cfg.train, cfg.output, cfg.seeds)
            values, diverged = [], False
            for seed in cfg.seeds:
                try:
                    report, _ = _run_one(sub, g, seed)
                except TrainingDiverged:
                    diverged = True
                    break
                report.write(run_dir / "runs" / f"{scheme}-fusion{int(fusion)}-seed{seed}")
                values.append(report.summary["test_at_best_val"])
            cells[(scheme, fusion)] = None if diverged or None in values else values
    return cells


def write_ablation(cells: dict, run_dir: Path) -> tuple[Path, Path]:
    run_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for scheme in ABLATION_SCHEMES:
        row = [scheme]
        for fusion in (True, False):
            vals = cells[(scheme, fusion)]
            if vals is None:
                row += ["diverged", "diverged"]
            else:
                row += [f"{np.mean(vals):.6f}", f"{np.std(vals):.6f}"]
        rows.append(row)
    header = ["scheme", "fusion_on_mean", "fusion_on_std", "fusion_off_mean", "fusion_off_std"]
    csv_path = run_dir / "ablation.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(wd) for c, wd in zip(r, widths)).rstrip() for r in [header] + rows]
    txt_path = run_dir / "ablation.txt"
    txt_path.write_text("\n".join(lines) + "\n")
    return csv_path, txt_path


def cmd_verify(args) -> int:
    report = verify.run_all(break_attention=args.break_attention, seed=args.seed or 0, echo=print)
    print("ALL PASS" if report.passed else "VERIFICATION FAILED")
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_bench(args) -> int:
    sizes = args.sizes
    cfg = ModelConfig(in_dim=args.feat_dim, out_dim=args.classes, hidden=args.hidden,
                      n_local_layers=args.layers, scheme=args.scheme, seed=args.seed or 0)
    rows = benchkit.run_scaling(sizes, cfg, seed=args.seed or 0, avg_degree=args.avg_degree,
                                feat_dim=args.feat_dim, epochs=args.epochs, warmup=args.warmup)
    run_dir = output_root(args) / ("bench-" + run_id_for({"sizes": sizes, **asdict(cfg),
                                                          "avg_degree": args.avg_degree,
                                                          "epochs": args.epochs, "warmup": args.warmup}))
    path = benchkit.write_scaling_csv(rows, run_dir / "scaling.csv")
    for r in rows:
        if r.failed:
            print(f"n={r.n}: FAILED ({r.failed})")
    ok = [r for r in rows if r.failed is None]
    if len(ok) < 3:
        print("insufficient points: need at least 3 surviving sizes", file=sys.stderr)
        return EXIT_DATA
    xs = [r.n for r in ok]
    for label, ys in (("time", [r.epoch_seconds for r in ok]), ("flops", [r.flops for r in ok]),
                      ("bytes", [r.activation_bytes for r in ok])):
        slope, intercept, r2 = benchkit.fit_linear(xs, ys)
        print(f"{label}_vs_n: slope={slope:.6g} intercept={intercept:.6g} r2={r2:.6f}")
    print(f"-> {path}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    g = read_container(args.path)
    print(_summary_line(g))
    deg = g.degrees()
    print(f"degree min={deg.min()} max={deg.max()} edge_dim={g.edge_dim} "
          f"train={int(g.train_mask.sum())} val={int(g.val_mask.sum())} test={int(g.test_mask.sum())}")
    return EXIT_OK


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _sizes(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"sizes must be comma-separated integers, got {text!r}") from None


def make_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run config (JSON)")
    common.add_argument("--out", help="output root (overrides G2L_OUT)")
    common.add_argument("--seed", type=int, default=None, help="seed (unsigned 64-bit)")

    p = _Parser(prog="g2lformer", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="generate an ER graph container")
    g.add_argument("--nodes", type=int, required=True)
    g.add_argument("--avg-degree", type=float, default=10.0)
    g.add_argument("--feat-dim", type=int, default=128)
    g.add_argument("--plant-task", type=int, metavar="CLASSES", default=None)
    g.add_argument("--local-weight", type=float, default=0.5)
    g.add_argument("--global-weight", type=float, default=0.5)
    g.add_argument("--feature-signal", type=float, default=0.0)
    g.add_argument("out_file", nargs="?", metavar="FILE", help="output container (or --out FILE)")

    t = sub.add_parser("train", parents=[common], help="train one model from a run config")
    a = sub.add_parser("ablate", parents=[common], help="scheme x fusion ablation table")
    for sp in (t, a):
        sp.add_argument("config_pos", nargs="?", metavar="CONFIG")

    v = sub.add_parser("verify", parents=[common], help="run the self-verification suites")
    v.add_argument("--break-attention", action="store_true", help="inject a fault into linear attention")

    b = sub.add_parser("bench", parents=[common], help="wall-time / FLOP scaling on ER graphs")
    b.add_argument("--sizes", type=_sizes, required=True)
    b.add_argument("--avg-degree", type=float, default=10.0)
    b.add_argument("--feat-dim", type=int, default=128)
    b.add_argument("--hidden", type=int, default=64)
    b.add_argument("--layers", type=int, default=2)
    b.add_argument("--classes", type=int, default=4)
    b.add_argument("--scheme", default="global_to_local")
    b.add_argument("--epochs", type=int, default=5)
    b.add_argument("--warmup", type=int, default=2)

    i = sub.add_parser("inspect", parents=[common], help="print container statistics")
    i.add_argument("path")
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "ablate": cmd_ablate, "verify": cmd_verify,
            "bench": cmd_bench, "inspect": cmd_inspect}


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
        if args.command in ("train", "ablate"):
            args.config = args.config_pos or args.config
            if not args.config:
                raise UsageError(f"{args.command} needs a config file")
        if args.command == "gen" and args.seed is None:
            args.seed = 0
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GraphValidationError, ContainerError, ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except benchkit.ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
