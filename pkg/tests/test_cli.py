"""End-to-end tests of the command-line entry point."""

import json

import pytest

from g2lformer import graphstore as gs
from g2lformer.cli import EXIT_DATA, EXIT_DIVERGED, EXIT_OK, EXIT_USAGE, EXIT_VERIFY, main
from g2lformer.model import load_checkpoint


def write_config(tmp_path, data=None, model=None, train=None, **extra):
    cfg = {
        "data": data or {"generator": {"nodes": 60, "avg_degree": 4, "feat_dim": 6, "seed": 1,
                                       "n_classes": 3, "feature_signal": 1.0}},
        "model": model or {"hidden": 8, "n_local_layers": 2},
        "train": train or {"epochs": 5, "lr": 0.01},
        **extra,
    }
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    return path


class TestGen:
    def test_same_seed_same_bytes(self, tmp_path, capsys):
        a, b = tmp_path / "a.g2l", tmp_path / "b.g2l"
        for p in (a, b):
            assert main(["gen", "--nodes", "200", "--avg-degree", "6", "--feat-dim", "4",
                         "--seed", "3", "--plant-task", "3", str(p)]) == EXIT_OK
        assert a.read_bytes() == b.read_bytes()
        g = gs.read_container(a)
        assert g.n == 200 and g.n_classes == 3
        assert "n=200" in capsys.readouterr().out

    def test_out_flag(self, tmp_path):
        target = tmp_path / "g.g2l"
        assert main(["gen", "--nodes", "10", "--avg-degree", "2", "--feat-dim", "2", "--out", str(target)]) == 0
        assert target.exists()

    @pytest.mark.parametrize("argv", [
        ["gen", "--nodes", "1", "x.g2l"],
        ["gen", "--nodes", "10", "--avg-degree", "20", "x.g2l"],
        ["gen", "--nodes", "10", "--seed", "-1", "x.g2l"],
        ["gen", "--bogus"],
        ["nonexistent"],
    ])
    def test_usage_errors(self, tmp_path, argv, monkeypatch):
        monkeypatch.chdir(tmp_path)
        assert main(argv) == EXIT_USAGE


class TestInspect:
    def test_prints_summary(self, tmp_path, capsys):
        path = tmp_path / "g.g2l"
        main(["gen", "--nodes", "30", "--avg-degree", "4", "--feat-dim", "3", "--plant-task", "2", str(path)])
        capsys.readouterr()
        assert main(["inspect", str(path)]) == EXIT_OK
        out = capsys.readouterr().out
        assert "n=30" in out and "classes=2" in out and "degree min=" in out

    def test_bad_container(self, tmp_path):
        path = tmp_path / "junk.g2l"
        path.write_bytes(b"not a container at all")
        assert main(["inspect", str(path)]) == EXIT_USAGE


class TestTrain:
    def test_writes_report_and_checkpoint(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        out = tmp_path / "runs"
        assert main(["train", str(cfg), "--out", str(out)]) == EXIT_OK
        (run_dir,) = out.iterdir()
        report = json.loads((run_dir / "report.json").read_text())
        assert len(report["epochs"]) == 5 and report["run_id"] == run_dir.name
        assert (run_dir / "report.csv").exists()
        assert load_checkpoint(run_dir / "checkpoint.g2lp")
        assert run_dir.name in capsys.readouterr().out

    def test_rerun_is_identical(self, tmp_path):
        cfg = write_config(tmp_path)
        outs = []
        for name in ("a", "b"):
            main(["train", str(cfg), "--out", str(tmp_path / name)])
            (run_dir,) = (tmp_path / name).iterdir()
            report = json.loads((run_dir / "report.json").read_text())
            for e in report["epochs"]:
                e.pop("seconds")
            report["summary"].pop("seconds_total")
            outs.append((report, (run_dir / "checkpoint.g2lp").read_bytes()))
        assert outs[0] == outs[1]

    def test_env_output_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv("G2L_OUT", str(tmp_path / "env"))
        assert main(["train", str(write_config(tmp_path))]) == EXIT_OK
        assert len(list((tmp_path / "env").iterdir())) == 1

    def test_data_from_container_path(self, tmp_path):
        main(["gen", "--nodes", "40", "--avg-degree", "4", "--feat-dim", "3", "--plant-task", "2",
              str(tmp_path / "g.g2l")])
        cfg = write_config(tmp_path, data={"path": "g.g2l"})
        assert main(["train", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exit_code(self, tmp_path):
        cfg = write_config(tmp_path, train={"epochs": 30, "lr": 1e300})
        assert main(["train", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_DIVERGED

    @pytest.mark.parametrize("bad", [
        {"data": {}},
        {"model": {"hidden": 8, "heads": 2}},
        {"train": {"epochs": 0}},
        {"extras": {}},
    ])
    def test_bad_config(self, tmp_path, bad):
        cfg = write_config(tmp_path)
        doc = json.loads(cfg.read_text())
        doc.update(bad)
        cfg.write_text(json.dumps(doc))
        assert main(["train", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_USAGE

    def test_missing_config(self, tmp_path):
        assert main(["train"]) == EXIT_USAGE
        assert main(["train", str(tmp_path / "missing.json")]) == EXIT_USAGE


class TestAblate:
    def test_table(self, tmp_path, capsys):
        cfg = write_config(tmp_path, train={"epochs": 3, "lr": 0.01}, seeds=[0, 1])
        assert main(["ablate", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
        (run_dir,) = (tmp_path / "o").iterdir()
        lines = (run_dir / "ablation.csv").read_text().strip().splitlines()
        assert lines[0].startswith("scheme,fusion_on_mean") and len(lines) == 1 + 3
        assert len(list((run_dir / "runs").iterdir())) == 12
        assert "local_to_global" in capsys.readouterr().out


class TestBench:
    def test_scaling_csv(self, tmp_path, capsys):
        argv = ["bench", "--sizes", "40,80,160", "--avg-degree", "4", "--feat-dim", "4", "--hidden", "4",
                "--epochs", "1", "--warmup", "0", "--out", str(tmp_path)]
        assert main(argv) == EXIT_OK
        out = capsys.readouterr().out
        assert "time_vs_n" in out and "flops_vs_n" in out
        (run_dir,) = tmp_path.iterdir()
        assert (run_dir / "scaling.csv").read_text().startswith("n,edges,epoch_seconds,flops,activation_bytes")

    def test_too_few_sizes(self, tmp_path):
        argv = ["bench", "--sizes", "40,80", "--feat-dim", "4", "--hidden", "4", "--out", str(tmp_path)]
        assert main(argv) == EXIT_DATA

    def test_bad_sizes(self, tmp_path):
        assert main(["bench", "--sizes", "40,abc", "--out", str(tmp_path)]) == EXIT_USAGE


class TestVerify:
    def test_passes(self, capsys):
        assert main(["verify"]) == EXIT_OK
        assert "ALL PASS" in capsys.readouterr().out

    def test_injected_fault_detected(self, capsys):
        assert main(["verify", "--break-attention"]) == EXIT_VERIFY
        assert "FAIL" in capsys.readouterr().out
