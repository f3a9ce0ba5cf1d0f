import csv
import json

import pytest

from conftest import requires_mnist
from margin_rl import config as C
from margin_rl.cli import (EXIT_CONFIG, EXIT_DATA, EXIT_MISSING, EXIT_OK, EXIT_USAGE, main)

SMALL_AGENT = ["--set", "agent.hidden=32,32", "--set", "agent.batch_size=32", "--set", "agent.warmup=0"]


class TestConfig:
    def test_fraction_parsing(self):
        assert C.parse_float("8/255") == 8 / 255
        assert C.parse_float("1e-3") == 1e-3
        with pytest.raises(C.ConfigError):
            C.parse_float("eight")

    def test_cifar_preset(self):
        cfg = C.resolve({"data.name": "cifar10", "train.epsilon_max": 8 / 255})
        t = cfg.train
        assert (t.lam, t.epochs, t.cycle_epochs, t.lr_max, t.lr_min, t.warmup_epochs) == (0.2, 40, 30, 0.3, 1e-3, 0)
        assert cfg.model_name == "preact_resnet18" and cfg.search.epsilon_max == 8 / 255

    def test_lambda_follows_budget(self):
        assert C.resolve({"data.name": "cifar10", "train.epsilon_max": 10 / 255}).train.lam == 0.356
        svhn = C.resolve({"data.name": "svhn", "train.epsilon_max": 10 / 255})
        assert (svhn.train.lam, svhn.train.warmup_epochs, svhn.train.epochs, svhn.train.lr_max) == (2.812, 5, 20, 0.15)

    def test_explicit_values_win(self):
        cfg = C.resolve({"data.name": "cifar10", "train.epochs": 3, "train.lam": 0.0})
        assert cfg.train.epochs == 3 and cfg.train.lam == 0.0

    def test_roundtrip_through_text(self):
        cfg = C.resolve({"data.name": "svhn", "search.band.upper": 0.05, "agent.hidden": (64, 64)})
        again = C.load_run_config(cfg.dumps())
        assert again.flat() == cfg.flat()

    def test_file_parsing(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("# comment\nmethod = fgsm_align\ntrain.epsilon_max = 8/255  # inline\neval.attack_steps = 10,20\n")
        flat = C.read_config_file(p)
        assert flat == {"method": "fgsm_align", "train.epsilon_max": 8 / 255, "eval.attack_steps": (10, 20)}

    @pytest.mark.parametrize("line", ["nonsense", "train.nope = 1", "train.epochs = many", "train.augment = maybe"])
    def test_malformed(self, line):
        with pytest.raises(C.ConfigError):
            C.parse_assignments([line])

    def test_inconsistent_rejected(self):
        with pytest.raises(C.ConfigError):
            C.resolve({"method": "mma"})
        with pytest.raises(C.ConfigError):
            C.resolve({"data.name": "svhn", "train.epochs": 3})
        with pytest.raises(C.ConfigError):
            C.resolve({"policy.p_value": 0.5})


class TestExitCodes:
    def test_unknown_flag(self):
        assert main(["train", "--bogus"]) == EXIT_USAGE

    def test_unknown_command(self):
        assert main(["frobnicate"]) == EXIT_USAGE

    def test_malformed_config(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("train.epochs = lots\n")
        assert main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_missing_checkpoint(self, tmp_path):
        assert main(["eval", "--dataset", "synth2d", "--checkpoint", str(tmp_path / "none.pt"),
                     "--out", str(tmp_path)]) == EXIT_MISSING

    def test_missing_dataset(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MARGIN_RL_DATA", str(tmp_path / "empty"))
        assert main(["data", "check", "svhn"]) == EXIT_DATA

    def test_selftest_passes(self, capsys):
        assert main(["selftest"]) == EXIT_OK
        assert "FAIL" not in capsys.readouterr().out

    def test_plot_rejects_empty_log(self, tmp_path):
        log = tmp_path / "m.jsonl"
        log.write_text("")
        assert main(["plot", str(log), "--out", str(tmp_path / "f.png")]) == EXIT_CONFIG


@pytest.fixture(scope="module")
def model_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cnn")
    assert main(["train", "--dataset", "mnist", "--n-train", "2000", "--out", str(out)]) == EXIT_OK
    return out


@requires_mnist
class TestPipeline:

    def test_train_outputs(self, model_dir):
        run = json.loads((model_dir / "run.json").read_text())
        assert run["config"]["method"] == "standard" and len(run["config_hash"]) == 12
        assert (model_dir / "model.pt").exists() and (model_dir / "metrics.jsonl").exists()
        assert C.load_run_config((model_dir / "config.txt").read_text()).data.n_train == 2000

    def test_policy_bench_eval_plot(self, model_dir, tmp_path):
        pol = tmp_path / "pol"
        assert main(["train-policy", "--dataset", "mnist", "--checkpoint", str(model_dir / "model.pt"),
                     "--out", str(pol), "--max-batches", "3", *SMALL_AGENT]) == EXIT_OK
        bench = tmp_path / "bench"
        assert main(["search-bench", "--dataset", "mnist", "--checkpoint", str(model_dir / "model.pt"),
                     "--policy", str(pol / "policy.pt"), "--methods", "fixed,binary,rl", "--step-max", "5,10",
                     "--n", "40", "--out", str(bench)]) == EXIT_OK
        rows = list(csv.DictReader(open(bench / "search_bench.csv")))
        assert [r["method"] for r in rows] == ["fixed(5)", "fixed(10)", "binary(5)", "binary(10)", "rl(5)", "rl(10)"]
        assert all(r["screened"] == "40" and r["counted_forwards"] == r["total_forwards"] for r in rows)
        ev = tmp_path / "eval"
        assert main(["eval", "--dataset", "mnist", "--checkpoint", str(model_dir / "model.pt"), "--attacks", "2",
                     "--n", "64", "--out", str(ev)]) == EXIT_OK
        rows = list(csv.DictReader(open(ev / "eval.csv")))
        assert [r["metric"] for r in rows] == ["clean", "pgd-2"]
        assert (ev / "eval.txt").read_text().startswith("# config_hash")
        assert main(["plot", str(pol / "policy_metrics.jsonl"), "--labels", "P", "--out",
                     str(tmp_path / "fig.png")]) == EXIT_OK
        assert (tmp_path / "fig.png").exists()

    def test_rl_without_policy(self, model_dir, tmp_path):
        assert main(["search-bench", "--dataset", "mnist", "--checkpoint", str(model_dir / "model.pt"),
                     "--methods", "rl", "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_architecture_mismatch(self, model_dir, tmp_path):
        code = main(["eval", "--dataset", "mnist", "--checkpoint", str(model_dir / "model.pt"),
                     "--set", "model=preact_resnet18", "--n", "8", "--out", str(tmp_path)])
        # the stored run config names the architecture, so the override is ignored and loading succeeds
        assert code == EXIT_OK

    def test_adaptive_smoke_and_resume(self, tmp_path):
        args = ["train", "--dataset", "mnist", "--method", "adaptive_rl", "--eps-max", "0.1", "--n-train", "256",
                "--set", "train.batch_size=64", "--set", "train.epochs=2", *SMALL_AGENT]
        assert main([*args, "--out", str(tmp_path / "a")]) == EXIT_OK
        recs = [json.loads(l) for l in (tmp_path / "a" / "metrics.jsonl").read_text().splitlines()]
        assert len(recs) == 8 and all(r["eps_top"] <= 0.1 + 1e-12 for r in recs)
        assert (tmp_path / "a" / "policy.pt").exists()
