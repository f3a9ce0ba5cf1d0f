"""End-to-end acceptance checks, one test (or pair) per criterion.

Each test records PASS/FAIL/SKIP with a short measurement in the session
summary. Criteria 7 and 8 need hours of ResNet training and only run with
MARGIN_RL_EXTENDED=1.
"""
import contextlib
import csv
import json
import time

import pytest
import torch
import torch.nn as nn
from scipy.integrate import quad

from conftest import ACCEPTANCE, EXTENDED
from margin_rl.cli import EXIT_OK, main
from margin_rl.data import dataset_available
from margin_rl.margin import HitBand, absolute_distance_oracle, perturb
from margin_rl.models import SyntheticLinearSpec, analytic_margin, build_model
from margin_rl.search import RewardConfig, SearchConfig, binary_search, p_lower_bound, p_min, reward, sigmoid
from margin_rl.training import grad_align, total_loss

HAVE_MNIST = dataset_available("mnist")


@contextlib.contextmanager
def criterion(key, detail=""):
    """Record PASS unless the block raises; ``detail`` may be a list appended to in the block."""
    notes = detail if isinstance(detail, list) else [detail]
    try:
        yield notes
    except BaseException as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        status = "SKIP" if isinstance(e, pytest.skip.Exception) else "FAIL"
        ACCEPTANCE[key] = (status, "; ".join(n for n in notes if n) + (f" [{msg}]" if msg else ""))
        raise
    ACCEPTANCE[key] = ("PASS", "; ".join(n for n in notes if n))


def run(*argv):
    code = main([str(a) for a in argv])
    assert code == EXIT_OK, f"{argv[0]} exited with {code}"


def read_jsonl(path):
    return [json.loads(l) for l in path.read_text().splitlines() if l.strip()]


# ---------------------------------------------------------------- MNIST pipeline

@pytest.fixture(scope="module")
def mnist_runs(tmp_path_factory):
    """CNN trained for one epoch plus the P = 10 step-size policy (shared by criteria 1 and 2)."""
    if not HAVE_MNIST:
        pytest.skip("MNIST files not present")
    root = tmp_path_factory.mktemp("mnist")
    t0 = time.time()
    run("train", "--dataset", "mnist", "--out", root / "cnn")
    run("train-policy", "--dataset", "mnist", "--checkpoint", root / "cnn" / "model.pt", "--p-value", 10,
        "--out", root / "p10")
    return root, time.time() - t0


@pytest.fixture(scope="module")
def bench(mnist_runs):
    """Hit rates, forwards and total runtime of one benchmark on 2000 screened test samples."""
    root, elapsed = mnist_runs
    t0 = time.time()
    run("search-bench", "--dataset", "mnist", "--checkpoint", root / "cnn" / "model.pt", "--policy",
        root / "p10" / "policy.pt", "--set", "policy.p_value=10",
        "--methods", "fixed,binary,rl", "--step-max", "5,10", "--n", 2000, "--out", root / "bench")
    rows = {r["method"]: r for r in csv.DictReader(open(root / "bench" / "search_bench.csv"))}
    assert all(r["screened"] == "2000" for r in rows.values())
    hr = {k: float(r["hit_rate"]) for k, r in rows.items()}
    fw = {k: int(r["total_forwards"]) for k, r in rows.items()}
    return hr, fw, elapsed + time.time() - t0


def _rates(hr):
    return " ".join(f"{k}={hr[k]:.4f}" for k in ("fixed(10)", "binary(5)", "binary(10)", "rl(10)"))


@pytest.mark.slow
def test_c1a_policy_search_wins(bench):
    notes = []
    with criterion("1a", notes):
        hr, fw, elapsed = bench
        notes.append(_rates(hr))
        notes.append(f"forwards rl/binary={fw['rl(10)'] / fw['binary(10)']:.3f} runtime={elapsed / 60:.1f}min")
        assert hr["binary(5)"] < hr["binary(10)"] < hr["rl(10)"]
        assert hr["rl(10)"] >= 0.90
        assert fw["rl(10)"] <= 0.8 * fw["binary(10)"]
        assert elapsed <= 30 * 60


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="fixed(10) edges out binary(5) with the [0, 1] bracket; see the decisions ledger")
def test_c1b_fixed_below_short_bisection(bench):
    notes = []
    with criterion("1b", notes):
        hr, _, _ = bench
        notes.append(f"fixed(10)={hr['fixed(10)']:.4f} binary(5)={hr['binary(5)']:.4f}")
        assert hr["fixed(10)"] < hr["binary(5)"]


@pytest.mark.slow
def test_c2a_calibrated_p_converges(mnist_runs):
    notes = []
    with criterion("2a", notes):
        root, _ = mnist_runs
        run("train-policy", "--dataset", "mnist", "--checkpoint", root / "cnn" / "model.pt", "--out", root / "pmin")
        final = {}
        for label, d in ((f"P={p_min(10):.2f}", "pmin"), ("P=10", "p10")):
            recs = read_jsonl(root / d / "policy_metrics.jsonl")
            final[label] = recs[-1]["rolling_hit_rate"]
            assert len(recs) >= 400  # one full epoch of batches
        notes.append("final rolling hit rate " + " ".join(f"{k}:{v:.3f}" for k, v in final.items()))
        assert all(v >= 0.85 for v in final.values())


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="extreme P still learns here; analysis in the decisions ledger")
def test_c2b_extreme_p_degrades(mnist_runs):
    notes = []
    with criterion("2b", notes):
        root, _ = mnist_runs
        run("train-policy", "--dataset", "mnist", "--checkpoint", root / "cnn" / "model.pt", "--p-value", 1e4,
            "--out", root / "p1e4")
        recs = read_jsonl(root / "p1e4" / "policy_metrics.jsonl")
        best = max(r["rolling_hit_rate"] for r in recs)
        notes.append(f"P=1e4 peak rolling hit rate {best:.3f} final {recs[-1]['rolling_hit_rate']:.3f}")
        assert best <= 0.5


# ---------------------------------------------------------------- properties

def test_c3_reward_calibration():
    notes = []
    with criterion("3", notes):
        band = HitBand(0.0, 0.1)
        ref = quad(sigmoid, 0.0, 1.0, epsabs=1e-13)[0] + quad(sigmoid, 0.1, 1.0, epsabs=1e-13)[0]
        err = abs(p_lower_bound(band) - ref)
        notes.append(f"(a) |bound-quad|={err:.1e}")
        assert err <= 1e-6

        g = torch.Generator().manual_seed(3)
        n, step_max = 100_000, 10
        rc = RewardConfig(band=band, p_value=p_min(step_max))
        lrd = torch.rand(n, step_max - 1, generator=g, dtype=torch.float64) * 2 - 1
        lrd = torch.where((lrd >= 0) & (lrd <= 0.1), lrd - 0.5, lrd)  # misses only before the hit
        lengths = torch.randint(0, step_max, (n,), generator=g)
        mask = torch.arange(step_max - 1)[None, :] < lengths[:, None]
        hit_reward = reward(torch.rand(n, generator=g, dtype=torch.float64) * 0.1, rc)
        totals = (reward(lrd, rc) * mask).sum(1) + hit_reward
        notes.append(f"(b) min total={float(totals.min()):.4f}")
        assert bool((totals > 0).all())

        # prefix sums of miss rewards, then two positive rewards P1 < P2 keeping every total positive
        s = -(torch.rand(n, 2, generator=g, dtype=torch.float64) * sigmoid(1.0) * step_max)
        s[: n // 10, 1] = s[: n // 10, 0]  # some equal pairs
        p1 = -s.min(1).values + torch.rand(n, generator=g, dtype=torch.float64) * 20 + 1e-3
        p2 = p1 + torch.rand(n, generator=g, dtype=torch.float64) * 20 + 1e-3
        sj, sk = s.max(1).values, s.min(1).values
        r1, r2 = (p1 + sj) / (p1 + sk), (p2 + sj) / (p2 + sk)
        differ = sj > sk
        notes.append(f"(c) strict on {int(differ.sum())} pairs")
        assert bool((r1[differ] > r2[differ]).all())
        assert bool(torch.allclose(r1[~differ], r2[~differ]))


def test_c4_additivity():
    notes = []
    with criterion("4", notes):
        g = torch.Generator().manual_seed(4)
        worst = 0.0
        for _ in range(1000):
            x = torch.rand(1, 28, 28, generator=g, dtype=torch.float64)
            d = torch.randint(-1, 2, x.shape, generator=g).to(torch.float64)
            parts = torch.rand(int(torch.randint(2, 11, (1,), generator=g)), generator=g, dtype=torch.float64) * 0.05
            y = x
            for e in parts:
                y = perturb(y, d, float(e), clamp_domain=False)
            once = perturb(x, d, float(parts.sum()), clamp_domain=False)
            worst = max(worst, float((y - once).abs().max()))
        notes.append(f"max deviation {worst:.1e}")
        assert worst <= 1e-7


def test_c5_oracle_agreement():
    notes = []
    with criterion("5", notes):
        spec = SyntheticLinearSpec((1.0, -0.5), 0.1)
        handle = build_model(spec)
        g = torch.Generator().manual_seed(5)
        x = torch.rand(100, 2, generator=g, dtype=torch.float64)
        y = handle.predict_probs(x).argmax(1)
        d = torch.sign(handle.input_grad(x, y))
        eps_hi, grid = 2.0, 1e-3
        # zero-width band: bisection runs all steps instead of stopping early on a band hit
        cfg = SearchConfig(step_max=20, epsilon_max=eps_hi, band=HitBand(0.0, 0.0), clamp_domain=False)
        found = binary_search(handle, x, y, d, cfg)
        truth = [analytic_margin(spec, x[i]) for i in range(100)]
        err_bin = max(abs(r.epsilon_total - t) for r, t in zip(found, truth))
        err_grid = max(abs(absolute_distance_oracle(handle, x[i], int(y[i]), d[i], grid, eps_hi,
                                                    clamp_domain=False) - truth[i]) for i in range(100))
        notes.append(f"bisection err {err_bin:.1e}, grid err {err_grid:.1e}")
        assert err_bin <= 2 * 2 ** -20 * eps_hi + grid
        assert err_grid <= grid + 1e-12


def test_c6_gradalign():
    notes = []
    with criterion("6", notes):
        torch.manual_seed(6)
        affine = nn.Sequential(nn.Flatten(), nn.Linear(12, 2)).double()
        x = torch.rand(32, 1, 3, 4, dtype=torch.float64)
        y = torch.randint(0, 2, (32,))
        omega = grad_align(affine, x, y, 8 / 255, generator=torch.Generator().manual_seed(0)).item()
        notes.append(f"affine omega {omega:.1e}")
        assert abs(omega) <= 1e-6

        net = nn.Sequential(nn.Flatten(), nn.Linear(12, 16), nn.ReLU(), nn.Linear(16, 10)).double()
        g = torch.Generator().manual_seed(1)
        values = []
        for _ in range(1000):
            xb = torch.rand(8, 1, 3, 4, generator=g, dtype=torch.float64)
            yb = torch.randint(0, 10, (8,), generator=g)
            values.append(grad_align(net, xb, yb, 0.5, generator=g).item())
        notes.append(f"omega range [{min(values):.3f}, {max(values):.3f}]")
        assert 0.0 <= min(values) and max(values) <= 2.0

        model = nn.Sequential(nn.Flatten(), nn.Linear(6, 8), nn.Softplus(), nn.Linear(8, 3)).double()
        params = list(model.parameters())
        assert sum(p.numel() for p in params) <= 1000
        xs = torch.rand(10, 1, 2, 3, dtype=torch.float64)
        ys = torch.randint(0, 3, (10,))
        x_adv = (xs + 0.05 * torch.randn_like(xs)).clamp(0, 1)
        eta = (torch.rand_like(xs) * 2 - 1) * 0.1
        value = lambda: total_loss(model, xs, ys, x_adv, 2.5, 0.1, eta=eta)[0]
        analytic = torch.cat([gr.flatten() for gr in torch.autograd.grad(value(), params)])
        numeric, h = [], 1e-6
        with torch.no_grad():
            for p in params:
                flat = p.view(-1)
                for i in range(flat.numel()):
                    orig = flat[i].item()
                    flat[i] = orig + h
                    with torch.enable_grad():
                        up = value().item()
                    flat[i] = orig - h
                    with torch.enable_grad():
                        down = value().item()
                    flat[i] = orig
                    numeric.append((up - down) / (2 * h))
        numeric = torch.tensor(numeric, dtype=torch.float64)
        rel = float((analytic - numeric).norm() / numeric.norm())
        notes.append(f"finite-difference rel err {rel:.1e}")
        assert rel <= 1e-3


# ---------------------------------------------------------------- extended (ResNet) runs

def _skip_unless_extended(key, dataset):
    if not EXTENDED:
        with criterion(key, "needs MARGIN_RL_EXTENDED=1 (hours of ResNet training)"):
            pytest.skip("extended run; set MARGIN_RL_EXTENDED=1")
    if not dataset_available(dataset):
        with criterion(key, f"{dataset} files not present"):
            pytest.skip(f"{dataset} not present")


@pytest.mark.extended
def test_c7_training_effect(tmp_path):
    _skip_unless_extended("7", "cifar10")
    notes = []
    with criterion("7", notes):
        common = ["--dataset", "cifar10", "--eps-max", 8 / 255, "--n-train", 10_000, "--epochs", 10,
                  "--set", "train.cycle_epochs=8"]
        acc = {}
        for method in ("adaptive_rl", "fgsm_align"):
            out = tmp_path / method
            run("train", "--method", method, *common, "--out", out)
            run("eval", "--dataset", "cifar10", "--checkpoint", out / "model.pt", "--attacks", 10, "--out", out / "ev")
            acc[method] = {r["metric"]: float(r["accuracy"]) for r in csv.DictReader(open(out / "ev" / "eval.csv"))}
        notes.append(json.dumps(acc))
        assert acc["adaptive_rl"]["clean"] > acc["fgsm_align"]["clean"]
        assert abs(acc["adaptive_rl"]["pgd-10"] - acc["fgsm_align"]["pgd-10"]) <= 0.05


@pytest.mark.extended
def test_c8_warmup_necessity(tmp_path):
    # SVHN is not obtainable here, so the collapse check runs on CIFAR-10 with a doubled budget
    _skip_unless_extended("8", "cifar10")
    notes = []
    with criterion("8", notes):
        out = tmp_path / "nowarm"
        run("train", "--method", "adaptive_rl", "--dataset", "cifar10", "--eps-max", 16 / 255, "--n-train", 10_000,
            "--epochs", 5, "--set", "train.cycle_epochs=4", "--set", "train.warmup_epochs=0", "--out", out)
        run("eval", "--dataset", "cifar10", "--checkpoint", out / "model.pt", "--attacks", 10, "--out", out / "ev")
        clean = {r["metric"]: float(r["accuracy"]) for r in csv.DictReader(open(out / "ev" / "eval.csv"))}["clean"]
        notes.append(f"clean accuracy without ramp {clean:.3f}")
        assert clean <= 0.30


# ---------------------------------------------------------------- determinism

@pytest.mark.skipif(not HAVE_MNIST, reason="MNIST files not present")
def test_c9_determinism(tmp_path):
    notes = []
    with criterion("9", notes):
        small = ["--set", "agent.hidden=32,32", "--set", "agent.batch_size=32", "--set", "agent.warmup=0"]
        outputs = []
        for rep in ("a", "b"):
            d = tmp_path / rep
            run("train", "--dataset", "mnist", "--n-train", 1000, "--out", d / "cnn")
            run("train", "--dataset", "mnist", "--method", "adaptive_rl", "--eps-max", 0.1, "--n-train", 256,
                "--set", "train.batch_size=64", *small, "--out", d / "adv")
            run("train-policy", "--dataset", "mnist", "--checkpoint", d / "cnn" / "model.pt", "--max-batches", 3,
                *small, "--out", d / "pol")
            run("search-bench", "--dataset", "mnist", "--checkpoint", d / "cnn" / "model.pt", "--policy",
                d / "pol" / "policy.pt", "--n", 100, "--out", d / "bench")
            run("eval", "--dataset", "mnist", "--checkpoint", d / "cnn" / "model.pt", "--attacks", 3, "--n", 128,
                "--out", d / "ev")
            files = ["cnn/metrics.jsonl", "adv/metrics.jsonl", "pol/policy_metrics.jsonl",
                     "bench/search_bench.csv", "ev/eval.csv"]
            outputs.append({f: (d / f).read_bytes() for f in files})
        same = [f for f in outputs[0] if outputs[0][f] == outputs[1][f]]
        notes.append(f"{len(same)}/{len(outputs[0])} logs identical across reruns; differing: {sorted(set(outputs[0]) - set(same))}")
        assert len(same) == len(outputs[0])
