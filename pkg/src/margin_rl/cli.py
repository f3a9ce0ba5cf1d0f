"""``margin-rl`` command line.

Exit codes: 0 success, 1 selftest failure, 2 usage error, 3 bad config,
4 missing or incompatible checkpoint/file, 5 dataset error, 6 training diverged.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import config as C
from .data import DataError, DatasetSpec, fetch_dataset, load_dataset
from .evaluation import (AttackConfig, BenchmarkMethod, config_hash, evaluate, format_table, plot_hit_rate,
                         read_metrics, search_benchmark, write_csv)
from .models import build_model
from .sac import SACAgent
from .training import (MetricsLog, TrainingDiverged, load_checkpoint, save_checkpoint, train_adaptive,
                       train_baseline, train_search_policy)

EXIT_OK, EXIT_SELFTEST, EXIT_USAGE, EXIT_CONFIG, EXIT_MISSING, EXIT_DATA, EXIT_DIVERGED = range(7)

logger = logging.getLogger("margin_rl")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _common(p, dataset=True):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    if dataset:
        p.add_argument("--dataset", help="mnist, cifar10, svhn or synth2d")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="margin-rl", description="Marginal adversarial sample search and adaptive training")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a classifier (adaptive or baseline)")
    _common(p)
    p.add_argument("--method", help="adaptive_rl, standard, fgsm_rs, fgsm_align, free_at or pgd_at")
    p.add_argument("--eps-max", help="epsilon budget, e.g. 8/255")
    p.add_argument("--epochs", type=int)
    p.add_argument("--n-train", type=int, help="deterministic training subset size")
    p.add_argument("--policy", help="pretrained policy checkpoint (adaptive_rl)")
    p.add_argument("--resume", help="training checkpoint to resume from")
    p.add_argument("--max-batches", type=int, help="stop after this many batches (smoke runs)")

    p = sub.add_parser("train-policy", help="fit the step-size policy on a frozen classifier")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="classifier checkpoint")
    p.add_argument("--p-value", help="hit reward P (default step_max * sigmoid(1))")
    p.add_argument("--max-batches", type=int)

    p = sub.add_parser("search-bench", help="compare margin searches on screened test samples")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--policy", help="policy checkpoint, required for the rl method")
    p.add_argument("--methods", default="fixed,binary,rl")
    p.add_argument("--step-max", default="10", help="comma-separated step budgets")
    p.add_argument("--n", type=int, help="number of screened samples")

    p = sub.add_parser("eval", help="clean and PGD accuracy of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--attacks", help="comma-separated PGD step counts, e.g. 10,20,50")
    p.add_argument("--n", type=int, help="number of test samples")

    p = sub.add_parser("plot", help="hit-rate curves from metrics logs")
    p.add_argument("logs", nargs="+", help="JSONL metrics files")
    p.add_argument("--labels", help="comma-separated curve labels")
    p.add_argument("--key", default="rolling_hit_rate")
    p.add_argument("--out", required=True, help="image path")

    sub.add_parser("selftest", help="run the built-in oracle checks")

    p = sub.add_parser("data", help="dataset utilities")
    p.add_argument("action", choices=["fetch", "check"])
    p.add_argument("name")
    return parser


def _overrides(args, extra: dict) -> dict:
    flat = {}
    if getattr(args, "config", None):
        flat.update(C.read_config_file(args.config))
    flat.update(C.parse_assignments(getattr(args, "set", [])))
    for key, value in extra.items():
        if value is not None:
            flat[key] = C._parse(str(value), C.FIELD_TYPES[key], key)
    return flat


def _resolve(args, **extra) -> C.RunConfig:
    extra = {"data.name": getattr(args, "dataset", None), "seed": getattr(args, "seed", None),
             "out_dir": getattr(args, "out", None), **extra}
    cfg = C.resolve(_overrides(args, extra))
    cfg.train.seed = cfg.seed
    return cfg


def _write_run_info(cfg: C.RunConfig, out: Path, command: str) -> str:
    out.mkdir(parents=True, exist_ok=True)
    text = cfg.dumps()
    # the output location does not change results, so it stays out of the digest
    digest = config_hash({k: v for k, v in cfg.flat().items() if k != "out_dir"})
    (out / "config.txt").write_text(text)
    (out / "run.json").write_text(json.dumps({"command": command, "version": C.__version__, "config_hash": digest,
                                              "config": {k: C.format_value(v) for k, v in cfg.flat().items()}},
                                             indent=2, sort_keys=True) + "\n")
    return digest


def _dataset(cfg: C.RunConfig, split: str, n=None):
    return load_dataset(DatasetSpec(cfg.data.name, split, seed=cfg.seed, n=n), data_dir=cfg.data.data_dir)


def _handle_for(cfg: C.RunConfig, ds):
    if cfg.model_name == "mnist_cnn":
        return build_model("mnist_cnn")
    return build_model(cfg.model_name, num_classes=ds.num_classes, in_channels=ds.input_shape[0])


def _load_classifier(path, cfg: C.RunConfig, ds):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    state = load_checkpoint(path)
    stored = state.get("run_config")
    model_name = cfg.model_name
    if stored:
        model_name = C.load_run_config(stored).model_name
    cfg = C.dataclasses.replace(cfg, model=model_name)
    handle = _handle_for(cfg, ds)
    handle.model.load_state_dict(state["model"])
    handle.model.eval()
    return handle


def _load_agent(path, cfg: C.RunConfig) -> SACAgent:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"policy checkpoint {path} not found")
    return SACAgent.load(path, seed=cfg.seed)


def cmd_train(args) -> int:
    cfg = _resolve(args, **{"method": args.method, "train.epsilon_max": args.eps_max, "train.epochs": args.epochs,
                            "data.n_train": args.n_train})
    out = Path(cfg.out_dir)
    digest = _write_run_info(cfg, out, "train")
    torch.manual_seed(cfg.seed)
    ds = _dataset(cfg, "train", cfg.data.n_train)
    handle = _handle_for(cfg, ds)
    metrics = MetricsLog(out / "metrics.jsonl")
    if not args.resume and metrics.path.exists():
        metrics.path.unlink()
    resume = args.resume
    if resume and not Path(resume).exists():
        raise FileNotFoundError(f"checkpoint {resume} not found")
    if cfg.method == "adaptive_rl":
        agent = _load_agent(args.policy, cfg) if args.policy else SACAgent(cfg.agent, seed=cfg.seed)
        train_adaptive(handle, ds, agent, cfg.train, cfg.search, cfg.reward_config(), metrics, out, resume,
                       max_batches=args.max_batches)
        agent.save(out / "policy.pt")
    else:
        train_baseline(cfg.method, handle, ds, cfg.train, metrics, out, resume, max_batches=args.max_batches)
    save_checkpoint(out / "model.pt", handle.model, torch.optim.SGD(handle.model.parameters(), lr=0.0),
                    cfg.train.epochs - 1, cfg.train, extra={"run_config": cfg.dumps(), "config_hash": digest})
    print(f"wrote {out / 'model.pt'} (config {digest})")
    return EXIT_OK


def cmd_train_policy(args) -> int:
    cfg = _resolve(args, **{"policy.p_value": args.p_value})
    out = Path(cfg.out_dir)
    digest = _write_run_info(cfg, out, "train-policy")
    torch.manual_seed(cfg.seed)
    ds = _dataset(cfg, "train", cfg.data.n_train)
    handle = _load_classifier(args.checkpoint, cfg, ds)
    agent = SACAgent(cfg.agent, seed=cfg.seed)
    metrics = MetricsLog(out / "policy_metrics.jsonl")
    if metrics.path.exists():
        metrics.path.unlink()
    p = cfg.policy
    train_search_policy(handle, ds, agent, cfg.search, cfg.reward_config(), batch_size=p.batch_size, epochs=p.epochs,
                        updates_per_step=p.updates_per_step, max_updates=p.max_updates, seed=cfg.seed,
                        metrics=metrics, max_batches=args.max_batches)
    agent.save(out / "policy.pt")
    print(f"wrote {out / 'policy.pt'} (config {digest})")
    return EXIT_OK


def cmd_search_bench(args) -> int:
    cfg = _resolve(args)
    out = Path(cfg.out_dir)
    digest = _write_run_info(cfg, out, "search-bench")
    torch.manual_seed(cfg.seed)
    ds = _dataset(cfg, "test", cfg.data.n_test)
    handle = _load_classifier(args.checkpoint, cfg, ds)
    agent = _load_agent(args.policy, cfg) if args.policy else None
    methods = []
    try:
        budgets = [int(s) for s in args.step_max.split(",")]
    except ValueError:
        raise C.ConfigError(f"--step-max expects integers, got {args.step_max!r}")
    for kind in args.methods.split(","):
        kind = kind.strip()
        if kind not in ("fixed", "binary", "rl"):
            raise C.ConfigError(f"unknown search method {kind!r}")
        if kind == "rl" and agent is None:
            raise C.ConfigError("the rl method needs --policy")
        for s in budgets:
            scfg = C.dataclasses.replace(cfg.search, step_max=s)
            methods.append(BenchmarkMethod(f"{kind}({s})", kind, scfg, agent, cfg.reward_config()))
    rows = [r.as_dict() for r in search_benchmark(handle, ds, methods, n_screened=args.n)]
    write_csv(rows, out / "search_bench.csv", digest)
    table = format_table(rows, [f"config_hash {digest}"])
    (out / "search_bench.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    extra = {}
    if args.attacks:
        extra["eval.attack_steps"] = args.attacks
    cfg = _resolve(args, **extra)
    out = Path(cfg.out_dir)
    digest = _write_run_info(cfg, out, "eval")
    ds = _dataset(cfg, "test", cfg.data.n_test)
    handle = _load_classifier(args.checkpoint, cfg, ds)
    e = cfg.eval
    attacks = [AttackConfig(e.epsilon, int(k), e.step_size, e.random_start) for k in e.attack_steps]
    n = args.n if args.n is not None else e.n
    result = evaluate(handle, ds, attacks, batch_size=e.batch_size, seed=cfg.seed, n=n)
    rows = [{"metric": k, "accuracy": v} for k, v in result.items()]
    write_csv(rows, out / "eval.csv", digest)
    header = [f"config_hash {digest}",
              f"pgd epsilon {e.epsilon:.6f} step_size {e.step_size:.6f} random_start {e.random_start}"]
    table = format_table(rows, header)
    (out / "eval.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_plot(args) -> int:
    labels = args.labels.split(",") if args.labels else [Path(p).stem for p in args.logs]
    if len(labels) != len(args.logs):
        raise C.ConfigError("--labels must match the number of logs")
    logs = {}
    for label, path in zip(labels, args.logs):
        if not Path(path).exists():
            raise FileNotFoundError(f"metrics file {path} not found")
        logs[label] = read_metrics(path, args.key)
    try:
        plot_hit_rate(logs, args.out, title=args.key)
    except ValueError as e:
        raise C.ConfigError(str(e)) from e
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_checks
    ok = True
    for name, passed, detail in run_checks():
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
        ok &= passed
    return EXIT_OK if ok else EXIT_SELFTEST


def cmd_data(args) -> int:
    if args.action == "fetch":
        print(f"fetched {args.name} into {fetch_dataset(args.name)}")
    else:
        ds = load_dataset(DatasetSpec(args.name, "test"))
        print(f"{args.name}: test split has {len(ds)} samples, checksums verified")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "train-policy": cmd_train_policy, "search-bench": cmd_search_bench,
            "eval": cmd_eval, "plot": cmd_plot, "selftest": cmd_selftest, "data": cmd_data}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except C.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FileNotFoundError, ValueError, RuntimeError, KeyError) as e:
        # unreadable, wrong-format or architecture-mismatched checkpoints land here
        print(f"missing or incompatible file: {e}", file=sys.stderr)
        return EXIT_MISSING

if __name__ == "__main__":
    sys.exit(main())
