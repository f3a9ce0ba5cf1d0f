"""Robust-accuracy evaluation, the search benchmark and report output."""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .margin import ClassifierHandle, MarginSearchResult, gradient_direction, hit_rate, predicted_class
from .search import RewardConfig, SearchConfig, binary_search, fixed_step_search, rl_search
from .training import pgd_example


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8 / 255
    steps: int = 10
    step_size: float = 2 / 255
    random_start: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.epsilon < 0 or self.step_size <= 0:
            raise ValueError("epsilon must be >= 0 and step_size > 0")
        if self.epsilon > 0 and self.step_size > self.epsilon + 1e-12:
            raise ValueError("step_size must not exceed epsilon")

    @property
    def label(self) -> str:
        return f"pgd-{self.steps}"


def pgd_attack(model, x: torch.Tensor, y: torch.Tensor, cfg: AttackConfig,
               generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """L-infinity PGD in evaluation mode; the result stays in the eps-ball and in [0, 1]."""
    net = model.model if isinstance(model, ClassifierHandle) else model
    if cfg.epsilon == 0:
        return x.clone()
    was_training = net.training
    net.eval()
    try:
        generator = generator or torch.Generator().manual_seed(0)
        return pgd_example(net, x, y, cfg.epsilon, cfg.step_size, cfg.steps, generator, cfg.random_start)
    finally:
        net.train(was_training)


def evaluate(model, dataset, attacks: Sequence[AttackConfig] = (), batch_size: int = 256, seed: int = 0,
             n: Optional[int] = None) -> dict:
    """Clean accuracy and robust accuracy per attack, keyed by attack label."""
    net = model.model if isinstance(model, ClassifierHandle) else model
    if n is not None:
        dataset = dataset.subset(n, seed)
    gen = torch.Generator().manual_seed(seed)
    was_training = net.training
    net.eval()
    correct = {"clean": 0, **{a.label: 0 for a in attacks}}
    total = 0
    try:
        for x, y in dataset.batches(batch_size, shuffle=False):
            with torch.no_grad():
                correct["clean"] += int((net(x).argmax(1) == y).sum())
            for a in attacks:
                x_adv = pgd_attack(net, x, y, a, gen)
                with torch.no_grad():
                    correct[a.label] += int((net(x_adv).argmax(1) == y).sum())
            total += len(y)
    finally:
        net.train(was_training)
    return {k: v / total for k, v in correct.items()}


@dataclass
class BenchmarkRow:
    method: str
    hits: int
    total_forwards: int
    hit_rate: float
    screened: int
    counted_forwards: int = 0  # classifier counter delta during the method's searches

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class BenchmarkMethod:
    """One benchmark entry: a search kind with its configuration."""
    name: str
    kind: str  # fixed | binary | rl
    config: SearchConfig
    agent: object = None
    reward: Optional[RewardConfig] = None

    def run(self, handle, x, y, direction, clean_probs) -> list[MarginSearchResult]:
        if self.kind == "fixed":
            return fixed_step_search(handle, x, y, direction, self.config, clean_probs=clean_probs)
        if self.kind == "binary":
            return binary_search(handle, x, y, direction, self.config, clean_probs=clean_probs)
        if self.kind == "rl":
            if self.agent is None:
                raise ValueError(f"method {self.name} needs a trained policy")
            return rl_search(handle, x, y, direction, self.agent, self.config, self.reward or RewardConfig(),
                             record=False, deterministic=True, clean_probs=clean_probs)
        raise ValueError(f"unknown search kind {self.kind!r}")


def screen(handle: ClassifierHandle, dataset, n_screened: Optional[int] = None, batch_size: int = 500):
    """First ``n_screened`` correctly classified samples in dataset order.

    Returns (x, y, clean_probs, direction). Screening forwards go through the
    raw module so the handle's counter only sees search evaluations.
    """
    net = handle.model
    net.eval()
    xs, ys, ps = [], [], []
    kept = 0
    for x, y in dataset.batches(batch_size, shuffle=False):
        with torch.no_grad():
            probs = torch.softmax(net(x), dim=1)
        ok = predicted_class(probs) == y
        xs.append(x[ok]), ys.append(y[ok]), ps.append(probs[ok])
        kept += int(ok.sum())
        if n_screened is not None and kept >= n_screened:
            break
    x, y, p = torch.cat(xs), torch.cat(ys), torch.cat(ps)
    if n_screened is not None:
        x, y, p = x[:n_screened], y[:n_screened], p[:n_screened]
    direction = torch.cat([gradient_direction(handle, x[i:i + batch_size], y[i:i + batch_size])
                           for i in range(0, len(y), batch_size)])
    return x, y, p, direction


def search_benchmark(handle: ClassifierHandle, dataset, methods: Sequence[BenchmarkMethod],
                     n_screened: Optional[int] = None, batch_size: int = 500,
                     per_sample: Optional[dict] = None) -> list[BenchmarkRow]:
    """Run each search method over the same screened samples.

    ``per_sample`` (optional) receives the raw result lists keyed by method.
    """
    x, y, probs, direction = screen(handle, dataset, n_screened, batch_size)
    rows = []
    for m in methods:
        before = handle.forwards
        results: list[MarginSearchResult] = []
        for i in range(0, len(y), batch_size):
            sl = slice(i, i + batch_size)
            results += m.run(handle, x[sl], y[sl], direction[sl], probs[sl])
        hits = sum(r.hit for r in results)
        rows.append(BenchmarkRow(m.name, hits, sum(r.forwards for r in results), hit_rate(hits, len(y)), len(y),
                                 handle.forwards - before))
        if per_sample is not None:
            per_sample[m.name] = results
    return rows


def config_hash(config) -> str:
    """Short stable digest of a JSON-serialisable config."""
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def write_csv(rows: Sequence[dict], path, config_digest: str = "") -> Path:
    """CSV with a trailing ``config_hash`` column."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        raise ValueError("no rows to write")
    fields = list(rows[0]) + ["config_hash"]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({**r, "config_hash": config_digest})
    return path


def format_table(rows: Sequence[dict], header_lines: Sequence[str] = ()) -> str:
    """Aligned plain-text table; floats printed with 4 decimals."""
    if not rows:
        raise ValueError("no rows to format")
    cols = list(rows[0])
    cell = lambda v: f"{v:.4f}" if isinstance(v, float) else str(v)
    body = [[cell(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) for i, c in enumerate(cols)]
    out = io.StringIO()
    for line in header_lines:
        out.write(f"# {line}\n")
    out.write("  ".join(c.ljust(w) for c, w in zip(cols, widths)).rstrip() + "\n")
    out.write("  ".join("-" * w for w in widths) + "\n")
    for b in body:
        out.write("  ".join(v.rjust(w) for v, w in zip(b, widths)).rstrip() + "\n")
    return out.getvalue()


def hit_rate_curves(logs: dict) -> dict:
    """Label -> (batch index array, hit-rate array); rejects empty input."""
    if not logs:
        raise ValueError("no hit-rate logs given")
    curves = {}
    for label, values in logs.items():
        ys = np.asarray([v for v in values if v is not None], dtype=float)
        if len(ys) == 0:
            raise ValueError(f"log {label!r} is empty")
        curves[label] = (np.arange(1, len(ys) + 1), ys)
    return curves


def plot_hit_rate(logs: dict, path, title: str = "hit rate", footer: str = "") -> Path:
    """One hit-rate-vs-batch curve per log, saved as a raster image."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    curves = hit_rate_curves(logs)
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (xs, ys) in curves.items():
        ax.plot(xs, ys, label=str(label))
    ax.set_xlabel("batch")
    ax.set_ylabel("hit rate")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(title)
    ax.legend()
    if footer:
        fig.text(0.01, 0.01, footer, fontsize=7)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def read_metrics(path, key: str = "hit_rate") -> list:
    """Values of ``key`` from a JSONL metrics file, in order (missing entries skipped)."""
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            v = json.loads(line).get(key)
            if v is not None:
                out.append(v)
    return out
