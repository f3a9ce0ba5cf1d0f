"""Adaptive-perturbation adversarial training and the fixed-budget baselines.

The adaptive trainer computes the clean input gradient once per batch, lets
the policy pick a per-sample epsilon along its sign, and trains on
cross-entropy at the perturbed inputs plus a gradient-alignment penalty at
the clean ones. When the rolling hit rate drops below ``rate_min`` the
policy is retrained on the current classifier.
"""
from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .margin import ClassifierHandle, perturb
from .search import RewardConfig, SearchConfig, rl_search

logger = logging.getLogger(__name__)

BASELINE_KINDS = ("standard", "fgsm_rs", "fgsm_align", "free_at", "pgd_at", "adaptive_rl")
CHECKPOINT_FORMAT = "margin_rl.train"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epsilon_max: float = 8 / 255
    lam: float = 0.2
    lr_max: float = 0.3
    lr_min: float = 1e-3
    lr_final: float = 1e-3
    epochs: int = 40
    cycle_epochs: int = 30
    warmup_epochs: int = 0
    rate_min: float = 0.9
    rolling_window: int = 10
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    augment: bool = True
    seed: int = 0
    # baselines
    free_replays: int = 8
    pgd_steps: int = 10
    pgd_alpha: float = 2 / 255
    fgsm_alpha_ratio: float = 1.25
    # policy maintenance
    retrain_max_updates: int = 2000
    retrain_updates_per_round: int = 50
    policy_updates_per_step: float = 0.0

    def __post_init__(self):
        if not 0 < self.rate_min <= 1:
            raise ValueError("rate_min must lie in (0, 1]")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.warmup_epochs and self.warmup_epochs >= self.epochs:
            raise ValueError("warmup_epochs must be below epochs")


def epsilon_schedule(epoch: float, config: TrainConfig) -> float:
    """Linear ramp 0 -> epsilon_max over warmup_epochs, then flat."""
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    if config.warmup_epochs <= 0:
        return config.epsilon_max
    return config.epsilon_max * min(epoch / config.warmup_epochs, 1.0)


def cyclic_lr(step: int, config: TrainConfig, steps_per_epoch: int) -> float:
    """One triangular cycle lr_min -> lr_max -> lr_min over cycle_epochs, then lr_final."""
    t = step / steps_per_epoch
    if t >= config.cycle_epochs:
        return config.lr_final
    half = config.cycle_epochs / 2
    frac = t / half if t <= half else (config.cycle_epochs - t) / half
    return config.lr_min + (config.lr_max - config.lr_min) * frac


def input_gradients(model: nn.Module, x: torch.Tensor, y: torch.Tensor, create_graph: bool = True):
    """Per-sample loss gradients w.r.t. the inputs, plus the logits."""
    x = x.detach().requires_grad_(True)
    logits = model(x)
    loss = F.cross_entropy(logits, y, reduction="sum")
    (grad,) = torch.autograd.grad(loss, x, create_graph=create_graph)
    return grad, logits


def _alignment(g1: torch.Tensor, g2: torch.Tensor) -> torch.Tensor:
    g1, g2 = g1.flatten(1), g2.flatten(1)
    n1, n2 = g1.norm(dim=1), g2.norm(dim=1)
    valid = (n1 > 0) & (n2 > 0)
    if not bool(valid.all()):
        logger.warning("gradient alignment: %d zero-gradient samples contribute 0", int((~valid).sum()))
    denom = torch.where(valid, n1 * n2, torch.ones_like(n1))
    cos = ((g1 * g2).sum(dim=1) / denom).clamp(-1.0, 1.0)
    return torch.where(valid, 1 - cos, torch.zeros_like(cos)).mean()


def grad_align(model: nn.Module, x: torch.Tensor, y: torch.Tensor, epsilon: float,
               generator: Optional[torch.Generator] = None, eta: Optional[torch.Tensor] = None,
               clean_grad: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean of 1 - cos(grad at x, grad at x + eta) with eta ~ U[-epsilon, epsilon].

    Differentiable w.r.t. the model parameters. Samples where either gradient
    vanishes contribute 0.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if eta is None:
        eta = (torch.rand(x.shape, generator=generator, dtype=x.dtype) * 2 - 1) * epsilon
    if clean_grad is None:
        clean_grad, _ = input_gradients(model, x, y)
    noisy_grad, _ = input_gradients(model, x + eta, y)
    return _alignment(clean_grad, noisy_grad)


def total_loss(model: nn.Module, x: torch.Tensor, y: torch.Tensor, x_adv: torch.Tensor, lam: float,
               epsilon: float, generator: Optional[torch.Generator] = None, eta: Optional[torch.Tensor] = None,
               clean_grad: Optional[torch.Tensor] = None):
    """Cross-entropy at x_adv plus lam * gradient alignment at the clean batch.

    Returns (loss, ce, align) with ``align`` a tensor (0 when lam == 0).
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    ce = F.cross_entropy(model(x_adv), y)
    if lam == 0 or epsilon <= 0:
        align = torch.zeros((), dtype=ce.dtype)
    else:
        align = grad_align(model, x, y, epsilon, generator, eta, clean_grad)
    return ce + lam * align, ce, align


class HitRateMonitor:
    """Rolling mean of per-batch hit rates with an edge-triggered alarm.

    Fires once when the window is full and its mean is below ``rate_min``;
    :meth:`rearm` (called after retraining) clears the window and re-enables it.
    """

    def __init__(self, window: int = 10, rate_min: float = 0.9):
        self.rates = deque(maxlen=window)
        self.rate_min = rate_min
        self.armed = True

    def push(self, rate: float) -> bool:
        self.rates.append(rate)
        if self.armed and len(self.rates) == self.rates.maxlen and self.mean() < self.rate_min:
            self.armed = False
            return True
        return False

    def mean(self) -> float:
        return float(np.mean(self.rates)) if self.rates else float("nan")

    def rearm(self) -> None:
        self.rates.clear()
        self.armed = True

    def state_dict(self):
        return {"rates": list(self.rates), "armed": self.armed}

    def load_state_dict(self, d):
        self.rates.clear()
        self.rates.extend(d["rates"])
        self.armed = d["armed"]


def resolved(results, config: SearchConfig) -> torch.Tensor:
    """Band hits, plus samples pushed to epsilon_max that are still above the band.

    A sample of the second kind has no reachable boundary inside the current
    budget, so epsilon_max is already the right answer for it.
    """
    hit = torch.tensor([r.hit for r in results], dtype=torch.bool)
    saturated = torch.tensor([r.epsilon_total >= config.epsilon_max - 1e-12 and r.l_rd_final > config.band.upper
                              for r in results], dtype=torch.bool)
    return hit | saturated


class MetricsLog:
    """Line-delimited JSON metric records, kept in memory and optionally on disk."""

    def __init__(self, path=None):
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: dict) -> None:
        self.records.append(record)
        if self.path:
            with open(self.path, "a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")


def _set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr


def make_optimizer(model: nn.Module, config: TrainConfig):
    return torch.optim.SGD(model.parameters(), lr=config.lr_min, momentum=config.momentum,
                           weight_decay=config.weight_decay)


def save_checkpoint(path, model, opt, epoch, config, agent=None, monitor=None, generator=None, extra=None):
    state = {
        "format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
        "epoch": epoch, "model": model.state_dict(), "optimizer": opt.state_dict(),
        "config": asdict(config),
        "generator": generator.get_state() if generator is not None else None,
        "monitor": monitor.state_dict() if monitor is not None else None,
        "agent": agent.state_dict(include_buffer=True) if agent is not None else None,
    }
    state.update(extra or {})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(state, path)


def load_checkpoint(path) -> dict:
    state = torch.load(path, weights_only=False)
    if state.get("format") != CHECKPOINT_FORMAT or state.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} checkpoint")
    return state


def _finite_or_abort(loss, model, opt, epoch, config, out_dir, **kw):
    if torch.isfinite(loss):
        return
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "diverged.pt", model, opt, epoch, config, **kw)
    raise TrainingDiverged(f"non-finite loss {loss.item()} at epoch {epoch}")


def retrain_policy(handle: ClassifierHandle, agent, x, y, direction, clean_probs, search_config: SearchConfig,
                   rc: RewardConfig, config: TrainConfig) -> dict:
    """SAC updates interleaved with fresh episodes on the given batch.

    Each round records one exploratory and one greedy pass over the batch and
    then runs ``retrain_updates_per_round`` updates. Stops once the greedy pass
    resolves at least ``rate_min`` of the samples or the update cap is hit.
    """
    updates, rate = 0, 0.0
    while True:
        rl_search(handle, x, y, direction, agent, search_config, rc, record=True, deterministic=False,
                  clean_probs=clean_probs)
        greedy = rl_search(handle, x, y, direction, agent, search_config, rc, record=True, deterministic=True,
                           clean_probs=clean_probs)
        rate = float(resolved(greedy, search_config).float().mean())
        if rate >= config.rate_min or updates >= config.retrain_max_updates:
            break
        for _ in range(config.retrain_updates_per_round):
            if agent.update() is not None:
                updates += 1
        if len(agent.buffer) < agent.config.batch_size:
            # nothing to learn from yet; collecting more episodes is all we can do
            updates += config.retrain_updates_per_round
    return {"updates": updates, "rate": rate}


def train_adaptive(handle: ClassifierHandle, dataset, agent, config: TrainConfig, search_config: SearchConfig,
                   rc: RewardConfig, metrics: Optional[MetricsLog] = None, out_dir=None, resume=None,
                   checkpoint_every: int = 1, max_batches: Optional[int] = None):
    """Adaptive-perturbation adversarial training.

    Per batch: one clean forward/backward gives the screening probabilities,
    the sign direction and the clean gradient reused by the alignment term;
    correctly classified samples get an epsilon from the policy (misclassified
    ones stay clean); the classifier then takes one SGD step on the combined
    loss. ``search_config.epsilon_max`` follows :func:`epsilon_schedule`.
    """
    model = handle.model
    metrics = metrics or MetricsLog()
    opt = make_optimizer(model, config)
    gen = torch.Generator().manual_seed(config.seed)
    monitor = HitRateMonitor(config.rolling_window, config.rate_min)
    start_epoch = 0
    if resume is not None:
        state = load_checkpoint(resume)
        model.load_state_dict(state["model"])
        opt.load_state_dict(state["optimizer"])
        gen.set_state(state["generator"])
        monitor.load_state_dict(state["monitor"])
        agent.load_state_dict(state["agent"])
        start_epoch = state["epoch"] + 1
    steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
    pending_updates = 0.0
    batches_done = 0
    for epoch in range(start_epoch, config.epochs):
        for b, (x, y) in enumerate(dataset.batches(config.batch_size, seed=config.seed, epoch=epoch,
                                                   augment=config.augment)):
            step = epoch * steps_per_epoch + b
            eps_cur = epsilon_schedule(epoch + b / steps_per_epoch, config)
            lr = cyclic_lr(step, config, steps_per_epoch)
            _set_lr(opt, lr)

            model.train()
            clean_grad, logits = input_gradients(model, x, y, create_graph=config.lam > 0)
            probs = F.softmax(logits.detach(), dim=1)
            direction = torch.sign(clean_grad.detach())
            correct = probs.argmax(1) == y
            eps = torch.zeros(len(y), dtype=torch.float64)
            hit_rate = resolved_rate = None
            retrain = None
            idx = correct.nonzero().squeeze(1)
            if eps_cur > 0 and len(idx) > 0:
                scfg = replace(search_config, epsilon_max=eps_cur, epsilon_step=min(search_config.epsilon_step, eps_cur),
                               epsilon_hi=None, epsilon_scale=search_config.scale)
                model.eval()
                results = rl_search(handle, x[idx], y[idx], direction[idx], agent, scfg, rc, record=True,
                                    deterministic=True, clean_probs=probs[idx])
                eps[idx] = torch.tensor([r.epsilon_total for r in results], dtype=torch.float64)
                hit_rate = float(np.mean([r.hit for r in results]))
                resolved_rate = float(resolved(results, scfg).float().mean())
                pending_updates += config.policy_updates_per_step * sum(r.steps for r in results)
                while pending_updates >= 1:
                    agent.update()
                    pending_updates -= 1
                if monitor.push(resolved_rate):
                    retrain = retrain_policy(handle, agent, x[idx], y[idx], direction[idx], probs[idx], scfg, rc, config)
                    monitor.rearm()
                model.train()
            eps = eps.clamp(max=eps_cur)
            x_adv = perturb(x, direction, eps.to(x.dtype))
            loss, ce, align = total_loss(model, x, y, x_adv, config.lam, eps_cur, gen,
                                         clean_grad=clean_grad if config.lam > 0 else None)
            _finite_or_abort(loss, model, opt, epoch, config, out_dir, agent=agent, monitor=monitor, generator=gen)
            opt.zero_grad()
            loss.backward()
            opt.step()
            metrics.append({
                "epoch": epoch, "batch": b, "hit_rate": hit_rate, "resolved_rate": resolved_rate,
                "loss_ce": float(ce.detach()), "loss_align": float(align.detach()), "eps_mean": float(eps.mean()),
                "eps_top": float(eps.max()), "eps_max": eps_cur, "lr": lr, "policy_retrain_updates": retrain["updates"] if retrain else 0,
            })
            batches_done += 1
            if max_batches is not None and batches_done >= max_batches:
                return model, metrics
        if out_dir is not None and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
            save_checkpoint(Path(out_dir) / "checkpoint.pt", model, opt, epoch, config, agent, monitor, gen)
    return model, metrics


def fgsm_rs_example(model, x, y, epsilon, alpha, generator):
    """FGSM from a uniform random start, projected back to the epsilon ball."""
    delta = (torch.rand(x.shape, generator=generator, dtype=x.dtype) * 2 - 1) * epsilon
    delta = ((x + delta).clamp(0, 1) - x).requires_grad_(True)
    loss = F.cross_entropy(model(x + delta), y)
    (grad,) = torch.autograd.grad(loss, delta)
    delta = (delta.detach() + alpha * grad.sign()).clamp(-epsilon, epsilon)
    return (x + delta).clamp(0, 1)


def pgd_example(model, x, y, epsilon, alpha, steps, generator, random_start=True):
    delta = torch.zeros_like(x)
    if random_start:
        delta = (torch.rand(x.shape, generator=generator, dtype=x.dtype) * 2 - 1) * epsilon
        delta = (x + delta).clamp(0, 1) - x
    for _ in range(steps):
        delta.requires_grad_(True)
        loss = F.cross_entropy(model(x + delta), y)
        (grad,) = torch.autograd.grad(loss, delta)
        delta = (delta.detach() + alpha * grad.sign()).clamp(-epsilon, epsilon)
        delta = (x + delta).clamp(0, 1) - x
    return (x + delta).detach()


class PassCounter:
    """Counts backward passes through the classifier parameters."""

    def __init__(self):
        self.backward = 0


def train_baseline(kind: str, handle: ClassifierHandle, dataset, config: TrainConfig,
                   metrics: Optional[MetricsLog] = None, out_dir=None, resume=None,
                   counter: Optional[PassCounter] = None, max_batches: Optional[int] = None,
                   checkpoint_every: int = 1):
    """Train with one of the fixed-epsilon baselines.

    ``free_at`` replays each batch ``free_replays`` times, carrying the
    perturbation across replays and batches; it trains clean during the first
    ``warmup_epochs`` epochs. The other kinds follow :func:`epsilon_schedule`.
    """
    if kind not in BASELINE_KINDS or kind == "adaptive_rl":
        raise ValueError(f"unknown baseline {kind!r}; expected one of {BASELINE_KINDS[:-1]}")
    model = handle.model
    metrics = metrics or MetricsLog()
    counter = counter or PassCounter()
    opt = make_optimizer(model, config)
    gen = torch.Generator().manual_seed(config.seed)
    start_epoch = 0
    if resume is not None:
        state = load_checkpoint(resume)
        model.load_state_dict(state["model"])
        opt.load_state_dict(state["optimizer"])
        gen.set_state(state["generator"])
        start_epoch = state["epoch"] + 1
    steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
    free_delta = None
    batches_done = 0
    for epoch in range(start_epoch, config.epochs):
        for b, (x, y) in enumerate(dataset.batches(config.batch_size, seed=config.seed, epoch=epoch,
                                                   augment=config.augment)):
            step = epoch * steps_per_epoch + b
            eps = epsilon_schedule(epoch + b / steps_per_epoch, config)
            lr = cyclic_lr(step, config, steps_per_epoch)
            _set_lr(opt, lr)
            model.train()
            align = torch.zeros(())
            if kind == "free_at" and epoch >= config.warmup_epochs:
                if free_delta is None or free_delta.shape != x.shape:
                    free_delta = torch.zeros_like(x)
                for _ in range(config.free_replays):
                    delta = free_delta.clone().requires_grad_(True)
                    ce = F.cross_entropy(model((x + delta).clamp(0, 1)), y)
                    _finite_or_abort(ce, model, opt, epoch, config, out_dir, generator=gen)
                    opt.zero_grad()
                    ce.backward()
                    counter.backward += 1
                    opt.step()
                    free_delta = (free_delta + config.epsilon_max * delta.grad.sign()).clamp(-config.epsilon_max, config.epsilon_max)
                loss = ce
            else:
                if kind in ("standard", "free_at") or eps <= 0:
                    x_train = x
                elif kind in ("fgsm_rs", "fgsm_align"):
                    x_train = fgsm_rs_example(model, x, y, eps, config.fgsm_alpha_ratio * eps, gen)
                else:
                    x_train = pgd_example(model, x, y, eps, config.pgd_alpha, config.pgd_steps, gen)
                lam = config.lam if kind == "fgsm_align" else 0.0
                loss, ce, align = total_loss(model, x, y, x_train, lam, eps, gen)
                _finite_or_abort(loss, model, opt, epoch, config, out_dir, generator=gen)
                opt.zero_grad()
                loss.backward()
                counter.backward += 1
                opt.step()
            metrics.append({"epoch": epoch, "batch": b, "hit_rate": None, "loss_ce": float(ce.detach()),
                            "loss_align": float(align.detach()), "eps_mean": float(eps), "lr": lr})
            batches_done += 1
            if max_batches is not None and batches_done >= max_batches:
                return model, metrics
        if out_dir is not None and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
            save_checkpoint(Path(out_dir) / "checkpoint.pt", model, opt, epoch, config, generator=gen)
    return model, metrics


def train_search_policy(handle: ClassifierHandle, dataset, agent, search_config: SearchConfig, rc: RewardConfig,
                        batch_size: int = 128, epochs: int = 1, updates_per_step: float = 1.0,
                        max_updates: Optional[int] = None, seed: int = 0, rolling_window: int = 10,
                        metrics: Optional[MetricsLog] = None, max_batches: Optional[int] = None) -> MetricsLog:
    """Fit the step-size policy against a frozen classifier.

    Each batch is screened, its correctly classified samples run one
    exploratory recorded episode, then ``updates_per_step`` SAC updates are
    taken per stored transition (fractional rates accumulate across batches).
    ``max_updates`` caps the total. Logged per batch: the episode hit rate and
    its rolling mean over ``rolling_window`` batches.
    """
    metrics = metrics or MetricsLog()
    model = handle.model
    model.eval()
    window = deque(maxlen=rolling_window)
    pending = 0.0
    batches = 0
    for epoch in range(epochs):
        for b, (x, y) in enumerate(dataset.batches(batch_size, seed=seed, epoch=epoch)):
            with torch.no_grad():
                probs = F.softmax(model(x), dim=1)
            ok = probs.argmax(1) == y
            if not ok.any():
                continue
            x, y, probs = x[ok], y[ok], probs[ok]
            direction = torch.sign(handle.input_grad(x, y))
            results = rl_search(handle, x, y, direction, agent, search_config, rc, record=True,
                                deterministic=False, clean_probs=probs)
            rate = float(np.mean([r.hit for r in results]))
            window.append(rate)
            pending += updates_per_step * sum(r.steps for r in results)
            while pending >= 1 and (max_updates is None or agent.updates < max_updates):
                agent.update()
                pending -= 1
            if max_updates is not None and agent.updates >= max_updates:
                pending = 0.0
            metrics.append({"epoch": epoch, "batch": b, "hit_rate": rate, "rolling_hit_rate": float(np.mean(window)),
                            "updates": agent.updates, "forwards": int(sum(r.forwards for r in results))})
            batches += 1
            if max_batches is not None and batches >= max_batches:
                return metrics
    return metrics
