"""Marginal-sample searches: fixed step, bisection and policy-driven steps.

All searches are batched over samples that the caller has already screened as
correctly classified. The screening probabilities are passed in as
``clean_probs`` so that ``result.forwards`` counts only evaluations made by
the search itself.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Protocol

import torch

from .margin import (
    ClassifierHandle,
    HitBand,
    MarginSearchResult,
    is_hit,
    perturb,
    predicted_class,
    relative_distance_from_probs,
    true_and_rival,
)


@dataclass
class SearchConfig:
    step_max: int = 10
    epsilon_max: float = 8 / 255
    band: HitBand = field(default_factory=HitBand)
    epsilon_step: float = 0.03
    epsilon_hi: Optional[float] = None
    clamp_domain: bool = True
    # divisor for the epsilon entries of the policy state; defaults to epsilon_max
    epsilon_scale: Optional[float] = None

    def __post_init__(self):
        if self.step_max < 1:
            raise ValueError("step_max must be >= 1")
        if self.epsilon_max <= 0:
            raise ValueError("epsilon_max must be positive")
        if self.epsilon_step <= 0 or self.epsilon_step > self.epsilon_max:
            raise ValueError("epsilon_step must lie in (0, epsilon_max]")
        if self.epsilon_hi is not None and not 0 < self.epsilon_hi <= self.epsilon_max:
            raise ValueError("epsilon_hi must lie in (0, epsilon_max]")

    @property
    def bracket_hi(self) -> float:
        return self.epsilon_max if self.epsilon_hi is None else self.epsilon_hi

    @property
    def scale(self) -> float:
        return self.epsilon_scale or self.epsilon_max


def sigmoid(t: float) -> float:
    return 1.0 / (1.0 + math.exp(-t))


def softplus(t: float) -> float:
    return math.log1p(math.exp(t))


def p_lower_bound(band: HitBand) -> float:
    """Smallest hit reward that keeps a hit episode's total reward positive.

    Sum of the logistic integrals from |lower| to 1 and from upper to 1,
    evaluated with the softplus antiderivative.
    """
    if not -1.0 <= band.lower <= 0.0 <= band.upper <= 1.0:
        raise ValueError(f"band ({band.lower}, {band.upper}) must lie inside [-1, 1]")
    return (softplus(1.0) - softplus(abs(band.lower))) + (softplus(1.0) - softplus(band.upper))


def p_min(step_max: int) -> float:
    if step_max < 1:
        raise ValueError("step_max must be >= 1")
    return step_max * sigmoid(1.0)


@dataclass(frozen=True)
class RewardConfig:
    band: HitBand = field(default_factory=HitBand)
    p_value: float = field(default_factory=lambda: p_min(10))

    def __post_init__(self):
        if self.p_value < p_lower_bound(self.band):
            raise ValueError(f"p_value {self.p_value} below the lower bound {p_lower_bound(self.band):.4f}")


def reward(l_rd, rc: RewardConfig):
    """+P inside the band, otherwise -sigmoid(|l_rd|). Works on floats and tensors."""
    if isinstance(l_rd, torch.Tensor):
        inside = is_hit(l_rd, rc.band)
        return torch.where(inside, torch.full_like(l_rd, rc.p_value), -torch.sigmoid(l_rd.abs()))
    if is_hit(l_rd, rc.band):
        return rc.p_value
    return -sigmoid(abs(l_rd))


class SearchState(NamedTuple):
    p_true: torch.Tensor
    p_rival: torch.Tensor
    eps_total_norm: torch.Tensor
    eps_last_norm: torch.Tensor

    def as_tensor(self) -> torch.Tensor:
        return torch.stack([self.p_true, self.p_rival, self.eps_total_norm, self.eps_last_norm], dim=1).float()


def _state(probs, y, eps_total, eps_last, config: SearchConfig) -> SearchState:
    p_true, p_rival = true_and_rival(probs, y)
    return SearchState(p_true, p_rival, eps_total / config.scale, eps_last / config.scale)


def build_state(model: ClassifierHandle, x, y, direction, eps_total, eps_last, config: SearchConfig) -> SearchState:
    eps_total = torch.as_tensor(eps_total, dtype=torch.float64).expand(len(y)).clone()
    eps_last = torch.as_tensor(eps_last, dtype=torch.float64).expand(len(y)).clone()
    probs = model.predict_probs(perturb(x, direction, eps_total.to(x.dtype), config.clamp_domain))
    return _state(probs.double(), y, eps_total, eps_last, config)


class _Probe:
    """Evaluates a subset of the batch at per-sample epsilons."""

    def __init__(self, model, x, y, direction, config):
        self.model, self.x, self.y, self.direction, self.config = model, x, y, direction, config

    def __call__(self, idx, eps):
        x_adv = perturb(self.x[idx], self.direction[idx], eps.to(self.x.dtype), self.config.clamp_domain)
        probs = self.model.predict_probs(x_adv).double()
        y = self.y[idx]
        return probs, relative_distance_from_probs(probs, y), predicted_class(probs) == y


def _clean(model, x, y, clean_probs):
    if clean_probs is None:
        clean_probs = model.predict_probs(x)
    return clean_probs.double()


def _results(eps, lrd, hit, forwards, steps):
    return [MarginSearchResult(float(e), float(l), bool(h), int(f), int(s))
            for e, l, h, f, s in zip(eps, lrd, hit, forwards, steps)]


def fixed_step_search(model, x, y, direction, config: SearchConfig, clean_probs=None) -> list[MarginSearchResult]:
    """Step by +/- epsilon_step depending on whether the label still holds.

    Returns the visited point with the lowest nonnegative relative distance,
    or the first band hit (which stops that sample's search).
    """
    n = len(y)
    probe = _Probe(model, x, y, direction, config)
    clean = _clean(model, x, y, clean_probs)
    eps = torch.zeros(n, dtype=torch.float64)
    best_eps = eps.clone()
    best_lrd = relative_distance_from_probs(clean, y)
    hit = torch.zeros(n, dtype=torch.bool)
    prev_correct = torch.ones(n, dtype=torch.bool)
    forwards = torch.zeros(n, dtype=torch.long)
    active = torch.ones(n, dtype=torch.bool)
    step = config.epsilon_step
    for _ in range(config.step_max):
        idx = active.nonzero().squeeze(1)
        if len(idx) == 0:
            break
        moved = torch.where(prev_correct[idx], eps[idx] + step, eps[idx] - step)
        eps[idx] = moved.clamp(0.0, config.epsilon_max)
        _, lrd, correct = probe(idx, eps[idx])
        forwards[idx] += 1
        landed = is_hit(lrd, config.band)
        better = landed | ((lrd >= 0) & (lrd < best_lrd[idx]) & ~hit[idx])
        best_eps[idx] = torch.where(better, eps[idx], best_eps[idx])
        best_lrd[idx] = torch.where(better, lrd, best_lrd[idx])
        hit[idx] |= landed
        prev_correct[idx] = correct
        active[idx] = ~landed
    return _results(best_eps, best_lrd, is_hit(best_lrd, config.band), forwards, forwards)


def binary_search(model, x, y, direction, config: SearchConfig, clean_probs=None,
                  trace: Optional[list] = None) -> list[MarginSearchResult]:
    """Bisection on [0, epsilon_hi] with the low end correct and the high end flipped.

    If the label survives at epsilon_hi that point is returned as is. A band
    hit at any probe ends the sample's search. ``trace`` (optional) collects
    (lo, hi, active) snapshots after each bisection step.
    """
    n = len(y)
    probe = _Probe(model, x, y, direction, config)
    clean = _clean(model, x, y, clean_probs)
    all_idx = torch.arange(n)
    lo = torch.zeros(n, dtype=torch.float64)
    lo_lrd = relative_distance_from_probs(clean, y)
    hi = torch.full((n,), float(config.bracket_hi), dtype=torch.float64)
    out_eps, out_lrd = hi.clone(), torch.zeros(n, dtype=torch.float64)
    forwards = torch.zeros(n, dtype=torch.long)

    _, hi_lrd, hi_correct = probe(all_idx, hi)
    forwards += 1
    out_lrd[:] = hi_lrd
    finished = hi_correct | is_hit(hi_lrd, config.band)
    active = ~finished
    for _ in range(config.step_max):
        idx = active.nonzero().squeeze(1)
        if len(idx) == 0:
            break
        mid = (lo[idx] + hi[idx]) / 2
        _, lrd, correct = probe(idx, mid)
        forwards[idx] += 1
        landed = is_hit(lrd, config.band)
        out_eps[idx] = torch.where(landed, mid, out_eps[idx])
        out_lrd[idx] = torch.where(landed, lrd, out_lrd[idx])
        lo[idx] = torch.where(correct & ~landed, mid, lo[idx])
        lo_lrd[idx] = torch.where(correct & ~landed, lrd, lo_lrd[idx])
        hi[idx] = torch.where(~correct & ~landed, mid, hi[idx])
        active[idx] = ~landed
        finished[idx] = landed
        if trace is not None:
            trace.append((lo.clone(), hi.clone(), active.clone()))
    # unfinished samples fall back to the correctly classified end of the bracket
    out_eps = torch.where(finished, out_eps, lo)
    out_lrd = torch.where(finished, out_lrd, lo_lrd)
    return _results(out_eps, out_lrd, is_hit(out_lrd, config.band), forwards, forwards)


class Policy(Protocol):
    action_low: float
    action_high: float

    def select_action(self, states: torch.Tensor, deterministic: bool = False) -> torch.Tensor: ...

    def store_batch(self, state, action, reward, next_state, done) -> None: ...


def rl_search(model, x, y, direction, agent: Policy, config: SearchConfig, rc: RewardConfig,
              record: bool = False, deterministic: bool = True, clean_probs=None) -> list[MarginSearchResult]:
    """Policy-driven search: each step adds a signed increment to epsilon_total.

    An episode ends on a band hit (positive reward) or after step_max steps.
    epsilon_total is kept inside [0, epsilon_max] after every step. With
    ``record`` the transitions go to ``agent.store_batch``.
    """
    n = len(y)
    probe = _Probe(model, x, y, direction, config)
    clean = _clean(model, x, y, clean_probs)
    eps = torch.zeros(n, dtype=torch.float64)
    last = torch.zeros(n, dtype=torch.float64)
    state = _state(clean, y, eps, last, config).as_tensor()
    lrd_final = relative_distance_from_probs(clean, y)
    hit = torch.zeros(n, dtype=torch.bool)
    forwards = torch.zeros(n, dtype=torch.long)
    active = torch.ones(n, dtype=torch.bool)
    for step in range(1, config.step_max + 1):
        idx = active.nonzero().squeeze(1)
        if len(idx) == 0:
            break
        s0 = state[idx]
        with torch.no_grad():
            action = agent.select_action(s0, deterministic=deterministic)
        action = torch.as_tensor(action, dtype=torch.float64).reshape(-1)
        action = action.clamp(agent.action_low, agent.action_high)
        eps[idx] = (eps[idx] + action).clamp(0.0, config.epsilon_max)
        last[idx] = action
        probs, lrd, _ = probe(idx, eps[idx])
        forwards[idx] += 1
        r = reward(lrd, rc)
        landed = is_hit(lrd, config.band)
        done = landed | (step == config.step_max)
        s1 = _state(probs, y[idx], eps[idx], action, config).as_tensor()
        if record:
            agent.store_batch(s0, action.float(), r.float(), s1, done)
        state[idx] = s1
        lrd_final[idx] = lrd
        hit[idx] = landed
        active[idx] = ~done
    return _results(eps, lrd_final, hit, forwards, forwards)


SEARCHERS = {"fixed": fixed_step_search, "binary": binary_search, "rl": rl_search}
