"""Margin geometry along the sign-gradient direction.

Everything here works on a frozen classifier: build the signed gradient once
at the clean input, move along it by a scalar amount, and read off how far the
true class is ahead of its strongest rival.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Optional, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

Number = Union[float, torch.Tensor]


class ClassifierHandle:
    """Wraps a classifier with softmax outputs, input gradients and a forward counter.

    ``forwards`` counts per-sample probability evaluations: a batch of ``n``
    inputs passed to :meth:`predict_probs` adds ``n``. Gradient computations are
    tracked separately in ``grad_calls`` so search budgets stay comparable.
    """

    def __init__(self, model: nn.Module, loss_fn: Optional[Callable] = None):
        self.model = model
        self.loss_fn = loss_fn or F.cross_entropy
        self._lock = threading.Lock()
        self._forwards = 0
        self._grad_calls = 0

    @property
    def forwards(self) -> int:
        return self._forwards

    @property
    def grad_calls(self) -> int:
        return self._grad_calls

    def _count(self, n: int) -> None:
        with self._lock:
            self._forwards += n

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.model(x)

    @torch.no_grad()
    def predict_probs(self, x: torch.Tensor) -> torch.Tensor:
        probs = F.softmax(self.model(x), dim=1)
        self._count(x.shape[0])
        return probs

    def input_grad(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        """Gradient of the summed loss w.r.t. each input (per-sample gradients)."""
        with torch.enable_grad():
            x = x.detach().clone().requires_grad_(True)
            loss = self.loss_fn(self.model(x), y, reduction="sum")
            (grad,) = torch.autograd.grad(loss, x)
        with self._lock:
            self._grad_calls += x.shape[0]
        return grad.detach()


@dataclass(frozen=True)
class HitBand:
    lower: float = 0.0
    upper: float = 0.1

    def __post_init__(self):
        if not self.lower <= 0.0 <= self.upper:
            raise ValueError(f"hit band must satisfy lower <= 0 <= upper, got ({self.lower}, {self.upper})")


@dataclass
class MarginSearchResult:
    epsilon_total: float
    l_rd_final: float
    hit: bool
    forwards: int
    steps: int


def gradient_direction(model: ClassifierHandle, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """sign(grad_x L(x, y)), computed once at the clean input."""
    return torch.sign(model.input_grad(x, y))


def _per_sample(eps: Number, x: torch.Tensor) -> Number:
    if isinstance(eps, torch.Tensor) and eps.dim() > 0:
        return eps.to(x.dtype).view(-1, *([1] * (x.dim() - 1)))
    return eps


def perturb(x: torch.Tensor, direction: torch.Tensor, epsilon_total: Number, clamp_domain: bool = True) -> torch.Tensor:
    """x + epsilon_total * direction, optionally clipped to [0, 1].

    ``epsilon_total`` is a scalar or one value per sample along dim 0.
    """
    if x.shape != direction.shape:
        raise ValueError(f"shape mismatch: x {tuple(x.shape)} vs direction {tuple(direction.shape)}")
    if isinstance(epsilon_total, torch.Tensor):
        if (epsilon_total < 0).any():
            raise ValueError("epsilon_total must be nonnegative")
    elif epsilon_total < 0:
        raise ValueError("epsilon_total must be nonnegative")
    if not isinstance(epsilon_total, torch.Tensor) and epsilon_total == 0:
        out = x.clone()
    else:
        out = x + _per_sample(epsilon_total, x) * direction
    if clamp_domain:
        out = out.clamp(0.0, 1.0)
    return out


def relative_distance_from_probs(probs: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """probs[k] - max_{i != k} probs[i] for each row."""
    if probs.shape[1] < 2:
        raise ValueError("relative distance needs at least two classes")
    k = k.view(-1, 1)
    p_true = probs.gather(1, k).squeeze(1)
    p_rival = probs.scatter(1, k, float("-inf")).max(dim=1).values
    return p_true - p_rival


def true_and_rival(probs: torch.Tensor, k: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    k = k.view(-1, 1)
    return probs.gather(1, k).squeeze(1), probs.scatter(1, k, float("-inf")).max(dim=1).values


def relative_distance(model: ClassifierHandle, x_adv: torch.Tensor, k) -> Union[float, torch.Tensor]:
    """Relative distance of ``x_adv`` to the boundary of class ``k``.

    A single unbatched input with an integer ``k`` returns a float; a batch
    returns a tensor. Each evaluated sample adds one to the forward counter.
    """
    single = isinstance(k, int)
    if single:
        x_adv = x_adv.unsqueeze(0)
        k = torch.tensor([k])
    probs = model.predict_probs(x_adv)
    l_rd = relative_distance_from_probs(probs, k)
    return float(l_rd[0]) if single else l_rd


def predicted_class(probs: torch.Tensor) -> torch.Tensor:
    # torch.argmax returns the first maximal index, i.e. ties go to the lowest class
    return probs.argmax(dim=1)


def absolute_distance_oracle(
    model: ClassifierHandle,
    x: torch.Tensor,
    y: int,
    direction: torch.Tensor,
    grid_step: float,
    epsilon_scan_max: float,
    clamp_domain: bool = True,
) -> Optional[float]:
    """Smallest grid epsilon at which the predicted class leaves ``y``.

    Brute-force scan over {0, grid_step, ..., epsilon_scan_max}; ``None`` when
    the label never flips inside the scan range.
    """
    if grid_step <= 0:
        raise ValueError("grid_step must be positive")
    n = int(epsilon_scan_max / grid_step + 1e-9) + 1
    grid = torch.arange(n, dtype=x.dtype) * grid_step
    for start in range(0, n, 512):
        eps = grid[start:start + 512]
        xs = perturb(x.unsqueeze(0).expand(len(eps), *x.shape), direction.unsqueeze(0).expand(len(eps), *x.shape), eps, clamp_domain)
        flipped = predicted_class(model.predict_probs(xs)) != y
        if flipped.any():
            return float(eps[int(flipped.nonzero()[0])])
    return None


def is_hit(l_rd: Number, band: HitBand):
    if isinstance(l_rd, torch.Tensor):
        return (l_rd >= band.lower) & (l_rd <= band.upper)
    return band.lower <= l_rd <= band.upper


def hit_rate(n_success: int, n_total: int) -> float:
    if n_total <= 0:
        raise ValueError("hit rate needs at least one screened sample")
    if not 0 <= n_success <= n_total:
        raise ValueError(f"n_success={n_success} outside [0, {n_total}]")
    return n_success / n_total
