"""Fast oracle checks runnable without the test suite (``margin-rl selftest``)."""
from __future__ import annotations

import math

import torch
from scipy.integrate import quad

from .margin import HitBand, absolute_distance_oracle, perturb
from .models import SyntheticLinearSpec, analytic_margin, build_model
from .search import RewardConfig, SearchConfig, binary_search, p_lower_bound, p_min, reward
from .training import grad_align


def _logistic(t):
    return 1.0 / (1.0 + math.exp(-t))


def check_p_bound():
    band = HitBand(0.0, 0.1)
    ref = quad(_logistic, 0.0, 1.0, epsabs=1e-12)[0] + quad(_logistic, 0.1, 1.0, epsabs=1e-12)[0]
    err = abs(p_lower_bound(band) - ref)
    return err < 1e-6, f"closed form vs quadrature differ by {err:.2e}"


def check_positive_hit_episodes(n=20000, seed=0):
    g = torch.Generator().manual_seed(seed)
    rc = RewardConfig(p_value=p_min(10))
    lrd = torch.rand(n, 9, generator=g, dtype=torch.float64) * 2 - 1
    lrd = torch.where((lrd >= 0) & (lrd <= 0.1), lrd + 0.2, lrd)
    lengths = torch.randint(0, 10, (n,), generator=g)
    mask = torch.arange(9)[None, :] < lengths[:, None]
    totals = (reward(lrd, rc) * mask).sum(1) + rc.p_value
    return bool((totals > 0).all()), f"min hit-episode return {float(totals.min()):.4f}"


def check_additivity(n=200, seed=0):
    g = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(n):
        x = torch.rand(8, generator=g, dtype=torch.float64)
        d = torch.randint(-1, 2, (8,), generator=g).to(torch.float64)
        steps = torch.rand(5, generator=g, dtype=torch.float64) * 0.05
        y = x
        for s in steps:
            y = perturb(y, d, float(s), clamp_domain=False)
        worst = max(worst, float((y - perturb(x, d, float(steps.sum()), clamp_domain=False)).abs().max()))
    return worst <= 1e-7, f"max deviation {worst:.2e}"


def check_linear_oracles(n=50, seed=0):
    spec = SyntheticLinearSpec((1.0, -0.5), 0.1)
    handle = build_model(spec)
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(n, 2, generator=g)
    y = handle.predict_probs(x).argmax(1)
    d = torch.sign(handle.input_grad(x, y))
    cfg = SearchConfig(step_max=20, epsilon_max=2.0, band=HitBand(0.0, 0.0), clamp_domain=False)
    res = binary_search(handle, x, y, d, cfg)
    worst_bin = worst_grid = 0.0
    for i, r in enumerate(res):
        truth = analytic_margin(spec, x[i])
        worst_bin = max(worst_bin, abs(r.epsilon_total - truth))
        scan = absolute_distance_oracle(handle, x[i], int(y[i]), d[i], 1e-3, 2.0, clamp_domain=False)
        worst_grid = max(worst_grid, abs(scan - truth))
    ok = worst_bin <= 2 * 2 ** -20 * 2.0 + 1e-6 and worst_grid <= 1e-3 + 1e-9
    return ok, f"bisection error {worst_bin:.2e}, grid error {worst_grid:.2e}"


def check_affine_alignment():
    # two-class affine logits: every input gradient is a positive multiple of w0 - w1
    torch.manual_seed(0)
    model = torch.nn.Sequential(torch.nn.Flatten(), torch.nn.Linear(12, 2)).double()
    x = torch.rand(16, 1, 3, 4, dtype=torch.float64)
    y = torch.randint(0, 2, (16,))
    omega = grad_align(model, x, y, 8 / 255, generator=torch.Generator().manual_seed(0)).item()
    return abs(omega) <= 1e-6, f"alignment penalty {omega:.2e}"


CHECKS = {
    "p_lower_bound": check_p_bound,
    "hit_episode_returns": check_positive_hit_episodes,
    "additivity": check_additivity,
    "linear_oracles": check_linear_oracles,
    "affine_alignment": check_affine_alignment,
}


def run_checks():
    out = []
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn()
        except Exception as e:  # report, do not crash the run
            ok, detail = False, f"{type(e).__name__}: {e}"
        out.append((name, bool(ok), detail))
    return out
