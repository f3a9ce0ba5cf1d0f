"""Marginal adversarial sample search with a learned step-size policy, and
adaptive-perturbation adversarial training built on it."""
from .margin import (ClassifierHandle, HitBand, MarginSearchResult, absolute_distance_oracle, gradient_direction,
                     hit_rate, is_hit, perturb, relative_distance)
from .search import (RewardConfig, SearchConfig, SearchState, binary_search, build_state, fixed_step_search,
                     p_lower_bound, p_min, reward, rl_search)
from .sac import AgentConfig, ReplayBuffer, SACAgent, Transition
from .models import SyntheticLinearSpec, analytic_margin, build_model

__version__ = "0.1.0"
