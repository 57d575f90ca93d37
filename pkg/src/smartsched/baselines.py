"""Round-robin, Max C/I, Max-Min and proportional-fair schedulers.

Selectors are pure functions returning a UE index, or ``None`` when nobody is
active (an idle grant). Ties always go to the lowest UE index. Multi-RBG TTIs
are scheduled RBG by RBG through :func:`plan_tti`, which masks UEs whose
buffers the earlier grants of the same TTI have already emptied.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from smartsched.env import CellEnv, Observation, StepOutcome

PF_EPS = 1e-6


def _argmax_active(score, active) -> int | None:
    active = np.asarray(active, dtype=bool)
    if not active.any():
        return None
    s = np.where(active, np.asarray(score, dtype=float), -np.inf)
    return int(np.argmax(s))  # first maximum


def rr_select(active_mask, last_served: int | None) -> int | None:
    active = np.asarray(active_mask, dtype=bool)
    K = len(active)
    start = -1 if last_served is None else int(last_served)
    for step in range(1, K + 1):
        k = (start + step) % K
        if active[k]:
            return k
    return None


def max_ci_select(estimated_rates, active_mask) -> int | None:
    return _argmax_active(estimated_rates, active_mask)


def max_min_select(avg_throughputs, active_mask) -> int | None:
    return _argmax_active(-np.asarray(avg_throughputs, dtype=float), active_mask)


@dataclass
class PfState:
    num_ues: int
    window: int = 100
    avg: np.ndarray = field(default=None)

    def __post_init__(self) -> None:
        if self.window < 1:
            raise ValueError("PF window must be >= 1")
        if self.avg is None:
            self.avg = np.zeros(self.num_ues)


def pf_select(estimated_rates, state: PfState, active_mask) -> int | None:
    t = np.maximum(state.avg, PF_EPS)
    return _argmax_active(np.asarray(estimated_rates, dtype=float) / t, active_mask)


def pf_update(state: PfState, served_rates) -> PfState:
    """Windowed average update; unserved UEs contribute a zero sample."""
    w = state.window
    state.avg = (w - 1) / w * state.avg + np.asarray(served_rates, dtype=float) / w
    return state


# --- per-TTI planning ---------------------------------------------------------

@dataclass
class RbgContext:
    """Provisional view of one RBG decision inside a TTI."""

    rbg: int
    obs: Observation
    est_rate: np.ndarray      # (K,) achievable bits on this RBG
    remaining: np.ndarray     # (K,) queued bits not yet granted this TTI
    avg_rate: np.ndarray      # (K,) average rate including provisional grants
    active: np.ndarray        # (K,) bool: remaining > 0

    @property
    def spare_buffer(self) -> np.ndarray:
        return self.obs.spare_buffer + (self.obs.queued_bits - self.remaining)


def plan_tti(obs: Observation, choose, avg_window: int) -> np.ndarray:
    """Run ``choose(ctx) -> UE | None`` for each RBG, updating the provisional state."""
    K, B = obs.est_rate_rbg.shape
    remaining = obs.queued_bits.astype(float).copy()
    avg = obs.avg_rate.astype(float).copy()
    decision = np.full(B, -1, dtype=np.int64)
    for b in range(B):
        active = remaining > 0
        if not active.any():
            break
        rates = obs.est_rate_rbg[:, b]
        k = choose(RbgContext(b, obs, rates, remaining.copy(), avg.copy(), active))
        if k is None or k < 0:
            continue
        decision[b] = k
        grant = min(rates[k], remaining[k])
        remaining[k] -= grant
        avg[k] += grant / avg_window
    return decision


class Scheduler:
    """Base class: ``decide(env)`` returns the per-RBG decision, ``observe_outcome`` updates state."""

    name = "base"

    def reset(self, env: CellEnv) -> None:
        self.avg_window = env.cfg.avg_window

    def decide(self, env: CellEnv) -> np.ndarray:
        return plan_tti(env.observe(), self.choose, env.cfg.avg_window)

    def choose(self, ctx: RbgContext) -> int | None:
        raise NotImplementedError

    def observe_outcome(self, outcome: StepOutcome) -> None:
        pass


class RoundRobin(Scheduler):
    name = "rr"

    def reset(self, env):
        super().reset(env)
        self.last = None

    def choose(self, ctx):
        k = rr_select(ctx.active, self.last)
        if k is not None:
            self.last = k
        return k


class MaxCI(Scheduler):
    name = "maxci"

    def choose(self, ctx):
        return max_ci_select(ctx.est_rate, ctx.active)


class MaxMin(Scheduler):
    name = "maxmin"

    def choose(self, ctx):
        return max_min_select(ctx.avg_rate, ctx.active)


class ProportionalFair(Scheduler):
    """PF with its own average tracker, updated once per TTI with delivered bits."""

    name = "pf"

    def __init__(self, window: int | None = None):
        self.window = window
        self.selections: list[np.ndarray] | None = None

    def reset(self, env):
        super().reset(env)
        self.state = PfState(env.num_ues, self.window or env.cfg.avg_window)

    def choose(self, ctx):
        # T held fixed across the RBGs of one TTI
        return pf_select(ctx.est_rate, self.state, ctx.active)

    def observe_outcome(self, outcome):
        pf_update(self.state, outcome.delivered_bits)


BASELINES = {cls.name: cls for cls in (RoundRobin, MaxCI, MaxMin, ProportionalFair)}


def make_baseline(name: str) -> Scheduler:
    try:
        return BASELINES[name]()
    except KeyError:
        raise ValueError(f"unknown baseline scheduler {name!r}") from None
