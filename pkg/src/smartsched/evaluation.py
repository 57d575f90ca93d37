"""Episode runner, policy-backed scheduler, and paired A/B comparison.

Paired mode drives two independent buffer sets with one recorded exogenous
stream per seed, so both schemes see identical channels and arrivals (the
recorded stream's digest goes into the report). Independent mode gives the
second scheme its own stream and exists only as a variance reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from smartsched.baselines import RbgContext, Scheduler, make_baseline, plan_tti
from smartsched.config import EnvConfig, RewardWeights, derive_int, make_rng
from smartsched.env import CellEnv
from smartsched.kpi import KpiWindow, step_reward
from smartsched.neural import ActorCritic, sample_action
from smartsched.trace import Trace, record_trace, replay_env


class DrlScheduler(Scheduler):
    """Scheduler backed by a policy network, reused RBG by RBG."""

    name = "drl"

    def __init__(self, agent: ActorCritic, greedy: bool = True, rng: np.random.Generator | None = None):
        self.agent = agent
        self.greedy = greedy
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def reset(self, env: CellEnv) -> None:
        super().reset(env)
        self.agent.check_num_ues(env.num_ues)
        self.scales = env.scales

    def choose(self, ctx: RbgContext) -> int:
        feats = self.scales.features(ctx.est_rate, ctx.avg_rate, ctx.spare_buffer, ctx.obs.hol_wait)
        out = self.agent.policy_forward(feats[None], ctx.active[None])
        return int(sample_action(out, self.rng, greedy=self.greedy)[0])


def make_scheduler(name: str, agent: ActorCritic | None = None, greedy: bool = True) -> Scheduler:
    if name == "drl":
        if agent is None:
            raise ValueError("the drl scheduler needs a checkpoint or an agent")
        return DrlScheduler(agent, greedy=greedy)
    return make_baseline(name)


@dataclass
class EpisodeResult:
    kpi: KpiWindow
    rows: list = field(default_factory=list)   # (tti, thp_step, jfi_to_date, dropped_step, reward)
    decisions: list = field(default_factory=list)

    @property
    def mean_reward(self) -> float:
        return float(np.mean([r[-1] for r in self.rows])) if self.rows else 0.0


def run_episode(env: CellEnv, scheduler: Scheduler, weights: RewardWeights,
                keep_decisions: bool = False) -> EpisodeResult:
    scheduler.reset(env)
    kpi = KpiWindow(env.num_ues)
    res = EpisodeResult(kpi)
    scale = env.num_ues * env.cfg.top_rate
    while not env.done:
        d = scheduler.decide(env)
        out = env.apply_decision(d)
        scheduler.observe_outcome(out)
        kpi.update(out)
        jfi = kpi.jfi
        r = step_reward(weights, out.thp, jfi, out.dropped, env.num_ues, scale)
        res.rows.append((out.tti, out.thp, jfi, out.dropped, r))
        if keep_decisions:
            res.decisions.append(out.decision.copy())
    return res


@dataclass
class SchemeSummary:
    name: str
    thp: float
    jfi: float
    pdr: float
    dropped: float
    reward: float

    def as_dict(self) -> dict:
        return {"scheme": self.name, "thp": self.thp, "jfi": self.jfi, "pdr": self.pdr,
                "dropped": self.dropped, "reward": self.reward}


@dataclass
class ComparisonReport:
    schemes: list[str]
    paired: bool
    windows: list[dict]                 # one row per (seed, scheme)
    summaries: dict[str, SchemeSummary]
    trace_digests: list[dict]           # per seed: digest consumed by each scheme
    kpi_rows: list[tuple] = field(default_factory=list)

    @property
    def baseline(self) -> str:
        return self.schemes[1]

    def ratios(self) -> dict[str, float | None]:
        a = self.summaries[self.schemes[0]]
        b = self.summaries[self.baseline]
        out = {}
        for key in ("thp", "jfi", "pdr", "dropped", "reward"):
            base = getattr(b, key)
            out[key] = getattr(a, key) / base if base > 0 else None
        return out

    def window_ratios(self, key: str = "thp") -> list[float]:
        """Per-seed ratio of scheme A's KPI to the baseline's."""
        by_seed: dict[int, dict[str, float]] = {}
        for w in self.windows:
            by_seed.setdefault(w["seed_index"], {})[w["scheme"]] = w[key]
        return [v[self.schemes[0]] / v[self.baseline] for _, v in sorted(by_seed.items())
                if v[self.baseline] > 0]

    def as_dict(self) -> dict:
        return {
            "schemes": self.schemes,
            "baseline": self.baseline,
            "paired": self.paired,
            "summaries": {k: v.as_dict() for k, v in self.summaries.items()},
            "ratios_vs_baseline": self.ratios(),
            "trace_digests": self.trace_digests,
        }


def eval_seeds(master: int, count: int, namespace: str = "eval") -> list[int]:
    return [derive_int(master, namespace, i) for i in range(count)]


def compare_schemes(env_cfg: EnvConfig, weights: RewardWeights, factories: dict, seeds: list[int],
                    paired: bool = True, traces: list[Trace] | None = None,
                    keep_rows: bool = False) -> ComparisonReport:
    """Run two schemes over the same horizon for each seed.

    ``factories`` maps scheme name -> zero-argument callable returning a fresh
    Scheduler; insertion order is (scheme, baseline).
    """
    names = list(factories)
    if len(names) != 2:
        raise ValueError("exactly two schemes are compared")
    windows, digests, rows = [], [], []
    if traces is not None:
        seeds = list(range(len(traces)))
    for i, seed in enumerate(seeds):
        shared = traces[i] if traces is not None else record_trace(env_cfg, seed)
        dig = {}
        for j, name in enumerate(names):
            trace = shared
            if not paired and j == 1:
                trace = record_trace(env_cfg, derive_int(seed, "independent"))
            env = replay_env(trace)
            res = run_episode(env, factories[name](), weights)
            thp, jfi, pdr = res.kpi.finalize()
            windows.append({"seed_index": i, "seed": trace.seed, "scheme": name, "thp": thp, "jfi": jfi,
                            "pdr": pdr, "dropped": res.kpi.dropped, "reward": res.mean_reward})
            dig[name] = trace.digest()
            if keep_rows:
                rows += [(i, name) + r for r in res.rows]
        digests.append({"seed_index": i, **dig})
    summaries = {}
    for name in names:
        ws = [w for w in windows if w["scheme"] == name]
        summaries[name] = SchemeSummary(
            name,
            thp=float(np.mean([w["thp"] for w in ws])),
            jfi=float(np.mean([w["jfi"] for w in ws])),
            pdr=float(np.mean([w["pdr"] for w in ws])),
            dropped=float(np.mean([w["dropped"] for w in ws])),
            reward=float(np.mean([w["reward"] for w in ws])),
        )
    return ComparisonReport(names, paired, windows, summaries, digests, rows)


def evaluate_agent(agent: ActorCritic, env_cfg: EnvConfig, weights: RewardWeights, seeds: list[int],
                   keep_rows: bool = False, greedy: bool = True, master: int = 0,
                   traces: list[Trace] | None = None) -> ComparisonReport:
    """Agent vs PF, paired, no parameter updates.

    Greedy by default; with ``greedy=False`` actions are sampled from a stream
    derived from ``master`` and the seed index, so the run is still reproducible.
    """
    counter = iter(range(1 << 30))

    def drl():
        rng = None if greedy else sampled_policy_rng(master, next(counter))
        return DrlScheduler(agent, greedy=greedy, rng=rng)

    return compare_schemes(env_cfg, weights, {"drl": drl, "pf": lambda: make_baseline("pf")},
                           seeds, paired=True, traces=traces, keep_rows=keep_rows)


def sampled_policy_rng(master: int, *path) -> np.random.Generator:
    return make_rng(master, "policy-sampling", *path)
