"""Advantage actor-critic training with n-step TD advantages.

Each update collects ``n_steps`` TTIs from every environment (run in lockstep
so the policy is evaluated once per RBG across all of them), forms n-step
advantages, and takes one gradient step on

    -(sum_i A_i log pi(a_i|s_i) + lambda_e * sum_i H(pi(.|s_i))) + lambda_v * sum_i A_i^2

with A_i held constant in the policy term and the value gradient flowing
through V(s_t) only. A TTI with several RBGs yields one experience holding
every RBG decision; all of them share the TTI reward and advantage.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from smartsched.config import EnvConfig, RewardWeights, TrainConfig, derive_int, make_rng
from smartsched.env import CellEnv, LiveSource
from smartsched.baselines import make_baseline
from smartsched.evaluation import eval_seeds, evaluate_agent, run_episode
from smartsched.kpi import KpiWindow, step_reward
from smartsched.neural import ActorCritic, policy_loss_grad, sample_action
from smartsched.trace import Trace, replay_env

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class Experience:
    policy_states: np.ndarray   # (B, K, 4) normalized features seen at each RBG decision
    masks: np.ndarray           # (B, K) provisional active masks
    actions: np.ndarray         # (B,) chosen UE, -1 where no UE was active
    value_state: np.ndarray     # (K, 4) TTI-level features
    reward: float
    terminal: bool


@dataclass
class Trajectory:
    experiences: list[Experience]
    bootstrap_state: np.ndarray | None   # features after the last step; None if it was terminal

    def __len__(self) -> int:
        return len(self.experiences)


def compute_advantages(rewards, values, terminals, bootstrap_value: float, gamma: float, n: int):
    """n-step TD advantages along one trajectory.

    ``values[t]`` is V(s_t); ``bootstrap_value`` is V of the state after the
    last step. Steps within n of the end use the remaining horizon; a terminal
    step bootstraps with 0 and stops reward accumulation.
    Returns (advantages, n-step returns).
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    term = np.asarray(terminals, dtype=bool)
    T = len(r)
    adv = np.zeros(T)
    ret = np.zeros(T)
    for t in range(T):
        g = 0.0
        disc = 1.0
        boot = None
        j = t
        while j < min(t + n, T):
            g += disc * r[j]
            disc *= gamma
            if term[j]:
                boot = 0.0
                break
            j += 1
        if boot is None:
            boot = v[j] if j < T else bootstrap_value
        g += disc * boot
        ret[t] = g
        adv[t] = g - v[t]
    return adv, ret


def discounted_oracle(rewards, gamma: float, horizon: int) -> float:
    """Brute-force sum_{j<horizon} gamma^j r_j."""
    return float(sum(gamma ** j * rewards[j] for j in range(horizon)))


_PF_CACHE: dict = {}


def pf_reference(env: CellEnv, weights: RewardWeights) -> list[float]:
    """Per-TTI PF rewards on ``env``'s exogenous stream (cached for live sources)."""
    key = None
    if isinstance(env.source, LiveSource):
        key = (json.dumps(dataclasses.asdict(env.cfg), sort_keys=True), env.seed, dataclasses.astuple(weights))
        hit = _PF_CACHE.get(key)
        if hit is not None:
            return hit
    rewards = [row[-1] for row in run_episode(env, make_baseline("pf"), weights).rows]
    if key is not None:
        if len(_PF_CACHE) > 4096:
            _PF_CACHE.clear()
        _PF_CACHE[key] = rewards
    return rewards


class EnvSlot:
    """One training environment plus its running KPI window and episode counter.

    Each episode is paired with a PF run over the same exogenous stream, so
    every training step has a same-TTI PF reward to compare against.
    """

    def __init__(self, factory: Callable[[int], CellEnv], weights: RewardWeights, pf_reference: bool = True):
        self.factory = factory
        self.weights = weights
        self.track_pf = pf_reference
        self.episode = 0
        self._start()

    def _start(self) -> None:
        self.env = self.factory(self.episode)
        self.kpi = KpiWindow(self.env.num_ues)
        self.scale = self.env.num_ues * self.env.cfg.top_rate
        self.pf_rewards = pf_reference(self.factory(self.episode), self.weights) if self.track_pf else None
        self.t = 0

    def step(self, decision) -> tuple[float, bool, float]:
        """Apply one TTI; returns (reward, terminal, PF reward at the same TTI)."""
        out = self.env.apply_decision(decision)
        self.kpi.update(out)
        r = step_reward(self.weights, out.thp, self.kpi.jfi, out.dropped, self.env.num_ues, self.scale)
        pf = self.pf_rewards[self.t] if self.pf_rewards is not None else math.nan
        self.t += 1
        if out.done:
            self.episode += 1
            self._start()
        return r, out.done, pf


def multi_rbg_rollout(envs: list[CellEnv], agent: ActorCritic, rng: np.random.Generator | None,
                      greedy: bool = False):
    """Choose one TTI's decisions for every env, reusing the policy RBG by RBG.

    Returns (decisions (E, B), policy_states (E, B, K, 4), masks (E, B, K), value_states (E, K, 4)).
    """
    E = len(envs)
    obs = [e.observe() for e in envs]
    sc = envs[0].scales
    K, B = obs[0].est_rate_rbg.shape
    queued = np.stack([o.queued_bits for o in obs])
    remaining = queued.copy()
    avg = np.stack([o.avg_rate for o in obs])
    spare0 = np.stack([o.spare_buffer for o in obs])
    hol = np.stack([o.hol_wait for o in obs])
    rates = np.stack([o.est_rate_rbg for o in obs])           # (E, K, B)
    vstates = np.stack([sc.tti_features(o) for o in obs])
    decisions = np.full((E, B), -1, dtype=np.int64)
    pstates = np.zeros((E, B, K, 4))
    masks = np.zeros((E, B, K), dtype=bool)
    for b in range(B):
        active = remaining > 0
        feats = sc.features(rates[:, :, b], avg, spare0 + (queued - remaining), hol)
        pstates[:, b] = feats
        masks[:, b] = active
        rows = np.flatnonzero(active.any(axis=1))
        if rows.size == 0:
            break
        out = agent.policy_forward(feats[rows], active[rows])
        acts = sample_action(out, rng, greedy=greedy)
        for e, k in zip(rows, acts):
            decisions[e, b] = k
            grant = min(rates[e, k, b], remaining[e, k])
            remaining[e, k] -= grant
            avg[e, k] += grant / envs[e].cfg.avg_window
    return decisions, pstates, masks, vstates


def sample_batch(slots: list[EnvSlot], agent: ActorCritic, n: int, rng: np.random.Generator,
                 pf_rewards: list | None = None) -> list[Trajectory]:
    """n interaction steps per environment with the current (stochastic) policy.

    Paired PF rewards for the same steps are appended to ``pf_rewards`` if given.
    """
    exps: list[list[Experience]] = [[] for _ in slots]
    for _ in range(n):
        envs = [s.env for s in slots]
        dec, pst, msk, vst = multi_rbg_rollout(envs, agent, rng)
        for i, slot in enumerate(slots):
            r, term, pf = slot.step(dec[i])
            if pf_rewards is not None:
                pf_rewards.append(pf)
            if not math.isfinite(r):
                raise TrainingError(f"non-finite reward in env {i}")
            exps[i].append(Experience(pst[i], msk[i], dec[i], vst[i], r, term))
    trajs = []
    for i, slot in enumerate(slots):
        last = exps[i][-1]
        boot = None if last.terminal else slot.env.scales.tti_features(slot.env.observe())
        trajs.append(Trajectory(exps[i], boot))
    return trajs


class Optimizer:
    """SGD or Adam over a list of parameter arrays, updated in place."""

    def __init__(self, params: list[np.ndarray], kind: str = "sgd", betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.kind = kind
        self.betas = betas
        self.eps = eps
        self.t = 0
        if kind == "adam":
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray], lr: float) -> None:
        self.t += 1
        if self.kind == "sgd":
            for p, g in zip(self.params, grads):
                p -= lr * g
            return
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    entropy: float
    mean_reward: float
    policy_grad_norm: float
    value_grad_norm: float


class A2CTrainer:
    def __init__(self, agent: ActorCritic, cfg: TrainConfig, rng: np.random.Generator):
        self.agent = agent
        self.cfg = cfg
        self.rng = rng
        self.pi_opt = Optimizer(agent.policy.params, cfg.optimizer)
        self.v_opt = Optimizer(agent.value.params, cfg.optimizer)
        self.updates = 0

    def learning_rate(self) -> float:
        c = self.cfg
        if c.lr_decay_after > 0 and self.updates >= c.lr_decay_after:
            return c.lr * c.lr_decay
        return c.lr

    def compute_update(self, trajs: list[Trajectory]) -> UpdateStats:
        cfg = self.cfg
        agent = self.agent
        vstates, rewards, terms, boots, lengths = [], [], [], [], []
        for tr in trajs:
            lengths.append(len(tr))
            for ex in tr.experiences:
                vstates.append(ex.value_state)
                rewards.append(ex.reward)
                terms.append(ex.terminal)
            boots.append(tr.bootstrap_state)
        values, vcache = agent.value_forward(np.stack(vstates))
        live = [b for b in boots if b is not None]
        boot_vals = agent.value_forward(np.stack(live))[0] if live else np.zeros(0)
        adv = np.zeros(len(rewards))
        pos = 0
        bi = 0
        for tr, L in zip(trajs, lengths):
            bv = 0.0
            if tr.bootstrap_state is not None:
                bv = float(boot_vals[bi])
                bi += 1
            sl = slice(pos, pos + L)
            adv[sl], _ = compute_advantages(rewards[sl], values[sl], terms[sl], bv, cfg.gamma, cfg.n_steps)
            pos += L

        # policy rows: every RBG decision that actually picked a UE
        pst, msk, act, radv = [], [], [], []
        i = 0
        for tr in trajs:
            for ex in tr.experiences:
                for b in range(len(ex.actions)):
                    if ex.actions[b] >= 0:
                        pst.append(ex.policy_states[b])
                        msk.append(ex.masks[b])
                        act.append(ex.actions[b])
                        radv.append(adv[i])
                i += 1
        p_loss = 0.0
        ent = 0.0
        pi_grads = [np.zeros_like(p) for p in agent.policy.params]
        if act:
            out = agent.policy_forward(np.stack(pst), np.stack(msk))
            p_loss, dlog = policy_loss_grad(out, np.array(act), np.array(radv), cfg.entropy_weight)
            ent = float(out.entropy().mean())
            pi_grads = agent.policy_grads(out, dlog)
        v_loss = cfg.value_weight * float(np.sum(adv ** 2))
        v_grads = agent.value.backward(vcache, (-2.0 * cfg.value_weight * adv)[:, None])
        if not (math.isfinite(p_loss) and math.isfinite(v_loss)):
            raise TrainingError(
                f"non-finite loss at update {self.updates}: policy={p_loss} value={v_loss}; "
                f"mean reward={np.mean(rewards)}, max |advantage|={np.max(np.abs(adv))}")
        pn = clip_by_global_norm(pi_grads, cfg.grad_clip)
        vn = clip_by_global_norm(v_grads, cfg.grad_clip)
        lr = self.learning_rate()
        self.pi_opt.step(pi_grads, lr)
        self.v_opt.step(v_grads, lr)
        self.updates += 1
        return UpdateStats(p_loss, v_loss, ent, float(np.mean(rewards)), pn, vn)


@dataclass
class TrainResult:
    agent: ActorCritic
    curve: list[dict] = field(default_factory=list)
    updates: int = 0
    initial_eval: dict | None = None   # evaluation of the starting parameters, when evaluation is on


CURVE_FIELDS = ("update_index", "mean_reward", "pf_reward", "reward_gap_vs_pf",
                "thp_ratio_vs_pf", "jfi_ratio_vs_pf", "pdr_ratio_vs_pf", "eval_reward", "eval_pf_reward")


def live_env_factory(env_cfg: EnvConfig, master: int, index: int) -> Callable[[int], CellEnv]:
    """Live environment ``index``: a fresh deployment and seed for every episode."""
    def make(episode: int) -> CellEnv:
        return CellEnv.reset(env_cfg, derive_int(master, "train-env", index, episode))
    return make


def trace_env_factory(traces: list[Trace], index: int, num_envs: int) -> Callable[[int], CellEnv]:
    """Virtual environment ``index``: cycles through recorded traces."""
    def make(episode: int) -> CellEnv:
        return replay_env(traces[(index + episode * num_envs) % len(traces)])
    return make


def train(cfg: TrainConfig, env_cfg: EnvConfig, weights: RewardWeights, master: int,
          agent: ActorCritic | None = None, traces: list[Trace] | None = None,
          eval_env_cfg: EnvConfig | None = None, callback=None) -> TrainResult:
    """Run up to ``cfg.max_updates`` A2C updates.

    Every ``cfg.eval_every`` updates the policy (greedy, or sampled from a fixed
    stream) is compared with PF on held-out seeds (paired); those rows carry
    the KPI ratios.
    """
    if agent is None:
        agent = ActorCritic.build(cfg.architecture, env_cfg.num_ues, cfg.hidden, make_rng(master, "init"))
    result = TrainResult(agent)
    if cfg.max_updates == 0:
        return result
    if traces:
        factories = [trace_env_factory(traces, i, cfg.num_envs) for i in range(cfg.num_envs)]
    else:
        factories = [live_env_factory(env_cfg, master, i) for i in range(cfg.num_envs)]
    slots = [EnvSlot(f, weights, cfg.pf_reference) for f in factories]
    trainer = A2CTrainer(agent, cfg, make_rng(master, "a2c-sampling"))
    seeds = eval_seeds(master, cfg.eval_seeds) if cfg.eval_every and cfg.eval_seeds else []
    eval_cfg = eval_env_cfg or env_cfg

    def evaluate():
        return evaluate_agent(agent, eval_cfg, weights, seeds, greedy=cfg.eval_greedy,
                              master=derive_int(master, "eval-sampling"))

    if seeds:
        rep0 = evaluate()
        result.initial_eval = {"update_index": 0, "eval_reward": rep0.summaries["drl"].reward,
                               "eval_pf_reward": rep0.summaries["pf"].reward}
    best = -math.inf
    stale = 0
    for u in range(cfg.max_updates):
        pf_r: list[float] = []
        trajs = sample_batch(slots, agent, cfg.n_steps, trainer.rng, pf_r)
        stats = trainer.compute_update(trajs)
        pf_mean = float(np.mean(pf_r)) if cfg.pf_reference else None
        row = {"update_index": u + 1, "mean_reward": stats.mean_reward, "pf_reward": pf_mean,
               "reward_gap_vs_pf": None if pf_mean is None else stats.mean_reward - pf_mean,
               "thp_ratio_vs_pf": None, "jfi_ratio_vs_pf": None, "pdr_ratio_vs_pf": None,
               "eval_reward": None, "eval_pf_reward": None}
        if seeds and (u + 1) % cfg.eval_every == 0:
            rep = evaluate()
            rat = rep.ratios()
            row.update(thp_ratio_vs_pf=rat["thp"], jfi_ratio_vs_pf=rat["jfi"], pdr_ratio_vs_pf=rat["pdr"],
                       eval_reward=rep.summaries["drl"].reward, eval_pf_reward=rep.summaries["pf"].reward)
            log.info("update %d: reward %.4f, eval reward %.4f vs pf %.4f", u + 1, stats.mean_reward,
                     row["eval_reward"], row["eval_pf_reward"])
            if cfg.early_stop_patience:
                if row["eval_reward"] > best + 1e-9:
                    best, stale = row["eval_reward"], 0
                else:
                    stale += 1
                    if stale >= cfg.early_stop_patience:
                        result.curve.append(row)
                        result.updates = u + 1
                        break
        result.curve.append(row)
        result.updates = u + 1
        if callback is not None:
            callback(result.updates, agent)
    return result


def convergence_update(points: list[tuple[int, float]], fraction: float = 0.9, final_window: int = 3,
                       relative_to_start: bool = False) -> int:
    """First update index whose evaluated reward reaches ``fraction`` of the final level.

    ``points`` are (update_index, reward) in order, starting with the untrained
    evaluation; the final level is the mean of the last ``final_window`` points.
    With ``relative_to_start`` the target is start + fraction * (final - start).
    """
    if not points:
        raise ValueError("no evaluation points")
    ups = [u for u, _ in points]
    vals = np.array([v for _, v in points], dtype=float)
    final = float(vals[-final_window:].mean())
    target = vals[0] + fraction * (final - vals[0]) if relative_to_start else fraction * final
    if relative_to_start and final <= vals[0]:
        return ups[0]
    hit = np.flatnonzero(vals >= target)
    return ups[int(hit[0])] if hit.size else ups[-1]
