"""Acceptance criteria 1-11, each at its stated tolerance.

Every test prints one ``criterion N: PASS|FAIL ...`` line straight to the
terminal (outside pytest's capture) before asserting.
"""

import dataclasses
import os
import time

import numpy as np
import pytest

from smartsched.a2c import convergence_update, multi_rbg_rollout, train
from smartsched.baselines import PF_EPS, ProportionalFair
from smartsched.config import EnvConfig, GaConfig, RewardWeights, TrainConfig, derive_int
from smartsched.env import CellEnv
from smartsched.evaluation import eval_seeds, evaluate_agent
from smartsched.kpi import KpiWindow
from smartsched.neural import ActorCritic, run_gradchecks
from smartsched.pareto import (
    admissible_sequences,
    coverage,
    dominates,
    enumerate_sequences,
    nsga2_run,
    pareto_set,
    pla_run,
)
from smartsched.trace import record_trace, replay_env

from cli_cases import all_subcommands
from conftest import toy_trace

PAPER_WEIGHTS = RewardWeights(0.07, 0.71, 0.22)
DESK_ENV = EnvConfig(num_ues=5, num_rbgs=1, duration=500, arrival_rate=200.0, tti_s=0.001)


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
    return emit


# 1 ---------------------------------------------------------------------------

def test_criterion_01_gradients(report):
    t0 = time.perf_counter()
    rep = run_gradchecks(seed=0, ks=(2, 5))
    elapsed = time.perf_counter() - t0
    worst = max(r["max_rel_error"] for r in rep["checks"])
    ok = rep["passed"] and worst < 1e-4 and elapsed < 30
    report(1, ok, f"max rel error {worst:.2e} over {len(rep['checks'])} checks, {elapsed:.1f}s")
    assert worst < 1e-4
    assert elapsed < 30


# 2 ---------------------------------------------------------------------------

def test_criterion_02_equivariance(report):
    rng = np.random.default_rng(derive_int(0, "criterion-2"))
    agents = {k: ActorCritic.build("scalable", k, 128, rng) for k in (1, 2, 5, 13, 50)}
    worst_dev = worst_mask = 0.0
    for _ in range(1000):
        k = int(rng.choice(list(agents)))
        s = rng.uniform(0, 2, (1, k, 4))
        mask = rng.random((1, k)) < 0.6
        mask[0, rng.integers(k)] = True
        perm = rng.permutation(k)
        a = agents[k].policy_forward(s, mask).probs[0]
        b = agents[k].policy_forward(s[:, perm], mask[:, perm]).probs[0]
        worst_dev = max(worst_dev, float(np.max(np.abs(b - a[perm]))))
        if (~mask[0]).any():
            worst_mask = max(worst_mask, float(a[~mask[0]].max()))
    ok = worst_dev <= 1e-12 and worst_mask <= 1e-6
    report(2, ok, f"max permutation deviation {worst_dev:.1e}, max masked prob {worst_mask:.1e}")
    assert worst_dev <= 1e-12
    assert worst_mask <= 1e-6


# 3 ---------------------------------------------------------------------------

def test_criterion_03_kpi_oracle(report):
    rng = np.random.default_rng(derive_int(0, "criterion-3"))
    steps = 0
    bad = []
    while steps < 100_000:
        k = int(rng.integers(1, 8))
        b = int(rng.integers(1, 4))
        cfg = EnvConfig(num_ues=k, num_rbgs=b, duration=int(rng.integers(50, 400)),
                        arrival_rate=float(rng.uniform(0, 4000)), packet_bits=int(rng.integers(500, 12000)),
                        buffer_bits=int(rng.integers(1, 8)) * 12000, max_delay=int(rng.integers(0, 60)),
                        full_buffer=bool(rng.random() < 0.1))
        env = CellEnv.reset(cfg, int(rng.integers(2**31)))
        kpi = KpiWindow(k)
        while not env.done and steps < 100_000:
            act = np.flatnonzero(env.active_mask())
            d = np.where(rng.random(b) < 0.85, rng.choice(act), -1) if act.size else np.full(b, -1)
            kpi.update(env.apply_decision(d))
            steps += 1
            thp, jfi, pdr = kpi.finalize()
            if thp > 0 and not (1 / k - 1e-12 <= jfi <= 1 + 1e-12):
                bad.append(("jfi", jfi))
            if not 0.0 <= pdr <= 1.0:
                bad.append(("pdr", pdr))
            for buf in env.buffers:
                if buf.arrived_packets != (len(buf) + buf.transmitted_packets + buf.dropped_overflow
                                           + buf.dropped_expired):
                    bad.append(("ledger", env.tti))
    report(3, not bad, f"{steps} randomized steps, {len(bad)} violations")
    assert not bad


# 4 ---------------------------------------------------------------------------

def _straight_line_pf(cfg, trace):
    """Recompute PF from scratch: argmax I/max(T, eps) on each RBG, T updated once per TTI."""
    env = replay_env(trace)
    pf = ProportionalFair()
    pf.reset(env)
    W = cfg.avg_window
    T = np.zeros(cfg.num_ues)
    matches = total = 0
    while not env.done:
        obs = env.observe()
        left = obs.queued_bits.astype(float)
        mine = []
        for b in range(cfg.num_rbgs):
            best, best_m = -1, -np.inf
            for k in range(cfg.num_ues):
                if left[k] > 0:
                    m = obs.est_rate_rbg[k, b] / max(T[k], PF_EPS)
                    if m > best_m:
                        best, best_m = k, m
            mine.append(best)
            if best >= 0:
                left[best] -= min(obs.est_rate_rbg[best, b], left[best])
        theirs = pf.decide(env)
        matches += int(list(theirs) == mine)
        total += 1
        out = env.apply_decision(theirs)
        pf.observe_outcome(out)
        T = (W - 1) / W * T + out.delivered_bits / W
    return matches, total


def test_criterion_04_pf_conformance(report):
    results = []
    for b in (1, 3):
        cfg = dataclasses.replace(DESK_ENV, num_rbgs=b, duration=10_000, arrival_rate=600.0)
        trace = record_trace(cfg, derive_int(0, "criterion-4", b))
        results.append(_straight_line_pf(cfg, trace))
    ok = all(m == t for m, t in results)
    report(4, ok, ", ".join(f"B={b}: {m}/{t} TTIs match" for b, (m, t) in zip((1, 3), results)))
    assert ok


# 5 ---------------------------------------------------------------------------

TOY5 = EnvConfig(num_ues=2, num_rbgs=1, duration=100, full_buffer=True, fixed_rates=[2000, 1000],
                 arrival_rate=0.0)


@pytest.mark.slow
def test_criterion_05_learning_sanity(report):
    t0 = time.perf_counter()
    tc = TrainConfig(max_updates=2000, num_envs=4, eval_every=0, pf_reference=False)   # plain SGD, lr 1e-3
    agent = train(tc, TOY5, RewardWeights(1.0, 0.0, 0.0), derive_int(0, "criterion-5")).agent
    elapsed = time.perf_counter() - t0
    picks, probs = [], []
    for seed in eval_seeds(0, 5, "criterion-5-eval"):
        env = CellEnv.reset(TOY5, seed)
        while not env.done:
            dec, pst, msk, _ = multi_rbg_rollout([env], agent, None, greedy=True)
            probs.append(agent.policy_forward(pst[0, :1], msk[0, :1]).probs[0, 0])
            picks.append(dec[0, 0] == 0)
            env.apply_decision(dec[0])
    frac = float(np.mean(picks))
    ok = frac > 0.95 and elapsed < 300
    report(5, ok, f"greedy picks UE0 on {frac:.3f} of TTIs (mean pi(UE0)={np.mean(probs):.3f}), "
                  f"{elapsed:.0f}s training")
    assert frac > 0.95
    assert elapsed < 300


# 6 and 9 share one trained 5-UE scalable agent --------------------------------

DESK_TRAIN = TrainConfig(architecture="scalable", max_updates=1500, num_envs=4, optimizer="adam", lr=1e-3,
                         eval_every=0, pf_reference=False)


@pytest.fixture(scope="module")
def desk_agent():
    return train(DESK_TRAIN, DESK_ENV, PAPER_WEIGHTS, derive_int(0, "criterion-6")).agent


def _ratios_line(rep):
    r = rep.ratios()
    return " ".join(f"{k}={r[k]:.3f}" for k in ("reward", "thp", "jfi", "pdr") if r.get(k) is not None)


@pytest.mark.slow
def test_criterion_06_desk_tradeoff(report, desk_agent):
    seeds = eval_seeds(0, 20, "criterion-6-heldout")
    greedy = evaluate_agent(desk_agent, DESK_ENV, PAPER_WEIGHTS, seeds)
    sampled = evaluate_agent(desk_agent, DESK_ENV, PAPER_WEIGHTS, seeds, greedy=False,
                             master=derive_int(0, "criterion-6-sampling"))
    g = greedy.summaries
    ok = g["drl"].reward >= 0.98 * g["pf"].reward
    report(6, ok, f"greedy reward {g['drl'].reward:.4f} vs PF {g['pf'].reward:.4f} ({_ratios_line(greedy)}); "
                  f"sampled policy {_ratios_line(sampled)}")
    assert g["drl"].reward >= 0.98 * g["pf"].reward


@pytest.mark.slow
def test_criterion_09_generalization(report, desk_agent, tmp_path):
    path = tmp_path / "five_ue.json"
    desk_agent.save(str(path))
    agent = ActorCritic.load(str(path), num_ues=50)
    env50 = dataclasses.replace(DESK_ENV, num_ues=50)
    seeds = eval_seeds(0, 5, "criterion-9")
    greedy = evaluate_agent(agent, env50, PAPER_WEIGHTS, seeds)
    sampled = evaluate_agent(agent, env50, PAPER_WEIGHTS, seeds, greedy=False,
                             master=derive_int(0, "criterion-9-sampling"))
    g = greedy.summaries
    ok = g["drl"].reward >= 0.9 * g["pf"].reward
    report(9, ok, f"K=50 greedy reward {g['drl'].reward:.4f} vs PF {g['pf'].reward:.4f} "
                  f"({_ratios_line(greedy)}); sampled policy {_ratios_line(sampled)}")
    assert g["drl"].reward >= 0.9 * g["pf"].reward


# 7 ---------------------------------------------------------------------------

def test_criterion_07_pla_exhaustive(report):
    gene_ok = adm_ok = 0
    for i in range(10):
        tr = toy_trace(i)
        truth = enumerate_sequences(tr)
        assert len(truth.sequences) == 243
        gene_ok += pareto_set(pla_run(tr, 243, expansion="gene").objectives) == truth.pareto
        adm_ok += pareto_set(pla_run(tr, 243).objectives) == admissible_sequences(tr).pareto
    ok = gene_ok == 10
    report(7, ok, f"gene-expansion PLA equals brute force on {gene_ok}/10 traces; "
                  f"admissible PLA equals admissible brute force on {adm_ok}/10")
    assert gene_ok == 10
    assert adm_ok == 10


# 8 ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_08_nsga2_quality(report):
    cfg = GaConfig(population=40, generations=200)
    covs, dominated = [], 0
    for seed in range(10):
        tr = toy_trace(seed)
        en = enumerate_sequences(tr)
        truth = en.pareto
        res = nsga2_run(tr, cfg, derive_int(0, "criterion-8", seed))
        front = {tuple(res.objectives[i]) for i in res.first_front}
        dominated += sum(any(dominates(o, f) for o in en.objectives) for f in front)
        covs.append(coverage(front, truth))
    mean_cov = float(np.mean(covs))
    ok = dominated == 0 and mean_cov >= 0.8
    report(8, ok, f"{dominated} dominated front members, mean coverage {mean_cov:.3f} "
                  f"(min {min(covs):.3f}) over 10 seeds")
    assert dominated == 0
    assert mean_cov >= 0.8


# 10 --------------------------------------------------------------------------

CONV_TRAIN = dict(max_updates=400, num_envs=4, optimizer="adam", lr=1e-3, eval_every=20, eval_seeds=2,
                  eval_greedy=False, pf_reference=False)


def _eval_points(res):
    pts = [(0, res.initial_eval["eval_reward"])]
    pts += [(r["update_index"], r["eval_reward"]) for r in res.curve if r["eval_reward"] is not None]
    return pts


@pytest.mark.slow
def test_criterion_10_convergence_speed(report):
    faster = 0
    rows = []
    gains = {"scalable": [], "one_pass": []}
    for i in range(10):
        master = derive_int(0, "criterion-10", i)
        t90 = {}
        for arch in ("scalable", "one_pass"):
            res = train(TrainConfig(architecture=arch, **CONV_TRAIN), DESK_ENV, PAPER_WEIGHTS, master)
            pts = _eval_points(res)
            t90[arch] = convergence_update(pts)
            gains[arch].append(np.mean([v for _, v in pts[-3:]]) - pts[0][1])
        faster += t90["scalable"] < t90["one_pass"]
        rows.append(f"{t90['scalable']}/{t90['one_pass']}")
    share = faster / 10
    ok = share >= 0.7
    report(10, ok, f"scalable reached 90% of final sooner on {faster}/10 seeds "
                   f"(t90 scalable/one-pass: {' '.join(rows)}); mean reward gain over training "
                   f"scalable {np.mean(gains['scalable']):+.4f}, one-pass {np.mean(gains['one_pass']):+.4f}")
    assert share >= 0.7


# 11 --------------------------------------------------------------------------

def test_criterion_11_reproducibility(report, tmp_path):
    first = all_subcommands(str(tmp_path), "run1")
    second = all_subcommands(str(tmp_path), "run2")
    diffs = [f"{cmd}/{name}" for cmd in first for name in set(first[cmd][1]) | set(second[cmd][1])
             if first[cmd][1].get(name) != second[cmd][1].get(name)]
    codes = {cmd: first[cmd][0] for cmd in first}
    nfiles = sum(len(v[1]) for v in first.values())
    ok = not diffs and all(c == 0 for c in codes.values())
    report(11, ok, f"{len(first)} subcommands, {nfiles} files, {len(diffs)} differ {diffs if diffs else ''}")
    assert all(c == 0 for c in codes.values())
    assert not diffs
