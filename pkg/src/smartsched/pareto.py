"""Offline Pareto exploration over a recorded trace: NSGA-II, the Pareto list
algorithm (PLA), and brute-force enumeration as the reference oracle.

Objectives are (THP, JFI, PDR) over the whole trace: THP and JFI are
maximized, PDR minimized. Genes are 0-based UE indices, one per (TTI, RBG).
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from smartsched.config import GaConfig, RewardWeights, make_rng
from smartsched.env import CellEnv
from smartsched.kpi import KpiWindow, step_reward
from smartsched.trace import Trace, replay_env

Objectives = tuple  # (thp: int, jfi: float, pdr: float)


def dominates(x, y) -> bool:
    """x dominates y: strictly more throughput, fairness and drop rate no worse."""
    return x[0] > y[0] and x[1] >= y[1] and x[2] <= y[2]


# --- sequence evaluation ------------------------------------------------------

def _sequence_matrix(trace: Trace, sequence) -> np.ndarray:
    N, K, B = trace.rates.shape
    seq = np.asarray(sequence, dtype=np.int64)
    if seq.ndim == 1 and B == 1:
        seq = seq[:, None]
    if seq.shape != (N, B):
        raise ValueError(f"sequence shape {seq.shape} does not match the trace ({N} TTIs x {B} RBGs)")
    if seq.size and (seq.min() < -1 or seq.max() >= K):
        raise ValueError(f"genes must lie in 0..{K - 1} (or -1 for an explicit idle grant)")
    return seq


def _effective(env: CellEnv, genes) -> np.ndarray:
    """Genes pointing at an empty buffer become idle grants (a wasted RBG)."""
    active = env.active_mask()
    return np.where((genes >= 0) & active[np.maximum(genes, 0)], genes, -1)


def evaluate_sequence(trace: Trace, sequence) -> Objectives:
    """Replay ``sequence`` against the trace and return (THP, JFI, PDR)."""
    seq = _sequence_matrix(trace, sequence)
    env = replay_env(trace)
    kpi = KpiWindow(env.num_ues)
    for genes in seq:
        kpi.update(env.apply_decision(_effective(env, genes)))
    return kpi.finalize()


def scalarized_reward(trace: Trace, sequence, weights: RewardWeights) -> float:
    """Sum over TTIs of the per-step reward along the replay."""
    seq = _sequence_matrix(trace, sequence)
    env = replay_env(trace)
    kpi = KpiWindow(env.num_ues)
    scale = env.num_ues * env.cfg.top_rate
    total = 0.0
    for genes in seq:
        out = env.apply_decision(_effective(env, genes))
        kpi.update(out)
        total += step_reward(weights, out.thp, kpi.jfi, out.dropped, env.num_ues, scale)
    return total


class SequenceEvaluator:
    """Memoizing wrapper; evaluation is pure so cached results are exact."""

    def __init__(self, trace: Trace):
        self.trace = trace
        self.cache: dict[bytes, Objectives] = {}

    def __call__(self, genes: np.ndarray) -> Objectives:
        key = np.asarray(genes, dtype=np.int64).tobytes()
        hit = self.cache.get(key)
        if hit is None:
            N, _, B = self.trace.rates.shape
            hit = self.cache[key] = evaluate_sequence(self.trace, np.asarray(genes).reshape(N, B))
        return hit


# --- sorting ------------------------------------------------------------------

def fast_nondominated_sort(objs) -> list[list[int]]:
    """Fronts as lists of indices into ``objs``; front 0 is the nondominated set."""
    n = len(objs)
    dominated_by = [[] for _ in range(n)]
    count = [0] * n
    for p in range(n):
        for q in range(p + 1, n):
            if dominates(objs[p], objs[q]):
                dominated_by[p].append(q)
                count[q] += 1
            elif dominates(objs[q], objs[p]):
                dominated_by[q].append(p)
                count[p] += 1
    fronts = [[i for i in range(n) if count[i] == 0]]
    while fronts[-1]:
        nxt = []
        for p in fronts[-1]:
            for q in dominated_by[p]:
                count[q] -= 1
                if count[q] == 0:
                    nxt.append(q)
        fronts.append(sorted(nxt))
    return fronts[:-1]


def crowding_distance(objs) -> np.ndarray:
    """Per-point crowding distance within one front."""
    n = len(objs)
    dist = np.zeros(n)
    if n <= 2:
        dist[:] = np.inf
        return dist
    arr = np.asarray(objs, dtype=float)
    for m in range(arr.shape[1]):
        order = np.argsort(arr[:, m], kind="stable")
        lo, hi = arr[order[0], m], arr[order[-1], m]
        dist[order[0]] = dist[order[-1]] = np.inf
        span = hi - lo
        if span == 0:
            continue
        gaps = (arr[order[2:], m] - arr[order[:-2], m]) / span
        dist[order[1:-1]] += gaps
    return dist


def rank_and_crowding(objs) -> tuple[np.ndarray, np.ndarray]:
    rank = np.zeros(len(objs), dtype=np.int64)
    crowd = np.zeros(len(objs))
    for r, front in enumerate(fast_nondominated_sort(objs)):
        rank[front] = r
        crowd[front] = crowding_distance([objs[i] for i in front])
    return rank, crowd


def crowded_order(objs) -> list[int]:
    """Indices sorted by (front rank ascending, crowding distance descending), stable."""
    rank, crowd = rank_and_crowding(objs)
    return sorted(range(len(objs)), key=lambda i: (rank[i], -crowd[i]))


def nondominated(objs) -> list[int]:
    return fast_nondominated_sort(objs)[0] if len(objs) else []


def pareto_set(objs) -> set:
    """Distinct objective triples on the first front."""
    return {tuple(objs[i]) for i in nondominated(objs)}


# --- exhaustive oracle --------------------------------------------------------

@dataclass
class Enumeration:
    sequences: list[tuple]
    objectives: list[Objectives]

    @property
    def pareto(self) -> set:
        return pareto_set(self.objectives)


def enumerate_sequences(trace: Trace, limit: int = 200_000) -> Enumeration:
    """Evaluate all K^(N*B) sequences (small traces only)."""
    N, K, B = trace.rates.shape
    total = K ** (N * B)
    if total > limit:
        raise ValueError(f"{total} sequences exceed the enumeration limit of {limit}")
    seqs, objs = [], []
    for genes in itertools.product(range(K), repeat=N * B):
        seqs.append(genes)
        objs.append(evaluate_sequence(trace, np.array(genes).reshape(N, B)))
    return Enumeration(seqs, objs)


# --- NSGA-II ------------------------------------------------------------------

def _sbx_pair(x1, x2, lo, hi, eta, rng):
    """Bounded simulated binary crossover, variable by variable (each with prob 0.5)."""
    c1, c2 = x1.copy(), x2.copy()
    for i in range(len(x1)):
        if rng.random() > 0.5 or abs(x1[i] - x2[i]) <= 1e-14:
            continue
        y1, y2 = min(x1[i], x2[i]), max(x1[i], x2[i])
        u = rng.random()
        betaq = []
        for bound in (y1 - lo, hi - y2):
            beta = 1.0 + 2.0 * bound / (y2 - y1)
            alpha = 2.0 - beta ** -(eta + 1.0)
            if u <= 1.0 / alpha:
                betaq.append((u * alpha) ** (1.0 / (eta + 1.0)))
            else:
                betaq.append((1.0 / (2.0 - u * alpha)) ** (1.0 / (eta + 1.0)))
        a = 0.5 * ((y1 + y2) - betaq[0] * (y2 - y1))
        b = 0.5 * ((y1 + y2) + betaq[1] * (y2 - y1))
        a, b = min(max(a, lo), hi), min(max(b, lo), hi)
        if rng.random() <= 0.5:
            a, b = b, a
        c1[i], c2[i] = a, b
    return c1, c2


def _poly_mutation(x, lo, hi, eta, prob, rng):
    y = x.copy()
    span = hi - lo
    for i in range(len(y)):
        if rng.random() > prob:
            continue
        d1 = (y[i] - lo) / span
        d2 = (hi - y[i]) / span
        u = rng.random()
        p = 1.0 / (eta + 1.0)
        if u < 0.5:
            val = 2.0 * u + (1.0 - 2.0 * u) * (1.0 - d1) ** (eta + 1.0)
            dq = val ** p - 1.0
        else:
            val = 2.0 * (1.0 - u) + 2.0 * (u - 0.5) * (1.0 - d2) ** (eta + 1.0)
            dq = 1.0 - val ** p
        y[i] = min(max(y[i] + dq * span, lo), hi)
    return y


def _to_genes(x, K) -> np.ndarray:
    return np.clip(np.floor(x + 0.5), 0, K - 1).astype(np.int64)


def make_offspring(parents: np.ndarray, K: int, cfg: GaConfig, rng: np.random.Generator) -> np.ndarray:
    """Pairwise variation of an (M, L) gene matrix; returns M children."""
    M, L = parents.shape
    kids = np.empty_like(parents)
    # relaxation interval whose rounding cells have equal width for every UE
    lo, hi = -0.5, K - 0.5
    for j in range(0, M, 2):
        p1, p2 = parents[j], parents[(j + 1) % M]
        if cfg.variation == "sbx":
            x1, x2 = p1.astype(float), p2.astype(float)
            if rng.random() <= cfg.crossover_prob:
                x1, x2 = _sbx_pair(x1, x2, lo, hi, cfg.eta_c, rng)
            x1 = _poly_mutation(x1, lo, hi, cfg.eta_m, cfg.mutation_prob, rng)
            x2 = _poly_mutation(x2, lo, hi, cfg.eta_m, cfg.mutation_prob, rng)
            c1, c2 = _to_genes(x1, K), _to_genes(x2, K)
        else:
            c1, c2 = p1.copy(), p2.copy()
            if rng.random() <= cfg.crossover_prob:
                swap = rng.random(L) < 0.5
                c1[swap], c2[swap] = p2[swap], p1[swap]
            for c in (c1, c2):
                hit = rng.random(L) < cfg.mutation_prob
                c[hit] = rng.integers(0, K, int(hit.sum()))
        kids[j] = c1
        if j + 1 < M:
            kids[j + 1] = c2
    return kids


def _tournament(rank, crowd, M, rng) -> np.ndarray:
    picks = np.empty(M, dtype=np.int64)
    n = len(rank)
    for i in range(M):
        a, b = rng.integers(0, n, 2)
        if rank[a] != rank[b]:
            picks[i] = a if rank[a] < rank[b] else b
        elif crowd[a] != crowd[b]:
            picks[i] = a if crowd[a] > crowd[b] else b
        else:
            picks[i] = min(a, b)
    return picks


@dataclass
class GaResult:
    genes: np.ndarray                  # (M, N*B)
    objectives: list[Objectives]
    history: list[dict] = field(default_factory=list)   # per generation summary

    @property
    def first_front(self) -> list[int]:
        return nondominated(self.objectives)


def nsga2_run(trace: Trace, cfg: GaConfig, seed: int, evaluator: SequenceEvaluator | None = None) -> GaResult:
    rng = make_rng(seed, "nsga2")
    N, K, B = trace.rates.shape
    L = N * B
    M = cfg.population
    ev = evaluator or SequenceEvaluator(trace)
    pop = rng.integers(0, K, (M, L))
    objs = [ev(g) for g in pop]
    history = [_front_summary(0, objs)]
    for gen in range(cfg.generations):
        rank, crowd = rank_and_crowding(objs)
        mating = pop[_tournament(rank, crowd, M, rng)]
        kids = make_offspring(mating, K, cfg, rng)
        merged = np.concatenate([pop, kids])
        mobjs = objs + [ev(g) for g in kids]
        keep: list[int] = []
        for front in fast_nondominated_sort(mobjs):
            if len(keep) + len(front) <= M:
                keep += front
                continue
            cd = crowding_distance([mobjs[i] for i in front])
            order = sorted(range(len(front)), key=lambda i: -cd[i])
            keep += [front[i] for i in order[: M - len(keep)]]
            break
        pop = merged[keep]
        objs = [mobjs[i] for i in keep]
        history.append(_front_summary(gen + 1, objs))
    return GaResult(pop, objs, history)


def _front_summary(gen: int, objs) -> dict:
    f = [objs[i] for i in nondominated(objs)]
    return {"generation": gen, "front_size": len(f),
            "max_thp": max(o[0] for o in f), "max_jfi": max(o[1] for o in f), "min_pdr": min(o[2] for o in f)}


# --- Pareto list algorithm ----------------------------------------------------

@dataclass
class Path:
    env: CellEnv
    kpi: KpiWindow
    decisions: list
    reward: float = 0.0

    @property
    def objectives(self) -> Objectives:
        return self.kpi.finalize()


def path_key(path: Path, mode: str, packet_bits: int, delay_bucket: int = 10):
    """Canonical state for duplicate detection.

    ``exact`` captures everything that drives future objectives (buffer
    contents, counters, delivered bits), so merged paths are interchangeable.
    ``coarse`` keeps per-UE queued bits, a bucketed HoL age and delivered bits
    rounded to whole packets.
    """
    env = path.env
    if mode == "exact":
        return (tuple(b.state_key() for b in env.buffers), path.kpi.delivered_bits.tobytes())
    return tuple(
        (b.queued_bits, b.hol_wait(env.tti) // delay_bucket, int(d) // packet_bits)
        for b, d in zip(env.buffers, path.kpi.delivered_bits)
    )


def _expansions(env: CellEnv, mode: str = "admissible") -> list[tuple]:
    """Decision tuples a path may branch into this TTI.

    ``admissible`` grants only UEs with a positive rate and a nonempty buffer,
    idling just when nobody qualifies. ``gene`` also branches into the idle
    grant whenever some gene would produce one (a UE that is empty or has no
    rate), so it spans exactly the outcomes reachable by gene sequences.
    """
    rates = env.rates
    active = env.active_mask()
    per_rbg = []
    for b in range(env.num_rbgs):
        ok = [k for k in range(env.num_ues) if active[k] and rates[k, b] > 0]
        if not ok or (mode == "gene" and len(ok) < env.num_ues):
            ok = ok + [-1]
        per_rbg.append(ok)
    return list(itertools.product(*per_rbg))


def admissible_sequences(trace: Trace) -> Enumeration:
    """Exhaustive oracle restricted to schedules that never waste an RBG a UE could use."""
    seqs, objs = [], []
    root = replay_env(trace)

    def walk(env: CellEnv, prefix: list):
        if env.done:
            seqs.append(tuple(prefix))
            objs.append(evaluate_sequence(trace, np.array(prefix, dtype=np.int64).reshape(-1, env.num_rbgs)))
            return
        for choice in _expansions(env):
            nxt = env.clone()
            nxt.apply_decision(np.array(choice, dtype=np.int64))
            walk(nxt, prefix + list(choice))

    walk(root, [])
    return Enumeration(seqs, objs)


@dataclass
class PlaResult:
    best: np.ndarray                   # (N, B) decisions of the selected path
    best_reward: float
    paths: list[Path]
    max_alive: int
    alive_counts: list[int] = field(default_factory=list)

    @property
    def objectives(self) -> list[Objectives]:
        return [p.objectives for p in self.paths]


def pla_run(trace: Trace, l_max: int, weights: RewardWeights | None = None, dedup: str = "exact",
            expansion: str = "admissible") -> PlaResult:
    """Expand, merge and prune paths TTI by TTI; the best path maximizes the summed step reward."""
    if expansion not in ("admissible", "gene"):
        raise ValueError("expansion must be admissible or gene")
    if l_max < 1:
        raise ValueError("l_max must be >= 1")
    if dedup not in ("exact", "coarse", "none"):
        raise ValueError("dedup must be exact, coarse or none")
    weights = weights or RewardWeights()
    root = replay_env(trace)
    K = root.num_ues
    scale = K * root.cfg.top_rate
    paths = [Path(root, KpiWindow(K), [])]
    counts = []
    max_alive = 1
    while not paths[0].env.done:
        grown: dict = {}
        order = []
        for p in paths:
            for choice in _expansions(p.env, expansion):
                env = p.env.clone()
                out = env.apply_decision(np.array(choice, dtype=np.int64))
                kpi = KpiWindow(K, p.kpi.duration, 0, p.kpi.delivered_bits.copy(),
                                p.kpi.arrived, p.kpi.transmitted, p.kpi.dropped).update(out)
                r = p.reward + step_reward(weights, out.thp, kpi.jfi, out.dropped, K, scale)
                child = Path(env, kpi, p.decisions + [choice], r)
                key = len(order) if dedup == "none" else path_key(child, dedup, root.cfg.packet_bits)
                prev = grown.get(key)
                if prev is None:
                    grown[key] = child
                    order.append(key)
                elif child.reward > prev.reward:
                    grown[key] = child
        paths = [grown[k] for k in order]
        max_alive = max(max_alive, len(paths))
        if len(paths) > l_max:
            paths = prune(paths, l_max)
        counts.append(len(paths))
    best = max(range(len(paths)), key=lambda i: (paths[i].reward, -i))
    return PlaResult(np.array(paths[best].decisions, dtype=np.int64).reshape(-1, root.num_rbgs),
                     paths[best].reward, paths, max_alive, counts)


def prune(paths: list[Path], l_max: int) -> list[Path]:
    """Drop zero-crowding paths, then keep the first ``l_max`` in crowded order."""
    objs = [p.objectives for p in paths]
    rank, crowd = rank_and_crowding(objs)
    order = sorted(range(len(paths)), key=lambda i: (rank[i], -crowd[i]))
    kept = [i for i in order if crowd[i] > 0]
    if not kept:
        kept = order[:1]
    return [paths[i] for i in kept[:l_max]]


# --- output -------------------------------------------------------------------

OBJECTIVE_FIELDS = ("index", "front", "thp", "jfi", "pdr", "genes")


def objectives_csv(genes, objs) -> str:
    rank, _ = rank_and_crowding(objs) if objs else (np.zeros(0, dtype=int), None)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(OBJECTIVE_FIELDS)
    for i, (g, o) in enumerate(zip(genes, objs)):
        w.writerow([i, int(rank[i]), int(o[0]), repr(float(o[1])), repr(float(o[2])),
                    " ".join(str(int(x)) for x in np.ravel(g))])
    return buf.getvalue()


def sequence_text(decisions: np.ndarray, trace: Trace, source: str, reward: float | None = None) -> str:
    """Structured record of a schedule, loadable with :func:`load_sequence`."""
    seq = np.asarray(decisions, dtype=np.int64)
    objs = evaluate_sequence(trace, seq)
    doc = {
        "format": "smartsched-sequence",
        "source": source,
        "trace_digest": trace.digest(),
        "num_ttis": int(seq.shape[0]),
        "num_rbgs": int(seq.shape[1]) if seq.ndim == 2 else 1,
        "genes": seq.tolist(),
        "objectives": {"thp": int(objs[0]), "jfi": objs[1], "pdr": objs[2]},
        "scalarized_reward": reward,
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def load_sequence(path: str) -> np.ndarray:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "smartsched-sequence":
        raise ValueError(f"{path}: not a sequence file")
    return np.asarray(doc["genes"], dtype=np.int64)


def coverage(found: set, truth: set) -> float:
    return len(found & truth) / len(truth) if truth else 1.0


def is_finite_objectives(o) -> bool:
    return all(math.isfinite(float(v)) for v in o)
