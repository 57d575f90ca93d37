"""TTI-stepped single-cell downlink environment.

Exogenous processes (per-RBG achievable rates and packet arrivals) come from
a *source*; buffer dynamics are the only decision-dependent part. A live
source draws them from a Gauss-Markov fading channel and Poisson arrivals, a
trace source replays a recording. Two environments fed the same records
therefore see identical channel and traffic no matter what they schedule.

Within one TTI the order is: transmit, advance the clock, expire, arrive.
"""

from __future__ import annotations

import copy
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from smartsched.config import ConfigError, EnvConfig, make_rng


class ContractViolation(RuntimeError):
    """A caller broke an environment precondition (double grant, inactive UE, ...)."""


class Packet:
    __slots__ = ("size_bits", "arrival_tti", "remaining_bits")

    def __init__(self, size_bits: int, arrival_tti: int):
        if size_bits <= 0:
            raise ValueError("packet size must be positive")
        self.size_bits = size_bits
        self.arrival_tti = arrival_tti
        self.remaining_bits = size_bits

    def __repr__(self) -> str:
        return f"Packet({self.remaining_bits}/{self.size_bits}b @ {self.arrival_tti})"


def _copy_packet(p: Packet) -> Packet:
    q = Packet.__new__(Packet)
    q.size_bits, q.arrival_tti, q.remaining_bits = p.size_bits, p.arrival_tti, p.remaining_bits
    return q


class RlcBuffer:
    """Finite FIFO packet queue with drop/transmit counters."""

    def __init__(self, capacity_bits: int):
        self.capacity_bits = capacity_bits
        self.queue: deque[Packet] = deque()
        self.queued_bits = 0
        self.arrived_packets = 0
        self.transmitted_packets = 0
        self.dropped_overflow = 0
        self.dropped_expired = 0

    def __len__(self) -> int:
        return len(self.queue)

    @property
    def spare_bits(self) -> int:
        return self.capacity_bits - self.queued_bits

    def enqueue(self, packet: Packet) -> bool:
        """Append a packet; returns False (and counts an overflow drop) if it does not fit."""
        self.arrived_packets += 1
        if self.queued_bits + packet.size_bits > self.capacity_bits:
            self.dropped_overflow += 1
            return False
        self.queue.append(packet)
        self.queued_bits += packet.size_bits
        return True

    def expire(self, tti: int, max_delay: int) -> int:
        # FIFO: arrival times are nondecreasing, so expired packets sit at the head
        n = 0
        q = self.queue
        while q and tti - q[0].arrival_tti > max_delay:
            self.queued_bits -= q.popleft().remaining_bits
            n += 1
        self.dropped_expired += n
        return n

    def drain(self, bits: int) -> tuple[int, int]:
        """Send up to ``bits``; returns (bits sent, packets completed)."""
        sent = 0
        done = 0
        q = self.queue
        while q and bits > 0:
            head = q[0]
            take = min(bits, head.remaining_bits)
            head.remaining_bits -= take
            bits -= take
            sent += take
            if head.remaining_bits == 0:
                q.popleft()
                done += 1
        self.queued_bits -= sent
        self.transmitted_packets += done
        return sent, done

    def hol_wait(self, tti: int) -> int:
        return tti - self.queue[0].arrival_tti if self.queue else 0

    def clone(self) -> "RlcBuffer":
        new = RlcBuffer.__new__(RlcBuffer)
        new.__dict__.update(self.__dict__)
        new.queue = deque(_copy_packet(p) for p in self.queue)
        return new

    def state_key(self) -> tuple:
        return (tuple((p.arrival_tti, p.remaining_bits, p.size_bits) for p in self.queue),
                self.arrived_packets, self.transmitted_packets, self.dropped_overflow, self.dropped_expired)

    def ledger_balanced(self) -> bool:
        return self.arrived_packets == (
            len(self.queue) + self.transmitted_packets + self.dropped_overflow + self.dropped_expired
        )


def ladder_rate(snr_db, thresholds, rates):
    """Largest ladder rate whose threshold is <= snr; 0 below the first threshold."""
    idx = np.searchsorted(np.asarray(thresholds), np.asarray(snr_db), side="right")
    table = np.concatenate(([0], np.asarray(rates)))
    return table[idx]


class ChannelProcess:
    """Per-(UE, RBG) AR(1) Gauss-Markov fading on top of a mean SNR per UE."""

    def __init__(self, mean_snr_db, fading, correlation: float, fading_std_db: float,
                 ladder_snr_db, ladder_rates):
        self.mean_snr_db = np.asarray(mean_snr_db, dtype=float)
        self.fading = np.array(fading, dtype=float)
        self.correlation = float(correlation)
        self.fading_std_db = float(fading_std_db)
        self.ladder_snr_db = np.asarray(ladder_snr_db, dtype=float)
        self.ladder_rates = np.asarray(ladder_rates, dtype=np.int64)
        if np.any(np.diff(self.ladder_snr_db) <= 0):
            raise ValueError("ladder thresholds must be strictly increasing")

    @classmethod
    def stationary(cls, cfg: EnvConfig, mean_snr_db, rng: np.random.Generator) -> "ChannelProcess":
        fading = rng.standard_normal((cfg.num_ues, cfg.num_rbgs))
        return cls(mean_snr_db, fading, cfg.fading_corr, cfg.fading_std_db,
                   cfg.ladder_snr_db, cfg.ladder_rates)

    def advance(self, rng: np.random.Generator) -> np.ndarray:
        rho = self.correlation
        noise = rng.standard_normal(self.fading.shape)
        self.fading = rho * self.fading + np.sqrt(1.0 - rho * rho) * noise
        return self.fading

    def snr_db(self) -> np.ndarray:
        return self.mean_snr_db[:, None] + self.fading_std_db * self.fading

    def rates(self) -> np.ndarray:
        return ladder_rate(self.snr_db(), self.ladder_snr_db, self.ladder_rates).astype(np.int64)


def deployment_snr(cfg: EnvConfig, seed: int) -> np.ndarray:
    if cfg.snr_db is not None:
        return np.asarray(cfg.snr_db, dtype=float)
    lo, hi = cfg.snr_range_db
    return make_rng(seed, "deployment").uniform(lo, hi, cfg.num_ues)


class LiveSource:
    """Draws the exogenous rate/arrival stream on demand, strictly in TTI order.

    Record ``t`` holds the rates usable during TTI ``t`` and the packet sizes
    arriving at the end of it (enqueued with arrival time ``t + 1``).
    """

    def __init__(self, cfg: EnvConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        self.mean_snr_db = deployment_snr(cfg, seed)
        self._chan_rng = make_rng(seed, "channel")
        self._arr_rng = make_rng(seed, "arrivals")
        self.channel = ChannelProcess.stationary(cfg, self.mean_snr_db, self._chan_rng)
        self._next = 0
        self._fixed = None
        if cfg.fixed_rates is not None:
            self._fixed = np.repeat(np.asarray(cfg.fixed_rates, dtype=np.int64)[:, None], cfg.num_rbgs, axis=1)

    def record(self, t: int) -> tuple[np.ndarray, list[list[int]]]:
        if t != self._next:
            raise ContractViolation(f"live source is sequential: asked for TTI {t}, next is {self._next}")
        self._next += 1
        rates = self._fixed.copy() if self._fixed is not None else self.channel.rates()
        counts = self._arr_rng.poisson(self.cfg.arrivals_per_tti, self.cfg.num_ues)
        arrivals = [[self.cfg.packet_bits] * int(c) for c in counts]
        self.channel.advance(self._chan_rng)
        return rates, arrivals


@dataclass
class Observation:
    """Raw per-UE state at the start of a TTI (arrays indexed by UE)."""

    tti: int
    est_rate_rbg: np.ndarray   # (K, B) achievable bits this TTI per RBG
    avg_rate: np.ndarray       # (K,) windowed average delivered bits/TTI
    spare_buffer: np.ndarray   # (K,) bits
    hol_wait: np.ndarray       # (K,) TTIs
    queued_bits: np.ndarray    # (K,)
    active: np.ndarray         # (K,) bool

    @property
    def est_rate(self) -> np.ndarray:
        return self.est_rate_rbg.sum(axis=1)

    @property
    def num_ues(self) -> int:
        return len(self.active)

    def ue(self, k: int) -> "UeObservation":
        return UeObservation(float(self.est_rate[k]), float(self.avg_rate[k]), float(self.spare_buffer[k]),
                             float(self.hol_wait[k]), bool(self.active[k]))


@dataclass(frozen=True)
class UeObservation:
    estimated_rate: float
    average_rate: float
    spare_buffer: float
    hol_wait: float
    active: bool


@dataclass
class FeatureScales:
    """Fixed divisors mapping raw features to roughly [0, 1] for network input."""

    rate: float
    num_rbgs: int
    buffer: float
    delay: float

    @classmethod
    def from_config(cls, cfg: EnvConfig) -> "FeatureScales":
        return cls(rate=float(cfg.top_rate) or 1.0, num_rbgs=cfg.num_rbgs,
                   buffer=float(cfg.buffer_bits), delay=float(max(cfg.max_delay, 1)))

    def features(self, est_rate, avg_rate, spare, hol) -> np.ndarray:
        """(K, 4) normalized features; ``est_rate`` is per-RBG, the average is TTI-level."""
        return np.stack([
            np.asarray(est_rate, dtype=float) / self.rate,
            np.asarray(avg_rate, dtype=float) / (self.rate * self.num_rbgs),
            np.asarray(spare, dtype=float) / self.buffer,
            np.asarray(hol, dtype=float) / self.delay,
        ], axis=-1)

    def tti_features(self, obs: Observation) -> np.ndarray:
        """TTI-level features (aggregate estimated rate) used by the value network."""
        return self.features(obs.est_rate / self.num_rbgs, obs.avg_rate, obs.spare_buffer, obs.hol_wait)


@dataclass
class StepOutcome:
    tti: int
    decision: np.ndarray            # (B,) UE per RBG, -1 idle
    delivered_bits: np.ndarray      # (K,)
    transmitted_packets: np.ndarray
    arrived_packets: np.ndarray
    dropped_overflow: np.ndarray
    dropped_expired: np.ndarray
    done: bool = False

    @property
    def thp(self) -> int:
        return int(self.delivered_bits.sum())

    @property
    def dropped(self) -> int:
        return int(self.dropped_overflow.sum() + self.dropped_expired.sum())


def normalize_decision(decision, num_ues: int, num_rbgs: int) -> np.ndarray:
    """Accept a per-RBG UE vector (-1 = idle) or a (K, B) 0/1 matrix; return the vector."""
    d = np.asarray(decision)
    if d.ndim == 2:
        if d.shape != (num_ues, num_rbgs):
            raise ContractViolation(f"decision matrix shape {d.shape} != {(num_ues, num_rbgs)}")
        if np.any((d != 0) & (d != 1)):
            raise ContractViolation("decision matrix entries must be 0 or 1")
        per_rbg = d.sum(axis=0)
        if np.any(per_rbg > 1):
            b = int(np.flatnonzero(per_rbg > 1)[0])
            raise ContractViolation(f"RBG {b} assigned to more than one UE")
        out = np.full(num_rbgs, -1, dtype=np.int64)
        ks, bs = np.nonzero(d)
        out[bs] = ks
        return out
    d = d.astype(np.int64).reshape(-1)
    if d.shape != (num_rbgs,):
        raise ContractViolation(f"decision vector length {d.size} != {num_rbgs} RBGs")
    if np.any((d < -1) | (d >= num_ues)):
        raise ContractViolation(f"decision contains an invalid UE index: {d.tolist()}")
    return d


class CellEnv:
    """Single-cell environment over ``cfg.duration`` TTIs.

    Use :meth:`reset` for a live environment and :func:`smartsched.trace.replay_env`
    for a trace-driven one.
    """

    def __init__(self, cfg: EnvConfig, source, seed: int | None = None):
        self.cfg = cfg
        self.source = source
        self.seed = seed
        self.num_ues = cfg.num_ues
        self.num_rbgs = cfg.num_rbgs
        self.duration = cfg.duration
        self.tti = 0
        self.buffers = [RlcBuffer(cfg.buffer_bits) for _ in range(cfg.num_ues)]
        self.avg_rate = np.zeros(cfg.num_ues)
        self._avg_init = np.zeros(cfg.num_ues, dtype=bool)
        self._w = cfg.avg_window
        self.scales = FeatureScales.from_config(cfg)
        self._rates, self._pending_arrivals = source.record(0)
        if cfg.full_buffer:
            self._top_up()
            self._init_new_averages()

    @classmethod
    def reset(cls, cfg: EnvConfig, seed: int) -> "CellEnv":
        if not isinstance(cfg, EnvConfig):
            raise ConfigError("env: expected an EnvConfig")
        return cls(cfg, LiveSource(cfg, seed), seed=seed)

    # -- exogenous pieces -------------------------------------------------------

    @property
    def done(self) -> bool:
        return self.tti >= self.duration

    @property
    def rates(self) -> np.ndarray:
        """(K, B) achievable bits this TTI; zero once the duration is over."""
        if self.done:
            return np.zeros((self.num_ues, self.num_rbgs), dtype=np.int64)
        return self._rates

    def achievable_rate(self, ue: int, rbg: int) -> int:
        return int(self.rates[ue, rbg])

    def expire_packets(self) -> np.ndarray:
        md = self.cfg.max_delay
        return np.array([b.expire(self.tti, md) for b in self.buffers], dtype=np.int64)

    def generate_arrivals(self, arrivals: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
        """Enqueue arrivals stamped with the current TTI; returns (arrived, overflowed) counts."""
        arrived = np.zeros(self.num_ues, dtype=np.int64)
        overflow = np.zeros(self.num_ues, dtype=np.int64)
        for k, sizes in enumerate(arrivals):
            buf = self.buffers[k]
            for size in sizes:
                arrived[k] += 1
                if not buf.enqueue(Packet(int(size), self.tti)):
                    overflow[k] += 1
        return arrived, overflow

    def _top_up(self) -> np.ndarray:
        added = np.zeros(self.num_ues, dtype=np.int64)
        size = self.cfg.packet_bits
        for k, buf in enumerate(self.buffers):
            while buf.spare_bits >= size:
                buf.enqueue(Packet(size, self.tti))
                added[k] += 1
        return added

    def _init_new_averages(self) -> None:
        # first activation in the episode: seed the average with the current rate
        est = self.rates.sum(axis=1)
        for k, buf in enumerate(self.buffers):
            if not self._avg_init[k] and buf.queue:
                self._avg_init[k] = True
                self.avg_rate[k] = float(est[k])

    # -- agent-facing -----------------------------------------------------------

    def active_mask(self) -> np.ndarray:
        return np.array([len(b) > 0 for b in self.buffers], dtype=bool)

    def queued_bits(self) -> np.ndarray:
        return np.array([b.queued_bits for b in self.buffers], dtype=np.int64)

    def observe(self) -> Observation:
        bufs = self.buffers
        return Observation(
            tti=self.tti,
            est_rate_rbg=self.rates.astype(float),
            avg_rate=self.avg_rate.copy(),
            spare_buffer=np.array([b.spare_bits for b in bufs], dtype=float),
            hol_wait=np.array([b.hol_wait(self.tti) for b in bufs], dtype=float),
            queued_bits=np.array([b.queued_bits for b in bufs], dtype=float),
            active=self.active_mask(),
        )

    def apply_decision(self, decision) -> StepOutcome:
        if self.done:
            raise ContractViolation("scheduling duration is over; reset the environment")
        d = normalize_decision(decision, self.num_ues, self.num_rbgs)
        active = self.active_mask()
        granted = d[d >= 0]
        if granted.size and not np.all(active[granted]):
            bad = int(granted[~active[granted]][0])
            raise ContractViolation(f"UE {bad} is inactive (empty buffer) and cannot be scheduled")

        K = self.num_ues
        t = self.tti
        offered = np.zeros(K, dtype=np.int64)
        for b, k in enumerate(d):
            if k >= 0:
                offered[k] += self._rates[k, b]
        delivered = np.zeros(K, dtype=np.int64)
        completed = np.zeros(K, dtype=np.int64)
        for k in np.flatnonzero(offered):
            delivered[k], completed[k] = self.buffers[k].drain(int(offered[k]))

        w = self._w
        upd = self._avg_init
        self.avg_rate[upd] = (w - 1) / w * self.avg_rate[upd] + delivered[upd] / w

        self.tti += 1
        expired = self.expire_packets()
        arrived, overflow = self.generate_arrivals(self._pending_arrivals)
        if self.cfg.full_buffer:
            arrived += self._top_up()
        if not self.done:
            self._rates, self._pending_arrivals = self.source.record(self.tti)
        self._init_new_averages()

        return StepOutcome(
            tti=t, decision=d, delivered_bits=delivered, transmitted_packets=completed,
            arrived_packets=arrived, dropped_overflow=overflow, dropped_expired=expired,
            done=self.done,
        )

    def ledger_balanced(self) -> bool:
        return all(b.ledger_balanced() for b in self.buffers)

    def clone(self) -> "CellEnv":
        """Independent copy of the decision-dependent state; the exogenous source is shared.

        Only valid for sources with random access (trace replay): a live source
        advances its generators and would diverge between the copies.
        """
        new = copy.copy(self)
        new.buffers = [b.clone() for b in self.buffers]
        new.avg_rate = self.avg_rate.copy()
        new._avg_init = self._avg_init.copy()
        return new
