import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smartsched.config import ConfigError, EnvConfig
from smartsched.env import (
    CellEnv,
    ChannelProcess,
    ContractViolation,
    LiveSource,
    Packet,
    RlcBuffer,
    ladder_rate,
    normalize_decision,
)
from smartsched.trace import Trace, TraceSource, record_trace, replay_env


class ScriptedSource:
    """Fixed rates, arrivals given per TTI (None = no arrivals)."""

    def __init__(self, rates, arrivals=None):
        self.rates = np.asarray(rates, dtype=np.int64)
        self.arrivals = arrivals or {}

    def record(self, t):
        k = self.rates.shape[0]
        return self.rates.copy(), self.arrivals.get(t, [[] for _ in range(k)])


def scripted_env(rates, arrivals=None, **kw):
    rates = np.asarray(rates)
    cfg = EnvConfig(num_ues=rates.shape[0], num_rbgs=rates.shape[1], **kw)
    return CellEnv(cfg, ScriptedSource(rates, arrivals))


# --- buffers ------------------------------------------------------------------

def test_overflow_counts_all_arrivals():
    buf = RlcBuffer(capacity_bits=2 * 100)
    assert buf.enqueue(Packet(100, 0)) and buf.enqueue(Packet(100, 0))
    results = [buf.enqueue(Packet(100, 0)) for _ in range(3)]
    assert results == [False] * 3
    assert buf.arrived_packets == 5 and buf.dropped_overflow == 3
    assert buf.ledger_balanced()


def test_partial_drain_keeps_hol_remainder():
    buf = RlcBuffer(10**6)
    buf.enqueue(Packet(10_000, 0))
    sent, done = buf.drain(8_000)
    assert (sent, done) == (8_000, 0)
    assert buf.queue[0].remaining_bits == 2_000
    assert buf.queued_bits == 2_000


def test_expiry_boundary():
    buf = RlcBuffer(10**6)
    buf.enqueue(Packet(100, 0))
    buf.enqueue(Packet(100, 1))
    assert buf.expire(2000, 2000) == 0          # aged exactly max_delay: retained
    assert buf.expire(2001, 2000) == 1          # aged 2001: expired
    assert len(buf) == 1 and buf.queue[0].arrival_tti == 1
    assert RlcBuffer(10).expire(10**6, 0) == 0  # empty buffer


# --- channel and ladder -------------------------------------------------------

def test_ladder_edges_and_monotone_sweep():
    cfg = EnvConfig()
    th, rates = cfg.ladder_snr_db, cfg.ladder_rates
    assert ladder_rate(-100.0, th, rates) == 0
    assert ladder_rate(th[0] - 1e-9, th, rates) == 0
    assert ladder_rate(th[0], th, rates) == rates[0]
    assert ladder_rate(500.0, th, rates) == rates[-1]
    sweep = np.linspace(-20, 40, 6001)
    out = ladder_rate(sweep, th, rates)
    assert np.all(np.diff(out) >= 0)
    for t, r in zip(th, rates):  # value right at each boundary
        assert ladder_rate(t, th, rates) == r


def test_rho_one_keeps_snr_constant(rng):
    cfg = EnvConfig(num_ues=3, num_rbgs=2)
    ch = ChannelProcess([5.0, 10.0, 15.0], np.zeros((3, 2)), 1.0, 3.0, cfg.ladder_snr_db, cfg.ladder_rates)
    first = ch.snr_db().copy()
    for _ in range(200):
        ch.advance(rng)
    np.testing.assert_array_equal(ch.snr_db(), first)


def test_rho_zero_is_uncorrelated(rng):
    cfg = EnvConfig(num_ues=1)
    ch = ChannelProcess([0.0], rng.standard_normal((1, 1)), 0.0, 3.0, cfg.ladder_snr_db, cfg.ladder_rates)
    xs = np.array([ch.advance(rng)[0, 0] for _ in range(100_000)])
    r1 = np.corrcoef(xs[:-1], xs[1:])[0, 1]
    assert abs(r1) < 0.02


def test_very_low_snr_gives_zero_rates():
    cfg = EnvConfig(num_ues=2, num_rbgs=3, snr_db=[-100.0, -100.0])
    env = CellEnv.reset(cfg, 1)
    assert np.all(env.rates == 0)


def test_poisson_mean_arrivals():
    # 10^6 TTI-UE samples from the arrival stream
    cfg = EnvConfig(num_ues=100)
    src = LiveSource(cfg, 3)
    counts = [sum(len(a) for a in src.record(t)[1]) for t in range(10_000)]
    assert np.mean(counts) / 100 == pytest.approx(0.2, abs=0.01)


# --- reset / arrivals / decisions ---------------------------------------------

def test_reset_determinism():
    cfg = EnvConfig(num_ues=5)
    a, b = CellEnv.reset(cfg, 7), CellEnv.reset(cfg, 7)
    for _ in range(50):
        np.testing.assert_array_equal(a.rates, b.rates)
        d = np.array([int(np.argmax(a.active_mask())) if a.active_mask().any() else -1])
        oa, ob = a.apply_decision(d), b.apply_decision(d)
        np.testing.assert_array_equal(oa.delivered_bits, ob.delivered_bits)
        np.testing.assert_array_equal(oa.arrived_packets, ob.arrived_packets)


def test_zero_rate_means_no_traffic_ever():
    env = CellEnv.reset(EnvConfig(num_ues=3, arrival_rate=0.0, duration=50), 2)
    assert not env.active_mask().any()
    while not env.done:
        out = env.apply_decision([-1])
        assert out.arrived_packets.sum() == 0
    assert not env.active_mask().any()


def test_num_ues_zero_is_config_error():
    with pytest.raises(ConfigError, match="num_ues"):
        CellEnv.reset(EnvConfig(num_ues=0), 0)


def test_fresh_env_observation():
    env = CellEnv.reset(EnvConfig(num_ues=3), 0)
    obs = env.observe()
    assert not obs.active.any()
    np.testing.assert_array_equal(obs.spare_buffer, [env.cfg.buffer_bits] * 3)
    np.testing.assert_array_equal(obs.hol_wait, [0, 0, 0])


def test_hol_wait_counts_ttis_since_arrival():
    # packet arrives at the end of TTI 0 (stamped tti=1), observed at tti=4
    env = scripted_env([[1000]], {0: [[800]]})
    env.apply_decision([-1])
    assert env.tti == 1 and env.observe().hol_wait[0] == 0
    for _ in range(3):
        env.apply_decision([-1])
    assert env.observe().hol_wait[0] == 3


def test_transmission_min_rule():
    env = scripted_env([[8_000]], {0: [[10_000]]})
    env.apply_decision([-1])
    out = env.apply_decision([0])
    assert out.delivered_bits[0] == 8_000 and out.transmitted_packets[0] == 0
    assert env.buffers[0].queue[0].remaining_bits == 2_000


def test_two_rbgs_same_ue_queue_limited():
    env = scripted_env([[5_000, 5_000]], {0: [[8_000]]})
    env.apply_decision([-1, -1])
    out = env.apply_decision([0, 0])
    assert out.delivered_bits[0] == 8_000 and out.transmitted_packets[0] == 1


def test_idle_decision_changes_nothing_but_arrivals():
    env = scripted_env([[1000, 1000], [1000, 1000]], {0: [[500], [700]]})
    env.apply_decision(np.zeros((2, 2), dtype=int))  # all-zero matrix
    before = env.queued_bits().copy()
    out = env.apply_decision(np.zeros((2, 2), dtype=int))
    assert out.thp == 0
    np.testing.assert_array_equal(env.queued_bits(), before)


def test_contract_violations():
    env = scripted_env([[1000, 1000], [1000, 1000]], {0: [[500], [500]]})
    with pytest.raises(ContractViolation, match="inactive"):
        env.apply_decision([0, -1])
    env.apply_decision([-1, -1])
    with pytest.raises(ContractViolation):
        normalize_decision(np.ones((2, 2), dtype=int), 2, 2)   # RBG granted twice
    with pytest.raises(ContractViolation):
        normalize_decision([5, 0], 2, 2)
    env2 = scripted_env([[1]], duration=1)
    env2.apply_decision([-1])
    with pytest.raises(ContractViolation, match="over"):
        env2.apply_decision([-1])


def test_matrix_and_vector_decisions_agree():
    m = np.array([[0, 1, 0], [1, 0, 0], [0, 0, 0]])
    np.testing.assert_array_equal(normalize_decision(m, 3, 3), [1, 0, -1])


def test_average_tracker_first_activation():
    env = scripted_env([[1000], [300]], {0: [[4000], [4000]]}, avg_window=10)
    env.apply_decision([-1])
    np.testing.assert_array_equal(env.avg_rate, [1000.0, 300.0])
    env.apply_decision([0])
    np.testing.assert_allclose(env.avg_rate, [0.9 * 1000 + 100, 0.9 * 300])


# --- invariants ---------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), k=st.integers(1, 5), b=st.integers(1, 3),
       lam=st.floats(0, 3000), cap_pkts=st.integers(1, 6), delay=st.integers(0, 20))
def test_ledger_buffer_bound_and_activity(seed, k, b, lam, cap_pkts, delay):
    cfg = EnvConfig(num_ues=k, num_rbgs=b, duration=40, arrival_rate=lam, packet_bits=1000,
                    buffer_bits=1000 * cap_pkts, max_delay=delay)
    env = CellEnv.reset(cfg, seed)
    r = np.random.default_rng(seed)
    while not env.done:
        act = np.flatnonzero(env.active_mask())
        d = np.where(r.random(b) < 0.8, r.choice(act), -1) if act.size else np.full(b, -1)
        env.apply_decision(d)
        assert env.ledger_balanced()
        for buf in env.buffers:
            assert 0 <= buf.queued_bits <= buf.capacity_bits
            assert buf.queued_bits == sum(p.remaining_bits for p in buf.queue)
        np.testing.assert_array_equal(env.active_mask(), [len(x) > 0 for x in env.buffers])
        obs = env.observe()
        feats = env.scales.tti_features(obs)
        assert np.all(np.isfinite(feats)) and np.all(feats >= 0)


# --- traces -------------------------------------------------------------------

def _drive(env, rule):
    deliv = []
    while not env.done:
        act = env.active_mask()
        d = [rule(env.tti, act)]
        deliv.append(env.apply_decision(d).delivered_bits.copy())
    return np.array(deliv)


def _first_active(t, act):
    return int(np.argmax(act)) if act.any() else -1


def test_trace_roundtrip_and_replay(tmp_path):
    cfg = EnvConfig(num_ues=3, duration=120, arrival_rate=300.0)
    tr = record_trace(cfg, 11)
    path = tmp_path / "t.jsonl"
    tr.save(str(path))
    back = Trace.load(str(path))
    assert back.digest() == tr.digest()
    np.testing.assert_array_equal(back.rates, tr.rates)
    live = _drive(CellEnv.reset(cfg, 11), _first_active)
    rep = _drive(replay_env(back), _first_active)
    np.testing.assert_array_equal(live, rep)


def test_replay_is_decision_sensitive():
    cfg = EnvConfig(num_ues=3, duration=120, arrival_rate=600.0)
    tr = record_trace(cfg, 5)

    def last_active(t, act):
        return int(np.flatnonzero(act)[-1]) if act.any() else -1

    a = _drive(replay_env(tr), _first_active)
    b = _drive(replay_env(tr), last_active)
    assert not np.array_equal(a, b)


def test_trace_file_errors(tmp_path):
    with pytest.raises(FileNotFoundError, match="missing.jsonl"):
        Trace.load(str(tmp_path / "missing.jsonl"))
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"format": "other"}\n')
    with pytest.raises(ValueError):
        Trace.load(str(bad))


def test_trace_source_bounds():
    tr = record_trace(EnvConfig(num_ues=2, duration=3), 0)
    with pytest.raises(ContractViolation):
        TraceSource(tr).record(3)


def test_clone_is_independent():
    tr = record_trace(EnvConfig(num_ues=2, duration=30, arrival_rate=900.0), 4)
    env = replay_env(tr)
    for _ in range(5):
        env.apply_decision([_first_active(0, env.active_mask())])
    twin = env.clone()
    a = _drive(env, _first_active)
    b = _drive(twin, _first_active)
    np.testing.assert_array_equal(a, b)
    assert env.tti == twin.tti == 30
