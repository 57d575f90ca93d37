"""Exogenous-process traces: record a live stream once, replay it bit-exactly.

File format (JSON lines, UTF-8):

* line 1, header: ``{"format": "smartsched-trace", "version": 1, "seed": ...,
  "mean_snr_db": [...], "config": {<env section>}}``
* one line per TTI ``t``: ``{"t": t, "rates": [[bits per RBG] per UE],
  "arrivals": [[packet sizes] per UE]}``

Rates are integers (bits per TTI per RBG), so a replay is exact.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from smartsched.config import ConfigError, EnvConfig, from_dict
from smartsched.env import CellEnv, ContractViolation, LiveSource

TRACE_FORMAT = "smartsched-trace"
TRACE_VERSION = 1


@dataclass
class Trace:
    config: EnvConfig
    seed: int | None
    rates: np.ndarray                 # (N, K, B) int64
    arrivals: list[list[list[int]]]   # N x K x sizes
    mean_snr_db: list[float] | None = None

    @property
    def num_ttis(self) -> int:
        return int(self.rates.shape[0])

    def records(self):
        for t in range(self.num_ttis):
            yield t, self.rates[t], self.arrivals[t]

    def digest(self) -> str:
        """SHA-256 over the exogenous records (rates and arrivals only)."""
        h = hashlib.sha256()
        for t, r, a in self.records():
            h.update(_record_line(t, r, a).encode())
        return h.hexdigest()

    def dumps(self) -> str:
        header = {
            "format": TRACE_FORMAT,
            "version": TRACE_VERSION,
            "seed": self.seed,
            "mean_snr_db": self.mean_snr_db,
            "config": dataclasses.asdict(self.config),
        }
        lines = [json.dumps(header, sort_keys=True)]
        lines += [_record_line(t, r, a) for t, r, a in self.records()]
        return "\n".join(lines) + "\n"

    def save(self, path: str) -> None:
        d = os.path.dirname(path)
        if d:
            os.makedirs(d, exist_ok=True)
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path: str) -> "Trace":
        if not os.path.exists(path):
            raise FileNotFoundError(f"trace file not found: {path}")
        with open(path) as fh:
            lines = [ln for ln in fh.read().splitlines() if ln.strip()]
        if not lines:
            raise ValueError(f"{path}: empty trace")
        header = json.loads(lines[0])
        if header.get("format") != TRACE_FORMAT or header.get("version") != TRACE_VERSION:
            raise ValueError(f"{path}: not a {TRACE_FORMAT} v{TRACE_VERSION} file")
        cfg = from_dict(EnvConfig, header["config"], "trace.config.")
        rates, arrivals = [], []
        for i, line in enumerate(lines[1:]):
            rec = json.loads(line)
            if rec["t"] != i:
                raise ValueError(f"{path}: record {i} has t={rec['t']}")
            rates.append(rec["rates"])
            arrivals.append([[int(s) for s in ue] for ue in rec["arrivals"]])
        arr = np.array(rates, dtype=np.int64).reshape(len(rates), cfg.num_ues, cfg.num_rbgs)
        return cls(cfg, header.get("seed"), arr, arrivals, header.get("mean_snr_db"))


def _record_line(t: int, rates: np.ndarray, arrivals) -> str:
    return json.dumps({"t": t, "rates": np.asarray(rates).tolist(), "arrivals": arrivals},
                      separators=(",", ":"))


class TraceSource:
    """Random-access source backed by a :class:`Trace`."""

    def __init__(self, trace: Trace):
        self.trace = trace

    def record(self, t: int):
        if t >= self.trace.num_ttis:
            raise ContractViolation(f"trace has {self.trace.num_ttis} TTIs; TTI {t} requested")
        return self.trace.rates[t].copy(), self.trace.arrivals[t]


def record_trace(cfg: EnvConfig, seed: int, steps: int | None = None) -> Trace:
    """Draw ``steps`` TTIs (default: the scheduling duration) of the live exogenous stream."""
    steps = cfg.duration if steps is None else steps
    if steps < 1:
        raise ConfigError("steps: must be >= 1")
    src = LiveSource(cfg, seed)
    rates, arrivals = [], []
    for t in range(steps):
        r, a = src.record(t)
        rates.append(r)
        arrivals.append(a)
    rec_cfg = dataclasses.replace(cfg, duration=steps)
    return Trace(rec_cfg, seed, np.array(rates, dtype=np.int64), arrivals,
                 [float(x) for x in src.mean_snr_db])


def replay_env(trace: Trace, cfg: EnvConfig | None = None) -> CellEnv:
    """Environment whose rates and arrivals come from ``trace``; buffers follow the decisions."""
    base = trace.config if cfg is None else cfg
    if (base.num_ues, base.num_rbgs) != (trace.config.num_ues, trace.config.num_rbgs):
        raise ConfigError("env: trace shape does not match the configured K and B")
    run_cfg = dataclasses.replace(base, duration=trace.num_ttis)
    return CellEnv(run_cfg, TraceSource(trace), seed=trace.seed)
