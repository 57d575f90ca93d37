"""Long-horizon KPIs (throughput, Jain fairness, packet drop rate) and the per-TTI reward."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from smartsched.config import RewardWeights
from smartsched.env import StepOutcome

__all__ = ["KpiWindow", "RewardWeights", "jain_index", "step_reward", "KPI_ROW_FIELDS", "kpi_rows_csv"]


def jain_index(x) -> float:
    """(sum x)^2 / (K * sum x^2); 0 for an all-zero vector."""
    x = np.asarray(x, dtype=float)
    sq = float(np.dot(x, x))
    if sq == 0.0:
        return 0.0
    s = float(x.sum())
    return s * s / (len(x) * sq)


def step_reward(weights: RewardWeights, thp_step: float, jfi_to_date: float, dropped_step: float,
                num_ues: int, thp_scale: float = 1.0) -> float:
    """alpha * thp / thp_scale + beta * jfi - delta * dropped / K.

    ``thp_scale`` is the throughput normalizer (K times the top ladder rate in the
    environment); with the default of 1 the caller passes an already-normalized value.
    """
    if num_ues < 1:
        raise ValueError("num_ues must be >= 1")
    return (weights.alpha * (thp_step / thp_scale)
            + weights.beta * jfi_to_date
            - weights.delta * (dropped_step / num_ues))


@dataclass
class KpiWindow:
    num_ues: int
    duration: int = 0
    start_tti: int = 0
    delivered_bits: np.ndarray = field(default=None)
    arrived: int = 0
    transmitted: int = 0
    dropped: int = 0

    def __post_init__(self) -> None:
        if self.delivered_bits is None:
            self.delivered_bits = np.zeros(self.num_ues, dtype=np.int64)

    def update(self, outcome: StepOutcome) -> "KpiWindow":
        self.delivered_bits += outcome.delivered_bits
        self.arrived += int(outcome.arrived_packets.sum())
        self.transmitted += int(outcome.transmitted_packets.sum())
        self.dropped += outcome.dropped
        self.duration += 1
        return self

    @property
    def thp(self) -> int:
        return int(self.delivered_bits.sum())

    @property
    def jfi(self) -> float:
        return jain_index(self.delivered_bits)

    @property
    def pdr(self) -> float:
        """(arrived - transmitted) / arrived over the window; 0 with no arrivals.

        Packets still queued at the window end count as not transmitted, as in
        the arrived-minus-sent definition.
        """
        if self.arrived == 0:
            return 0.0
        return (self.arrived - self.transmitted) / self.arrived

    def finalize(self) -> tuple[int, float, float]:
        return self.thp, self.jfi, self.pdr


def update_kpi(window: KpiWindow, outcome: StepOutcome) -> KpiWindow:
    return window.update(outcome)


def finalize_kpi(window: KpiWindow) -> tuple[int, float, float]:
    return window.finalize()


KPI_ROW_FIELDS = ("tti", "thp_step", "jfi_to_date", "dropped_step", "reward")


def kpi_rows_csv(rows, extra_fields: tuple[str, ...] = ()) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(extra_fields + KPI_ROW_FIELDS)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v
