"""Figures written next to the CSV/JSON outputs (headless Agg backend).

PNG metadata is stripped of the software/version stamp so reruns produce
identical bytes.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path: str) -> str:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def _smooth(y: np.ndarray, win: int) -> np.ndarray:
    if len(y) < win or win <= 1:
        return y
    return np.convolve(y, np.ones(win) / win, mode="valid")


def learning_curve(curve: list[dict], path: str, smooth: int = 25) -> str:
    """Training reward per update, with the paired PF reward when it was tracked."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    x = np.array([r["update_index"] for r in curve])
    for key, label in (("mean_reward", "agent (sampled)"), ("pf_reward", "PF, same TTIs")):
        vals = [r.get(key) for r in curve]
        if not vals or any(v is None for v in vals):
            continue
        y = _smooth(np.asarray(vals, dtype=float), smooth)
        ax.plot(x[len(x) - len(y):], y, label=label)
    evals = [(r["update_index"], r["eval_reward"], r["eval_pf_reward"]) for r in curve
             if r.get("eval_reward") is not None]
    if evals:
        e = np.array(evals)
        ax.plot(e[:, 0], e[:, 1], "o", ms=3, label="agent (eval)")
        ax.plot(e[:, 0], e[:, 2], "x", ms=3, label="PF (eval)")
    ax.set_xlabel("update")
    ax.set_ylabel("mean step reward")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def comparison_bars(ratios: dict, path: str, scheme: str, baseline: str) -> str:
    """KPI ratios of ``scheme`` over ``baseline`` (1.0 = parity)."""
    keys = [k for k in ("thp", "jfi", "pdr", "reward") if ratios.get(k) is not None]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    vals = [ratios[k] for k in keys]
    ax.bar(keys, vals, color="tab:blue")
    ax.axhline(1.0, color="k", lw=0.8, ls="--")
    for i, v in enumerate(vals):
        ax.text(i, v, f"{v:.3f}", ha="center", va="bottom", fontsize=8)
    ax.set_ylabel(f"{scheme} / {baseline}")
    return _save(fig, path)


def pareto_scatter(sets: dict[str, list], path: str) -> str:
    """THP against JFI for each named objective list, colored by PDR."""
    fig, ax = plt.subplots(figsize=(6, 4))
    markers = ["o", "s", "^", "x", "d"]
    sc = None
    for (name, objs), m in zip(sets.items(), markers):
        if not objs:
            continue
        a = np.asarray(objs, dtype=float)
        sc = ax.scatter(a[:, 1], a[:, 0], c=a[:, 2], marker=m, cmap="viridis", label=name,
                        vmin=0.0, vmax=1.0, s=18)
    if sc is not None:
        fig.colorbar(sc, ax=ax, label="PDR")
    ax.set_xlabel("JFI")
    ax.set_ylabel("THP (bits)")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def kpi_trajectory(rows_by_scheme: dict[str, list], path: str) -> str:
    """JFI-to-date per TTI for each scheme of one replay."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, rows in rows_by_scheme.items():
        a = np.asarray([(r[0], r[2]) for r in rows], dtype=float)
        if len(a):
            ax.plot(a[:, 0], a[:, 1], label=name)
    ax.set_xlabel("TTI")
    ax.set_ylabel("JFI to date")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, path)
