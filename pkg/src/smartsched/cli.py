"""Command-line experiment runner.

Every subcommand reads one JSON config (``--config``) plus dotted overrides
(``--set training.max_updates=200``) and writes its outputs under
``output.dir``. Reruns with the same config and seed give identical files.

Exit codes: 0 ok, 1 configuration or missing file, 2 runtime contract
violation, 3 failed verification (gradcheck).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys

import numpy as np

from smartsched import plots
from smartsched.a2c import CURVE_FIELDS, TrainingError, train
from smartsched.config import ConfigError, ExperimentConfig, derive_int, load_config, make_rng
from smartsched.env import ContractViolation
from smartsched.evaluation import compare_schemes, eval_seeds, evaluate_agent, make_scheduler, run_episode
from smartsched.kpi import kpi_rows_csv
from smartsched.neural import ActorCritic, CheckpointMismatch, run_gradchecks
from smartsched.pareto import (
    enumerate_sequences,
    nondominated,
    nsga2_run,
    objectives_csv,
    pla_run,
    sequence_text,
)
from smartsched.trace import Trace, record_trace, replay_env

log = logging.getLogger("smartsched")

EXIT_OK, EXIT_CONFIG, EXIT_CONTRACT, EXIT_CHECK = 0, 1, 2, 3


# --- output helpers -----------------------------------------------------------

def _path(cfg: ExperimentConfig, name: str) -> str:
    os.makedirs(cfg.output.dir, exist_ok=True)
    return os.path.join(cfg.output.dir, name)


def _write(path: str, text: str) -> str:
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return path


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _csv(fields, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow(["" if r.get(f) is None else _cell(r.get(f)) for f in fields])
    return buf.getvalue()


def _cell(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


WINDOW_FIELDS = ("seed_index", "seed", "scheme", "thp", "jfi", "pdr", "dropped", "reward")


# --- agent plumbing -----------------------------------------------------------

def _agent_for(cfg: ExperimentConfig, num_ues: int) -> ActorCritic:
    if cfg.scheduler.checkpoint:
        return ActorCritic.load(cfg.scheduler.checkpoint, num_ues)
    log.warning("no checkpoint given; evaluating a freshly initialized %s agent", cfg.training.architecture)
    return ActorCritic.build(cfg.training.architecture, num_ues, cfg.training.hidden, make_rng(cfg.seed, "init"))


def _load_traces(paths: list[str]) -> list[Trace]:
    return [Trace.load(p) for p in paths]


# --- subcommands --------------------------------------------------------------

def cmd_train(cfg: ExperimentConfig, args) -> int:
    tc = cfg.training
    agent = None
    if tc.init_checkpoint:
        agent = ActorCritic.load(tc.init_checkpoint, cfg.env.num_ues)
    traces = _load_traces(tc.virtual_traces) if tc.virtual_traces else None
    ckpt = _path(cfg, "checkpoint.json")

    def on_update(n, ag):
        if tc.checkpoint_every and n % tc.checkpoint_every == 0:
            ag.save(_path(cfg, f"checkpoint_{n:06d}.json"))

    res = train(tc, cfg.env, cfg.reward, cfg.seed, agent=agent, traces=traces, callback=on_update)
    res.agent.save(ckpt)
    _write(_path(cfg, "curve.csv"), _csv(CURVE_FIELDS, res.curve))
    tail = res.curve[-min(len(res.curve), 50):]
    summary = {
        "updates": res.updates,
        "architecture": res.agent.architecture,
        "checkpoint": os.path.basename(ckpt),
        "final_mean_reward": float(np.mean([r["mean_reward"] for r in tail])) if tail else None,
        # where the files went is not part of the experiment
        "config": {k: v for k, v in cfg.to_dict().items() if k != "output"},
    }
    if tail and tail[-1].get("pf_reward") is not None:
        summary["final_pf_reward"] = float(np.mean([r["pf_reward"] for r in tail]))
    _write(_path(cfg, "train_summary.json"), _json(summary))
    if cfg.output.figures and res.curve:
        plots.learning_curve(res.curve, _path(cfg, "learning_curve.png"))
    print(f"trained {res.updates} updates -> {ckpt}")
    return EXIT_OK


def _report_outputs(cfg: ExperimentConfig, rep, stem: str) -> None:
    _write(_path(cfg, f"{stem}_summary.json"), _json(rep.as_dict()))
    _write(_path(cfg, f"{stem}_windows.csv"), _csv(WINDOW_FIELDS, rep.windows))
    if cfg.output.figures:
        plots.comparison_bars(rep.ratios(), _path(cfg, f"{stem}_ratios.png"), rep.schemes[0], rep.baseline)
    rat = rep.ratios()
    line = ", ".join(f"{k}={'n/a' if v is None else f'{v:.4f}'}" for k, v in rat.items())
    print(f"{rep.schemes[0]} vs {rep.baseline} ({'paired' if rep.paired else 'independent'}): {line}")


def _comparison_inputs(cfg: ExperimentConfig, namespace: str):
    if cfg.compare.trace:
        return [Trace.load(cfg.compare.trace)], None
    return None, eval_seeds(cfg.seed, cfg.compare.seeds, namespace)


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    traces, seeds = _comparison_inputs(cfg, "heldout")
    agent = _agent_for(cfg, cfg.env.num_ues)
    rep = evaluate_agent(agent, cfg.env, cfg.reward, seeds or [], greedy=cfg.scheduler.greedy,
                         master=cfg.seed, traces=traces)
    _report_outputs(cfg, rep, "eval")
    return EXIT_OK


def cmd_compare(cfg: ExperimentConfig, args) -> int:
    traces, seeds = _comparison_inputs(cfg, "compare")
    names = list(cfg.compare.schemes)
    agent = _agent_for(cfg, cfg.env.num_ues) if "drl" in names else None
    factories = {}
    for i, name in enumerate(names):
        key = name if name not in factories else f"{name}#{i}"
        factories[key] = (lambda n=name: make_scheduler(n, agent, greedy=cfg.scheduler.greedy))
    rep = compare_schemes(cfg.env, cfg.reward, factories, seeds or [], paired=cfg.compare.paired, traces=traces)
    _report_outputs(cfg, rep, "compare")
    return EXIT_OK


def _pareto_trace(cfg: ExperimentConfig) -> Trace:
    if cfg.pareto.trace:
        return Trace.load(cfg.pareto.trace)
    return record_trace(cfg.env, derive_int(cfg.seed, "pareto-trace"))


def cmd_pareto(cfg: ExperimentConfig, args) -> int:
    pc = cfg.pareto
    trace = _pareto_trace(cfg)
    report: dict = {"trace_digest": trace.digest(), "num_ttis": trace.num_ttis,
                    "num_ues": trace.config.num_ues, "num_rbgs": trace.config.num_rbgs}
    scatter = {}

    def front_rows(objs):
        pts = sorted({tuple(objs[i]) for i in nondominated(objs)})
        return [{"thp": int(t), "jfi": float(j), "pdr": float(d)} for t, j, d in pts]

    if pc.exhaustive:
        en = enumerate_sequences(trace)
        report["exhaustive"] = {"sequences": len(en.sequences), "front": front_rows(en.objectives)}
        _write(_path(cfg, "pareto_exhaustive.csv"), objectives_csv(en.sequences, en.objectives))
        scatter["exhaustive"] = en.objectives
    if pc.run_ga:
        ga = nsga2_run(trace, pc.ga, derive_int(cfg.seed, "nsga2"))
        report["ga"] = {"population": pc.ga.population, "generations": pc.ga.generations,
                        "front": front_rows(ga.objectives)}
        _write(_path(cfg, "pareto_ga.csv"), objectives_csv(ga.genes, ga.objectives))
        _write(_path(cfg, "pareto_ga_history.csv"),
               _csv(("generation", "front_size", "max_thp", "max_jfi", "min_pdr"), ga.history))
        scatter["GA"] = [ga.objectives[i] for i in ga.first_front]
    if pc.run_pla:
        pla = pla_run(trace, pc.l_max, cfg.reward, dedup=pc.dedup, expansion=pc.expansion)
        objs = pla.objectives
        report["pla"] = {"l_max": pc.l_max, "dedup": pc.dedup, "expansion": pc.expansion,
                         "survivors": len(pla.paths), "max_alive": pla.max_alive,
                         "best_reward": pla.best_reward, "front": front_rows(objs)}
        _write(_path(cfg, "pareto_pla.csv"),
               objectives_csv([np.ravel(p.decisions) for p in pla.paths], objs))
        _write(_path(cfg, "pla_best_sequence.json"), sequence_text(pla.best, trace, "pla", pla.best_reward))
        scatter["PLA"] = [objs[i] for i in nondominated(objs)]
    _write(_path(cfg, "pareto_report.json"), _json(report))
    if cfg.output.figures and scatter:
        plots.pareto_scatter(scatter, _path(cfg, "pareto.png"))
    for name in ("exhaustive", "ga", "pla"):
        if name in report:
            print(f"{name}: {len(report[name]['front'])} distinct nondominated points")
    return EXIT_OK


def cmd_trace_record(cfg: ExperimentConfig, args) -> int:
    steps = args.steps or cfg.env.duration
    trace = record_trace(cfg.env, derive_int(cfg.seed, "trace"), steps)
    out = args.out or _path(cfg, "trace.jsonl")
    trace.save(out)
    print(f"recorded {trace.num_ttis} TTIs -> {out} (sha256 {trace.digest()})")
    return EXIT_OK


def cmd_trace_replay(cfg: ExperimentConfig, args) -> int:
    trace = Trace.load(args.trace)
    name = cfg.scheduler.name
    agent = _agent_for(cfg, trace.config.num_ues) if name == "drl" else None
    sched = make_scheduler(name, agent, greedy=cfg.scheduler.greedy)
    res = run_episode(replay_env(trace), sched, cfg.reward)
    thp, jfi, pdr = res.kpi.finalize()
    _write(_path(cfg, "replay_kpi.csv"), kpi_rows_csv(res.rows))
    _write(_path(cfg, "replay_summary.json"), _json({
        "scheduler": name, "trace_digest": trace.digest(), "num_ttis": trace.num_ttis,
        "thp": thp, "jfi": jfi, "pdr": pdr, "dropped": res.kpi.dropped, "mean_reward": res.mean_reward}))
    if cfg.output.figures:
        plots.kpi_trajectory({name: res.rows}, _path(cfg, "replay_jfi.png"))
    print(f"{name}: THP={thp} JFI={jfi:.4f} PDR={pdr:.4f}")
    return EXIT_OK


def cmd_gradcheck(cfg: ExperimentConfig, args) -> int:
    rep = run_gradchecks(seed=cfg.seed)
    _write(_path(cfg, "gradcheck.json"), _json(rep))
    for arch, err in sorted(rep["max_rel_error"].items()):
        print(f"{arch}: max relative error {err:.3e}")
    print("gradcheck", "PASS" if rep["passed"] else "FAIL")
    return EXIT_OK if rep["passed"] else EXIT_CHECK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "pareto": cmd_pareto,
    "trace-record": cmd_trace_record,
    "trace-replay": cmd_trace_replay,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="smartsched", description="Downlink scheduling experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key by dotted path (value parsed as JSON)")
        p.add_argument("--out-dir", help="shorthand for --set output.dir=...")
        p.add_argument("--seed", type=int, help="shorthand for --set seed=...")
        if name == "trace-record":
            p.add_argument("--out", help="trace file path (default: <output.dir>/trace.jsonl)")
            p.add_argument("--steps", type=int, help="TTIs to record (default: env.duration)")
        if name == "trace-replay":
            p.add_argument("--trace", required=True, help="trace file to replay")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.set)
    if args.out_dir:
        overrides.append(f"output.dir={json.dumps(args.out_dir)}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "trace-replay" and not os.path.exists(args.trace):
            raise ConfigError(f"--trace: file not found: {args.trace}")
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ContractViolation, CheckpointMismatch, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
