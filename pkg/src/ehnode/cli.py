"""Command-line entry point: ``ehnode <verb> [options]``.

Verbs: ``gen-data``, ``train``, ``eval``, ``sweep``, ``baseline``. Each
takes ``--preset``, ``--config FILE.json`` and repeated ``--set key=value``
overrides (value parsed as JSON, else kept as a string), and
``--print-config`` to show the merged configuration and exit.

Exit codes: 0 success, 1 configuration error, 2 one or more runs failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

from ehnode import lp, ppo, sarsa
from ehnode.experiment import (PRESETS, ConfigError, RunRecord, config_hash, evaluate,
                               load_traces, merge, parse, set_dotted, train_agent)
from ehnode.harvest import SynthProfile, TraceFormatError, synth_generate, write_csv
from ehnode.env import simulate
from ehnode.metrics import failure_count, lp_normalizer, rms_edist_day, utilized_energy, variance_mean
from ehnode.rewards import RewardKind

EXIT_OK, EXIT_CONFIG, EXIT_RUN = 0, 1, 2

log = logging.getLogger("ehnode")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_config(args) -> dict:
    if args.preset not in PRESETS:
        raise ConfigError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[args.preset]()
    if args.config:
        try:
            user = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from e
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = merge(cfg, user)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        set_dotted(cfg, k.strip(), _parse_value(v))
    parse(cfg)
    return cfg


def _write_manifest(out: Path, verb: str, cfg: dict, **extra) -> None:
    doc = {"verb": verb, "config_hash": config_hash(cfg), "config": cfg, **extra}
    (out / "manifest.json").write_text(json.dumps(doc, indent=1))


def cmd_gen_data(args, cfg) -> int:
    d = cfg["data"]
    profile = SynthProfile(**d.get("profile", {}))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rating = cfg["node"]["panel_rating_w"]
    files = {}
    for split in ("train", "eval"):
        spec = d[split]
        if spec.get("source") != "synthetic":
            continue
        tr = synth_generate(int(spec["days"]), int(spec["seed"]), profile)
        path = out / f"{split}.csv"
        write_csv(tr, path, rating)
        files[split] = str(path)
        print(f"{split}: {len(tr)} hours, {tr.daily_totals().sum():.1f} Wh -> {path}")
    _write_manifest(out, "gen-data", cfg, files=files)
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    p = parse(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_trace, _ = load_traces(cfg)
    t0 = time.perf_counter()
    try:
        trained = train_agent(p, train_trace, args.seed)
    except ppo.NumericalError as e:
        log.error("training failed: %s", e)
        return EXIT_RUN
    wall = time.perf_counter() - t0
    if p.agent == "ppo":
        snap = out / "policy.bin"
        ppo.save_policy(trained.params, snap)
    else:
        snap = out / "qtable.json"
        sarsa.save_qtable(trained, snap)
    _write_manifest(out, "train", cfg, seed=args.seed, snapshot=str(snap), wall_time_s=wall,
                    curve=[float(x) for x in trained.curve])
    print(f"trained {p.agent} in {wall:.1f} s -> {snap}")
    return EXIT_OK


def _load_act(p, snapshot: Path):
    if p.agent == "ppo":
        params = ppo.load_policy(snapshot)
        return lambda obs: params.act(obs.values)
    return sarsa.load_qtable(snapshot).act


def cmd_eval(args, cfg) -> int:
    p = parse(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, eval_trace = load_traces(cfg)
    try:
        act = _load_act(p, Path(args.snapshot))
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot load snapshot {args.snapshot}: {e}") from e
    t0 = time.perf_counter()
    traj, metrics, norm = evaluate(p, act, eval_trace)
    traj.to_csv(out / "trajectory.csv")
    rec = RunRecord(config=cfg, seed=args.seed, metrics=metrics.to_dict(),
                    wall_time_s=time.perf_counter() - t0, config_hash=config_hash(cfg),
                    snapshot_path=str(args.snapshot), trajectory_path=str(out / "trajectory.csv"),
                    normalizer_wh=norm)
    rec.save(out / "record.json")
    _write_manifest(out, "eval", cfg, snapshot=str(args.snapshot))
    print(json.dumps(metrics.to_dict(), indent=1))
    return EXIT_OK


def cmd_sweep(args, cfg) -> int:
    from ehnode.sweep import SweepSpec, run_sweep
    grid = {}
    for item in args.grid or []:
        if "=" not in item:
            raise ConfigError(f"--grid expects name=v1,v2,..., got {item!r}")
        k, vals = item.split("=", 1)
        grid[k.strip()] = [_parse_value(v) for v in vals.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [0]
    spec = SweepSpec(base=cfg, grid=grid, seeds=seeds, agent=cfg["agent"]["kind"],
                     output_dir=args.out, workers=args.workers)
    res = run_sweep(spec)
    print(f"{len(res.records)} runs ok, {len(res.failures)} failed -> {res.summary_path}")
    return EXIT_RUN if res.failures else EXIT_OK


def cmd_baseline(args, cfg) -> int:
    p = parse(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, eval_trace = load_traces(cfg)
    b_start = float(cfg["eval"]["initial_fraction"]) * p.node.buffer_capacity_wh
    neutral = p.reward.kind is RewardKind.NEUTRALITY
    b0 = p.reward.b0_wh if neutral else b_start
    try:
        sched = lp.optimal_schedule(eval_trace.hourly_wh, p.node, b_start,
                                    objective="neutrality" if neutral else "max_duty", b0=b0)
    except lp.LpInfeasible as e:
        log.error("LP infeasible: %s", e)
        return EXIT_RUN
    lp.write_schedule_csv(sched, out / "schedule.csv")
    norm = lp_normalizer(eval_trace.hourly_wh, p.node, b_start)
    duties = sched.duties
    metrics = {
        "rms_edist_day_pct": rms_edist_day(sched.buffer, b0, p.node.buffer_capacity_wh),
        "utilized_energy_pct": utilized_energy(sched.consumed, norm),
        "variance_mean": variance_mean(duties),
        "power_failures": failure_count(simulate(p.node, eval_trace.hourly_wh, duties, b_start)["failure"]),
        "total_duty": math.fsum(duties),
    }
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1))
    _write_manifest(out, "baseline", cfg, objective="neutrality" if neutral else "max_duty")
    print(json.dumps(metrics, indent=1))
    return EXIT_OK


VERBS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
         "sweep": cmd_sweep, "baseline": cmd_baseline}


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ehnode", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        sp = sub.add_parser(verb)
        sp.add_argument("--preset", default="appgoal", help="appgoal or neutrality")
        sp.add_argument("--config", help="JSON file merged over the preset")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted override, e.g. reward.zeta=0.01")
        sp.add_argument("--print-config", action="store_true")
        sp.add_argument("--out", default=f"runs/{verb}")
        if verb in ("train", "eval"):
            sp.add_argument("--seed", type=int, default=0)
        if verb == "eval":
            sp.add_argument("--snapshot", help="policy.bin or qtable.json")
        if verb == "sweep":
            sp.add_argument("--grid", action="append", metavar="NAME=V1,V2",
                            help="e.g. zeta=0.001,0.01 or agent.ppo.learning_rate=1e-4,3e-4")
            sp.add_argument("--seeds", default="0", help="comma-separated seeds")
            sp.add_argument("--workers", type=int, default=1)
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        if args.print_config:
            print(json.dumps(cfg, indent=1, sort_keys=True))
            return EXIT_OK
        if args.verb == "eval" and not args.snapshot:
            raise ConfigError("eval needs --snapshot")
        return VERBS[args.verb](args, cfg)
    except (ConfigError, TraceFormatError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
