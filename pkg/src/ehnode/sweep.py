"""Grid sweeps: many train/evaluate runs and one summary CSV.

Each run is independent, so runs are spread over a process pool with a
bounded worker count. Results are collected and written by the parent
process in grid order, which keeps ``summary.csv`` independent of the
order in which workers finish.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from ehnode.experiment import ConfigError, RunRecord, config_hash, merge, parse, run_experiment, set_dotted

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("rms_edist_day_pct", "utilized_energy_pct", "variance_mean",
                  "power_failures", "total_duty")

# Short grid names and the config key they stand for, per agent kind.
ALIASES = {
    "alpha": {"ppo": "agent.ppo.learning_rate", "sarsa": "agent.sarsa.alpha"},
    "zeta": {"ppo": "reward.zeta", "sarsa": "reward.zeta"},
    "failure_penalty": {"ppo": "reward.failure_penalty", "sarsa": "reward.failure_penalty"},
    "gamma": {"ppo": "agent.ppo.gamma", "sarsa": "agent.sarsa.gamma"},
    "lam": {"ppo": "agent.ppo.gae_lambda", "sarsa": "agent.sarsa.lam"},
    "batch_size": {"ppo": "agent.ppo.batch_size"},
}


@dataclass
class SweepSpec:
    """A grid of config overrides crossed with a list of seeds.

    ``grid`` maps a short name from ``ALIASES`` or a dotted config key to
    the values to try. ``data`` (optional) replaces the ``data`` section of
    ``base``; ``agent`` sets ``agent.kind``.
    """

    base: dict
    grid: dict
    seeds: list
    agent: str = "ppo"
    data: Optional[dict] = None
    output_dir: str = "sweep"
    workers: int = 1

    def __post_init__(self):
        if not self.grid:
            raise ConfigError("sweep grid is empty")
        for k, v in self.grid.items():
            if not isinstance(v, (list, tuple)) or len(v) == 0:
                raise ConfigError(f"grid entry {k!r} needs a non-empty list of values")
        if not self.seeds:
            raise ConfigError("sweep needs at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seeds must be distinct, got {self.seeds}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def key_for(self, name: str) -> str:
        if name in ALIASES:
            try:
                return ALIASES[name][self.agent]
            except KeyError:
                raise ConfigError(f"{name!r} has no meaning for agent {self.agent!r}") from None
        return name

    def configs(self) -> list:
        """``(params, config)`` for every grid point, in grid order."""
        base = merge(self.base, {"agent": {"kind": self.agent}})
        if self.data is not None:
            base["data"] = merge(base["data"], self.data)
        names = list(self.grid)
        out = []
        for values in itertools.product(*(self.grid[n] for n in names)):
            cfg = merge(base, {})
            for n, v in zip(names, values):
                set_dotted(cfg, self.key_for(n), v)
            parse(cfg)
            out.append((dict(zip(names, values)), cfg))
        return out

    def to_dict(self) -> dict:
        return {"base": self.base, "grid": self.grid, "seeds": list(self.seeds),
                "agent": self.agent, "data": self.data, "output_dir": self.output_dir,
                "workers": self.workers}


@dataclass
class SweepResult:
    records: list
    failures: list = field(default_factory=list)
    summary_path: Optional[Path] = None


def _run_one(cfg: dict, seed: int, run_dir: str):
    try:
        return run_experiment(cfg, seed, Path(run_dir)).to_dict(), None
    except Exception as e:  # recorded, the sweep carries on
        return None, {"error": f"{type(e).__name__}: {e}", "traceback": traceback.format_exc()}


def run_sweep(spec: SweepSpec) -> SweepResult:
    out = Path(spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    points = spec.configs()
    jobs = []
    for params, cfg in points:
        h = config_hash(cfg)
        for seed in spec.seeds:
            jobs.append((params, cfg, h, seed, str(out / "runs" / f"{h}-s{seed}")))
    log.info("sweep: %d configs x %d seeds = %d runs, %d workers",
             len(points), len(spec.seeds), len(jobs), spec.workers)

    if spec.workers == 1:
        results = [_run_one(cfg, seed, d) for _, cfg, _, seed, d in jobs]
    else:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            futs = [pool.submit(_run_one, cfg, seed, d) for _, cfg, _, seed, d in jobs]
            results = [f.result() for f in futs]

    records, failures = [], []
    for (params, _, h, seed, d), (rec, err) in zip(jobs, results):
        if err is None:
            records.append((params, RunRecord.from_dict(rec)))
        else:
            log.warning("run %s seed %d failed: %s", h, seed, err["error"])
            failures.append({"config_hash": h, "seed": seed, "params": params, **err})

    summary = out / "summary.csv"
    write_summary(summary, records, list(spec.grid))
    (out / "failures.json").write_text(json.dumps(failures, indent=1))
    (out / "manifest.json").write_text(json.dumps({
        "spec": spec.to_dict(),
        "runs": [{"config_hash": h, "seed": seed, "params": params, "dir": d}
                 for params, _, h, seed, d in jobs],
        "n_runs": len(jobs),
        "n_failed": len(failures),
    }, indent=1))
    return SweepResult([r for _, r in records], failures, summary)


def write_summary(path: Path, records: list, param_names: list) -> None:
    """One row per successful run: hash, seed, grid values, metrics, wall time."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["config_hash", "seed", *param_names, *METRIC_COLUMNS, "wall_time_s"])
        for params, rec in records:
            m = rec.metrics
            w.writerow([rec.config_hash, rec.seed, *(repr(params[n]) for n in param_names),
                        *(repr(m[c]) for c in METRIC_COLUMNS), repr(rec.wall_time_s)])


def read_summary(path) -> list:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
