"""Ablation sweeps (M1..M4, full) over shared seeds and their summary."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import ABLATIONS, RunConfig

ABLATE_COLUMNS = ("seed", "step", "frames", "episode_reward", "episode_reward_std", "distance",
                  "crash_intensity", "avg_steer_pct", "avg_brake_pct")
ORDER = ("M1", "M2", "M3", "M4")


def run_seed(config: RunConfig, tag: str, seed: int, log_dir: str | Path | None, evaluate: bool = True) -> list[dict]:
    """Train one (tag, seed) run and return its evaluation rows; the last
    row is always an evaluation of the final policy."""
    from .trainer import Trainer

    trainer = Trainer(config.replace(train={"ablation": tag, "seed": seed}), log_dir)
    _, log = trainer.train(evaluate=evaluate)
    if not log.evals or log.evals[-1]["step"] != trainer.step:
        trainer._periodic_eval()
    return [{"seed": seed, **{k: r[k] for k in ABLATE_COLUMNS if k != "seed"}} for r in log.evals]


def write_rows(path: str | Path, rows: Sequence[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATE_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return path


def read_rows(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k in ("seed", "step", "frames") else float(v)) for k, v in r.items()}
                for r in csv.DictReader(fh)]


def run_ablation(config: RunConfig, out_dir: str | Path, tags: Sequence[str] = ABLATIONS,
                 seeds: Sequence[int] | None = None, evaluate: bool = True,
                 progress: Callable[[str], None] | None = None) -> dict[str, list[dict]]:
    """Train every tag on every seed; writes ``{out}/{tag}/seed{s}/`` logs and
    one ``{out}/{tag}.csv`` of evaluation rows per tag."""
    out_dir = Path(out_dir)
    seeds = list(config.train.seeds if seeds is None else seeds)
    results = {}
    for tag in tags:
        rows = []
        for seed in seeds:
            t0 = time.time()
            seed_rows = run_seed(config, tag, seed, out_dir / tag / f"seed{seed}", evaluate)
            rows += seed_rows
            if progress:
                progress(f"{tag} seed {seed}: final eval reward {seed_rows[-1]['episode_reward']:.3f} "
                         f"({time.time() - t0:.0f}s)")
        write_rows(out_dir / f"{tag}.csv", rows)
        results[tag] = rows
    return results


def final_rewards(rows: Sequence[dict]) -> dict[int, float]:
    """Seed -> mean episode reward of that seed's last evaluation."""
    last: dict[int, dict] = {}
    for r in rows:
        if r["seed"] not in last or r["step"] >= last[r["seed"]]["step"]:
            last[r["seed"]] = r
    return {s: float(r["episode_reward"]) for s, r in sorted(last.items())}


@dataclass
class AblationSummary:
    means: dict[str, float]
    sems: dict[str, float]
    per_seed: dict[str, dict[int, float]]
    margin: float = math.nan
    pooled_se: float = math.nan
    violations: list[str] = field(default_factory=list)

    @property
    def m4_beats_m1(self) -> bool:
        return self.margin > self.pooled_se

    def text(self) -> str:
        lines = ["tag,n_seeds,mean_final_reward,sem"]
        lines += [f"{t},{len(self.per_seed[t])},{self.means[t]:.3f},{self.sems[t]:.3f}" for t in self.means]
        present = [t for t in ORDER if t in self.means]
        lines.append("ordering: " + " ".join(f"{t}={self.means[t]:.2f}" for t in present))
        lines.append("violations: " + (", ".join(self.violations) if self.violations else "none"))
        if not math.isnan(self.margin):
            lines.append(f"M4 - M1 = {self.margin:.3f}, pooled SE = {self.pooled_se:.3f}, "
                         f"required M4 > M1 + SE: {'yes' if self.m4_beats_m1 else 'no'}")
        return "\n".join(lines) + "\n"


def summarize(results: dict[str, Sequence[dict]]) -> AblationSummary:
    """Seed-means of final rewards, the M4 - M1 margin against the pooled
    standard error ``sqrt(s1^2 / n1 + s4^2 / n4)`` (sample std over seeds),
    and any adjacent violations of M1 <= M2 <= M3 <= M4."""
    per_seed = {t: final_rewards(rows) for t, rows in results.items()}
    means, sems = {}, {}
    for t, by_seed in per_seed.items():
        v = np.array(list(by_seed.values()), dtype=np.float64)
        means[t] = float(v.mean())
        sems[t] = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else math.nan
    summary = AblationSummary(means, sems, per_seed)
    present = [t for t in ORDER if t in means]
    summary.violations = [f"{a} > {b}" for a, b in zip(present, present[1:]) if means[a] > means[b]]
    if "M1" in means and "M4" in means:
        summary.margin = means["M4"] - means["M1"]
        summary.pooled_se = math.sqrt(sems["M1"] ** 2 + sems["M4"] ** 2)
    return summary
