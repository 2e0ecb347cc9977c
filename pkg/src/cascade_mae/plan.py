"""Experiment plans: a grid of settings times a list of seeds, one job per cell.

A plan is JSON::

    {"kind": "ablation-depth",
     "grid": {"depth": [1, 2, 3], "p_pre": [0, "D"]},
     "seeds": [0, 1, 2, 3, 4],
     "setup": {"rounds": 100}}

``setup`` overrides :class:`DeskSetup` fields for every job; grid keys may be
``DeskSetup`` fields too. ``p_pre: "D"`` means "equal to depth". Each job writes
its row under ``jobs/<id>/``; ``manifest.tsv`` records finished jobs so a rerun
only does the missing ones.
"""
from __future__ import annotations

import csv
import itertools
import json
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .experiments import (ACCURACY_HEADER, DeskSetup, cascade_accuracy, downstream_sets,
                          pretrain_sources, recon_pair, refine_pair)
from .oracle import oracle_sweep

ACCURACY_KINDS = ("cascade-finetune", "ablation-depth", "ablation-ppre", "sweep-alpha",
                  "sweep-clients", "sweep-epochs", "sweep-ratio", "sweep-rounds")
KINDS = ("pretrain",) + ACCURACY_KINDS + ("server-data", "linear-oracle", "reconstruct")
ARM_KEYS = ("depth", "p_pre")
ORACLE_KEYS = ("d", "n", "m", "p", "K", "gd_steps")
SETUP_KEYS = tuple(f.name for f in fields(DeskSetup))
# the axis each sweep is about; the grid must vary it
SWEEP_AXIS = {"sweep-alpha": "alpha", "sweep-clients": "lineages", "sweep-epochs": "local_epochs",
              "sweep-ratio": "mask_ratio", "sweep-rounds": "rounds", "server-data": "server_images"}


class PlanError(ValueError):
    pass


@dataclass
class ExperimentPlan:
    kind: str
    grid: dict[str, list]
    seeds: list[int]
    out: str | None = None
    setup: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise PlanError(f"unknown experiment kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if not self.grid or any(not isinstance(v, list) or not v for v in self.grid.values()):
            raise PlanError("grid must map each key to a nonempty list")
        if not self.seeds:
            raise PlanError("seeds must be nonempty")
        allowed = set(SETUP_KEYS)
        if self.kind == "linear-oracle":
            allowed = set(ORACLE_KEYS)
        elif self.kind in ACCURACY_KINDS:
            allowed |= set(ARM_KEYS)
        bad = sorted(set(self.grid) - allowed)
        if bad:
            raise PlanError(f"grid keys not valid for {self.kind}: {', '.join(bad)}")
        bad = sorted(set(self.setup) - set(SETUP_KEYS))
        if bad:
            raise PlanError(f"unknown setup keys: {', '.join(bad)}")
        axis = SWEEP_AXIS.get(self.kind)
        if axis and axis not in self.grid:
            raise PlanError(f"{self.kind} needs {axis!r} in its grid")
        base = DeskSetup(**self.setup)
        for point in self.points():
            if self.kind in ACCURACY_KINDS:
                depth, p_pre = arm(point)
                lineages = point.get("lineages", base.lineages)
                if not 0 <= p_pre <= depth or p_pre > lineages:
                    raise PlanError(f"invalid arm depth={depth} p_pre={p_pre} with {lineages} lineages")

    def points(self) -> list[dict]:
        keys = sorted(self.grid)
        return [dict(zip(keys, vals)) for vals in itertools.product(*(self.grid[k] for k in keys))]

    def jobs(self) -> list[tuple[str, dict, int]]:
        out = []
        for point in self.points():
            for seed in self.seeds:
                out.append((job_id(point, seed), point, int(seed)))
        return out

    @classmethod
    def from_json(cls, text: str) -> "ExperimentPlan":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise PlanError(f"plan is not valid JSON: {exc}") from exc
        unknown = sorted(set(raw) - {"kind", "grid", "seeds", "out", "setup"})
        if unknown:
            raise PlanError(f"unknown plan fields: {', '.join(unknown)}")
        try:
            plan = cls(raw["kind"], raw.get("grid", {}), list(raw.get("seeds", [])), raw.get("out"),
                       raw.get("setup", {}))
        except KeyError as exc:
            raise PlanError(f"plan is missing {exc}") from exc
        plan.validate()
        return plan

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def job_id(point: dict, seed: int) -> str:
    parts = [f"{k}={point[k]}" for k in sorted(point)] + [f"seed={seed}"]
    return ",".join(parts).replace("/", "_")


def arm(point: dict) -> tuple[int, int]:
    depth = int(point.get("depth", 1))
    p = point.get("p_pre", "D")
    return depth, depth if p == "D" else int(p)


def _setup_for(plan: ExperimentPlan, point: dict) -> DeskSetup:
    over = {k: v for k, v in point.items() if k in SETUP_KEYS}
    return DeskSetup(**{**plan.setup, **over})


def run_job(plan: ExperimentPlan, point: dict, seed: int, job_dir: Path, cache_dir: Path) -> dict:
    """One grid cell for one seed; returns the metric values of that row."""
    kind = plan.kind
    if kind == "linear-oracle":
        K, p = int(point.get("K", 1)), float(point.get("p", 0.5))
        rows = oracle_sweep(int(point.get("d", 8)), int(point.get("n", 10)), int(point.get("m", 20)),
                            [p], [K], seed=seed, gd_steps=int(point.get("gd_steps", 2000)))
        _, _, _, _, lam, r_cf, r_gd, gap = rows[0]
        return {"lambda": lam, "residual_closed_form": r_cf, "residual_gd": r_gd, "gap": gap}
    setup = _setup_for(plan, point)
    sources = pretrain_sources(setup, seed, cache_dir)
    if kind == "pretrain":
        pre, fresh = recon_pair(sources, setup.with_(recon_depth=1), seed)
        return {"recon_loss": pre, "recon_loss_fresh": fresh}
    if kind in ACCURACY_KINDS:
        depth, p_pre = arm(point)
        acc = cascade_accuracy(sources, setup, seed, depth, p_pre, data=downstream_sets(setup, seed))
        return {"label_fraction": setup.label_fraction, "accuracy": acc}
    if kind == "server-data":
        before, after = refine_pair(sources, setup, seed)
        return {"accuracy_unrefined": before, "accuracy_refined": after}
    if kind == "reconstruct":
        pre, fresh = recon_pair(sources, setup, seed, dump_path=job_dir / "reconstruction.ppm")
        return {"loss_pretrained": pre, "loss_fresh": fresh}
    raise PlanError(f"no runner for kind {kind!r}")


def _job_entry(args):
    plan, jid, point, seed, out = args
    job_dir = out / "jobs" / jid
    job_dir.mkdir(parents=True, exist_ok=True)
    try:
        metrics = run_job(plan, point, seed, job_dir, out / "cache")
    except Exception as exc:  # recorded per job; the plan keeps going
        (job_dir / "error.txt").write_text(traceback.format_exc())
        return jid, None, f"{type(exc).__name__}: {exc}"
    row = {**point, "seed": seed, **metrics}
    tmp = job_dir / "row.json.tmp"
    tmp.write_text(json.dumps(row))
    os.replace(tmp, job_dir / "row.json")
    return jid, row, None


def read_manifest(out: Path) -> dict[str, str]:
    path = out / "manifest.tsv"
    if not path.exists():
        return {}
    status = {}
    for line in path.read_text().splitlines()[1:]:
        jid, st = line.split("\t")[:2]
        status[jid] = st
    return status


def _write_manifest(out: Path, plan: ExperimentPlan, status: dict[str, str], errors: dict[str, str]):
    lines = ["job_id\tstatus\tmessage"]
    for jid, _, _ in plan.jobs():
        lines.append(f"{jid}\t{status.get(jid, 'pending')}\t{errors.get(jid, '')}")
    tmp = out / "manifest.tsv.tmp"
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, out / "manifest.tsv")


def run_plan(plan: ExperimentPlan, out=None, workers: int = 1, log=print) -> int:
    """Run every missing job, merge rows, summarise. Returns 0, or 2 if any job failed."""
    plan.validate()
    out = Path(out or plan.out or "runs")
    out.mkdir(parents=True, exist_ok=True)
    (out / "plan.json").write_text(plan.to_json() + "\n")
    status = read_manifest(out)
    todo = [(plan, jid, pt, seed, out) for jid, pt, seed in plan.jobs()
            if not (status.get(jid) == "done" and (out / "jobs" / jid / "row.json").exists())]
    log(f"{len(plan.jobs()) - len(todo)} jobs already done, {len(todo)} to run")
    errors: dict[str, str] = {}
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = pool.map(_job_entry, todo)
            for jid, _, err in results:
                status[jid] = "failed" if err else "done"
                if err:
                    errors[jid] = err
                log(f"{jid}: {status[jid]}")
                _write_manifest(out, plan, status, errors)
    else:
        for item in todo:
            jid, _, err = _job_entry(item)
            status[jid] = "failed" if err else "done"
            if err:
                errors[jid] = err
            log(f"{jid}: {status[jid]}" + (f" ({err})" if err else ""))
            _write_manifest(out, plan, status, errors)
    _write_manifest(out, plan, status, errors)
    merge_rows(out, plan)
    summarize(out)
    return 2 if any(s == "failed" for s in status.values()) else 0


def _metric_names(plan: ExperimentPlan, rows: list[dict]) -> list[str]:
    names = []
    for r in rows:
        for k in r:
            if k not in plan.grid and k != "seed" and k not in names:
                names.append(k)
    return names


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def merge_rows(out: Path, plan: ExperimentPlan) -> list[dict]:
    rows = []
    for jid, _, _ in plan.jobs():
        p = out / "jobs" / jid / "row.json"
        if p.exists():
            rows.append(json.loads(p.read_text()))
    keys = sorted(plan.grid)
    metrics = _metric_names(plan, rows)
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys + ["seed"] + metrics)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in keys] + [r["seed"]] + [_fmt(r.get(m, "")) for m in metrics])
    if plan.kind in ACCURACY_KINDS:
        with open(out / "accuracy.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(ACCURACY_HEADER)
            for r in rows:
                depth, p_pre = arm(r)
                w.writerow([depth, p_pre, r["seed"], _fmt(r["label_fraction"]), _fmt(r["accuracy"])])
    return rows


def _iqr(values) -> tuple[float, float, float]:
    q1, med, q3 = np.percentile(np.asarray(values, dtype=np.float64), [25, 50, 75])
    return float(med), float(q1), float(q3)


def summarize(out) -> list[tuple]:
    """Median and interquartile range per grid point and metric.

    Writes ``summary.csv`` and ``summary.txt``; groups are sorted
    lexicographically by their key string. Jobs without rows are listed as
    missing, never filled in.
    """
    out = Path(out)
    try:
        plan = ExperimentPlan.from_json((out / "plan.json").read_text())
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"{out}: no plan.json, not a plan output directory") from exc
    keys = sorted(plan.grid)
    rows, missing = [], []
    for jid, _, _ in plan.jobs():
        p = out / "jobs" / jid / "row.json"
        if p.exists():
            rows.append(json.loads(p.read_text()))
        else:
            missing.append(jid)
    metrics = _metric_names(plan, rows)
    groups: dict[str, dict] = {}
    for r in rows:
        gkey = ",".join(f"{k}={r[k]}" for k in keys)
        g = groups.setdefault(gkey, {"point": [r[k] for k in keys], "values": {}})
        for m in metrics:
            v = r.get(m)
            if isinstance(v, (int, float)):
                g["values"].setdefault(m, []).append(float(v))
    table = []
    for gkey in sorted(groups):
        g = groups[gkey]
        for m in metrics:
            vals = g["values"].get(m)
            if vals:
                med, q1, q3 = _iqr(vals)
                table.append((*g["point"], m, len(vals), med, q1, q3))
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys + ["metric", "n", "median", "q25", "q75"])
        for t in table:
            w.writerow([_fmt(x) for x in t])
    width = max([len(",".join(f"{k}={v}" for k, v in zip(keys, t[:len(keys)]))) for t in table] + [10])
    lines = [f"{plan.kind}: {len(rows)} rows, {len(missing)} missing"]
    for t in table:
        label = ",".join(f"{k}={v}" for k, v in zip(keys, t[:len(keys)]))
        m, n, med, q1, q3 = t[len(keys):]
        lines.append(f"{label:<{width}}  {m:<22} n={n:<3} median={med:.4f}  iqr=[{q1:.4f}, {q3:.4f}]")
    for jid in missing:
        lines.append(f"missing: {jid}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    return table
