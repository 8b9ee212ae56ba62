"""Experiment drivers: threshold sweep, baseline-vs-AHSAR race, ablations, OOD, gate analysis.

Every driver expands ``experiment.seeds`` into replicates. Replicate ``k`` uses
``k`` both as the training seed and as the dataset seed, so arms and sweep
points that share a replicate see the same data and the same initial weights.
Independent runs go through ``parallel_map``, which honours ``SNNREG_THREADS``.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..analysis import gate_table
from .config import RunConfig, reference_config
from .data import generate_dataset
from .logio import TrainRecord, append_record, write_csv
from .metrics import ood_eval
from .runner import Trainer, epochs_to_target, evaluate

ARMS = ("baseline", "full", "no_rt", "no_dh")


def max_workers() -> int:
    raw = os.environ.get("SNNREG_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"SNNREG_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def parallel_map(fn, jobs: list) -> list:
    """``[fn(j) for j in jobs]``, spread over at most ``SNNREG_THREADS`` processes.

    Results come back in job order and each job is self-seeded, so the output
    does not depend on the worker count.
    """
    n = min(max_workers(), len(jobs))
    if n <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, jobs))


def replicate(cfg: RunConfig, seed: int) -> RunConfig:
    return cfg.replace(train=replace(cfg.train, seed=seed), dataset=replace(cfg.dataset, seed=seed))


def val_curve_auc(curve) -> float:
    """Area under the validation-accuracy curve, normalised by the number of epochs."""
    return float(np.mean(curve)) if len(curve) else float("nan")


@dataclass
class RunSummary:
    val_acc: list
    final_acc: float
    final_loss: float
    records: list


def _run(job) -> RunSummary:
    cfg, fixed_scale, log_path = job
    tr = Trainer(cfg, fixed_scale=fixed_scale)
    res = tr.run(log_path=log_path)
    test = next(r for r in reversed(res.records) if r.split == "test")
    return RunSummary(res.val_acc, test.accuracy, test.loss, res.records)


# -- threshold sweep -------------------------------------------------------------


def run_sweep(cfg: RunConfig, out_dir) -> list[dict]:
    """One baseline training run per (s, seed) with every threshold pinned to ``s``.

    Writes ``sweep.csv`` (seed-averaged, one row per grid point),
    ``sweep_seeds.csv`` (one row per run) and ``sweep.jsonl`` (split "sweep"
    records, input to ``plot-data --figure sweep``). Returns the averaged rows.
    """
    if cfg.controller is not None:
        raise ValueError("the sweep pins the thresholds; remove the controller section")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid, seeds = cfg.experiment.sweep_grid(), cfg.experiment.seeds
    jobs = [(replicate(cfg, sd), s, None) for s in grid for sd in seeds]
    runs = parallel_map(_run, jobs)
    by_seed = {sd: [runs[i * len(seeds) + j] for i in range(len(grid))] for j, sd in enumerate(seeds)}
    targets = {sd: 0.9 * max(max(r.val_acc) for r in rs) for sd, rs in by_seed.items()}

    per_run, rows = [], []
    log = out / "sweep.jsonl"
    log.unlink(missing_ok=True)
    n_units = cfg.network.n_lif
    for i, s in enumerate(grid):
        pts = []
        for j, sd in enumerate(seeds):
            r = runs[i * len(seeds) + j]
            ett = epochs_to_target(r.val_acc, targets[sd])
            pts.append((r.final_acc, ett, val_curve_auc(r.val_acc), r.final_loss))
            per_run.append([s, sd, r.final_acc, ett, pts[-1][2]])
        acc, ett, auc, loss = (float(np.mean(c)) for c in zip(*pts))
        rows.append({"s": s, "final_acc": acc, "epochs_to_target": ett, "auc_of_val_curve": auc})
        append_record(log, TrainRecord(cfg.train.epochs, i, "sweep", loss, acc, [], [s] * n_units))
    write_csv(out / "sweep.csv", list(rows[0]), [list(r.values()) for r in rows])
    write_csv(out / "sweep_seeds.csv", ["s", "seed", "final_acc", "epochs_to_target", "auc_of_val_curve"], per_run)
    return rows


def interior_maximum(rows: list[dict]) -> tuple[bool, dict]:
    """Whether the best interior grid point beats both endpoints strictly."""
    best = max(rows[1:-1], key=lambda r: r["final_acc"])
    ok = best["final_acc"] > rows[0]["final_acc"] and best["final_acc"] > rows[-1]["final_acc"]
    return ok, best


# -- races and ablations --------------------------------------------------------------


def arm_config(cfg: RunConfig, arm: str) -> RunConfig:
    if arm not in ARMS:
        raise ValueError(f"unknown arm {arm!r}; choose from {ARMS}")
    if arm == "baseline":
        return cfg.replace(controller=None)
    base = cfg.controller if cfg.controller is not None else reference_config().controller
    ctrl = replace(base, ablate_rt=(arm == "no_rt"), ablate_dh=(arm == "no_dh"))
    return cfg.replace(controller=ctrl)


def _median(xs):
    return float(np.median(xs))


def run_race(cfg: RunConfig, out_dir, arms=ARMS) -> dict:
    """Train every arm on every seed from identical data and initial weights.

    The target accuracy of a seed is 90% of the best validation accuracy any
    arm reaches within the shared budget. Writes ``<arm>_seed<k>.jsonl`` logs
    and ``race_summary.csv`` (per seed and arm, plus median rows) and returns
    the medians keyed by arm.
    """
    arms = tuple(dict.fromkeys(("baseline",) + tuple(arms)))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = cfg.experiment.seeds
    jobs = []
    for sd in seeds:
        for arm in arms:
            log = out / f"{arm}_seed{sd}.jsonl"
            log.unlink(missing_ok=True)
            jobs.append((replicate(arm_config(cfg, arm), sd), None, str(log)))
    runs = parallel_map(_run, jobs)

    table, per_arm = [], {a: {"final_acc": [], "epochs_to_target": []} for a in arms}
    for j, sd in enumerate(seeds):
        res = dict(zip(arms, runs[j * len(arms):(j + 1) * len(arms)]))
        target = 0.9 * max(max(r.val_acc) for r in res.values())
        base_ett = epochs_to_target(res["baseline"].val_acc, target)
        for arm, r in res.items():
            ett = epochs_to_target(r.val_acc, target)
            per_arm[arm]["final_acc"].append(r.final_acc)
            per_arm[arm]["epochs_to_target"].append(ett)
            table.append([sd, arm, r.final_acc, ett, r.final_acc - res["baseline"].final_acc, base_ett - ett])
    summary = {}
    for arm, d in per_arm.items():
        delta_acc = [a - b for a, b in zip(d["final_acc"], per_arm["baseline"]["final_acc"])]
        delta_ett = [b - a for a, b in zip(d["epochs_to_target"], per_arm["baseline"]["epochs_to_target"])]
        summary[arm] = {
            "final_acc": _median(d["final_acc"]),
            "epochs_to_target": _median(d["epochs_to_target"]),
            "delta_acc": _median(delta_acc),
            "delta_epochs": _median(delta_ett),
        }
        table.append(["median", arm, summary[arm]["final_acc"], summary[arm]["epochs_to_target"],
                      summary[arm]["delta_acc"], summary[arm]["delta_epochs"]])
    # delta_epochs > 0 means the arm reached the target sooner than the baseline
    write_csv(out / "race_summary.csv",
              ["seed", "arm", "final_acc", "epochs_to_target", "delta_acc", "delta_epochs"], table)
    return summary


def run_ablation(cfg: RunConfig, out_dir, variant: str | None = None) -> dict:
    """Race the baseline, full AHSAR and one ablated variant."""
    variant = variant or cfg.experiment.variant
    return run_race(cfg, out_dir, arms=("baseline", "full", variant))


# -- OOD -------------------------------------------------------------------------------


def run_ood(cfg: RunConfig, model_path, out_dir) -> dict:
    """Score ID test and OOD sets of ``cfg.dataset`` with a trained checkpoint.

    The network, weights and evaluation scales come from the checkpoint; only
    the dataset section of ``cfg`` is used. Writes ``ood.json`` and
    ``entropy_histograms.csv``.
    """
    data = generate_dataset(cfg.dataset)
    tr = Trainer.load(model_path, data)
    scales = tr.eval_scales()
    id_ev = evaluate(tr.net, data.id_test, scales, tr.cfg.train.seed, 1)
    ood_ev = evaluate(tr.net, data.ood_test, scales, tr.cfg.train.seed, 3)
    res = ood_eval(id_ev.logits, ood_ev.logits)
    res["id_accuracy"] = id_ev.accuracy
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ood.json").write_text(json.dumps(res, indent=2))
    (c_id, edges), (c_ood, _) = res["entropy_histograms"]["id"], res["entropy_histograms"]["ood"]
    write_csv(out / "entropy_histograms.csv", ["bin_lo", "bin_hi", "id_count", "ood_count"],
              [[edges[i], edges[i + 1], c_id[i], c_ood[i]] for i in range(len(c_id))])
    return res


# -- gate analysis ---------------------------------------------------------------------


def run_analyze(cfg: RunConfig, out_dir) -> list[tuple]:
    """Gate identity table over ``experiment.theta_grid``; writes ``gate_identity.csv``."""
    ex = cfg.experiment
    seed = ex.seeds[0] if ex.seeds else 0
    rows = gate_table(ex.ou, ex.gate_surrogate, ex.theta_grid, ex.n_samples, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "gate_identity.csv", ["theta", "rate", "neg_rate_slope", "gate", "gate_stderr"], rows)
    return rows
