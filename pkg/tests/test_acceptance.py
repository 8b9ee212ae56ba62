"""Acceptance criteria 1-9. Each test prints one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` or directly as a script.
Set ``SNNREG_THREADS`` to spread the sweep and race runs over processes.
"""
import json
import math
import subprocess
import sys
import textwrap
import time
from dataclasses import replace
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from snnreg.analysis import OuParams, estimate_gate, rate_slope
from snnreg.controller import (
    ControllerConfig,
    centered_log_rates,
    homeostat_tick,
    laplacian_apply,
    laplacian_matrix,
    map_scales,
)
from snnreg.core import Surrogate
from snnreg.harness.config import TrainConfig, reference_config
from snnreg.harness.experiments import ARMS, interior_maximum, run_race, run_sweep
from snnreg.harness.logio import read_log, strip_wall
from snnreg.harness.metrics import auroc, fpr_at_tpr, predictive_entropy
from snnreg.harness.runner import Trainer
from snnreg.training import Network, NetworkSpec, grad_check, softmax


LINES = {}


def report(n, name, ok, detail):
    """Record one verdict line; the conftest prints them all after the run."""
    line = f"ACCEPTANCE {n} {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    LINES[n] = line
    print(line, flush=True)
    return ok


# 1 -------------------------------------------------------------------------------


def test_1_gradient_fidelity():
    t0 = time.perf_counter()
    spec = NetworkSpec(layer_sizes=(6, 8, 4), timesteps=5, surrogate=Surrogate("atan", 2.0), init_gain=1.5)
    net = Network.init(spec, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    x = (rng.uniform(size=(3, 6, 5)) < 0.5).astype(np.float64)
    step = grad_check(net, x, np.array([0, 1, 3]), np.ones(spec.n_units), tolerance=1e-4)
    elapsed = time.perf_counter() - t0

    rspec = NetworkSpec(layer_sizes=(6, 8, 8, 4), mode="rate", blocks=2, surrogate=Surrogate("sigmoid", 2.0))
    rnet = Network.init(rspec, np.random.default_rng(2))
    rate = grad_check(rnet, rng.uniform(size=(3, 6)), np.array([0, 1, 3]), np.ones(2),
                      tolerance=1e-6, h=1e-3, order=4)
    ok = step.max_rel_err < 1e-4 and elapsed < 10 and rate.max_rel_err < 1e-6
    report(1, "gradient fidelity", ok,
           f"step max rel err {step.max_rel_err:.2e} over {step.n_checked} entries in {elapsed:.2f}s, "
           f"rate max rel err {rate.max_rel_err:.2e}")
    assert ok


# 2 -------------------------------------------------------------------------------


def test_2_gate_identity():
    t0 = time.perf_counter()
    p = OuParams(mu=0.0, tau=2.0, sigma=1.0)
    thetas = np.arange(-3.0, 4.0)
    gates = estimate_gate(p, Surrogate("sigmoid", 50.0), 10**6, seed=0, theta=thetas)
    slopes = rate_slope(p, thetas)
    # the closed-form slope carries no sampling error, so the combined error is the gate's
    excess = [abs(g.gate - s) - max(3 * g.stderr, 1e-3) for g, s in zip(gates, slopes)]
    g0 = gates[3].gate
    elapsed = time.perf_counter() - t0
    ok = max(excess) <= 0 and abs(g0 - 0.398942) < 1e-3 and elapsed < 30
    worst = max(abs(g.gate - s) for g, s in zip(gates, slopes))
    report(2, "gate identity", ok, f"max |G - (-dr/dtheta)| {worst:.2e}, G(0) {g0:.6f}, {elapsed:.2f}s")
    assert ok


# 3 -------------------------------------------------------------------------------


def test_3_controller_algebra():
    rng = np.random.default_rng(3)
    # (a) bounded scales under extreme states
    bound_ok = True
    for _ in range(100):
        cfg = ControllerConfig(alpha=rng.uniform(0.01, 0.99), s_base=rng.uniform(0.1, 3), kappa=rng.uniform(0.1, 10))
        c = rng.choice([-1, 1], 1000) * 10.0 ** rng.uniform(-3, 308, 1000)
        c[:4] = [np.inf, -np.inf, 0.0, -0.0]
        s = map_scales(cfg, c)
        lo, hi = cfg.s_base * (1 - cfg.alpha), cfg.s_base * (1 + cfg.alpha)
        bound_ok &= bool(np.all((s >= lo) & (s <= hi)))

    # (b) Laplacian structure
    lap_ok = True
    for _ in range(1000):
        n = int(rng.integers(1, 17))
        c = rng.normal(size=n) * 10.0 ** rng.uniform(-3, 3)
        m = laplacian_matrix(n)
        lap_ok &= bool(np.all(m.sum(axis=1) == 0)) and bool(np.all(laplacian_apply(np.full(n, 2.5)) == 0))
        lap_ok &= float(c @ laplacian_apply(c)) >= 0

    # (c) frozen-rate convergence to the analytic fixed point
    cfg = ControllerConfig(gamma=0.02, diffusion=0.05)
    worst_res, worst_fp, worst_ticks = 0.0, 0.0, 0
    for _ in range(100):
        n = int(rng.integers(2, 17))
        r = rng.uniform(1e-3, 1.0, n)
        c = rng.normal(size=n) * 5
        for k in range(1, 5001):
            nxt = homeostat_tick(cfg, c, r)
            res = float(np.max(np.abs(nxt - c)))
            c = nxt
            if res < 1e-10:
                break
        worst_res, worst_ticks = max(worst_res, res), max(worst_ticks, k)
        # fixed point: (gamma I + D L) c = beta * centred log r + gamma * c0
        a = cfg.gamma * np.eye(n) + cfg.diffusion * laplacian_matrix(n)
        star = np.linalg.solve(a, cfg.beta * centered_log_rates(r, cfg.rate_floor) + cfg.gamma * cfg.c0)
        worst_fp = max(worst_fp, float(np.max(np.abs(c - star))))
    conv_ok = worst_res < 1e-10 and worst_fp < 1e-8

    # (d) invariance of the reaction term to a common rate factor
    worst_inv = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 17))
        r = 10.0 ** rng.uniform(-3, -1, n)
        d = cfg.beta * (centered_log_rates(7.3 * r, cfg.rate_floor) - centered_log_rates(r, cfg.rate_floor))
        worst_inv = max(worst_inv, float(np.max(np.abs(d))))
    inv_ok = worst_inv < 1e-12

    ok = bound_ok and lap_ok and conv_ok and inv_ok
    report(3, "controller algebra", ok,
           f"(a) {'ok' if bound_ok else 'bad'} on 1e5 states; (b) {'ok' if lap_ok else 'bad'}; "
           f"(c) residual {worst_res:.1e} within {worst_ticks} ticks, fixed-point err {worst_fp:.1e}; "
           f"(d) {worst_inv:.1e}")
    assert ok


# 4 -------------------------------------------------------------------------------


def _spread(rates):
    lr = np.log(np.maximum(rates, 1e-4))
    return float(lr.max() - lr.min())


def _homeostasis_run(seed, controller):
    cfg = reference_config(init_layer_gains=(4.0, 1.0, 0.25, 1.0), train=TrainConfig(epochs=14, seed=seed))
    cfg = cfg.replace(dataset=replace(cfg.dataset, seed=seed))
    if not controller:
        cfg = cfg.replace(controller=None)
    seen = {}
    ema = [None]

    def on_step(tr):
        if tr.controller is not None:
            rates = tr.controller.state.ema_rates
        else:
            # baseline has no controller; track the same EMA of its layer rates
            cur = np.array(tr.result.records[-1].per_layer_rates)
            ema[0] = cur if ema[0] is None else 0.9 * ema[0] + 0.1 * cur
            rates = ema[0]
        if tr.step in (10, 200):
            seen[tr.step] = _spread(rates)

    tr = Trainer(cfg)
    assert tr.steps_per_epoch * cfg.train.epochs >= 200
    tr.run(on_step=on_step)
    return seen[200] / seen[10]


def test_4_closed_loop_homeostasis():
    t0 = time.perf_counter()
    ratios = [_homeostasis_run(s, True) for s in range(5)]
    base = [_homeostasis_run(s, False) for s in range(5)]
    elapsed = time.perf_counter() - t0
    ok = max(ratios) <= 0.5 and elapsed < 300
    report(4, "closed-loop homeostasis", ok,
           f"spread ratio step200/step10 AHSAR {', '.join(f'{r:.2f}' for r in ratios)}; "
           f"baseline (not asserted) {', '.join(f'{r:.2f}' for r in base)}; {elapsed:.0f}s")
    assert ok


# 5 -------------------------------------------------------------------------------


def test_5_threshold_sweep(tmp_path):
    t0 = time.perf_counter()
    cfg = reference_config(controller=None)
    cfg = cfg.replace(experiment=replace(cfg.experiment, seeds=(0, 1, 2)))
    rows = run_sweep(cfg, tmp_path)
    ok_max, best = interior_maximum(rows)
    elapsed = time.perf_counter() - t0
    grid_ok = [r["s"] for r in rows] == [round(0.10 + 0.05 * k, 2) for k in range(39)]
    ok = ok_max and grid_ok and elapsed < 1800
    report(5, "threshold sweep", ok,
           f"acc s=0.10 {rows[0]['final_acc']:.3f}, best s={best['s']:.2f} {best['final_acc']:.3f}, "
           f"s=2.00 {rows[-1]['final_acc']:.3f}; {len(rows)} points x 3 seeds in {elapsed:.0f}s")
    assert ok


# 6 -------------------------------------------------------------------------------


def test_6_convergence_race(tmp_path):
    t0 = time.perf_counter()
    cfg = reference_config()
    cfg = cfg.replace(experiment=replace(cfg.experiment, seeds=(0, 1, 2, 3, 4)))
    summary = run_race(cfg, tmp_path, arms=ARMS)
    elapsed = time.perf_counter() - t0
    full, base = summary["full"], summary["baseline"]
    ok = full["epochs_to_target"] <= base["epochs_to_target"] and full["delta_acc"] >= 0
    order = {v: summary["full"]["final_acc"] >= summary[v]["final_acc"] for v in ("no_rt", "no_dh")}
    report(6, "convergence race", ok,
           f"median epochs-to-target full {full['epochs_to_target']:g} vs baseline {base['epochs_to_target']:g}, "
           f"median delta acc {full['delta_acc']:+.3f}; ablation ordering (reported only) "
           f"full>=no_rt {order['no_rt']}, full>=no_dh {order['no_dh']}; {elapsed:.0f}s")
    assert ok


# 7 -------------------------------------------------------------------------------


def _auroc_oracle(a, b):
    wins = sum(2 if o > i else 1 if o == i else 0 for i in a for o in b)
    return float(Fraction(wins, 2 * len(a) * len(b)))


def _fpr_oracle(a, b, tpr=0.95):
    best = None
    for t in sorted(set(a) | set(b)):
        if sum(o >= t for o in b) / len(b) >= tpr:
            best = t
    return sum(i >= best for i in a) / len(a)


def test_7_ood_metrics():
    rng = np.random.default_rng(7)
    mismatches = 0
    ties = 0
    for k in range(50):
        n, m = rng.integers(1, 21, 2)
        if k % 2:
            a, b = rng.integers(0, 5, n).astype(float), rng.integers(0, 5, m).astype(float)
        else:
            a, b = rng.normal(size=n), rng.normal(0.5, 1, size=m)
        ties += len(set(a) & set(b)) > 0
        mismatches += auroc(a, b) != _auroc_oracle(a, b)
        mismatches += fpr_at_tpr(a, b) != _fpr_oracle(a, b)
    worst_h = max(abs(float(predictive_entropy(softmax(np.full(c, 3.7)))) - math.log(c)) for c in range(2, 101))
    ok = mismatches == 0 and ties > 0 and worst_h < 1e-12
    report(7, "OOD metrics", ok, f"{mismatches} mismatches on 50 sets ({ties} with ties), "
           f"uniform entropy err {worst_h:.1e}")
    assert ok


# 8 -------------------------------------------------------------------------------


_ABSENT = textwrap.dedent("""
    import json, sys
    sys.modules["snnreg.controller"] = None
    from snnreg.harness.config import config_from_dict
    from snnreg.harness.runner import Trainer
    cfg = config_from_dict(json.load(open(sys.argv[1])))
    Trainer(cfg).run(log_path=sys.argv[2])
    assert "snnreg.controller" in sys.modules and sys.modules["snnreg.controller"] is None
""")


def test_8_plug_in_contract(tmp_path):
    cfg = reference_config(train=TrainConfig(epochs=3))
    base_cfg = cfg.replace(controller=None)

    # controller disabled == controller module absent
    (tmp_path / "cfg.json").write_text(json.dumps(base_cfg.to_dict()))
    r = subprocess.run([sys.executable, "-c", _ABSENT, str(tmp_path / "cfg.json"), str(tmp_path / "absent.jsonl")],
                       capture_output=True, text=True)
    Trainer(base_cfg).run(log_path=tmp_path / "present.jsonl")
    absent_ok = r.returncode == 0 and strip_wall((tmp_path / "absent.jsonl").read_text().splitlines()) == \
        strip_wall((tmp_path / "present.jsonl").read_text().splitlines())

    # no trainable parameters added; identical first step at identical scales
    on, off = Trainer(cfg), Trainer(base_cfg)
    count_ok = on.net.num_parameters() == off.net.num_parameters() and len(on.net.params) == len(off.net.params)
    same_scales = np.array_equal(on.train_scales(), off.train_scales())
    on.cfg = replace(on.cfg, train=replace(on.cfg.train, epochs=1))
    steps = {}
    for name, tr in (("on", on), ("off", off)):
        tr.run(stop_after=1, on_step=lambda t, name=name: steps.setdefault(name, [p.copy() for p in t.net.params]))
    grads_ok = same_scales and all(np.array_equal(a, b) for a, b in zip(steps["on"], steps["off"]))

    # step-time overhead of the controller hooks
    tr = Trainer(cfg)
    res = tr.run()
    overhead = res.controller_seconds / res.step_seconds
    ok = absent_ok and count_ok and grads_ok and overhead < 0.01
    report(8, "plug-in contract", ok,
           f"absent-module log identical {absent_ok}, parameter counts equal {count_ok}, "
           f"first step identical {grads_ok}, hook overhead {100 * overhead:.2f}% "
           f"({1e3 * res.step_seconds / res.steps:.1f} ms/step, batch {cfg.train.batch_size})")
    assert ok, r.stderr


# 9 -------------------------------------------------------------------------------


def test_9_determinism_and_persistence(tmp_path):
    cfg = reference_config(train=TrainConfig(epochs=6))
    for name in ("a", "b"):
        Trainer(cfg).run(log_path=tmp_path / f"{name}.jsonl")
    la, lb = ((tmp_path / f"{n}.jsonl").read_text().splitlines() for n in "ab")
    same = strip_wall(la) == strip_wall(lb)

    part = Trainer(cfg)
    part.run(log_path=tmp_path / "resumed.jsonl", checkpoint_dir=tmp_path, checkpoint_epochs=(3,), stop_after=3)
    resumed = Trainer.load(tmp_path / "epoch003.ckpt")
    resumed.run(log_path=tmp_path / "resumed.jsonl")
    lr = (tmp_path / "resumed.jsonl").read_text().splitlines()
    resume_ok = strip_wall(lr) == strip_wall(la)
    tail = [r for r in read_log(tmp_path / "resumed.jsonl") if r.epoch >= 4]
    full = Trainer(cfg)
    full.run()
    params_ok = all(np.array_equal(a, b) for a, b in zip(full.net.params, resumed.net.params))
    ok = same and resume_ok and params_ok and len(tail) > 0
    report(9, "determinism and persistence", ok,
           f"same-seed logs identical {same} ({len(la)} records), resume from epoch 3 of 6 identical "
           f"{resume_ok} ({len(tail)} records after resume), final parameters identical {params_ok}")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([str(Path(__file__)), "-v", "-s", "-p", "no:cacheprovider"]))
