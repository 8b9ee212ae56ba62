"""The training loop: minibatches, optimiser, controller hooks, logging, checkpoints.

The controller module is imported only when the run configures one, so a
baseline run does not depend on it at all.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..training import Network, OptimizerState, cross_entropy, optimizer_step, scheduled_lr
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, config_from_dict
from .data import Dataset, Split, as_rate_input, as_step_input, generate_dataset
from .logio import TrainRecord, append_record

EVAL_CHUNK = 256


def _seq(seed, *extra):
    return np.random.SeedSequence([int(seed), *extra])


def build_network(cfg: RunConfig) -> Network:
    net = Network.init(cfg.network, np.random.default_rng(_seq(cfg.train.seed, 0)))
    if cfg.init_layer_gains is not None:
        for w, g in zip(net.weights, cfg.init_layer_gains):
            w *= g
    return net


def build_controller(cfg: RunConfig):
    if cfg.controller is None:
        return None
    from ..controller import HomeostaticController

    return HomeostaticController(cfg.controller, cfg.network.n_units, cfg.network.ticks)


@dataclass
class EvalResult:
    loss: float
    accuracy: float
    logits: np.ndarray
    rates: list


def evaluate(net: Network, split: Split, scales, seed: int, tag: int) -> EvalResult:
    """Loss/accuracy on a split; spike encoding uses its own fixed stream per split."""
    rng = np.random.default_rng(_seq(seed, 2, tag))
    spec = net.spec
    logits, rate_sum = [], np.zeros(spec.n_lif)
    for i in range(0, len(split), EVAL_CHUNK):
        xb = split.x[i:i + EVAL_CHUNK]
        if spec.mode == "step":
            fwd = net.forward_step(as_step_input(xb, spec.timesteps, rng), scales)
            rate_sum += np.array([z.sum() / (z.shape[0] * z.shape[2]) for z in fwd.zs])
        else:
            fwd = net.forward_rate(as_rate_input(xb), scales)
            rate_sum += np.array([a.mean(axis=1).sum() for a in fwd.activations[1:]])
        logits.append(fwd.logits)
    logits = np.concatenate(logits)
    loss, _ = cross_entropy(logits, split.y)
    acc = float(np.mean(logits.argmax(axis=1) == split.y))
    return EvalResult(loss, acc, logits, (rate_sum / len(split)).tolist())


@dataclass
class RunResult:
    val_acc: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    test_acc: float | None = None
    records: list = field(default_factory=list)
    step_seconds: float = 0.0
    controller_seconds: float = 0.0
    steps: int = 0


class Trainer:
    """One training run. ``fixed_scale`` pins every threshold scale (sweeps)."""

    def __init__(self, cfg: RunConfig, data: Dataset | None = None, fixed_scale: float | None = None):
        if fixed_scale is not None and cfg.controller is not None:
            raise ValueError("a fixed threshold scale excludes the controller")
        self.cfg = cfg
        self.data = data if data is not None else generate_dataset(cfg.dataset)
        self.fixed_scale = fixed_scale
        self.net = build_network(cfg)
        self.opt_state = OptimizerState()
        self.controller = build_controller(cfg)
        self.rng = np.random.default_rng(_seq(cfg.train.seed, 1))
        self.epoch = 0
        self.step = 0
        self.result = RunResult()

    # -- scales --------------------------------------------------------------

    def train_scales(self) -> np.ndarray:
        if self.controller is not None:
            return self.controller.effective_scales
        s = 1.0 if self.fixed_scale is None else self.fixed_scale
        return np.full(self.cfg.network.n_units, s)

    def eval_scales(self) -> np.ndarray:
        if self.controller is not None:
            return self.controller.eval_scales
        return self.train_scales()

    @property
    def steps_per_epoch(self) -> int:
        n, b = len(self.data.train), self.cfg.train.batch_size
        return -(-n // b)

    # -- loop ------------------------------------------------------------------

    def run(self, log_path=None, checkpoint_dir=None, checkpoint_epochs=(), stop_after: int | None = None,
            on_step=None) -> RunResult:
        """Train up to ``stop_after`` (default: all) epochs.

        ``on_step(trainer)`` is called after every optimisation step, once the
        controller has committed it.
        """
        cfg = self.cfg
        last = cfg.train.epochs if stop_after is None else min(stop_after, cfg.train.epochs)
        while self.epoch < last:
            self._train_epoch(log_path, on_step)
            if checkpoint_dir is not None and self.epoch in checkpoint_epochs:
                Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
                self.save(Path(checkpoint_dir) / f"epoch{self.epoch:03d}.ckpt")
        return self.result

    def _train_epoch(self, log_path, on_step=None):
        cfg, spec, net = self.cfg, self.cfg.network, self.net
        tc = cfg.train
        total = tc.epochs * self.steps_per_epoch
        self.epoch += 1
        ctrl = self.controller
        order = self.rng.permutation(len(self.data.train))
        for i in range(0, len(order), tc.batch_size):
            t0 = time.perf_counter()
            idx = order[i:i + tc.batch_size]
            xb, yb = self.data.train.x[idx], self.data.train.y[idx]
            scales = self.train_scales()
            if spec.mode == "step":
                fwd = net.forward_step(as_step_input(xb, spec.timesteps, self.rng), scales)
                loss, grads = net.backward_step(fwd, yb)
            else:
                fwd = net.forward_rate(as_rate_input(xb), scales)
                loss, grads = net.backward_rate(fwd, yb)
            lr = scheduled_lr(tc.optimizer.lr, tc.lr_schedule, self.step, total)
            optimizer_step(tc.optimizer, self.opt_state, net.params, grads, lr, tc.weight_decay)
            t1 = time.perf_counter()
            if ctrl is not None:
                ticks = fwd.tick_rates() if spec.mode == "step" else fwd.tick_rates(spec.partition)
                ctrl.on_ticks(ticks)
                ctrl.on_optim_step()
            t2 = time.perf_counter()
            self.result.step_seconds += t1 - t0
            self.result.controller_seconds += t2 - t1
            self.result.steps += 1
            self.step += 1
            if spec.mode == "step":
                rates = fwd.layer_rates().tolist()
            else:
                rates = [float(a.mean()) for a in fwd.activations[1:]]
            acc = float(np.mean(fwd.logits.argmax(axis=1) == yb))
            self._log(log_path, TrainRecord(
                self.epoch, self.step, "train", loss, acc, rates,
                spec.layer_scales(scales).tolist(), self._gain(), wall_ms=(t2 - t0) * 1e3,
            ))
            if on_step is not None:
                on_step(self)
        t0 = time.perf_counter()
        ev = evaluate(net, self.data.val, self.eval_scales(), tc.seed, 0)
        flags, energy, progress = [], None, None
        if ctrl is not None:
            flags = ctrl.on_epoch_end(ev.loss)
            energy = ctrl.last_energy
            progress = ctrl.gain.last_progress
        self.result.val_acc.append(ev.accuracy)
        self.result.val_loss.append(ev.loss)
        self._log(log_path, TrainRecord(
            self.epoch, self.step, "val", ev.loss, ev.accuracy, ev.rates,
            self.cfg.network.layer_scales(self.eval_scales()).tolist(), self._gain(),
            energy, progress, (time.perf_counter() - t0) * 1e3, flags,
        ))
        if self.epoch == tc.epochs:
            te = evaluate(net, self.data.id_test, self.eval_scales(), tc.seed, 1)
            self.result.test_acc = te.accuracy
            self._log(log_path, TrainRecord(
                self.epoch, self.step, "test", te.loss, te.accuracy, te.rates,
                self.cfg.network.layer_scales(self.eval_scales()).tolist(), self._gain(),
            ))

    def _gain(self) -> float:
        return 1.0 if self.controller is None else float(self.controller.gain.gain)

    def _log(self, log_path, rec: TrainRecord):
        self.result.records.append(rec)
        if log_path is not None:
            append_record(log_path, rec)

    # -- persistence -------------------------------------------------------------

    def save(self, path) -> None:
        arrays = {f"param{i}": p for i, p in enumerate(self.net.params)}
        slots = {}
        for name, arrs in self.opt_state.slots.items():
            slots[name] = len(arrs)
            for i, a in enumerate(arrs):
                arrays[f"opt.{name}.{i}"] = a
        header = {
            "config": self.cfg.to_dict(),
            "fixed_scale": self.fixed_scale,
            "epoch": self.epoch,
            "step": self.step,
            "opt_step": self.opt_state.step,
            "opt_slots": slots,
            "controller": None if self.controller is None else self.controller.to_dict(),
            "rng": self.rng.bit_generator.state,
            "history": {"val_acc": self.result.val_acc, "val_loss": self.result.val_loss},
        }
        save_checkpoint(path, header, arrays)

    @classmethod
    def load(cls, path, data: Dataset | None = None) -> "Trainer":
        meta, arrays = load_checkpoint(path)
        try:
            cfg = config_from_dict(meta["config"])
            tr = cls(cfg, data, meta["fixed_scale"])
            n = len(tr.net.params)
            for i, p in enumerate(tr.net.params):
                p[...] = arrays[f"param{i}"]
            tr.opt_state = OptimizerState(meta["opt_step"], {
                name: [arrays[f"opt.{name}.{i}"] for i in range(k)]
                for name, k in meta["opt_slots"].items()
            })
            if (meta["controller"] is None) != (tr.controller is None):
                raise CheckpointError("controller section does not match the config")
            if meta["controller"] is not None:
                from ..controller import HomeostaticController

                tr.controller = HomeostaticController.from_dict(meta["controller"])
            tr.rng.bit_generator.state = meta["rng"]
            tr.epoch, tr.step = meta["epoch"], meta["step"]
            tr.result.val_acc = list(meta["history"]["val_acc"])
            tr.result.val_loss = list(meta["history"]["val_loss"])
            assert n == sum(1 for k in arrays if k.startswith("param"))
        except (KeyError, ValueError, AssertionError) as exc:
            raise CheckpointError(f"{path}: inconsistent checkpoint: {exc}") from exc
        return tr


def epochs_to_target(curve, target: float) -> int:
    """First 1-based epoch whose accuracy reaches ``target``; ``len(curve) + 1`` if never."""
    for i, a in enumerate(curve, 1):
        if a >= target:
            return i
    return len(curve) + 1
