"""Step-mode BPTT and rate-mode training engines for dense spiking networks.

A network with ``layer_sizes = [n0, n1, ..., nk]`` has ``k`` weight layers.
Layers ``0..k-2`` are LIF populations (the *controlled* layers) and the last
one is a non-spiking readout whose input current is averaged over time.

Threshold scales are supplied per controlled *unit*: one unit per LIF layer
in step mode, one unit per depth block in rate mode. Scales are constants as
far as the gradient is concerned.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .core import DimensionError, DomainError, Surrogate

Mode = Literal["step", "rate"]


@dataclass(frozen=True)
class NetworkSpec:
    layer_sizes: tuple = (64, 48, 48, 48, 4)
    surrogate: Surrogate = field(default_factory=Surrogate)
    timesteps: int = 6
    blocks: int = 1
    mode: Mode = "step"
    theta_base: float = 1.0
    leak: float = 0.5
    reset_mode: str = "subtract"
    init_gain: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(n) for n in self.layer_sizes))
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ValueError("need at least 2 positive layer sizes")
        if self.timesteps < 1 or self.blocks < 1:
            raise ValueError("timesteps and blocks must be >= 1")
        if self.mode not in ("step", "rate"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "rate" and self.n_lif and self.blocks > self.n_lif:
            raise ValueError("more blocks than LIF layers")
        if not self.theta_base > 0:
            raise DomainError("theta_base must be positive")
        if not 0 < self.leak <= 1:
            raise DomainError("leak must lie in (0, 1]")
        if self.reset_mode not in ("subtract", "zero"):
            raise ValueError(f"unknown reset mode {self.reset_mode!r}")

    @property
    def n_lif(self) -> int:
        return len(self.layer_sizes) - 2

    @property
    def partition(self) -> list[list[int]]:
        """Contiguous depth blocks over the LIF layers (rate mode)."""
        if self.mode == "step":
            return [[i] for i in range(self.n_lif)]
        return [list(map(int, b)) for b in np.array_split(np.arange(self.n_lif), self.blocks)]

    @property
    def n_units(self) -> int:
        return len(self.partition)

    @property
    def ticks(self) -> int:
        """Controller ticks per optimisation step: T in step mode, K in rate mode."""
        return self.timesteps if self.mode == "step" else self.n_units

    def layer_scales(self, unit_scales) -> np.ndarray:
        unit_scales = np.asarray(unit_scales, dtype=np.float64).reshape(-1)
        if unit_scales.shape != (self.n_units,):
            raise DimensionError(
                f"expected {self.n_units} unit scales, got {unit_scales.shape[0]}"
            )
        if not np.all(unit_scales > 0):
            raise DomainError("threshold scales must be positive")
        out = np.empty(self.n_lif)
        for u, block in enumerate(self.partition):
            out[block] = unit_scales[u]
        return out

    def to_dict(self):
        return {
            "layer_sizes": list(self.layer_sizes),
            "surrogate": self.surrogate.to_dict(),
            "timesteps": self.timesteps,
            "blocks": self.blocks,
            "mode": self.mode,
            "theta_base": self.theta_base,
            "leak": self.leak,
            "reset_mode": self.reset_mode,
            "init_gain": self.init_gain,
        }


class Network:
    """Parameters of a dense SNN plus its forward/backward passes."""

    def __init__(self, spec: NetworkSpec, weights, biases):
        self.spec = spec
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        sizes = spec.layer_sizes
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[i + 1], sizes[i]) or b.shape != (sizes[i + 1],):
                raise DimensionError(f"layer {i}: got W{w.shape}, b{b.shape}")

    @classmethod
    def init(cls, spec: NetworkSpec, rng: np.random.Generator) -> "Network":
        weights, biases = [], []
        for n_in, n_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
            weights.append(rng.normal(0.0, spec.init_gain / math.sqrt(n_in), (n_out, n_in)))
            biases.append(np.zeros(n_out))
        return cls(spec, weights, biases)

    @property
    def params(self) -> list[np.ndarray]:
        """Trainable arrays in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "Network":
        return Network(self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    # -- step mode ---------------------------------------------------------

    def forward_step(self, input_spikes, scales, soft: bool = False) -> "StepForward":
        """Unrolled LIF simulation over T timesteps.

        ``soft=True`` replaces the Heaviside spike with the surrogate value
        itself, which makes the rollout differentiable. Only the gradient
        checker uses it.
        """
        spec = self.spec
        x = np.asarray(input_spikes, dtype=np.float64)
        B, n0, T = x.shape
        if n0 != spec.layer_sizes[0] or T != spec.timesteps:
            raise DimensionError(
                f"input spikes {x.shape} do not match n0={spec.layer_sizes[0]}, T={spec.timesteps}"
            )
        thr = spec.layer_scales(scales) * spec.theta_base
        sur = spec.surrogate
        nl = spec.n_lif
        mem = [np.zeros((B, n)) for n in spec.layer_sizes[1:-1]]
        vs = [np.empty((T, B, n)) for n in spec.layer_sizes[1:-1]]
        zs = [np.empty((T, B, n)) for n in spec.layer_sizes[1:-1]]
        rates = np.zeros((T, nl))
        logits = np.zeros((B, spec.layer_sizes[-1]))
        w_out, b_out = self.weights[-1], self.biases[-1]
        for t in range(T):
            h = x[:, :, t]
            for l in range(nl):
                v = spec.leak * mem[l] + h @ self.weights[l].T + self.biases[l]
                if soft:
                    z = sur.value(v - thr[l])
                    rates[t, l] = z.sum() / z.size
                else:
                    fired = v >= thr[l]
                    rates[t, l] = np.count_nonzero(fired) / fired.size
                    z = fired.astype(np.float64)
                mem[l] = v - thr[l] * z if spec.reset_mode == "subtract" else v * (1.0 - z)
                vs[l][t] = v
                zs[l][t] = z
                h = z
            logits += h @ w_out.T + b_out
        logits /= T
        return StepForward(logits, zs, vs, x, thr, rates, soft)

    def backward_step(self, fwd: "StepForward", targets) -> tuple[float, list[np.ndarray]]:
        """BPTT through the full rollout; returns ``(loss, grads)``."""
        spec = self.spec
        sur = spec.surrogate
        loss, dlogits = cross_entropy(fwd.logits, targets)
        T = spec.timesteps
        nl = spec.n_lif
        gw = [np.zeros_like(w) for w in self.weights]
        gb = [np.zeros_like(b) for b in self.biases]
        do = dlogits / T
        w_out = self.weights[-1]
        # gradient w.r.t. the post-reset membrane of each layer, carried backwards in time
        g_mem = [np.zeros_like(fwd.vs[l][0]) for l in range(nl)]
        gb[-1] += T * do.sum(axis=0)
        for t in range(T - 1, -1, -1):
            h_top = fwd.zs[nl - 1][t] if nl else fwd.inputs[:, :, t]
            gw[-1] += do.T @ h_top
            dh = do @ w_out
            for l in range(nl - 1, -1, -1):
                v = fwd.vs[l][t]
                z = fwd.zs[l][t]
                gate = sur.grad(v - fwd.thresholds[l])
                gm = g_mem[l]
                if spec.reset_mode == "subtract":
                    dz = dh - fwd.thresholds[l] * gm
                    dv = gm + dz * gate
                else:
                    dz = dh - v * gm
                    dv = gm * (1.0 - z) + dz * gate
                h_in = fwd.zs[l - 1][t] if l > 0 else fwd.inputs[:, :, t]
                gw[l] += dv.T @ h_in
                gb[l] += dv.sum(axis=0)
                dh = dv @ self.weights[l]
                g_mem[l] = spec.leak * dv
        grads = []
        for a, b in zip(gw, gb):
            grads += [a, b]
        return loss, grads

    # -- rate mode ---------------------------------------------------------

    def forward_rate(self, input_rates, scales) -> "RateForward":
        spec = self.spec
        x = np.asarray(input_rates, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != spec.layer_sizes[0]:
            raise DimensionError(f"input rates {x.shape} vs n0={spec.layer_sizes[0]}")
        if x.size and (x.min() < 0 or x.max() > 1):
            raise DomainError("input rates must lie in [0, 1]")
        thr = spec.layer_scales(scales) * spec.theta_base
        acts, pres = [x], []
        h = x
        for l in range(spec.n_lif):
            pre = h @ self.weights[l].T + self.biases[l] - thr[l]
            h = spec.surrogate.value(pre)
            pres.append(pre)
            acts.append(h)
        logits = h @ self.weights[-1].T + self.biases[-1]
        return RateForward(logits, acts, pres, thr)

    def backward_rate(self, fwd: "RateForward", targets) -> tuple[float, list[np.ndarray]]:
        spec = self.spec
        loss, d = cross_entropy(fwd.logits, targets)
        grads: list[np.ndarray] = []
        gw = [None] * len(self.weights)
        gb = [None] * len(self.biases)
        gw[-1] = d.T @ fwd.activations[-1]
        gb[-1] = d.sum(axis=0)
        dh = d @ self.weights[-1]
        for l in range(spec.n_lif - 1, -1, -1):
            dpre = dh * spec.surrogate.grad(fwd.pre[l])
            gw[l] = dpre.T @ fwd.activations[l]
            gb[l] = dpre.sum(axis=0)
            dh = dpre @ self.weights[l]
        for a, b in zip(gw, gb):
            grads += [a, b]
        return loss, grads

    # -- dispatch ----------------------------------------------------------

    def loss_and_grad(self, inputs, targets, scales):
        """Forward + backward for the configured mode.

        Returns ``(loss, grads, logits, unit_tick_rates)`` where the last
        item is an array ``[ticks, units]`` of instantaneous rates, the raw
        material for the controller's ``on_tick`` hook.
        """
        if self.spec.mode == "step":
            fwd = self.forward_step(inputs, scales)
            loss, grads = self.backward_step(fwd, targets)
            return loss, grads, fwd.logits, fwd.tick_rates()
        fwd = self.forward_rate(inputs, scales)
        loss, grads = self.backward_rate(fwd, targets)
        return loss, grads, fwd.logits, fwd.tick_rates(self.spec.partition)

    def predict(self, inputs, scales) -> np.ndarray:
        if self.spec.mode == "step":
            return self.forward_step(inputs, scales).logits
        return self.forward_rate(inputs, scales).logits

    def loss(self, inputs, targets, scales, soft: bool = False) -> float:
        if self.spec.mode == "step":
            logits = self.forward_step(inputs, scales, soft=soft).logits
        else:
            logits = self.forward_rate(inputs, scales).logits
        return cross_entropy(logits, targets)[0]


@dataclass
class StepForward:
    logits: np.ndarray
    zs: list  # per LIF layer, [T, B, n]
    vs: list  # pre-reset membranes, same layout
    inputs: np.ndarray  # [B, n0, T]
    thresholds: np.ndarray
    rates: np.ndarray  # [T, L] fraction of units firing per timestep and layer
    soft: bool = False

    @property
    def spike_record(self) -> list[np.ndarray]:
        """Per-layer spike batches laid out ``[batch, neurons, timesteps]``."""
        return [np.transpose(z, (1, 2, 0)) for z in self.zs]

    def tick_rates(self) -> np.ndarray:
        """``[T, L]`` mean spike rate of every layer at every timestep."""
        return self.rates

    def layer_rates(self) -> np.ndarray:
        return self.tick_rates().mean(axis=0)


@dataclass
class RateForward:
    logits: np.ndarray
    activations: list  # input rates followed by each LIF layer's phi output
    pre: list
    thresholds: np.ndarray

    def layer_rates(self) -> np.ndarray:
        return np.array([a.mean() for a in self.activations[1:]])

    def block_rates(self, partition) -> np.ndarray:
        from .controller import sense_rate_virtual

        return sense_rate_virtual(self.activations[1:], partition)

    def tick_rates(self, partition) -> np.ndarray:
        # tick k observes only block k; the others are NaN
        rates = self.block_rates(partition)
        out = np.full((len(partition), len(partition)), np.nan)
        np.fill_diagonal(out, rates)
        return out


def forward_step_mode(net: Network, input_spikes, scales):
    fwd = net.forward_step(input_spikes, scales)
    return fwd.logits, fwd.spike_record


def backward_step_mode(net: Network, input_spikes, targets, scales):
    return net.backward_step(net.forward_step(input_spikes, scales), targets)[1]


def forward_rate_mode(net: Network, input_rates, scales):
    fwd = net.forward_rate(input_rates, scales)
    return fwd.logits, fwd.block_rates(net.spec.partition)


def cross_entropy(logits, targets) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits.

    ``targets`` is either an integer label vector or a row-stochastic matrix.
    """
    logits = np.asarray(logits, dtype=np.float64)
    B, C = logits.shape
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    targets = np.asarray(targets)
    if targets.ndim == 1:
        onehot = np.zeros((B, C))
        onehot[np.arange(B), targets.astype(int)] = 1.0
    else:
        onehot = targets.astype(np.float64)
    loss = float(-(onehot * logp).sum() / B)
    return loss, (np.exp(logp) - onehot) / B


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# -- optimisers -------------------------------------------------------------


@dataclass
class OptimizerConfig:
    kind: Literal["sgd", "adam"] = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")


@dataclass
class OptimizerState:
    step: int = 0
    slots: dict = field(default_factory=dict)  # name -> list of arrays

    def to_dict(self):
        return {"step": self.step, "slots": {k: [a.copy() for a in v] for k, v in self.slots.items()}}


def optimizer_step(cfg: OptimizerConfig, state: OptimizerState, params, grads, lr=None, weight_decay=0.0):
    """One in-place update of ``params`` with decoupled weight decay.

    ``lr`` overrides ``cfg.lr`` (schedules pass the current rate here).
    """
    if len(params) != len(grads):
        raise DimensionError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise DimensionError(f"param {p.shape} vs grad {g.shape}")
    lr = cfg.lr if lr is None else lr
    state.step += 1
    if cfg.kind == "sgd":
        vel = state.slots.setdefault("velocity", [np.zeros_like(p) for p in params])
        for p, g, v in zip(params, grads, vel):
            v *= cfg.momentum
            v += g
            p -= lr * v
            if weight_decay:
                p -= lr * weight_decay * p
        return state
    m = state.slots.setdefault("m", [np.zeros_like(p) for p in params])
    v = state.slots.setdefault("v", [np.zeros_like(p) for p in params])
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, mi, vi in zip(params, grads, m, v):
        mi *= b1
        mi += (1.0 - b1) * g
        vi *= b2
        vi += (1.0 - b2) * g * g
        p -= lr * (mi / c1) / (np.sqrt(vi / c2) + cfg.eps)
        if weight_decay:
            p -= lr * weight_decay * p
    return state


def scheduled_lr(base_lr: float, schedule: str, step: int, total_steps: int) -> float:
    if schedule == "constant":
        return base_lr
    if schedule == "cosine":
        frac = min(step, total_steps) / max(total_steps, 1)
        return 0.5 * base_lr * (1.0 + math.cos(math.pi * frac))
    raise ValueError(f"unknown lr schedule {schedule!r}")


# -- gradient checking --------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    failing_indices: list  # (param index, flat index)
    kink_adjacent: list  # bool per failing index
    h: float
    n_checked: int


def relative_error(a, b, floor: float = 1e-8):
    a = np.asarray(a)
    b = np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(net: Network, inputs, targets, scales, tolerance: float = 1e-4,
               h: float = 1e-5, order: int = 2, floor: float = 1e-8) -> GradCheckReport:
    """Compare analytic gradients with central differences on every parameter.

    Step mode is checked on the soft rollout (spikes replaced by the surrogate
    value), where the BPTT recursion is the exact gradient. ``order=4`` uses
    the five-point stencil.
    """
    if net.num_parameters() > 10_000:
        raise ValueError("grad_check is exhaustive; limit is 10^4 parameters")
    soft = net.spec.mode == "step"
    if soft:
        _, analytic = net.backward_step(net.forward_step(inputs, scales, soft=True), targets)
    else:
        _, analytic = net.backward_rate(net.forward_rate(inputs, scales), targets)

    def f():
        return net.loss(inputs, targets, scales, soft=soft)

    worst = 0.0
    failing, kinks = [], []
    for pi, p in enumerate(net.params):
        flat = p.reshape(-1)
        g_flat = analytic[pi].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            if order == 4:
                vals = []
                for k in (2, 1, -1, -2):
                    flat[j] = orig + k * h
                    vals.append(f())
                num = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
            else:
                flat[j] = orig + h
                fp = f()
                flat[j] = orig - h
                fm = f()
                num = (fp - fm) / (2 * h)
            flat[j] = orig
            err = float(relative_error(g_flat[j], num, floor))
            worst = max(worst, err)
            if err > tolerance:
                failing.append((pi, j))
                kinks.append(_crosses_kink(net, inputs, scales, flat, j, h))
    return GradCheckReport(worst, failing, kinks, h, sum(p.size for p in net.params))


def _crosses_kink(net, inputs, scales, flat, j, h) -> bool:
    """True if perturbing entry ``j`` by +-h moves some pre-activation across a kink."""
    kinks = net.spec.surrogate.kinks()
    if not kinks:
        return False
    orig = flat[j]
    regions = []
    for delta in (h, -h):
        flat[j] = orig + delta
        if net.spec.mode == "step":
            fwd = net.forward_step(inputs, scales, soft=True)
            xs = [v - thr for v, thr in zip(fwd.vs, fwd.thresholds)]
        else:
            xs = net.forward_rate(inputs, scales).pre
        regions.append([np.digitize(x, kinks) for x in xs])
    flat[j] = orig
    return any(not np.array_equal(a, b) for a, b in zip(*regions))
