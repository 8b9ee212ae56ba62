"""Homeostatic threshold controller.

Per controlled unit (a LIF layer in step mode, a depth block in rate mode) the
controller keeps a smoothed firing rate and a scalar homeostatic state. Each
control tick the states evolve by a reaction-diffusion update driven by the
centred log-rates; the states are squashed into bounded threshold scales. Once
per epoch a global gain, steered by validation progress and activity energy,
multiplies every scale.

The controller holds no trainable parameters and never touches gradients.
Hook order within an optimisation step is fixed::

    on_tick(rates) x ticks  ->  on_optim_step()  ->  ... ->  on_epoch_end(val_loss)

``on_optim_step`` aggregates the tick rates, commits the EMA, runs ``ticks``
homeostat updates, maps the states to scales and writes back the effective
scales used by the next forward pass.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np


class ConfigurationError(ValueError):
    pass


class ControllerStateError(RuntimeError):
    """A hook was called out of order."""


@dataclass(frozen=True)
class ControllerConfig:
    beta: float = 0.1
    gamma: float = 0.02
    diffusion: float = 0.05
    c0: float = 0.0
    rate_momentum: float = 0.1
    s_base: float = 1.0
    alpha: float = 0.3
    kappa: float = 1.0
    eval_scale_momentum: float = 0.1
    ablate_rt: bool = False
    ablate_dh: bool = False
    rate_floor: float = 1e-4
    # epoch-level gain
    gain_step: float = 1.0
    trust_radius: float = 0.05
    a_energy: float = 1.0
    b_progress: float = 1.0
    progress_momentum: float = 0.5
    energy_momentum: float = 0.5
    trend_momentum: float = 0.05
    eps: float = 1e-8

    def __post_init__(self):
        if not self.beta > 0:
            raise ConfigurationError("beta must be positive")
        if self.gamma < 0 or self.diffusion < 0:
            raise ConfigurationError("gamma and diffusion must be nonnegative")
        if self.effective_gamma + 4 * self.effective_diffusion >= 2:
            raise ConfigurationError("unstable: need gamma + 4*D < 2")
        if not 0 < self.rate_momentum <= 1:
            raise ConfigurationError("rate_momentum must lie in (0, 1]")
        if not 0 < self.eval_scale_momentum <= 1:
            raise ConfigurationError("eval_scale_momentum must lie in (0, 1]")
        if not 0 < self.alpha < 1:
            raise ConfigurationError("alpha must lie in (0, 1)")
        if not (self.s_base > 0 and self.kappa > 0 and self.rate_floor > 0):
            raise ConfigurationError("s_base, kappa and rate_floor must be positive")
        if not (self.gain_step > 0 and self.trust_radius > 0):
            raise ConfigurationError("gain_step and trust_radius must be positive")
        if self.a_energy < 0 or self.b_progress < 0:
            raise ConfigurationError("gain drive weights must be nonnegative")

    @property
    def effective_gamma(self) -> float:
        return 0.0 if self.ablate_rt else self.gamma

    @property
    def effective_diffusion(self) -> float:
        return 0.0 if self.ablate_dh else self.diffusion

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown controller keys: {sorted(unknown)}")
        return cls(**d)


# -- rate sensing -------------------------------------------------------------


def sense_rate_step(spike_record) -> np.ndarray:
    """Mean spike count over batch, neurons and time for every layer.

    Each element of ``spike_record`` is a binary array ``[batch, neurons, T]``.
    """
    out = []
    for z in spike_record:
        z = np.asarray(z)
        if z.size == 0 or z.shape[0] == 0:
            raise ValueError("empty spike batch")
        out.append(z.mean())
    return np.array(out, dtype=np.float64)


def check_partition(partition, n_layers: int | None = None):
    seen = set()
    for block in partition:
        if len(block) == 0:
            raise ConfigurationError("empty block in partition")
        for l in block:
            if l in seen:
                raise ConfigurationError(f"layer {l} appears in more than one block")
            seen.add(l)
    if n_layers is not None and seen != set(range(n_layers)):
        raise ConfigurationError("partition must cover every controlled layer exactly once")


def sense_rate_virtual(layer_activations, partition) -> np.ndarray:
    """Virtual rate per block: mean surrogate activation over batch and block layers.

    ``layer_activations[l]`` is ``[batch, neurons]``; each layer contributes
    its neuron-averaged activation with equal weight.
    """
    check_partition(partition, len(layer_activations))
    per_layer = np.array([np.asarray(a, dtype=np.float64).mean(axis=1) for a in layer_activations])
    # per_layer: [layers, batch]
    return np.array([per_layer[list(block)].mean() for block in partition])


def ema_update(prev, rates, momentum: float) -> np.ndarray:
    """``(1 - m) * prev + m * rates``; ``prev=None`` initialises from ``rates``."""
    rates = np.asarray(rates, dtype=np.float64)
    if prev is None:
        return rates.copy()
    return (1.0 - momentum) * np.asarray(prev) + momentum * rates


# -- reaction-diffusion ---------------------------------------------------------


def laplacian_apply(c) -> np.ndarray:
    """Chain Laplacian with natural (Neumann) ends applied to ``c`` in O(L)."""
    c = np.asarray(c, dtype=np.float64)
    out = np.zeros_like(c)
    d = c[1:] - c[:-1]
    out[:-1] -= d
    out[1:] += d
    return out


def laplacian_matrix(n: int) -> np.ndarray:
    """Dense form of the chain Laplacian (tests and diagnostics only)."""
    m = np.zeros((n, n))
    for i in range(n - 1):
        m[i, i] += 1
        m[i + 1, i + 1] += 1
        m[i, i + 1] = m[i + 1, i] = -1
    return m


def centered_log_rates(ema_rates, rate_floor: float) -> np.ndarray:
    lr = np.log(np.maximum(np.asarray(ema_rates, dtype=np.float64), rate_floor))
    return lr - lr.mean()


def homeostat_tick(cfg: ControllerConfig, c, ema_rates) -> np.ndarray:
    """One reaction-diffusion update of the homeostatic states."""
    c = np.asarray(c, dtype=np.float64)
    new = c + cfg.beta * centered_log_rates(ema_rates, cfg.rate_floor)
    if cfg.effective_gamma:
        new -= cfg.effective_gamma * (c - cfg.c0)
    if cfg.effective_diffusion:
        new -= cfg.effective_diffusion * laplacian_apply(c)
    return new


def iteration_matrix(cfg: ControllerConfig, n: int) -> np.ndarray:
    """Linear part of ``homeostat_tick`` for frozen rates: ``(1-gamma) I - D L``."""
    return (1.0 - cfg.effective_gamma) * np.eye(n) - cfg.effective_diffusion * laplacian_matrix(n)


def map_scales(cfg: ControllerConfig, c) -> np.ndarray:
    with np.errstate(over="ignore"):  # kappa * c overflowing to inf still saturates tanh
        return cfg.s_base * (1.0 + cfg.alpha * np.tanh(cfg.kappa * np.asarray(c, dtype=np.float64)))


# -- global gain -----------------------------------------------------------------


@dataclass
class GlobalGainState:
    gain: float = 1.0
    prev_val_loss: float | None = None
    progress_ema: float = 0.0
    energy_ema: float = 0.0
    energy_trend: float = 0.0
    epochs: int = 0
    last_progress: float = 0.0
    last_drive: float = 0.0


def gain_epoch_update(cfg: ControllerConfig, st: GlobalGainState, val_loss: float, energy: float):
    """Advance the gain by one epoch; returns ``(new_state, flags)``.

    The drive is ``a*(E_smooth - E_trend) - b*progress_smooth`` and the gain
    moves by ``exp(clip(gain_step * drive, -r, r))`` with trust radius ``r``.
    """
    st = GlobalGainState(**asdict(st))
    if not math.isfinite(val_loss):
        return st, ["nonfinite_val_loss"]
    if st.epochs == 0:
        st.prev_val_loss = float(val_loss)
        st.progress_ema = 0.0
        st.energy_ema = st.energy_trend = float(energy)
        st.epochs = 1
        st.last_progress = 0.0
        st.last_drive = 0.0
        return st, []
    prev = st.prev_val_loss
    p = (prev - val_loss) / max(prev, cfg.eps)
    st.progress_ema = (1 - cfg.progress_momentum) * st.progress_ema + cfg.progress_momentum * p
    st.energy_ema = (1 - cfg.energy_momentum) * st.energy_ema + cfg.energy_momentum * energy
    st.energy_trend = (1 - cfg.trend_momentum) * st.energy_trend + cfg.trend_momentum * st.energy_ema
    drive = cfg.a_energy * (st.energy_ema - st.energy_trend) - cfg.b_progress * st.progress_ema
    step = min(max(cfg.gain_step * drive, -cfg.trust_radius), cfg.trust_radius)
    st.gain *= math.exp(step)
    st.prev_val_loss = float(val_loss)
    st.epochs += 1
    st.last_progress = p
    st.last_drive = drive
    return st, []


def write_back(scales, gain: float) -> np.ndarray:
    return gain * np.asarray(scales, dtype=np.float64)


# -- stateful controller ---------------------------------------------------------


@dataclass
class ControllerState:
    n_units: int
    ticks: int
    ema_rates: np.ndarray | None = None
    homeo: np.ndarray = None
    scales: np.ndarray = None
    eval_scales: np.ndarray | None = None
    # per-epoch energy accumulator: sum over ticks of mean_u r~ and tick count
    energy_sum: float = 0.0
    energy_ticks: int = 0
    steps: int = 0

    def to_dict(self):
        def arr(a):
            return None if a is None else [float(x) for x in a]

        return {
            "n_units": self.n_units,
            "ticks": self.ticks,
            "ema_rates": arr(self.ema_rates),
            "homeo": arr(self.homeo),
            "scales": arr(self.scales),
            "eval_scales": arr(self.eval_scales),
            "energy_sum": self.energy_sum,
            "energy_ticks": self.energy_ticks,
            "steps": self.steps,
        }

    @classmethod
    def from_dict(cls, d):
        def arr(a):
            return None if a is None else np.array(a, dtype=np.float64)

        return cls(
            d["n_units"], d["ticks"], arr(d["ema_rates"]), arr(d["homeo"]), arr(d["scales"]),
            arr(d["eval_scales"]), d["energy_sum"], d["energy_ticks"], d["steps"],
        )


class HomeostaticController:
    def __init__(self, cfg: ControllerConfig, n_units: int, ticks: int):
        if n_units < 1 or ticks < 1:
            raise ConfigurationError("need at least one unit and one tick")
        self.cfg = cfg
        self.state = ControllerState(
            n_units, ticks,
            homeo=np.full(n_units, cfg.c0, dtype=np.float64),
            scales=map_scales(cfg, np.full(n_units, cfg.c0)),
        )
        self.gain = GlobalGainState()
        self._tick_sum = np.zeros(n_units)
        self._tick_cnt = np.zeros(n_units)
        self._ticks_seen = 0
        self.last_energy = float("nan")
        # r~ is frozen across the ticks of one step, so each tick is the affine map
        # c -> A c + b, A = (1 - gamma) I - D L. The step applies its T-fold
        # composition c -> A^T c + (I + A + ... + A^(T-1)) b in two products.
        a = iteration_matrix(cfg, n_units)
        # The reaction term beta * (log r~ - mean) is linear in log r~, so it folds
        # into the same matrix; the decay anchor gamma * c0 becomes a constant.
        summed = sum(np.linalg.matrix_power(a, k) for k in range(ticks))
        centre = np.eye(n_units) - 1.0 / n_units
        self._step_mat = np.linalg.matrix_power(a, ticks)
        self._react_mat = cfg.beta * summed @ centre
        self._anchor = summed @ np.full(n_units, cfg.effective_gamma * cfg.c0)

    @property
    def effective_scales(self) -> np.ndarray:
        return write_back(self.state.scales, self.gain.gain)

    @property
    def eval_scales(self) -> np.ndarray:
        if self.state.eval_scales is None:
            return self.effective_scales
        return self.state.eval_scales.copy()

    def on_tick(self, rates) -> None:
        """Record one tick of instantaneous rates; NaN marks units not observed."""
        if self._ticks_seen >= self.state.ticks:
            raise ControllerStateError(
                f"more than {self.state.ticks} ticks before on_optim_step"
            )
        rates = np.asarray(rates, dtype=np.float64)
        if rates.shape != (self.state.n_units,):
            raise ValueError(f"expected {self.state.n_units} rates, got {rates.shape}")
        seen = ~np.isnan(rates)
        self._tick_sum[seen] += rates[seen]
        self._tick_cnt[seen] += 1
        self._ticks_seen += 1

    def on_ticks(self, rates) -> None:
        """Equivalent to ``on_tick`` for each row of a ``[ticks, units]`` array."""
        rates = np.asarray(rates, dtype=np.float64)
        if rates.ndim != 2 or rates.shape[1] != self.state.n_units:
            raise ValueError(f"expected [ticks, {self.state.n_units}] rates, got {rates.shape}")
        if self._ticks_seen + rates.shape[0] > self.state.ticks:
            raise ControllerStateError(
                f"more than {self.state.ticks} ticks before on_optim_step"
            )
        total = rates.sum(axis=0)
        if math.isnan(total.sum()):
            seen = ~np.isnan(rates)
            self._tick_sum += np.where(seen, rates, 0.0).sum(axis=0)
            self._tick_cnt += seen.sum(axis=0)
        else:
            self._tick_sum += total
            self._tick_cnt += rates.shape[0]
        self._ticks_seen += rates.shape[0]

    def on_optim_step(self) -> np.ndarray:
        """Commit the step: EMA, homeostat ticks, scale mapping, write-back."""
        st, cfg = self.state, self.cfg
        if self._ticks_seen != st.ticks:
            raise ControllerStateError(
                f"on_optim_step after {self._ticks_seen} of {st.ticks} ticks"
            )
        if self._tick_cnt.min() == 0:
            raise ControllerStateError("some unit was never observed during the step")
        rates = self._tick_sum / self._tick_cnt
        self._tick_sum = np.zeros(st.n_units)
        self._tick_cnt = np.zeros(st.n_units)
        self._ticks_seen = 0

        ema = st.ema_rates = ema_update(st.ema_rates, rates, cfg.rate_momentum)
        log_rates = np.log(np.maximum(ema, cfg.rate_floor))
        c = st.homeo = self._step_mat @ st.homeo + self._react_mat @ log_rates + self._anchor
        st.scales = map_scales(cfg, c)
        st.energy_sum += st.ticks * float(ema.sum()) / st.n_units
        st.energy_ticks += st.ticks
        st.steps += 1
        eff = st.scales * self.gain.gain
        m = cfg.eval_scale_momentum
        st.eval_scales = eff.copy() if st.eval_scales is None else (1 - m) * st.eval_scales + m * eff
        return eff

    def on_epoch_end(self, val_loss: float) -> list[str]:
        """Update the global gain from this epoch's validation loss and energy."""
        st = self.state
        if self._ticks_seen:
            raise ControllerStateError("on_epoch_end with an uncommitted step")
        if st.energy_ticks == 0:
            raise ControllerStateError("on_epoch_end before any optimisation step")
        energy = st.energy_sum / st.energy_ticks
        self.gain, flags = gain_epoch_update(self.cfg, self.gain, val_loss, energy)
        self.last_energy = energy
        st.energy_sum = 0.0
        st.energy_ticks = 0
        return flags

    def to_dict(self):
        return {
            "config": self.cfg.to_dict(),
            "state": self.state.to_dict(),
            "gain": asdict(self.gain),
        }

    @classmethod
    def from_dict(cls, d):
        cfg = ControllerConfig.from_dict(d["config"])
        st = ControllerState.from_dict(d["state"])
        obj = cls(cfg, st.n_units, st.ticks)
        obj.state = st
        obj.gain = GlobalGainState(**d["gain"])
        return obj
