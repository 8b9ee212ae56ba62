"""Discrete-time LIF dynamics, surrogate spike functions and dense layer passes.

Everything here works in float64. A layer is a dense projection followed by a
leaky integrate-and-fire population whose threshold is ``scale * theta_base``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

SurrogateName = Literal["rectangular", "sigmoid", "atan"]
ResetMode = Literal["subtract", "zero"]


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class Surrogate:
    """Smooth stand-in ``psi`` for the Heaviside spike function.

    ``param`` is the width for ``rectangular`` and the slope for ``sigmoid``
    and ``atan``. The derivative of every kind integrates to one.
    A sigmoid with slope 0 is accepted as the degenerate constant-0.5 gate.
    """

    kind: SurrogateName = "atan"
    param: float = 2.0

    def __post_init__(self):
        if self.kind not in ("rectangular", "sigmoid", "atan"):
            raise ValueError(f"unknown surrogate kind {self.kind!r}")
        if self.kind == "sigmoid":
            if not self.param >= 0:
                raise ValueError("sigmoid slope must be >= 0")
        elif not self.param > 0:
            raise ValueError(f"{self.kind} parameter must be > 0")

    def value(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "sigmoid":
            with np.errstate(over="ignore"):
                return _logistic(self.param * x)
        if self.kind == "atan":
            return 0.5 + np.arctan(0.5 * np.pi * self.param * x) / np.pi
        return np.clip(x / self.param + 0.5, 0.0, 1.0)

    def grad(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "sigmoid":
            with np.errstate(over="ignore"):
                s = _logistic(self.param * x)
            return self.param * s * (1.0 - s)
        if self.kind == "atan":
            a = self.param
            return (0.5 * a) / (1.0 + (0.5 * np.pi * a * x) ** 2)
        w = self.param
        return np.where(np.abs(x) < 0.5 * w, 1.0 / w, 0.0)

    def kinks(self):
        """Points where ``value`` is not differentiable (rectangular only)."""
        if self.kind == "rectangular":
            return (-0.5 * self.param, 0.5 * self.param)
        return ()

    def to_dict(self):
        key = "width" if self.kind == "rectangular" else "slope"
        return {"kind": self.kind, key: self.param}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kind = d.pop("kind")
        key = "width" if kind == "rectangular" else "slope"
        if set(d) - {key}:
            raise KeyError(f"unknown surrogate keys: {sorted(set(d) - {key})}")
        return cls(kind, float(d[key])) if key in d else cls(kind)


def _logistic(x):
    # overflow-free logistic
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def surrogate_value(kind: Surrogate, x):
    return kind.value(x)


def surrogate_grad(kind: Surrogate, x):
    return kind.grad(x)


@dataclass
class LifParams:
    weight: np.ndarray  # [out, in]
    bias: np.ndarray  # [out]
    theta_base: float = 1.0
    leak: float = 0.5
    reset_mode: ResetMode = "subtract"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(
                f"weight {self.weight.shape} and bias {self.bias.shape} disagree"
            )
        if not self.theta_base > 0:
            raise DomainError("theta_base must be positive")
        if not 0 < self.leak <= 1:
            raise DomainError("leak must lie in (0, 1]")
        if self.reset_mode not in ("subtract", "zero"):
            raise ValueError(f"unknown reset mode {self.reset_mode!r}")

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]


@dataclass
class LifState:
    membrane: np.ndarray
    last_spikes: np.ndarray = field(default=None)

    def __post_init__(self):
        self.membrane = np.asarray(self.membrane, dtype=np.float64)
        if self.last_spikes is None:
            self.last_spikes = np.zeros_like(self.membrane)

    @classmethod
    def zeros(cls, batch: int, n: int) -> "LifState":
        return cls(np.zeros((batch, n)))


def _check_scale(scale):
    if not np.all(np.asarray(scale) > 0):
        raise DomainError(f"effective scale must be positive, got {scale}")


def lif_step(params: LifParams, state: LifState, input_current, effective_scale=1.0):
    """Advance one timestep; returns ``(new_state, spikes)``.

    The membrane integrates ``leak * U + I``, fires where it reaches
    ``effective_scale * theta_base`` and is then reset.
    """
    input_current = np.asarray(input_current, dtype=np.float64)
    if input_current.shape != state.membrane.shape:
        raise DimensionError(
            f"input {input_current.shape} vs membrane {state.membrane.shape}"
        )
    _check_scale(effective_scale)
    threshold = effective_scale * params.theta_base
    v = params.leak * state.membrane + input_current
    z = (v >= threshold).astype(np.float64)
    if params.reset_mode == "subtract":
        u = v - threshold * z
    else:
        u = v * (1.0 - z)
    return LifState(u, z), z


def rate_forward(params: LifParams, input_rates, kind: Surrogate, effective_scale=1.0):
    """Expected firing probability ``phi(W r + b - scale * theta)``."""
    x = np.asarray(input_rates, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.weight.shape[1]:
        raise DimensionError(f"input {x.shape} vs weight {params.weight.shape}")
    _check_scale(effective_scale)
    pre = x @ params.weight.T + params.bias - effective_scale * params.theta_base
    return kind.value(pre)
