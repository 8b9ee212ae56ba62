"""Stochastic membrane model used to reason about firing rate and gradient flow.

The subthreshold membrane is an Ornstein-Uhlenbeck diffusion

    dU = -(U - mu) / tau dt + sigma dW

with stationary law N(mu, sigma^2 tau / 2). The firing rate is read as the
per-step exceedance probability ``Pr(U >= theta)`` (no reset, no renewal).
The mean surrogate gate ``E[psi'(U - theta)]`` is the stationary density
smoothed by ``psi'``, hence close to ``-d rate / d theta``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import erfc, ndtri

from .core import DimensionError, Surrogate


@dataclass(frozen=True)
class OuParams:
    mu: float = 0.0
    tau: float = 2.0
    sigma: float = 1.0
    theta: float = 1.0
    dt: float = 0.05
    horizon: int = 2000
    burn_in: int = 400

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if not 0 < self.dt <= self.tau / 20:
            raise ValueError("need 0 < dt <= tau / 20")
        if self.horizon < 1 or not 0 <= self.burn_in < self.horizon:
            raise ValueError("need horizon >= 1 and 0 <= burn_in < horizon")

    @property
    def stationary_std(self) -> float:
        return self.sigma * math.sqrt(self.tau / 2.0)

    def to_dict(self):
        return asdict(self)


def simulate_ou(params: OuParams, n_paths: int, seed: int, u0: float | None = None) -> np.ndarray:
    """Euler-Maruyama paths; returns ``[n_paths, horizon - burn_in]`` post-burn-in samples.

    Paths start at ``u0`` (default ``mu``).
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    rng = np.random.default_rng(seed)
    p = params
    u = np.full(n_paths, p.mu if u0 is None else u0, dtype=np.float64)
    keep = p.horizon - p.burn_in
    out = np.empty((n_paths, keep))
    decay = p.dt / p.tau
    noise = p.sigma * math.sqrt(p.dt)
    for k in range(p.horizon):
        u = u - decay * (u - p.mu) + noise * rng.standard_normal(n_paths)
        if k >= p.burn_in:
            out[:, k - p.burn_in] = u
    return out


def stationary_samples(params: OuParams, n: int, seed: int, stratified: bool = True,
                       replicates: int = 16) -> np.ndarray:
    """Draws from the exact stationary law, shape ``[replicates, n // replicates]``.

    With ``stratified=True`` each replicate places one uniform draw in each
    of ``n // replicates`` equal-probability strata before the inverse-CDF
    transform; replicates are independent, so their spread gives an honest
    standard error.
    """
    rng = np.random.default_rng(seed)
    m = n // replicates
    if m < 1:
        raise ValueError("fewer samples than replicates")
    if stratified:
        u = (np.arange(m) + rng.random((replicates, m))) / m
    else:
        u = rng.random((replicates, m))
    return params.mu + params.stationary_std * ndtri(u)


def stationary_rate(params: OuParams, theta: float | np.ndarray | None = None):
    """Closed-form ``Pr(U >= theta)`` under the stationary Gaussian law."""
    theta = params.theta if theta is None else theta
    std = params.stationary_std
    if std == 0:
        return np.where(np.asarray(theta) <= params.mu, 1.0, 0.0)
    return 0.5 * erfc((np.asarray(theta, dtype=np.float64) - params.mu) / (std * math.sqrt(2.0)))


def stationary_rate_mc(params: OuParams, n_samples: int, seed: int, theta=None):
    """Monte-Carlo estimate of the exceedance rate with its standard error."""
    theta = params.theta if theta is None else theta
    s = stationary_samples(params, n_samples, seed, stratified=False).reshape(-1)
    hit = s >= theta
    r = hit.mean()
    return float(r), float(math.sqrt(max(r * (1 - r), 0.0) / s.size))


def rate_slope(params: OuParams, theta, h: float | None = None):
    """``-(r(theta+h) - r(theta-h)) / 2h`` from the closed-form rate."""
    h = 0.01 * params.stationary_std if h is None else h
    theta = np.asarray(theta, dtype=np.float64)
    return -(stationary_rate(params, theta + h) - stationary_rate(params, theta - h)) / (2 * h)


def stationary_density(params: OuParams, x):
    std = params.stationary_std
    z = (np.asarray(x, dtype=np.float64) - params.mu) / std
    return np.exp(-0.5 * z * z) / (std * math.sqrt(2 * math.pi))


@dataclass
class GateEstimate:
    theta: float
    gate: float
    stderr: float


def estimate_gate(params: OuParams, kind: Surrogate, n_samples: int = 10**6, seed: int = 0,
                  theta=None, stratified: bool = True, replicates: int = 16):
    """Monte-Carlo mean gate ``E[psi'(U - theta)]`` at one or many thresholds.

    Returns a ``GateEstimate`` for a scalar ``theta`` and a list otherwise.
    The same samples are reused across thresholds.
    """
    if n_samples < 10**4:
        raise ValueError("estimate_gate needs at least 10^4 samples")
    thetas = np.atleast_1d(params.theta if theta is None else theta).astype(np.float64)
    samples = stationary_samples(params, n_samples, seed, stratified, replicates)
    out = []
    for th in thetas:
        per_rep = kind.grad(samples - th).mean(axis=1)
        if stratified:
            se = per_rep.std(ddof=1) / math.sqrt(len(per_rep))
        else:
            se = kind.grad(samples - th).reshape(-1).std(ddof=1) / math.sqrt(samples.size)
        out.append(GateEstimate(float(th), float(per_rep.mean()), float(se)))
    scalar = theta is None or np.ndim(theta) == 0
    return out[0] if scalar else out


def gate_by_quadrature(params: OuParams, kind: Surrogate, theta: float, n: int = 20001, span: float = 12.0):
    """``(psi' * p_U)(theta)`` by trapezoid quadrature over ``mu +- span*std``."""
    std = params.stationary_std
    x = np.linspace(params.mu - span * std, params.mu + span * std, n)
    return float(np.trapezoid(kind.grad(x - theta) * stationary_density(params, x), x))


@dataclass
class JacobianSummary:
    matrix: np.ndarray
    spectral_norm: float
    row_gain: np.ndarray
    iterations: int


def effective_jacobian(gates, weights, tol: float = 1e-12, max_iter: int = 10_000, seed: int = 0):
    """``diag(gates) @ W`` plus a power-iteration estimate of its spectral norm."""
    gates = np.asarray(gates, dtype=np.float64).reshape(-1)
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2 or gates.shape[0] != w.shape[0]:
        raise DimensionError(f"{gates.shape[0]} gates for weight of shape {w.shape}")
    j = gates[:, None] * w
    norm, it = _power_norm(j, tol, max_iter, seed)
    return JacobianSummary(j, norm, np.linalg.norm(j, axis=1), it)


def _power_norm(a, tol, max_iter, seed):
    if not np.any(a):
        return 0.0, 0
    ata = a.T @ a
    v = np.random.default_rng(seed).standard_normal(a.shape[1])
    v /= np.linalg.norm(v)
    lam = 0.0
    for it in range(1, max_iter + 1):
        w = ata @ v
        new = float(np.linalg.norm(w))
        if new == 0:
            return 0.0, it
        v = w / new
        if abs(new - lam) <= tol * new:
            lam = new
            break
        lam = new
    return math.sqrt(lam), it


def gate_table(params: OuParams, kind: Surrogate, thetas, n_samples: int = 10**6, seed: int = 0,
               h: float | None = None):
    """Rows ``(theta, r, -dr/dtheta, gate, stderr)`` for the CSV emitted by ``analyze``."""
    gates = estimate_gate(params, kind, n_samples, seed, theta=np.asarray(thetas, dtype=np.float64))
    rows = []
    for g in gates:
        rows.append((g.theta, float(stationary_rate(params, g.theta)),
                     float(rate_slope(params, g.theta, h)), g.gate, g.stderr))
    return rows
