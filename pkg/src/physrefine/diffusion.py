"""Residual-shift diffusion between clean motion and an observation.

The forward chain moves a clean sequence x0 toward the observation y along
the residual d = y - x0:

    q(x^n | x^{n-1}) = N(x^{n-1} + alpha_n d, kappa^2 alpha_n I)
    q(x^n | x0)      = N(x0 + eta_n d,        kappa^2 eta_n I)

and the reverse kernel is N(A_n x^n + B_n x_hat, Sigma_n I) with
A_n = eta_{n-1}/eta_n, B_n = alpha_n/eta_n, Sigma_n = A_n alpha_n kappa^2,
eta_0 = 0. Sigma_n is a variance throughout; the reverse update adds
sqrt(Sigma_n) * eps.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Protocol

import numpy as np


class Denoiser(Protocol):
    def predict(self, x_n: np.ndarray, y: np.ndarray, n: int) -> np.ndarray: ...


@dataclass(frozen=True)
class ShiftSchedule:
    etas: np.ndarray
    kappa: float

    def __post_init__(self):
        etas = np.asarray(self.etas, dtype=float).reshape(-1)
        if etas.size < 1:
            raise ValueError("schedule needs at least one step")
        if np.any(etas <= 0) or np.any(etas >= 1):
            raise ValueError("etas must lie in (0, 1)")
        if np.any(np.diff(etas) <= 0):
            raise ValueError("etas must be strictly increasing")
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        etas.setflags(write=False)
        object.__setattr__(self, "etas", etas)
        object.__setattr__(self, "kappa", float(self.kappa))

    @property
    def N(self) -> int:
        return self.etas.size

    def eta(self, n: int) -> float:
        """eta_n with eta_0 = 0."""
        self._check(n, lo=0)
        return 0.0 if n == 0 else float(self.etas[n - 1])

    def alpha(self, n: int) -> float:
        self._check(n)
        return self.eta(n) - self.eta(n - 1)

    def A(self, n: int) -> float:
        self._check(n)
        return self.eta(n - 1) / self.eta(n)

    def B(self, n: int) -> float:
        """alpha_n / eta_n, written as 1 - A_n so that A_n + B_n == 1 in floating point."""
        return 1.0 - self.A(n)

    def Sigma(self, n: int) -> float:
        self._check(n)
        return self.A(n) * self.alpha(n) * self.kappa**2

    def _check(self, n: int, lo: int = 1):
        if not lo <= n <= self.N:
            raise IndexError(f"diffusion step {n} outside [{lo}, {self.N}]")

    def table(self) -> list[tuple]:
        return [(n, self.eta(n), self.alpha(n), self.A(n), self.B(n), self.Sigma(n)) for n in range(1, self.N + 1)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "eta", "alpha", "A", "B", "Sigma"])
            for row in self.table():
                w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])

    def to_json(self) -> dict:
        return {"etas": self.etas.tolist(), "kappa": self.kappa}

    @classmethod
    def from_json(cls, doc: dict) -> "ShiftSchedule":
        return cls(np.asarray(doc["etas"]), doc["kappa"])


def build_schedule(N: int = 4, eta1: float = 1e-3, etaN: float = 0.999, kappa: float = 1.0,
                   curve_exponent: float = 1.0) -> ShiftSchedule:
    """Log-space power interpolation between eta1 and etaN."""
    if N < 1:
        raise ValueError("N must be >= 1")
    if not 0 < eta1 < etaN < 1:
        raise ValueError("need 0 < eta1 < etaN < 1")
    if not kappa > 0 or not curve_exponent > 0:
        raise ValueError("kappa and curve_exponent must be positive")
    if N == 1:
        return ShiftSchedule(np.array([eta1]), kappa)
    u = (np.arange(N) / (N - 1)) ** curve_exponent
    etas = np.exp(np.log(eta1) + (np.log(etaN) - np.log(eta1)) * u)
    etas[0], etas[-1] = eta1, etaN
    return ShiftSchedule(etas, kappa)


def _same_shape(*arrays):
    arrays = [np.asarray(a, dtype=float) for a in arrays]
    if any(a.shape != arrays[0].shape for a in arrays[1:]):
        raise ValueError(f"shape mismatch: {[a.shape for a in arrays]}")
    return arrays


def forward_step_sample(x_prev, x0, y, n: int, schedule: ShiftSchedule, rng: np.random.Generator):
    """Draw x^n given x^{n-1}."""
    x_prev, x0, y = _same_shape(x_prev, x0, y)
    a = schedule.alpha(n)
    return x_prev + a * (y - x0) + schedule.kappa * np.sqrt(a) * rng.standard_normal(x_prev.shape)


def forward_marginal_sample(x0, y, n: int, schedule: ShiftSchedule, rng: np.random.Generator):
    """Draw x^n given x0 directly from the closed-form marginal."""
    x0, y = _same_shape(x0, y)
    e = schedule.eta(n)
    return x0 + e * (y - x0) + schedule.kappa * np.sqrt(e) * rng.standard_normal(x0.shape)


def forward_marginal_moments(x0, y, n: int, schedule: ShiftSchedule):
    """Mean and per-entry variance of q(x^n | x0, y)."""
    x0, y = _same_shape(x0, y)
    e = schedule.eta(n)
    return x0 + e * (y - x0), np.full(x0.shape, schedule.kappa**2 * e)


def composed_forward_moments(x0, y, n: int, schedule: ShiftSchedule):
    """Mean and variance after chaining n single forward steps from x0 (exact algebra)."""
    x0, y = _same_shape(x0, y)
    mean, var = x0.copy(), np.zeros_like(x0)
    for k in range(1, n + 1):
        a = schedule.alpha(k)
        mean = mean + a * (y - x0)
        var = var + schedule.kappa**2 * a
    return mean, var


def reverse_step(x_n, x_hat, n: int, schedule: ShiftSchedule, rng: np.random.Generator):
    """Draw x^{n-1} ~ N(A_n x^n + B_n x_hat, Sigma_n I)."""
    x_n, x_hat = _same_shape(x_n, x_hat)
    mean = schedule.A(n) * x_n + schedule.B(n) * x_hat
    sigma = schedule.Sigma(n)
    if sigma == 0.0:
        return mean
    return mean + np.sqrt(sigma) * rng.standard_normal(x_n.shape)


def sample_prior(y, schedule: ShiftSchedule, rng: np.random.Generator):
    """Starting state x^N ~ N(y, kappa^2 I)."""
    y = np.asarray(y, dtype=float)
    return y + schedule.kappa * rng.standard_normal(y.shape)


def refine(y, denoiser, schedule: ShiftSchedule, rng: np.random.Generator, return_path: bool = False):
    """Run the full reverse chain from x^N ~ N(y, kappa^2 I) down to x^0.

    ``denoiser`` is either an object with ``predict(x_n, y, n)`` or a callable
    with the same signature.
    """
    predict = denoiser.predict if hasattr(denoiser, "predict") else denoiser
    y = np.asarray(y, dtype=float)
    x = sample_prior(y, schedule, rng)
    path = [x]
    for n in range(schedule.N, 0, -1):
        x_hat = np.asarray(predict(x, y, n), dtype=float)
        if x_hat.shape != x.shape or not np.all(np.isfinite(x_hat)):
            raise FloatingPointError(f"denoiser returned invalid prediction at step {n}")
        x = reverse_step(x, x_hat, n, schedule, rng)
        path.append(x)
    return (x, path) if return_path else x
