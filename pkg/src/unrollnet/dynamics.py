"""Discrete dynamical-systems view of residual computation.

A residual step is h_{t+1} = K(h_t) + h_t + x_t: with a one-shot input
(x_0 only) the system is homogeneous and n steps compute (K+I)^n x_0,
which is exactly an n-block shared-weight residual network. With the
input re-applied every step the system is inhomogeneous and its n-step
state is the truncated power series sum_{k<=n} K'^k x with K' = K + I,
whose limit, when it exists, solves (I - K') h = -x up to sign
convention, i.e. h = (I - K')^{-1} x.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray

ITERATION_CAP = 10_000
POWER_ITER_STEPS = 100


@dataclass(frozen=True)
class Schedule:
    """Finite description of x_t or w_t for all t >= 0.

    kind "constant": value at every t. kind "delta": value at t=0, zero
    after. kind "explicit": values[t], zero beyond the list.
    """

    kind: str
    value: object = None
    values: tuple = ()

    def __post_init__(self):
        if self.kind not in ("constant", "delta", "explicit"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")

    def at(self, t: int):
        if self.kind == "constant":
            return self.value
        if self.kind == "delta":
            return self.value if t == 0 else None
        return self.values[t] if t < len(self.values) else None

    def is_zero_after_onset(self) -> bool:
        if self.kind == "delta":
            return True
        if self.kind == "constant":
            return _is_zero(self.value)
        return all(_is_zero(v) for v in self.values[1:])

    def is_constant(self) -> bool:
        if self.kind in ("constant", "delta"):
            return self.kind == "constant"
        return all(_same(self.values[0], v) for v in self.values[1:])


def _is_zero(v) -> bool:
    return v is None or (np.asarray(v) == 0).all()


def _same(a, b) -> bool:
    return np.array_equal(np.asarray(a), np.asarray(b))


@dataclass(frozen=True)
class SystemDescriptor:
    input_schedule: Schedule
    weight_schedule: Schedule


def classify(d: SystemDescriptor) -> dict[str, bool]:
    """Homogeneous iff the input vanishes for every t > 0; time-invariant
    iff the weights are the same at every t."""
    return {
        "homogeneous": d.input_schedule.is_zero_after_onset(),
        "time_invariant": d.weight_schedule.is_constant(),
    }


def _as_step(K) -> Callable[[Array], Array]:
    """Residual step h -> K(h) + h for a matrix or a callable pipeline."""
    if callable(K):
        return lambda h: K(h) + h
    K = np.asarray(K)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValueError(f"operator must be square, got shape {K.shape}")
    return lambda h: K @ h + h


def iterate_homogeneous(K, x0: Array, n: int) -> Array:
    """n-fold residual application: (K+I)^n x0 for linear K.

    K may be a square matrix or any callable mapping states to states
    (a full conv pipeline included).
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    step = _as_step(K)
    h = x0
    for _ in range(n):
        h = step(h)
    return h


def iterate_inhomogeneous(K, x: Array, n: int) -> Array:
    """n steps of h <- x + K'h from h = 0, with K' = K + I.

    Equals the truncated series sum_{k=0}^{n} K'^k x.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    h = np.zeros_like(np.asarray(x, dtype=float))
    for _ in range(n + 1):
        h = x + _kprime(K, h)
    return h


def _kprime(K, h: Array) -> Array:
    if callable(K):
        return K(h) + h
    return np.asarray(K) @ h + h


def power_series_solve(
    kprime, x: Array, tol: float = 1e-10, cap: int = ITERATION_CAP
) -> tuple[Array, int, bool]:
    """Sum the series (I + K' + K'^2 + ...) x until terms fall below tol.

    kprime is the operator K' itself (matrix or callable). Returns
    (partial sum, number of terms used, converged flag); the flag goes
    false when the cap is reached or successive terms grow, and the
    partial sum is still returned for inspection.
    """
    apply = (lambda v: kprime(v)) if callable(kprime) else (lambda v: np.asarray(kprime) @ v)
    term = np.asarray(x, dtype=float)
    total = term.copy()
    # runaway threshold: generous headroom over the input scale so that
    # transient growth of non-normal operators is not mistaken for divergence
    blowup = 1e9 * max(1.0, float(np.linalg.norm(term)))
    for k in range(1, cap + 1):
        term = apply(term)
        total = total + term
        norm = float(np.linalg.norm(term))
        if norm < tol:
            return total, k + 1, True
        if not np.isfinite(norm) or norm > blowup:
            return total, k + 1, False
    return total, cap + 1, False


def spectral_radius(M: Array, steps: int = POWER_ITER_STEPS, seed: int = 0) -> float:
    """Power-iteration estimate of the dominant eigenvalue magnitude.

    Accurate when the dominant eigenvalue is real and separated; for
    complex-pair-dominated operators the iterate norm oscillates and the
    estimate is only a rough lower bound. Used as a test predicate, not
    a precision tool.
    """
    M = np.asarray(M, dtype=float)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(M.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(steps):
        w = M @ v
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0
        lam = norm
        v = w / norm
    return float(lam)


def convergence_trace(kprime, x: Array, n_terms: int) -> list[tuple[int, float]]:
    """(term index, term norm) pairs for the first n_terms series terms."""
    apply = (lambda v: kprime(v)) if callable(kprime) else (lambda v: np.asarray(kprime) @ v)
    term = np.asarray(x, dtype=float)
    out = [(0, float(np.linalg.norm(term)))]
    for k in range(1, n_terms):
        term = apply(term)
        out.append((k, float(np.linalg.norm(term))))
    return out
