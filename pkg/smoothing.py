#!/usr/bin/env python3
"""
Smoothing of max-form functions h(x) = max_{s in S} <Cx, s> - h_hat(s).

Two dual-set families are supported:
  - simplex with the entropy prox centered at the uniform point (softmax closed form),
  - box [0,1]^p with v(s) = ||s||^2 / 2 centered at 0 (per-coordinate Huber pieces).

Smoothing subtracts eta * v(s) inside the max, which gives a function with
||C||^2 / (mu + eta) Lipschitz gradient that underestimates h by at most eta * D_V^2.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp, softmax

from problem_model import estimate_op_norm


logger = logging.getLogger(__name__)

ETA_FLOOR = 1e-12
FAMILIES = ("simplex", "box")


def _functional_norm(a: Any) -> float:
    if a is None:
        return 0.0
    if hasattr(a, "norm"):
        return float(a.norm())
    return float(np.linalg.norm(a))


class MatrixMap:
    """Explicit matrix C acting as x -> Cx with adjoint s -> C^T s."""

    def __init__(self, C: Any):
        self.C = C if hasattr(C, "tocsr") else np.atleast_2d(np.asarray(C, dtype=float))
        self.rows = int(self.C.shape[0])
        self.norm = estimate_op_norm(self.C).sigma

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.C @ x, dtype=float).ravel()

    def adjoint(self, s: np.ndarray) -> np.ndarray:
        return np.asarray(self.C.T @ s, dtype=float).ravel()


class MaxFormFunction:
    """
    Structured convex function

        h(x) = max_{s in S} { <Cx, s> - <offset, s> - mu v(s) } + <affine, x> + affine_const

    The affine part sits outside the max; CVaR constraints need it for their
    threshold variable. The linear map C is either a matrix or any object with
    `rows`, `norm`, `apply(x)` and `adjoint(s)`.
    """

    def __init__(self, C: Any, family: str, offset: Optional[Any] = None, mu: float = 0.0,
                 affine: Optional[Any] = None, affine_const: float = 0.0,
                 norm_C: Optional[float] = None, name: str = "h"):
        if family not in FAMILIES:
            raise ValueError(f"Unsupported dual set family '{family}', expected one of {FAMILIES}")
        if mu < 0:
            raise ValueError(f"mu must be nonnegative, got {mu}")

        is_explicit = C is not None and not hasattr(C, "adjoint")
        self.linear_map = MatrixMap(C) if is_explicit else C
        self.family = family
        self.offset = None if offset is None else np.asarray(offset, dtype=float).ravel()
        self.mu = float(mu)
        if isinstance(affine, (list, tuple)):
            affine = np.asarray(affine, dtype=float)
        self.affine = affine
        self.affine_const = float(affine_const)
        self.norm_C = float(norm_C) if norm_C is not None else float(self.linear_map.norm)
        self.name = name
        self.data = None
        if is_explicit:
            self.data = {"kind": "max_form", "family": family, "C": self.linear_map.C, "mu": self.mu,
                         "offset": self.offset, "affine": affine, "affine_const": self.affine_const}

    # -- metadata ---------------------------------------------------------

    @property
    def dual_size(self) -> int:
        return int(self.linear_map.rows)

    @property
    def prox_diameter(self) -> float:
        """D_V: sqrt(ln T) on the simplex, sqrt(p / 2) on the box."""
        if self.family == "simplex":
            return math.sqrt(math.log(self.dual_size))
        return math.sqrt(self.dual_size / 2.0)

    @property
    def center_norm(self) -> float:
        """Norm of the prox center c_v."""
        if self.family == "simplex":
            return 1.0 / math.sqrt(self.dual_size)
        return 0.0

    @property
    def grad_bound(self) -> float:
        return self.norm_C * (self.center_norm + math.sqrt(2.0) * self.prox_diameter) + _functional_norm(self.affine)

    @property
    def is_smooth(self) -> bool:
        return self.mu > 0

    @property
    def lipschitz_grad(self) -> float:
        return self.norm_C ** 2 / self.mu if self.mu > 0 else math.inf

    # -- evaluation -------------------------------------------------------

    def _shifted(self, x: Any) -> np.ndarray:
        u = self.linear_map.apply(x)
        if self.offset is not None:
            u = u - self.offset
        return u

    def _affine_value(self, x: Any) -> float:
        if self.affine is None:
            return self.affine_const
        return float(self.affine.dot(x)) + self.affine_const

    def dual_argmax(self, u: np.ndarray, temperature: float) -> Tuple[float, np.ndarray]:
        """Value and maximizer of max_s <u, s> - temperature * v(s)."""
        if self.family == "simplex":
            scaled = u / temperature
            value = temperature * (float(logsumexp(scaled)) - math.log(u.size))
            return value, softmax(scaled)
        s = np.clip(u / temperature, 0.0, 1.0)
        return float(np.sum(u * s - 0.5 * temperature * s * s)), s

    def value_grad(self, x: Any, eta: float = 0.0) -> Tuple[float, Any]:
        if eta < 0:
            raise ValueError(f"eta must be nonnegative, got {eta}")
        if self.mu == 0.0:
            if eta == 0.0:
                raise ValueError(f"'{self.name}' is nonsmooth (mu = 0): use exact_value or a positive eta")
            if eta < ETA_FLOOR:
                logger.warning("eta=%.3g below floor for '%s'; clamping to %.0e", eta, self.name, ETA_FLOOR)
                eta = ETA_FLOOR

        u = self._shifted(x)
        value, s = self.dual_argmax(u, self.mu + eta)
        grad = self.linear_map.adjoint(s)
        if self.affine is not None:
            grad = grad + self.affine
        return value + self._affine_value(x), grad

    def exact_value(self, x: Any) -> float:
        u = self._shifted(x)
        if self.mu > 0:
            value = self.dual_argmax(u, self.mu)[0]
        elif self.family == "simplex":
            value = float(np.max(u))
        else:
            value = float(np.sum(np.maximum(u, 0.0)))
        return value + self._affine_value(x)


def smoothed_value_grad(fn: MaxFormFunction, eta: float, x: Any) -> Tuple[float, Any]:
    """Value and gradient of the eta-smoothed function at x."""
    return fn.value_grad(x, eta)


def exact_value(fn: MaxFormFunction, x: Any) -> float:
    """Unsmoothed value of a max-form function."""
    return fn.exact_value(x)


def smooth_lipschitz(fn: MaxFormFunction, eta: float) -> float:
    """
    Lipschitz constant ||C||^2 / (mu + eta) of the smoothed gradient.

    Args:
        fn: Max-form function
        eta: Smoothing weight

    Returns:
        Lipschitz constant
    """
    total = fn.mu + eta
    if total <= 0:
        raise ValueError("mu + eta must be positive")
    return fn.norm_C ** 2 / total


def huber(u: np.ndarray, eta: float) -> np.ndarray:
    """Smoothed hinge max_{s in [0,1]} u s - eta s^2 / 2, elementwise."""
    u = np.asarray(u, dtype=float)
    return np.where(u <= 0, 0.0, np.where(u < eta, u * u / (2 * eta), u - eta / 2))


@dataclass(frozen=True)
class SmoothingParams:
    """Smoothing weights (objective first) for one horizon N or one iteration k."""
    eta: np.ndarray
    mode: str
    step: int


def _smoothing_weight(fn: Any, D_X: float, scale: int) -> float:
    if not isinstance(fn, MaxFormFunction) or fn.mu > 0:
        return 0.0
    D_V = fn.prox_diameter
    if D_V == 0:
        raise ValueError(f"'{fn.name}' has D_V = 0 and mu = 0; it cannot be smoothed")
    return fn.norm_C * D_X / (D_V * math.sqrt(scale))


def fixed_smoothing_schedule(fns: Sequence[Any], N: int, D_X: float) -> SmoothingParams:
    """
    Weights eta_i = ||C_i|| D_X / (D_V_i sqrt(N)) for a run of fixed length N.

    Smooth components (plain smooth functions or mu > 0) get eta = 0.
    """
    if N < 1:
        raise ValueError(f"N must be at least 1, got {N}")
    return SmoothingParams(np.array([_smoothing_weight(fn, D_X, N) for fn in fns]), "fixed", int(N))


def adaptive_smoothing_schedule(fns: Sequence[Any], k: int, D_X: float) -> SmoothingParams:
    """Weights eta_i^k = ||C_i|| D_X / (sqrt(k) D_V_i); nonincreasing in k."""
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    return SmoothingParams(np.array([_smoothing_weight(fn, D_X, k) for fn in fns]), "adaptive", int(k))
