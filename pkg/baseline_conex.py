#!/usr/bin/env python3
"""
Projection-based constraint-extrapolation baseline (ConEx) for small dense problems.

Same dual steps as CoexCG, but the primal point is a projected gradient step
from the previous search point instead of a vertex returned by the LMO. It
needs the full gradient and a Euclidean projection onto X, so it refuses
problems above a dimension cap.
"""

import logging
import math
import time
from typing import Any, Callable, Dict, Optional

import numpy as np

from problem_model import ProblemError, ProblemSpec, infeasibility
from smoothing import MaxFormFunction, fixed_smoothing_schedule, smooth_lipschitz
from solver_coexcg import (
    AtomDictionary,
    DualState,
    IterationTrace,
    SolverResult,
    TraceRecord,
    combine_coefficient,
    dual_step,
    extrapolate_affine,
)


logger = logging.getLogger(__name__)

DEFAULT_DIMENSION_CAP = 10 ** 6


class DimensionCapExceeded(RuntimeError):
    """Raised when a problem is too large for full-gradient projection steps."""

    def __init__(self, dim: int, cap: int):
        super().__init__(f"Problem dimension {dim} exceeds the projection baseline cap {cap}")
        self.dim = dim
        self.cap = cap


def project_simplex(v: np.ndarray) -> np.ndarray:
    """
    Euclidean projection onto the standard simplex by the sort-and-threshold rule.

    Args:
        v: Point to project

    Returns:
        Closest point of the simplex
    """
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    cumulative = np.cumsum(u) - 1.0
    index = np.arange(1, v.size + 1)
    rho = int(np.nonzero(u - cumulative / index > 0)[0][-1])
    theta = cumulative[rho] / (rho + 1)
    return np.maximum(v - theta, 0.0)


class ProjectionSet:
    """Euclidean projection onto a simplex, a box or a product of those."""

    def __init__(self, descriptor: Dict[str, Any]):
        kind = descriptor.get("kind")
        if kind not in ("simplex", "box", "product"):
            raise ProblemError(f"No projection available for set family '{kind}'")
        self.kind = kind
        if kind == "simplex":
            self.dim = int(descriptor["dim"])
        elif kind == "box":
            self.lo = np.asarray(descriptor["lo"], dtype=float)
            self.hi = np.asarray(descriptor["hi"], dtype=float)
            self.dim = self.lo.size
        else:
            self.parts = [ProjectionSet(part) for part in descriptor["parts"]]
            self.dim = sum(part.dim for part in self.parts)

    @classmethod
    def of(cls, feasible_set: Any) -> "ProjectionSet":
        descriptor = getattr(feasible_set, "descriptor", None)
        if descriptor is None:
            raise ProblemError("The projection baseline needs a closed-form feasible set")
        return cls(descriptor)

    def project(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape != (self.dim,):
            raise ProblemError(f"Point has shape {v.shape}, expected ({self.dim},)")
        if self.kind == "simplex":
            return project_simplex(v)
        if self.kind == "box":
            return np.clip(v, self.lo, self.hi)
        pieces, offset = [], 0
        for part in self.parts:
            pieces.append(part.project(v[offset:offset + part.dim]))
            offset += part.dim
        return np.concatenate(pieces)


def project(projection_set: ProjectionSet, v: np.ndarray) -> np.ndarray:
    """argmin over X of ||x - v||_2."""
    return projection_set.project(v)


def default_eta_rule(spec: ProblemSpec, N: int, etas: Optional[np.ndarray] = None) -> Callable[[int], float]:
    """
    Constant primal weight eta_k = L_f + (||A|| + M_bar) sqrt(N).

    A nonsmooth objective uses the Lipschitz constant of its smoothed version.
    """
    objective = spec.objective
    L_f = objective.lipschitz_grad
    if isinstance(objective, MaxFormFunction) and objective.mu == 0:
        L_f = smooth_lipschitz(objective, float(etas[0]))
    constants = spec.constants
    value = float(L_f) + (constants.A_norm + constants.M_bar) * math.sqrt(N)
    return lambda k: value


def run_conex(spec: ProblemSpec, N: int, eta_rule: Optional[Callable[[int], float]] = None,
              tau_rule: Optional[Callable[[int], float]] = None,
              dimension_cap: int = DEFAULT_DIMENSION_CAP) -> SolverResult:
    """
    Run N projected primal-dual iterations with linearizations anchored at p_{k-1}.

    Args:
        spec: Problem with a closed-form feasible set
        N: Number of iterations
        eta_rule: k -> primal proximal weight eta_k
        tau_rule: k -> dual step parameter tau_k, (||A|| + M_bar) sqrt(N) by default
        dimension_cap: Largest dimension accepted

    Returns:
        SolverResult whose x is the 2/(k+1)-weighted average of the search points
    """
    if N < 1:
        raise ProblemError(f"N must be at least 1, got {N}")
    n = spec.feasible_set.dim
    if n is None:
        raise ProblemError("The projection baseline needs an explicit coordinate space")
    if n > dimension_cap:
        raise DimensionCapExceeded(n, dimension_cap)
    projection = ProjectionSet.of(spec.feasible_set)

    etas = None
    if not spec.is_smooth:
        etas = fixed_smoothing_schedule(spec.components, N, spec.constants.D_X).eta
    eta_rule = eta_rule or default_eta_rule(spec, N, etas)
    dual_scale = (spec.constants.A_norm + spec.constants.M_bar) * math.sqrt(N)
    tau_rule = tau_rule or (lambda k: dual_scale)
    has_duals = spec.m > 0 or spec.d > 0

    start = spec.feasible_set.start()
    p = p_prev_point = start.point
    x = p.copy()
    g_p = spec.affine.apply(p)
    g_prev = g_p.copy()
    h0, _ = spec.constraints.value_grads(p, None if etas is None else etas[1:])
    lh, lh_prev = h0, h0.copy()
    dual = DualState.zeros(spec.m, spec.d)
    y, z = dual.q.copy(), dual.r.copy()
    trace = IterationTrace("conex")

    for k in range(1, N + 1):
        started = time.perf_counter()
        if has_duals:
            lam = 0.0 if k == 1 else 1.0
            dual = dual_step(dual, extrapolate_affine(g_p, g_prev, lam),
                             extrapolate_affine(lh, lh_prev, lam), tau_rule(k))

        _, f_grad, h_values, h_grads = spec.oracle(p, etas)
        c = combine_coefficient(f_grad, spec.affine, dual.q, h_grads, dual.r)
        p_prev_point, p = p, projection.project(p - c / eta_rule(k))

        lh_prev, lh = lh, np.array([value + grad.dot(p) - grad.dot(p_prev_point)
                                    for value, grad in zip(h_values, h_grads)], dtype=float)
        g_prev, g_p = g_p, spec.affine.apply(p)

        alpha = 2.0 / (k + 1)
        x = (1.0 - alpha) * x + alpha * p
        y = (1.0 - alpha) * y + alpha * dual.q
        z = (1.0 - alpha) * z + alpha * dual.r
        trace.append(TraceRecord(
            k=k,
            objective=spec.objective_value(x),
            infeasibility=infeasibility(spec, x),
            q_norm=float(np.linalg.norm(dual.q)),
            r_norm=float(np.linalg.norm(dual.r)),
            vertex_id="proj",
            millis=(time.perf_counter() - started) * 1000.0,
        ))

    return SolverResult(x=x, y=y, z=z, dual=dual, trace=trace, atoms=AtomDictionary())
