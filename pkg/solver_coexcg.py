#!/usr/bin/env python3
"""
Constraint-extrapolated conditional gradient (CoexCG) with a fixed horizon N.

Each iteration extrapolates the affine constraint values and the linearized
function-constraint values, takes a projected dual step, and picks a vertex
of X with one call to the linear minimization oracle. The primal iterate is
the running convex combination of those vertices.

The iteration engine here is shared with the dual-regularized and the
adaptive-smoothing variants in solver_coexdurcg.py.
"""

import itertools
import json
import logging
import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Dict, Hashable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from problem_model import ConstraintBundle, ProblemConstants, ProblemError, ProblemSpec, infeasibility
from smoothing import MaxFormFunction, SmoothingParams, fixed_smoothing_schedule


logger = logging.getLogger(__name__)

PRUNE_WEIGHT = 1e-15
CHECKPOINT_VERSION = 1
TRACE_COLUMNS = ("k", "objective", "infeasibility", "q_norm", "r_norm", "vertex_id", "millis")


class SolverAbort(RuntimeError):
    """Raised when an iterate stops being finite."""

    def __init__(self, message: str, record: Dict[str, Any]):
        super().__init__(message)
        self.record = record


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------

class StepParameters(NamedTuple):
    alpha: float
    lam: float
    tau: float
    gamma: float = 0.0


@dataclass(frozen=True)
class ScheduleCoexCG:
    """alpha_k = 2/(k+1), lambda_k = (k-1)/k, tau_k = N^{3/2}/k * D_X sqrt(9 M^2 + ||A||^2)."""
    N: int
    D_X: float
    M_bar: float
    A_norm: float

    @property
    def scale(self) -> float:
        return self.D_X * math.sqrt(9.0 * self.M_bar ** 2 + self.A_norm ** 2)

    def alpha(self, k: int) -> float:
        return 2.0 / (k + 1)

    def lam(self, k: int) -> float:
        return (k - 1) / k

    def tau(self, k: int) -> float:
        return self.N ** 1.5 / k * self.scale

    def Gamma(self, k: int) -> float:
        return 2.0 / (k * (k + 1))

    def params(self, k: int) -> StepParameters:
        return StepParameters(self.alpha(k), self.lam(k), self.tau(k))

    def check_conditions(self, k_max: Optional[int] = None, rtol: float = 1e-10) -> bool:
        """
        Check alpha_1 = 1, lambda_k alpha_k/Gamma_k = alpha_{k-1}/Gamma_{k-1} and
        alpha_k tau_k/Gamma_k <= alpha_{k-1} tau_{k-1}/Gamma_{k-1} in floating point,
        with Gamma_k built by its recursion.
        """
        k_max = k_max or self.N
        if self.alpha(1) != 1.0:
            return False
        gamma_prev = 1.0
        for k in range(2, k_max + 1):
            gamma_k = (1.0 - self.alpha(k)) * gamma_prev
            prev_ratio = self.alpha(k - 1) / gamma_prev
            if abs(self.lam(k) * self.alpha(k) / gamma_k - prev_ratio) > rtol * prev_ratio:
                return False
            lhs = self.alpha(k) * self.tau(k) / gamma_k
            rhs = self.alpha(k - 1) * self.tau(k - 1) / gamma_prev
            if lhs > rhs * (1.0 + rtol):
                return False
            gamma_prev = gamma_k
        return True


def schedule_coexcg(N: int, D_X: float, M_bar: float, A_norm: float) -> ScheduleCoexCG:
    """
    Fixed-horizon step-size schedule.

    Args:
        N: Number of iterations
        D_X: Diameter of X
        M_bar: Combined constraint gradient bound
        A_norm: Spectral norm of A

    Returns:
        ScheduleCoexCG
    """
    if N < 1:
        raise ProblemError(f"N must be at least 1, got {N}")
    if D_X <= 0:
        raise ProblemError(f"D_X must be positive, got {D_X}")
    return ScheduleCoexCG(int(N), float(D_X), float(M_bar), float(A_norm))


def schedule_conditions_exact(k_max: int) -> bool:
    """
    Check the CoexCG schedule conditions in rational arithmetic.

    tau_k is N^{3/2} D_X sqrt(9M^2 + ||A||^2) / k; the constant factor cancels from
    both sides, so only its 1/k profile is carried.
    """
    alpha = lambda k: Fraction(2, k + 1)
    if alpha(1) != 1:
        return False
    gamma_prev = Fraction(1)
    for k in range(2, k_max + 1):
        gamma_k = (1 - alpha(k)) * gamma_prev
        if gamma_k != Fraction(2, k * (k + 1)):
            return False
        if Fraction(k - 1, k) * alpha(k) / gamma_k != alpha(k - 1) / gamma_prev:
            return False
        if alpha(k) * Fraction(1, k) / gamma_k > alpha(k - 1) * Fraction(1, k - 1) / gamma_prev:
            return False
        gamma_prev = gamma_k
    return True


# ---------------------------------------------------------------------------
# Dual side
# ---------------------------------------------------------------------------

@dataclass
class DualState:
    """Multipliers q for Ax = b and r >= 0 for h(x) <= 0."""
    q: np.ndarray
    r: np.ndarray

    @classmethod
    def zeros(cls, m: int, d: int) -> "DualState":
        return cls(np.zeros(m), np.zeros(d))


def extrapolate_affine(g_cur: np.ndarray, g_prev: np.ndarray, lam: float) -> np.ndarray:
    """g_cur + lam (g_cur - g_prev)."""
    g_cur = np.asarray(g_cur, dtype=float)
    g_prev = np.asarray(g_prev, dtype=float)
    if g_cur.shape != g_prev.shape:
        raise ValueError(f"Shape mismatch {g_cur.shape} vs {g_prev.shape}")
    return g_cur + lam * (g_cur - g_prev)


def dual_step(dual: DualState, g_tilde: np.ndarray, h_tilde: np.ndarray, tau: float) -> DualState:
    """
    q + g_tilde / tau and max(r + h_tilde / tau, 0).

    Args:
        dual: Current multipliers
        g_tilde: Extrapolated affine values
        h_tilde: Extrapolated linearized constraint values
        tau: Dual step parameter

    Returns:
        New DualState
    """
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    return DualState(dual.q + g_tilde / tau, np.maximum(dual.r + h_tilde / tau, 0.0))


def _linearization_values(h_values: np.ndarray, h_grads: Sequence[Any], base: Any, eval_at: Any) -> np.ndarray:
    return np.array([value + grad.dot(eval_at) - grad.dot(base) for value, grad in zip(h_values, h_grads)],
                    dtype=float)


def linearize_h(bundle: ConstraintBundle, base: Any, eval_at: Any,
                etas: Optional[Sequence[float]] = None) -> np.ndarray:
    """
    First-order values h_i(base) + <grad h_i(base), eval_at - base>.

    Args:
        bundle: Constraints
        base: Linearization point
        eval_at: Evaluation point
        etas: Smoothing weights of the constraints, if any

    Returns:
        Vector of length d
    """
    values, grads = bundle.value_grads(base, etas)
    return _linearization_values(values, grads, base, eval_at)


def combine_coefficient(f_grad: Any, affine: Any, q: np.ndarray, h_grads: Sequence[Any], r: np.ndarray) -> Any:
    """grad f + A^T q + sum_i r_i grad h_i, leaving grad f untouched when there are no duals."""
    c = f_grad
    if affine.m:
        c = c + affine.adjoint(q)
    for r_i, grad in zip(r, h_grads):
        if r_i != 0.0:
            c = c + float(r_i) * grad
    return c


def primal_lmo_step(spec: ProblemSpec, x_prev: Any, dual: DualState, etas: Optional[Sequence[float]] = None):
    """
    Vertex minimizing the linearized Lagrangian at x_prev.

    Constant terms of the linearizations do not change the argmin and are dropped.
    """
    if np.any(dual.r < 0):
        raise ValueError("Constraint multipliers must be nonnegative")
    _, f_grad, _, h_grads = spec.oracle(x_prev, etas)
    return spec.feasible_set.lmo(combine_coefficient(f_grad, spec.affine, dual.q, h_grads, dual.r))


# ---------------------------------------------------------------------------
# Iterates and traces
# ---------------------------------------------------------------------------

class AtomDictionary:
    """Sparse convex-combination weights of the vertices visited so far."""

    def __init__(self, weights: Optional[Dict[Hashable, float]] = None):
        self.weights: Dict[Hashable, float] = dict(weights or {})

    def add(self, key: Hashable, alpha: float) -> None:
        scale = 1.0 - alpha
        self.weights = {k: w * scale for k, w in self.weights.items() if w * scale >= PRUNE_WEIGHT}
        self.weights[key] = self.weights.get(key, 0.0) + alpha

    def total(self) -> float:
        return float(sum(self.weights.values()))

    def __len__(self) -> int:
        return len(self.weights)

    def items(self):
        return self.weights.items()


@dataclass
class TraceRecord:
    k: int
    objective: float
    infeasibility: float
    q_norm: float
    r_norm: float
    vertex_id: str
    millis: float

    def as_row(self) -> List[Any]:
        return [getattr(self, column) for column in TRACE_COLUMNS]


@dataclass
class IterationTrace:
    """One record per executed iteration."""
    solver: str
    records: List[TraceRecord] = field(default_factory=list)

    def append(self, record: TraceRecord) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(record, name) for record in self.records])

    @property
    def final(self) -> Optional[TraceRecord]:
        return self.records[-1] if self.records else None

    def summary(self) -> Dict[str, Any]:
        final = self.final
        return {
            "solver": self.solver,
            "iterations": len(self),
            "objective": None if final is None else final.objective,
            "infeasibility": None if final is None else final.infeasibility,
            "wall_seconds": float(sum(record.millis for record in self.records)) / 1000.0,
        }


@dataclass
class SolverState:
    """Everything the next iteration needs; a checkpoint stores exactly this."""
    k: int
    x: Any
    p: Any
    p_prev: Any
    g_p: np.ndarray        # g(p_k)
    g_p_prev: np.ndarray   # g(p_{k-1})
    lh: np.ndarray         # l_h(x_{k-1}, p_k)
    lh_prev: np.ndarray    # l_h(x_{k-2}, p_{k-1})
    dual: DualState
    q0: np.ndarray
    r0: np.ndarray
    y: np.ndarray
    z: np.ndarray
    atoms: AtomDictionary


@dataclass
class SolverResult:
    x: Any
    y: np.ndarray
    z: np.ndarray
    dual: DualState
    trace: IterationTrace
    atoms: AtomDictionary
    state: Optional[SolverState] = None


def _is_finite(obj: Any) -> bool:
    if hasattr(obj, "is_finite"):
        return bool(obj.is_finite())
    return bool(np.all(np.isfinite(obj)))


def _check_finite(k: int, **quantities: Any) -> None:
    for name, value in quantities.items():
        if not _is_finite(value):
            record = {"k": k, "quantity": name}
            for other, item in quantities.items():
                if isinstance(item, np.ndarray) and item.size:
                    record[f"{other}_norm"] = float(np.linalg.norm(item))
            raise SolverAbort(f"Non-finite {name} at iteration {k}", record)


class ExtrapolatedConditionalGradient:
    """
    Shared loop of the extrapolated conditional-gradient family.

    Args:
        spec: Problem
        params: k -> StepParameters
        dual_update: (state, g_tilde, h_tilde, params) -> DualState
        smoothing: k -> smoothing weights (objective first), None for smooth problems
        name: Solver label in traces
    """

    def __init__(self, spec: ProblemSpec, params: Callable[[int], StepParameters],
                 dual_update: Callable[..., DualState],
                 smoothing: Optional[Callable[[int], np.ndarray]] = None, name: str = "coexcg"):
        self.spec = spec
        self.params = params
        self.dual_update = dual_update
        self.smoothing = smoothing
        self.name = name
        self.has_duals = spec.m > 0 or spec.d > 0
        if not self.has_duals:
            logger.debug("No constraints: dual machinery skipped")
        if spec.d and not math.isfinite(spec.constants.M_bar):
            raise ProblemError("Constraint gradient bounds M_h must be finite; supply grad_bound or override M_bar")

    def _etas(self, k: int) -> Optional[np.ndarray]:
        return None if self.smoothing is None else self.smoothing(k)

    def initial_state(self, start=None, q0: Optional[np.ndarray] = None, r0: Optional[np.ndarray] = None) -> SolverState:
        """p_0 = p_{-1} = x_0 = a vertex of X (lmo(0) by default)."""
        spec = self.spec
        vertex = spec.feasible_set.start() if start is None else start
        x0 = vertex.point
        q0 = np.zeros(spec.m) if q0 is None else np.asarray(q0, dtype=float)
        r0 = np.zeros(spec.d) if r0 is None else np.asarray(r0, dtype=float)
        if q0.shape != (spec.m,) or r0.shape != (spec.d,):
            raise ProblemError(f"Dual starts must have shapes ({spec.m},) and ({spec.d},)")
        if np.any(r0 < 0):
            raise ProblemError("r0 must be nonnegative")

        g0 = spec.affine.apply(x0)
        etas = self._etas(1)
        h0, _ = spec.constraints.value_grads(x0, None if etas is None else etas[1:])
        atoms = AtomDictionary()
        atoms.add(vertex.key, 1.0)
        return SolverState(
            k=0, x=x0, p=x0, p_prev=x0,
            g_p=g0, g_p_prev=g0.copy(), lh=h0, lh_prev=h0.copy(),
            dual=DualState(q0.copy(), r0.copy()), q0=q0, r0=r0,
            y=q0.copy(), z=r0.copy(), atoms=atoms,
        )

    def step(self, state: SolverState) -> TraceRecord:
        """Advance the state by one iteration in place and return its trace record."""
        started = time.perf_counter()
        spec = self.spec
        k = state.k + 1
        par = self.params(k)
        etas = self._etas(k)

        dual = state.dual
        if self.has_duals:
            g_tilde = extrapolate_affine(state.g_p, state.g_p_prev, par.lam)
            h_tilde = extrapolate_affine(state.lh, state.lh_prev, par.lam)
            dual = self.dual_update(state, g_tilde, h_tilde, par)

        # one oracle call at x_{k-1}: gradients feed both the LMO and the next linearization
        f_value, f_grad, h_values, h_grads = spec.oracle(state.x, etas)
        c = combine_coefficient(f_grad, spec.affine, dual.q, h_grads, dual.r)
        _check_finite(k, q=dual.q, r=dual.r, coefficient=c)

        vertex = spec.feasible_set.lmo(c)
        p = vertex.point
        lh_new = _linearization_values(h_values, h_grads, state.x, p)
        g_new = spec.affine.apply(p)

        alpha = par.alpha
        x_new = (1.0 - alpha) * state.x + alpha * p

        state.k = k
        state.p_prev, state.p = state.p, p
        state.g_p_prev, state.g_p = state.g_p, g_new
        state.lh_prev, state.lh = state.lh, lh_new
        state.dual = dual
        state.y = (1.0 - alpha) * state.y + alpha * dual.q
        state.z = (1.0 - alpha) * state.z + alpha * dual.r
        state.x = x_new
        state.atoms.add(vertex.key, alpha)

        objective = spec.objective_value(x_new)
        violation = infeasibility(spec, x_new)
        _check_finite(k, objective=objective, infeasibility=violation, linearization=lh_new, g=g_new)
        return TraceRecord(
            k=k,
            objective=objective,
            infeasibility=violation,
            q_norm=float(np.linalg.norm(dual.q)),
            r_norm=float(np.linalg.norm(dual.r)),
            vertex_id=vertex.label or str(vertex.key),
            millis=(time.perf_counter() - started) * 1000.0,
        )

    def run(self, state: SolverState, iterations: Optional[int],
            callback: Optional[Callable[[SolverState, TraceRecord], bool]] = None,
            trace: Optional[IterationTrace] = None) -> SolverResult:
        """
        Run up to `iterations` steps (unbounded when None); a callback returning True stops early.
        """
        if iterations is None and callback is None:
            raise ProblemError("An unbounded run needs a stopping callback")
        trace = trace if trace is not None else IterationTrace(self.name)
        steps = itertools.count() if iterations is None else range(iterations)
        for _ in steps:
            record = self.step(state)
            trace.append(record)
            logger.debug("%s k=%d f=%.6g infeas=%.3g", self.name, record.k, record.objective, record.infeasibility)
            if callback is not None and callback(state, record):
                break
        return SolverResult(x=state.x, y=state.y, z=state.z, dual=state.dual,
                            trace=trace, atoms=state.atoms, state=state)


def _plain_dual_update(state: SolverState, g_tilde: np.ndarray, h_tilde: np.ndarray,
                       par: StepParameters) -> DualState:
    return dual_step(state.dual, g_tilde, h_tilde, par.tau)


def run_coexcg(spec: ProblemSpec, N: int, start=None, q0: Optional[np.ndarray] = None,
               r0: Optional[np.ndarray] = None, smoothing: Optional[SmoothingParams] = None,
               callback: Optional[Callable[[SolverState, TraceRecord], bool]] = None) -> SolverResult:
    """
    Run CoexCG for exactly N iterations.

    Nonsmooth max-form components are smoothed with the fixed schedule for N
    unless explicit weights are given.

    Args:
        spec: Problem
        N: Number of iterations (the schedule depends on it)
        start: Start vertex, lmo(0) by default
        q0: Initial affine multipliers (zeros by default)
        r0: Initial constraint multipliers (zeros by default)
        smoothing: Fixed smoothing weights, objective first
        callback: Called after each iteration with (state, record)

    Returns:
        SolverResult with x_N, the dual outputs (y_N, z_N) and the trace
    """
    constants = spec.constants
    schedule = schedule_coexcg(N, constants.D_X, constants.M_bar, constants.A_norm)
    if smoothing is None and not spec.is_smooth:
        smoothing = fixed_smoothing_schedule(spec.components, N, constants.D_X)
        logger.info("Fixed smoothing weights for N=%d: %s", N, np.array2string(smoothing.eta, precision=4))
    weights = None if smoothing is None else (lambda k: smoothing.eta)

    engine = ExtrapolatedConditionalGradient(spec, schedule.params, _plain_dual_update, weights, name="coexcg")
    state = engine.initial_state(start, q0, r0)

    def observe(current: SolverState, record: TraceRecord) -> bool:
        # the schedule is tied to N, so callbacks observe but never stop the run
        if callback is not None:
            callback(current, record)
        return False

    return engine.run(state, N, callback=observe)


def run_classic_fw(spec: ProblemSpec, N: int, start=None) -> SolverResult:
    """
    Classical conditional gradient on the objective alone, alpha_k = 2/(k+1).

    Constraints other than x in X are ignored (reported infeasibility still counts them).
    """
    if N < 1:
        raise ProblemError(f"N must be at least 1, got {N}")
    if spec.m or spec.d:
        logger.warning("classic-fw ignores the %d affine and %d function constraints", spec.m, spec.d)
    eta = 0.0
    if not getattr(spec.objective, "is_smooth", True):
        eta = float(fixed_smoothing_schedule([spec.objective], N, spec.constants.D_X).eta[0])

    vertex = spec.feasible_set.start() if start is None else start
    x = vertex.point
    atoms = AtomDictionary({vertex.key: 1.0})
    trace = IterationTrace("classic-fw")
    for k in range(1, N + 1):
        started = time.perf_counter()
        _, grad = spec.objective.value_grad(x, eta)
        vertex = spec.feasible_set.lmo(grad)
        alpha = 2.0 / (k + 1)
        x = (1.0 - alpha) * x + alpha * vertex.point
        atoms.add(vertex.key, alpha)
        trace.append(TraceRecord(k, spec.objective_value(x), infeasibility(spec, x), 0.0, 0.0,
                                 vertex.label or str(vertex.key), (time.perf_counter() - started) * 1000.0))

    empty = DualState.zeros(spec.m, spec.d)
    return SolverResult(x=x, y=empty.q, z=empty.r, dual=empty, trace=trace, atoms=atoms)


# ---------------------------------------------------------------------------
# Certificates
# ---------------------------------------------------------------------------

def start_norm_sq(q0: Optional[np.ndarray], r0: Optional[np.ndarray]) -> float:
    total = 0.0
    for v in (q0, r0):
        if v is not None and np.size(v):
            total += float(np.dot(v, v))
    return total


def norm_or_zero(v: Optional[np.ndarray]) -> float:
    return 0.0 if v is None or np.size(v) == 0 else float(np.linalg.norm(v))


def coexcg_bounds(constants: ProblemConstants, N: int, y_star: Optional[np.ndarray] = None,
                  z_star: Optional[np.ndarray] = None, q0: Optional[np.ndarray] = None,
                  r0: Optional[np.ndarray] = None) -> Tuple[float, float]:
    """
    Right-hand sides of the objective-gap and infeasibility guarantees of CoexCG
    on smooth problems.

    Returns:
        (objective bound, infeasibility bound)
    """
    D = constants.D_X
    scale = D * math.sqrt(9.0 * constants.M_bar ** 2 + constants.A_norm ** 2)
    start = start_norm_sq(q0, r0)
    dual_sq = norm_or_zero(y_star) ** 2 + norm_or_zero(z_star) ** 2
    objective = 2.0 * constants.L_f * D ** 2 / (N + 1) + scale / math.sqrt(N) * (start + 1.0)
    feasibility = (2.0 * (constants.L_f + (norm_or_zero(z_star) + 1.0) * constants.L_bar) * D ** 2 / (N + 1)
                   + 2.0 * scale / math.sqrt(N) * (2.0 * dual_sq + start + 5.0))
    return objective, feasibility


def nonsmooth_terms(spec: ProblemSpec) -> Tuple[float, float, float, float]:
    """(||B|| D_U of the objective, L_f if smooth, sqrt(sum (D_V ||C||)^2), L_bar of smooth constraints)."""
    objective = spec.objective
    if isinstance(objective, MaxFormFunction) and objective.mu == 0:
        objective_term, L_f = objective.norm_C * objective.prox_diameter, 0.0
    else:
        objective_term, L_f = 0.0, float(objective.lipschitz_grad)
    spread, smooth_L = 0.0, []
    for item in spec.constraints.items:
        if isinstance(item, MaxFormFunction) and item.mu == 0:
            spread += (item.prox_diameter * item.norm_C) ** 2
        else:
            smooth_L.append(item.lipschitz_grad)
    return objective_term, L_f, math.sqrt(spread), float(np.linalg.norm(smooth_L)) if smooth_L else 0.0


def coexcg_nonsmooth_bounds(spec: ProblemSpec, N: int, y_star: Optional[np.ndarray] = None,
                            z_star: Optional[np.ndarray] = None, q0: Optional[np.ndarray] = None,
                            r0: Optional[np.ndarray] = None) -> Tuple[float, float]:
    """
    Guarantees of CoexCG with the fixed smoothing weights for N.

    A max-form objective contributes 3 D_X D_U ||B|| / sqrt(N); a smooth one
    contributes 2 L_f D_X^2 / (N+1). Smooth constraints enter through their
    Lipschitz constants as in the smooth guarantee.

    Returns:
        (objective bound, infeasibility bound)
    """
    constants = spec.constants
    D = constants.D_X
    root_N = math.sqrt(N)
    scale = D * math.sqrt(9.0 * constants.M_bar ** 2 + constants.A_norm ** 2)
    objective_term, L_f, spread, smooth_L = nonsmooth_terms(spec)
    f_term = 3.0 * D * objective_term / root_N + 2.0 * L_f * D ** 2 / (N + 1)
    start = start_norm_sq(q0, r0)
    dual_sq = norm_or_zero(y_star) ** 2 + norm_or_zero(z_star) ** 2
    z_scale = norm_or_zero(z_star) + 1.0

    objective = f_term + scale / root_N * (start + 1.0)
    feasibility = (f_term + 2.0 * z_scale * D * spread / root_N
                   + 2.0 * z_scale * smooth_L * D ** 2 / (N + 1)
                   + 2.0 * scale / root_N * (2.0 * dual_sq + start + 5.0))
    return objective, feasibility


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _encode_key(key: Any) -> Any:
    if isinstance(key, tuple):
        return [_encode_key(item) for item in key]
    return key


def _decode_key(doc: Any) -> Any:
    if isinstance(doc, list):
        return tuple(_decode_key(item) for item in doc)
    return doc


def _encode_point(x: Any) -> Dict[str, Any]:
    if isinstance(x, np.ndarray):
        return {"type": "array", "data": x.tolist()}
    if hasattr(x, "to_dict"):
        return {"type": type(x).__name__, "data": x.to_dict()}
    raise TypeError(f"Cannot checkpoint points of type {type(x).__name__}")


def _decode_point(doc: Dict[str, Any], point_decoder: Optional[Callable[[Dict[str, Any]], Any]]) -> Any:
    if doc["type"] == "array":
        return np.asarray(doc["data"], dtype=float)
    if point_decoder is None:
        raise ProblemError(f"Checkpoint holds '{doc['type']}' points; a point decoder is required")
    return point_decoder(doc["data"])


def save_checkpoint(path: Path, state: SolverState, solver: str) -> bool:
    """
    Write a versioned JSON checkpoint of a solver state.

    Returns:
        True if successful, False otherwise
    """
    try:
        doc = {
            "version": CHECKPOINT_VERSION,
            "solver": solver,
            "k": state.k,
            "x": _encode_point(state.x),
            "p": _encode_point(state.p),
            "p_prev": _encode_point(state.p_prev),
            "g_p": state.g_p.tolist(),
            "g_p_prev": state.g_p_prev.tolist(),
            "lh": state.lh.tolist(),
            "lh_prev": state.lh_prev.tolist(),
            "q": state.dual.q.tolist(),
            "r": state.dual.r.tolist(),
            "q0": state.q0.tolist(),
            "r0": state.r0.tolist(),
            "y": state.y.tolist(),
            "z": state.z.tolist(),
            "atoms": [[_encode_key(key), weight] for key, weight in state.atoms.items()],
            # the solvers draw no random numbers
            "rng": None,
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(doc, f)
        return True
    except Exception as e:
        print(f"Error writing checkpoint {path}: {str(e)}")
        return False


def load_checkpoint(path: Path, point_decoder: Optional[Callable[[Dict[str, Any]], Any]] = None) -> Tuple[str, SolverState]:
    """
    Read a checkpoint written by save_checkpoint.

    Returns:
        Tuple of (solver name, SolverState)
    """
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ProblemError(f"Unsupported checkpoint version {doc.get('version')}")

    def vector(name):
        return np.asarray(doc[name], dtype=float)

    state = SolverState(
        k=int(doc["k"]),
        x=_decode_point(doc["x"], point_decoder),
        p=_decode_point(doc["p"], point_decoder),
        p_prev=_decode_point(doc["p_prev"], point_decoder),
        g_p=vector("g_p"), g_p_prev=vector("g_p_prev"),
        lh=vector("lh"), lh_prev=vector("lh_prev"),
        dual=DualState(vector("q"), vector("r")),
        q0=vector("q0"), r0=vector("r0"),
        y=vector("y"), z=vector("z"),
        atoms=AtomDictionary({_decode_key(key): float(weight) for key, weight in doc["atoms"]}),
    )
    return doc["solver"], state
