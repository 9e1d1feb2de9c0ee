#!/usr/bin/env python3
"""
Dual-regularized conditional gradient (CoexDurCG) and its adaptive-smoothing
variant for structured nonsmooth problems.

The dual step is pulled back towards the anchors (q0, r0) with weight gamma_k,
which makes every parameter a function of k alone: a run can be stopped at any
iteration, checkpointed and resumed.
"""

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from problem_model import ProblemConstants, ProblemError, ProblemSpec
from smoothing import MaxFormFunction, adaptive_smoothing_schedule
from solver_coexcg import (
    DualState,
    ExtrapolatedConditionalGradient,
    IterationTrace,
    SolverResult,
    SolverState,
    StepParameters,
    TraceRecord,
    nonsmooth_terms,
    norm_or_zero,
    start_norm_sq,
    dual_step,
)


logger = logging.getLogger(__name__)

SMOOTH_FACTOR = 9.0
NONSMOOTH_FACTOR = 12.0

StopCallback = Callable[[SolverState, TraceRecord], bool]


@dataclass(frozen=True)
class ScheduleCoexDurCG:
    """alpha_k = 2/(k+1), lambda_k = (k-1)/k, tau_k = beta sqrt(k), gamma_k = beta/k [(k+1)^{3/2} - k^{3/2}]."""
    beta: float

    @classmethod
    def from_constants(cls, D_X: float, M_bar: float, A_norm: float, nonsmooth: bool = False) -> "ScheduleCoexDurCG":
        factor = NONSMOOTH_FACTOR if nonsmooth else SMOOTH_FACTOR
        return cls(D_X * math.sqrt(factor * M_bar ** 2 + A_norm ** 2))

    def alpha(self, k: int) -> float:
        return 2.0 / (k + 1)

    def lam(self, k: int) -> float:
        return (k - 1) / k

    def tau(self, k: int) -> float:
        return self.beta * math.sqrt(k)

    def gamma(self, k: int) -> float:
        return self.beta / k * ((k + 1) ** 1.5 - k ** 1.5)

    def params(self, k: int) -> StepParameters:
        if k < 1:
            raise ValueError(f"k must be at least 1, got {k}")
        return StepParameters(self.alpha(k), self.lam(k), self.tau(k), self.gamma(k))

    def check_conditions(self, k_max: int, rtol: float = 1e-10) -> bool:
        """
        Floating-point check of alpha_k tau_k / Gamma_k <= alpha_{k-1} (tau_{k-1} + gamma_{k-1}) / Gamma_{k-1}
        together with the lambda relation; both sides equal beta k sqrt(k) for this schedule.
        """
        gamma_prev = 1.0
        for k in range(2, k_max + 1):
            gamma_k = (1.0 - self.alpha(k)) * gamma_prev
            prev_ratio = self.alpha(k - 1) / gamma_prev
            if abs(self.lam(k) * self.alpha(k) / gamma_k - prev_ratio) > rtol * prev_ratio:
                return False
            lhs = self.alpha(k) * self.tau(k) / gamma_k
            rhs = prev_ratio * (self.tau(k - 1) + self.gamma(k - 1))
            if lhs > rhs * (1.0 + rtol) or abs(lhs - self.beta * k * math.sqrt(k)) > rtol * lhs:
                return False
            gamma_prev = gamma_k
        return True


def schedule_coexdurcg(k: int, D_X: float, M_bar: float, A_norm: float, nonsmooth: bool = False) -> StepParameters:
    """
    Parameters of iteration k; no horizon is involved.

    Args:
        k: Iteration index (k >= 1)
        D_X: Diameter of X
        M_bar: Combined constraint gradient bound
        A_norm: Spectral norm of A
        nonsmooth: Use the constant 12 of the adaptive-smoothing variant instead of 9

    Returns:
        StepParameters (alpha, lambda, tau, gamma)
    """
    return ScheduleCoexDurCG.from_constants(D_X, M_bar, A_norm, nonsmooth).params(k)


def _add_surd(terms: Dict[int, Fraction], radicand: int, coefficient: Fraction) -> None:
    terms[radicand] = terms.get(radicand, Fraction(0)) + coefficient
    if terms[radicand] == 0:
        del terms[radicand]


def schedule_conditions_exact(k_max: int) -> bool:
    """
    Check the CoexDurCG conditions exactly for k <= k_max with beta = 1.

    Both sides are kept as rational combinations of sqrt(k) and sqrt(k-1):
    alpha_k tau_k / Gamma_k = k sqrt(k) and
    alpha_{k-1}(tau_{k-1} + gamma_{k-1}) / Gamma_{k-1}
        = (k-1) sqrt(k-1) + [k sqrt(k) - (k-1) sqrt(k-1)].
    """
    gamma_prev = Fraction(1)
    for k in range(2, k_max + 1):
        alpha_k = Fraction(2, k + 1)
        gamma_k = (1 - alpha_k) * gamma_prev
        ratio_k = alpha_k / gamma_k
        ratio_prev = Fraction(2, k) / gamma_prev
        if Fraction(k - 1, k) * ratio_k != ratio_prev:
            return False

        lhs: Dict[int, Fraction] = {}
        _add_surd(lhs, k, ratio_k)
        rhs: Dict[int, Fraction] = {}
        _add_surd(rhs, k - 1, ratio_prev)                       # tau_{k-1} = sqrt(k-1)
        _add_surd(rhs, k, ratio_prev * Fraction(k, k - 1))      # gamma_{k-1} = [k sqrt(k) - (k-1) sqrt(k-1)]/(k-1)
        _add_surd(rhs, k - 1, -ratio_prev)
        if lhs != rhs:
            return False
        gamma_prev = gamma_k
    return True


def dual_step_regularized(dual: DualState, q0: np.ndarray, r0: np.ndarray, g_tilde: np.ndarray,
                          h_tilde: np.ndarray, tau: float, gamma: float) -> DualState:
    """
    (tau q + gamma q0 + g_tilde)/(tau + gamma) and max((tau r + gamma r0 + h_tilde)/(tau + gamma), 0).

    gamma = 0 returns exactly dual_step(dual, g_tilde, h_tilde, tau).
    """
    total = tau + gamma
    if not total > 0:
        raise ValueError(f"tau + gamma must be positive, got {total}")
    if gamma == 0.0:
        return dual_step(dual, g_tilde, h_tilde, tau)
    q = (tau * dual.q + gamma * q0 + g_tilde) / total
    r = np.maximum((tau * dual.r + gamma * r0 + h_tilde) / total, 0.0)
    return DualState(q, r)


def _regularized_dual_update(state: SolverState, g_tilde: np.ndarray, h_tilde: np.ndarray,
                             par: StepParameters) -> DualState:
    return dual_step_regularized(state.dual, state.q0, state.r0, g_tilde, h_tilde, par.tau, par.gamma)


def _has_nonsmooth_parts(spec: ProblemSpec) -> bool:
    return any(isinstance(fn, MaxFormFunction) and fn.mu == 0 for fn in spec.components)


def _run_anytime(engine: ExtrapolatedConditionalGradient, max_iter: Optional[int],
                 callback: Optional[StopCallback], state: Optional[SolverState], start,
                 q0: Optional[np.ndarray], r0: Optional[np.ndarray],
                 trace: Optional[IterationTrace]) -> SolverResult:
    if max_iter is None and callback is None:
        raise ProblemError("Give max_iter, a stopping callback or both")
    if state is None:
        state = engine.initial_state(start, q0, r0)
    elif state.k:
        logger.info("Resuming %s at k=%d", engine.name, state.k)
    remaining = None
    if max_iter is not None:
        if max_iter < state.k:
            raise ProblemError(f"max_iter={max_iter} is below the resumed iteration {state.k}")
        remaining = max_iter - state.k
    return engine.run(state, remaining, callback=callback, trace=trace)


def run_coexdurcg(spec: ProblemSpec, max_iter: Optional[int] = None, callback: Optional[StopCallback] = None,
                  state: Optional[SolverState] = None, start=None, q0: Optional[np.ndarray] = None,
                  r0: Optional[np.ndarray] = None, trace: Optional[IterationTrace] = None) -> SolverResult:
    """
    Run CoexDurCG until iteration max_iter or until callback(state, record) returns True.

    Args:
        spec: Smooth problem
        max_iter: Final iteration index; a resumed state continues up to it
        callback: Stopping rule evaluated after every iteration
        state: State to resume from (load_checkpoint output)
        start: Start vertex, lmo(0) by default
        q0: Dual anchor and start for Ax = b
        r0: Dual anchor and start for h(x) <= 0
        trace: Trace to append to when resuming

    Returns:
        SolverResult
    """
    if _has_nonsmooth_parts(spec):
        raise ProblemError("Problem has nonsmooth max-form parts; use run_adaptive_nonsmooth")
    constants = spec.constants
    schedule = ScheduleCoexDurCG.from_constants(constants.D_X, constants.M_bar, constants.A_norm)
    if schedule.beta == 0 and (spec.m or spec.d):
        raise ProblemError("beta = 0 with constraints present: M_bar and ||A|| cannot both vanish")
    engine = ExtrapolatedConditionalGradient(spec, schedule.params, _regularized_dual_update, name="coexdurcg")
    return _run_anytime(engine, max_iter, callback, state, start, q0, r0, trace)


def run_adaptive_nonsmooth(spec: ProblemSpec, max_iter: Optional[int] = None,
                           callback: Optional[StopCallback] = None, state: Optional[SolverState] = None,
                           start=None, q0: Optional[np.ndarray] = None, r0: Optional[np.ndarray] = None,
                           trace: Optional[IterationTrace] = None) -> SolverResult:
    """
    CoexDurCG with smoothing weights eta^k = ||C|| D_X / (sqrt(k) D_V) that shrink as k grows.

    Iteration k evaluates f^k and h^k (weights eta^k) at x_{k-1}; the extrapolation
    mixes the cached linearizations of h^{k-1} around x_{k-2} and of h^{k-2}
    around x_{k-3}. With every part smooth the weights vanish and the run is the
    same as run_coexdurcg.
    """
    constants = spec.constants
    nonsmooth = _has_nonsmooth_parts(spec)
    schedule = ScheduleCoexDurCG.from_constants(constants.D_X, constants.M_bar, constants.A_norm, nonsmooth)
    if schedule.beta == 0 and (spec.m or spec.d):
        raise ProblemError("beta = 0 with constraints present: M_bar and ||A|| cannot both vanish")

    smoothing = None
    if nonsmooth:
        components = spec.components

        def smoothing(k: int) -> np.ndarray:
            return adaptive_smoothing_schedule(components, k, constants.D_X).eta

    engine = ExtrapolatedConditionalGradient(spec, schedule.params, _regularized_dual_update,
                                             smoothing=smoothing, name="adaptive")
    return _run_anytime(engine, max_iter, callback, state, start, q0, r0, trace)


# ---------------------------------------------------------------------------
# Certificates
# ---------------------------------------------------------------------------

def coexdurcg_bounds(constants: ProblemConstants, N: int, y_star: Optional[np.ndarray] = None,
                     z_star: Optional[np.ndarray] = None, q0: Optional[np.ndarray] = None,
                     r0: Optional[np.ndarray] = None) -> Tuple[float, float]:
    """
    Objective-gap and infeasibility guarantees of CoexDurCG after N iterations on smooth problems.

    Returns:
        (objective bound, infeasibility bound)
    """
    D = constants.D_X
    beta = D * math.sqrt(SMOOTH_FACTOR * constants.M_bar ** 2 + constants.A_norm ** 2)
    start = start_norm_sq(q0, r0)
    root_N = math.sqrt(N)
    objective = 2.0 * constants.L_f * D ** 2 / (N + 1) + beta / root_N * (3.0 * start + 1.0)
    dual_term = (norm_or_zero(y_star) + 1.0) ** 2 + (norm_or_zero(z_star) + 1.0) ** 2 + start
    feasibility = (2.0 * (constants.L_f + (norm_or_zero(z_star) + 1.0) * constants.L_bar) * D ** 2 / (N + 1)
                   + beta / root_N * (3.0 * dual_term + 1.0))
    return objective, feasibility


def adaptive_bounds(spec: ProblemSpec, N: int, y_star: Optional[np.ndarray] = None,
                    z_star: Optional[np.ndarray] = None, q0: Optional[np.ndarray] = None,
                    r0: Optional[np.ndarray] = None) -> Tuple[float, float]:
    """
    Guarantees of the adaptive-smoothing run after N iterations.

    A smooth objective replaces the ||B|| D_U terms by 2 L_f D_X^2 / (N+1); smooth
    constraints add 2 (||z*|| + 1) L_bar D_X^2 / (N+1) to the infeasibility bound.

    Returns:
        (objective bound, infeasibility bound)
    """
    constants = spec.constants
    D = constants.D_X
    root_N = math.sqrt(N)
    beta = D * math.sqrt(NONSMOOTH_FACTOR * constants.M_bar ** 2 + constants.A_norm ** 2)
    objective_term, L_f, spread, smooth_L = nonsmooth_terms(spec)
    smooth_f = 2.0 * L_f * D ** 2 / (N + 1)
    tail = 0.0 if beta == 0 else NONSMOOTH_FACTOR * spread ** 2 * D / (beta * (N + 1) * root_N)
    start = start_norm_sq(q0, r0)
    z_scale = norm_or_zero(z_star) + 1.0

    objective = (11.0 * objective_term * D / (3.0 * root_N) + smooth_f
                 + beta / root_N * (2.0 * start + 2.0) + tail)
    dual_term = (norm_or_zero(y_star) + 1.0) ** 2 + z_scale ** 2 + start
    feasibility = (7.0 * (objective_term + z_scale * spread) * D / (3.0 * root_N) + smooth_f
                   + 2.0 * z_scale * smooth_L * D ** 2 / (N + 1) + tail
                   + 2.0 * beta / root_N * (4.0 * dual_term + 2.0))
    return objective, feasibility
