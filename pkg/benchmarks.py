#!/usr/bin/env python3
"""
Built-in benchmark problems and independent reference solutions.

Reference solutions come from cvxpy, never from the conditional-gradient
solvers they are used to check.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import cvxpy as cp
import numpy as np

from imrt import Aperture, dense_problem, generate_problem, open_field_apertures, random_apertures
from imrt_instance import ClinicalCriterion, GeneratorConfig, ImrtInstance, generate_instance
from lmo import ClosedFormSet
from problem_model import (
    AffineConstraint,
    ConstraintBundle,
    ProblemError,
    ProblemSpec,
    descriptor_dim,
    gradient_bound_on_vertices,
    quadratic_function,
)
from smoothing import MaxFormFunction


logger = logging.getLogger(__name__)

QP_DIMENSION = 20
SLATER_MARGIN = 0.05
HINGE_THRESHOLD = 0.5


@dataclass
class ReferenceSolution:
    """Primal-dual reference point (x*, f*, y*, z*)."""
    x: np.ndarray
    f: float
    y: np.ndarray
    z: np.ndarray
    status: str = "optimal"


def _bounded_quadratic(P: np.ndarray, q: np.ndarray, const: float, vertices: List[np.ndarray], name: str):
    draft = quadratic_function(P, q, const, name=name)
    return quadratic_function(P, q, const, grad_bound=gradient_bound_on_vertices(draft, vertices), name=name)


def reference_qp(seed: int = 0, n: int = QP_DIMENSION) -> ProblemSpec:
    """
    Convex QP over the simplex with one affine equality and two quadratic inequalities.

    The barycenter satisfies the equality and both inequalities with margin
    0.05, so Slater's condition holds.

    Args:
        seed: Random seed of the data
        n: Dimension

    Returns:
        ProblemSpec with exact gradient bounds M_h over the simplex vertices
    """
    rng = np.random.default_rng(seed)
    vertices = list(np.eye(n))
    center = np.full(n, 1.0 / n)

    M = rng.standard_normal((n, n))
    P = M.T @ M / n + 0.1 * np.eye(n)
    objective = quadratic_function(P, rng.standard_normal(n), name="qp_objective")

    a = rng.standard_normal((1, n))
    affine = AffineConstraint(a, a @ center)

    constraints = []
    for i in range(2):
        B = rng.standard_normal((n, n))
        Q = B.T @ B / n
        Q = 0.5 * (Q + Q.T)
        anchor = rng.dirichlet(np.ones(n))
        radius = 0.5 * (center - anchor) @ Q @ (center - anchor) + SLATER_MARGIN
        constraints.append(_bounded_quadratic(Q, -Q @ anchor, 0.5 * anchor @ Q @ anchor - radius,
                                              vertices, name=f"qp_ball{i}"))

    return ProblemSpec(objective, ClosedFormSet.simplex(n), affine=affine,
                       constraints=ConstraintBundle(tuple(constraints)), name=f"reference-qp-seed{seed}")


def hinge_toy(c: float = 0.6) -> Tuple[ProblemSpec, ReferenceSolution]:
    """
    min (x - c)^2 / 2 over [0, 1] subject to [x - 0.5]_+ <= 0.

    The constraint is a box max-form function with mu = 0, so solvers must smooth it.

    Returns:
        Tuple of (problem, analytic reference solution)
    """
    objective = quadratic_function(np.array([[1.0]]), np.array([-c]), 0.5 * c * c, name="hinge_objective")
    hinge = MaxFormFunction(np.array([[1.0]]), "box", offset=np.array([HINGE_THRESHOLD]), name="hinge")
    spec = ProblemSpec(objective, ClosedFormSet.box([0.0], [1.0]), constraints=ConstraintBundle((hinge,)),
                       name=f"hinge-c{c:g}")

    x_star = float(np.clip(c, 0.0, HINGE_THRESHOLD))
    z_star = max(c - HINGE_THRESHOLD, 0.0)
    return spec, ReferenceSolution(np.array([x_star]), 0.5 * (x_star - c) ** 2, np.zeros(0), np.array([z_star]))


def _set_constraints(descriptor: Dict[str, Any], x: Any) -> List[Any]:
    kind = descriptor["kind"]
    if kind == "simplex":
        return [x >= 0, cp.sum(x) == 1]
    if kind == "box":
        return [x >= np.asarray(descriptor["lo"], dtype=float), x <= np.asarray(descriptor["hi"], dtype=float)]
    if kind == "product":
        result, offset = [], 0
        for part in descriptor["parts"]:
            size = descriptor_dim(part)
            result.extend(_set_constraints(part, x[offset:offset + size]))
            offset += size
        return result
    raise ProblemError(f"No reference rendering for set family '{kind}'")


def _expression(fn: Any, x: Any) -> Any:
    data = getattr(fn, "data", None)
    if not data:
        raise ProblemError(f"'{fn.name}' has no declarative data; no reference rendering")
    if data["kind"] == "quadratic":
        return 0.5 * cp.quad_form(x, cp.psd_wrap(data["P"])) + data["q"] @ x + data["const"]
    if data["kind"] == "max_form":
        if data["mu"] > 0:
            raise ProblemError(f"'{fn.name}' has mu > 0; no reference rendering")
        u = data["C"] @ x
        if data["offset"] is not None:
            u = u - data["offset"]
        expression = cp.max(u) if data["family"] == "simplex" else cp.sum(cp.pos(u))
        if data["affine"] is not None:
            expression = expression + np.asarray(data["affine"]) @ x
        return expression + data["affine_const"]
    raise ProblemError(f"Unknown function kind '{data['kind']}'")


def reference_solution(spec: ProblemSpec) -> ReferenceSolution:
    """
    Solve a declarative problem with cvxpy's default conic solver.

    Returns:
        ReferenceSolution with the multipliers of Ax = b (y*) and h(x) <= 0 (z*)

    Raises:
        ProblemError: If the problem is not declarative or the solve fails
    """
    descriptor = getattr(spec.feasible_set, "descriptor", None)
    if descriptor is None:
        raise ProblemError("Reference solutions need a closed-form feasible set")
    x = cp.Variable(spec.feasible_set.dim)
    constraints = _set_constraints(descriptor, x)
    affine = []
    if spec.m:
        A = spec.affine.A
        A = A.toarray() if hasattr(A, "toarray") else np.asarray(A, dtype=float)
        affine = [A @ x == spec.affine.b]
    inequalities = [_expression(fn, x) <= 0 for fn in spec.constraints.items]

    problem = cp.Problem(cp.Minimize(_expression(spec.objective, x)), constraints + affine + inequalities)
    problem.solve()
    if problem.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        raise ProblemError(f"Reference solve of '{spec.name}' ended with status '{problem.status}'")
    if problem.status == cp.OPTIMAL_INACCURATE:
        logger.warning("Reference solve of '%s' is inaccurate", spec.name)

    y = np.concatenate([np.atleast_1d(c.dual_value) for c in affine]) if affine else np.zeros(0)
    z = np.array([float(np.squeeze(c.dual_value)) for c in inequalities])
    return ReferenceSolution(np.asarray(x.value, dtype=float), float(problem.value), y, np.maximum(z, 0.0),
                             problem.status)


def tiny_imrt_config(seed: int = 0, n_angles: int = 6, rows: int = 2, cols: int = 3) -> GeneratorConfig:
    """A 64-voxel instance with one tumor and one organ, small enough to enumerate apertures."""
    return GeneratorConfig(
        seed=seed, l=2.0, delta=1.0, n_angles=n_angles, angle_step=360.0 / n_angles,
        rows=rows, cols=cols, tumor_count=1, tumor_edge=2.0, organ_count=1, organ_edges=(4.0, 4.0, 2.0),
        criteria=[ClinicalCriterion("tumor0", "underdose", 30.0, 0.2),
                  ClinicalCriterion("organ0", "overdose", 60.0, 0.2)],
    )


def dense_imrt_comparison(seed: int = 0, extra_apertures: int = 24) -> Tuple[ProblemSpec, ImrtInstance, List[Aperture]]:
    """
    Dense rendition of a tiny IMRT instance for the projection baseline.

    The aperture list is every open field plus seeded random apertures.

    Returns:
        Tuple of (dense problem, instance, apertures)
    """
    instance = generate_instance(tiny_imrt_config(seed))
    rng = np.random.default_rng(seed + 1)
    apertures = open_field_apertures(instance) + random_apertures(instance, extra_apertures, rng)
    return dense_problem(instance, apertures), instance, apertures


BUILTIN_PROBLEMS = ("imrt", "qp", "hinge", "dense-imrt")


def builtin_problem(name: str, seed: int = 0, **params: Any) -> Tuple[ProblemSpec, Optional[ImrtInstance]]:
    """
    Named built-in problem; IMRT problems also return their instance.

    Args:
        name: One of BUILTIN_PROBLEMS
        seed: Seed of the problem data
        params: hinge: c; imrt: GeneratorConfig fields
    """
    if name == "qp":
        return reference_qp(seed), None
    if name == "hinge":
        return hinge_toy(float(params.get("c", 0.6)))[0], None
    if name == "dense-imrt":
        spec, instance, _ = dense_imrt_comparison(seed)
        return spec, instance
    if name == "imrt":
        config = GeneratorConfig.from_dict({**params, "seed": seed})
        return generate_problem(config)
    raise ProblemError(f"Unknown built-in problem '{name}', expected one of {BUILTIN_PROBLEMS}")
