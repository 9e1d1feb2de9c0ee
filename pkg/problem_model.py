#!/usr/bin/env python3
"""
Constrained convex problem model.

A problem is min f(x) subject to Ax - b = 0, h_i(x) <= 0, x in X, where X is a
compact convex set reachable only through its linear minimization oracle.
This module holds the problem containers, the constants the step-size
schedules consume and the helpers that estimate them.
"""

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import aslinearoperator


logger = logging.getLogger(__name__)

# Membership tolerances: exact vertices vs. accumulated convex combinations
VERTEX_TOL = 1e-12
POINT_TOL = 1e-9

OVERRIDABLE_CONSTANTS = ("D_X", "A_norm", "L_f", "L_bar", "M_bar")


class ProblemError(ValueError):
    """Raised for malformed problems, dimension mismatches and unsupported sets."""


class NormEstimate(NamedTuple):
    """Power-iteration result; `converged` is False when the iteration cap was hit."""
    sigma: float
    converged: bool
    iterations: int


def estimate_op_norm(A: Any, tol: float = 1e-10, max_iter: int = 5000, seed: int = 0) -> NormEstimate:
    """
    Estimate the spectral norm of a linear map by power iteration on A^T A.

    Args:
        A: Dense array, scipy.sparse matrix or LinearOperator
        tol: Relative tolerance on successive estimates
        max_iter: Iteration cap
        seed: Seed of the random start vector

    Returns:
        NormEstimate with the largest singular value (0.0 for the zero map) and
        whether successive estimates agreed within tol before max_iter
    """
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")

    op = aslinearoperator(A)
    m, n = op.shape
    if m == 0 or n == 0:
        return NormEstimate(0.0, True, 0)

    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)

    sigma = 0.0
    for k in range(1, max_iter + 1):
        Av = op.matvec(v)
        sigma_new = float(np.linalg.norm(Av))
        if sigma_new == 0.0:
            # v may sit in the kernel by accident; retry from a fresh direction once
            v = rng.standard_normal(n)
            v /= np.linalg.norm(v)
            Av = op.matvec(v)
            sigma_new = float(np.linalg.norm(Av))
            if sigma_new == 0.0:
                return NormEstimate(0.0, True, k)

        w = op.rmatvec(Av)
        w_norm = float(np.linalg.norm(w))
        if w_norm == 0.0:
            return NormEstimate(sigma_new, True, k)
        v = w / w_norm

        if abs(sigma_new - sigma) <= tol * sigma_new:
            return NormEstimate(float(np.linalg.norm(op.matvec(v))), True, k)
        sigma = sigma_new

    logger.warning("Power iteration did not converge in %d iterations; returning %.6g", max_iter, sigma)
    return NormEstimate(sigma, False, max_iter)


# ---------------------------------------------------------------------------
# Set descriptors
# ---------------------------------------------------------------------------

def descriptor_dim(descriptor: Dict[str, Any]) -> int:
    """Number of coordinates of a closed-form set descriptor."""
    kind = descriptor.get("kind")
    if kind == "simplex":
        return int(descriptor["dim"])
    if kind == "box":
        return len(descriptor["lo"])
    if kind == "product":
        return sum(descriptor_dim(part) for part in descriptor["parts"])
    raise ProblemError(f"Unsupported set family '{kind}'")


def diameter_of(descriptor: Dict[str, Any]) -> float:
    """
    Exact l2 diameter of a closed-form set.

    Args:
        descriptor: {"kind": "simplex", "dim": T}, {"kind": "box", "lo": [...], "hi": [...]}
            or {"kind": "product", "parts": [...]}

    Returns:
        The diameter D_X
    """
    kind = descriptor.get("kind")
    if kind == "simplex":
        return math.sqrt(2.0) if int(descriptor["dim"]) > 1 else 0.0
    if kind == "box":
        lo = np.asarray(descriptor["lo"], dtype=float)
        hi = np.asarray(descriptor["hi"], dtype=float)
        return float(np.linalg.norm(hi - lo))
    if kind == "product":
        return math.sqrt(sum(diameter_of(part) ** 2 for part in descriptor["parts"]))
    raise ProblemError(f"Unsupported set family '{kind}': supply the diameter explicitly")


# ---------------------------------------------------------------------------
# Functions and constraints
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AffineConstraint:
    """Affine map g(x) = Ax - b; A may be dense, sparse or a LinearOperator."""
    A: Any
    b: np.ndarray
    op_norm: Optional[float] = None

    def __post_init__(self):
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        object.__setattr__(self, "b", b)
        if self.A.shape[0] != b.shape[0]:
            raise ProblemError(f"A has {self.A.shape[0]} rows but b has {b.shape[0]} entries")
        if self.op_norm is None:
            object.__setattr__(self, "op_norm", estimate_op_norm(self.A).sigma if self.m else 0.0)

    @classmethod
    def empty(cls, n: Optional[int] = None) -> "AffineConstraint":
        return cls(A=np.zeros((0, n or 0)), b=np.zeros(0), op_norm=0.0)

    @property
    def m(self) -> int:
        return int(self.A.shape[0])

    @property
    def n(self) -> int:
        return int(self.A.shape[1])

    def apply(self, x: Any) -> np.ndarray:
        """Return Ax - b (an empty vector when m = 0)."""
        if self.m == 0:
            return np.zeros(0)
        return np.asarray(self.A @ x, dtype=float).ravel() - self.b

    def adjoint(self, q: np.ndarray) -> np.ndarray:
        """Return A^T q."""
        return np.asarray(self.A.T @ q, dtype=float).ravel()


@dataclass(frozen=True)
class SmoothConvexFunction:
    """Convex function with L-Lipschitz gradient and a gradient bound M over X."""
    value_fn: Callable[[Any], float]
    grad_fn: Callable[[Any], Any]
    lipschitz_grad: float
    grad_bound: float = math.inf
    name: str = "f"
    data: Optional[Dict[str, Any]] = field(default=None, compare=False, repr=False)

    is_smooth = True

    def value(self, x: Any) -> float:
        return float(self.value_fn(x))

    def gradient(self, x: Any) -> Any:
        return self.grad_fn(x)

    def exact_value(self, x: Any) -> float:
        return self.value(x)

    def value_grad(self, x: Any, eta: float = 0.0) -> Tuple[float, Any]:
        # smooth functions ignore the smoothing weight
        return self.value(x), self.gradient(x)


def quadratic_function(P: Any, q: Any, const: float = 0.0, grad_bound: float = math.inf,
                       name: str = "f") -> SmoothConvexFunction:
    """
    Build x -> 0.5 x^T P x + q^T x + const.

    Args:
        P: Symmetric positive semidefinite matrix
        q: Linear coefficient vector
        const: Constant term
        grad_bound: Bound on the gradient norm over X
        name: Label used in traces

    Returns:
        SmoothConvexFunction with L = largest eigenvalue of P
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    q = np.asarray(q, dtype=float).ravel()
    if P.shape != (q.size, q.size):
        raise ProblemError(f"P has shape {P.shape} but q has {q.size} entries")
    if not np.allclose(P, P.T, atol=1e-12):
        raise ProblemError("P must be symmetric")

    eigenvalues = np.linalg.eigvalsh(P)
    if eigenvalues[0] < -1e-10:
        raise ProblemError(f"P is not positive semidefinite (min eigenvalue {eigenvalues[0]:.3g})")

    def value(x):
        return 0.5 * x @ (P @ x) + q @ x + const

    def gradient(x):
        return P @ x + q

    return SmoothConvexFunction(
        value_fn=value,
        grad_fn=gradient,
        lipschitz_grad=float(max(eigenvalues[-1], 0.0)),
        grad_bound=grad_bound,
        name=name,
        data={"kind": "quadratic", "P": P, "q": q, "const": float(const)},
    )


def gradient_bound_on_vertices(fn: Any, vertices: Sequence[np.ndarray]) -> float:
    """
    Largest gradient norm over a list of vertices.

    For functions whose gradient is affine, ||grad f|| is convex, so the maximum
    over a polytope is attained at a vertex and this bound is exact.
    """
    return max(float(np.linalg.norm(fn.gradient(v))) for v in vertices)


@dataclass(frozen=True)
class ConstraintBundle:
    """Function constraints h_1..h_d with their Lipschitz data."""
    items: Tuple[Any, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))

    @property
    def d(self) -> int:
        return len(self.items)

    @property
    def lipschitz_grads(self) -> np.ndarray:
        return np.array([item.lipschitz_grad for item in self.items], dtype=float)

    @property
    def grad_bounds(self) -> np.ndarray:
        return np.array([item.grad_bound for item in self.items], dtype=float)

    @property
    def L_bar(self) -> float:
        return float(np.linalg.norm(self.lipschitz_grads)) if self.d else 0.0

    @property
    def M_bar(self) -> float:
        return float(np.linalg.norm(self.grad_bounds)) if self.d else 0.0

    def values(self, x: Any) -> np.ndarray:
        """Exact (unsmoothed) constraint values."""
        return np.array([item.exact_value(x) for item in self.items], dtype=float)

    def value_grads(self, x: Any, etas: Optional[Sequence[float]] = None) -> Tuple[np.ndarray, List[Any]]:
        """Values and gradients of (possibly smoothed) constraints at x."""
        values = np.empty(self.d)
        grads = []
        for i, item in enumerate(self.items):
            eta = 0.0 if etas is None else float(etas[i])
            values[i], grad = item.value_grad(x, eta)
            grads.append(grad)
        return values, grads


# ---------------------------------------------------------------------------
# Feasible set and problem
# ---------------------------------------------------------------------------

class FeasibleSet:
    """Compact convex set accessed through a linear minimization oracle."""

    descriptor: Optional[Dict[str, Any]] = None

    @property
    def dim(self) -> Optional[int]:
        """Coordinate count, or None for implicitly represented sets."""
        return None

    @property
    def diameter(self) -> float:
        raise NotImplementedError

    def lmo(self, c: Any):
        raise NotImplementedError

    def contains(self, x: Any, tol: float = POINT_TOL) -> bool:
        raise NotImplementedError

    def zero_coefficient(self) -> Any:
        return np.zeros(self.dim)

    def start(self):
        """Start vertex: lmo(0) under the deterministic tie rules."""
        return self.lmo(self.zero_coefficient())


@dataclass(frozen=True)
class ProblemConstants:
    """Theory constants consumed by the schedules and certificates."""
    D_X: float
    A_norm: float
    L_f: float
    L_bar: float
    M_bar: float
    L_h: np.ndarray = field(default_factory=lambda: np.zeros(0))
    M_h: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def with_overrides(self, overrides: Optional[Dict[str, float]]) -> "ProblemConstants":
        if not overrides:
            return self
        unknown = set(overrides) - set(OVERRIDABLE_CONSTANTS)
        if unknown:
            raise ProblemError(f"Unknown constant(s) {sorted(unknown)}; allowed: {', '.join(OVERRIDABLE_CONSTANTS)}")
        return replace(self, **{key: float(value) for key, value in overrides.items()})


@dataclass(frozen=True)
class ProblemSpec:
    """min f(x) s.t. Ax = b, h(x) <= 0, x in X."""
    objective: Any
    feasible_set: FeasibleSet
    affine: Optional[AffineConstraint] = None
    constraints: ConstraintBundle = field(default_factory=ConstraintBundle)
    constants: Optional[ProblemConstants] = None
    name: str = "problem"

    def __post_init__(self):
        n = self.feasible_set.dim
        if self.affine is None:
            object.__setattr__(self, "affine", AffineConstraint.empty(n))
        if n is not None:
            if self.affine.m and self.affine.n != n:
                raise ProblemError(f"Affine map acts on {self.affine.n} coordinates, set has {n}")
            for fn in (self.objective,) + self.constraints.items:
                data = getattr(fn, "data", None)
                if data and data.get("kind") == "quadratic" and data["q"].size != n:
                    raise ProblemError(f"'{fn.name}' acts on {data['q'].size} coordinates, set has {n}")
        if self.constants is None:
            object.__setattr__(self, "constants", ProblemConstants(
                D_X=self.feasible_set.diameter,
                A_norm=float(self.affine.op_norm),
                L_f=float(self.objective.lipschitz_grad),
                L_bar=self.constraints.L_bar,
                M_bar=self.constraints.M_bar,
                L_h=self.constraints.lipschitz_grads,
                M_h=self.constraints.grad_bounds,
            ))

    @property
    def m(self) -> int:
        return self.affine.m

    @property
    def d(self) -> int:
        return self.constraints.d

    @property
    def components(self) -> List[Any]:
        """Objective followed by the constraints, the order smoothing vectors use."""
        return [self.objective, *self.constraints.items]

    @property
    def is_smooth(self) -> bool:
        return all(getattr(fn, "is_smooth", True) for fn in self.components)

    def with_overrides(self, overrides: Optional[Dict[str, float]]) -> "ProblemSpec":
        return replace(self, constants=self.constants.with_overrides(overrides))

    def check_point(self, x: Any) -> None:
        n = self.feasible_set.dim
        if n is not None and np.shape(x) != (n,):
            raise ProblemError(f"Point has shape {np.shape(x)}, expected ({n},)")

    def objective_value(self, x: Any) -> float:
        return float(self.objective.exact_value(x))

    def oracle(self, x: Any, etas: Optional[Sequence[float]] = None):
        """
        First-order information at x.

        Args:
            x: Point of X
            etas: Smoothing weights (objective first), None for smooth problems

        Returns:
            Tuple (f value, grad f, h values, list of grad h_i)
        """
        eta_f = 0.0 if etas is None else float(etas[0])
        f_value, f_grad = self.objective.value_grad(x, eta_f)
        h_values, h_grads = self.constraints.value_grads(x, None if etas is None else etas[1:])
        return float(f_value), f_grad, h_values, h_grads


def infeasibility(spec: ProblemSpec, x: Any) -> float:
    """
    Constraint violation ||Ax - b||_2 + ||[h(x)]_+||_2 with exact constraint values.

    Args:
        spec: Problem
        x: Point of X

    Returns:
        Nonnegative violation
    """
    spec.check_point(x)
    violation = 0.0
    if spec.m:
        violation += float(np.linalg.norm(spec.affine.apply(x)))
    if spec.d:
        violation += float(np.linalg.norm(np.maximum(spec.constraints.values(x), 0.0)))
    return violation


# ---------------------------------------------------------------------------
# JSON documents
# ---------------------------------------------------------------------------

def _matrix_to_json(M: Any) -> Dict[str, Any]:
    if sp.issparse(M):
        coo = M.tocoo()
        return {"format": "coo", "shape": list(coo.shape),
                "row": coo.row.tolist(), "col": coo.col.tolist(), "data": coo.data.tolist()}
    M = np.atleast_2d(np.asarray(M, dtype=float))
    return {"format": "dense", "shape": list(M.shape), "data": M.ravel(order="F").tolist()}


def _matrix_from_json(doc: Dict[str, Any]) -> Any:
    shape = tuple(doc["shape"])
    if doc["format"] == "coo":
        return sp.csr_matrix((doc["data"], (doc["row"], doc["col"])), shape=shape)
    return np.asarray(doc["data"], dtype=float).reshape(shape, order="F")


def _function_to_json(fn: Any) -> Dict[str, Any]:
    data = getattr(fn, "data", None)
    if not data:
        raise ProblemError(f"'{getattr(fn, 'name', fn)}' is not declarative and cannot be serialized")
    doc = {"name": fn.name}
    if data["kind"] == "quadratic":
        doc.update(kind="quadratic", P=_matrix_to_json(data["P"]), q=data["q"].tolist(),
                   const=data["const"], grad_bound=fn.grad_bound)
    elif data["kind"] == "max_form":
        doc.update(kind="max_form", family=data["family"], C=_matrix_to_json(data["C"]), mu=data["mu"],
                   offset=None if data["offset"] is None else np.asarray(data["offset"]).tolist(),
                   affine=None if data["affine"] is None else np.asarray(data["affine"]).tolist(),
                   affine_const=data["affine_const"])
    else:
        raise ProblemError(f"Unknown function kind '{data['kind']}'")
    return doc


def _function_from_json(doc: Dict[str, Any]) -> Any:
    if doc["kind"] == "quadratic":
        return quadratic_function(_matrix_from_json(doc["P"]), doc["q"], doc.get("const", 0.0),
                                  grad_bound=doc.get("grad_bound", math.inf), name=doc.get("name", "f"))
    if doc["kind"] == "max_form":
        from smoothing import MaxFormFunction

        return MaxFormFunction(
            _matrix_from_json(doc["C"]), doc["family"],
            offset=doc.get("offset"), mu=doc.get("mu", 0.0),
            affine=doc.get("affine"), affine_const=doc.get("affine_const", 0.0),
            name=doc.get("name", "h"),
        )
    raise ProblemError(f"Unknown function kind '{doc['kind']}'")


def problem_to_dict(spec: ProblemSpec) -> Dict[str, Any]:
    """Declarative JSON document of a problem."""
    if spec.feasible_set.descriptor is None:
        raise ProblemError("Only closed-form feasible sets can be serialized")
    return {
        "version": 1,
        "name": spec.name,
        "set": spec.feasible_set.descriptor,
        "objective": _function_to_json(spec.objective),
        "affine": None if spec.m == 0 else {"A": _matrix_to_json(spec.affine.A), "b": spec.affine.b.tolist()},
        "constraints": [_function_to_json(item) for item in spec.constraints.items],
    }


def problem_from_dict(doc: Dict[str, Any]) -> ProblemSpec:
    """Rebuild a problem from problem_to_dict output."""
    from lmo import ClosedFormSet

    if doc.get("version") != 1:
        raise ProblemError(f"Unsupported problem document version {doc.get('version')}")
    feasible_set = ClosedFormSet(doc["set"])
    affine = None
    if doc.get("affine"):
        affine = AffineConstraint(_matrix_from_json(doc["affine"]["A"]), np.asarray(doc["affine"]["b"]))
    return ProblemSpec(
        objective=_function_from_json(doc["objective"]),
        feasible_set=feasible_set,
        affine=affine,
        constraints=ConstraintBundle(tuple(_function_from_json(item) for item in doc.get("constraints", []))),
        name=doc.get("name", "problem"),
    )


def save_problem(spec: ProblemSpec, path: Path) -> bool:
    """
    Write a problem document.

    Returns:
        True if successful, False otherwise
    """
    try:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(problem_to_dict(spec), f, indent=2)
        return True
    except Exception as e:
        print(f"Error writing problem file {path}: {str(e)}")
        return False


def load_problem(path: Path) -> ProblemSpec:
    with open(path, "r", encoding="utf-8") as f:
        return problem_from_dict(json.load(f))
