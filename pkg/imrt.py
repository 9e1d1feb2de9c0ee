#!/usr/bin/env python3
"""
Intensity-modulated radiation therapy plans as a constrained problem over apertures.

A plan is a nonnegative intensity y per aperture (sum at most 1) plus one
threshold per CVaR criterion. Apertures are never enumerated: the plan keeps
only the apertures it uses, and the linear minimization oracle builds the best
new aperture row by row from beamlet prices.

Thresholds are stored divided by their criterion's dose bound b, so every
coordinate of the feasible set has unit scale.
"""

import heapq
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Hashable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from imrt_instance import ClinicalCriterion, GeneratorConfig, ImrtInstance, generate_instance
from lmo import ClosedFormSet, Vertex, lmo_box
from problem_model import (
    POINT_TOL,
    ConstraintBundle,
    FeasibleSet,
    ProblemError,
    ProblemSpec,
    SmoothConvexFunction,
    estimate_op_norm,
)
from smoothing import ETA_FLOOR, MaxFormFunction


logger = logging.getLogger(__name__)

INTENSITY_FLOOR = 1e-6
DVH_GRID = np.round(np.arange(801) * 0.1, 1)
ORIGIN_KEY = "origin"

Interval = Tuple[int, int]


# ---------------------------------------------------------------------------
# Apertures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Aperture:
    """
    Open cells of one angle: per row a column interval [start, stop), empty as (0, 0).

    The equivalent leaf pair of a row is (start, stop + 1) in 1-based columns,
    with the open columns strictly between the two leaves.
    """
    angle: int
    intervals: Tuple[Interval, ...]

    @property
    def key(self) -> Tuple[int, Tuple[Interval, ...]]:
        return (self.angle, self.intervals)

    @classmethod
    def from_key(cls, key: Sequence) -> "Aperture":
        angle, intervals = key
        return cls(int(angle), tuple((int(s), int(e)) for s, e in intervals))

    @classmethod
    def from_leaf_pairs(cls, angle: int, pairs: Sequence[Tuple[int, int]]) -> "Aperture":
        intervals = []
        for left, right in pairs:
            if not 0 <= left < right:
                raise ValueError(f"Invalid leaf pair ({left}, {right})")
            intervals.append((left, right - 1) if right - 1 > left else (0, 0))
        return cls(int(angle), tuple(intervals))

    def leaf_pairs(self) -> List[Tuple[int, int]]:
        return [(start, stop + 1) if stop > start else (0, 1) for start, stop in self.intervals]

    @property
    def open_count(self) -> int:
        return sum(stop - start for start, stop in self.intervals)

    def beamlets(self, cols: int, per_angle: int) -> List[int]:
        """Global beamlet indices of the open cells."""
        base = self.angle * per_angle
        return [base + i * cols + j for i, (start, stop) in enumerate(self.intervals) for j in range(start, stop)]


def row_intervals(cols: int) -> List[Interval]:
    """All openings of one row: the empty one first, then [s, e) in lexicographic order."""
    return [(0, 0)] + [(s, e) for s in range(cols) for e in range(s + 1, cols + 1)]


def enumerate_apertures(angle: int, rows: int, cols: int) -> Iterator[Aperture]:
    """Every distinct aperture of one angle ((cols(cols+1)/2 + 1)^rows of them)."""
    choices = row_intervals(cols)

    def extend(prefix: Tuple[Interval, ...]) -> Iterator[Aperture]:
        if len(prefix) == rows:
            yield Aperture(angle, prefix)
            return
        for interval in choices:
            yield from extend(prefix + (interval,))

    return extend(())


def aperture_incidence_norm(rows: int, cols: int) -> float:
    """
    Spectral norm of the 0/1 beamlet-by-aperture matrix of one angle.

    Its Gram matrix counts the apertures opening both of two beamlets: on one
    row that is the intervals covering both columns times every choice on the
    other rows, on two rows the product of the per-row covering counts.
    """
    per_row = cols * (cols + 1) // 2 + 1
    j = np.arange(cols)
    both = (np.minimum.outer(j, j) + 1) * (cols - np.maximum.outer(j, j))
    cover = (j + 1) * (cols - j)
    gram = np.empty((rows * cols, rows * cols))
    for i in range(rows):
        for k in range(rows):
            if i == k:
                block = both * float(per_row) ** (rows - 1)
            else:
                block = np.outer(cover, cover) * float(per_row) ** (rows - 2)
            gram[i * cols:(i + 1) * cols, k * cols:(k + 1) * cols] = block
    return math.sqrt(float(np.max(np.linalg.eigvalsh(gram))))


def dose_operator_norm(instance: ImrtInstance) -> float:
    """
    Upper bound on the l2 operator norm of y -> sum_t R D_t y_t over every aperture.

    The map factors as (R D^T) S with S block diagonal over angles, so its norm
    is at most R ||D|| times the incidence norm of one angle.
    """
    estimate = estimate_op_norm(instance.dose.matrix)
    if not estimate.converged:
        logger.warning("Dose matrix norm of instance seed %d is not converged; constants may be low", instance.seed)
    return instance.dose_rate * estimate.sigma * aperture_incidence_norm(instance.dose.rows, instance.dose.cols)


def _prefix(scores: np.ndarray) -> np.ndarray:
    shape = scores.shape[:-1] + (1,)
    return np.concatenate([np.zeros(shape), np.cumsum(scores, axis=-1)], axis=-1)


def aperture_score(scores: np.ndarray, intervals: Sequence[Interval]) -> float:
    """
    Sum of beamlet scores over the open cells of one angle.

    Row sums are prefix differences added row by row, the same arithmetic the
    oracle uses, so oracle values and enumerated values agree to the last bit.
    """
    prefix = _prefix(np.asarray(scores, dtype=float))
    total = 0.0
    for i, (start, stop) in enumerate(intervals):
        total += prefix[i, stop] - prefix[i, start]
    return float(total)


def min_row_intervals(scores: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Minimum-sum contiguous interval of every row, the empty interval allowed.

    Args:
        scores: Array (..., rows, cols)

    Returns:
        (starts, stops, sums) each of shape (..., rows); empty rows are (0, 0, 0.0)
    """
    prefix = _prefix(np.asarray(scores, dtype=float))
    head = prefix[..., :-1]
    running_max = np.maximum.accumulate(head, axis=-1)
    previous_max = np.concatenate([np.full(head.shape[:-1] + (1,), -np.inf), running_max[..., :-1]], axis=-1)
    positions = np.broadcast_to(np.arange(head.shape[-1]), head.shape)
    running_argmax = np.maximum.accumulate(np.where(head > previous_max, positions, 0), axis=-1)

    sums = prefix[..., 1:] - running_max
    ends = np.argmin(sums, axis=-1)
    best = np.take_along_axis(sums, ends[..., None], axis=-1)[..., 0]
    starts = np.take_along_axis(running_argmax, ends[..., None], axis=-1)[..., 0]
    stops = ends + 1

    empty = best >= 0
    return np.where(empty, 0, starts), np.where(empty, 0, stops), np.where(empty, 0.0, best)


def best_shape_excluding(scores: np.ndarray, excluded: set) -> Tuple[Optional[Tuple[Interval, ...]], float]:
    """
    Cheapest aperture shape of one angle not listed in `excluded`.

    Enumerates shapes in nondecreasing score (best-first over the per-row sorted
    openings) and stops at the first shape outside `excluded`.
    """
    prefix = _prefix(np.asarray(scores, dtype=float))
    rows, cols = scores.shape
    options = []
    for i in range(rows):
        row = sorted((prefix[i, stop] - prefix[i, start], start, stop) for start, stop in row_intervals(cols))
        options.append(row)

    def total(indices):
        value = 0.0
        for i, j in enumerate(indices):
            value += options[i][j][0]
        return value

    first = (0,) * rows
    heap = [(total(first), first)]
    seen = {first}
    while heap:
        value, indices = heapq.heappop(heap)
        shape = tuple((options[i][j][1], options[i][j][2]) for i, j in enumerate(indices))
        if shape not in excluded:
            return shape, float(value)
        for i in range(rows):
            if indices[i] + 1 < len(options[i]):
                successor = indices[:i] + (indices[i] + 1,) + indices[i + 1:]
                if successor not in seen:
                    seen.add(successor)
                    heapq.heappush(heap, (total(successor), successor))
    return None, math.inf


# ---------------------------------------------------------------------------
# Plan points and gradients
# ---------------------------------------------------------------------------

class PlanPoint:
    """
    Aperture intensities (sparse), the voxel dose they deliver and the normalized thresholds.

    Supports the linear operations the solvers apply to points.
    """

    __array_ufunc__ = None

    def __init__(self, atoms: Dict[Hashable, float], z: np.ndarray, tau: np.ndarray):
        self.atoms = atoms
        self.z = z
        self.tau = tau

    @classmethod
    def origin(cls, n_voxels: int, tau: np.ndarray) -> "PlanPoint":
        return cls({}, np.zeros(n_voxels), np.asarray(tau, dtype=float))

    def __add__(self, other: "PlanPoint") -> "PlanPoint":
        atoms = dict(self.atoms)
        for key, weight in other.atoms.items():
            atoms[key] = atoms.get(key, 0.0) + weight
            if atoms[key] == 0.0:
                del atoms[key]
        return PlanPoint(atoms, self.z + other.z, self.tau + other.tau)

    def __sub__(self, other: "PlanPoint") -> "PlanPoint":
        return self + (-1.0) * other

    def __mul__(self, scalar: float) -> "PlanPoint":
        scalar = float(scalar)
        atoms = {} if scalar == 0.0 else {key: weight * scalar for key, weight in self.atoms.items()}
        return PlanPoint(atoms, self.z * scalar, self.tau * scalar)

    __rmul__ = __mul__

    def total_intensity(self) -> float:
        return float(sum(self.atoms.values()))

    def atoms_by_angle(self) -> Dict[int, List[Tuple[Hashable, float]]]:
        groups: Dict[int, List[Tuple[Hashable, float]]] = {}
        for key in sorted(self.atoms):
            groups.setdefault(key[0], []).append((key, self.atoms[key]))
        return groups

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.z)) and np.all(np.isfinite(self.tau))
                    and all(math.isfinite(w) for w in self.atoms.values()))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "atoms": [[[key[0], [list(interval) for interval in key[1]]], weight]
                      for key, weight in sorted(self.atoms.items())],
            "z": self.z.tolist(),
            "tau": self.tau.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "PlanPoint":
        atoms = {Aperture.from_key(key).key: float(weight) for key, weight in doc["atoms"]}
        return cls(atoms, np.asarray(doc["z"], dtype=float), np.asarray(doc["tau"], dtype=float))


PlanSolution = PlanPoint


class PlanGradient:
    """
    Linear functional on plans: <pi, z> + <tau coefficients, tau> + sum over atoms of a per-atom price.

    Atoms listed in `group` carry their own price; any other atom of angle a
    is priced at absent[a].
    """

    __array_ufunc__ = None

    def __init__(self, pi: np.ndarray, tau: np.ndarray, group: Optional[Dict[Hashable, float]] = None,
                 absent: Optional[np.ndarray] = None):
        self.pi = pi
        self.tau = tau
        self.group = group or {}
        self.absent = absent

    @classmethod
    def zeros(cls, n_voxels: int, n_tau: int) -> "PlanGradient":
        return cls(np.zeros(n_voxels), np.zeros(n_tau))

    def coefficient(self, key: Hashable) -> float:
        if key in self.group:
            return self.group[key]
        return 0.0 if self.absent is None else float(self.absent[key[0]])

    def __add__(self, other: "PlanGradient") -> "PlanGradient":
        group = {key: self.coefficient(key) + other.coefficient(key) for key in set(self.group) | set(other.group)}
        if self.absent is None:
            absent = other.absent
        elif other.absent is None:
            absent = self.absent
        else:
            absent = self.absent + other.absent
        return PlanGradient(self.pi + other.pi, self.tau + other.tau, group, absent)

    def __mul__(self, scalar: float) -> "PlanGradient":
        scalar = float(scalar)
        return PlanGradient(self.pi * scalar, self.tau * scalar,
                            {key: value * scalar for key, value in self.group.items()},
                            None if self.absent is None else self.absent * scalar)

    __rmul__ = __mul__

    def dot(self, point: PlanPoint) -> float:
        value = float(self.pi @ point.z) + float(self.tau @ point.tau)
        for key, weight in point.atoms.items():
            value += self.coefficient(key) * weight
        return value

    def norm(self) -> float:
        squares = float(self.pi @ self.pi) + float(self.tau @ self.tau)
        squares += sum(value * value for value in self.group.values())
        return math.sqrt(squares)

    def is_finite(self) -> bool:
        finite = bool(np.all(np.isfinite(self.pi)) and np.all(np.isfinite(self.tau)))
        finite = finite and all(math.isfinite(v) for v in self.group.values())
        return finite and (self.absent is None or bool(np.all(np.isfinite(self.absent))))


# ---------------------------------------------------------------------------
# Objective and constraints
# ---------------------------------------------------------------------------

def objective_value_grad(z: np.ndarray, lower: np.ndarray, upper: np.ndarray,
                         w_lower: Any = 1.0, w_upper: Any = 1.0) -> Tuple[float, np.ndarray]:
    """
    Voxel penalty (1/N_v) sum w_lo [T_lo - z]_+^2 + w_hi [z - T_hi]_+^2 and its gradient in z.

    Args:
        z: Voxel dose
        lower: Lower targets T_lo
        upper: Upper targets T_hi
        w_lower: Underdose weights (scalar or per voxel)
        w_upper: Overdose weights (scalar or per voxel)

    Returns:
        Tuple of (value, gradient)
    """
    n = z.size
    under = np.maximum(lower - z, 0.0)
    over = np.maximum(z - upper, 0.0)
    value = float(np.sum(w_lower * under ** 2 + w_upper * over ** 2)) / n
    grad = (2.0 * w_upper * over - 2.0 * w_lower * under) / n
    return value, grad


def cvar_constraint(direction: str, z: np.ndarray, tau: float, b: float, p: float) -> float:
    """
    CVaR criterion value on the voxels z of one structure (feasible when <= 0).

    overdose:  tau + sum [z - tau]_+ / (p N) - b
    underdose: -tau + sum [tau - z]_+ / (p N) + b
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    z = np.asarray(z, dtype=float)
    if z.size == 0:
        raise ValueError("CVaR needs at least one voxel")
    if direction == "overdose":
        return float(tau + np.sum(np.maximum(z - tau, 0.0)) / (p * z.size) - b)
    if direction == "underdose":
        return float(-tau + np.sum(np.maximum(tau - z, 0.0)) / (p * z.size) + b)
    raise ValueError(f"Unknown CVaR direction '{direction}'")


class CvarMap:
    """x -> sign (z_S / b - tau_i) / (p N_S), the hinge arguments of one normalized CVaR criterion."""

    def __init__(self, voxels: np.ndarray, index: int, sign: float, b: float, p: float,
                 n_voxels: int, n_tau: int, norm: float):
        self.voxels = np.asarray(voxels)
        self.index = index
        self.sign = sign
        self.b = b
        self.scale = 1.0 / (p * self.voxels.size)
        self.n_voxels = n_voxels
        self.n_tau = n_tau
        self.rows = int(self.voxels.size)
        self.norm = norm

    def apply(self, x: PlanPoint) -> np.ndarray:
        return self.sign * self.scale * (x.z[self.voxels] / self.b - x.tau[self.index])

    def adjoint(self, s: np.ndarray) -> PlanGradient:
        pi = np.zeros(self.n_voxels)
        pi[self.voxels] = self.sign * self.scale * s / self.b
        tau = np.zeros(self.n_tau)
        tau[self.index] = -self.sign * self.scale * float(np.sum(s))
        return PlanGradient(pi, tau)


def cvar_function(instance: ImrtInstance, index: int, criterion: ClinicalCriterion,
                  dose_norm: float) -> MaxFormFunction:
    """
    Criterion `index` divided by its bound b, as a box max-form function of (z, tau / b).

    Args:
        instance: IMRT instance
        index: Position of the criterion (and of its threshold)
        criterion: CVaR criterion
        dose_norm: Bound on the l2 norm of the intensity-to-dose map, R included
    """
    voxels = instance.structure_voxels[criterion.structure]
    n_tau = len(instance.criteria)
    sign = 1.0 if criterion.direction == "overdose" else -1.0
    norm = (dose_norm / criterion.b + math.sqrt(voxels.size)) / (criterion.p * voxels.size)
    linear_map = CvarMap(voxels, index, sign, criterion.b, criterion.p, instance.n_voxels, n_tau, norm)
    affine_tau = np.zeros(n_tau)
    affine_tau[index] = sign
    return MaxFormFunction(linear_map, "box", affine=PlanGradient(np.zeros(instance.n_voxels), affine_tau),
                           affine_const=-sign, name=f"cvar_{criterion.direction}_{criterion.structure}")


def group_sparsity_value(plan: PlanPoint, phi: float) -> float:
    """Sum over angles of the largest intensity, minus phi (absent apertures count as 0)."""
    return float(sum(max(0.0, max(w for _, w in items)) for items in plan.atoms_by_angle().values()) - phi)


class GroupSparsityFunction(MaxFormFunction):
    """
    sum_a max_t (y_{a,t} / phi) - 1 with one entropy-smoothed max per angle.

    The max of angle a runs over all T_a apertures of that angle. Apertures
    absent from the plan have y = 0, so the smoothed max
        eta * log(sum_active exp(y / (phi eta)) + (T_a - n_active)) - eta * log T_a
    is exact over the whole set and lies within eta * log T_a of the true max.
    Its gradient prices each active aperture by its softmax weight / phi and
    every absent aperture of angle a by 1 / (phi Z_a), never more than the
    price of an active one.
    """

    def __init__(self, n_angles: int, shapes_per_angle: int, phi: float, n_voxels: int, n_tau: int,
                 name: str = "group_sparsity"):
        if phi <= 0:
            raise ProblemError(f"phi must be positive, got {phi}")
        self.n_angles = n_angles
        self.shapes_per_angle = int(shapes_per_angle)
        self.log_shapes = math.log(self.shapes_per_angle)
        self.phi = float(phi)
        self.n_voxels = n_voxels
        self.n_tau = n_tau
        super().__init__(None, "simplex", norm_C=1.0 / phi, name=name)

    @property
    def dual_size(self) -> int:
        return self.n_angles * self.shapes_per_angle

    @property
    def prox_diameter(self) -> float:
        return math.sqrt(self.n_angles * self.log_shapes)

    @property
    def center_norm(self) -> float:
        return math.sqrt(self.n_angles / self.shapes_per_angle)

    def value_grad(self, x: PlanPoint, eta: float = 0.0) -> Tuple[float, PlanGradient]:
        if eta < 0:
            raise ValueError(f"eta must be nonnegative, got {eta}")
        if eta == 0.0:
            raise ValueError(f"'{self.name}' is nonsmooth: use exact_value or a positive eta")
        if eta < ETA_FLOOR:
            logger.warning("eta=%.3g below floor for '%s'; clamping to %.0e", eta, self.name, ETA_FLOOR)
            eta = ETA_FLOOR

        absent = np.full(self.n_angles, math.exp(-self.log_shapes) / self.phi)
        group: Dict[Hashable, float] = {}
        total = 0.0
        for angle, items in x.atoms_by_angle().items():
            ys = np.array([w for _, w in items])
            rest = self.shapes_per_angle - len(items)
            scaled = ys / (self.phi * eta)
            logits = np.append(scaled, math.log(rest)) if rest > 0 else scaled
            lse = float(logsumexp(logits))
            total += eta * (lse - self.log_shapes)
            weights = np.exp(scaled - lse)
            absent[angle] = math.exp(-lse) / self.phi if rest > 0 else 0.0
            for (key, _), weight in zip(items, weights):
                group[key] = float(weight) / self.phi
        gradient = PlanGradient(np.zeros(self.n_voxels), np.zeros(self.n_tau), group, absent)
        return total - 1.0, gradient

    def exact_value(self, x: PlanPoint) -> float:
        return group_sparsity_value(x, self.phi) / self.phi


# ---------------------------------------------------------------------------
# Feasible set and oracle
# ---------------------------------------------------------------------------

def aperture_lmo(pi: np.ndarray, instance: ImrtInstance, group: Optional[Dict[Hashable, float]] = None,
                 absent: Optional[np.ndarray] = None) -> Tuple[Optional[Aperture], float]:
    """
    Aperture with the smallest coefficient R sum_(i,j) (sum_v D_(i,j)v pi_v) + price.

    Args:
        pi: Voxel prices
        instance: IMRT instance
        group: Per-aperture prices of apertures already in the plan
        absent: Per-angle price of every other aperture (zero when None)

    Returns:
        (aperture, coefficient); (None, 0.0) when no aperture has a negative coefficient
    """
    group = group or {}
    scores = instance.dose.beamlet_scores(pi) * instance.dose_rate
    starts, stops, sums = min_row_intervals(scores)
    geometric = np.cumsum(sums, axis=1)[:, -1]
    prices = np.zeros(instance.dose.n_angles) if absent is None else absent

    active_by_angle: Dict[int, set] = {}
    for key in group:
        active_by_angle.setdefault(key[0], set()).add(key[1])

    best, best_value = None, 0.0
    for a in range(instance.dose.n_angles):
        shape = tuple((int(s), int(e)) for s, e in zip(starts[a], stops[a]))
        value = float(geometric[a])
        excluded = active_by_angle.get(a)
        if excluded and shape in excluded:
            shape, value = best_shape_excluding(scores[a], excluded)
            if shape is None:
                continue
        value += float(prices[a])
        if value < best_value:
            best, best_value = Aperture(a, shape), value

    for key in sorted(group):
        value = aperture_score(scores[key[0]], key[1]) + group[key]
        if value < best_value:
            best, best_value = Aperture.from_key(key), value

    if best is None:
        return None, 0.0
    return best, best_value


class ApertureSet(FeasibleSet):
    """{y >= 0, sum y <= 1} over all apertures, times the box of normalized thresholds."""

    def __init__(self, instance: ImrtInstance):
        self.instance = instance
        self.tau_lo = np.array([c.tau_bounds[0] / c.b for c in instance.criteria])
        self.tau_hi = np.array([c.tau_bounds[1] / c.b for c in instance.criteria])

    @property
    def diameter(self) -> float:
        return math.sqrt(2.0 + float(np.sum((self.tau_hi - self.tau_lo) ** 2)))

    def zero_coefficient(self) -> PlanGradient:
        return PlanGradient.zeros(self.instance.n_voxels, self.tau_lo.size)

    def aperture_dose(self, aperture: Aperture) -> np.ndarray:
        dose = self.instance.dose
        return self.instance.dose_rate * dose.beamlet_dose(aperture.beamlets(dose.cols, dose.beamlets_per_angle))

    def lmo(self, c: PlanGradient) -> Vertex:
        tau_vertex = lmo_box(c.tau, self.tau_lo, self.tau_hi)
        aperture, psi = aperture_lmo(c.pi, self.instance, c.group, c.absent)
        if aperture is None:
            point = PlanPoint.origin(self.instance.n_voxels, tau_vertex.point)
            return Vertex((ORIGIN_KEY, tau_vertex.key), point, tau_vertex.value, f"{ORIGIN_KEY}|{tau_vertex.label}")
        point = PlanPoint({aperture.key: 1.0}, self.aperture_dose(aperture), tau_vertex.point)
        label = f"a{aperture.angle}:{aperture.open_count}|{tau_vertex.label}"
        return Vertex((aperture.key, tau_vertex.key), point, psi + tau_vertex.value, label)

    def contains(self, x: PlanPoint, tol: float = POINT_TOL) -> bool:
        weights = np.array(list(x.atoms.values()))
        if weights.size and (np.any(weights < -tol) or weights.sum() > 1.0 + tol):
            return False
        return bool(np.all(x.tau >= self.tau_lo - tol) and np.all(x.tau <= self.tau_hi + tol))


# ---------------------------------------------------------------------------
# Problem assembly
# ---------------------------------------------------------------------------

def build_problem(instance: ImrtInstance, phi: Optional[float] = None,
                  w_lower: Any = 1.0, w_upper: Any = 1.0) -> ProblemSpec:
    """
    Assemble objective, normalized CVaR constraints and the group-sparsity constraint.

    Constants over the implicit aperture space use dose_operator_norm, an upper
    bound on the l2 norm of the intensity-to-dose map.
    """
    phi = instance.phi if phi is None else phi
    lower, upper = instance.dose_targets()
    n_voxels, n_tau = instance.n_voxels, len(instance.criteria)
    dose_norm = dose_operator_norm(instance)
    max_weight = float(max(np.max(w_lower), np.max(w_upper)))

    def value(x: PlanPoint) -> float:
        return objective_value_grad(x.z, lower, upper, w_lower, w_upper)[0]

    def gradient(x: PlanPoint) -> PlanGradient:
        return PlanGradient(objective_value_grad(x.z, lower, upper, w_lower, w_upper)[1], np.zeros(n_tau))

    objective = SmoothConvexFunction(value, gradient, lipschitz_grad=2.0 * max_weight / n_voxels * dose_norm ** 2,
                                     name="dose_penalty")
    constraints = [cvar_function(instance, i, c, dose_norm) for i, c in enumerate(instance.criteria)]
    geometry = instance.geometry
    constraints.append(GroupSparsityFunction(geometry.n_angles, geometry.apertures_per_angle(), phi, n_voxels, n_tau))
    return ProblemSpec(objective, ApertureSet(instance), constraints=ConstraintBundle(tuple(constraints)),
                       name=f"imrt-seed{instance.seed}")


def generate_problem(config: GeneratorConfig) -> Tuple[ProblemSpec, ImrtInstance]:
    """generate_instance followed by build_problem."""
    instance = generate_instance(config)
    return build_problem(instance), instance


def recompute_dose(plan: PlanPoint, instance: ImrtInstance) -> np.ndarray:
    """Voxel dose sum_t R D_t y_t rebuilt from the atoms."""
    feasible_set = ApertureSet(instance)
    z = np.zeros(instance.n_voxels)
    for key, weight in sorted(plan.atoms.items()):
        z += weight * feasible_set.aperture_dose(Aperture.from_key(key))
    return z


# ---------------------------------------------------------------------------
# Plan evaluation
# ---------------------------------------------------------------------------

def dvh_curve(z: np.ndarray, grid: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Fraction of a structure's voxels receiving at least each dose of the grid.

    Args:
        z: Voxel doses of the structure
        grid: Dose levels, 0 to 80 Gy in 0.1 Gy steps by default

    Returns:
        Tuple of (grid, fractions)
    """
    z = np.sort(np.asarray(z, dtype=float))
    if z.size == 0:
        raise ValueError("DVH needs at least one voxel")
    grid = DVH_GRID if grid is None else np.asarray(grid, dtype=float)
    below = np.searchsorted(z, grid, side="left")
    return grid, (z.size - below) / z.size


def angle_intensities(plan: PlanPoint) -> Dict[int, float]:
    totals: Dict[int, float] = {}
    for key, weight in plan.atoms.items():
        totals[key[0]] = totals.get(key[0], 0.0) + weight
    return totals


def count_selected_angles(plan: PlanPoint, intensity_floor: float = INTENSITY_FLOOR) -> int:
    """Number of angles whose total intensity exceeds the floor."""
    return sum(1 for total in angle_intensities(plan).values() if total > intensity_floor)


@dataclass(frozen=True)
class DvhCriterion:
    """V_dose >= fraction (at_least) or V_dose <= fraction (at_most) on one structure."""
    structure: str
    dose: float
    fraction: float
    at_least: bool = True

    @property
    def label(self) -> str:
        return f"V{self.dose:g}{'>=' if self.at_least else '<='}{self.fraction * 100:g}%"


def default_dvh_criteria(instance: ImrtInstance) -> List[DvhCriterion]:
    """Prescription coverage of every tumor plus the DVH reading of every CVaR criterion."""
    criteria = [DvhCriterion(s.name, instance.prescription, 0.95) for s in instance.geometry.structures
                if s.kind == "tumor"]
    for c in instance.criteria:
        if c.direction == "underdose":
            criteria.append(DvhCriterion(c.structure, c.b, 1.0 - c.p, at_least=True))
        else:
            criteria.append(DvhCriterion(c.structure, c.b, c.p, at_least=False))
    return criteria


def evaluate_dvh_criteria(plan: PlanPoint, instance: ImrtInstance,
                          criteria: Optional[List[DvhCriterion]] = None) -> List[Dict[str, Any]]:
    """
    Pass/fail table of DVH criteria read off each structure's curve.

    Returns:
        One row per criterion with the measured fraction
    """
    rows = []
    for criterion in criteria or default_dvh_criteria(instance):
        voxels = instance.structure_voxels[criterion.structure]
        _, fractions = dvh_curve(plan.z[voxels], np.array([criterion.dose]))
        measured = float(fractions[0])
        passed = measured >= criterion.fraction if criterion.at_least else measured <= criterion.fraction
        rows.append({"structure": criterion.structure, "criterion": criterion.label,
                     "fraction": measured, "passed": bool(passed)})
    return rows


def plan_to_dict(plan: PlanPoint, instance: ImrtInstance) -> Dict[str, Any]:
    """Plan export: atoms as (angle, leaf pairs, intensity) and thresholds in Gy."""
    atoms = []
    for key, weight in sorted(plan.atoms.items()):
        aperture = Aperture.from_key(key)
        atoms.append({
            "angle": aperture.angle,
            "angle_degrees": instance.geometry.angles[aperture.angle],
            "leaf_pairs": [list(pair) for pair in aperture.leaf_pairs()],
            "intensity": weight,
        })
    return {
        "atoms": atoms,
        "tau": [float(t * c.b) for t, c in zip(plan.tau, instance.criteria)],
        "selected_angles": count_selected_angles(plan),
        "total_intensity": plan.total_intensity(),
    }


# ---------------------------------------------------------------------------
# Dense rendition for projection methods
# ---------------------------------------------------------------------------

def open_field_apertures(instance: ImrtInstance) -> List[Aperture]:
    """The fully open aperture of every angle."""
    geometry = instance.geometry
    full = tuple((0, geometry.cols) for _ in range(geometry.rows))
    return [Aperture(a, full) for a in range(geometry.n_angles)]


def random_apertures(instance: ImrtInstance, count: int, rng: np.random.Generator) -> List[Aperture]:
    """Apertures with uniformly drawn row openings at uniformly drawn angles."""
    geometry = instance.geometry
    choices = row_intervals(geometry.cols)
    result = []
    for _ in range(count):
        angle = int(rng.integers(geometry.n_angles))
        picks = rng.integers(len(choices), size=geometry.rows)
        result.append(Aperture(angle, tuple(choices[int(p)] for p in picks)))
    return result


def dense_problem(instance: ImrtInstance, apertures: Sequence[Aperture],
                  w_lower: Any = 1.0, w_upper: Any = 1.0) -> ProblemSpec:
    """
    The same objective and CVaR criteria over an explicit aperture list.

    Variables are (y_1..y_T, slack, tau_1/b_1..tau_c/b_c): the slack turns
    sum y <= 1 into a simplex. Group sparsity is left out.
    """
    if not apertures:
        raise ProblemError("dense_problem needs at least one aperture")
    feasible = ApertureSet(instance)
    T, n_tau = len(apertures), len(instance.criteria)
    n = T + 1 + n_tau
    doses = np.column_stack([feasible.aperture_dose(aperture) for aperture in apertures])
    lower, upper = instance.dose_targets()

    def value(x: np.ndarray) -> float:
        return objective_value_grad(doses @ x[:T], lower, upper, w_lower, w_upper)[0]

    def gradient(x: np.ndarray) -> np.ndarray:
        grad = np.zeros(n)
        grad[:T] = doses.T @ objective_value_grad(doses @ x[:T], lower, upper, w_lower, w_upper)[1]
        return grad

    max_weight = float(max(np.max(w_lower), np.max(w_upper)))
    dose_norm = estimate_op_norm(doses).sigma
    lipschitz = 2.0 * max_weight / instance.n_voxels * dose_norm ** 2
    objective = SmoothConvexFunction(value, gradient, lipschitz_grad=lipschitz, name="dose_penalty")

    constraints = []
    for i, criterion in enumerate(instance.criteria):
        voxels = instance.structure_voxels[criterion.structure]
        sign = 1.0 if criterion.direction == "overdose" else -1.0
        C = np.zeros((voxels.size, n))
        C[:, :T] = doses[voxels] / criterion.b
        C[:, T + 1 + i] = -1.0
        C *= sign / (criterion.p * voxels.size)
        affine = np.zeros(n)
        affine[T + 1 + i] = sign
        constraints.append(MaxFormFunction(C, "box", affine=affine, affine_const=-sign,
                                           name=f"cvar_{criterion.direction}_{criterion.structure}"))

    feasible_set = ClosedFormSet.product(ClosedFormSet.simplex(T + 1),
                                         ClosedFormSet.box(feasible.tau_lo, feasible.tau_hi))
    return ProblemSpec(objective, feasible_set, constraints=ConstraintBundle(tuple(constraints)),
                       name=f"dense-imrt-seed{instance.seed}")
