#!/usr/bin/env python3
"""
Linear minimization oracles for simplices, boxes and their Cartesian products.

Every oracle breaks ties deterministically (lowest index on the simplex, the
lower bound on a box) so that solver runs are bit-reproducible.
"""

import itertools
from dataclasses import dataclass
from typing import Any, Callable, Dict, Hashable, Iterator, List, Sequence, Tuple

import numpy as np

from problem_model import (
    POINT_TOL,
    FeasibleSet,
    ProblemError,
    descriptor_dim,
    diameter_of,
)


@dataclass(frozen=True)
class Vertex:
    """Extreme point returned by an oracle."""
    key: Hashable
    point: Any
    value: float
    label: str = ""


def lmo_simplex(c: np.ndarray) -> Vertex:
    """
    Minimize <c, x> over the standard simplex.

    Args:
        c: Coefficient vector

    Returns:
        Vertex e_j with j the first index attaining min c
    """
    c = np.asarray(c, dtype=float)
    if c.size == 0:
        raise ValueError("lmo_simplex needs at least one coordinate")
    j = int(np.argmin(c))
    point = np.zeros(c.size)
    point[j] = 1.0
    return Vertex(key=j, point=point, value=float(c[j]), label=f"e{j}")


def lmo_box(c: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> Vertex:
    """
    Minimize <c, x> over the box [lo, hi].

    Coordinates with c_i < 0 go to hi_i, all others (c_i = 0 included) to lo_i.
    """
    c = np.asarray(c, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if not (c.shape == lo.shape == hi.shape):
        raise ValueError(f"Shape mismatch: c {c.shape}, lo {lo.shape}, hi {hi.shape}")
    if np.any(lo > hi):
        raise ValueError("Box has lo > hi in some coordinate")
    upper = c < 0
    point = np.where(upper, hi, lo)
    key = tuple(int(u) for u in upper)
    label = "box:" + "".join("1" if u else "0" for u in upper) if upper.size <= 16 else f"box:{int(upper.sum())}up"
    return Vertex(key=key, point=point, value=float(c @ point), label=label)


def lmo_product(c: np.ndarray, parts: Sequence[Tuple[int, Callable[[np.ndarray], Vertex]]]) -> Vertex:
    """
    Minimize <c, x> over a Cartesian product by solving each block separately.

    Args:
        c: Coefficient vector over all coordinates
        parts: (size, oracle) pairs covering the coordinates in order

    Returns:
        Concatenated vertex
    """
    c = np.asarray(c, dtype=float)
    total = sum(size for size, _ in parts)
    if total != c.size:
        raise ValueError(f"Parts cover {total} coordinates but c has {c.size}")

    keys, points, labels = [], [], []
    value = 0.0
    offset = 0
    for size, oracle in parts:
        vertex = oracle(c[offset:offset + size])
        keys.append(vertex.key)
        points.append(vertex.point)
        labels.append(vertex.label)
        value += vertex.value
        offset += size

    if len(parts) == 1:
        return Vertex(key=keys[0], point=points[0], value=value, label=labels[0])
    return Vertex(key=tuple(keys), point=np.concatenate(points), value=value, label="|".join(labels))


class ClosedFormSet(FeasibleSet):
    """Simplex, box or product of those, described by a JSON-friendly descriptor."""

    def __init__(self, descriptor: Dict[str, Any]):
        self.descriptor = descriptor
        self._dim = descriptor_dim(descriptor)
        self._diameter = diameter_of(descriptor)
        kind = descriptor["kind"]
        if kind == "box":
            self.lo = np.asarray(descriptor["lo"], dtype=float)
            self.hi = np.asarray(descriptor["hi"], dtype=float)
            if np.any(self.lo > self.hi):
                raise ProblemError("Box descriptor has lo > hi")
        elif kind == "product":
            self.parts = [ClosedFormSet(part) for part in descriptor["parts"]]
        elif kind == "simplex" and self._dim < 1:
            raise ProblemError("Simplex needs at least one coordinate")

    @classmethod
    def simplex(cls, dim: int) -> "ClosedFormSet":
        return cls({"kind": "simplex", "dim": int(dim)})

    @classmethod
    def box(cls, lo: Sequence[float], hi: Sequence[float]) -> "ClosedFormSet":
        return cls({"kind": "box", "lo": [float(v) for v in lo], "hi": [float(v) for v in hi]})

    @classmethod
    def product(cls, *sets: "ClosedFormSet") -> "ClosedFormSet":
        return cls({"kind": "product", "parts": [s.descriptor for s in sets]})

    @property
    def kind(self) -> str:
        return self.descriptor["kind"]

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def diameter(self) -> float:
        return self._diameter

    def lmo(self, c: np.ndarray) -> Vertex:
        if self.kind == "simplex":
            return lmo_simplex(c)
        if self.kind == "box":
            return lmo_box(c, self.lo, self.hi)
        return lmo_product(c, [(part.dim, part.lmo) for part in self.parts])

    def blocks(self) -> Iterator[Tuple[slice, "ClosedFormSet"]]:
        """Coordinate slices of the product parts (the set itself otherwise)."""
        if self.kind != "product":
            yield slice(0, self.dim), self
            return
        offset = 0
        for part in self.parts:
            yield slice(offset, offset + part.dim), part
            offset += part.dim

    def contains(self, x: np.ndarray, tol: float = POINT_TOL) -> bool:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            return False
        if self.kind == "simplex":
            return bool(np.all(x >= -tol) and abs(x.sum() - 1.0) <= tol)
        if self.kind == "box":
            return bool(np.all(x >= self.lo - tol) and np.all(x <= self.hi + tol))
        return all(part.contains(x[block], tol) for block, part in self.blocks())

    def sample(self, rng: np.random.Generator, count: int = 1) -> np.ndarray:
        """Random points of the set, one per row."""
        if self.kind == "simplex":
            return rng.dirichlet(np.ones(self.dim), size=count)
        if self.kind == "box":
            return self.lo + (self.hi - self.lo) * rng.random((count, self.dim))
        return np.hstack([part.sample(rng, count) for part in self.parts])

    def vertex_count(self) -> int:
        if self.kind == "simplex":
            return self.dim
        if self.kind == "box":
            return 2 ** int(np.sum(self.hi > self.lo))
        count = 1
        for part in self.parts:
            count *= part.vertex_count()
        return count

    def vertices(self, limit: int = 10 ** 6) -> List[np.ndarray]:
        """
        Enumerate all extreme points.

        Args:
            limit: Refuse to enumerate more than this many vertices

        Returns:
            List of vertices as dense arrays
        """
        if self.vertex_count() > limit:
            raise ProblemError(f"Set has {self.vertex_count()} vertices, above the enumeration limit {limit}")
        if self.kind == "simplex":
            return list(np.eye(self.dim))
        if self.kind == "box":
            free = np.flatnonzero(self.hi > self.lo)
            result = []
            for choice in itertools.product((False, True), repeat=free.size):
                v = self.lo.copy()
                v[free[list(choice)]] = self.hi[free[list(choice)]]
                result.append(v)
            return result
        return [np.concatenate(combo) for combo in itertools.product(*(part.vertices(limit) for part in self.parts))]
