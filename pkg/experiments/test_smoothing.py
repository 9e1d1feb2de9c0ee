#!/usr/bin/env python3
"""Tests for smoothing.py: approximation sandwich, monotonicity, gradients and schedules."""

import math
import sys
from pathlib import Path

import numpy as np

# Add parent directory to path to import project modules
sys.path.insert(0, str(Path(__file__).parent.parent))

from problem_model import quadratic_function
from smoothing import (
    MaxFormFunction,
    adaptive_smoothing_schedule,
    fixed_smoothing_schedule,
    huber,
    smooth_lipschitz,
    smoothed_value_grad,
)

SANDWICH_CHECKS = 100_000
TOL = 1e-9


def _identity_functions():
    functions = []
    for p in range(1, 9):
        for family in ("simplex", "box"):
            functions.append(MaxFormFunction(np.eye(p), family, name=f"{family}{p}"))
            functions.append(MaxFormFunction(np.eye(p), family, mu=0.3, name=f"{family}{p}_mu"))
    return functions


def test_sandwich_and_monotonicity():
    """h_eta <= h <= h_eta + eta D_V^2, and h_eta is nonincreasing in eta."""
    print("\n=== Smoothing sandwich and monotonicity ===")
    rng = np.random.default_rng(2024)
    functions = _identity_functions()
    for check in range(SANDWICH_CHECKS):
        fn = functions[check % len(functions)]
        x = rng.normal(scale=rng.choice([0.01, 1.0, 100.0]), size=fn.dual_size)
        eta = float(10.0 ** rng.uniform(-3, 1))
        exact = fn.exact_value(x)
        smoothed, _ = fn.value_grad(x, eta)
        wider, _ = fn.value_grad(x, 2.0 * eta)
        scale = max(1.0, abs(exact))
        assert smoothed <= exact + TOL * scale, f"{fn.name}: smoothed {smoothed} above exact {exact}"
        assert exact <= smoothed + eta * fn.prox_diameter ** 2 + TOL * scale, \
            f"{fn.name}: gap {exact - smoothed} above eta D_V^2 = {eta * fn.prox_diameter ** 2}"
        assert wider <= smoothed + TOL * scale, f"{fn.name}: value increased with eta"
    print(f"  ✓ {SANDWICH_CHECKS} randomized checks over both families")


def test_box_family_is_huber():
    """The box family with C = I is a sum of Huber pieces."""
    print("\n=== Huber pieces ===")
    u = np.array([-1.0, 0.05, 0.2, 3.0])
    fn = MaxFormFunction(np.eye(4), "box")
    value, grad = smoothed_value_grad(fn, 0.1, u)
    assert abs(value - float(np.sum(huber(u, 0.1)))) < 1e-12, f"Value {value} differs from Huber sum"
    assert np.allclose(grad, [0.0, 0.5, 1.0, 1.0]), f"Unexpected gradient {grad}"
    assert abs(fn.exact_value(u) - 3.25) < 1e-12, f"Exact hinge sum must be 3.25, got {fn.exact_value(u)}"
    print("  ✓ value, gradient and exact value")


def test_gradients_match_finite_differences():
    """Smoothed max-form gradients agree with central differences (relative 1e-5)."""
    print("\n=== Finite-difference gradients ===")
    rng = np.random.default_rng(7)
    h = 1e-6
    for family in ("simplex", "box"):
        C = rng.standard_normal((4, 6))
        fn = MaxFormFunction(C, family, offset=rng.standard_normal(4), affine=rng.standard_normal(6),
                             affine_const=0.5)
        for _ in range(100):
            x = rng.standard_normal(6)
            d = rng.standard_normal(6)
            _, grad = fn.value_grad(x, 0.5)
            numeric = (fn.value_grad(x + h * d, 0.5)[0] - fn.value_grad(x - h * d, 0.5)[0]) / (2 * h)
            analytic = float(grad @ d)
            assert abs(numeric - analytic) <= 1e-5 * max(1.0, abs(analytic)), \
                f"{family}: finite difference {numeric} vs gradient {analytic}"
        print(f"  ✓ {family}: 100 random points")


def test_nonsmooth_needs_eta():
    print("\n=== Nonsmooth evaluation guard ===")
    fn = MaxFormFunction(np.eye(2), "simplex")
    try:
        fn.value_grad(np.zeros(2), 0.0)
        assert False, "eta = 0 with mu = 0 must be rejected"
    except ValueError:
        print("  ✓ eta = 0 rejected")
    assert math.isinf(fn.lipschitz_grad), "A nonsmooth function has no finite Lipschitz gradient"
    assert abs(smooth_lipschitz(fn, 0.5) - fn.norm_C ** 2 / 0.5) < 1e-12, "Smoothed Lipschitz constant"
    print("  ✓ Lipschitz constants")


def test_schedules():
    """Fixed weights follow ||C|| D_X / (D_V sqrt N); adaptive weights shrink with k."""
    print("\n=== Smoothing schedules ===")
    hinge = MaxFormFunction(np.eye(3), "box")
    smooth = quadratic_function(np.eye(3), np.zeros(3))
    params = fixed_smoothing_schedule([smooth, hinge], 100, 2.0)
    expected = hinge.norm_C * 2.0 / (hinge.prox_diameter * 10.0)
    assert params.eta[0] == 0.0, "Smooth components get eta = 0"
    assert abs(params.eta[1] - expected) < 1e-12, f"Expected {expected}, got {params.eta[1]}"
    print("  ✓ fixed weights")

    previous = math.inf
    for k in range(1, 200):
        eta = adaptive_smoothing_schedule([hinge], k, 2.0).eta[0]
        assert eta <= previous, f"Adaptive weight increased at k={k}"
        previous = eta
    assert abs(adaptive_smoothing_schedule([hinge], 100, 2.0).eta[0] - expected) < 1e-12, \
        "Adaptive weight at k = N must equal the fixed weight for N"
    print("  ✓ adaptive weights nonincreasing")


def main():
    """Run all tests."""
    print("=" * 60)
    print("Testing smoothing.py")
    print("=" * 60)

    tests = [
        test_box_family_is_huber,
        test_nonsmooth_needs_eta,
        test_gradients_match_finite_differences,
        test_schedules,
        test_sandwich_and_monotonicity,
    ]
    try:
        for test in tests:
            test()
    except AssertionError as e:
        print(f"\n✗ Test failed: {e}")
        sys.exit(1)

    print("\n" + "=" * 60)
    print("All tests passed!")
    print("=" * 60)


if __name__ == "__main__":
    main()
