#!/usr/bin/env python3
"""Tests for the step-size schedules of both solvers."""

import math
import sys
from dataclasses import dataclass
from pathlib import Path

# Add parent directory to path to import project modules
sys.path.insert(0, str(Path(__file__).parent.parent))

import solver_coexcg
import solver_coexdurcg
from problem_model import ProblemError
from solver_coexcg import ScheduleCoexCG, schedule_coexcg
from solver_coexdurcg import ScheduleCoexDurCG, schedule_coexdurcg

FLOAT_HORIZON = 100_000
EXACT_HORIZON = 1_000


@dataclass(frozen=True)
class GrowingTauSchedule(ScheduleCoexCG):
    """tau_k increasing in k breaks the monotonicity condition."""

    def tau(self, k: int) -> float:
        return self.N ** 1.5 * k * self.scale


def test_coexcg_schedule_values():
    print("\n=== CoexCG schedule values ===")
    schedule = schedule_coexcg(100, 2.0, 1.5, 0.5)
    scale = 2.0 * math.sqrt(9.0 * 1.5 ** 2 + 0.5 ** 2)
    assert schedule.alpha(1) == 1.0, "alpha_1 must be 1"
    assert schedule.lam(1) == 0.0, "lambda_1 must be 0"
    assert abs(schedule.tau(10) - 1000.0 / 10 * scale) < 1e-9, f"Unexpected tau_10 {schedule.tau(10)}"
    assert schedule.Gamma(3) == 2.0 / 12.0, "Gamma_k = 2/(k(k+1))"
    print("  ✓ alpha, lambda, tau, Gamma")

    try:
        schedule_coexcg(0, 1.0, 1.0, 1.0)
        assert False, "N = 0 must be rejected"
    except ProblemError:
        print("  ✓ N = 0 rejected")


def test_coexcg_conditions():
    """Floating-point checks up to 1e5, exact rational checks up to 1e3."""
    print("\n=== CoexCG schedule conditions ===")
    schedule = schedule_coexcg(FLOAT_HORIZON, 1.7, 3.0, 0.4)
    assert schedule.check_conditions(), "Float conditions failed"
    print(f"  ✓ float conditions for k <= {FLOAT_HORIZON}")
    assert solver_coexcg.schedule_conditions_exact(EXACT_HORIZON), "Exact conditions failed"
    print(f"  ✓ exact conditions for k <= {EXACT_HORIZON}")

    bad = GrowingTauSchedule(50, 1.0, 1.0, 1.0)
    assert not bad.check_conditions(), "An increasing tau must violate the conditions"
    print("  ✓ increasing tau detected")


def test_coexdurcg_schedule_values():
    print("\n=== CoexDurCG schedule values ===")
    beta = 1.5 * math.sqrt(9.0 * 2.0 ** 2 + 0.7 ** 2)
    params = schedule_coexdurcg(4, 1.5, 2.0, 0.7)
    assert params.alpha == 0.4, f"alpha_4 must be 0.4, got {params.alpha}"
    assert params.lam == 0.75, f"lambda_4 must be 0.75, got {params.lam}"
    assert abs(params.tau - 2.0 * beta) < 1e-12, f"tau_4 must be 2 beta, got {params.tau}"
    assert abs(params.gamma - beta / 4.0 * (5.0 ** 1.5 - 8.0)) < 1e-12, f"Unexpected gamma_4 {params.gamma}"
    print("  ✓ alpha, lambda, tau, gamma")

    nonsmooth = schedule_coexdurcg(4, 1.5, 2.0, 0.7, nonsmooth=True)
    assert nonsmooth.tau > params.tau, "The nonsmooth constant 12 must give a larger tau"
    print("  ✓ nonsmooth constant")

    try:
        schedule_coexdurcg(0, 1.0, 1.0, 1.0)
        assert False, "k = 0 must be rejected"
    except ValueError:
        print("  ✓ k = 0 rejected")


def test_coexdurcg_conditions():
    """The anytime schedule satisfies its conditions for every k, independent of any horizon."""
    print("\n=== CoexDurCG schedule conditions ===")
    schedule = ScheduleCoexDurCG.from_constants(1.5, 2.0, 0.7)
    assert schedule.check_conditions(FLOAT_HORIZON), "Float conditions failed"
    print(f"  ✓ float conditions for k <= {FLOAT_HORIZON}")
    assert solver_coexdurcg.schedule_conditions_exact(EXACT_HORIZON), "Exact conditions failed"
    print(f"  ✓ exact conditions for k <= {EXACT_HORIZON}")

    for k in (1, 10, 1000):
        assert schedule.params(k) == ScheduleCoexDurCG.from_constants(1.5, 2.0, 0.7).params(k), \
            f"Parameters at k={k} must depend on k alone"
    print("  ✓ parameters depend on k alone")


def main():
    """Run all tests."""
    print("=" * 60)
    print("Testing step-size schedules")
    print("=" * 60)

    tests = [
        test_coexcg_schedule_values,
        test_coexcg_conditions,
        test_coexdurcg_schedule_values,
        test_coexdurcg_conditions,
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
