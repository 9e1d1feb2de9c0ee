#!/usr/bin/env python3
"""Tests for imrt.py: aperture oracle, plan algebra, CVaR and group-sparsity functions, DVH."""

import math
import sys
from pathlib import Path

import numpy as np

# Add parent directory to path to import project modules
sys.path.insert(0, str(Path(__file__).parent.parent))

from baseline_conex import run_conex
from benchmarks import dense_imrt_comparison, tiny_imrt_config
from imrt import (
    Aperture,
    ApertureSet,
    GroupSparsityFunction,
    PlanPoint,
    aperture_incidence_norm,
    aperture_lmo,
    aperture_score,
    build_problem,
    count_selected_angles,
    cvar_constraint,
    dose_operator_norm,
    dvh_curve,
    enumerate_apertures,
    evaluate_dvh_criteria,
    group_sparsity_value,
    min_row_intervals,
    objective_value_grad,
    plan_to_dict,
    recompute_dose,
)
from imrt_instance import generate_instance
from problem_model import estimate_op_norm, infeasibility
from solver_coexcg import run_coexcg
from solver_coexdurcg import run_adaptive_nonsmooth

LMO_TRIALS = 1000
VIOLATION_FLOOR = 1e-6
PHI_SWEEP = (1.0, 0.05, 0.005)
SWEEP_ITERATIONS = 400


def _brute_force_lmo(scores, apertures, group=None, absent=None):
    """Smallest priced score over an explicit aperture list; (None, 0.0) when nothing is negative."""
    group = group or {}
    best, best_value = None, 0.0
    for aperture in apertures:
        if aperture.key in group:
            price = group[aperture.key]
        else:
            price = 0.0 if absent is None else float(absent[aperture.angle])
        value = aperture_score(scores[aperture.angle], aperture.intervals) + price
        if value < best_value:
            best, best_value = aperture, value
    return best, best_value


def _all_apertures(instance):
    geometry = instance.geometry
    return [aperture for a in range(geometry.n_angles)
            for aperture in enumerate_apertures(a, geometry.rows, geometry.cols)]


def test_row_intervals():
    print("\n=== Minimum row intervals ===")
    starts, stops, sums = min_row_intervals(np.array([[-1.0, 2.0, -3.0], [1.0, 0.5, 2.0]]))
    assert (starts[0], stops[0], sums[0]) == (2, 3, -3.0), f"Row 0: got {(starts[0], stops[0], sums[0])}"
    assert (starts[1], stops[1], sums[1]) == (0, 0, 0.0), f"Row 1 must be empty, got {(starts[1], stops[1])}"
    print("  ✓ negative row and empty row")

    aperture = Aperture(4, ((0, 0), (1, 3)))
    assert aperture.leaf_pairs() == [(0, 1), (1, 4)], f"Unexpected leaf pairs {aperture.leaf_pairs()}"
    assert Aperture.from_leaf_pairs(4, aperture.leaf_pairs()) == aperture, "Leaf pairs do not map back"
    assert aperture.beamlets(3, 6) == [4 * 6 + 3 + 1, 4 * 6 + 3 + 2], f"Unexpected beamlets {aperture.beamlets(3, 6)}"
    print("  ✓ leaf pairs and beamlet indices")

    shapes = list(enumerate_apertures(0, 2, 3))
    assert len(shapes) == 49 and len(set(shapes)) == 49, f"Expected 49 distinct shapes, got {len(set(shapes))}"
    print("  ✓ 49 shapes on a 2x3 grid")


def test_lmo_matches_brute_force():
    """The row-wise oracle returns the enumerated minimum to the last bit."""
    print("\n=== Aperture oracle against enumeration ===")
    for rows, cols in ((2, 3), (1, 5)):
        instance = generate_instance(tiny_imrt_config(seed=3, rows=rows, cols=cols))
        apertures = _all_apertures(instance)
        rng = np.random.default_rng(rows * 10 + cols)
        empty_results = 0
        for trial in range(LMO_TRIALS):
            pi = rng.normal(size=instance.n_voxels)
            if trial % 10 == 0:
                pi = np.abs(pi)
            scores = instance.dose.beamlet_scores(pi) * instance.dose_rate
            expected, expected_value = _brute_force_lmo(scores, apertures)
            aperture, psi = aperture_lmo(pi, instance)
            assert psi == expected_value, f"{rows}x{cols} trial {trial}: psi {psi} vs enumerated {expected_value}"
            if expected is None:
                assert aperture is None, "No negative aperture exists, oracle must return None"
                empty_results += 1
            else:
                assert aperture_score(scores[aperture.angle], aperture.intervals) == psi, \
                    "Returned aperture does not attain psi"
        print(f"  ✓ {rows}x{cols}: {LMO_TRIALS} price vectors ({empty_results} with no improving aperture)")


def test_lmo_with_group_prices():
    """Active apertures carry their own price; the best unpriced shape may be excluded."""
    print("\n=== Aperture oracle with per-aperture prices ===")
    instance = generate_instance(tiny_imrt_config(seed=5))
    apertures = _all_apertures(instance)
    rng = np.random.default_rng(17)
    for trial in range(LMO_TRIALS):
        pi = rng.normal(size=instance.n_voxels)
        scores = instance.dose.beamlet_scores(pi) * instance.dose_rate
        starts, stops, _ = min_row_intervals(scores)
        group = {}
        for a in rng.choice(instance.geometry.n_angles, size=2, replace=False):
            best_shape = tuple((int(s), int(e)) for s, e in zip(starts[a], stops[a]))
            group[(int(a), best_shape)] = float(rng.uniform(-1.0, 5.0))
        for index in rng.choice(len(apertures), size=3, replace=False):
            group[apertures[index].key] = float(rng.uniform(-1.0, 1.0))
        absent = rng.uniform(-0.5, 0.5, size=instance.geometry.n_angles)

        _, expected_value = _brute_force_lmo(scores, apertures, group, absent)
        aperture, psi = aperture_lmo(pi, instance, group, absent)
        assert psi == expected_value, f"Trial {trial}: psi {psi} vs enumerated {expected_value}"
    print(f"  ✓ {LMO_TRIALS} priced trials")


def test_objective_worked_values():
    print("\n=== Dose penalty ===")
    value, grad = objective_value_grad(np.array([58.0]), np.array([56.0]), np.array([56.0]))
    assert value == 4.0, f"Expected 4.0, got {value}"
    assert grad[0] == 4.0, f"Expected gradient 4.0, got {grad[0]}"
    value, _ = objective_value_grad(np.array([50.0, 0.0]), np.array([56.0, 0.0]), np.array([56.0, 0.0]))
    assert value == 18.0, f"Expected (6^2)/2 = 18, got {value}"
    print("  ✓ overdose and underdose values")

    rng = np.random.default_rng(1)
    lower = upper = np.where(rng.random(30) < 0.3, 56.0, 0.0)
    h = 1e-6
    for _ in range(50):
        z = rng.uniform(0.0, 80.0, size=30)
        d = rng.standard_normal(30)
        _, grad = objective_value_grad(z, lower, upper)
        numeric = (objective_value_grad(z + h * d, lower, upper)[0]
                   - objective_value_grad(z - h * d, lower, upper)[0]) / (2 * h)
        assert abs(numeric - grad @ d) <= 1e-5 * max(1.0, abs(grad @ d)), "Penalty gradient mismatch"
    print("  ✓ finite differences")


def test_cvar_worked_values():
    print("\n=== CVaR criteria ===")
    assert cvar_constraint("overdose", np.array([10.0, 0.0]), 10.0, 8.0, 0.5) == 2.0, "Overdose value"
    assert cvar_constraint("underdose", np.full(5, 30.0), 30.0, 30.0, 0.2) == 0.0, "Underdose at the bound"
    assert cvar_constraint("overdose", np.zeros(3), 0.0, 1.0, 0.1) == -1.0, "Zero dose value"
    for bad in (0.0, 1.0):
        try:
            cvar_constraint("overdose", np.ones(2), 0.0, 1.0, bad)
            assert False, f"p = {bad} must be rejected"
        except ValueError:
            pass
    print("  ✓ worked values and p range")


def test_normalized_cvar_matches_raw_value():
    """Each CVaR constraint equals the raw criterion divided by b; its smoothed gradient is correct."""
    print("\n=== Normalized CVaR functions ===")
    instance = generate_instance(tiny_imrt_config(seed=1))
    spec = build_problem(instance)
    rng = np.random.default_rng(4)
    h = 1e-6
    for i, criterion in enumerate(instance.criteria):
        fn = spec.constraints.items[i]
        voxels = instance.structure_voxels[criterion.structure]
        for _ in range(20):
            x = PlanPoint({}, rng.uniform(0.0, 80.0, size=instance.n_voxels),
                          rng.uniform(spec.feasible_set.tau_lo, spec.feasible_set.tau_hi))
            raw = cvar_constraint(criterion.direction, x.z[voxels], x.tau[i] * criterion.b, criterion.b, criterion.p)
            assert abs(fn.exact_value(x) - raw / criterion.b) < 1e-10, f"{fn.name}: normalized value mismatch"

            d = PlanPoint({}, rng.standard_normal(instance.n_voxels), rng.standard_normal(len(instance.criteria)))
            _, grad = fn.value_grad(x, 0.05)
            numeric = (fn.value_grad(x + h * d, 0.05)[0] - fn.value_grad(x - h * d, 0.05)[0]) / (2 * h)
            assert abs(numeric - grad.dot(d)) <= 1e-5 * max(1.0, abs(grad.dot(d))), \
                f"{fn.name}: finite difference {numeric} vs gradient {grad.dot(d)}"
        print(f"  ✓ {fn.name}")


def test_group_sparsity():
    print("\n=== Group sparsity ===")
    instance = generate_instance(tiny_imrt_config(seed=1))
    tau = np.ones(len(instance.criteria))
    z = np.zeros(instance.n_voxels)
    shape_a, shape_b = ((0, 1), (0, 0)), ((0, 3), (1, 2))

    assert group_sparsity_value(PlanPoint({}, z, tau), 0.2) == -0.2, "Empty plan must give -phi"
    same_angle = PlanPoint({(2, shape_a): 0.3, (2, shape_b): 0.1}, z, tau)
    assert abs(group_sparsity_value(same_angle, 0.2) - 0.1) < 1e-15, "Same-angle plan must give 0.1"
    print("  ✓ worked values")

    rng = np.random.default_rng(8)
    shapes = list(enumerate_apertures(0, instance.geometry.rows, instance.geometry.cols))
    for _ in range(200):
        keys = {(int(rng.integers(instance.geometry.n_angles)), shapes[int(rng.integers(len(shapes)))])
                for _ in range(5)}
        weights = rng.dirichlet(np.ones(len(keys))) * rng.uniform(0.0, 1.0)
        plan = PlanPoint(dict(zip(sorted(keys), weights)), z, tau)
        assert group_sparsity_value(plan, 1.0) <= 1e-15, "phi = 1 can never be violated"
    print("  ✓ phi = 1 never violated")

    fn = build_problem(instance).constraints.items[-1]
    h = 1e-6
    for _ in range(50):
        keys = sorted({(int(rng.integers(instance.geometry.n_angles)), shapes[int(rng.integers(len(shapes)))])
                       for _ in range(4)})
        x = PlanPoint(dict(zip(keys, rng.uniform(0.05, 0.25, size=len(keys)))), z, tau)
        eta = float(rng.uniform(0.01, 0.5))
        smoothed, grad = fn.value_grad(x, eta)
        exact = fn.exact_value(x)
        assert smoothed <= exact + 1e-12, f"Smoothed {smoothed} above exact {exact}"
        assert exact <= smoothed + eta * fn.prox_diameter ** 2 + 1e-12, "Smoothing gap too large"

        new_key = (int(rng.integers(instance.geometry.n_angles)), shapes[int(rng.integers(1, len(shapes)))])
        direction = {key: float(rng.standard_normal()) for key in keys}
        if new_key not in direction:
            direction[new_key] = 1.0
        d = PlanPoint(direction, np.zeros_like(z), np.zeros_like(tau))
        numeric = (fn.value_grad(x + h * d, eta)[0] - fn.value_grad(x - h * d, eta)[0]) / (2 * h)
        assert abs(numeric - grad.dot(d)) <= 1e-5 * max(1.0, abs(grad.dot(d))), \
            f"Group gradient mismatch: {numeric} vs {grad.dot(d)}"
    print("  ✓ sandwich and finite differences (active and absent apertures)")


def test_group_smoothing_gap_at_small_eta():
    """With one dominant atom per angle the gap reaches eta * n_angles * log T and no further."""
    print("\n=== Group sparsity smoothing gap ===")
    phi, eta = 0.2, 1e-3
    fn = GroupSparsityFunction(6, 9, phi, n_voxels=1, n_tau=0)
    x = PlanPoint({(a, ((0, 1),)): 0.15 for a in range(6)}, np.zeros(1), np.zeros(0))
    smoothed, grad = fn.value_grad(x, eta)
    exact = fn.exact_value(x)
    bound = eta * fn.prox_diameter ** 2
    assert abs(exact - 3.5) < 1e-12, f"Expected 6 * 0.15 / 0.2 - 1 = 3.5, got {exact}"
    assert abs(bound - 6 * eta * math.log(9)) < 1e-15, f"Unexpected gap bound {bound}"
    assert smoothed <= exact + 1e-12, f"Smoothed {smoothed} above exact {exact}"
    assert exact - smoothed <= bound + 1e-12, f"Gap {exact - smoothed} exceeds eta * D_V^2 = {bound}"
    assert exact - smoothed >= 0.99 * bound, f"Gap {exact - smoothed} should be nearly tight at {bound}"
    print(f"  ✓ gap {exact - smoothed:.6f} within {bound:.6f}")

    for a in range(6):
        price = grad.coefficient((a, ((0, 1),)))
        assert abs(price - 1.0 / phi) < 1e-12, f"Angle {a}: dominant atom priced {price}, expected 1 / phi"
    print("  ✓ dominant atoms priced at 1 / phi")


def test_dose_operator_bound():
    """The intensity-to-dose norm bound holds over every enumerated aperture."""
    print("\n=== Intensity-to-dose operator norm ===")
    for rows, cols in ((2, 3), (1, 5), (3, 2)):
        shapes = list(enumerate_apertures(0, rows, cols))
        incidence = np.zeros((rows * cols, len(shapes)))
        for t, aperture in enumerate(shapes):
            incidence[aperture.beamlets(cols, rows * cols), t] = 1.0
        exact = np.linalg.norm(incidence, 2)
        closed_form = aperture_incidence_norm(rows, cols)
        assert abs(exact - closed_form) <= 1e-9 * exact, f"{rows}x{cols}: incidence norm {closed_form} vs {exact}"
    print("  ✓ closed-form incidence norms match enumeration")

    instance = generate_instance(tiny_imrt_config(seed=1))
    feasible_set = ApertureSet(instance)
    columns = np.column_stack([feasible_set.aperture_dose(aperture) for aperture in _all_apertures(instance)])
    estimate = estimate_op_norm(columns)
    exact = np.linalg.norm(columns, 2)
    bound = dose_operator_norm(instance)
    assert estimate.converged, "Power iteration on the enumerated dose matrix did not converge"
    assert abs(estimate.sigma - exact) <= 1e-6 * exact, f"Power iteration {estimate.sigma} vs SVD {exact}"
    assert exact <= bound * (1.0 + 1e-9), f"Claimed bound {bound} below the enumerated norm {exact}"
    largest_single = float(np.max(np.linalg.norm(columns, axis=0)))
    assert exact > largest_single, "A single aperture's dose norm cannot bound the l2 operator norm"
    print(f"  ✓ {columns.shape[1]} apertures: norm {exact:.4g} <= bound {bound:.4g}")

    spec = build_problem(instance)
    expected_lf = 2.0 / instance.n_voxels * bound ** 2
    assert abs(spec.objective.lipschitz_grad - expected_lf) <= 1e-12 * expected_lf, "L_f must use the dose bound"
    print("  ✓ objective smoothness built on the bound")


def test_dvh_and_angles():
    print("\n=== DVH and angle counts ===")
    _, fractions = dvh_curve(np.array([40.0, 60.0]), np.array([50.0]))
    assert fractions[0] == 0.5, f"Expected 0.5, got {fractions[0]}"
    _, fractions = dvh_curve(np.full(4, 56.0), np.array([0.0, 56.0, 56.1]))
    assert list(fractions) == [1.0, 1.0, 0.0], f"Unexpected fractions {fractions}"
    grid, fractions = dvh_curve(np.array([10.0]))
    assert grid.size == 801 and grid[-1] == 80.0, "Default grid is 0..80 Gy by 0.1"
    print("  ✓ DVH fractions")

    plan = PlanPoint({(3, ((0, 1),)): 0.2, (3, ((1, 2),)): 0.2, (7, ((0, 2),)): 0.2}, np.zeros(1), np.zeros(0))
    assert count_selected_angles(plan) == 2, f"Expected 2 angles, got {count_selected_angles(plan)}"
    tiny = PlanPoint({(1, ((0, 1),)): 1e-9}, np.zeros(1), np.zeros(0))
    assert count_selected_angles(tiny) == 0, "Intensities below the floor do not count"
    print("  ✓ selected angles")


def test_short_run_on_tiny_instance():
    """A short CoexCG run keeps its dose consistent with its atoms and stays in the feasible set."""
    print("\n=== Short run on a tiny instance ===")
    instance = generate_instance(tiny_imrt_config(seed=2))
    spec = build_problem(instance)
    result = run_coexcg(spec, 30)
    plan = result.x
    assert isinstance(plan, PlanPoint), "Iterates must stay plan points"
    assert spec.feasible_set.contains(plan), "Plan left the feasible set"
    scale = max(1.0, float(np.max(np.abs(plan.z))))
    assert np.max(np.abs(recompute_dose(plan, instance) - plan.z)) <= 1e-9 * scale, "Dose drifted from atoms"
    assert len(result.trace) == 30 and np.isfinite(infeasibility(spec, plan)), "Trace incomplete"
    print(f"  ✓ {len(plan.atoms)} atoms, dose consistent")

    document = plan_to_dict(plan, instance)
    assert len(document["atoms"]) == len(plan.atoms), "Export lost atoms"
    for tau, criterion in zip(document["tau"], instance.criteria):
        lo, hi = criterion.tau_bounds
        assert lo - 1e-9 <= tau <= hi + 1e-9, f"Threshold {tau} outside [{lo}, {hi}]"
    rows = evaluate_dvh_criteria(plan, instance)
    assert rows and all(0.0 <= row["fraction"] <= 1.0 for row in rows), "Bad DVH criteria table"
    print("  ✓ plan export and DVH criteria")

    assert isinstance(ApertureSet(instance).start().point, PlanPoint), "Start vertex must be a plan point"


def test_dense_rendition_with_projection_baseline():
    print("\n=== Dense rendition ===")
    spec, instance, apertures = dense_imrt_comparison(seed=0, extra_apertures=8)
    assert spec.feasible_set.dim == len(apertures) + 1 + len(instance.criteria), "Unexpected dense dimension"
    result = run_conex(spec, 50)
    assert spec.feasible_set.contains(result.x), "Projection baseline left the set"
    assert np.all(np.isfinite(result.trace.column("infeasibility"))), "Non-finite infeasibility"
    print(f"  ✓ {spec.feasible_set.dim} variables, 50 projected iterations")


def test_violation_drops_with_iterations():
    """Normalized constraint violation falls at least fivefold from a short run to a 25x longer one."""
    print("\n=== Violation trend on a tiny instance ===")
    instance = generate_instance(tiny_imrt_config(seed=4))
    spec = build_problem(instance, phi=0.2)
    short_n, long_n = 100, 2500

    anytime = run_adaptive_nonsmooth(spec, max_iter=long_n).trace.column("infeasibility")
    runs = (("coexcg", run_coexcg(spec, short_n).trace.final.infeasibility,
             run_coexcg(spec, long_n).trace.final.infeasibility),
            ("adaptive", float(anytime[short_n - 1]), float(anytime[long_n - 1])))
    for label, early, late in runs:
        assert late <= max(early / 5.0, VIOLATION_FLOOR), \
            f"{label}: violation {early:.3e} at N={short_n} but {late:.3e} at N={long_n}"
        print(f"  ✓ {label}: {early:.3e} -> {late:.3e}")


def test_phi_sweep_on_tiny_instance():
    """Tightening phi never selects more angles and never lowers the final dose penalty."""
    print("\n=== Phi sweep on a tiny instance ===")
    instance = generate_instance(tiny_imrt_config(seed=1))
    counts, objectives = [], []
    for phi in PHI_SWEEP:
        result = run_coexcg(build_problem(instance, phi=phi), SWEEP_ITERATIONS)
        counts.append(count_selected_angles(result.x))
        objectives.append(result.trace.final.objective)
        print(f"  phi={phi:g}: {counts[-1]} angles, objective {objectives[-1]:.6g}")
    assert all(a >= b for a, b in zip(counts, counts[1:])), f"Angle counts not nonincreasing: {counts}"
    assert all(b >= a * (1.0 - 1e-9) for a, b in zip(objectives, objectives[1:])), \
        f"Objectives not nondecreasing: {objectives}"
    print("  ✓ monotone angle counts and objectives")


def main():
    """Run all tests."""
    print("=" * 60)
    print("Testing imrt.py")
    print("=" * 60)

    tests = [
        test_row_intervals,
        test_objective_worked_values,
        test_cvar_worked_values,
        test_normalized_cvar_matches_raw_value,
        test_group_sparsity,
        test_group_smoothing_gap_at_small_eta,
        test_dose_operator_bound,
        test_dvh_and_angles,
        test_lmo_matches_brute_force,
        test_lmo_with_group_prices,
        test_short_run_on_tiny_instance,
        test_dense_rendition_with_projection_baseline,
        test_violation_drops_with_iterations,
        test_phi_sweep_on_tiny_instance,
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
