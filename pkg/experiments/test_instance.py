#!/usr/bin/env python3
"""Tests for imrt_instance.py: geometry counts, ray tracing, generation and instance files."""

import shutil
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

# Add parent directory to path to import project modules
sys.path.insert(0, str(Path(__file__).parent.parent))

from benchmarks import tiny_imrt_config
from imrt import enumerate_apertures
from imrt_instance import (
    InstanceError,
    InstanceGeometry,
    generate_instance,
    load_instance,
    save_instance,
    trace_line_2d,
)


def test_geometry_counts():
    """Voxel and aperture counts of the standard body sizes."""
    print("\n=== Geometry counts ===")
    for l, expected in ((8.0, 4096), (32.0, 262144)):
        geometry = InstanceGeometry(l, 1.0, [], [0.0], 2, 3, 6)
        assert geometry.n_voxels == expected, f"l={l}: expected {expected} voxels, got {geometry.n_voxels}"
    print("  ✓ 16^3 and 64^3 voxels")

    geometry = InstanceGeometry(8.0, 1.0, [], [2.0 * a for a in range(180)], 2, 3, 6)
    assert geometry.apertures_per_angle() == 49, f"Expected 49 shapes, got {geometry.apertures_per_angle()}"
    total = geometry.n_angles * geometry.apertures_per_angle()
    assert total == 8820, f"Expected 8820 apertures over 180 angles, got {total}"
    print("  ✓ 49 shapes per angle, 8820 over 180 angles")

    for rows, cols in ((2, 3), (1, 5), (3, 2)):
        geometry = InstanceGeometry(8.0, 1.0, [], [0.0], rows, cols, rows * cols)
        enumerated = sum(1 for _ in enumerate_apertures(0, rows, cols))
        assert enumerated == geometry.apertures_per_angle(), \
            f"{rows}x{cols}: {enumerated} enumerated shapes vs {geometry.apertures_per_angle()} counted"
    print("  ✓ shape count matches the enumerated family")


def test_trace_line():
    print("\n=== Ray tracing ===")
    cells = trace_line_2d(np.array([0.5, -5.0]), np.array([0.0, 1.0]), 2.0, 1.0)
    assert cells == [(2, 0), (2, 1), (2, 2), (2, 3)], f"Unexpected axis-aligned cells {cells}"
    diagonal = trace_line_2d(np.array([-3.0, -3.0]), np.array([1.0, 1.0]) / np.sqrt(2.0), 2.0, 1.0)
    assert diagonal[0] == (0, 0) and diagonal[-1] == (3, 3), f"Unexpected diagonal cells {diagonal}"
    assert trace_line_2d(np.array([5.0, 0.0]), np.array([0.0, 1.0]), 2.0, 1.0) == [], "Missing line must cross nothing"
    print("  ✓ axis-aligned, diagonal and missing lines")


def test_generation_is_deterministic():
    print("\n=== Seeded generation ===")
    # off-grid beamlets make the dose depend on the seed
    first = generate_instance(replace(tiny_imrt_config(seed=4), beamlets_per_angle=10))
    second = generate_instance(replace(tiny_imrt_config(seed=4), beamlets_per_angle=10))
    other = generate_instance(replace(tiny_imrt_config(seed=5), beamlets_per_angle=10))
    assert (first.dose.matrix != second.dose.matrix).nnz == 0, "Same seed gave different dose matrices"
    assert first.geometry.structures == second.geometry.structures, "Same seed gave different structures"
    assert first.dose_rate == second.dose_rate, "Same seed gave different dose rates"
    assert (first.dose.matrix != other.dose.matrix).nnz > 0, "Different seeds gave the same dose matrix"
    print("  ✓ same seed identical, different seed differs")

    assert first.n_voxels == 64 and first.dose.matrix.shape == (6 * 6, 64), "Unexpected tiny instance shape"
    assert first.dose.matrix.min() >= 0.0, "Dose must be nonnegative"
    tumor = first.structure_voxels["tumor0"]
    assert not np.intersect1d(tumor, first.structure_voxels["organ0"]).size, "Tumor voxels must not be organ voxels"
    print("  ✓ shapes, nonnegative dose, disjoint structures")


def test_instance_files():
    """Saved files reload exactly and are byte-identical for a repeated seed."""
    print("\n=== Instance files ===")
    temp_dir = Path(tempfile.mkdtemp())
    try:
        instance = generate_instance(tiny_imrt_config(seed=6))
        assert save_instance(instance, temp_dir / "a.json", temp_dir / "a.dose"), "save_instance failed"
        assert save_instance(generate_instance(tiny_imrt_config(seed=6)), temp_dir / "b.json", temp_dir / "b.dose"), \
            "save_instance failed"
        assert (temp_dir / "a.dose").read_bytes() == (temp_dir / "b.dose").read_bytes(), "Dose files differ"
        assert (temp_dir / "a.json").read_bytes() == (temp_dir / "b.json").read_bytes(), "Geometry files differ"
        print("  ✓ byte-identical files for the same seed")

        loaded = load_instance(temp_dir / "a.json")
        assert (loaded.dose.matrix != instance.dose.matrix).nnz == 0, "Dose changed on reload"
        assert loaded.criteria == instance.criteria, "Criteria changed on reload"
        assert loaded.dose_rate == instance.dose_rate and loaded.phi == instance.phi, "Scalars changed on reload"
        for name, voxels in instance.structure_voxels.items():
            assert np.array_equal(loaded.structure_voxels[name], voxels), f"Voxels of {name} changed"
        print("  ✓ reload matches")

        corrupted = temp_dir / "bad.dose"
        corrupted.write_bytes(b"NOTADOSE" + (temp_dir / "a.dose").read_bytes()[8:])
        try:
            load_instance(temp_dir / "a.json", corrupted)
            assert False, "Bad magic must be rejected"
        except InstanceError:
            print("  ✓ bad magic rejected")

        truncated = temp_dir / "short.dose"
        truncated.write_bytes((temp_dir / "a.dose").read_bytes()[:-5])
        try:
            load_instance(temp_dir / "a.json", truncated)
            assert False, "Truncated dose file must be rejected"
        except InstanceError:
            print("  ✓ truncated file rejected")
    finally:
        shutil.rmtree(temp_dir)


def test_invalid_configurations():
    print("\n=== Invalid configurations ===")
    try:
        generate_instance(replace(tiny_imrt_config(), tumor_edge=4.0))
        assert False, "An organ covered by the tumor must be rejected"
    except InstanceError as e:
        assert "organ0" in str(e), f"Error must name the empty structure: {e}"
        print("  ✓ empty organ rejected by name")

    try:
        generate_instance(replace(tiny_imrt_config(), delta=0.3))
        assert False, "delta not dividing 2l must be rejected"
    except InstanceError:
        print("  ✓ bad delta rejected")


def main():
    """Run all tests."""
    print("=" * 60)
    print("Testing imrt_instance.py")
    print("=" * 60)

    tests = [
        test_geometry_counts,
        test_trace_line,
        test_generation_is_deterministic,
        test_instance_files,
        test_invalid_configurations,
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
