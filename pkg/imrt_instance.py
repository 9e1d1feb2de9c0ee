#!/usr/bin/env python3
"""
Synthetic radiation-therapy instances.

The body is the cube [-l, l]^3 cut into voxels of edge delta. Tumors and
organs are axis-aligned cuboids. Beams sit on a circle of radius 2l in the
plane x = 0, one every `angle_step` degrees. Each angle carries a collimator
grid of rows x cols cells over [-l, l]^2; beamlets are lines perpendicular to
the collimator plane, and a voxel crossed by a beamlet receives 2/d per unit
intensity, d being its distance to the collimator plane.

Instances are stored as a geometry JSON file next to a binary dose file.
"""

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp


logger = logging.getLogger(__name__)

DOSE_MAGIC = b"COEXDOSE"
DOSE_VERSION = 1
DOSE_HEADER = struct.Struct("<8sIIIIIQ")
GEOMETRY_VERSION = 1

STRUCTURE_KINDS = ("tumor", "organ", "body")
DIRECTIONS = ("overdose", "underdose")


class InstanceError(ValueError):
    """Raised for invalid geometry, empty structures and corrupted instance files."""


@dataclass(frozen=True)
class Structure:
    name: str
    kind: str
    lower: Tuple[float, float, float]
    upper: Tuple[float, float, float]


@dataclass(frozen=True)
class ClinicalCriterion:
    """CVaR dose criterion on one structure."""
    structure: str
    direction: str
    b: float
    p: float
    tau_bounds: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise InstanceError(f"Criterion direction must be one of {DIRECTIONS}, got '{self.direction}'")
        if not 0.0 < self.p < 1.0:
            raise InstanceError(f"Tail fraction p must lie in (0, 1), got {self.p}")
        if self.b <= 0:
            raise InstanceError(f"Dose threshold b must be positive, got {self.b}")
        if self.tau_bounds is None:
            bounds = (0.5 * self.b, self.b) if self.direction == "overdose" else (self.b, 2.0 * self.b)
            object.__setattr__(self, "tau_bounds", bounds)
        else:
            object.__setattr__(self, "tau_bounds", tuple(float(v) for v in self.tau_bounds))


def default_criteria() -> List[ClinicalCriterion]:
    """Two underdose criteria on the tumors and one overdose criterion on the first organ."""
    return [
        ClinicalCriterion("tumor0", "underdose", 30.0, 0.05),
        ClinicalCriterion("tumor1", "underdose", 40.0, 0.05),
        ClinicalCriterion("organ0", "overdose", 200.0, 0.05),
    ]


@dataclass
class GeneratorConfig:
    """Parameters of generate_instance."""
    seed: int = 0
    l: float = 8.0
    delta: float = 1.0
    n_angles: int = 180
    angle_step: float = 2.0
    rows: Optional[int] = None
    cols: Optional[int] = None
    beamlets_per_angle: Optional[int] = None
    tumor_count: int = 2
    tumor_edge: float = 3.0
    organ_count: int = 2
    organ_edges: Tuple[float, float, float] = (6.0, 4.0, 4.0)
    prescription: float = 56.0
    dose_rate: Union[str, float] = "auto"
    phi: float = 0.2
    criteria: List[ClinicalCriterion] = field(default_factory=default_criteria)

    @classmethod
    def from_dict(cls, doc: Dict) -> "GeneratorConfig":
        doc = dict(doc)
        if "criteria" in doc:
            doc["criteria"] = [c if isinstance(c, ClinicalCriterion) else ClinicalCriterion(**c)
                               for c in doc["criteria"]]
        if "organ_edges" in doc:
            doc["organ_edges"] = tuple(doc["organ_edges"])
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise InstanceError(f"Unknown generator parameter(s): {sorted(unknown)}")
        return cls(**doc)


@dataclass
class InstanceGeometry:
    l: float
    delta: float
    structures: List[Structure]
    angles: List[float]
    rows: int
    cols: int
    beamlets_per_angle: int

    @property
    def side(self) -> int:
        return int(round(2 * self.l / self.delta))

    @property
    def n_voxels(self) -> int:
        return self.side ** 3

    @property
    def n_angles(self) -> int:
        return len(self.angles)

    def voxel_centers(self) -> np.ndarray:
        """(n_voxels, 3) centers; voxel index = (ix * side + iy) * side + iz."""
        axis = -self.l + (np.arange(self.side) + 0.5) * self.delta
        grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1)
        return grid.reshape(-1, 3)

    def apertures_per_angle(self) -> int:
        """
        Distinct open shapes of one angle: each row is empty or one contiguous interval.

        With n columns that is (n(n+1)/2 + 1)^m over m rows, the family the
        aperture oracle searches and the entropy of the group constraint counts.
        """
        return (self.cols * (self.cols + 1) // 2 + 1) ** self.rows


@dataclass
class DoseMatrix:
    """Dose per unit intensity; row = global beamlet a*rows*cols + i*cols + j, column = voxel."""
    matrix: sp.csr_matrix
    n_angles: int
    rows: int
    cols: int

    @property
    def beamlets_per_angle(self) -> int:
        return self.rows * self.cols

    @property
    def nnz(self) -> int:
        return int(self.matrix.nnz)

    def beamlet_scores(self, pi: np.ndarray) -> np.ndarray:
        """Sum_v D[(i,j), v] pi_v arranged as (angles, rows, cols)."""
        return np.asarray(self.matrix @ pi).reshape(self.n_angles, self.rows, self.cols)

    def beamlet_dose(self, beamlets: Sequence[int]) -> np.ndarray:
        """Dense voxel dose of the given global beamlets opened with unit intensity."""
        if len(beamlets) == 0:
            return np.zeros(self.matrix.shape[1])
        return np.asarray(self.matrix[np.asarray(beamlets)].sum(axis=0)).ravel()


@dataclass
class ImrtInstance:
    geometry: InstanceGeometry
    dose: DoseMatrix
    structure_voxels: Dict[str, np.ndarray]
    criteria: List[ClinicalCriterion]
    phi: float
    dose_rate: float
    prescription: float
    seed: int = 0

    @property
    def n_voxels(self) -> int:
        return self.geometry.n_voxels

    def tumor_voxels(self) -> np.ndarray:
        tumors = [self.structure_voxels[s.name] for s in self.geometry.structures if s.kind == "tumor"]
        return np.unique(np.concatenate(tumors)) if tumors else np.zeros(0, dtype=np.int64)

    def dose_targets(self) -> Tuple[np.ndarray, np.ndarray]:
        """Lower and upper dose targets: the prescription on tumors, 0 elsewhere."""
        target = np.zeros(self.n_voxels)
        target[self.tumor_voxels()] = self.prescription
        return target, target.copy()


# ---------------------------------------------------------------------------
# Geometry and ray tracing
# ---------------------------------------------------------------------------

def _random_cuboid(rng: np.random.Generator, l: float, delta: float, edges: Sequence[float]) -> Tuple[tuple, tuple]:
    lower, upper = [], []
    for edge in edges:
        edge = min(max(delta, round(edge / delta) * delta), 2 * l)
        slots = int(round((2 * l - edge) / delta))
        start = -l + int(rng.integers(0, slots + 1)) * delta
        lower.append(float(start))
        upper.append(float(start + edge))
    return tuple(lower), tuple(upper)


def _structure_voxels(geometry: InstanceGeometry) -> Dict[str, np.ndarray]:
    """Voxels whose centers fall inside each cuboid; tumors claim shared voxels first, then organs."""
    centers = geometry.voxel_centers()
    claimed = np.zeros(len(centers), dtype=bool)
    result = {}
    for kind in STRUCTURE_KINDS:
        for structure in (s for s in geometry.structures if s.kind == kind):
            inside = np.all((centers >= structure.lower) & (centers <= structure.upper), axis=1)
            if kind != "body":
                inside &= ~claimed
                claimed |= inside
            voxels = np.flatnonzero(inside)
            if voxels.size == 0:
                raise InstanceError(f"Structure '{structure.name}' contains no voxel at delta={geometry.delta}")
            result[structure.name] = voxels
    return result


def trace_line_2d(origin: np.ndarray, direction: np.ndarray, l: float, delta: float) -> List[Tuple[int, int]]:
    """
    Cells of the (y, z) voxel grid over [-l, l]^2 crossed by a line, in crossing order.

    Args:
        origin: A point of the line
        direction: Unit direction
        l: Half side of the grid
        delta: Cell edge

    Returns:
        List of (iy, iz) with a crossing segment of positive length
    """
    side = int(round(2 * l / delta))
    t_enter, t_exit = -math.inf, math.inf
    for axis in range(2):
        if abs(direction[axis]) < 1e-12:
            if not -l <= origin[axis] <= l:
                return []
            continue
        t0 = (-l - origin[axis]) / direction[axis]
        t1 = (l - origin[axis]) / direction[axis]
        t_enter = max(t_enter, min(t0, t1))
        t_exit = min(t_exit, max(t0, t1))
    if t_exit <= t_enter:
        return []

    planes = -l + np.arange(side + 1) * delta
    crossings = [np.array([t_enter, t_exit])]
    for axis in range(2):
        if abs(direction[axis]) >= 1e-12:
            t = (planes - origin[axis]) / direction[axis]
            crossings.append(t[(t > t_enter) & (t < t_exit)])
    t = np.unique(np.concatenate(crossings))

    cells = []
    for t0, t1 in zip(t[:-1], t[1:]):
        if t1 - t0 < 1e-12:
            continue
        mid = origin + 0.5 * (t0 + t1) * direction
        iy = min(max(int(math.floor((mid[0] + l) / delta)), 0), side - 1)
        iz = min(max(int(math.floor((mid[1] + l) / delta)), 0), side - 1)
        if not cells or cells[-1] != (iy, iz):
            cells.append((iy, iz))
    return cells


def _beamlet_positions(rng: np.random.Generator, geometry: InstanceGeometry) -> List[np.ndarray]:
    """Per angle, (count, 2) beamlet coordinates (u, v) in the collimator plane."""
    l, rows, cols = geometry.l, geometry.rows, geometry.cols
    if geometry.beamlets_per_angle == rows * cols:
        u = -l + (np.arange(cols) + 0.5) * (2 * l / cols)
        v = -l + (np.arange(rows) + 0.5) * (2 * l / rows)
        centered = np.stack(np.meshgrid(u, v, indexing="xy"), axis=-1).reshape(-1, 2)
        return [centered] * geometry.n_angles
    return [rng.uniform(-l, l, size=(geometry.beamlets_per_angle, 2)) for _ in range(geometry.n_angles)]


def compute_dose_matrix(geometry: InstanceGeometry, rng: np.random.Generator) -> DoseMatrix:
    """
    Ray-trace every beamlet of every angle.

    The beam of angle theta comes from 2l (0, cos theta, sin theta); the
    collimator axes are u = (1, 0, 0) and v = (0, -sin theta, cos theta).
    A beamlet at (u, v) opens the grid cell that contains it.
    """
    l, delta, side = geometry.l, geometry.delta, geometry.side
    rows, cols = geometry.rows, geometry.cols
    axis_centers = -l + (np.arange(side) + 0.5) * delta
    block = rows * cols

    row_index, col_index, values = [], [], []
    for a, (theta_deg, positions) in enumerate(zip(geometry.angles, _beamlet_positions(rng, geometry))):
        theta = math.radians(theta_deg)
        normal = np.array([math.cos(theta), math.sin(theta)])
        v_axis = np.array([-math.sin(theta), math.cos(theta)])
        for u, v in positions:
            cells = trace_line_2d(v * v_axis, normal, l, delta)
            if not cells:
                continue
            i = min(int((v + l) / (2 * l) * rows), rows - 1)
            j = min(int((u + l) / (2 * l) * cols), cols - 1)
            ix = min(int(math.floor((u + l) / delta)), side - 1)
            iyz = np.array(cells)
            distance = 2 * l - (axis_centers[iyz[:, 0]] * normal[0] + axis_centers[iyz[:, 1]] * normal[1])
            voxels = (ix * side + iyz[:, 0]) * side + iyz[:, 1]
            row_index.append(np.full(len(cells), a * block + i * cols + j))
            col_index.append(voxels)
            values.append(2.0 / distance)

    shape = (geometry.n_angles * block, geometry.n_voxels)
    if not values:
        return DoseMatrix(sp.csr_matrix(shape), geometry.n_angles, rows, cols)
    matrix = sp.csr_matrix((np.concatenate(values), (np.concatenate(row_index), np.concatenate(col_index))),
                           shape=shape)
    matrix.sum_duplicates()
    matrix.sort_indices()
    return DoseMatrix(matrix, geometry.n_angles, rows, cols)


def auto_dose_rate(dose: DoseMatrix, tumor_voxels: np.ndarray, prescription: float) -> float:
    """
    Dose rate R at which spreading unit intensity evenly over the fully open
    apertures of all angles gives the tumors their prescription on average.
    """
    if tumor_voxels.size == 0:
        return 1.0
    per_beamlet = np.asarray(dose.matrix[:, tumor_voxels].sum(axis=1)).ravel()
    mean_dose = per_beamlet.sum() / dose.n_angles / tumor_voxels.size
    if mean_dose <= 0:
        raise InstanceError("No beamlet reaches the tumors; dose rate cannot be calibrated")
    return float(prescription / mean_dose)


def generate_instance(config: GeneratorConfig) -> ImrtInstance:
    """
    Build a seeded synthetic instance.

    Args:
        config: Generator parameters

    Returns:
        ImrtInstance with geometry, ray-traced dose and criteria
    """
    ratio = 2 * config.l / config.delta
    if config.l <= 0 or config.delta <= 0 or abs(ratio - round(ratio)) > 1e-9:
        raise InstanceError(f"delta={config.delta} must divide 2l={2 * config.l}")
    if config.n_angles < 1:
        raise InstanceError("At least one beam angle is needed")
    side = int(round(ratio))
    rows = config.rows or side
    cols = config.cols or side
    rng = np.random.default_rng(config.seed)

    structures = [Structure("body", "body", (-config.l,) * 3, (config.l,) * 3)]
    for t in range(config.tumor_count):
        lower, upper = _random_cuboid(rng, config.l, config.delta, (config.tumor_edge,) * 3)
        structures.append(Structure(f"tumor{t}", "tumor", lower, upper))
    for o in range(config.organ_count):
        lower, upper = _random_cuboid(rng, config.l, config.delta, config.organ_edges)
        structures.append(Structure(f"organ{o}", "organ", lower, upper))

    geometry = InstanceGeometry(
        l=config.l, delta=config.delta, structures=structures,
        angles=[a * config.angle_step for a in range(config.n_angles)],
        rows=rows, cols=cols,
        beamlets_per_angle=config.beamlets_per_angle or rows * cols,
    )
    structure_voxels = _structure_voxels(geometry)
    names = {s.name for s in structures}
    for criterion in config.criteria:
        if criterion.structure not in names:
            raise InstanceError(f"Criterion refers to unknown structure '{criterion.structure}'")

    dose = compute_dose_matrix(geometry, rng)
    instance = ImrtInstance(geometry, dose, structure_voxels, list(config.criteria), config.phi,
                            dose_rate=1.0, prescription=config.prescription, seed=config.seed)
    if config.dose_rate == "auto":
        instance.dose_rate = auto_dose_rate(dose, instance.tumor_voxels(), config.prescription)
    else:
        instance.dose_rate = float(config.dose_rate)
    logger.info("Instance seed=%d: %d voxels, %d dose entries, R=%.6g",
                config.seed, geometry.n_voxels, dose.nnz, instance.dose_rate)
    return instance


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def write_dose_file(dose: DoseMatrix, n_voxels: int, path: Path) -> bool:
    """
    Write the binary COO dose file: header then (beamlet, voxel, value) f64 triplets.

    Returns:
        True if successful, False otherwise
    """
    try:
        coo = dose.matrix.tocoo()
        header = DOSE_HEADER.pack(DOSE_MAGIC, DOSE_VERSION, dose.n_angles, dose.rows, dose.cols,
                                  n_voxels, coo.nnz)
        triplets = np.column_stack([coo.row, coo.col, coo.data]).astype("<f8")
        with open(path, "wb") as f:
            f.write(header)
            f.write(triplets.tobytes())
        return True
    except Exception as e:
        print(f"Error writing dose file {path}: {str(e)}")
        return False


def read_dose_file(path: Path) -> Tuple[DoseMatrix, int]:
    """
    Read a dose file written by write_dose_file.

    Returns:
        Tuple of (DoseMatrix, voxel count)
    """
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < DOSE_HEADER.size:
        raise InstanceError(f"{path} is too short to be a dose file")
    magic, version, n_angles, rows, cols, n_voxels, nnz = DOSE_HEADER.unpack_from(raw)
    if magic != DOSE_MAGIC:
        raise InstanceError(f"{path} is not a dose file (bad magic)")
    if version != DOSE_VERSION:
        raise InstanceError(f"Unsupported dose file version {version}")
    expected = DOSE_HEADER.size + nnz * 24
    if len(raw) != expected:
        raise InstanceError(f"{path} holds {len(raw)} bytes, expected {expected}")
    triplets = np.frombuffer(raw, dtype="<f8", offset=DOSE_HEADER.size).reshape(nnz, 3)
    shape = (n_angles * rows * cols, n_voxels)
    matrix = sp.csr_matrix((triplets[:, 2], (triplets[:, 0].astype(np.int64), triplets[:, 1].astype(np.int64))),
                           shape=shape)
    return DoseMatrix(matrix, n_angles, rows, cols), n_voxels


def instance_to_dict(instance: ImrtInstance) -> Dict:
    geometry = instance.geometry
    return {
        "version": GEOMETRY_VERSION,
        "seed": instance.seed,
        "l": geometry.l,
        "delta": geometry.delta,
        "angles": geometry.angles,
        "rows": geometry.rows,
        "cols": geometry.cols,
        "beamlets_per_angle": geometry.beamlets_per_angle,
        "structures": [asdict(s) for s in geometry.structures],
        "criteria": [asdict(c) for c in instance.criteria],
        "phi": instance.phi,
        "dose_rate": instance.dose_rate,
        "prescription": instance.prescription,
        "n_voxels": geometry.n_voxels,
    }


def save_instance(instance: ImrtInstance, geometry_path: Path, dose_path: Path) -> bool:
    """
    Write the geometry JSON and the dose file.

    Returns:
        True if both files were written
    """
    try:
        with open(geometry_path, "w", encoding="utf-8") as f:
            json.dump(instance_to_dict(instance), f, indent=2)
    except Exception as e:
        print(f"Error writing geometry file {geometry_path}: {str(e)}")
        return False
    return write_dose_file(instance.dose, instance.n_voxels, dose_path)


def load_instance(geometry_path: Path, dose_path: Optional[Path] = None) -> ImrtInstance:
    """
    Load an instance; the dose file defaults to the geometry path with suffix .dose.
    """
    geometry_path = Path(geometry_path)
    dose_path = Path(dose_path) if dose_path else geometry_path.with_suffix(".dose")
    with open(geometry_path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("version") != GEOMETRY_VERSION:
        raise InstanceError(f"Unsupported geometry version {doc.get('version')}")

    structures = [Structure(s["name"], s["kind"], tuple(s["lower"]), tuple(s["upper"])) for s in doc["structures"]]
    geometry = InstanceGeometry(doc["l"], doc["delta"], structures, list(doc["angles"]),
                                doc["rows"], doc["cols"], doc["beamlets_per_angle"])
    dose, n_voxels = read_dose_file(dose_path)
    if n_voxels != geometry.n_voxels or dose.n_angles != geometry.n_angles:
        raise InstanceError(f"Dose file {dose_path} does not match geometry {geometry_path}")
    criteria = [ClinicalCriterion(c["structure"], c["direction"], c["b"], c["p"], tuple(c["tau_bounds"]))
                for c in doc["criteria"]]
    return ImrtInstance(geometry, dose, _structure_voxels(geometry), criteria, doc["phi"],
                        doc["dose_rate"], doc["prescription"], doc.get("seed", 0))
