#!/usr/bin/env python3
"""
Writers and readers for solver artifacts: iteration traces (CSV or XLSX),
run summaries, DVH tables, plan exports and sweep workbooks. Also fits
log-log convergence slopes from traces.
"""

import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

try:
    import openpyxl
    OPENPYXL_AVAILABLE = True
except ImportError:
    OPENPYXL_AVAILABLE = False

from imrt import PlanPoint, dvh_curve
from imrt_instance import ImrtInstance
from solver_coexcg import TRACE_COLUMNS, IterationTrace


logger = logging.getLogger(__name__)

NUMERIC_COLUMNS = ("k", "objective", "infeasibility", "q_norm", "r_norm", "millis")
DVH_COLUMNS = ("structure", "dose", "fraction")


def write_trace_csv(trace: IterationTrace, output_path: Path) -> bool:
    """
    Write one row per iteration under the TRACE_COLUMNS header.

    Args:
        trace: Iteration trace
        output_path: Destination CSV

    Returns:
        True if successful, False otherwise
    """
    try:
        with open(output_path, 'w', encoding='utf-8', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(TRACE_COLUMNS)
            for record in trace.records:
                writer.writerow([repr(v) if isinstance(v, float) else v for v in record.as_row()])
        return True
    except Exception as e:
        print(f"Error writing trace {output_path}: {str(e)}")
        return False


def _typed_row(header: Sequence[str], row: Sequence[Any]) -> Dict[str, Any]:
    result = {}
    for name, value in zip(header, row):
        if name in NUMERIC_COLUMNS and value not in (None, ""):
            value = int(float(value)) if name == "k" else float(value)
        result[name] = value
    return result


def _read_csv_rows(file_path: Path, encoding: str) -> List[Dict[str, Any]]:
    with open(file_path, 'r', encoding=encoding, newline='') as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            return []
        return [_typed_row(header, row) for row in reader if row]


def read_trace_csv(file_path: Path) -> List[Dict[str, Any]]:
    """Read a trace CSV; falls back to cp1251 when the file is not UTF-8."""
    try:
        return _read_csv_rows(file_path, 'utf-8')
    except UnicodeDecodeError:
        try:
            return _read_csv_rows(file_path, 'cp1251')
        except Exception as e:
            print(f"Error reading CSV file {file_path}: {str(e)}")
    except Exception as e:
        print(f"Error reading CSV file {file_path}: {str(e)}")
    return []


def read_trace_xlsx(file_path: Path) -> List[Dict[str, Any]]:
    """Read the first sheet of a trace workbook (header row first)."""
    if not OPENPYXL_AVAILABLE:
        print("Error: openpyxl library is not installed. Install it with: pip install openpyxl")
        return []

    rows = []
    try:
        workbook = openpyxl.load_workbook(file_path, data_only=True, read_only=True)
        sheet = workbook[workbook.sheetnames[0]]
        values = sheet.iter_rows(values_only=True)
        header = next(values, None)
        if header is not None:
            header = [str(cell) for cell in header]
            rows = [_typed_row(header, row) for row in values if any(cell is not None for cell in row)]
        workbook.close()
    except Exception as e:
        print(f"Error reading XLSX file {file_path}: {str(e)}")
    return rows


def read_trace_file(file_path: Path) -> List[Dict[str, Any]]:
    """
    Read a trace based on file extension.

    Args:
        file_path: .csv or .xlsx trace

    Returns:
        List of rows keyed by column name, numeric columns converted
    """
    suffix = file_path.suffix.lower()
    if suffix == '.csv':
        return read_trace_csv(file_path)
    elif suffix == '.xlsx':
        return read_trace_xlsx(file_path)
    else:
        print(f"Error: Unsupported trace format '{suffix}'. Supported formats: .csv, .xlsx")
        return []


def write_json(document: Dict[str, Any], output_path: Path, label: str = "JSON") -> bool:
    try:
        with open(output_path, 'w', encoding='utf-8') as f:
            json.dump(document, f, indent=2, sort_keys=True)
            f.write("\n")
        return True
    except Exception as e:
        print(f"Error writing {label} {output_path}: {str(e)}")
        return False


def write_summary_json(summary: Dict[str, Any], output_path: Path) -> bool:
    """Write a run summary (final objective, infeasibility, wall seconds, atoms, angles)."""
    return write_json(summary, output_path, "summary")


def write_plan_json(plan_document: Dict[str, Any], output_path: Path) -> bool:
    """Write a plan export produced by imrt.plan_to_dict."""
    return write_json(plan_document, output_path, "plan")


def dvh_rows(plan: PlanPoint, instance: ImrtInstance, grid: Optional[np.ndarray] = None) -> List[Tuple[str, float, float]]:
    """(structure, dose, fraction) for every structure of the instance over the DVH grid."""
    rows = []
    for structure in instance.geometry.structures:
        doses, fractions = dvh_curve(plan.z[instance.structure_voxels[structure.name]], grid)
        rows.extend((structure.name, float(d), float(f)) for d, f in zip(doses, fractions))
    return rows


def write_dvh_csv(rows: Sequence[Tuple[str, float, float]], output_path: Path) -> bool:
    """
    Write DVH rows as structure, dose, fraction.

    Returns:
        True if successful, False otherwise
    """
    try:
        with open(output_path, 'w', encoding='utf-8', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(DVH_COLUMNS)
            for structure, dose, fraction in rows:
                writer.writerow([structure, f"{dose:g}", repr(fraction)])
        return True
    except Exception as e:
        print(f"Error writing DVH {output_path}: {str(e)}")
        return False


def write_sweep_csv(header: Sequence[str], rows: Sequence[Sequence[Any]], output_path: Path) -> bool:
    try:
        with open(output_path, 'w', encoding='utf-8', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(header)
            writer.writerows(rows)
        return True
    except Exception as e:
        print(f"Error writing sweep table {output_path}: {str(e)}")
        return False


def export_sweep_workbook(sheets: Dict[str, Tuple[Sequence[str], Sequence[Sequence[Any]]]], output_path: Path) -> bool:
    """
    Write one worksheet per sweep: a header row followed by the rows.

    Args:
        sheets: Sheet title -> (header, rows)
        output_path: Destination .xlsx

    Returns:
        True if successful, False otherwise
    """
    if not OPENPYXL_AVAILABLE:
        print("Error: openpyxl library is not installed. Install it with: pip install openpyxl")
        return False

    try:
        workbook = openpyxl.Workbook()
        workbook.remove(workbook.active)
        for title, (header, rows) in sheets.items():
            sheet = workbook.create_sheet(title=title[:31])
            sheet.append(list(header))
            for row in rows:
                sheet.append(list(row))
        workbook.save(output_path)
        return True
    except Exception as e:
        print(f"Error writing workbook {output_path}: {str(e)}")
        return False


def fit_loglog_slope(ns: Sequence[float], values: Sequence[float]) -> float:
    """
    Least-squares slope of log(value) against log(N).

    Nonpositive values are dropped with a warning.

    Raises:
        ValueError: If fewer than two usable points remain
    """
    ns = np.asarray(ns, dtype=float)
    values = np.asarray(values, dtype=float)
    if ns.shape != values.shape:
        raise ValueError(f"{ns.size} iteration counts but {values.size} values")
    keep = (values > 0) & (ns > 0)
    if not np.all(keep):
        logger.warning("Dropping %d nonpositive point(s) from the rate fit", int(np.sum(~keep)))
    if np.count_nonzero(keep) < 2:
        raise ValueError("A rate fit needs at least two positive points")
    slope, _ = np.polyfit(np.log(ns[keep]), np.log(values[keep]), 1)
    return float(slope)


def trace_metric(rows: List[Dict[str, Any]], column: str, f_star: Optional[float] = None) -> Tuple[float, float]:
    """
    (N, metric) of a trace's last row; the objective column becomes the gap to f_star.
    """
    if not rows:
        raise ValueError("Empty trace")
    final = rows[-1]
    value = float(final[column])
    if column == "objective":
        if f_star is None:
            raise ValueError("An objective-gap fit needs f*")
        value = abs(value - f_star)
    return float(final["k"]), value
