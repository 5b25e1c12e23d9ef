"""
Bundle rendering: deterministic text summaries, CSV tables and (x, y) plot series
"""

import csv
import io
import json
import math
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Tuple

from errors import ConfigError

BUNDLE_KINDS = (
    "norm",
    "collections",
    "gamlen-gaudet",
    "moments",
    "search",
    "factorization",
    "dim-formula",
    "verification",
    "operator",
    "sweep",
)

MOMENT_COLUMNS = ["variable", "indices", "method", "mean", "m2", "stderr", "bound"]
DIM_COLUMNS = ["n", "ratio", "eta", "N", "m0", "eta0", "dim_V_n", "dim_V_N"]
SWEEP_COLUMNS = ["m0", "runs", "accepted", "rate", "mean_attempts"]


def dumps(data: Any) -> str:
    """Canonical JSON: sorted keys, two-space indent, non-finite floats as strings"""
    return json.dumps(_finite(data), sort_keys=True, indent=2)


def _finite(data: Any) -> Any:
    if isinstance(data, float) and not math.isfinite(data):
        return str(data)
    if isinstance(data, dict):
        return {key: _finite(value) for key, value in data.items()}
    if isinstance(data, (list, tuple)):
        return [_finite(value) for value in data]
    return data


def write_bundle(out_dir: Path, name: str, bundle: Dict[str, Any]) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    path.write_text(dumps(bundle) + "\n")
    return path


def read_bundle(path: str) -> Dict[str, Any]:
    try:
        with open(path, "r") as f:
            return json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"Bundle '{path}' not found")
    except json.JSONDecodeError as e:
        raise ConfigError(f"Bundle '{path}' is not valid JSON: {str(e)}")


def csv_table(columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow(["" if value is None else value for value in row])
    return buffer.getvalue()


def series_csv(points: Iterable[Tuple[float, float]]) -> str:
    return csv_table(["x", "y"], points)


def write_series(out_dir: Path, name: str, points: Iterable[Tuple[float, float]]) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    path.write_text(series_csv(points))
    return path


# ==================== TABLES ====================

def moment_rows(reports: List[Dict[str, Any]]) -> List[List[Any]]:
    return [
        [
            r["variable"],
            " ".join(r["indices"]),
            r["method"],
            r["mean"],
            r["second_moment"],
            r["stderr_second"],
            r["bound"],
        ]
        for r in reports
    ]


def dim_rows(rows: List[Dict[str, Any]]) -> List[List[Any]]:
    return [[row[column] for column in DIM_COLUMNS] for row in rows]


def sweep_rows(points: List[Dict[str, Any]]) -> List[List[Any]]:
    return [[point[column] for column in SWEEP_COLUMNS] for point in points]


def plot_series(bundle: Dict[str, Any]) -> Dict[str, List[Tuple[float, float]]]:
    """Named (x, y) series a bundle supports"""
    kind = bundle.get("kind")
    if kind == "dim-formula":
        return {"N_vs_n.csv": [(row["n"], row["N"]) for row in bundle["rows"]]}
    if kind == "sweep":
        return {"acceptance_vs_m0.csv": [(p["m0"], p["rate"]) for p in bundle["points"]]}
    if kind == "moments":
        return {"moment_ratio.csv": [
            (k, r["second_moment"] / r["bound"] if r["bound"] else 0.0)
            for k, r in enumerate(bundle["reports"])
        ]}
    return {}


# ==================== SUMMARIES ====================

def _scalar_lines(data: Dict[str, Any], prefix: str = "") -> List[str]:
    lines = []
    for key in sorted(data):
        value = data[key]
        if isinstance(value, dict):
            lines += _scalar_lines(value, f"{prefix}{key}.")
        elif isinstance(value, (int, float, str, bool)) or value is None:
            lines.append(f"{prefix}{key}: {value}")
    return lines


def _factorization_lines(bundle: Dict[str, Any]) -> List[str]:
    search = bundle["search"]
    return [
        f"residual: {float(bundle['residual']):.6e}",
        f"norm product (lower): {float(bundle['norm_product_lower']):.12g}",
        f"theoretical bound (1+η)/δ: {float(bundle['theoretical_bound']):.12g}",
        f"sign search attempts: {search['attempts']}",
        f"max off-diagonal: {float(search['max_offdiag']):.6e}",
        f"max diagonal deviation: {float(search['max_diag_deviation']):.6e}",
        f"neumann ratio: {float(bundle['neumann_ratio']):.6g}",
    ]


def report_render(bundle: Dict[str, Any]) -> Tuple[str, Dict[str, str]]:
    """Deterministic text summary and CSV tables for a bundle; metadata is left out"""
    if not isinstance(bundle, dict) or not bundle:
        raise ConfigError("Cannot render an empty bundle")
    kind = bundle.get("kind")
    if kind not in BUNDLE_KINDS:
        raise ConfigError(f"Unknown bundle kind {kind!r}", {"known": list(BUNDLE_KINDS)})
    try:
        tables: Dict[str, str] = {}
        if kind == "factorization":
            lines = _factorization_lines(bundle)
        elif kind == "moments":
            reports = bundle["reports"]
            tables["moments.csv"] = csv_table(MOMENT_COLUMNS, moment_rows(reports))
            within = sum(1 for r in reports if r["second_moment"] - 3 * r["stderr_second"] <= r["bound"])
            lines = [f"moment reports: {len(reports)}", f"within bound: {within}"]
        elif kind == "dim-formula":
            tables["dim_formula.csv"] = csv_table(DIM_COLUMNS, dim_rows(bundle["rows"]))
            lines = [f"n={row['n']} Γ/δ={row['ratio']} η={row['eta']}: N={row['N']}" for row in bundle["rows"]]
        elif kind == "sweep":
            tables["sweep.csv"] = csv_table(SWEEP_COLUMNS, sweep_rows(bundle["points"]))
            lines = [f"m0={p['m0']}: {p['accepted']}/{p['runs']} accepted" for p in bundle["points"]]
        else:
            body = {key: value for key, value in bundle.items() if key not in ("metadata", "kind")}
            lines = _scalar_lines(body)
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"Malformed {kind} bundle: missing {str(e)}")
    summary = "\n".join([f"kind: {kind}"] + lines) + "\n"
    return summary, tables
