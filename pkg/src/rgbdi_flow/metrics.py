"""Velocity, bias and gravity-direction error metrics."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

METRIC_NAMES = ("rmse_v", "rmse_w", "rmse_bg", "rmse_ba", "theta_g")


def rmse(errors) -> float:
    """Root mean square of the Euclidean norms of error vectors.

    ``errors`` is an ``(n, d)`` array of vectors or an ``(n,)`` array of scalars.
    """
    e = np.asarray(errors, dtype=float)
    if e.size == 0:
        raise ValueError("rmse of an empty error list")
    e = e.reshape(len(e), -1) if e.ndim > 1 else e.reshape(-1, 1)
    return float(np.sqrt(np.mean(np.sum(e * e, axis=1))))


def gravity_angle(g_est, g_gt) -> float:
    """Angle in radians between two gravity vectors.

    Evaluated as ``atan2(|a x b|, a . b)``, which equals the arccos of the
    normalized dot product but keeps full precision for nearly parallel
    vectors.
    """
    a = np.asarray(g_est, dtype=float)
    b = np.asarray(g_gt, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("gravity vectors must be nonzero")
    a, b = a / na, b / nb
    return float(np.arctan2(np.linalg.norm(np.cross(a, b)), a @ b))


@dataclass
class SubsequenceMetrics:
    start: int
    rmse_v: float
    rmse_w: float
    rmse_bg: float | None = None
    rmse_ba: float | None = None
    theta_g: float | None = None
    degenerate: bool = False


@dataclass
class MetricsReport:
    mean: dict[str, float | None]
    std: dict[str, float | None]
    subsequences: list[SubsequenceMetrics] = field(default_factory=list)
    n_degenerate: int = 0

    @property
    def n_used(self) -> int:
        return sum(not s.degenerate for s in self.subsequences)


def aggregate(reports: list[SubsequenceMetrics]) -> MetricsReport:
    """Mean and population standard deviation of each metric.

    Degenerate subsequences are counted and excluded; a metric missing from
    any used subsequence is reported as None.
    """
    used = [r for r in reports if not r.degenerate]
    mean: dict[str, float | None] = {}
    std: dict[str, float | None] = {}
    for name in METRIC_NAMES:
        vals = [getattr(r, name) for r in used]
        if not vals or any(v is None for v in vals):
            mean[name] = std[name] = None
            continue
        arr = np.asarray(vals, dtype=float)
        mean[name] = float(arr.mean())
        std[name] = float(arr.std())
    return MetricsReport(mean, std, list(reports), len(reports) - len(used))


def format_report(report: MetricsReport) -> str:
    lines = [f"subsequences: {report.n_used}", f"degenerate: {report.n_degenerate}"]
    for name in METRIC_NAMES:
        m, s = report.mean[name], report.std[name]
        lines.append(f"{name}: -" if m is None else f"{name}: {m:.6g} +- {s:.6g}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict[str, tuple[float, float] | int | None]:
    out: dict = {}
    for line in text.splitlines():
        if ":" not in line:
            continue
        key, val = (x.strip() for x in line.split(":", 1))
        if key in ("subsequences", "degenerate"):
            out[key] = int(val)
        elif val == "-":
            out[key] = None
        else:
            m, s = val.split("+-")
            out[key] = (float(m), float(s))
    return out


def write_subsequence_csv(path, reports: list[SubsequenceMetrics]) -> None:
    names = [f.name for f in fields(SubsequenceMetrics)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for r in reports:
            row = asdict(r)
            w.writerow(["" if row[n] is None else
                        (f"{row[n]:.9g}" if isinstance(row[n], float) else int(row[n]))
                        for n in names])


def read_subsequence_csv(path) -> list[SubsequenceMetrics]:
    out = []
    with open(Path(path), newline="") as fh:
        for row in csv.DictReader(fh):
            def num(key):
                v = row.get(key, "")
                return None if v in ("", None) else float(v)
            out.append(SubsequenceMetrics(
                int(row["start"]), num("rmse_v"), num("rmse_w"), num("rmse_bg"),
                num("rmse_ba"), num("theta_g"), bool(int(row.get("degenerate") or 0)),
            ))
    return out

