"""Localization error statistics and report tables."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .geometry import CameraPose, position_error, rotation_error_deg, viewing_direction_error_deg
from .pose import LocalizationResult

QUANTILES = (25, 50, 75, 90, 95)


def percentile(values: Sequence[float], q: float) -> float:
    """Order statistic at 1-based rank ``ceil(q/100 * n)`` of the ascending values.

    This is the largest error within the best ``q`` percent of the data.
    Input need not be sorted.
    """
    v = np.sort(np.asarray(values, dtype=float).reshape(-1))
    if len(v) == 0:
        raise ValueError("percentile of an empty list")
    if not 0 < q <= 100:
        raise ValueError("q must lie in (0, 100]")
    # q*n first keeps the product exact for integer q, so ranks never round up spuriously
    rank = math.ceil(q * len(v) / 100)
    return float(v[max(rank, 1) - 1])


@dataclass(frozen=True)
class ErrorRecord:
    query_id: str
    status: str
    position_error: Optional[float] = None
    rotation_error: Optional[float] = None
    viewing_direction_error: Optional[float] = None

    @property
    def localized(self) -> bool:
        return self.position_error is not None


@dataclass(frozen=True)
class Stats:
    median: float
    p25: float
    p50: float
    p75: float
    p90: float
    p95: float

    @classmethod
    def of(cls, values) -> "Stats":
        if len(values) == 0:
            nan = float("nan")
            return cls(nan, nan, nan, nan, nan, nan)
        p = [percentile(values, q) for q in QUANTILES]
        return cls(p[1], *p)

    def row(self) -> list:
        return [self.median, self.p25, self.p50, self.p75, self.p90, self.p95]


@dataclass(frozen=True)
class ErrorSummary:
    position: Stats
    rotation: Stats
    localized: int
    rejected: int
    total: int

    def to_dict(self) -> dict:
        def clean(s: Stats):
            return {k: (None if math.isnan(v) else v) for k, v in s.__dict__.items()}
        return {"position_m": clean(self.position), "rotation_deg": clean(self.rotation),
                "counts": {"localized": self.localized, "rejected": self.rejected, "total": self.total}}


def evaluate(results: Mapping[str, LocalizationResult], ground_truth: Mapping[str, CameraPose]):
    """Per-query errors and a summary over the localized queries.

    Rejected queries only contribute to the counts. Returns
    ``(summary, records)`` with records sorted by query id.
    """
    records = []
    for qid in sorted(results):
        res = results[qid]
        status = res.status if res.reason is None else f"{res.status}({res.reason})"
        if not res.localized:
            records.append(ErrorRecord(qid, status))
            continue
        if qid not in ground_truth:
            raise KeyError(f"no ground-truth pose for query {qid!r}")
        gt = ground_truth[qid]
        records.append(ErrorRecord(qid, status, position_error(gt.center, res.pose.center),
                                   rotation_error_deg(gt.rotation, res.pose.rotation),
                                   viewing_direction_error_deg(gt.rotation, res.pose.rotation)))
    return summarize(records), records


def summarize(records: Sequence[ErrorRecord]) -> ErrorSummary:
    loc = [r for r in records if r.localized]
    return ErrorSummary(Stats.of([r.position_error for r in loc]), Stats.of([r.rotation_error for r in loc]),
                        len(loc), len(records) - len(loc), len(records))


HEADER = ["", "Median", "P25", "P50", "P75", "P90", "P95"]


def _rows(summary: ErrorSummary) -> list:
    return [["Position m"] + summary.position.row(), ["Angle degrees"] + summary.rotation.row()]


def _fmt(v) -> str:
    return "nan" if isinstance(v, float) and math.isnan(v) else f"{v:.3g}"


def format_table(summary: ErrorSummary) -> str:
    rows = [HEADER] + [[r[0]] + [_fmt(v) for v in r[1:]] for r in _rows(summary)]
    widths = [max(len(r[i]) for r in rows) for i in range(len(HEADER))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))).rstrip()
             for r in rows]
    lines.append(f"localized {summary.localized} of {summary.total} ({summary.rejected} rejected)")
    return "\n".join(lines) + "\n"


def format_csv(summary: ErrorSummary) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for r in _rows(summary):
        w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])
    return buf.getvalue()


def report_dict(summary: ErrorSummary, records: Sequence[ErrorRecord], extra: Optional[dict] = None) -> dict:
    d = {"summary": summary.to_dict(),
         "queries": [{"query_id": r.query_id, "status": r.status, "position_error": r.position_error,
                      "rotation_error_deg": r.rotation_error,
                      "viewing_direction_error_deg": r.viewing_direction_error} for r in records]}
    if extra:
        d.update(extra)
    return d
