"""Per-iteration training metrics and their CSV serialization."""

from __future__ import annotations

import csv
import math
from dataclasses import astuple, dataclass, fields

HEADER = (
    "iteration,objective_L_eta,first_term,second_term,dual_loss,grad_norm_V,"
    "grad_norm_pi,avg_return,consistency_residual,wall_ms"
)


@dataclass
class MetricsRecord:
    iteration: int
    objective_L_eta: float
    first_term: float
    second_term: float
    dual_loss: float
    grad_norm_V: float
    grad_norm_pi: float
    avg_return: float = math.nan
    consistency_residual: float = math.nan
    wall_ms: float = math.nan


FIELDS = tuple(f.name for f in fields(MetricsRecord))
assert ",".join(FIELDS) == HEADER


def _fmt(x):
    if isinstance(x, int):
        return str(x)
    # repr gives the shortest string that round-trips the double
    return repr(float(x))


def write_metrics(records, path):
    """Write records as CSV with a fixed header; ``nan`` marks unevaluated entries."""
    records = list(records)
    if not records:
        raise ValueError("no metrics records to write")
    with open(path, "w", newline="") as fh:
        fh.write(HEADER + "\n")
        for rec in records:
            fh.write(",".join(_fmt(v) for v in astuple(rec)) + "\n")


def read_metrics(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        head = next(reader)
        if ",".join(head) != HEADER:
            raise ValueError(f"unexpected metrics header in {path}")
        return [MetricsRecord(int(row[0]), *(float(v) for v in row[1:])) for row in reader]
