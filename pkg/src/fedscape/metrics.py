"""Evaluation metrics and report files.

Losses are computed on raw predictions; RMSE and PCC on predictions clamped
to the 1..5 scale (PCC can be switched to raw). Per-client values are averaged
over the 8 actions first, then over clients.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .model import clamp_scores

SCHEMA_VERSION = "fedscape.runresult.v1"
UNDEFINED = None  # PCC of a zero-variance column
PCC_VAR_FLOOR = 1e-12
CSV_COLUMNS = ["method", "scope", "clients", "augment", "eval_point", "loss", "rmse", "pcc",
               "payload_bytes", "cpu_s"]
REPORT_NOTE = {"loss": "MSE on raw predictions",
               "rmse": "on predictions clamped to [1, 5]",
               "pcc": "per action, UNDEFINED columns excluded from the mean",
               "payload_bytes": "mean serialized update size per client per round",
               "cpu_s": "mean client CPU seconds per round; NA in deterministic output (see resources.json)"}


def rmse(pred: np.ndarray, target: np.ndarray) -> float:
    if pred.shape != target.shape:
        raise ConfigError(f"rmse shape mismatch: {pred.shape} vs {target.shape}")
    if pred.shape[0] < 1:
        raise ConfigError("rmse needs at least one row")
    d = pred.astype(np.float64) - target.astype(np.float64)
    return math.sqrt(float(np.mean(d * d)))


def pcc(pred_col: np.ndarray, target_col: np.ndarray):
    """Pearson correlation, or ``UNDEFINED`` when either column is (near) constant."""
    a = np.asarray(pred_col, dtype=np.float64).ravel()
    b = np.asarray(target_col, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ConfigError("pcc columns differ in length")
    if a.size < 2:
        raise ConfigError("pcc needs at least two samples")
    da, db = a - a.mean(), b - b.mean()
    va, vb = float(np.mean(da * da)), float(np.mean(db * db))
    if va < PCC_VAR_FLOOR or vb < PCC_VAR_FLOOR:
        return UNDEFINED
    r = float(np.mean(da * db)) / math.sqrt(va * vb)
    return max(-1.0, min(1.0, r))


def forgetting_delta(after_t1: float, after_t2_on_t1: float) -> float:
    """Increase in Task-1 RMSE caused by learning Task 2; positive means forgetting."""
    return after_t2_on_t1 - after_t1


def evaluate_predictions(pred: np.ndarray, target: np.ndarray, pcc_on_clamped: bool = True) -> dict:
    from .numcore import mse_loss

    loss, _ = mse_loss(pred, target)
    clamped = clamp_scores(pred)
    per_action = [pcc((clamped if pcc_on_clamped else pred)[:, a], target[:, a]) for a in range(target.shape[1])]
    defined = [p for p in per_action if p is not UNDEFINED]
    return {"loss": loss, "rmse": rmse(clamped, target), "pcc_per_action": per_action,
            "pcc_mean": float(np.mean(defined)) if defined else UNDEFINED,
            "pcc_undefined": len(per_action) - len(defined)}


def aggregate_clients(rows: list[dict]) -> dict:
    """Average client rows (already averaged over actions); order of ``rows`` is irrelevant."""
    rows = sorted(rows, key=lambda r: r["client"])
    pccs = [r["pcc_mean"] for r in rows if r["pcc_mean"] is not UNDEFINED]
    return {"loss": float(np.mean([r["loss"] for r in rows])),
            "rmse": float(np.mean([r["rmse"] for r in rows])),
            "pcc": float(np.mean(pccs)) if pccs else UNDEFINED,
            "pcc_undefined": int(sum(r["pcc_undefined"] for r in rows))}


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    records: list = field(default_factory=list)   # per client / eval point / round
    summary: list = field(default_factory=list)   # aggregated over clients
    table: list = field(default_factory=list)     # end-of-task rows in CSV layout

    def add(self, eval_point: str, round_no: int, client_rows: list[dict]) -> dict:
        for r in client_rows:
            self.records.append({"eval_point": eval_point, "round": round_no, **r})
        agg = {"eval_point": eval_point, "round": round_no, **aggregate_clients(client_rows)}
        self.summary.append(agg)
        return agg

    def find(self, eval_point: str, round_no: int | None = None) -> dict:
        hits = [s for s in self.summary if s["eval_point"] == eval_point
                and (round_no is None or s["round"] == round_no)]
        if not hits:
            raise KeyError(f"no summary row for {eval_point} round {round_no}")
        return hits[-1]


def _fmt(x) -> str:
    if x is UNDEFINED:
        return "UNDEFINED"
    if isinstance(x, bool):
        return str(x).lower()
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)


def _round_floats(obj):
    if isinstance(obj, float):
        return float(f"{obj:.6f}")
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    return obj


def report_json(result, deterministic: bool = True) -> str:
    doc = {"schema_version": SCHEMA_VERSION, "notes": REPORT_NOTE, **result.to_dict(deterministic)}
    return json.dumps(_round_floats(doc), sort_keys=True, indent=2) + "\n"


def table_rows(result, deterministic: bool = True) -> list[dict]:
    rows = []
    for row in result.table:
        row = dict(row)
        if deterministic:
            row["cpu_s"] = "NA"
        rows.append(row)
    return rows


def report_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def emit_report(result, out_dir, formats=("json", "csv"), deterministic: bool = True) -> list[Path]:
    """Write ``result.json`` / ``result.csv`` (and ``resources.json`` when timings are withheld)."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out_dir}: {exc}") from None
    written = []
    for fmt in formats:
        if fmt == "json":
            text = report_json(result, deterministic)
        elif fmt == "csv":
            text = report_csv(table_rows(result, deterministic))
        else:
            raise ConfigError(f"unknown report format {fmt!r}")
        path = out_dir / f"result.{fmt}"
        try:
            path.write_text(text, encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot write {path}: {exc}") from None
        written.append(path)
    if deterministic and getattr(result, "resources", None) is not None:
        path = out_dir / "resources.json"
        path.write_text(json.dumps(_round_floats(result.resources), sort_keys=True, indent=2) + "\n",
                        encoding="utf-8")
        written.append(path)
    return written


def csv_to_rows(text: str) -> list[dict]:
    """Parse a report CSV back into typed rows."""
    out = []
    for r in csv.DictReader(io.StringIO(text)):
        row = dict(r)
        for k in ("loss", "rmse", "pcc"):
            row[k] = UNDEFINED if row[k] == "UNDEFINED" else float(row[k])
        row["cpu_s"] = "NA" if row["cpu_s"] == "NA" else float(row["cpu_s"])
        row["clients"] = int(row["clients"])
        row["payload_bytes"] = float(row["payload_bytes"])
        row["augment"] = row["augment"] == "true"
        out.append(row)
    return out
