"""Run ledgers, aggregated metrics, and their CSV/JSON serialization."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

ACTION_ADAPTED = "adapted"
ACTION_SKIPPED_FALLBACK = "skipped_fallback"
ACTION_SKIPPED_RANDOM = "skipped_random"

# params_version for steps predicted without any parameter snapshot.
NO_SNAPSHOT = -1

RESULT_COLUMNS = [
    "run_id", "protocol", "scenario", "adapter", "domain_id", "eta", "seed",
    "n_batches", "n_adapted", "mean_c", "error_rate",
]

SCHEDULE_COLUMNS = ["step", "action", "c_value", "params_version", "error_count", "batch_size"]


@dataclass(frozen=True)
class ScheduleRecord:
    """Per-step ledger entry: what predicted this batch and at what speed."""

    step: int
    action: str
    c_value: int | None
    params_version: int
    error_count: int
    batch_size: int

    def __post_init__(self) -> None:
        if self.action not in (ACTION_ADAPTED, ACTION_SKIPPED_FALLBACK, ACTION_SKIPPED_RANDOM):
            raise ValueError(f"unknown action {self.action!r}")
        if self.action == ACTION_ADAPTED and (self.c_value is None or self.c_value < 1):
            raise ValueError("adapted steps must carry c_value >= 1")
        if not 0 <= self.error_count <= self.batch_size:
            raise ValueError("error_count must be within [0, batch_size]")


@dataclass(frozen=True)
class DomainReport:
    domain_id: int
    n_batches: int
    n_adapted: int
    error_rate: float
    mean_c: float | None = None


@dataclass
class RunReport:
    """Aggregated outcome of one protocol run over one scenario."""

    run_id: str
    protocol: str
    scenario: str
    adapter: str
    eta: float
    seed: int
    per_domain: list[DomainReport]
    avg_error: float
    mean_c: float | None
    adapted_fraction: float
    schedule: list[ScheduleRecord] | None = None
    fingerprints: list[str] | None = None
    notes: list[str] = field(default_factory=list)


def error_rate(predictions: Sequence[int] | np.ndarray, labels: Sequence[int] | np.ndarray) -> float:
    """Misclassified fraction."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if len(predictions) == 0:
        raise ValueError("error_rate of empty input is undefined")
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels must have equal length")
    return float((predictions != labels).mean())


def mean_c(schedule: Iterable[ScheduleRecord]) -> float | None:
    """Arithmetic mean of c_value over adapted steps; None if nothing adapted."""
    values = [r.c_value for r in schedule if r.action == ACTION_ADAPTED]
    if not values:
        return None
    return float(np.mean(values))


def domain_report(domain_id: int, records: Sequence[ScheduleRecord]) -> DomainReport:
    """Collapse one domain's schedule slice into its summary row."""
    if not records:
        raise ValueError("domain has no schedule records")
    total = sum(r.batch_size for r in records)
    errors = sum(r.error_count for r in records)
    adapted = [r for r in records if r.action == ACTION_ADAPTED]
    return DomainReport(
        domain_id=domain_id,
        n_batches=len(records),
        n_adapted=len(adapted),
        error_rate=errors / total,
        mean_c=float(np.mean([r.c_value for r in adapted])) if adapted else None,
    )


def aggregate(per_domain: Sequence[DomainReport]) -> tuple[float, float | None, float]:
    """(avg_error, mean_c, adapted_fraction) over per-domain rows.

    The average error is unweighted across domains; unequal domain sizes get a
    warning but stay unweighted.
    """
    if not per_domain:
        raise ValueError("need at least one domain")
    sizes = {d.n_batches for d in per_domain}
    if len(sizes) > 1:
        warnings.warn("domains have unequal sizes; average stays unweighted", stacklevel=2)
    avg_error = float(np.mean([d.error_rate for d in per_domain]))
    n_adapted = sum(d.n_adapted for d in per_domain)
    n_batches = sum(d.n_batches for d in per_domain)
    if n_adapted:
        total_c = sum(d.mean_c * d.n_adapted for d in per_domain if d.mean_c is not None)
        overall_c = total_c / n_adapted
    else:
        overall_c = None
    return avg_error, overall_c, n_adapted / n_batches


def merge_reports(reports: Sequence[RunReport]) -> RunReport:
    """Concatenate per-domain results of runs that share all metadata."""
    if not reports:
        raise ValueError("no reports to merge")
    head = reports[0]
    for r in reports[1:]:
        meta = (r.protocol, r.adapter, r.eta, r.seed)
        if meta != (head.protocol, head.adapter, head.eta, head.seed):
            raise ValueError("cannot merge reports with different run metadata")
    per_domain = [d for r in reports for d in r.per_domain]
    avg_error, overall_c, adapted_fraction = aggregate(per_domain)
    schedules = None
    if all(r.schedule is not None for r in reports):
        schedules = [rec for r in reports for rec in r.schedule]
    fingerprints = None
    if all(r.fingerprints is not None for r in reports):
        fingerprints = [fp for r in reports for fp in r.fingerprints]
    return RunReport(
        run_id=head.run_id,
        protocol=head.protocol,
        scenario=head.scenario,
        adapter=head.adapter,
        eta=head.eta,
        seed=head.seed,
        per_domain=per_domain,
        avg_error=avg_error,
        mean_c=overall_c,
        adapted_fraction=adapted_fraction,
        schedule=schedules,
        fingerprints=fingerprints,
        notes=[n for r in reports for n in r.notes],
    )


def delta(offline: RunReport, online: RunReport) -> float:
    """Signed online minus offline average error; positive penalizes the method."""
    if (offline.adapter, offline.scenario, offline.seed) != (
        online.adapter,
        online.scenario,
        online.seed,
    ):
        raise ValueError("delta requires matching adapter, scenario, and seed")
    return online.avg_error - offline.avg_error


def per_category_error(report: RunReport, categories: Mapping[int, str]) -> dict[str, float]:
    """Unweighted mean error over domains sharing a category tag."""
    groups: dict[str, list[float]] = {}
    for d in report.per_domain:
        groups.setdefault(categories[d.domain_id], []).append(d.error_rate)
    return {k: float(np.mean(v)) for k, v in sorted(groups.items())}


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------

def _fmt(value: float | int | str | None) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)  # shortest exact round-trip representation
    return str(value)


def format_percent(fraction: float) -> str:
    """Human-readable error rendering: one decimal, e.g. 0.421 -> '42.1%'."""
    return f"{100.0 * fraction:.1f}%"


def write_results_csv(path: str | Path, reports: Sequence[RunReport]) -> None:
    """One row per (run, domain), in the fixed public column order."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        for r in reports:
            for d in r.per_domain:
                writer.writerow([
                    r.run_id, r.protocol, r.scenario, r.adapter,
                    _fmt(d.domain_id), _fmt(r.eta), _fmt(r.seed),
                    _fmt(d.n_batches), _fmt(d.n_adapted), _fmt(d.mean_c),
                    _fmt(d.error_rate),
                ])


def read_results_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_schedule_csv(path: str | Path, schedule: Sequence[ScheduleRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCHEDULE_COLUMNS)
        for rec in schedule:
            writer.writerow([
                rec.step, rec.action, _fmt(rec.c_value), rec.params_version,
                rec.error_count, rec.batch_size,
            ])


def report_to_dict(report: RunReport) -> dict:
    return asdict(report)


def report_from_dict(data: dict) -> RunReport:
    data = dict(data)
    data["per_domain"] = [DomainReport(**d) for d in data["per_domain"]]
    if data.get("schedule") is not None:
        data["schedule"] = [ScheduleRecord(**r) for r in data["schedule"]]
    return RunReport(**data)


def write_summary_json(
    path: str | Path, reports: Sequence[RunReport], deltas: Sequence[dict] | None = None
) -> None:
    payload: dict = {"runs": [report_to_dict(r) for r in reports]}
    if deltas is not None:
        payload["deltas"] = list(deltas)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_summary_json(path: str | Path) -> tuple[list[RunReport], list[dict]]:
    with open(path) as fh:
        payload = json.load(fh)
    return [report_from_dict(r) for r in payload["runs"]], payload.get("deltas", [])
