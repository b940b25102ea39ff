"""Experiment harness: one dataset in, a reproducible report directory out.

The report bundles the data-reduction table, the user/service coverage
matrix, per-user identification rates at ranks 1/3/5 for every mode, the
per-service rates, each user's best-discriminating services, and the
timeline window sweep, together with a configuration echo, the seeds, and
the per-sample decisions every table can be recomputed from.

Rank monotonicity (rate at rank 1 <= rank 3 <= rank 5) is re-checked on
every table this module emits; a violation means a scoring bug and raises
immediately.  Reports contain no timestamps or absolute paths, so the same
inputs serialize byte-for-byte identically.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from netident.identity import (
    EnrollmentError,
    EnrollmentPolicy,
    IdentificationBatch,
    IdentityModel,
    LabeledSample,
    Mode,
    best_service_table,
    enroll,
    group_batches,
    identify,
    tpir_at_rank,
)
from netident.interactions import ServiceSignature, default_signatures, reduction_report
from netident.mlp import MlpConfig
from netident.model import Dataset, UserId, write_json_atomic, write_text_atomic
from netident.timeline import (
    DEFAULT_CONFIDENCE,
    DEFAULT_WINDOW_PRESETS,
    interaction_decisions,
    per_window_labels,
    rank1_rates,
)

RANKS = (1, 3, 5)
BATCH_WINDOW_S = 60.0

TABLE_NAMES = (
    "reduction",
    "coverage",
    "rank_tpir",
    "service_tpir",
    "best_service",
    "timeline",
)


@dataclass(frozen=True)
class ExperimentReport:
    config_echo: dict
    seed_manifest: dict
    tables: dict  # name -> {"columns": [...], "rows": [[...], ...]}
    per_sample: dict  # "batches" and "interactions" row lists


def check_rank_monotone(rates: Sequence[Optional[float]], context: str) -> None:
    """Rates at increasing ranks may never decrease."""
    present = [r for r in rates if r is not None]
    for a, b in zip(present, present[1:]):
        if b < a:
            raise AssertionError(
                f"rank monotonicity violated in {context}: {present}"
            )


def _user_label(user: Optional[UserId]) -> Optional[str]:
    return None if user is None else user.label


def _mean_or_none(values: list) -> Optional[float]:
    present = [v for v in values if v is not None]
    if not present:
        return None
    return round(sum(present) / len(present), 1)


def _reduction_table(dataset: Dataset, signatures) -> dict:
    report = reduction_report(dataset.records, dataset.interactions, signatures)
    truth = dataset.ground_truth
    users_per_service: dict = {}
    for inter in dataset.interactions:
        user = truth.user_at(inter.src_ip, inter.start)
        if user is not None:
            users_per_service.setdefault(inter.service, set()).add(user)
    rows = [
        [row.service, row.packets, row.interactions, row.reduction_pct,
         len(users_per_service.get(row.service, ()))]
        for row in sorted(report.rows, key=lambda r: r.service)
    ]
    rows.append(["OVERALL", report.overall.packets, report.overall.interactions,
                 report.overall.reduction_pct, len(truth.users)])
    return {
        "columns": ["service", "packets", "interactions", "reduction_pct", "users"],
        "rows": rows,
        "unmatched_packets": report.unmatched_packets,
    }


def _coverage_table(dataset: Dataset) -> dict:
    truth = dataset.ground_truth
    services = sorted({i.service for i in dataset.interactions})
    counts: dict = {}
    for inter in dataset.interactions:
        user = truth.user_at(inter.src_ip, inter.start)
        if user is None:
            continue
        counts[(user, inter.service)] = counts.get((user, inter.service), 0) + 1
    rows = []
    for user in sorted(truth.users, key=lambda u: u.numeric_id):
        rows.append([user.label] + [counts.get((user, s), 0) for s in services])
    return {"columns": ["user"] + services, "rows": rows}


def _mode_key(mode: Mode) -> str:
    return mode.value.lower()


def _rank_tpir_table(batch_rows: list, users: list, modes: list) -> dict:
    columns = ["user"]
    for mode in modes:
        columns += [f"{_mode_key(mode)}_rank{k}" for k in RANKS]
    rows = []
    per_user_values: dict = {}
    for user in users:
        mine = [r for r in batch_rows if r["true_user"] == user.label]
        row: list = [user.label]
        for mode in modes:
            rates = []
            for k in RANKS:
                if not mine:
                    rates.append(None)
                    continue
                hits = sum(
                    1 for r in mine
                    if r[f"rank_{_mode_key(mode)}"] is not None
                    and r[f"rank_{_mode_key(mode)}"] <= k
                )
                rates.append(round(100.0 * hits / len(mine), 1))
            check_rank_monotone(rates, f"rank_tpir/{user.label}/{_mode_key(mode)}")
            per_user_values.setdefault(mode, []).append(rates)
            row += rates
        rows.append(row)
    average: list = ["AVERAGE"]
    for mode in modes:
        triples = per_user_values.get(mode, [])
        avg = [_mean_or_none([t[i] for t in triples]) for i in range(len(RANKS))]
        check_rank_monotone(avg, f"rank_tpir/AVERAGE/{_mode_key(mode)}")
        average += avg
    rows.append(average)
    return {"columns": columns, "rows": rows}


def _service_tpir_table(
    model: IdentityModel, samples: Sequence[LabeledSample]
) -> dict:
    batches = group_batches(samples, window_s=BATCH_WINDOW_S, per_service=True)
    by_service: dict = {}
    for b in batches:
        by_service.setdefault(b.service, []).append(b)
    rows = []
    triples = []
    for service in sorted(by_service):
        results = [
            (identify(model, IdentificationBatch(b.interactions, Mode.FUSION)),
             b.true_user)
            for b in by_service[service]
        ]
        rates = [tpir_at_rank(results, k) for k in RANKS]
        check_rank_monotone(rates, f"service_tpir/{service}")
        triples.append(rates)
        rows.append([service, len(model.users_for_service(service))] + rates)
    average = ["AVERAGE", None] + [
        _mean_or_none([t[i] for t in triples]) for i in range(len(RANKS))
    ]
    rows.append(average)
    return {
        "columns": ["service", "enrolled_users"] + [f"fusion_rank{k}" for k in RANKS],
        "rows": rows,
    }


def _best_service_tables(
    model: IdentityModel, samples: Sequence[LabeledSample]
) -> dict:
    rows = []
    columns = ["user"]
    for i in (1, 2, 3):
        columns += [f"best{i}_service", f"best{i}_rate"]
    columns.append("insufficient_data")
    position_rates: dict = {1: [], 2: [], 3: []}
    for row in best_service_table(model, samples, window_s=BATCH_WINDOW_S):
        out: list = [row.user.label]
        for i in range(3):
            if i < len(row.entries):
                service, rate = row.entries[i]
                out += [service, rate]
                position_rates[i + 1].append(rate)
            else:
                out += [None, None]
        out.append(row.insufficient_data)
        rows.append(out)
    average: list = ["AVERAGE"]
    for i in (1, 2, 3):
        average += [None, _mean_or_none(position_rates[i])]
    average.append(None)
    rows.append(average)
    return {"columns": columns, "rows": rows}


def _window_key(w: float) -> str:
    return f"w{w:g}"


def batch_rank_rows(model, samples) -> tuple[list, list]:
    """One row per (src_ip, window) evaluation batch carrying the true
    user's rank under every mode the model supports."""
    modes = [Mode.MAX_RULE, Mode.FUSION]
    if model.pooled is not None:
        modes.append(Mode.POOLED_BASELINE)
    batch_rows = []
    for b in group_batches(samples, window_s=BATCH_WINDOW_S):
        row = {
            "src_ip": b.src_ip,
            "window_start": b.window_start,
            "service": b.service,
            "true_user": b.true_user.label,
            "interaction_ids": [i.interaction_id for i in b.interactions],
        }
        for mode in modes:
            ranked = identify(model, IdentificationBatch(b.interactions, mode))
            row[f"rank_{_mode_key(mode)}"] = ranked.rank_of(b.true_user)
        batch_rows.append(row)
    return batch_rows, modes


def evaluation_tables(model, samples) -> tuple[dict, list]:
    """The three recognition tables for an already-trained model, plus the
    raw batch rows they were computed from."""
    batch_rows, modes = batch_rank_rows(model, samples)
    users = sorted(model.enrolled_users, key=lambda u: u.numeric_id)
    tables = {
        "rank_tpir": _rank_tpir_table(batch_rows, users, modes),
        "service_tpir": _service_tpir_table(model, samples),
        "best_service": _best_service_tables(model, samples),
    }
    return tables, batch_rows


def timeline_table(
    model,
    samples,
    windows: Sequence[float] = DEFAULT_WINDOW_PRESETS,
    confidence_threshold: float = DEFAULT_CONFIDENCE,
) -> tuple[dict, list]:
    """Per-user rank-1 rates across window presets, plus one row per test
    interaction with its final label under every window."""
    decisions = interaction_decisions(model, samples)
    base, labels_by_window = per_window_labels(
        decisions, windows, confidence_threshold
    )
    interaction_rows = []
    for inter, ranked, true_user in decisions:
        top = ranked.top1()
        interaction_rows.append({
            "interaction_id": inter.interaction_id,
            "true_user": true_user.label,
            "base_top1": _user_label(base[inter.interaction_id]),
            "base_confidence": top[1] if top else None,
            "labels": {
                _window_key(w): _user_label(
                    labels_by_window[w].get(inter.interaction_id))
                for w in windows
            },
        })

    rows = []
    window_rates = {w: rank1_rates(labels_by_window[w], samples) for w in windows}
    for user in sorted(window_rates[windows[0]][0], key=lambda u: u.numeric_id):
        rows.append([user.label] + [window_rates[w][0][user] for w in windows])
    rows.append(["AVERAGE"] + [window_rates[w][1] for w in windows])
    table = {
        "columns": ["user"] + [_window_key(w) for w in windows],
        "rows": rows,
        "confidence_threshold": confidence_threshold,
    }
    return table, interaction_rows


def run_experiments(
    dataset: Dataset,
    mlp_cfg: Optional[MlpConfig] = None,
    policy: Optional[EnrollmentPolicy] = None,
    windows: Sequence[float] = DEFAULT_WINDOW_PRESETS,
    confidence_threshold: float = DEFAULT_CONFIDENCE,
    signatures: Optional[Sequence[ServiceSignature]] = None,
    include_pooled: bool = True,
) -> ExperimentReport:
    """Enroll, score every mode, sweep the timeline windows, build the report.

    The per-sample section carries one row per evaluation batch (with the
    rank of the true user under each mode) and one row per test interaction
    (with its final label under every window), so each table is recomputable
    from the report alone.
    """
    mlp_cfg = mlp_cfg if mlp_cfg is not None else MlpConfig()
    policy = policy if policy is not None else EnrollmentPolicy()
    signatures = (
        list(default_signatures()) if signatures is None else list(signatures)
    )

    try:
        model, samples = enroll(dataset, policy, mlp_cfg,
                                include_pooled=include_pooled)
    except EnrollmentError as e:
        raise EnrollmentError(
            f"enrollment failed on dataset with {len(dataset.interactions)} "
            f"interactions, {dataset.n_users} users: {e}"
        ) from e

    eval_tables, batch_rows = evaluation_tables(model, samples)
    window_table, interaction_rows = timeline_table(
        model, samples, windows, confidence_threshold
    )
    tables = {
        "reduction": _reduction_table(dataset, signatures),
        "coverage": _coverage_table(dataset),
        **eval_tables,
        "timeline": window_table,
    }

    config_echo = {
        "mlp": _enum_safe(dataclasses.asdict(mlp_cfg)),
        "policy": _enum_safe(dataclasses.asdict(policy)),
        "windows": list(windows),
        "confidence_threshold": confidence_threshold,
        "batch_window_s": BATCH_WINDOW_S,
        "ranks": list(RANKS),
        "include_pooled": include_pooled,
        "dataset": {
            "n_users": dataset.n_users,
            "records": len(dataset.records),
            "interactions": len(dataset.interactions),
            "services": sorted({i.service for i in dataset.interactions}),
        },
    }
    seed_manifest = {
        "mlp_seed": mlp_cfg.seed,
        "policy_seed": policy.seed,
        "split": policy.split.value,
    }
    return ExperimentReport(
        config_echo=config_echo,
        seed_manifest=seed_manifest,
        tables=tables,
        per_sample={"batches": batch_rows, "interactions": interaction_rows},
    )


def _enum_safe(obj):
    if isinstance(obj, dict):
        return {k: _enum_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_enum_safe(v) for v in obj]
    if hasattr(obj, "value") and obj.__class__.__module__ != "builtins":
        return obj.value
    return obj


def _format_cell(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, float):
        return f"{value:.1f}"
    return str(value)


def render_table_text(name: str, table: dict) -> str:
    columns = table["columns"]
    body = [[_format_cell(v) for v in row] for row in table["rows"]]
    widths = [
        max(len(str(columns[i])), *(len(r[i]) for r in body)) if body
        else len(str(columns[i]))
        for i in range(len(columns))
    ]
    lines = [name]
    lines.append("  ".join(str(c).ljust(w) for c, w in zip(columns, widths)).rstrip())
    lines.append("  ".join("-" * w for w in widths))
    for row in body:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"


def write_report(report: ExperimentReport, out_dir) -> None:
    """Serialize the report as a directory; same report, same bytes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tables_dir = out / "tables"
    tables_dir.mkdir(exist_ok=True)
    write_json_atomic(out / "config.json", {
        "config": report.config_echo,
        "seeds": report.seed_manifest,
    })
    for name in TABLE_NAMES:
        table = report.tables[name]
        write_json_atomic(tables_dir / f"{name}.json", table)
        write_text_atomic(tables_dir / f"{name}.txt",
                          render_table_text(name, table))
    write_json_atomic(out / "per_sample.json", report.per_sample)
