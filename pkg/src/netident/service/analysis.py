"""Analysis jobs: train (or load) an identity model and materialize one
attribution row per interaction.

Queries never touch the classifiers.  A job freezes its verdicts into
``rows.json`` at completion time, so paging investigators always see a
consistent world, and re-running with a different timeline threshold is
an explicit, audited event rather than a silent recomputation.
"""

from __future__ import annotations

import dataclasses
import hashlib
import traceback
from pathlib import Path
from typing import Optional

from netident.identity import (
    EnrollmentPolicy,
    IdentificationBatch,
    IdentificationError,
    IdentityModel,
    MlpConfig,
    Mode,
    RankedList,
    SplitKind,
    enroll,
    identify,
    load_identity_model,
)
from netident.model import Dataset, load_dataset
from netident.timeline import TimelineConfig, build_spans, covering_spans

DATASET_FILES = ("records.csv", "ground_truth.json", "interactions.json")


def _checked(doc: Optional[dict], allowed: set[str], label: str) -> dict:
    doc = dict(doc or {})
    unknown = set(doc) - allowed
    if unknown:
        raise ValueError(f"unknown {label} option(s): {sorted(unknown)}")
    return doc


def mlp_config_from(doc: Optional[dict]) -> MlpConfig:
    fields = {f.name for f in dataclasses.fields(MlpConfig) if f.init}
    return MlpConfig(**_checked(doc, fields, "mlp"))


def policy_from(doc: Optional[dict]) -> EnrollmentPolicy:
    kwargs = _checked(doc, {"min_interactions_per_pair", "split", "seed"}, "policy")
    if "split" in kwargs:
        kwargs["split"] = SplitKind(kwargs["split"])
    return EnrollmentPolicy(**kwargs)


def timeline_config_from(doc: Optional[dict]) -> TimelineConfig:
    return TimelineConfig(**_checked(doc, {"window_s", "confidence_threshold"}, "timeline"))


def fingerprint_dataset(directory: Path) -> str:
    """SHA-256 over the dataset files; names a dataset independent of path."""
    directory = Path(directory)
    if not (directory / DATASET_FILES[0]).exists():
        raise ValueError(f"not a dataset directory: {directory}")
    h = hashlib.sha256()
    for name in DATASET_FILES:
        path = directory / name
        if path.exists():
            h.update(name.encode())
            h.update(path.read_bytes())
    return h.hexdigest()


def fingerprint_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def materialize_rows(dataset: Dataset, model: IdentityModel, cfg: TimelineConfig) -> list[dict]:
    """One verdict row per interaction, timeline spans already applied.

    ``user`` is the final attribution (span label where covered, otherwise
    the direct top-1); ``anchor_id``/``anchor_confidence`` say which high
    confidence decision carried it, and are null for direct verdicts.
    """
    decisions = []
    for inter in dataset.interactions:
        try:
            ranked = identify(model, IdentificationBatch((inter,), Mode.FUSION))
        except IdentificationError:
            ranked = RankedList(())
        decisions.append((inter, ranked))

    spans = build_spans(decisions, cfg)
    covering = covering_spans(dataset.interactions, spans)

    rows = []
    for inter, ranked in decisions:
        top = ranked.top1()
        base_user = top[0].label if top else None
        base_conf = round(top[1], 6) if top else None
        span = covering.get(inter.interaction_id)
        rows.append(
            {
                "interaction_id": inter.interaction_id,
                "src_ip": inter.src_ip,
                "service": inter.service,
                "start": inter.start,
                "end": inter.end,
                "packets": len(inter.packets),
                "base_user": base_user,
                "base_confidence": base_conf,
                "user": span.user.label if span else base_user,
                "anchor_id": span.anchor_id if span else None,
                "anchor_confidence": round(span.anchor_confidence, 6) if span else None,
            }
        )
    rows.sort(key=lambda r: (r["start"], r["interaction_id"]))
    return rows


def run_job(store, case_id: str, analysis_id: str, account: str) -> None:
    """Execute one submitted analysis to completion.  Runs on a worker
    thread; every state change goes through the audited store."""
    meta = store.read_analysis_meta(case_id, analysis_id)
    obj = f"analysis:{analysis_id}"
    meta["status"] = "running"
    store.commit(case_id, account, "analysis.run", [(obj, meta)])
    try:
        dataset = load_dataset(Path(meta["dataset_ref"]))
        if meta.get("model_ref"):
            model = load_identity_model(Path(meta["model_ref"]))
        else:
            model, _ = enroll(
                dataset,
                policy_from(meta["config"]["policy"]),
                mlp_config_from(meta["config"]["mlp"]),
                include_pooled=bool(meta["config"].get("include_pooled", False)),
            )
        rows = materialize_rows(dataset, model, timeline_config_from(meta["config"]["timeline"]))
        meta.update(
            status="done",
            error=None,
            rows=len(rows),
            users=sorted(u.label for u in dataset.ground_truth.users),
            services=sorted({i.service for i in dataset.interactions}),
        )
        store.commit(
            case_id,
            account,
            "analysis.complete",
            [(f"rows:{analysis_id}", rows), (obj, meta)],
        )
    except Exception as e:  # job must land in a terminal state, whatever broke
        meta.update(status="failed", error=f"{type(e).__name__}: {e}")
        meta["trace"] = traceback.format_exc().splitlines()[-3:]
        store.commit(case_id, account, "analysis.fail", [(obj, meta)])
