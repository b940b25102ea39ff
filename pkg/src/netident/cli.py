"""Command line front end: the whole pipeline, headless.

One executable, nine subcommands: ingest, extract, synth, enroll,
identify, evaluate, timeline, serve, report.  Configuration lives in
files (flags override individual fields) so an experiment is a manifest
plus a command line, and the same invocation always produces the same
bytes.

Exit codes: 0 success, 2 usage, 3 input that fails to parse or validate,
4 analysis that cannot proceed, 5 service failures.  Diagnostics go to
stderr as ``netident: error [<code-word>]: <message>``.  Single-file
outputs are written to a temporary name and renamed; directory outputs
are staged completely and swapped in, so an interrupted run never leaves
a partial artifact where a complete one should be.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import shutil
import sys
from pathlib import Path
from typing import Optional

from netident.experiments import (
    DEFAULT_CONFIDENCE,
    DEFAULT_WINDOW_PRESETS,
    evaluation_tables,
    render_table_text,
    timeline_table,
)
from netident.identity import (
    EnrollmentError,
    EnrollmentPolicy,
    IdentificationBatch,
    IdentificationError,
    LabeledSample,
    MlpConfig,
    Mode,
    SplitKind,
    enroll,
    identify,
    load_identity_model,
    save_identity_model,
)
from netident.ingest import (
    IngestConfig,
    InputKind,
    MetadataParseError,
    PcapParseError,
    UnsupportedFormatError,
    parse_metadata_file,
    parse_pcap_file,
)
from netident.interactions import (
    default_signatures,
    load_signatures,
    reduction_report,
    segment_interactions,
)
from netident.model import (
    DATASET_SCHEMA_VERSION,
    DomainError,
    LineFormatError,
    interaction_to_dict,
    load_dataset,
    save_dataset,
    write_json_atomic,
    write_records,
    write_text_atomic,
)
from netident.synth import GeneratorConfig, generate
from netident.timeline import TimelineConfig

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_ANALYSIS = 4
EXIT_SERVICE = 5

_CODE_WORDS = {
    EXIT_USAGE: "usage",
    EXIT_INPUT: "input-parse",
    EXIT_ANALYSIS: "analysis",
    EXIT_SERVICE: "service",
}


class CliError(Exception):
    def __init__(self, exit_code: int, message: str):
        super().__init__(message)
        self.exit_code = exit_code


def _input_error(message: str) -> CliError:
    return CliError(EXIT_INPUT, message)


@contextlib.contextmanager
def _staged_dir(target):
    """Build a directory output off to the side, then swap it into place.

    The stage is a sibling of the target so the final rename stays on one
    filesystem.  On failure the stage is removed and the target untouched.
    """
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    stage = target.parent / f".{target.name}.stage-{os.getpid()}"
    if stage.exists():
        shutil.rmtree(stage)
    stage.mkdir()
    try:
        yield stage
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    if target.exists():
        shutil.rmtree(target)
    os.replace(stage, target)


def _load_json(path, what: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as e:
        raise _input_error(f"cannot read {what}: {e}") from None
    except json.JSONDecodeError as e:
        raise _input_error(f"{what} is not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise _input_error(f"{what} must be a JSON object")
    return doc


def _merged(config: dict, section: str, overrides: dict) -> dict:
    out = dict(config.get(section) or {})
    out.update({k: v for k, v in overrides.items() if v is not None})
    return out


def _load_dataset(path):
    try:
        return load_dataset(Path(path))
    except FileNotFoundError as e:
        raise _input_error(f"dataset incomplete: {e}") from None
    except (MetadataParseError, LineFormatError, DomainError, ValueError, KeyError) as e:
        raise _input_error(f"dataset unreadable: {e}") from None


def _load_sigs(path):
    if path is None:
        return default_signatures()
    try:
        return load_signatures(path)
    except OSError as e:
        raise _input_error(f"cannot read signatures: {e}") from None
    except (ValueError, KeyError) as e:
        raise _input_error(f"signature file invalid: {e}") from None


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    kind = args.format
    if kind == "auto":
        kind = "pcap" if Path(args.input).suffix in (".pcap", ".cap") else "metadata"
    if kind == "pcap":
        if not args.monitored:
            raise CliError(EXIT_USAGE, "pcap input requires --monitored")
        cfg = IngestConfig(
            monitored_hosts=frozenset(args.monitored.split(",")),
            input_kind=InputKind.PCAP,
            max_records=args.max_records,
        )
        try:
            result = parse_pcap_file(args.input, cfg)
        except (PcapParseError, UnsupportedFormatError) as e:
            raise _input_error(str(e)) from None
        except OSError as e:
            raise _input_error(f"cannot read capture: {e}") from None
        records, skipped = result.records, result.skipped_total
    else:
        try:
            records = parse_metadata_file(args.input, max_records=args.max_records)
        except MetadataParseError as e:
            raise _input_error(str(e)) from None
        except OSError as e:
            raise _input_error(f"cannot read metadata: {e}") from None
        skipped = 0
    write_records(Path(args.out), records)
    print(f"{len(records)} records written to {args.out}" + (f" ({skipped} frames skipped)" if skipped else ""))
    return EXIT_OK


def cmd_extract(args) -> int:
    try:
        records = parse_metadata_file(args.records)
    except MetadataParseError as e:
        raise _input_error(str(e)) from None
    except OSError as e:
        raise _input_error(f"cannot read records: {e}") from None
    signatures = _load_sigs(args.signatures)
    interactions = segment_interactions(records, signatures)
    report = reduction_report(records, interactions, signatures)

    write_json_atomic(
        Path(args.out_interactions),
        {
            "schema_version": DATASET_SCHEMA_VERSION,
            "interactions": [interaction_to_dict(i) for i in interactions],
        },
    )
    table = {
        "columns": ["service", "packets", "interactions", "reduction_pct"],
        "rows": [
            [r.service, r.packets, r.interactions, r.reduction_pct]
            for r in report.rows
        ]
        + [["OVERALL", report.overall.packets, report.overall.interactions,
            report.overall.reduction_pct]],
        "unmatched_packets": report.unmatched_packets,
    }
    write_json_atomic(Path(args.out_report), table)
    print(render_table_text("reduction", table), end="")
    print(f"{len(interactions)} interactions from {len(records)} records")
    return EXIT_OK


_SYNTH_FIELDS = {
    "users": "n_users",
    "days": "days",
    "seed": "seed",
    "separability": "separability",
    "coverage": "service_coverage",
    "churn_s": "ip_churn_s",
}


def cmd_synth(args) -> int:
    doc = _load_json(args.config, "generator config") if args.config else {}
    for flag, field in _SYNTH_FIELDS.items():
        value = getattr(args, flag)
        if value is not None:
            doc[field] = value
    if args.services is not None:
        doc["services"] = tuple(s for s in args.services.split(",") if s)
    signatures = _load_sigs(args.signatures) if args.signatures else None
    try:
        cfg = GeneratorConfig(**doc)
        dataset = generate(cfg, signatures=signatures)
    except TypeError as e:
        raise _input_error(f"generator config: {e}") from None
    except (DomainError, ValueError) as e:
        raise _input_error(str(e)) from None
    with _staged_dir(args.out) as stage:
        save_dataset(dataset, stage)
    print(
        f"{len(dataset.records)} records, {len(dataset.interactions)} interactions, "
        f"{dataset.n_users} users -> {args.out}"
    )
    return EXIT_OK


def _mlp_config(doc: dict) -> MlpConfig:
    try:
        return MlpConfig(**doc)
    except (TypeError, ValueError) as e:
        raise _input_error(f"mlp config: {e}") from None


def _policy(doc: dict) -> EnrollmentPolicy:
    doc = dict(doc)
    try:
        if "split" in doc:
            doc["split"] = SplitKind(doc["split"])
        return EnrollmentPolicy(**doc)
    except (TypeError, ValueError) as e:
        raise _input_error(f"policy config: {e}") from None


def cmd_enroll(args) -> int:
    dataset = _load_dataset(args.dataset)
    config = _load_json(args.config, "enroll config") if args.config else {}
    mlp_cfg = _mlp_config(
        _merged(
            config,
            "mlp",
            {
                "hidden_neurons": args.hidden_neurons,
                "epochs": args.epochs,
                "seed": args.mlp_seed,
                "trainer": args.trainer,
                "learning_rate": args.learning_rate,
            },
        )
    )
    policy = _policy(
        _merged(config, "policy", {"min_interactions_per_pair": args.min_interactions})
    )
    include_pooled = config.get("include_pooled", True)
    if args.no_pooled:
        include_pooled = False

    try:
        model, samples = enroll(dataset, policy, mlp_cfg, include_pooled=include_pooled)
    except EnrollmentError as e:
        raise CliError(EXIT_ANALYSIS, str(e)) from None

    manifest = {
        "schema_version": 1,
        "mlp": {
            "input_dim": mlp_cfg.input_dim,
            "hidden_neurons": mlp_cfg.hidden_neurons,
            "epochs": mlp_cfg.epochs,
            "seed": mlp_cfg.seed,
            "trainer": mlp_cfg.trainer,
        },
        "policy": {
            "min_interactions_per_pair": policy.min_interactions_per_pair,
            "split": policy.split.value,
            "seed": policy.seed,
        },
        "include_pooled": include_pooled,
        "classifiers": len(model.classifiers),
        "enrolled_users": sorted(u.label for u in model.enrolled_users),
        "test_samples": [
            {"interaction_id": s.interaction.interaction_id, "user": s.user.label}
            for s in samples
        ],
    }
    with _staged_dir(args.out) as stage:
        save_identity_model(stage / "model.json", model)
        write_json_atomic(stage / "split.json", manifest)
    print(
        f"{len(model.classifiers)} classifiers over {len(model.enrolled_users)} users, "
        f"{len(samples)} held-out samples -> {args.out}"
    )
    return EXIT_OK


def _load_model_dir(path) -> tuple:
    """An enrollment directory: model.json plus the held-out split manifest."""
    base = Path(path)
    model_path = base / "model.json" if base.is_dir() else base
    try:
        model = load_identity_model(model_path)
    except FileNotFoundError as e:
        raise _input_error(f"model missing: {e}") from None
    except (ValueError, KeyError) as e:
        raise _input_error(f"model unreadable: {e}") from None
    return model, model_path.parent


def _split_samples(model_dir: Path, dataset) -> list[LabeledSample]:
    doc = _load_json(model_dir / "split.json", "split manifest")
    by_id = {i.interaction_id: i for i in dataset.interactions}
    by_label = {u.label: u for u in dataset.ground_truth.users}
    samples = []
    for row in doc.get("test_samples", []):
        inter = by_id.get(row.get("interaction_id"))
        user = by_label.get(row.get("user"))
        if inter is None:
            raise _input_error(
                f"split names interaction {row.get('interaction_id')} "
                "absent from the dataset"
            )
        if user is None:
            raise _input_error(f"split names unknown user {row.get('user')!r}")
        samples.append(LabeledSample(inter, user))
    if not samples:
        raise _input_error("split manifest holds no test samples")
    return samples


def cmd_identify(args) -> int:
    model, _ = _load_model_dir(args.model)
    dataset = _load_dataset(args.dataset)
    chosen = [
        i
        for i in dataset.interactions
        if i.src_ip == args.ip
        and (args.start is None or i.start >= args.start)
        and (args.end is None or i.start < args.end)
    ]
    if not chosen:
        raise CliError(EXIT_ANALYSIS, f"no interactions from {args.ip} in that window")
    try:
        ranked = identify(model, IdentificationBatch(tuple(chosen), Mode[args.mode]))
    except IdentificationError as e:
        raise CliError(EXIT_ANALYSIS, str(e)) from None
    doc = {
        "ip": args.ip,
        "mode": args.mode,
        "start": args.start,
        "end": args.end,
        "interactions": len(chosen),
        "ranking": [{"user": u.label, "score": s} for u, s in ranked.entries],
    }
    if args.out:
        write_json_atomic(Path(args.out), doc)
    else:
        print(json.dumps(doc, indent=1, sort_keys=True))
    return EXIT_OK


def _write_tables(stage: Path, tables: dict, extras: dict) -> None:
    (stage / "tables").mkdir()
    for name, table in tables.items():
        write_json_atomic(stage / "tables" / f"{name}.json", table)
        write_text_atomic(
            stage / "tables" / f"{name}.txt", render_table_text(name, table)
        )
    for name, doc in extras.items():
        write_json_atomic(stage / name, doc)


def cmd_evaluate(args) -> int:
    model, model_dir = _load_model_dir(args.model)
    dataset = _load_dataset(args.dataset)
    samples = _split_samples(model_dir, dataset)
    try:
        tables, batch_rows = evaluation_tables(model, samples)
    except IdentificationError as e:
        raise CliError(EXIT_ANALYSIS, str(e)) from None
    with _staged_dir(args.out) as stage:
        _write_tables(stage, tables, {"per_sample.json": {"batches": batch_rows}})
    for name in ("rank_tpir", "service_tpir", "best_service"):
        print(render_table_text(name, tables[name]), end="")
    return EXIT_OK


def _parse_windows(text: str) -> tuple[float, ...]:
    try:
        windows = tuple(float(w) for w in text.split(",") if w.strip() != "")
    except ValueError:
        raise _input_error(f"windows must be comma-separated numbers: {text!r}") from None
    if not windows:
        raise _input_error("at least one window is required")
    return windows


def cmd_timeline(args) -> int:
    model, model_dir = _load_model_dir(args.model)
    dataset = _load_dataset(args.dataset)
    samples = _split_samples(model_dir, dataset)
    windows = _parse_windows(args.windows)
    try:  # reuse the config validation for the threshold and window range
        for w in windows:
            TimelineConfig(window_s=w, confidence_threshold=args.confidence)
    except ValueError as e:
        raise _input_error(str(e)) from None
    table, interaction_rows = timeline_table(
        model, samples, windows, confidence_threshold=args.confidence
    )
    with _staged_dir(args.out) as stage:
        _write_tables(
            stage,
            {"timeline": table},
            {"per_sample.json": {"interactions": interaction_rows}},
        )
    print(render_table_text("timeline", table), end="")
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from netident.service import create_app

    try:
        app = create_app(args.data_dir, args.tokens)
    except (OSError, ValueError) as e:
        raise CliError(EXIT_SERVICE, f"cannot start service: {e}") from None
    try:
        uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    except (OSError, SystemExit) as e:
        raise CliError(EXIT_SERVICE, f"server stopped: {e}") from None
    return EXIT_OK


def cmd_report(args) -> int:
    from netident.service.store import CaseStore, case_report, serialize_doc

    store = CaseStore(args.data_dir)
    report = case_report(store, args.case)
    if report is None:
        raise _input_error(f"no such case: {args.case}")
    data = serialize_doc(report)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        tmp = out.with_suffix(out.suffix + ".tmp")
        tmp.write_bytes(data)
        os.replace(tmp, out)
    else:
        sys.stdout.write(data.decode("utf-8"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="netident",
        description="User identification over encrypted-traffic metadata: "
        "ingest captures, extract interactions, train per-user models, "
        "attribute timelines and serve casework.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="convert a capture or metadata file to canonical records")
    p.add_argument("--input", required=True, help="pcap or metadata CSV file")
    p.add_argument("--format", choices=("auto", "pcap", "metadata"), default="auto",
                   help="input kind; auto decides by file extension")
    p.add_argument("--monitored", help="comma-separated monitored host IPs (pcap only)")
    p.add_argument("--max-records", type=int, help="stop after this many records")
    p.add_argument("--out", required=True, help="canonical records file to write")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("extract", help="segment records into interactions and report the reduction")
    p.add_argument("--records", required=True, help="canonical records file")
    p.add_argument("--signatures", help="service signature JSON (default: bundled table)")
    p.add_argument("--out-interactions", required=True, help="interactions JSON to write")
    p.add_argument("--out-report", required=True, help="reduction report JSON to write")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("synth", help="generate a labeled synthetic dataset")
    p.add_argument("--config", help="generator config JSON file")
    p.add_argument("--users", type=int, help="number of users")
    p.add_argument("--days", type=float, help="capture length in days")
    p.add_argument("--seed", type=int, help="generator seed")
    p.add_argument("--separability", type=float, help="behavioral separation factor")
    p.add_argument("--coverage", type=float, help="per-user service adoption probability")
    p.add_argument("--churn-s", type=float, dest="churn_s",
                   help="mean seconds between IP reassignments (omit for constant IPs)")
    p.add_argument("--services", help="comma-separated service names")
    p.add_argument("--signatures", help="service signature JSON (default: bundled table)")
    p.add_argument("--out", required=True, help="dataset directory to write")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("enroll", help="train per-user classifiers on the first half of a dataset")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--config", help="JSON with 'mlp', 'policy' and 'include_pooled'")
    p.add_argument("--hidden-neurons", type=int, help="hidden layer width")
    p.add_argument("--epochs", type=int, help="training epochs")
    p.add_argument("--mlp-seed", type=int, help="weight initialization seed")
    p.add_argument("--trainer", choices=("lm", "gd"), help="training algorithm")
    p.add_argument("--learning-rate", type=float, help="step size (gd trainer only)")
    p.add_argument("--min-interactions", type=int,
                   help="enrollment floor per (user, service) pair")
    p.add_argument("--no-pooled", action="store_true",
                   help="skip the pooled multi-class baseline")
    p.add_argument("--out", required=True, help="model directory to write")
    p.set_defaults(func=cmd_enroll)

    p = sub.add_parser("identify", help="rank users for one address over a time window")
    p.add_argument("--model", required=True, help="enrollment directory (or model.json)")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--ip", required=True, help="source address to attribute")
    p.add_argument("--start", type=float, help="window start (inclusive)")
    p.add_argument("--end", type=float, help="window end (exclusive)")
    p.add_argument("--mode", choices=tuple(m.name for m in Mode), default="FUSION",
                   help="score aggregation rule")
    p.add_argument("--out", help="write the ranking JSON here instead of stdout")
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("evaluate", help="recognition tables for a trained model on its held-out split")
    p.add_argument("--model", required=True, help="enrollment directory")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="report directory to write")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("timeline", help="rank-1 rates across attribution window presets")
    p.add_argument("--model", required=True, help="enrollment directory")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--windows", default=",".join(f"{w:g}" for w in DEFAULT_WINDOW_PRESETS),
                   help="comma-separated half-window seconds")
    p.add_argument("--confidence", type=float, default=DEFAULT_CONFIDENCE,
                   help="anchor confidence threshold")
    p.add_argument("--out", required=True, help="report directory to write")
    p.set_defaults(func=cmd_timeline)

    p = sub.add_parser("serve", help="run the casework HTTP service")
    p.add_argument("--data-dir", required=True, help="case storage directory")
    p.add_argument("--tokens", required=True, help="bearer token file")
    p.add_argument("--host", default="127.0.0.1", help="bind address")
    p.add_argument("--port", type=int, default=8400, help="bind port")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("report", help="render the shareable report for one case")
    p.add_argument("--data-dir", required=True, help="case storage directory")
    p.add_argument("--case", required=True, help="case id, e.g. c1")
    p.add_argument("--out", help="write the report here instead of stdout")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        word = _CODE_WORDS.get(e.exit_code, "error")
        print(f"netident: error [{word}]: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
