"""HTTP surface for casework.

:func:`create_app` wires a :class:`~netident.service.store.CaseStore`
into a FastAPI application.  Request handling is thin on purpose: every
durable effect goes through the store (which audits it), every analytic
verdict comes from a materialized analysis, and queries are cached just
long enough to let a bookmark seal exactly the rows the investigator saw.

Status codes: 401 bad or missing token, 403 insufficient role, 404
missing object, 409 state conflicts (duplicate attach, querying before
any analysis finished), 422 requests that fail validation.
"""

from __future__ import annotations

import threading
import time
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Optional, Union

from fastapi import Body, Depends, FastAPI, Header, HTTPException, Response

from netident.model import load_dataset
from netident.service.analysis import (
    fingerprint_dataset,
    fingerprint_file,
    mlp_config_from,
    policy_from,
    run_job,
    timeline_config_from,
)
from netident.service.auth import AuthError, Role, load_tokens, resolve_token
from netident.service.queries import QueryContext, QueryError, QuerySpec, execute
from netident.service.store import CaseStore, case_report, content_digest, serialize_doc

RESULT_CACHE_CAP = 200
DATASET_CACHE_CAP = 4


def create_app(
    data_dir: Union[str, Path],
    token_path: Union[str, Path],
    clock: Callable[[], float] = time.time,
) -> FastAPI:
    store = CaseStore(data_dir, clock=clock)
    tokens = load_tokens(token_path)
    app = FastAPI(title="casework", docs_url=None, redoc_url=None)

    results: "OrderedDict[tuple[str, str], dict]" = OrderedDict()
    rows_cache: dict[tuple[str, str], list] = {}
    dataset_cache: "OrderedDict[str, dict]" = OrderedDict()
    cache_lock = threading.Lock()
    token_counter = [0]

    def _now() -> float:
        return round(clock(), 3)

    # -- auth and access ----------------------------------------------------

    def _account(authorization: Optional[str] = Header(default=None)) -> str:
        try:
            return resolve_token(tokens, authorization)
        except AuthError as e:
            raise HTTPException(status_code=401, detail=str(e)) from None

    def _case_or_404(case_id: str) -> dict:
        case = store.read_case(case_id)
        if case is None:
            raise HTTPException(status_code=404, detail=f"no such case: {case_id}")
        return case

    def _role_of(case: dict, account: str) -> Optional[Role]:
        for p in case["participants"]:
            if p["account"] == account:
                return Role.parse(p["role"])
        return None

    def _require(
        case: dict, account: str, min_role: Role, denied_action: Optional[str] = None
    ) -> Role:
        """403 unless the account holds min_role on the case.  Mutating
        endpoints pass their action name so the denial lands in the audit."""
        role = _role_of(case, account)
        if role is None or role < min_role:
            if denied_action is not None:
                store.record_denied(case["case_id"], account, denied_action)
            raise HTTPException(status_code=403, detail="insufficient role for this operation")
        return role

    def _body(body) -> dict:
        if body is None:
            return {}
        if not isinstance(body, dict):
            raise HTTPException(status_code=422, detail="request body must be a JSON object")
        return body

    # -- analysis context ---------------------------------------------------

    def _analysis_rows(case_id: str, analysis_id: str) -> list:
        with cache_lock:
            rows = rows_cache.get((case_id, analysis_id))
        if rows is None:
            rows = store.read_analysis_rows(case_id, analysis_id)
            if rows is None:
                raise HTTPException(status_code=409, detail="analysis rows not materialized")
            with cache_lock:
                rows_cache[(case_id, analysis_id)] = rows
        return rows

    def _interaction_index(meta: dict) -> dict:
        key = meta["dataset_fingerprint"]
        with cache_lock:
            if key in dataset_cache:
                dataset_cache.move_to_end(key)
                return dataset_cache[key]
        dataset = load_dataset(Path(meta["dataset_ref"]))
        index = {i.interaction_id: i for i in dataset.interactions}
        with cache_lock:
            dataset_cache[key] = index
            while len(dataset_cache) > DATASET_CACHE_CAP:
                dataset_cache.popitem(last=False)
        return index

    def _context(case_id: str, analysis_id: str, meta: dict) -> QueryContext:
        return QueryContext(
            rows=_analysis_rows(case_id, analysis_id),
            users=tuple(meta["users"]),
            services=tuple(meta["services"]),
            interaction_lookup=lambda iid: _interaction_index(meta).get(iid),
        )

    def _latest_done(case_id: str) -> tuple[str, dict]:
        latest = store.latest_done_analysis(case_id)
        if latest is None:
            raise HTTPException(status_code=409, detail="no completed analysis to query")
        return latest

    def _remember(case_id: str, analysis_id: str, spec: QuerySpec, page: list) -> str:
        with cache_lock:
            token_counter[0] += 1
            token = f"q{token_counter[0]}"
            results[(case_id, token)] = {
                "analysis_id": analysis_id,
                "query_spec": spec.to_dict(),
                "rows": page,
            }
            while len(results) > RESULT_CACHE_CAP:
                results.popitem(last=False)
        return token

    # -- endpoints ----------------------------------------------------------

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.post("/cases", status_code=201)
    def create_case(body=Body(default=None), account: str = Depends(_account)):
        doc = _body(body)
        title = doc.get("title")
        if not isinstance(title, str) or not title.strip():
            raise HTTPException(status_code=422, detail="body must carry a non-empty 'title'")
        return store.create_case(title.strip(), account)

    @app.get("/cases")
    def list_cases(account: str = Depends(_account)):
        rows = []
        for case_id in store.list_cases():
            case = store.read_case(case_id)
            role = _role_of(case, account) if case else None
            if role is not None:
                rows.append({"case_id": case_id, "title": case["title"], "role": role.name})
        return {"cases": rows}

    @app.get("/cases/{case_id}")
    def get_case(case_id: str, account: str = Depends(_account)):
        case = _case_or_404(case_id)
        _require(case, account, Role.VIEWER)
        return case

    @app.post("/cases/{case_id}/participants", status_code=201)
    def add_participant(case_id: str, body=Body(default=None), account: str = Depends(_account)):
        case = _case_or_404(case_id)
        _require(case, account, Role.ADMIN, "participant.add")
        doc = _body(body)
        new_account = doc.get("account")
        if not isinstance(new_account, str) or not new_account:
            raise HTTPException(status_code=422, detail="body must carry an 'account'")
        try:
            role = Role.parse(doc.get("role"))
        except ValueError as e:
            raise HTTPException(status_code=422, detail=str(e)) from None
        with store.case_lock(case_id):
            case = _case_or_404(case_id)
            if any(p["account"] == new_account for p in case["participants"]):
                store.record_denied(case_id, account, "participant.add")
                raise HTTPException(status_code=409, detail="account already participates")
            case["participants"].append({"account": new_account, "role": role.name})
            store.commit(case_id, account, "participant.add", [("case", case)])
        return {"case_id": case_id, "account": new_account, "role": role.name}

    @app.post("/cases/{case_id}/datasets", status_code=201)
    def attach_dataset(case_id: str, body=Body(default=None), account: str = Depends(_account)):
        case = _case_or_404(case_id)
        _require(case, account, Role.INVESTIGATOR, "dataset.attach")
        ref = _body(body).get("ref")
        if not isinstance(ref, str) or not ref:
            raise HTTPException(status_code=422, detail="body must carry a dataset directory 'ref'")
        try:
            fingerprint = fingerprint_dataset(Path(ref))
        except (ValueError, OSError) as e:
            raise HTTPException(status_code=422, detail=f"unusable dataset ref: {e}") from None
        with store.case_lock(case_id):
            case = _case_or_404(case_id)
            if any(d["fingerprint"] == fingerprint for d in case["datasets"]):
                store.record_denied(case_id, account, "dataset.attach")
                raise HTTPException(status_code=409, detail="dataset already attached")
            case["datasets"].append(
                {
                    "ref": ref,
                    "fingerprint": fingerprint,
                    "attached_by": account,
                    "attached_at": _now(),
                }
            )
            store.commit(case_id, account, "dataset.attach", [("case", case)])
        return {"case_id": case_id, "fingerprint": fingerprint, "datasets": len(case["datasets"])}

    @app.post("/cases/{case_id}/models", status_code=201)
    def attach_model(case_id: str, body=Body(default=None), account: str = Depends(_account)):
        case = _case_or_404(case_id)
        _require(case, account, Role.INVESTIGATOR, "model.attach")
        ref = _body(body).get("ref")
        if not isinstance(ref, str) or not ref:
            raise HTTPException(status_code=422, detail="body must carry a model file 'ref'")
        try:
            fingerprint = fingerprint_file(Path(ref))
        except OSError as e:
            raise HTTPException(status_code=422, detail=f"unusable model ref: {e}") from None
        with store.case_lock(case_id):
            case = _case_or_404(case_id)
            if any(m["fingerprint"] == fingerprint for m in case["models"]):
                store.record_denied(case_id, account, "model.attach")
                raise HTTPException(status_code=409, detail="model already attached")
            case["models"].append(
                {
                    "ref": ref,
                    "fingerprint": fingerprint,
                    "attached_by": account,
                    "attached_at": _now(),
                }
            )
            store.commit(case_id, account, "model.attach", [("case", case)])
        return {"case_id": case_id, "fingerprint": fingerprint, "models": len(case["models"])}

    @app.post("/cases/{case_id}/analyze", status_code=202)
    def submit_analysis(case_id: str, body=Body(default=None), account: str = Depends(_account)):
        case = _case_or_404(case_id)
        _require(case, account, Role.INVESTIGATOR, "analysis.submit")
        doc = _body(body)
        unknown = set(doc) - {"mlp", "policy", "timeline", "include_pooled", "use_model_ref"}
        if unknown:
            raise HTTPException(status_code=422, detail=f"unknown option(s): {sorted(unknown)}")
        try:  # validate eagerly so a bad config never reaches a worker
            mlp_config_from(doc.get("mlp"))
            policy_from(doc.get("policy"))
            timeline_config_from(doc.get("timeline"))
        except (ValueError, TypeError) as e:
            raise HTTPException(status_code=422, detail=str(e)) from None
        model_ref = doc.get("use_model_ref")
        if model_ref is not None and not any(m["ref"] == model_ref for m in case["models"]):
            raise HTTPException(status_code=422, detail="use_model_ref names no attached model")
        with store.case_lock(case_id):
            case = _case_or_404(case_id)
            if not case["datasets"]:
                store.record_denied(case_id, account, "analysis.submit")
                raise HTTPException(status_code=409, detail="no dataset attached")
            analysis_id = f"a{len(case['analyses']) + 1}"
            case["analyses"].append(analysis_id)
            meta = {
                "analysis_id": analysis_id,
                "status": "pending",
                "error": None,
                "submitted_by": account,
                "submitted_at": _now(),
                "config": {
                    "mlp": doc.get("mlp") or {},
                    "policy": doc.get("policy") or {},
                    "timeline": doc.get("timeline") or {},
                    "include_pooled": bool(doc.get("include_pooled", False)),
                },
                "dataset_ref": case["datasets"][-1]["ref"],
                "dataset_fingerprint": case["datasets"][-1]["fingerprint"],
                "model_ref": model_ref,
                "rows": None,
                "users": [],
                "services": [],
            }
            store.commit(
                case_id,
                account,
                "analysis.submit",
                [(f"analysis:{analysis_id}", meta), ("case", case)],
            )
        worker = threading.Thread(
            target=run_job, args=(store, case_id, analysis_id, account), daemon=True
        )
        worker.start()
        return {"case_id": case_id, "analysis_id": analysis_id, "status": "pending"}

    @app.get("/cases/{case_id}/analyze/{analysis_id}")
    def analysis_status(case_id: str, analysis_id: str, account: str = Depends(_account)):
        case = _case_or_404(case_id)
        _require(case, account, Role.VIEWER)
        meta = store.read_analysis_meta(case_id, analysis_id)
        if meta is None:
            raise HTTPException(status_code=404, detail=f"no such analysis: {analysis_id}")
        return meta

    @app.post("/cases/{case_id}/query")
    def run_query(case_id: str, body=Body(default=None), account: str = Depends(_account)):
        case = _case_or_404(case_id)
        _require(case, account, Role.VIEWER)
        try:
            spec = QuerySpec.from_dict(_body(body))
        except QueryError as e:
            raise HTTPException(status_code=e.status, detail=str(e)) from None
        analysis_id, meta = _latest_done(case_id)
        try:
            page, total = execute(spec, _context(case_id, analysis_id, meta))
        except QueryError as e:
            raise HTTPException(status_code=e.status, detail=str(e)) from None
        token = _remember(case_id, analysis_id, spec, page)
        return {
            "case_id": case_id,
            "analysis_id": analysis_id,
            "query_spec": spec.to_dict(),
            "result_token": token,
            "total": total,
            "offset": spec.offset,
            "limit": spec.limit,
            "rows": page,
        }

    @app.post("/cases/{case_id}/bookmarks", status_code=201)
    def create_bookmark(case_id: str, body=Body(default=None), account: str = Depends(_account)):
        case = _case_or_404(case_id)
        _require(case, account, Role.INVESTIGATOR, "bookmark.create")
        doc = _body(body)
        token = doc.get("result_token")
        if not isinstance(token, str) or not token:
            raise HTTPException(status_code=422, detail="body must carry a 'result_token'")
        comments = doc.get("comments", "")
        visualization = doc.get("visualization_kind", "table")
        filter_spec = doc.get("filter_spec", {})
        if (
            not isinstance(comments, str)
            or not isinstance(visualization, str)
            or not visualization
            or not isinstance(filter_spec, dict)
        ):
            raise HTTPException(status_code=422, detail="malformed bookmark fields")
        with cache_lock:
            cached = results.get((case_id, token))
        if cached is None:
            raise HTTPException(status_code=404, detail="stale or unknown result token")
        with store.case_lock(case_id):
            case = _case_or_404(case_id)
            bookmark_id = f"b{len(case['bookmarks']) + 1}"
            case["bookmarks"].append(bookmark_id)
            sealed = {
                "schema_version": 1,
                "bookmark_id": bookmark_id,
                "case_id": case_id,
                "analysis_id": cached["analysis_id"],
                "query_spec": cached["query_spec"],
                "filter_spec": filter_spec,
                "visualization_kind": visualization,
                "comments": comments,
                "raw_extract": cached["rows"],
                "raw_digest": content_digest(cached["rows"]),
                "created_by": account,
                "created_at": _now(),
            }
            store.commit(
                case_id,
                account,
                "bookmark.create",
                [(f"bookmark:{bookmark_id}", sealed), ("case", case)],
            )
        return sealed

    @app.get("/cases/{case_id}/bookmarks")
    def list_bookmarks(case_id: str, account: str = Depends(_account)):
        case = _case_or_404(case_id)
        _require(case, account, Role.VIEWER)
        return {
            "bookmarks": [store.read_bookmark(case_id, b) for b in case["bookmarks"]]
        }

    @app.get("/cases/{case_id}/bookmarks/{bookmark_id}")
    def get_bookmark(case_id: str, bookmark_id: str, account: str = Depends(_account)):
        case = _case_or_404(case_id)
        _require(case, account, Role.VIEWER)
        sealed = store.read_bookmark(case_id, bookmark_id)
        if sealed is None:
            raise HTTPException(status_code=404, detail=f"no such bookmark: {bookmark_id}")
        return sealed

    @app.post("/cases/{case_id}/bookmarks/{bookmark_id}/verify")
    def verify_bookmark(case_id: str, bookmark_id: str, account: str = Depends(_account)):
        """Re-run the sealed query against the newest analysis and compare
        digests; drift means later work changed what this extract showed."""
        case = _case_or_404(case_id)
        _require(case, account, Role.VIEWER)
        sealed = store.read_bookmark(case_id, bookmark_id)
        if sealed is None:
            raise HTTPException(status_code=404, detail=f"no such bookmark: {bookmark_id}")
        analysis_id, meta = _latest_done(case_id)
        current_digest = None
        try:
            spec = QuerySpec.from_dict(sealed["query_spec"])
            page, _ = execute(spec, _context(case_id, analysis_id, meta))
            current_digest = content_digest(page)
        except QueryError:
            pass  # e.g. the user vanished from the new analysis: clearly drift
        return {
            "bookmark_id": bookmark_id,
            "analysis_id": analysis_id,
            "stored_digest": sealed["raw_digest"],
            "current_digest": current_digest,
            "drifted": current_digest != sealed["raw_digest"],
        }

    @app.get("/cases/{case_id}/audit")
    def get_audit(case_id: str, account: str = Depends(_account)):
        case = _case_or_404(case_id)
        _require(case, account, Role.VIEWER)
        report = store.verify_chain(case_id)
        return {
            "verified": report.ok,
            "problems": list(report.problems),
            "entries": store.read_audit(case_id),
        }

    @app.get("/cases/{case_id}/report")
    def get_report(case_id: str, account: str = Depends(_account)):
        """Assemble the shareable case report.  Serialized with sorted keys
        so regenerating an unchanged case is byte-identical."""
        case = _case_or_404(case_id)
        _require(case, account, Role.VIEWER)
        return Response(
            content=serialize_doc(case_report(store, case_id)),
            media_type="application/json",
        )

    return app
