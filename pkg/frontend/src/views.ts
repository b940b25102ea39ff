// HTML string renderers. Values land in the markup verbatim (escaped),
// carried alongside in data-* attributes so integration tests can compare
// the page against the raw API response it came from.

import type { Controls, MatrixViewModel, TimelineLayout } from "./layout.js";
import type {
  Bookmark,
  BookmarkVerify,
  CaseListEntry,
  CaseReport,
  DetailRow,
  ServiceUsersRow,
  TimelineRow,
} from "./types.js";
import type { ViewState } from "./state.js";

export function esc(value: unknown): string {
  return String(value)
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

function fmtConfidence(c: number | null): string {
  return c === null ? "-" : c.toFixed(3);
}

function fmtTs(t: number): string {
  return t.toFixed(1);
}

/** Connection screen. Deliberately a plain form: the token input is
 * type=password and its value is never echoed back into the markup. */
export function renderConnect(state: ViewState): string {
  return `
<form id="connect" class="connect">
  <h1>netident investigator</h1>
  <label>Server <input name="baseUrl" value="${esc(state.baseUrl)}" placeholder="http://localhost:8080"></label>
  <label>Access token <input name="token" type="password" value="" autocomplete="off"></label>
  <button type="submit">Connect</button>
</form>`;
}

export function renderCaseList(cases: CaseListEntry[]): string {
  if (cases.length === 0) {
    return `<p class="empty">no cases for this account</p>`;
  }
  const rows = cases.map(
    (c) => `<li><a href="#/case/${esc(c.case_id)}" data-case="${esc(c.case_id)}">` +
      `${esc(c.title)}</a> <span class="role">${esc(c.role)}</span></li>`,
  );
  return `<ul class="cases">${rows.join("")}</ul>`;
}

export function renderToolbar(controls: Controls): string {
  const buttons: string[] = [];
  if (controls.attachDataset) {
    buttons.push(`<button data-action="attach-dataset">Attach dataset</button>`);
  }
  if (controls.runAnalysis) {
    buttons.push(`<button data-action="run-analysis">Run analysis</button>`);
  }
  if (controls.createBookmark) {
    buttons.push(`<button data-action="bookmark">Bookmark this result</button>`);
  }
  if (controls.manageParticipants) {
    buttons.push(`<button data-action="add-participant">Add participant</button>`);
  }
  return `<nav class="toolbar">${buttons.join("")}</nav>`;
}

export function renderTimeline(layout: TimelineLayout): string {
  if (layout.empty) {
    return `<div class="timeline empty" data-empty="true">${esc(layout.emptyText)}</div>`;
  }
  const lanes = layout.lanes.map((lane) => {
    const blocks = lane.blocks.map((b) => {
      const left = (b.left * 100).toFixed(4);
      const width = Math.max(b.width * 100, 0.15).toFixed(4);
      return `<div class="block band-${b.band}${b.anchored ? " anchored" : ""}"` +
        ` data-id="${b.interactionId}" data-user="${esc(b.user ?? "")}"` +
        ` data-service="${esc(b.service)}"` +
        ` data-confidence="${b.confidence === null ? "" : b.confidence}"` +
        ` style="left:${left}%;width:${width}%"` +
        ` title="${esc(lane.service)} #${b.interactionId} ${esc(b.user ?? "unattributed")}` +
        ` (${fmtConfidence(b.confidence)})"></div>`;
    });
    return `<div class="lane"><span class="lane-label">${esc(lane.service)}</span>` +
      `<div class="lane-track">${blocks.join("")}</div></div>`;
  });
  const overflow = layout.shown < layout.total
    ? `<p class="overflow">showing ${layout.shown} of ${layout.total} blocks,` +
      ` narrow the range to see the rest</p>`
    : "";
  return `<div class="timeline" data-shown="${layout.shown}" data-total="${layout.total}">` +
    lanes.join("") + overflow + `</div>`;
}

export function renderMatrix(vm: MatrixViewModel): string {
  if (vm.rows.length === 0) {
    return `<p class="empty">no analyzed interactions</p>`;
  }
  const head = vm.services.map((s) => `<th>${esc(s)}</th>`).join("");
  const body = vm.rows.map((row) => {
    const cells = vm.services.map((s) => {
      const count = row.counts[s] ?? 0;
      return `<td><a href="#" data-action="cell" data-user="${esc(row.user)}"` +
        ` data-service="${esc(s)}" data-count="${count}">${count}</a></td>`;
    });
    return `<tr><th>${esc(row.user)}</th>${cells.join("")}</tr>`;
  });
  return `<table class="matrix"><thead><tr><th>user</th>${head}</tr></thead>` +
    `<tbody>${body.join("")}</tbody></table>`;
}

export function renderServiceUsers(service: string, rows: ServiceUsersRow[]): string {
  if (rows.length === 0) {
    return `<p class="empty">no attributed users on ${esc(service)} in this range</p>`;
  }
  const body = rows.map(
    (r) => `<tr data-user="${esc(r.user)}"><td>${esc(r.user)}</td>` +
      `<td data-count="${r.interactions}">${r.interactions}</td>` +
      `<td>${fmtTs(r.first_seen)}</td><td>${fmtTs(r.last_seen)}</td>` +
      `<td><button data-action="open-user" data-user="${esc(r.user)}">timeline</button></td></tr>`,
  );
  return `<table class="service-users"><thead><tr><th>user</th><th>interactions</th>` +
    `<th>first seen</th><th>last seen</th><th></th></tr></thead>` +
    `<tbody>${body.join("")}</tbody></table>`;
}

export function renderPivot(ip: string, rows: TimelineRow[]): string {
  if (rows.length === 0) {
    return `<p class="empty" data-empty="true">no traffic recorded from ${esc(ip)}</p>`;
  }
  const body = rows.map(
    (r) => `<tr data-id="${r.interaction_id}"><td>${r.interaction_id}</td>` +
      `<td>${esc(r.service)}</td><td>${fmtTs(r.start)}</td>` +
      `<td data-user="${esc(r.user ?? "")}">${esc(r.user ?? "unattributed")}</td>` +
      `<td>${fmtConfidence(r.anchor_id !== null ? r.anchor_confidence : r.base_confidence)}</td>` +
      `<td>${r.user === null ? "" :
        `<button data-action="open-user" data-user="${esc(r.user)}">open timeline</button>`}</td></tr>`,
  );
  return `<table class="pivot" data-ip="${esc(ip)}"><thead><tr><th>#</th><th>service</th>` +
    `<th>start</th><th>user</th><th>confidence</th><th></th></tr></thead>` +
    `<tbody>${body.join("")}</tbody></table>`;
}

/** Detail panel: one definition row per API field, values verbatim. */
export function renderDetail(row: DetailRow): string {
  const fields: [string, unknown][] = [
    ["interaction_id", row.interaction_id],
    ["src_ip", row.src_ip],
    ["service", row.service],
    ["start", row.start],
    ["end", row.end],
    ["packets", row.packets],
    ["base_user", row.base_user],
    ["base_confidence", row.base_confidence],
    ["user", row.user],
    ["anchor_id", row.anchor_id],
    ["anchor_confidence", row.anchor_confidence],
  ];
  const dl = fields.map(
    ([name, value]) => `<dt>${esc(name)}</dt>` +
      `<dd data-field="${esc(name)}">${value === null ? "" : esc(value)}</dd>`,
  );
  const packets = row.packet_lines.map((line) => esc(line)).join("\n");
  return `<section class="detail" data-id="${row.interaction_id}">` +
    `<dl>${dl.join("")}</dl>` +
    `<pre class="packets">${packets}</pre></section>`;
}

export function renderBookmarkList(bookmarks: Bookmark[]): string {
  if (bookmarks.length === 0) {
    return `<p class="empty">no bookmarks yet</p>`;
  }
  const items = bookmarks.map(
    (b) => `<li data-bookmark="${esc(b.bookmark_id)}">` +
      `<code>${esc(b.bookmark_id)}</code> ${esc(b.query_spec.kind)}` +
      ` by ${esc(b.created_by)} <span class="digest">${esc(b.raw_digest)}</span></li>`,
  );
  return `<ol class="bookmarks">${items.join("")}</ol>`;
}

export interface ReportViewModel {
  caseId: string;
  caseTitle: string;
  createdBy: string;
  auditVerified: boolean;
  auditEntries: number;
  auditProblems: string[];
  analyses: {
    id: string;
    status: string;
    rows: number | null;
    users: string[];
    services: string[];
  }[];
  bookmarks: {
    id: string;
    kind: string;
    comments: string;
    digest: string;
    createdBy: string;
    rowCount: number;
  }[];
}

/** Pass-through projection of the report document; nothing is computed. */
export function buildReportViewModel(report: CaseReport): ReportViewModel {
  return {
    caseId: report.case.case_id,
    caseTitle: report.case.title,
    createdBy: report.case.created_by,
    auditVerified: report.audit.verified,
    auditEntries: report.audit.entries,
    auditProblems: report.audit.problems,
    analyses: report.analyses.map((a) => ({
      id: a.analysis_id,
      status: a.status,
      rows: a.rows,
      users: a.users,
      services: a.services,
    })),
    bookmarks: report.bookmarks.map((b) => ({
      id: b.bookmark_id,
      kind: b.query_spec.kind,
      comments: b.comments,
      digest: b.raw_digest,
      createdBy: b.created_by,
      rowCount: b.raw_extract.length,
    })),
  };
}

export function renderReport(
  vm: ReportViewModel,
  verifications: Record<string, BookmarkVerify> = {},
): string {
  const audit = vm.auditVerified
    ? `<p class="audit ok" data-verified="true">audit chain verified, ${vm.auditEntries} entries</p>`
    : `<p class="audit bad" data-verified="false">AUDIT CHAIN BROKEN: ${
        vm.auditProblems.map(esc).join("; ")}</p>`;
  const analyses = vm.analyses.map(
    (a) => `<tr data-analysis="${esc(a.id)}"><td>${esc(a.id)}</td><td>${esc(a.status)}</td>` +
      `<td data-rows="${a.rows ?? ""}">${a.rows ?? "-"}</td>` +
      `<td>${a.users.map(esc).join(", ")}</td><td>${a.services.map(esc).join(", ")}</td></tr>`,
  );
  const bookmarks = vm.bookmarks.map((b) => {
    const v = verifications[b.id];
    const drift = v && v.drifted
      ? `<strong class="drift" data-drifted="true">DIGEST DRIFT: sealed extract no longer` +
        ` matches the current analysis</strong>`
      : "";
    return `<article class="entry" data-bookmark="${esc(b.id)}">` +
      `<h3>${esc(b.id)} <small>${esc(b.kind)}</small></h3>` +
      `${drift}` +
      `<p class="comments">${esc(b.comments)}</p>` +
      `<p>rows sealed: <span data-rowcount="${b.rowCount}">${b.rowCount}</span>,` +
      ` by ${esc(b.createdBy)}</p>` +
      `<code class="digest" data-digest="${esc(b.digest)}">${esc(b.digest)}</code>` +
      `</article>`;
  });
  return `<section class="report" data-case="${esc(vm.caseId)}">` +
    `<h1>${esc(vm.caseTitle)}</h1>` +
    `<p>case ${esc(vm.caseId)}, opened by ${esc(vm.createdBy)}</p>` +
    audit +
    `<h2>Analyses</h2><table><thead><tr><th>id</th><th>status</th><th>rows</th>` +
    `<th>users</th><th>services</th></tr></thead><tbody>${analyses.join("")}</tbody></table>` +
    `<h2>Report entries</h2>${bookmarks.join("") || `<p class="empty">none</p>`}` +
    `</section>`;
}

export function renderError(message: string): string {
  return `<div class="error" role="alert">${esc(message)}` +
    ` <button data-action="retry">retry</button></div>`;
}
