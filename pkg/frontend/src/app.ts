// Application shell: hash routing, event wiring, and the query loop.
// All analytics come from the API; this file only moves state around.

import { ApiClient, ApiError } from "./api.js";
import {
  buildMatrixViewModel,
  computeTimelineLayout,
  timelineQueryBounds,
  visibleControls,
  zoomRange,
  panRange,
  type TimeRange,
} from "./layout.js";
import { QueryGate, ViewState } from "./state.js";
import {
  buildReportViewModel,
  renderBookmarkList,
  renderCaseList,
  renderConnect,
  renderDetail,
  renderError,
  renderMatrix,
  renderPivot,
  renderReport,
  renderServiceUsers,
  renderTimeline,
  renderToolbar,
} from "./views.js";
import type {
  BookmarkVerify,
  DetailRow,
  MatrixRow,
  Role,
  ServiceUsersRow,
  TimelineRow,
} from "./types.js";

const DAY_S = 86_400;

const state = new ViewState();
const gate = new QueryGate();
let client: ApiClient | null = null;
let role: Role | null = null;
let range: TimeRange = { start: 0, end: 2 * DAY_S };
let lastRender: (() => Promise<void>) | null = null;

function root(): HTMLElement {
  return document.getElementById("app")!;
}

function caseId(): string {
  return state.activeCase?.case_id ?? "";
}

async function guard(render: () => Promise<void>): Promise<void> {
  lastRender = render;
  try {
    await render();
  } catch (err) {
    if (err instanceof DOMException && err.name === "AbortError") return;
    const message = err instanceof ApiError
      ? `${err.status || "network"}: ${err.message}`
      : String(err);
    root().innerHTML = renderError(message);
  }
}

function toolbar(): string {
  return renderToolbar(visibleControls(role));
}

async function showCases(): Promise<void> {
  const cases = await client!.listCases();
  root().innerHTML = `<h1>Cases</h1>` + renderCaseList(cases) +
    `<form id="new-case"><input name="title" placeholder="case title">` +
    `<button type="submit">Open case</button></form>`;
}

async function openCase(id: string): Promise<void> {
  const cases = await client!.listCases();
  const entry = cases.find((c) => c.case_id === id);
  if (!entry) throw new ApiError(404, `not a participant of ${id}`);
  state.activeCase = entry;
  role = entry.role;
  location.hash = `#/case/${id}/matrix`;
}

async function showMatrix(): Promise<void> {
  const result = await gate.run((signal) =>
    client!.query<MatrixRow>(caseId(), { kind: "OVERVIEW_MATRIX", limit: 1000 }, signal),
  );
  if (!result) return;
  state.setResult(result);
  root().innerHTML = `<h1>${state.activeCase!.title}</h1>` + toolbar() +
    renderMatrix(buildMatrixViewModel(result));
}

async function showTimeline(user: string): Promise<void> {
  const bounds = timelineQueryBounds(range);
  const result = await gate.run((signal) =>
    client!.query<TimelineRow>(caseId(), {
      kind: "USER_TIMELINE",
      user,
      start: bounds.start,
      end: bounds.end,
      limit: 1000,
    }, signal),
  );
  if (!result) return;
  state.setResult(result);
  const layout = computeTimelineLayout(result.rows, range);
  root().innerHTML = `<h1>${user}</h1>` + toolbar() +
    `<div class="range-controls">` +
    `<button data-action="zoom-in">zoom in</button>` +
    `<button data-action="zoom-out">zoom out</button>` +
    `<button data-action="pan-left">&larr;</button>` +
    `<button data-action="pan-right">&rarr;</button></div>` +
    renderTimeline(layout) +
    `<div id="detail"></div>`;
}

async function showDetail(interactionId: number): Promise<void> {
  const result = await client!.query<DetailRow>(caseId(), {
    kind: "INTERACTION_DETAIL",
    interaction_id: interactionId,
  });
  const row = result.rows[0];
  const panel = document.getElementById("detail");
  if (panel && row) panel.innerHTML = renderDetail(row);
}

async function showService(service: string): Promise<void> {
  const bounds = timelineQueryBounds(range);
  const result = await gate.run((signal) =>
    client!.query<ServiceUsersRow>(caseId(), {
      kind: "SERVICE_USERS",
      service,
      start: bounds.start,
      end: bounds.end,
    }, signal),
  );
  if (!result) return;
  state.setResult(result);
  root().innerHTML = `<h1>${service}</h1>` + toolbar() +
    renderServiceUsers(service, result.rows);
}

async function showPivot(ip: string): Promise<void> {
  const result = await gate.run((signal) =>
    client!.query<TimelineRow>(caseId(), { kind: "IP_PIVOT", ip, limit: 1000 }, signal),
  );
  if (!result) return;
  state.setResult(result);
  root().innerHTML = `<h1>${ip}</h1>` + toolbar() + renderPivot(ip, result.rows);
}

async function showReport(): Promise<void> {
  const report = await client!.report(caseId());
  const verifications: Record<string, BookmarkVerify> = {};
  for (const bookmark of report.bookmarks) {
    verifications[bookmark.bookmark_id] =
      await client!.verifyBookmark(caseId(), bookmark.bookmark_id);
  }
  root().innerHTML = renderReport(buildReportViewModel(report), verifications) +
    `<h2>Bookmarks</h2>` + renderBookmarkList(report.bookmarks);
}

async function route(): Promise<void> {
  if (!client) {
    root().innerHTML = renderConnect(state);
    return;
  }
  const hash = location.hash || "#/cases";
  const parts = hash.replace(/^#\//, "").split("/");
  if (parts[0] === "cases" || parts[0] === "") return guard(showCases);
  if (parts[0] === "case" && parts[1]) {
    if (!state.activeCase || state.activeCase.case_id !== parts[1]) {
      return guard(() => openCase(parts[1]));
    }
    switch (parts[2]) {
      case "timeline":
        return guard(() => showTimeline(decodeURIComponent(parts[3] ?? "")));
      case "service":
        return guard(() => showService(decodeURIComponent(parts[3] ?? "")));
      case "pivot":
        return guard(() => showPivot(decodeURIComponent(parts[3] ?? "")));
      case "report":
        return guard(showReport);
      default:
        return guard(showMatrix);
    }
  }
  return guard(showCases);
}

function rerouteWithRange(): void {
  if (lastRender) void guard(lastRender);
}

async function onAction(target: HTMLElement): Promise<void> {
  const action = target.dataset.action!;
  const cid = caseId();
  switch (action) {
    case "cell":
      location.hash = `#/case/${cid}/timeline/${encodeURIComponent(target.dataset.user!)}`;
      break;
    case "open-user":
      location.hash = `#/case/${cid}/timeline/${encodeURIComponent(target.dataset.user!)}`;
      break;
    case "zoom-in":
      range = zoomRange(range, 0.5);
      rerouteWithRange();
      break;
    case "zoom-out":
      range = zoomRange(range, 2);
      rerouteWithRange();
      break;
    case "pan-left":
      range = panRange(range, -0.25);
      rerouteWithRange();
      break;
    case "pan-right":
      range = panRange(range, 0.25);
      rerouteWithRange();
      break;
    case "bookmark": {
      if (!state.result) break;
      const comments = prompt("comments for this report entry") ?? "";
      await client!.createBookmark(cid, state.result.result.result_token, comments);
      break;
    }
    case "retry":
      if (lastRender) await guard(lastRender);
      break;
    case "attach-dataset": {
      const ref = prompt("dataset directory on the server");
      if (ref) await client!.attachDataset(cid, ref);
      break;
    }
    case "run-analysis":
      await client!.submitAnalysis(cid, {});
      break;
    case "add-participant": {
      const account = prompt("account name");
      const newRole = prompt("role: VIEWER, INVESTIGATOR or ADMIN") ?? "VIEWER";
      if (account) await client!.addParticipant(cid, account, newRole);
      break;
    }
    default:
      break;
  }
}

export function boot(): void {
  document.addEventListener("submit", (event) => {
    const form = event.target as HTMLFormElement;
    event.preventDefault();
    if (form.id === "connect") {
      const data = new FormData(form);
      client = state.connect(String(data.get("baseUrl")), String(data.get("token")));
      location.hash = "#/cases";
      void route();
    } else if (form.id === "new-case") {
      const title = String(new FormData(form).get("title") ?? "").trim();
      if (title && client) {
        void client.createCase(title).then(() => route());
      }
    }
  });

  document.addEventListener("click", (event) => {
    const el = (event.target as HTMLElement).closest<HTMLElement>("[data-action]");
    if (el) {
      event.preventDefault();
      void onAction(el);
      return;
    }
    const block = (event.target as HTMLElement).closest<HTMLElement>(".block[data-id]");
    if (block) {
      void showDetail(Number(block.dataset.id));
    }
  });

  window.addEventListener("hashchange", () => void route());
  void route();
}

if (typeof document !== "undefined" && document.getElementById("app")) {
  boot();
}
