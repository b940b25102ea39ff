// Pure view-model computation. Nothing here invents a number: every field
// of every block is copied verbatim from an API row, and the only derived
// values are screen positions. That keeps the rendered page checkable
// against the raw API response.

import type { MatrixRow, QueryResult, Role, TimelineRow } from "./types.js";

export interface TimeRange {
  start: number;
  end: number;
}

export type ConfidenceBand = "high" | "mid" | "low" | "none";

export interface TimelineBlock {
  interactionId: number;
  service: string;
  user: string | null;
  /** anchor confidence when the label came from a timeline anchor,
   * otherwise the interaction's own fused score */
  confidence: number | null;
  anchored: boolean;
  /** fraction of the visible range, 0 at the left edge */
  left: number;
  width: number;
  band: ConfidenceBand;
}

export interface TimelineLane {
  service: string;
  blocks: TimelineBlock[];
}

export interface TimelineLayout {
  lanes: TimelineLane[];
  range: TimeRange;
  /** rows received vs rows laid out; they differ only past the cap */
  total: number;
  shown: number;
  empty: boolean;
  emptyText: string;
}

// keep the DOM responsive at desk scale; past this the view shows a
// "narrow the range" notice instead of drawing everything
export const MAX_BLOCKS_ON_SCREEN = 5000;

export const EMPTY_TIMELINE_TEXT = "no attributed activity";

export function effectiveConfidence(row: TimelineRow): number | null {
  return row.anchor_id !== null ? row.anchor_confidence : row.base_confidence;
}

export function confidenceBand(confidence: number | null): ConfidenceBand {
  if (confidence === null) return "none";
  if (confidence >= 0.9) return "high";
  if (confidence >= 0.6) return "mid";
  return "low";
}

export function computeTimelineLayout(
  rows: TimelineRow[],
  range: TimeRange,
  maxBlocks = MAX_BLOCKS_ON_SCREEN,
): TimelineLayout {
  const span = range.end - range.start || 1;
  const visible = rows.slice(0, maxBlocks);

  const byService = new Map<string, TimelineBlock[]>();
  for (const row of visible) {
    const confidence = effectiveConfidence(row);
    const block: TimelineBlock = {
      interactionId: row.interaction_id,
      service: row.service,
      user: row.user,
      confidence,
      anchored: row.anchor_id !== null,
      left: (row.start - range.start) / span,
      width: Math.max(0, (row.end - row.start) / span),
      band: confidenceBand(confidence),
    };
    const lane = byService.get(row.service);
    if (lane) lane.push(block);
    else byService.set(row.service, [block]);
  }

  const lanes = [...byService.keys()].sort().map((service) => ({
    service,
    blocks: byService.get(service)!,
  }));
  return {
    lanes,
    range,
    total: rows.length,
    shown: visible.length,
    empty: rows.length === 0,
    emptyText: EMPTY_TIMELINE_TEXT,
  };
}

/** Binding rule for zoom and pan: the re-issued query's bounds are exactly
 * the visible range, nothing padded or snapped. */
export function timelineQueryBounds(visible: TimeRange): { start: number; end: number } {
  return { start: visible.start, end: visible.end };
}

export function zoomRange(range: TimeRange, factor: number): TimeRange {
  const mid = (range.start + range.end) / 2;
  const half = ((range.end - range.start) / 2) * factor;
  return { start: mid - half, end: mid + half };
}

export function panRange(range: TimeRange, fraction: number): TimeRange {
  const shift = (range.end - range.start) * fraction;
  return { start: range.start + shift, end: range.end + shift };
}

export interface MatrixViewModel {
  services: string[];
  rows: MatrixRow[];
}

/** Pass-through projection: cell values are the API counts, untouched. */
export function buildMatrixViewModel(result: QueryResult<MatrixRow>): MatrixViewModel {
  const services = new Set<string>();
  for (const row of result.rows) {
    for (const s of Object.keys(row.counts)) services.add(s);
  }
  return { services: [...services].sort(), rows: result.rows };
}

export interface Controls {
  attachDataset: boolean;
  runAnalysis: boolean;
  createBookmark: boolean;
  editComments: boolean;
  manageParticipants: boolean;
}

const NO_CONTROLS: Controls = {
  attachDataset: false,
  runAnalysis: false,
  createBookmark: false,
  editComments: false,
  manageParticipants: false,
};

/** Role gate for every mutating control. Viewers get a read-only
 * workbench; only admins touch participants. */
export function visibleControls(role: Role | null): Controls {
  switch (role) {
    case "ADMIN":
      return {
        attachDataset: true,
        runAnalysis: true,
        createBookmark: true,
        editComments: true,
        manageParticipants: true,
      };
    case "INVESTIGATOR":
      return {
        attachDataset: true,
        runAnalysis: true,
        createBookmark: true,
        editComments: true,
        manageParticipants: false,
      };
    case "VIEWER":
    case null:
      return { ...NO_CONTROLS };
  }
}
