// Wire types of the casework API, field for field. The UI renders these
// untouched: every number on screen must be traceable to one of them.

export type Role = "VIEWER" | "INVESTIGATOR" | "ADMIN";

export type QueryKind =
  | "USER_TIMELINE"
  | "SERVICE_USERS"
  | "IP_PIVOT"
  | "INTERACTION_DETAIL"
  | "OVERVIEW_MATRIX";

export interface QuerySpec {
  kind: QueryKind;
  user?: string | null;
  service?: string | null;
  ip?: string | null;
  interaction_id?: number | null;
  start?: number | null;
  end?: number | null;
  min_confidence?: number | null;
  offset?: number;
  limit?: number;
}

/** One attributed interaction as the analysis materialized it. */
export interface TimelineRow {
  interaction_id: number;
  src_ip: string;
  service: string;
  start: number;
  end: number;
  packets: number;
  base_user: string | null;
  base_confidence: number | null;
  user: string | null;
  anchor_id: number | null;
  anchor_confidence: number | null;
}

export interface DetailRow extends TimelineRow {
  packet_lines: string[];
}

export interface ServiceUsersRow {
  user: string;
  interactions: number;
  first_seen: number;
  last_seen: number;
}

export interface MatrixRow {
  user: string;
  counts: Record<string, number>;
}

export interface QueryResult<R = unknown> {
  case_id: string;
  analysis_id: string;
  query_spec: QuerySpec;
  result_token: string;
  total: number;
  offset: number;
  limit: number;
  rows: R[];
}

export interface CaseListEntry {
  case_id: string;
  title: string;
  role: Role;
}

export interface Participant {
  account: string;
  role: Role;
}

export interface DatasetRef {
  ref: string;
  fingerprint: string;
  attached_by: string;
  attached_at: number;
}

export interface CaseDoc {
  schema_version: number;
  case_id: string;
  title: string;
  created_by: string;
  created_at: number;
  participants: Participant[];
  datasets: DatasetRef[];
  models: DatasetRef[];
  analyses: string[];
  bookmarks: string[];
}

export type AnalysisStatus = "pending" | "running" | "done" | "failed";

export interface AnalysisMeta {
  analysis_id: string;
  status: AnalysisStatus;
  error: string | null;
  submitted_by: string;
  submitted_at: number;
  config: Record<string, unknown>;
  dataset_ref: string;
  dataset_fingerprint: string;
  model_ref: string | null;
  rows: number | null;
  users: string[];
  services: string[];
}

export interface Bookmark {
  schema_version: number;
  bookmark_id: string;
  case_id: string;
  analysis_id: string;
  query_spec: QuerySpec;
  filter_spec: Record<string, unknown> | null;
  visualization_kind: string;
  comments: string;
  raw_extract: unknown[];
  raw_digest: string;
  created_by: string;
  created_at: number;
}

export interface BookmarkVerify {
  bookmark_id: string;
  analysis_id: string;
  stored_digest: string;
  current_digest: string | null;
  drifted: boolean;
}

export interface AuditEntry {
  seq: number;
  ts: number;
  account: string;
  action: string;
  object: string;
  content_hash: string | null;
  prev: string;
  digest: string;
}

export interface AuditResponse {
  verified: boolean;
  problems: string[];
  entries: AuditEntry[];
}

export interface CaseReport {
  schema_version: number;
  case: CaseDoc;
  analyses: AnalysisMeta[];
  bookmarks: Bookmark[];
  audit: {
    entries: number;
    verified: boolean;
    problems: string[];
  };
}
