import type {
  AnalysisMeta,
  AuditResponse,
  Bookmark,
  BookmarkVerify,
  CaseDoc,
  CaseListEntry,
  CaseReport,
  QueryResult,
  QuerySpec,
} from "./types.js";

export class ApiError extends Error {
  constructor(readonly status: number, detail: string) {
    super(detail);
    this.name = "ApiError";
  }
}

/** Thin typed wrapper over fetch. Holds the bearer token so no view code
 * ever sees it; one instance per connection. */
export class ApiClient {
  constructor(private readonly baseUrl: string, private readonly token: string) {}

  async health(): Promise<{ status: string }> {
    return this.request("GET", "/healthz", undefined, undefined, false);
  }

  async createCase(title: string): Promise<CaseDoc> {
    return this.request("POST", "/cases", { title });
  }

  async listCases(): Promise<CaseListEntry[]> {
    const body = await this.request<{ cases: CaseListEntry[] }>("GET", "/cases");
    return body.cases;
  }

  async getCase(caseId: string): Promise<CaseDoc> {
    return this.request("GET", `/cases/${caseId}`);
  }

  async addParticipant(caseId: string, account: string, role: string) {
    return this.request<{ case_id: string; account: string; role: string }>(
      "POST", `/cases/${caseId}/participants`, { account, role },
    );
  }

  async attachDataset(caseId: string, ref: string) {
    return this.request<{ fingerprint: string }>(
      "POST", `/cases/${caseId}/datasets`, { ref },
    );
  }

  async submitAnalysis(caseId: string, config: Record<string, unknown>) {
    return this.request<{ analysis_id: string; status: string }>(
      "POST", `/cases/${caseId}/analyze`, config,
    );
  }

  async analysisStatus(caseId: string, analysisId: string): Promise<AnalysisMeta> {
    return this.request("GET", `/cases/${caseId}/analyze/${analysisId}`);
  }

  async query<R>(caseId: string, spec: QuerySpec, signal?: AbortSignal): Promise<QueryResult<R>> {
    return this.request("POST", `/cases/${caseId}/query`, spec, signal);
  }

  async createBookmark(
    caseId: string,
    resultToken: string,
    comments = "",
    visualizationKind = "table",
  ): Promise<Bookmark> {
    return this.request("POST", `/cases/${caseId}/bookmarks`, {
      result_token: resultToken,
      comments,
      visualization_kind: visualizationKind,
    });
  }

  async listBookmarks(caseId: string): Promise<Bookmark[]> {
    const body = await this.request<{ bookmarks: Bookmark[] }>(
      "GET", `/cases/${caseId}/bookmarks`,
    );
    return body.bookmarks;
  }

  async getBookmark(caseId: string, bookmarkId: string): Promise<Bookmark> {
    return this.request("GET", `/cases/${caseId}/bookmarks/${bookmarkId}`);
  }

  async verifyBookmark(caseId: string, bookmarkId: string): Promise<BookmarkVerify> {
    return this.request("POST", `/cases/${caseId}/bookmarks/${bookmarkId}/verify`);
  }

  async audit(caseId: string): Promise<AuditResponse> {
    return this.request("GET", `/cases/${caseId}/audit`);
  }

  async report(caseId: string): Promise<CaseReport> {
    return this.request("GET", `/cases/${caseId}/report`);
  }

  private async request<T>(
    method: string,
    path: string,
    body?: unknown,
    signal?: AbortSignal,
    authenticated = true,
  ): Promise<T> {
    const headers: Record<string, string> = {};
    if (authenticated) headers["Authorization"] = `Bearer ${this.token}`;
    if (body !== undefined) headers["Content-Type"] = "application/json";
    let response: Response;
    try {
      response = await fetch(this.baseUrl + path, {
        method,
        headers,
        body: body === undefined ? undefined : JSON.stringify(body),
        signal,
      });
    } catch (err) {
      if (err instanceof DOMException && err.name === "AbortError") throw err;
      throw new ApiError(0, `request failed: ${String(err)}`);
    }
    const text = await response.text();
    if (!response.ok) {
      let detail = text;
      try {
        const parsed = JSON.parse(text);
        if (parsed && typeof parsed.detail === "string") detail = parsed.detail;
      } catch {
        // non-JSON error body, keep raw text
      }
      throw new ApiError(response.status, detail);
    }
    return JSON.parse(text) as T;
  }
}
