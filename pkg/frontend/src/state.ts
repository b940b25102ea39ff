import { ApiClient } from "./api.js";
import type { CaseListEntry, DetailRow, QueryResult, QuerySpec } from "./types.js";

/** A result set together with the spec that produced it. The pair is
 * immutable once stored, so a bookmark always captures what is shown. */
export interface TaggedResult<R = unknown> {
  spec: QuerySpec;
  result: QueryResult<R>;
}

export class ViewState {
  // the token lives only here and in the ApiClient; render code receives
  // this object but there is no accessor that returns the secret
  #token = "";
  #baseUrl = "";

  activeCase: CaseListEntry | null = null;
  draft: QuerySpec = { kind: "OVERVIEW_MATRIX" };
  result: TaggedResult | null = null;
  selected: DetailRow | null = null;
  bookmarkComments = "";

  get connected(): boolean {
    return this.#token !== "" && this.#baseUrl !== "";
  }

  get baseUrl(): string {
    return this.#baseUrl;
  }

  connect(baseUrl: string, token: string): ApiClient {
    this.#baseUrl = baseUrl.replace(/\/+$/, "");
    this.#token = token;
    return new ApiClient(this.#baseUrl, this.#token);
  }

  setResult<R>(result: QueryResult<R>): TaggedResult<R> {
    const tagged: TaggedResult<R> = { spec: result.query_spec, result };
    this.result = tagged as TaggedResult;
    return tagged;
  }

  clearResult(): void {
    this.result = null;
    this.selected = null;
  }
}

/** At most one in-flight query per view: starting a new one aborts the
 * previous and makes its late response drop silently. */
export class QueryGate {
  private controller: AbortController | null = null;
  private generation = 0;

  async run<T>(issue: (signal: AbortSignal) => Promise<T>): Promise<T | null> {
    this.controller?.abort();
    const controller = new AbortController();
    this.controller = controller;
    const mine = ++this.generation;
    try {
      const value = await issue(controller.signal);
      return mine === this.generation ? value : null;
    } catch (err) {
      if (controller.signal.aborted && mine !== this.generation) return null;
      throw err;
    }
  }
}
