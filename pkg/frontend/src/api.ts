/** Typed client for the annotation review service.
 *
 * Every mutating call takes the record version the caller last saw; the
 * service rejects stale writes and this client surfaces them as
 * VersionConflictError carrying the server's current record, so callers can
 * refetch without losing any local form state.
 */

import type {
  AnnotationRecord,
  Conflict,
  ExportResponse,
  HealthResponse,
  RecordState,
  Verdict,
} from "./types.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

/** 409 with the server's current copy of the record. */
export class VersionConflictError extends ApiError {
  constructor(readonly record: AnnotationRecord) {
    super(409, `version conflict: record is now at version ${record.version}`);
    this.name = "VersionConflictError";
  }
}

/** 409 for an operation that is illegal from the record's current state. */
export class TransitionError extends ApiError {
  constructor(message: string) {
    super(409, message);
    this.name = "TransitionError";
  }
}

/** The service itself is unreachable; nothing about the queue is known. */
export class ServiceDownError extends Error {
  constructor(cause: unknown) {
    super(`review service unreachable: ${String(cause)}`);
    this.name = "ServiceDownError";
  }
}

interface ErrorBody {
  error?: string;
  kind?: string;
  record?: AnnotationRecord;
}

export class ApiClient {
  constructor(
    readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = (url, init) => fetch(url, init),
  ) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    let response: Response;
    try {
      response = await this.fetchImpl(this.baseUrl + path, {
        method,
        headers: body === undefined ? undefined : { "Content-Type": "application/json" },
        body: body === undefined ? undefined : JSON.stringify(body),
      });
    } catch (cause) {
      throw new ServiceDownError(cause);
    }
    const text = await response.text();
    const parsed = text ? (JSON.parse(text) as T & ErrorBody) : ({} as T & ErrorBody);
    if (response.ok) return parsed;
    if (response.status === 409 && parsed.kind === "version-conflict" && parsed.record) {
      throw new VersionConflictError(parsed.record);
    }
    if (response.status === 409) {
      throw new TransitionError(parsed.error ?? "conflict");
    }
    throw new ApiError(response.status, parsed.error ?? `HTTP ${response.status}`);
  }

  health(): Promise<HealthResponse> {
    return this.request("GET", "/api/health");
  }

  async queue(state?: RecordState): Promise<AnnotationRecord[]> {
    const suffix = state ? `?state=${encodeURIComponent(state)}` : "";
    const body = await this.request<{ records: AnnotationRecord[] }>(
      "GET",
      `/api/queue${suffix}`,
    );
    return body.records;
  }

  record(id: string): Promise<AnnotationRecord> {
    return this.request("GET", `/api/records/${encodeURIComponent(id)}`);
  }

  async conflicts(): Promise<Conflict[]> {
    const body = await this.request<{ conflicts: Conflict[] }>("GET", "/api/conflicts");
    return body.conflicts;
  }

  generate(id: string, expectedVersion: number): Promise<AnnotationRecord> {
    return this.request("POST", `/api/records/${encodeURIComponent(id)}/generate`, {
      expected_version: expectedVersion,
    });
  }

  verdict(id: string, expectedVersion: number, verdict: Verdict): Promise<AnnotationRecord> {
    return this.request("POST", `/api/records/${encodeURIComponent(id)}/verdict`, {
      expected_version: expectedVersion,
      accurate: verdict.accurate,
      relevant: verdict.relevant,
      complete: verdict.complete,
      ...(verdict.note ? { note: verdict.note } : {}),
    });
  }

  expert(id: string, expectedVersion: number, rationale: string): Promise<AnnotationRecord> {
    return this.request("POST", `/api/records/${encodeURIComponent(id)}/expert`, {
      expected_version: expectedVersion,
      rationale,
    });
  }

  exportAnnotated(mode: "strict" | "permissive"): Promise<ExportResponse> {
    return this.request("POST", "/api/export", { mode });
  }
}
