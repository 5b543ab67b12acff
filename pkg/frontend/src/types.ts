/** Shared shapes for the review service's JSON API. */

export type RecordState =
  | "pending_generation"
  | "pending_review"
  | "approved"
  | "regenerate"
  | "expert_escalated"
  | "expert_written";

export const TERMINAL_STATES: ReadonlySet<RecordState> = new Set([
  "approved",
  "expert_written",
]);

/** States where the legal action is asking the generator for a rationale. */
export const GENERATABLE_STATES: ReadonlySet<RecordState> = new Set([
  "pending_generation",
  "regenerate",
]);

export const MAX_ATTEMPTS = 3;

export interface AnnotationRecord {
  id: string;
  image_ref: string;
  question: string;
  answer: string;
  qtype: string;
  split: string;
  state: RecordState;
  rationale?: string | null;
  attempts: number;
  version: number;
  last_error?: string | null;
  source?: string | null;
  category?: string | null;
  dataset?: string | null;
  /** Inline pixel grid for synthetic records; row-major, values in [0, 1]. */
  pixels?: number[][] | null;
}

export interface Verdict {
  accurate: boolean;
  relevant: boolean;
  complete: boolean;
  note?: string;
}

export interface Conflict {
  rule: string;
  record_ids: string[];
  message: string;
}

export interface HealthResponse {
  status: string;
  records: number;
}

export interface ExportResponse {
  mode: string;
  samples: unknown[];
}
