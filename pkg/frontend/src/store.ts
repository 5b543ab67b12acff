/** Client-side session state for one reviewer.
 *
 * The server owns every record; this object owns only what the reviewer is
 * in the middle of doing: the fetched queue, the selected record, the
 * three-criteria form, and any banner. A version conflict never clears the
 * form — it swaps in the server's current record and asks for a re-review.
 */

import {
  ApiClient,
  ServiceDownError,
  TransitionError,
  VersionConflictError,
} from "./api.js";
import {
  type AnnotationRecord,
  GENERATABLE_STATES,
  TERMINAL_STATES,
} from "./types.js";

export interface VerdictForm {
  accurate: boolean | null;
  relevant: boolean | null;
  complete: boolean | null;
  note: string;
}

export interface Banner {
  kind: "error" | "conflict" | "info";
  message: string;
}

const EMPTY_FORM: VerdictForm = { accurate: null, relevant: null, complete: null, note: "" };

/** Records a reviewer can act on, in a stable work order. */
export function actionable(records: AnnotationRecord[]): AnnotationRecord[] {
  return records.filter((r) => !TERMINAL_STATES.has(r.state));
}

export class ReviewSession {
  queue: AnnotationRecord[] = [];
  current: AnnotationRecord | null = null;
  form: VerdictForm = { ...EMPTY_FORM };
  expertText = "";
  banner: Banner | null = null;
  reviewer = "";
  busy = false;

  constructor(private readonly api: ApiClient) {}

  /** Refetch the queue; keeps selection and form when the record is still open. */
  async refresh(): Promise<void> {
    try {
      const records = await this.api.queue();
      this.queue = actionable(records);
      this.banner = null;
      const currentId = this.current?.id;
      this.current = this.queue.find((r) => r.id === currentId) ?? this.queue[0] ?? null;
      if (this.current?.id !== currentId) this.resetForms();
    } catch (err) {
      this.failSoft(err);
    }
  }

  select(id: string): void {
    const found = this.queue.find((r) => r.id === id);
    if (!found || found.id === this.current?.id) return;
    this.current = found;
    this.resetForms();
    this.banner = null;
  }

  setCriterion(name: "accurate" | "relevant" | "complete", value: boolean): void {
    this.form[name] = value;
  }

  setNote(note: string): void {
    this.form.note = note;
  }

  setExpertText(text: string): void {
    this.expertText = text;
  }

  /** All three criteria must be explicitly set before a verdict can go out. */
  canSubmitVerdict(): boolean {
    return (
      this.current?.state === "pending_review" &&
      this.form.accurate !== null &&
      this.form.relevant !== null &&
      this.form.complete !== null &&
      !this.busy
    );
  }

  canSubmitExpert(): boolean {
    return (
      this.current?.state === "expert_escalated" &&
      this.expertText.trim().length > 0 &&
      !this.busy
    );
  }

  canGenerate(): boolean {
    return this.current !== null && GENERATABLE_STATES.has(this.current.state) && !this.busy;
  }

  async submitVerdict(): Promise<void> {
    if (!this.canSubmitVerdict() || !this.current) return;
    const { id, version } = this.current;
    await this.mutate(() =>
      this.api.verdict(id, version, {
        accurate: this.form.accurate as boolean,
        relevant: this.form.relevant as boolean,
        complete: this.form.complete as boolean,
        note: this.noteWithReviewer(),
      }),
    );
  }

  async requestGeneration(): Promise<void> {
    if (!this.canGenerate() || !this.current) return;
    const { id, version } = this.current;
    await this.mutate(() => this.api.generate(id, version));
  }

  async submitExpert(): Promise<void> {
    if (!this.canSubmitExpert() || !this.current) return;
    const { id, version } = this.current;
    await this.mutate(() => this.api.expert(id, version, this.expertText.trim()));
  }

  /** Run one mutating call and fold its outcome back into the session. */
  private async mutate(call: () => Promise<AnnotationRecord>): Promise<void> {
    this.busy = true;
    try {
      const updated = await call();
      this.applyUpdate(updated);
      this.banner = null;
    } catch (err) {
      if (err instanceof VersionConflictError) {
        // Someone else moved the record. Adopt their version so the next
        // submit is against reality, but keep every form field as typed.
        this.applyUpdate(err.record, { keepSelection: true });
        this.banner = {
          kind: "conflict",
          message:
            `record changed to version ${err.record.version} elsewhere; ` +
            "review the refreshed copy and submit again",
        };
      } else {
        this.failSoft(err);
      }
    } finally {
      this.busy = false;
    }
  }

  private applyUpdate(record: AnnotationRecord, opts: { keepSelection?: boolean } = {}): void {
    this.queue = this.queue
      .map((r) => (r.id === record.id ? record : r))
      .filter((r) => !TERMINAL_STATES.has(r.state));
    if (TERMINAL_STATES.has(record.state) && !opts.keepSelection) {
      // Auto-advance: the reviewed record left the queue.
      this.current = this.queue[0] ?? null;
      this.resetForms();
    } else {
      this.current = record;
      if (!opts.keepSelection) this.resetForms();
    }
  }

  private noteWithReviewer(): string {
    const note = this.form.note.trim();
    const who = this.reviewer.trim();
    if (!who) return note;
    return note ? `${who}: ${note}` : who;
  }

  private resetForms(): void {
    this.form = { ...EMPTY_FORM };
    this.expertText = "";
  }

  /** Network or server trouble: report it, lose nothing. */
  private failSoft(err: unknown): void {
    if (err instanceof ServiceDownError) {
      this.banner = { kind: "error", message: "service unreachable; retry when it is back" };
    } else if (err instanceof TransitionError) {
      this.banner = { kind: "error", message: err.message };
    } else {
      this.banner = { kind: "error", message: err instanceof Error ? err.message : String(err) };
    }
  }
}
