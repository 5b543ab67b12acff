/** Pure HTML builders. No DOM access here, so every view is string-testable. */

import type { AnnotationRecord } from "./types.js";
import { GENERATABLE_STATES, MAX_ATTEMPTS } from "./types.js";
import type { Banner, ReviewSession, VerdictForm } from "./store.js";

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;")
    .replace(/'/g, "&#39;");
}

export function renderBanner(banner: Banner | null): string {
  if (!banner) return "";
  return `<div class="banner banner-${banner.kind}" role="alert">${escapeHtml(banner.message)}</div>`;
}

function attemptBadge(record: AnnotationRecord): string {
  const escalated =
    record.state === "expert_escalated" || record.attempts >= MAX_ATTEMPTS;
  const cls = escalated ? "badge badge-escalated" : "badge";
  return `<span class="${cls}">${record.attempts}/${MAX_ATTEMPTS}</span>`;
}

export function renderQueue(records: AnnotationRecord[], selectedId: string | null): string {
  if (records.length === 0) {
    return `<p class="empty">No records waiting for review.</p>`;
  }
  const rows = records.map((r) => {
    const selected = r.id === selectedId ? " selected" : "";
    return (
      `<li class="queue-row${selected}" data-id="${escapeHtml(r.id)}">` +
      `<span class="state state-${r.state}">${r.state.replace(/_/g, " ")}</span>` +
      `<span class="question">${escapeHtml(r.question)}</span>` +
      attemptBadge(r) +
      `</li>`
    );
  });
  return `<ul class="queue">${rows.join("")}</ul>`;
}

/** Grayscale grid for inline pixels; falls back to the image reference. */
export function renderImage(record: AnnotationRecord): string {
  const pixels = record.pixels;
  if (!pixels || pixels.length === 0) {
    return `<p class="image-ref">image: ${escapeHtml(record.image_ref)}</p>`;
  }
  const rows = pixels.map((row) => {
    const cells = row.map((v) => {
      const level = Math.round(255 * Math.min(1, Math.max(0, v)));
      return `<td class="px" style="background: rgb(${level},${level},${level})"></td>`;
    });
    return `<tr>${cells.join("")}</tr>`;
  });
  return `<table class="image-grid" aria-label="image ${escapeHtml(record.image_ref)}">${rows.join("")}</table>`;
}

function criterionRow(name: "accurate" | "relevant" | "complete", value: boolean | null): string {
  const passSel = value === true ? " on" : "";
  const failSel = value === false ? " on" : "";
  return (
    `<div class="criterion" data-criterion="${name}">` +
    `<span class="criterion-name">${name}</span>` +
    `<button type="button" class="pass${passSel}" data-set="pass">pass</button>` +
    `<button type="button" class="fail${failSel}" data-set="fail">fail</button>` +
    `</div>`
  );
}

function renderVerdictForm(form: VerdictForm, enabled: boolean): string {
  return (
    `<div class="verdict-form">` +
    criterionRow("accurate", form.accurate) +
    criterionRow("relevant", form.relevant) +
    criterionRow("complete", form.complete) +
    `<input class="note" placeholder="note (optional)" value="${escapeHtml(form.note)}">` +
    `<button type="button" class="submit-verdict"${enabled ? "" : " disabled"}>submit verdict</button>` +
    `<p class="hint">keys: 1/2/3 pass a criterion, shift+1/2/3 fail it, enter submits</p>` +
    `</div>`
  );
}

function renderExpertForm(text: string, enabled: boolean): string {
  return (
    `<div class="expert-form">` +
    `<textarea class="expert-text" placeholder="write the rationale yourself">${escapeHtml(text)}</textarea>` +
    `<button type="button" class="submit-expert"${enabled ? "" : " disabled"}>submit expert rationale</button>` +
    `</div>`
  );
}

export function renderDetail(session: ReviewSession): string {
  const record = session.current;
  if (!record) return `<p class="empty">Select a record.</p>`;
  const parts = [
    `<div class="detail" data-id="${escapeHtml(record.id)}" data-version="${record.version}">`,
    `<h2>${escapeHtml(record.question)}</h2>`,
    renderImage(record),
    `<p class="answer">answer: <strong>${escapeHtml(record.answer)}</strong></p>`,
    `<p class="meta">state: ${record.state} | attempts: ${record.attempts}/${MAX_ATTEMPTS} | version: ${record.version}</p>`,
  ];
  if (record.rationale) {
    parts.push(
      `<blockquote class="rationale" data-source="${escapeHtml(record.source ?? "")}">` +
        `${escapeHtml(record.rationale)}</blockquote>`,
    );
  }
  if (record.last_error) {
    parts.push(`<p class="last-error">last error: ${escapeHtml(record.last_error)}</p>`);
  }
  if (GENERATABLE_STATES.has(record.state)) {
    parts.push(
      `<button type="button" class="generate"${session.canGenerate() ? "" : " disabled"}>` +
        `request rationale</button>`,
    );
  }
  if (record.state === "pending_review") {
    parts.push(renderVerdictForm(session.form, session.canSubmitVerdict()));
  }
  if (record.state === "expert_escalated") {
    parts.push(renderExpertForm(session.expertText, session.canSubmitExpert()));
  }
  parts.push(`</div>`);
  return parts.join("");
}

export function renderApp(session: ReviewSession): string {
  return (
    `<header><h1>Rationale review</h1>` +
    `<input class="reviewer" placeholder="reviewer id" value="${escapeHtml(session.reviewer)}">` +
    `<button type="button" class="refresh">refresh</button></header>` +
    renderBanner(session.banner) +
    `<main><section class="queue-pane">${renderQueue(session.queue, session.current?.id ?? null)}</section>` +
    `<section class="detail-pane">${renderDetail(session)}</section></main>`
  );
}
