/** DOM wiring: render the session into a root node and translate events
 * (clicks, keyboard shortcuts) into session calls. Re-renders after every
 * state change; the session object is the single source of truth. */

import { renderApp } from "./render.js";
import type { ReviewSession } from "./store.js";

const CRITERIA = ["accurate", "relevant", "complete"] as const;

export function mount(root: HTMLElement, session: ReviewSession): () => void {
  const redraw = () => {
    root.innerHTML = renderApp(session);
  };

  const rerenderAfter = (work: Promise<void> | void) => {
    Promise.resolve(work).then(redraw, redraw);
  };

  const onClick = (event: Event) => {
    const target = event.target as HTMLElement;
    const row = target.closest<HTMLElement>(".queue-row");
    if (row?.dataset.id) {
      session.select(row.dataset.id);
      redraw();
      return;
    }
    if (target.matches(".refresh")) return rerenderAfter(session.refresh());
    if (target.matches(".generate")) return rerenderAfter(session.requestGeneration());
    if (target.matches(".submit-verdict")) return rerenderAfter(session.submitVerdict());
    if (target.matches(".submit-expert")) return rerenderAfter(session.submitExpert());
    const setButton = target.closest<HTMLElement>("[data-set]");
    const criterion = setButton?.closest<HTMLElement>("[data-criterion]");
    if (setButton && criterion) {
      session.setCriterion(
        criterion.dataset.criterion as (typeof CRITERIA)[number],
        setButton.dataset.set === "pass",
      );
      redraw();
    }
  };

  const onInput = (event: Event) => {
    const target = event.target as HTMLInputElement;
    if (target.matches(".note")) session.setNote(target.value);
    if (target.matches(".expert-text")) session.setExpertText(target.value);
    if (target.matches(".reviewer")) session.reviewer = target.value;
  };

  const onKeydown = (event: KeyboardEvent) => {
    const inField = (event.target as HTMLElement).matches?.("input, textarea");
    if (inField) return;
    handleShortcut(session, event.key, event.shiftKey, () => redraw());
  };

  root.addEventListener("click", onClick);
  root.addEventListener("input", onInput);
  document.addEventListener("keydown", onKeydown);
  redraw();
  rerenderAfter(session.refresh());

  return () => {
    root.removeEventListener("click", onClick);
    root.removeEventListener("input", onInput);
    document.removeEventListener("keydown", onKeydown);
  };
}

/** Keyboard mapping, exported for direct testing: 1/2/3 pass the three
 * criteria, shift+digit fails them, Enter submits, g requests generation,
 * j/k move through the queue. */
export function handleShortcut(
  session: ReviewSession,
  key: string,
  shift: boolean,
  redraw: () => void,
  submit: () => Promise<void> | void = () => session.submitVerdict(),
): void {
  const digit = { "1": 0, "2": 1, "3": 2, "!": 0, "@": 1, "#": 2 }[key];
  if (digit !== undefined) {
    session.setCriterion(CRITERIA[digit], !shift && !"!@#".includes(key));
    redraw();
    return;
  }
  if (key === "Enter") {
    Promise.resolve(submit()).then(redraw, redraw);
    return;
  }
  if (key === "g") {
    Promise.resolve(session.requestGeneration()).then(redraw, redraw);
    return;
  }
  if (key === "j" || key === "k") {
    const ids = session.queue.map((r) => r.id);
    const at = ids.indexOf(session.current?.id ?? "");
    const next = key === "j" ? Math.min(at + 1, ids.length - 1) : Math.max(at - 1, 0);
    if (ids[next] !== undefined) session.select(ids[next]);
    redraw();
  }
}
