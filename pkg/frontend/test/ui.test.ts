/** Keyboard shortcut handling, tested as plain functions. */

import { describe, expect, it } from "vitest";
import { ApiClient } from "../src/api.js";
import { ReviewSession } from "../src/store.js";
import { handleShortcut } from "../src/ui.js";
import type { AnnotationRecord } from "../src/types.js";

function sessionWithQueue(ids: string[]): ReviewSession {
  const session = new ReviewSession(new ApiClient("http://unused", async () => {
    throw new Error("no network");
  }));
  session.queue = ids.map((id): AnnotationRecord => ({
    id,
    image_ref: `img-${id}`,
    question: "?",
    answer: "yes",
    qtype: "closed",
    split: "train",
    state: "pending_review",
    attempts: 1,
    version: 1,
  }));
  session.current = session.queue[0] ?? null;
  return session;
}

describe("keyboard shortcuts", () => {
  it("digits pass criteria and shifted digits fail them", () => {
    const session = sessionWithQueue(["a"]);
    let draws = 0;
    const redraw = () => { draws += 1; };
    handleShortcut(session, "1", false, redraw);
    handleShortcut(session, "2", true, redraw);
    handleShortcut(session, "#", true, redraw);
    expect(session.form).toMatchObject({ accurate: true, relevant: false, complete: false });
    expect(draws).toBe(3);
  });

  it("enter submits through the provided submitter", async () => {
    const session = sessionWithQueue(["a"]);
    let submitted = false;
    handleShortcut(session, "Enter", false, () => {}, async () => {
      submitted = true;
    });
    await Promise.resolve();
    expect(submitted).toBe(true);
  });

  it("j and k move the selection without wrapping", () => {
    const session = sessionWithQueue(["a", "b", "c"]);
    const redraw = () => {};
    handleShortcut(session, "j", false, redraw);
    expect(session.current?.id).toBe("b");
    handleShortcut(session, "j", false, redraw);
    handleShortcut(session, "j", false, redraw);
    expect(session.current?.id).toBe("c");
    handleShortcut(session, "k", false, redraw);
    expect(session.current?.id).toBe("b");
    handleShortcut(session, "k", false, redraw);
    handleShortcut(session, "k", false, redraw);
    expect(session.current?.id).toBe("a");
  });

  it("unknown keys change nothing", () => {
    const session = sessionWithQueue(["a"]);
    handleShortcut(session, "x", false, () => {
      throw new Error("should not redraw");
    });
    expect(session.form.accurate).toBeNull();
  });
});
