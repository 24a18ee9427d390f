import { describe, expect, it } from "vitest";

import type { Batch } from "../src/api.js";
import { DecisionTracker } from "../src/decisions.js";

function classificationBatch(): Batch {
  return {
    v: 1,
    iteration: 1,
    task_kind: "classification",
    label_space: ["neg", "pos"],
    k: 3,
    items: [
      { id: "a", rank: 1, score: 0.9, text: "great stuff", label: "neg" },
      { id: "b", rank: 2, score: 0.5, text: "awful stuff", label: "pos" },
      { id: "c", rank: 3, score: 0.1, text: "fine", label: "pos" },
    ],
  };
}

function sequenceBatch(): Batch {
  return {
    v: 1,
    iteration: 2,
    task_kind: "sequence",
    label_space: ["O", "ENT"],
    k: 1,
    items: [
      {
        id: "s1",
        rank: 1,
        score: 0.7,
        tokens: ["visit", "rome", "today"],
        labels: ["O", "O", "O"],
      },
    ],
  };
}

describe("DecisionTracker", () => {
  it("cannot build a partial submission", () => {
    const tracker = new DecisionTracker(classificationBatch());
    tracker.confirm("a");
    tracker.correct("b", ["neg"]);
    expect(tracker.allDecided).toBe(false);
    expect(() => tracker.toSubmission()).toThrow(/undecided/);
  });

  it("builds a complete submission with confirmations and corrections", () => {
    const tracker = new DecisionTracker(classificationBatch());
    tracker.confirm("a");
    tracker.correct("b", ["neg"]);
    tracker.confirm("c");
    expect(tracker.toSubmission()).toEqual({
      a: { confirm: true },
      b: { label: "neg" },
      c: { confirm: true },
    });
  });

  it("collapses a correction back to the observed labels into a confirm", () => {
    const tracker = new DecisionTracker(classificationBatch());
    tracker.correct("a", ["neg"]); // observed label is already neg
    expect(tracker.decision("a")).toEqual({ kind: "confirmed" });
  });

  it("rejects labels outside the session label space", () => {
    const tracker = new DecisionTracker(classificationBatch());
    expect(() => tracker.correct("a", ["maybe"])).toThrow(/label space/);
  });

  it("rejects wrong label arity", () => {
    const tracker = new DecisionTracker(sequenceBatch());
    expect(() => tracker.correct("s1", ["O"])).toThrow(/3 labels/);
  });

  it("edits sequence tokens one chip at a time", () => {
    const tracker = new DecisionTracker(sequenceBatch());
    tracker.setTokenLabel("s1", 1, "ENT");
    expect(tracker.decision("s1")).toEqual({ kind: "corrected", labels: ["O", "ENT", "O"] });
    expect(tracker.toSubmission()).toEqual({ s1: { labels: ["O", "ENT", "O"] } });
  });

  it("cycleTokenLabel walks the label space and wraps", () => {
    const tracker = new DecisionTracker(sequenceBatch());
    expect(tracker.cycleTokenLabel("s1", 0)).toBe("ENT");
    expect(tracker.cycleTokenLabel("s1", 0)).toBe("O");
    // cycled back to the original sequence -> confirmation
    expect(tracker.decision("s1")).toEqual({ kind: "confirmed" });
  });

  it("whole sequence is one decision unit", () => {
    const tracker = new DecisionTracker(sequenceBatch());
    tracker.setTokenLabel("s1", 0, "ENT");
    tracker.setTokenLabel("s1", 2, "ENT");
    expect(tracker.counts()).toEqual({ confirmed: 0, corrected: 1, untouched: 0 });
  });

  it("tracks undecided ids in batch order", () => {
    const tracker = new DecisionTracker(classificationBatch());
    tracker.confirm("b");
    expect(tracker.undecided()).toEqual(["a", "c"]);
    expect(tracker.counts()).toEqual({ confirmed: 1, corrected: 0, untouched: 2 });
  });

  it("clear() returns an item to undecided", () => {
    const tracker = new DecisionTracker(classificationBatch());
    tracker.confirm("a");
    tracker.clear("a");
    expect(tracker.undecided()).toContain("a");
  });

  it("unknown ids are rejected", () => {
    const tracker = new DecisionTracker(classificationBatch());
    expect(() => tracker.confirm("zzz")).toThrow(/unknown/);
  });
});
