/** Per-batch decision state.
 *
 * Every flagged item must be explicitly confirmed or corrected before a
 * submission payload can exist at all; a partial batch is unrepresentable.
 * Labels are constrained to the session's label space, and a "correction"
 * that restores the original labels collapses back to a confirmation.
 */

import type { Batch, BatchItem, DecisionPayload } from "./api.js";

export type Decision =
  | { kind: "confirmed" }
  | { kind: "corrected"; labels: string[] };

function observedLabels(item: BatchItem): string[] {
  if (item.labels) return [...item.labels];
  if (item.label !== undefined) return [item.label];
  throw new Error(`batch item ${item.id} has no labels`);
}

function sameLabels(a: string[], b: string[]): boolean {
  return a.length === b.length && a.every((value, i) => value === b[i]);
}

export class DecisionTracker {
  readonly batch: Batch;
  private readonly decisions = new Map<string, Decision>();
  private readonly byId = new Map<string, BatchItem>();

  constructor(batch: Batch) {
    this.batch = batch;
    for (const item of batch.items) this.byId.set(item.id, item);
  }

  private item(id: string): BatchItem {
    const item = this.byId.get(id);
    if (!item) throw new Error(`unknown batch item ${id}`);
    return item;
  }

  private checkLabels(id: string, labels: string[]): void {
    const expected = observedLabels(this.item(id)).length;
    if (labels.length !== expected) {
      throw new Error(`item ${id} needs ${expected} labels, got ${labels.length}`);
    }
    for (const label of labels) {
      if (!this.batch.label_space.includes(label)) {
        throw new Error(`label ${label} is not in the session label space`);
      }
    }
  }

  decision(id: string): Decision | undefined {
    return this.decisions.get(id);
  }

  /** Labels the item currently carries under its decision (or as observed). */
  effectiveLabels(id: string): string[] {
    const decision = this.decisions.get(id);
    if (decision?.kind === "corrected") return [...decision.labels];
    return observedLabels(this.item(id));
  }

  confirm(id: string): void {
    this.item(id);
    this.decisions.set(id, { kind: "confirmed" });
  }

  correct(id: string, labels: string[]): void {
    this.checkLabels(id, labels);
    if (sameLabels(labels, observedLabels(this.item(id)))) {
      this.decisions.set(id, { kind: "confirmed" });
    } else {
      this.decisions.set(id, { kind: "corrected", labels: [...labels] });
    }
  }

  /** Replace one token's label (sequence items; index 0 for classification). */
  setTokenLabel(id: string, tokenIndex: number, label: string): void {
    const labels = this.effectiveLabels(id);
    if (tokenIndex < 0 || tokenIndex >= labels.length) {
      throw new Error(`token index ${tokenIndex} out of range for ${id}`);
    }
    labels[tokenIndex] = label;
    this.correct(id, labels);
  }

  /** Advance one token's label to the next in the label space (chip click). */
  cycleTokenLabel(id: string, tokenIndex: number): string {
    const labels = this.effectiveLabels(id);
    const space = this.batch.label_space;
    const current = space.indexOf(labels[tokenIndex]);
    const next = space[(current + 1) % space.length];
    this.setTokenLabel(id, tokenIndex, next);
    return next;
  }

  clear(id: string): void {
    this.item(id);
    this.decisions.delete(id);
  }

  undecided(): string[] {
    return this.batch.items
      .filter((item) => !this.decisions.has(item.id))
      .map((item) => item.id);
  }

  get allDecided(): boolean {
    return this.undecided().length === 0;
  }

  counts(): { confirmed: number; corrected: number; untouched: number } {
    let confirmed = 0;
    let corrected = 0;
    for (const decision of this.decisions.values()) {
      if (decision.kind === "confirmed") confirmed += 1;
      else corrected += 1;
    }
    return {
      confirmed,
      corrected,
      untouched: this.batch.items.length - confirmed - corrected,
    };
  }

  /** Build the atomic submission body; impossible while any item is undecided. */
  toSubmission(): Record<string, DecisionPayload> {
    const missing = this.undecided();
    if (missing.length > 0) {
      throw new Error(`cannot submit: ${missing.length} item(s) undecided`);
    }
    const body: Record<string, DecisionPayload> = {};
    for (const item of this.batch.items) {
      const decision = this.decisions.get(item.id)!;
      if (decision.kind === "confirmed") {
        body[item.id] = { confirm: true };
      } else if (this.batch.task_kind === "classification") {
        body[item.id] = { label: decision.labels[0] };
      } else {
        body[item.id] = { labels: [...decision.labels] };
      }
    }
    return body;
  }
}
