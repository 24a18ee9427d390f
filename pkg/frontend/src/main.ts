/** DOM application: connect to a session, review batches, watch progress.
 *
 * Keyboard-first review: j/k or arrows move between items, `c` confirms,
 * digits 1-9 pick a label for the selected item (or selected token of a
 * sequence), left/right move the token cursor, Enter submits once every
 * item is decided, `s` requests a stop.
 */

import { ApiClient, ApiError } from "./api.js";
import type { Report, Status } from "./api.js";
import { DecisionTracker } from "./decisions.js";
import { pollUntil } from "./poll.js";
import { sparkline, yieldNumbers, yieldPoints } from "./sparkline.js";

type Child = Node | string;

function el(tag: string, attrs: Record<string, string> = {}, ...children: Child[]): HTMLElement {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) {
    if (key === "class") node.className = value;
    else node.setAttribute(key, value);
  }
  for (const child of children) {
    node.append(typeof child === "string" ? document.createTextNode(child) : child);
  }
  return node;
}

class App {
  private readonly root: HTMLElement;
  private api = new ApiClient("");
  private sessionId = "";
  private tracker: DecisionTracker | null = null;
  private selected = 0;
  private tokenCursor = 0;
  private polling = false;

  constructor(root: HTMLElement) {
    this.root = root;
    document.addEventListener("keydown", (event) => this.onKey(event));
  }

  start(): void {
    const match = location.hash.match(/^#\/s\/([A-Za-z0-9]+)$/);
    if (match) {
      this.connect(match[1]);
    } else {
      this.renderConnect();
    }
  }

  private connect(sessionId: string): void {
    this.sessionId = sessionId;
    location.hash = `#/s/${sessionId}`;
    void this.refresh();
  }

  /** Poll status and route to the right view. */
  private async refresh(): Promise<void> {
    if (this.polling) return;
    this.polling = true;
    try {
      const status = await pollUntil(
        () => this.api.getStatus(this.sessionId),
        (s) => s.phase === "awaiting_annotations" || s.phase === "stopped",
        { onTick: (s, interval) => this.renderProgress(s, interval) },
      );
      if (status.phase === "stopped") {
        await this.renderReport();
      } else {
        await this.loadBatch();
      }
    } catch (error) {
      this.renderError(error, () => void this.refresh());
    } finally {
      this.polling = false;
    }
  }

  private async loadBatch(): Promise<void> {
    try {
      const batch = await this.api.getBatch(this.sessionId);
      if (!this.tracker || this.tracker.batch.iteration !== batch.iteration) {
        this.tracker = new DecisionTracker(batch);
        this.selected = 0;
        this.tokenCursor = 0;
      }
      this.renderBatch();
    } catch (error) {
      if (error instanceof ApiError && error.status === 409) {
        void this.refresh();
        return;
      }
      if (error instanceof ApiError && error.status === 410) {
        await this.renderReport();
        return;
      }
      this.renderError(error, () => void this.loadBatch());
    }
  }

  private async submit(): Promise<void> {
    if (!this.tracker || !this.tracker.allDecided) return;
    const body = this.tracker.toSubmission();
    try {
      const result = await this.api.postCorrections(this.sessionId, body);
      this.tracker = null;
      this.banner(
        `batch ${result.iteration} submitted, error fraction ` +
          `${(result.batch_error_fraction * 100).toFixed(0)}%`,
      );
      void this.refresh();
    } catch (error) {
      // 409/422 come back verbatim; local decisions stay intact for retry
      this.renderError(error, () => void this.submit());
    }
  }

  private async stop(): Promise<void> {
    try {
      await this.api.stop(this.sessionId);
      void this.refresh();
    } catch (error) {
      this.renderError(error, () => void this.stop());
    }
  }

  // --- keyboard -----------------------------------------------------------

  private onKey(event: KeyboardEvent): void {
    if (!this.tracker || (event.target as HTMLElement)?.tagName === "INPUT") return;
    const items = this.tracker.batch.items;
    const key = event.key;
    if (key === "j" || key === "ArrowDown") {
      this.selected = Math.min(this.selected + 1, items.length - 1);
      this.tokenCursor = 0;
    } else if (key === "k" || key === "ArrowUp") {
      this.selected = Math.max(this.selected - 1, 0);
      this.tokenCursor = 0;
    } else if (key === "c") {
      this.tracker.confirm(items[this.selected].id);
      this.selected = Math.min(this.selected + 1, items.length - 1);
    } else if (key === "ArrowRight" && this.tracker.batch.task_kind === "sequence") {
      const width = this.tracker.effectiveLabels(items[this.selected].id).length;
      this.tokenCursor = Math.min(this.tokenCursor + 1, width - 1);
    } else if (key === "ArrowLeft" && this.tracker.batch.task_kind === "sequence") {
      this.tokenCursor = Math.max(this.tokenCursor - 1, 0);
    } else if (/^[1-9]$/.test(key)) {
      const label = this.tracker.batch.label_space[Number(key) - 1];
      if (label !== undefined) {
        this.tracker.setTokenLabel(items[this.selected].id, this.tokenCursor, label);
      }
    } else if (key === "Enter" && this.tracker.allDecided) {
      void this.submit();
      return;
    } else if (key === "s") {
      void this.stop();
      return;
    } else {
      return;
    }
    event.preventDefault();
    this.renderBatch();
  }

  // --- views --------------------------------------------------------------

  private clear(): HTMLElement {
    this.root.replaceChildren();
    return this.root;
  }

  private banner(text: string): void {
    const note = el("div", { class: "banner" }, text);
    this.root.prepend(note);
    setTimeout(() => note.remove(), 4000);
  }

  private renderConnect(): void {
    const input = el("input", {
      placeholder: "session id",
      autofocus: "true",
    }) as HTMLInputElement;
    const button = el("button", {}, "open session");
    button.addEventListener("click", () => {
      if (input.value.trim()) this.connect(input.value.trim());
    });
    input.addEventListener("keydown", (event) => {
      if (event.key === "Enter" && input.value.trim()) this.connect(input.value.trim());
    });
    this.clear().append(
      el("h1", {}, "cleanloop annotator"),
      el("p", {}, "Enter the session id issued by POST /sessions."),
      el("div", { class: "row" }, input, button),
    );
  }

  private renderProgress(status: Status, intervalMs: number): void {
    const percent = Math.round(status.progress * 100);
    const bar = el("div", { class: "bar" });
    bar.append(el("div", { class: "fill", style: `width:${percent}%` }));
    this.clear().append(
      el("h1", {}, `session ${this.sessionId}`),
      el("p", {}, `${status.phase} — iteration ${status.iteration}, ` +
        `${status.corrected_count}/${status.total} reviewed`),
      bar,
      el("p", { class: "dim" }, `${percent}% · polling every ${(intervalMs / 1000).toFixed(1)}s`),
      this.stopButton(),
    );
  }

  private renderBatch(): void {
    const tracker = this.tracker;
    if (!tracker) return;
    const batch = tracker.batch;
    const list = el("ol", { class: "items" });
    batch.items.forEach((item, index) => {
      const row = el("li", { class: index === this.selected ? "item selected" : "item" });
      const decision = tracker.decision(item.id);
      const badge =
        decision === undefined
          ? el("span", { class: "badge todo" }, "todo")
          : decision.kind === "confirmed"
            ? el("span", { class: "badge ok" }, "confirmed")
            : el("span", { class: "badge fix" }, "corrected");
      const head = el(
        "div",
        { class: "head" },
        el("span", { class: "rank" }, `#${item.rank}`),
        el("span", { class: "score" }, item.score === null ? "" : item.score.toFixed(4)),
        badge,
      );
      row.append(head);

      if (batch.task_kind === "classification") {
        row.append(el("div", { class: "text" }, item.text ?? ""));
        const picker = el("div", { class: "chips" });
        const current = tracker.effectiveLabels(item.id)[0];
        batch.label_space.forEach((label, labelIndex) => {
          const chip = el(
            "button",
            { class: label === current ? "chip on" : "chip" },
            `${labelIndex + 1} ${label}`,
          );
          chip.addEventListener("click", () => {
            tracker.setTokenLabel(item.id, 0, label);
            this.renderBatch();
          });
          picker.append(chip);
        });
        row.append(picker);
      } else {
        const labels = tracker.effectiveLabels(item.id);
        const tokens = el("div", { class: "tokens" });
        (item.tokens ?? []).forEach((token, tokenIndex) => {
          const cursor =
            index === this.selected && tokenIndex === this.tokenCursor ? " cursor" : "";
          const chip = el(
            "button",
            { class: `token${cursor}` },
            el("span", { class: "surface" }, token),
            el("span", { class: "tag" }, labels[tokenIndex]),
          );
          chip.addEventListener("click", () => {
            this.selected = index;
            this.tokenCursor = tokenIndex;
            tracker.cycleTokenLabel(item.id, tokenIndex);
            this.renderBatch();
          });
          tokens.append(chip);
        });
        row.append(tokens);
      }

      const confirm = el("button", { class: "confirm" }, "confirm (c)");
      confirm.addEventListener("click", () => {
        this.selected = index;
        tracker.confirm(item.id);
        this.renderBatch();
      });
      row.append(confirm);
      row.addEventListener("click", () => {
        if (this.selected !== index) {
          this.selected = index;
          this.renderBatch();
        }
      });
      list.append(row);
    });

    const counts = tracker.counts();
    const submit = el("button", { class: "submit" }, `submit batch (${counts.untouched} left)`);
    if (!tracker.allDecided) submit.setAttribute("disabled", "true");
    submit.addEventListener("click", () => void this.submit());

    this.clear().append(
      el("h1", {}, `batch ${batch.iteration} — ${batch.items.length} flagged`),
      el(
        "p",
        { class: "dim" },
        `confirmed ${counts.confirmed} · corrected ${counts.corrected} · ` +
          `undecided ${counts.untouched} · labels: ${batch.label_space.join(", ")}`,
      ),
      list,
      el("div", { class: "row" }, submit, this.stopButton()),
    );
  }

  private async renderReport(): Promise<void> {
    let report: Report;
    try {
      report = await this.api.getReport(this.sessionId);
    } catch (error) {
      this.renderError(error, () => void this.renderReport());
      return;
    }
    const points = yieldPoints(report.iterations);
    const table = el("table", {});
    table.append(
      el(
        "tr",
        {},
        el("th", {}, "iteration"),
        el("th", {}, "queried"),
        el("th", {}, "changed"),
        el("th", {}, "answered"),
      ),
    );
    for (const row of report.iterations) {
      table.append(
        el(
          "tr",
          {},
          el("td", {}, String(row.iteration)),
          el("td", {}, String(row.queried)),
          el("td", {}, row.changed === null ? "—" : String(row.changed)),
          el("td", {}, row.answered ? "yes" : "no"),
        ),
      );
    }
    const download = el("a", { href: this.api.datasetUrl(this.sessionId) }, "download corrected dataset");
    const children: Child[] = [
      el("h1", {}, `session ${this.sessionId} — stopped (${report.stop_reason})`),
      el("p", {}, `${report.corrected_count}/${report.total} instances reviewed`),
      el("p", { class: "spark" }, `yield ${sparkline(points)}  ${yieldNumbers(points)}`),
      table,
      el("p", {}, download),
    ];
    if (report.ap !== undefined) {
      children.splice(2, 0, el("p", {}, `average precision vs gold: ${(report.ap * 100).toFixed(1)}%`));
    }
    this.clear().append(...children);
  }

  private renderError(error: unknown, retry: () => void): void {
    const message =
      error instanceof ApiError
        ? `${error.status}: ${error.message}`
        : error instanceof Error
          ? error.message
          : String(error);
    if (error instanceof ApiError && error.status === 404) {
      this.clear().append(
        el("h1", {}, "session not found"),
        el("p", {}, message),
      );
      return;
    }
    const button = el("button", {}, "retry");
    button.addEventListener("click", retry);
    // decisions survive: the tracker is untouched on errors
    this.clear().append(
      el("h1", {}, "request failed"),
      el("p", { class: "error" }, message),
      button,
    );
  }

  private stopButton(): HTMLElement {
    const button = el("button", { class: "stop" }, "stop session (s)");
    button.addEventListener("click", () => void this.stop());
    return button;
  }
}

const root = document.getElementById("app");
if (root) {
  new App(root).start();
}
