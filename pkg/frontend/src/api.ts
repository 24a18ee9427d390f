/** Typed client for the cleanloop session API.
 *
 * Requests are serialized through an internal queue: the UI never has two
 * calls in flight for the same session, matching the single-annotator
 * contract of the backend.
 */

export type Phase = "scoring" | "awaiting_annotations" | "retraining" | "stopped";

export interface Status {
  v: 1;
  phase: Phase;
  mode: "live" | "simulation";
  iteration: number;
  corrected_count: number;
  total: number;
  last_batch_error_fraction: number | null;
  progress: number;
  stop_reason?: string;
}

export interface BatchItem {
  id: string;
  rank: number;
  score: number | null;
  text?: string;
  label?: string;
  tokens?: string[];
  labels?: string[];
}

export interface Batch {
  v: 1;
  iteration: number;
  task_kind: "classification" | "sequence";
  label_space: string[];
  k: number;
  items: BatchItem[];
}

export interface ReportIteration {
  iteration: number;
  queried: number;
  changed: number | null;
  answered: boolean;
}

export interface Report {
  v: 1;
  mode: "live" | "simulation";
  stop_reason: string;
  iterations: ReportIteration[];
  corrected_count: number;
  total: number;
  dataset_url: string;
  ap?: number;
}

export interface SubmitResult {
  v: 1;
  iteration: number;
  batch_error_fraction: number;
  stopped: boolean;
}

export type DecisionPayload =
  | { confirm: true }
  | { label: string }
  | { labels: string[] };

/** Error carrying the HTTP status and the service's JSON body verbatim. */
export class ApiError extends Error {
  readonly status: number;
  readonly payload: Record<string, unknown>;

  constructor(status: number, payload: Record<string, unknown>) {
    super(typeof payload.error === "string" ? payload.error : `HTTP ${status}`);
    this.status = status;
    this.payload = payload;
  }

  /** Retraining/scoring progress fraction from a 409 body, if present. */
  get progress(): number | null {
    return typeof this.payload.progress === "number" ? this.payload.progress : null;
  }
}

export class ApiClient {
  private readonly base: string;
  private readonly token?: string;
  private queue: Promise<unknown> = Promise.resolve();

  constructor(base = "", token?: string) {
    this.base = base.replace(/\/$/, "");
    this.token = token;
  }

  private headers(): Record<string, string> {
    const headers: Record<string, string> = { "Content-Type": "application/json" };
    if (this.token) headers["Authorization"] = `Bearer ${this.token}`;
    return headers;
  }

  /** Chain a request onto the queue so calls never overlap. */
  private enqueue<T>(task: () => Promise<T>): Promise<T> {
    const next = this.queue.then(task, task);
    this.queue = next.catch(() => undefined);
    return next;
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    return this.enqueue(async () => {
      const response = await fetch(this.base + path, {
        method,
        headers: this.headers(),
        body: body === undefined ? undefined : JSON.stringify(body),
      });
      const payload = (await response.json().catch(() => ({}))) as Record<string, unknown>;
      if (!response.ok) throw new ApiError(response.status, payload);
      return payload as T;
    });
  }

  getStatus(sessionId: string): Promise<Status> {
    return this.request<Status>("GET", `/sessions/${sessionId}/status`);
  }

  getBatch(sessionId: string): Promise<Batch> {
    return this.request<Batch>("GET", `/sessions/${sessionId}/batch`);
  }

  postCorrections(
    sessionId: string,
    decisions: Record<string, DecisionPayload>,
  ): Promise<SubmitResult> {
    return this.request<SubmitResult>("POST", `/sessions/${sessionId}/corrections`, {
      v: 1,
      decisions,
    });
  }

  stop(sessionId: string): Promise<{ stopped: boolean; stopping?: boolean }> {
    return this.request("POST", `/sessions/${sessionId}/stop`);
  }

  getReport(sessionId: string): Promise<Report> {
    return this.request<Report>("GET", `/sessions/${sessionId}/report`);
  }

  datasetUrl(sessionId: string): string {
    return `${this.base}/sessions/${sessionId}/dataset`;
  }
}
