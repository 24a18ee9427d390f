/** Status polling with backoff.
 *
 * Polling never runs hotter than once per second; while the backend is
 * scoring or retraining the interval backs off geometrically up to a cap,
 * and resets as soon as the phase changes.
 */

import type { Phase, Status } from "./api.js";

export const MIN_INTERVAL_MS = 1000;
export const MAX_INTERVAL_MS = 8000;
export const BACKOFF_FACTOR = 1.5;

export function nextInterval(phase: Phase, previous: number | null): number {
  if (phase === "scoring" || phase === "retraining") {
    const grown = previous === null ? MIN_INTERVAL_MS : previous * BACKOFF_FACTOR;
    return Math.min(Math.round(grown), MAX_INTERVAL_MS);
  }
  return MIN_INTERVAL_MS;
}

export interface PollOptions {
  sleep?: (ms: number) => Promise<void>;
  onTick?: (status: Status, intervalMs: number) => void;
  timeoutMs?: number;
}

const defaultSleep = (ms: number) => new Promise<void>((resolve) => setTimeout(resolve, ms));

/** Poll until the status matches; resolves with the matching status. */
export async function pollUntil(
  fetchStatus: () => Promise<Status>,
  done: (status: Status) => boolean,
  options: PollOptions = {},
): Promise<Status> {
  const sleep = options.sleep ?? defaultSleep;
  const deadline = options.timeoutMs === undefined ? null : Date.now() + options.timeoutMs;
  let interval: number | null = null;
  let lastPhase: Phase | null = null;

  for (;;) {
    const status = await fetchStatus();
    if (done(status)) return status;
    if (deadline !== null && Date.now() > deadline) {
      throw new Error("timed out waiting for the session");
    }
    if (status.phase !== lastPhase) interval = null;
    lastPhase = status.phase;
    interval = nextInterval(status.phase, interval);
    options.onTick?.(status, interval);
    await sleep(interval);
  }
}
