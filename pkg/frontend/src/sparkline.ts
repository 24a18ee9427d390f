/** Tiny textual sparkline for per-iteration error yield. */

import type { ReportIteration } from "./api.js";

const BLOCKS = ["▁", "▂", "▃", "▄", "▅", "▆", "▇", "█"];

export interface YieldPoint {
  iteration: number;
  changed: number;
  queried: number;
}

export function yieldPoints(iterations: ReportIteration[]): YieldPoint[] {
  return iterations
    .filter((row) => row.answered && row.changed !== null)
    .map((row) => ({
      iteration: row.iteration,
      changed: row.changed as number,
      queried: row.queried,
    }));
}

/** Block-character sparkline of batch error fractions (0..1). */
export function sparkline(points: YieldPoint[]): string {
  return points
    .map((point) => {
      const fraction = point.queried > 0 ? point.changed / point.queried : 0;
      const index = Math.min(BLOCKS.length - 1, Math.floor(fraction * BLOCKS.length));
      return BLOCKS[index];
    })
    .join("");
}

/** Raw numbers next to the trend, e.g. "40/50 12/50 3/50". */
export function yieldNumbers(points: YieldPoint[]): string {
  return points.map((point) => `${point.changed}/${point.queried}`).join(" ");
}
