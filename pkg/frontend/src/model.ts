import type { ExperimentSummary, LogRecordDto, ObservationDto } from './types.js';

/** Best-value-so-far series: one point per observation, failures carry the
 *  previous best forward. Leading failures produce nulls until the first
 *  success arrives. */
export function runningMaxSeries(observations: ObservationDto[]): Array<number | null> {
  const series: Array<number | null> = [];
  let best: number | null = null;
  for (const obs of observations) {
    if (!obs.failed && obs.value !== null) {
      best = best === null ? obs.value : Math.max(best, obs.value);
    }
    series.push(best);
  }
  return series;
}

export function progressFraction(summary: ExperimentSummary): number {
  const { completed, failed, total } = summary.budget;
  if (total <= 0) return 0;
  return Math.min(1, (completed + failed) / total);
}

export function liveRunCount(summary: ExperimentSummary): number {
  const byState = summary.runs_by_state ?? {};
  return (byState.queued ?? 0) + (byState.scheduled ?? 0) + (byState.running ?? 0);
}

export const LOG_PALETTE = ['#2da44e', '#0969da', '#bf8700', '#a475f9', '#1b7c83', '#cf222e'];

/** Stable per-run color, assigned in order of first appearance. */
export class ColorAssigner {
  private assigned = new Map<string, string>();

  colorFor(runId: string): string {
    let color = this.assigned.get(runId);
    if (color === undefined) {
      color = LOG_PALETTE[this.assigned.size % LOG_PALETTE.length];
      this.assigned.set(runId, color);
    }
    return color;
  }
}

export const DEFAULT_LOG_CAPACITY = 5000;

/** Bounded log buffer that also deduplicates replayed records, so a
 *  reconnect that re-sends part of the stream never shows a line twice. */
export class LogBuffer {
  private records: LogRecordDto[] = [];
  private highestSeq = -1;

  constructor(private capacity: number = DEFAULT_LOG_CAPACITY) {}

  /** Returns true if the record was new. */
  push(record: LogRecordDto): boolean {
    if (record.global_seq <= this.highestSeq) return false;
    this.highestSeq = record.global_seq;
    this.records.push(record);
    if (this.records.length > this.capacity) {
      this.records.splice(0, this.records.length - this.capacity);
    }
    return true;
  }

  get sinceSeq(): number {
    return this.highestSeq;
  }

  get lines(): readonly LogRecordDto[] {
    return this.records;
  }
}
