import type { ApiClient } from './api.js';
import type { EventDto, LogRecordDto } from './types.js';

const RETRY_DELAY_MS = 1000;

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

/** Long-polls /v1/events, delivering each event exactly once in order.
 *  The cursor survives dropped connections: on error it retries from the
 *  last delivered seq, and any replayed events are filtered out. */
export class EventFeed {
  private cursor = -1;
  private stopped = false;

  constructor(
    private api: ApiClient,
    private onEvent: (event: EventDto) => void,
    private onConnectionChange: (up: boolean) => void = () => {},
    private retryDelayMs: number = RETRY_DELAY_MS,
  ) {}

  async run(timeoutMs = 25000): Promise<void> {
    while (!this.stopped) {
      let events: EventDto[];
      try {
        events = await this.api.getEvents(this.cursor, timeoutMs);
        this.onConnectionChange(true);
      } catch {
        this.onConnectionChange(false);
        await sleep(this.retryDelayMs);
        continue;
      }
      for (const event of events) {
        if (this.stopped) return;
        if (event.seq <= this.cursor) continue;
        this.cursor = event.seq;
        this.onEvent(event);
      }
    }
  }

  stop(): void {
    this.stopped = true;
  }
}

/** Follows an experiment's log stream, resuming from the last seen
 *  global_seq after a drop. Duplicate suppression is the sink's job
 *  (LogBuffer.push), so the follower only tracks the resume cursor. */
export class LogFollower {
  private stopped = false;
  private abort: AbortController | null = null;

  constructor(
    private api: ApiClient,
    private experimentId: string,
    private sink: { push(record: LogRecordDto): boolean; sinceSeq: number },
    private onRecord: (record: LogRecordDto) => void,
    private retryDelayMs: number = RETRY_DELAY_MS,
  ) {}

  async run(): Promise<void> {
    while (!this.stopped) {
      this.abort = new AbortController();
      try {
        await this.api.streamLogs(
          this.experimentId,
          { follow: true, sinceSeq: this.sink.sinceSeq, signal: this.abort.signal },
          (record) => {
            if (this.sink.push(record)) this.onRecord(record);
          },
        );
        return; // clean end of stream: experiment is terminal
      } catch {
        if (this.stopped) return;
        await sleep(this.retryDelayMs);
      }
    }
  }

  stop(): void {
    this.stopped = true;
    this.abort?.abort();
  }
}
