import type {
  EventDto,
  ExperimentDetailDto,
  ExperimentSummary,
  LogRecordDto,
} from './types.js';

export type FetchLike = typeof fetch;

export class ApiError extends Error {
  constructor(
    public status: number,
    message: string,
  ) {
    super(message);
  }
}

async function toError(response: Response): Promise<ApiError> {
  let message = response.statusText;
  try {
    const body = await response.json();
    if (typeof body.error === 'string') message = body.error;
  } catch {
    // non-JSON error body, keep the status text
  }
  return new ApiError(response.status, message);
}

/** Thin client for the controller HTTP API. */
export class ApiClient {
  constructor(
    private base: string = '',
    private fetchFn: FetchLike = fetch,
  ) {}

  private async getJson<T>(path: string): Promise<T> {
    const response = await this.fetchFn(this.base + path);
    if (!response.ok) throw await toError(response);
    return (await response.json()) as T;
  }

  async listExperiments(): Promise<ExperimentSummary[]> {
    const body = await this.getJson<{ experiments: ExperimentSummary[] }>('/v1/experiments');
    return body.experiments;
  }

  getExperiment(id: string): Promise<ExperimentDetailDto> {
    return this.getJson(`/v1/experiments/${id}`);
  }

  clusterStatus(): Promise<Record<string, unknown>> {
    return this.getJson('/v1/cluster/status');
  }

  async stopExperiment(id: string): Promise<ExperimentDetailDto & { killed: number }> {
    const response = await this.fetchFn(this.base + `/v1/experiments/${id}/stop`, {
      method: 'POST',
    });
    if (!response.ok) throw await toError(response);
    return (await response.json()) as ExperimentDetailDto & { killed: number };
  }

  async getEvents(since: number, timeoutMs: number): Promise<EventDto[]> {
    const body = await this.getJson<{ events: EventDto[] }>(
      `/v1/events?since=${since}&timeout_ms=${timeoutMs}`,
    );
    return body.events;
  }

  /** Stream the NDJSON log endpoint, invoking onRecord per parsed line.
   *  Resolves when the stream ends; rejects on transport failure. */
  async streamLogs(
    id: string,
    opts: { follow: boolean; sinceSeq: number; signal?: AbortSignal },
    onRecord: (record: LogRecordDto) => void,
  ): Promise<void> {
    const params = new URLSearchParams({ since_seq: String(opts.sinceSeq) });
    if (opts.follow) params.set('follow', '1');
    const response = await this.fetchFn(
      this.base + `/v1/experiments/${id}/logs?${params.toString()}`,
      { signal: opts.signal },
    );
    if (!response.ok) throw await toError(response);
    if (!response.body) return;
    const reader = response.body.getReader();
    const decoder = new TextDecoder();
    let pending = '';
    for (;;) {
      const { done, value } = await reader.read();
      if (done) break;
      pending += decoder.decode(value, { stream: true });
      let newline;
      while ((newline = pending.indexOf('\n')) >= 0) {
        const line = pending.slice(0, newline).trim();
        pending = pending.slice(newline + 1);
        if (line) onRecord(JSON.parse(line) as LogRecordDto);
      }
    }
  }
}
