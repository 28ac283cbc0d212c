import { describe, expect, it } from 'vitest';

import { ApiClient } from '../src/api.js';
import { ExperimentDetail } from '../src/detail.js';
import type { ExperimentDetailDto, ObservationDto } from '../src/types.js';

function observation(index: number, value: number): ObservationDto {
  return {
    suggestion_id: `s-${index}`,
    run_id: `r-${index}`,
    assignment: { x: value },
    value,
    failed: false,
    reported_at: 1000 + index,
  };
}

/** Fake controller behind the fetch boundary: one active experiment with
 *  five live runs; POST .../stop kills them and flips it to deleted. */
function fakeController(): { fetchFn: typeof fetch; calls: string[] } {
  const calls: string[] = [];
  const experiment: ExperimentDetailDto = {
    id: 'e-1',
    name: 'demo',
    state: 'active',
    strategy: 'random',
    budget: { completed: 3, failed: 0, total: 20 },
    runs_by_state: { running: 5, succeeded: 3 },
    best: { assignment: { x: 0.9 }, value: 0.9 },
    runs: [
      ...[0, 1, 2].map((i) => ({
        run_id: `r-${i}`,
        state: 'succeeded',
        node_id: 'n-0',
        duration: 1.0,
      })),
      ...[3, 4, 5, 6, 7].map((i) => ({
        run_id: `r-${i}`,
        state: 'running',
        node_id: 'n-1',
        duration: null,
      })),
    ],
    observations: [observation(0, 0.5), observation(1, 0.3), observation(2, 0.9)],
  };

  const fetchFn = (async (input: RequestInfo | URL, init?: RequestInit) => {
    const url = String(input);
    calls.push(`${init?.method ?? 'GET'} ${url}`);
    if (url.endsWith('/stop') && init?.method === 'POST') {
      experiment.state = 'deleted';
      experiment.runs = experiment.runs.map((r) =>
        r.state === 'running' ? { ...r, state: 'killed' } : r,
      );
      experiment.runs_by_state = { succeeded: 3, killed: 5 };
      return Response.json({ ...experiment, killed: 5 });
    }
    if (url.endsWith('/v1/experiments/e-1')) {
      return Response.json(experiment);
    }
    return Response.json({ error: `experiment not found: ${url}` }, { status: 404 });
  }) as typeof fetch;

  return { fetchFn, calls };
}

describe('ExperimentDetail', () => {
  it('projects the API status and running-max series', async () => {
    const { fetchFn } = fakeController();
    const detail = new ExperimentDetail(new ApiClient('http://c', fetchFn), 'e-1');
    await detail.refresh();
    expect(detail.state.experiment?.state).toBe('active');
    expect(detail.state.bestSeries).toEqual([0.5, 0.5, 0.9]);
    expect(detail.canStop).toBe(true);
  });

  it('stop drives the experiment to deleted with final counts', async () => {
    const { fetchFn, calls } = fakeController();
    const detail = new ExperimentDetail(new ApiClient('http://c', fetchFn), 'e-1');
    await detail.refresh();
    await detail.stop();

    expect(calls).toContain('POST http://c/v1/experiments/e-1/stop');
    expect(detail.state.experiment?.state).toBe('deleted');
    expect(detail.state.lastKilled).toBe(5);
    expect(detail.canStop).toBe(false);
    const killed = detail.state.experiment?.runs.filter((r) => r.state === 'killed');
    expect(killed).toHaveLength(5);
  });

  it('stop is disabled once the experiment is terminal', async () => {
    const { fetchFn } = fakeController();
    const detail = new ExperimentDetail(new ApiClient('http://c', fetchFn), 'e-1');
    await detail.refresh();
    await detail.stop();
    expect(detail.canStop).toBe(false);
  });

  it('surfaces API errors without clearing the last good view', async () => {
    const { fetchFn } = fakeController();
    const detail = new ExperimentDetail(new ApiClient('http://c', fetchFn), 'e-gone');
    await detail.refresh();
    expect(detail.state.experiment).toBeNull();
    expect(detail.state.error).toContain('experiment not found');
  });
});
