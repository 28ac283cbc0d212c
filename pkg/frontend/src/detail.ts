import type { ApiClient } from './api.js';
import { runningMaxSeries } from './model.js';
import type { ExperimentDetailDto } from './types.js';

export interface DetailState {
  experiment: ExperimentDetailDto | null;
  bestSeries: Array<number | null>;
  lastKilled: number | null;
  error: string | null;
}

/** View-model for the experiment detail page. Everything displayed is a
 *  direct projection of API responses; the only client-side computation is
 *  the running max. */
export class ExperimentDetail {
  state: DetailState = { experiment: null, bestSeries: [], lastKilled: null, error: null };

  constructor(
    private api: ApiClient,
    public readonly id: string,
    private onChange: (state: DetailState) => void = () => {},
  ) {}

  private apply(experiment: ExperimentDetailDto): void {
    this.state.experiment = experiment;
    this.state.bestSeries = runningMaxSeries(experiment.observations);
    this.state.error = null;
    this.onChange(this.state);
  }

  async refresh(): Promise<void> {
    try {
      this.apply(await this.api.getExperiment(this.id));
    } catch (e) {
      this.state.error = e instanceof Error ? e.message : String(e);
      this.onChange(this.state);
    }
  }

  get canStop(): boolean {
    return this.state.experiment?.state === 'active';
  }

  /** Confirmed stop action. A race with natural completion is not an
   *  error: the response is whatever final state the controller reports. */
  async stop(): Promise<void> {
    const result = await this.api.stopExperiment(this.id);
    this.state.lastKilled = result.killed;
    this.apply(result);
  }
}
