// Shapes of the controller API payloads the dashboard consumes.

export interface ObservationDto {
  suggestion_id: string;
  run_id: string;
  assignment: Record<string, number | string>;
  value: number | null;
  failed: boolean;
  reported_at: number;
}

export interface RunRow {
  run_id: string;
  state: string;
  node_id: string | null;
  duration: number | null;
}

export interface ExperimentSummary {
  id: string;
  name: string;
  state: string;
  strategy: string;
  budget: { completed: number; failed: number; total: number };
  runs_by_state: Record<string, number>;
  best: { assignment: Record<string, number | string>; value: number } | null;
}

export interface ExperimentDetailDto extends ExperimentSummary {
  runs: RunRow[];
  observations: ObservationDto[];
}

export interface LogRecordDto {
  experiment_id: string;
  run_id: string;
  stream: string;
  seq: number;
  timestamp: number;
  line: string;
  global_seq: number;
}

export interface EventDto {
  seq: number;
  ts: number;
  type: string;
  experiment_id: string;
  data: Record<string, unknown>;
}
