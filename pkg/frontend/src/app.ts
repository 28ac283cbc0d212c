import { ApiClient, ApiError } from './api.js';
import { ExperimentDetail } from './detail.js';
import { ColorAssigner, LogBuffer, liveRunCount, progressFraction } from './model.js';
import { EventFeed, LogFollower } from './stream.js';
import type { ExperimentSummary, LogRecordDto } from './types.js';

const api = new ApiClient();

const $ = (selector: string): HTMLElement => {
  const el = document.querySelector<HTMLElement>(selector);
  if (!el) throw new Error(`missing element: ${selector}`);
  return el;
};

function el(tag: string, className: string, text?: string): HTMLElement {
  const node = document.createElement(tag);
  node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

// -- list view ----------------------------------------------------------------

function renderList(experiments: ExperimentSummary[]): void {
  const tbody = $('#experiment-rows');
  tbody.replaceChildren();
  if (experiments.length === 0) {
    $('#empty-state').hidden = false;
    return;
  }
  $('#empty-state').hidden = true;
  for (const exp of experiments) {
    const row = el('tr', `state-${exp.state}`);
    const link = el('a', 'experiment-link', `${exp.name} (${exp.id})`);
    link.setAttribute('href', `#/experiments/${exp.id}`);
    row.appendChild(el('td', 'name')).appendChild(link);
    row.appendChild(el('td', 'state', exp.state));
    const pct = Math.round(progressFraction(exp) * 100);
    row.appendChild(el('td', 'progress', `${pct}%`));
    row.appendChild(el('td', 'live', String(liveRunCount(exp))));
    row.appendChild(el('td', 'best', exp.best ? exp.best.value.toPrecision(6) : '—'));
    tbody.appendChild(row);
  }
}

async function refreshList(): Promise<void> {
  try {
    renderList(await api.listExperiments());
    setBanner(null);
  } catch {
    setBanner('controller unreachable, retrying…');
  }
}

function setBanner(message: string | null): void {
  const banner = $('#banner');
  banner.hidden = message === null;
  banner.textContent = message ?? '';
}

// -- detail view ----------------------------------------------------------------

function renderChart(series: Array<number | null>): void {
  const svg = $('#best-chart');
  const points = series
    .map((v, i) => [i, v] as const)
    .filter((p): p is readonly [number, number] => p[1] !== null);
  if (points.length === 0) {
    svg.replaceChildren();
    return;
  }
  const width = 600;
  const height = 180;
  const pad = 10;
  const xs = points.map((p) => p[0]);
  const ys = points.map((p) => p[1]);
  const xMax = Math.max(...xs, 1);
  const yMin = Math.min(...ys);
  const yMax = Math.max(...ys);
  const ySpan = yMax - yMin || 1;
  const coords = points
    .map(([x, y]) => {
      const px = pad + (x / xMax) * (width - 2 * pad);
      const py = height - pad - ((y - yMin) / ySpan) * (height - 2 * pad);
      return `${px.toFixed(1)},${py.toFixed(1)}`;
    })
    .join(' ');
  const line = document.createElementNS('http://www.w3.org/2000/svg', 'polyline');
  line.setAttribute('points', coords);
  line.setAttribute('class', 'best-line');
  svg.replaceChildren(line);
}

let activeDetail: ExperimentDetail | null = null;
let activeFollower: LogFollower | null = null;

function renderDetail(detail: ExperimentDetail): void {
  const exp = detail.state.experiment;
  if (!exp) return;
  $('#detail-title').textContent = `${exp.name} (${exp.id})`;
  $('#detail-state').textContent = exp.state;
  $('#detail-state').className = `state state-${exp.state}`;
  const { completed, failed, total } = exp.budget;
  $('#detail-progress').textContent = `${completed + failed}/${total} observations (${failed} failed)`;
  $('#detail-best').textContent = exp.best
    ? `best ${exp.best.value.toPrecision(6)} at ${JSON.stringify(exp.best.assignment)}`
    : 'no successful observations yet';
  renderChart(detail.state.bestSeries);

  const stopButton = $('#stop-button') as HTMLButtonElement;
  stopButton.disabled = !detail.canStop;
  if (detail.state.lastKilled !== null) {
    $('#stop-result').textContent = `stopped, ${detail.state.lastKilled} runs killed`;
  }

  const tbody = $('#run-rows');
  tbody.replaceChildren();
  for (const run of exp.runs) {
    const row = el('tr', `state-${run.state}`);
    row.appendChild(el('td', 'run-id', run.run_id.slice(-6)));
    row.appendChild(el('td', 'state', run.state));
    row.appendChild(el('td', 'node', run.node_id ?? '—'));
    row.appendChild(el('td', 'duration', run.duration !== null ? `${run.duration.toFixed(2)}s` : '—'));
    tbody.appendChild(row);
  }
}

function appendLogLine(record: LogRecordDto, colors: ColorAssigner): void {
  const pane = $('#log-pane');
  const line = el('div', 'log-line');
  const prefix = el('span', 'log-prefix', `${record.run_id.slice(-6)} ${record.stream}| `);
  prefix.style.color = colors.colorFor(record.run_id);
  line.appendChild(prefix);
  line.appendChild(el('span', 'log-text', record.line));
  pane.appendChild(line);
  while (pane.childElementCount > 5000) pane.firstElementChild?.remove();
  pane.scrollTop = pane.scrollHeight;
}

async function openDetail(id: string): Promise<void> {
  closeDetail();
  $('#list-view').hidden = true;
  $('#detail-view').hidden = false;
  $('#log-pane').replaceChildren();
  $('#log-unavailable').hidden = true;
  $('#stop-result').textContent = '';

  const detail = new ExperimentDetail(api, id, () => renderDetail(detail));
  activeDetail = detail;
  await detail.refresh();

  const colors = new ColorAssigner();
  const buffer = new LogBuffer();
  const follower = new LogFollower(api, id, buffer, (record) => appendLogLine(record, colors));
  activeFollower = follower;
  follower.run().catch((e: unknown) => {
    if (e instanceof ApiError) {
      $('#log-unavailable').hidden = false;
      $('#log-unavailable').textContent = e.message;
    }
  });
}

function closeDetail(): void {
  activeFollower?.stop();
  activeFollower = null;
  activeDetail = null;
  $('#detail-view').hidden = true;
  $('#list-view').hidden = false;
}

// -- wiring ----------------------------------------------------------------

function route(): void {
  const match = location.hash.match(/^#\/experiments\/(.+)$/);
  if (match) {
    void openDetail(match[1]);
  } else {
    closeDetail();
    void refreshList();
  }
}

export function main(): void {
  $('#stop-button').addEventListener('click', () => {
    const detail = activeDetail;
    if (!detail || !detail.canStop) return;
    if (!window.confirm('Stop this experiment and kill all live runs?')) return;
    void detail.stop();
  });
  $('#back-link').addEventListener('click', (e) => {
    e.preventDefault();
    location.hash = '';
  });
  window.addEventListener('hashchange', route);

  const feed = new EventFeed(
    api,
    (event) => {
      if (activeDetail && event.experiment_id === activeDetail.id) {
        void activeDetail.refresh();
      } else if (!activeDetail) {
        void refreshList();
      }
    },
    (up) => setBanner(up ? null : 'controller unreachable, retrying…'),
  );
  void feed.run();
  route();
}

main();
