/** Tiny dependency-free canvas renderers for the panel visualizations. */
import type { SeriesResult } from "./api.js";
import { fiveNumberSummary } from "./panels.js";

const PALETTE = ["#4d9de0", "#e15554", "#3bb273", "#e1bc29", "#7768ae", "#53b3cb"];

export interface NamedSeries {
  name: string;
  points: [number, number][];
}

export function seriesLabel(labels: Record<string, string>): string {
  const parts = Object.entries(labels)
    .filter(([k]) => k !== "__name__")
    .map(([k, v]) => `${k}=${v}`);
  const name = labels["__name__"];
  if (parts.length === 0) return name ?? "value";
  return (name ? `${name} ` : "") + parts.join(" ");
}

function prepareCanvas(canvas: HTMLCanvasElement): CanvasRenderingContext2D {
  const dpr = window.devicePixelRatio || 1;
  const { clientWidth, clientHeight } = canvas;
  canvas.width = clientWidth * dpr;
  canvas.height = clientHeight * dpr;
  const ctx = canvas.getContext("2d")!;
  ctx.setTransform(dpr, 0, 0, dpr, 0, 0);
  ctx.clearRect(0, 0, clientWidth, clientHeight);
  return ctx;
}

function extent(series: NamedSeries[]): { t0: number; t1: number; v0: number; v1: number } {
  let t0 = Infinity,
    t1 = -Infinity,
    v0 = Infinity,
    v1 = -Infinity;
  for (const s of series) {
    for (const [t, v] of s.points) {
      if (t < t0) t0 = t;
      if (t > t1) t1 = t;
      if (v < v0) v0 = v;
      if (v > v1) v1 = v;
    }
  }
  if (!Number.isFinite(t0)) return { t0: 0, t1: 1, v0: 0, v1: 1 };
  if (v0 === v1) {
    v0 -= 1;
    v1 += 1;
  }
  if (v0 > 0 && v0 < v1 * 0.33) v0 = 0; // anchor near-zero ranges at zero
  return { t0, t1: t1 === t0 ? t0 + 1 : t1, v0, v1 };
}

export function formatValue(v: number): string {
  if (Math.abs(v) >= 1e6) return (v / 1e6).toFixed(1) + "M";
  if (Math.abs(v) >= 1e3) return (v / 1e3).toFixed(1) + "k";
  if (Number.isInteger(v)) return String(v);
  return v.toPrecision(3);
}

export function renderLines(
  canvas: HTMLCanvasElement,
  series: NamedSeries[],
  fill: boolean,
): void {
  const ctx = prepareCanvas(canvas);
  const w = canvas.clientWidth;
  const h = canvas.clientHeight;
  const pad = { left: 46, right: 8, top: 8, bottom: 18 };
  const { t0, t1, v0, v1 } = extent(series);
  const x = (t: number) => pad.left + ((t - t0) / (t1 - t0)) * (w - pad.left - pad.right);
  const y = (v: number) => h - pad.bottom - ((v - v0) / (v1 - v0)) * (h - pad.top - pad.bottom);

  ctx.strokeStyle = "#2a2f3a";
  ctx.fillStyle = "#8a93a6";
  ctx.font = "10px sans-serif";
  for (let i = 0; i <= 4; i++) {
    const v = v0 + ((v1 - v0) * i) / 4;
    const yy = y(v);
    ctx.beginPath();
    ctx.moveTo(pad.left, yy);
    ctx.lineTo(w - pad.right, yy);
    ctx.stroke();
    ctx.fillText(formatValue(v), 2, yy + 3);
  }
  const t = new Date(t1);
  ctx.fillText(t.toLocaleTimeString(), w - pad.right - 60, h - 4);

  series.forEach((s, i) => {
    if (s.points.length === 0) return;
    const color = PALETTE[i % PALETTE.length]!;
    ctx.strokeStyle = color;
    ctx.lineWidth = 1.5;
    ctx.beginPath();
    s.points.forEach(([pt, pv], j) => {
      if (j === 0) ctx.moveTo(x(pt), y(pv));
      else ctx.lineTo(x(pt), y(pv));
    });
    ctx.stroke();
    if (fill) {
      const first = s.points[0]!;
      const last = s.points[s.points.length - 1]!;
      ctx.lineTo(x(last[0]), y(Math.max(v0, 0)));
      ctx.lineTo(x(first[0]), y(Math.max(v0, 0)));
      ctx.closePath();
      ctx.fillStyle = color + "22";
      ctx.fill();
    }
  });
}

export function renderLegend(parent: HTMLElement, series: NamedSeries[]): void {
  const legend = document.createElement("div");
  legend.className = "legend";
  series.forEach((s, i) => {
    const item = document.createElement("span");
    const swatch = document.createElement("i");
    swatch.style.background = PALETTE[i % PALETTE.length]!;
    item.append(swatch, s.name);
    legend.append(item);
  });
  parent.append(legend);
}

export function renderSingleStat(parent: HTMLElement, series: NamedSeries[], unit?: string): void {
  const stat = document.createElement("div");
  stat.className = "single-stat";
  const last = series
    .map((s) => s.points[s.points.length - 1])
    .filter((p): p is [number, number] => p !== undefined);
  stat.textContent = last.length > 0 ? formatValue(last[last.length - 1]![1]) : "no data";
  if (unit && last.length > 0) {
    const small = document.createElement("small");
    small.textContent = ` ${unit}`;
    stat.append(small);
  }
  parent.append(stat);
}

export function renderTable(parent: HTMLElement, series: NamedSeries[], unit?: string): void {
  const table = document.createElement("table");
  const rows = series
    .map((s) => {
      const last = s.points[s.points.length - 1];
      return { name: s.name, value: last ? last[1] : NaN };
    })
    .filter((r) => Number.isFinite(r.value))
    .sort((a, b) => b.value - a.value);
  if (rows.length === 0) {
    renderNoData(parent);
    return;
  }
  for (const row of rows) {
    const tr = document.createElement("tr");
    const name = document.createElement("td");
    name.textContent = row.name;
    const value = document.createElement("td");
    value.className = "num";
    value.textContent = formatValue(row.value) + (unit ? ` ${unit}` : "");
    tr.append(name, value);
    table.append(tr);
  }
  parent.append(table);
}

export function renderBoxplot(parent: HTMLElement, series: NamedSeries[], unit?: string): void {
  const values = series.flatMap((s) => s.points.map(([, v]) => v));
  const summary = fiveNumberSummary(values);
  if (summary === null) {
    renderNoData(parent);
    return;
  }
  const box = document.createElement("div");
  box.className = "boxplot";
  const span = summary.max - summary.min || 1;
  const pct = (v: number) => (100 * (v - summary.min)) / span;
  box.innerHTML =
    `<div class="whisker" style="left:${pct(summary.min)}%;width:${pct(summary.max) - pct(summary.min)}%"></div>` +
    `<div class="iqr" style="left:${pct(summary.q1)}%;width:${Math.max(0.5, pct(summary.q3) - pct(summary.q1))}%"></div>` +
    `<div class="median" style="left:${pct(summary.median)}%"></div>`;
  const caption = document.createElement("div");
  caption.className = "box-caption";
  caption.textContent =
    `min ${formatValue(summary.min)} · q1 ${formatValue(summary.q1)} · ` +
    `median ${formatValue(summary.median)} · q3 ${formatValue(summary.q3)} · ` +
    `max ${formatValue(summary.max)}${unit ? ` ${unit}` : ""} (n=${summary.count})`;
  parent.append(box, caption);
}

export function renderNoData(parent: HTMLElement): void {
  const div = document.createElement("div");
  div.className = "no-data";
  div.textContent = "no data";
  parent.append(div);
}

export function renderSeries(
  parent: HTMLElement,
  viz: string,
  series: NamedSeries[],
  unit?: string,
): void {
  parent.replaceChildren();
  const empty = series.every((s) => s.points.length === 0);
  if (empty) {
    renderNoData(parent);
    return;
  }
  if (viz === "single-stat") {
    renderSingleStat(parent, series, unit);
    return;
  }
  if (viz === "table") {
    renderTable(parent, series, unit);
    return;
  }
  if (viz === "boxplot") {
    renderBoxplot(parent, series, unit);
    return;
  }
  const canvas = document.createElement("canvas");
  canvas.className = "chart";
  parent.append(canvas);
  renderLines(canvas, series, viz === "area");
  renderLegend(parent, series);
}

/** Map raw results to named series for rendering. */
export function toNamedSeries(
  results: SeriesResult[],
  nameFn?: (labels: Record<string, string>) => string,
): NamedSeries[] {
  return results.map((r) => ({
    name: nameFn ? nameFn(r.labels) : seriesLabel(r.labels),
    points: r.points,
  }));
}
