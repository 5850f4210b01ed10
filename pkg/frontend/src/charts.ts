/**
 * Forecast-band chart geometry: maps service payload points to SVG
 * coordinates. Pure pixel mapping, no interpolation or smoothing: every
 * rendered vertex corresponds one-to-one to a payload value.
 */

import type { TForecast } from "./api.js";

export interface ChartBox {
  width: number;
  height: number;
  padLeft: number;
  padBottom: number;
  padTop: number;
  padRight: number;
}

export const DEFAULT_BOX: ChartBox = {
  width: 640,
  height: 280,
  padLeft: 64,
  padBottom: 28,
  padTop: 8,
  padRight: 8,
};

export interface BandGeometry {
  /** polyline points for the median, "x1,y1 x2,y2 ..." */
  median: string;
  /** closed polygon for the q10..q90 band */
  band: string;
  /** target-range overlay rectangle */
  target: { x: number; y: number; width: number; height: number };
  /** true when every q10 equals its q90: the band is a single curve */
  collapsed: boolean;
  xTicks: { x: number; label: string }[];
  yTicks: { y: number; value: number }[];
  /** the exact payload values behind each median vertex, for fidelity checks */
  medianValues: number[];
}

function scaleLinear(domain: [number, number], range: [number, number]) {
  const [d0, d1] = domain;
  const [r0, r1] = range;
  const span = d1 - d0 || 1;
  return (v: number) => r0 + ((v - d0) / span) * (r1 - r0);
}

export function bandGeometry(
  forecast: TForecast,
  series: "wbc" | "anc",
  box: ChartBox = DEFAULT_BOX,
): BandGeometry {
  const rows = forecast[series];
  const days = forecast.days;
  const [bandLo, bandHi] = forecast.band;
  const values = rows.flatMap((r) => [r.q10, r.q50, r.q90]);
  const lo = Math.min(...values, series === "anc" ? bandLo : Infinity);
  const hi = Math.max(...values, series === "anc" ? bandHi : -Infinity);
  const x = scaleLinear(
    [days[0] ?? 0, days[days.length - 1] ?? 1],
    [box.padLeft, box.width - box.padRight],
  );
  const y = scaleLinear([lo, hi], [box.height - box.padBottom, box.padTop]);

  const median = rows.map((r, i) => `${x(days[i] ?? 0)},${y(r.q50)}`).join(" ");
  const upper = rows.map((r, i) => `${x(days[i] ?? 0)},${y(r.q90)}`);
  const lower = rows
    .slice()
    .reverse()
    .map((r, i) => `${x(days[rows.length - 1 - i] ?? 0)},${y(r.q10)}`);
  const band = [...upper, ...lower].join(" ");
  const collapsed = rows.every((r) => r.q10 === r.q90);

  const yHi = y(bandHi);
  const yLo = y(bandLo);
  const target = {
    x: box.padLeft,
    y: Math.min(yHi, yLo),
    width: box.width - box.padLeft - box.padRight,
    height: Math.abs(yLo - yHi),
  };

  const xTicks = days
    .filter((d) => d % 7 === 0)
    .map((d) => ({ x: x(d), label: `d${d}` }));
  const nTicks = 4;
  const yTicks = Array.from({ length: nTicks + 1 }, (_, i) => {
    const v = lo + ((hi - lo) * i) / nTicks;
    return { y: y(v), value: v };
  });

  return { median, band, target, collapsed, xTicks, yTicks, medianValues: rows.map((r) => r.q50) };
}

/** Inline SVG for the band chart; rendering only, all numbers pre-computed. */
export function bandChartSvg(
  forecast: TForecast,
  series: "wbc" | "anc",
  box: ChartBox = DEFAULT_BOX,
  formatTick: (v: number) => string = (v) => v.toExponential(1),
): string {
  const g = bandGeometry(forecast, series, box);
  const ticksX = g.xTicks
    .map(
      (t) =>
        `<text x="${t.x}" y="${box.height - 8}" font-size="10" text-anchor="middle">${t.label}</text>`,
    )
    .join("");
  const ticksY = g.yTicks
    .map(
      (t) =>
        `<text x="${box.padLeft - 6}" y="${t.y + 3}" font-size="10" text-anchor="end">${formatTick(t.value)}</text>`,
    )
    .join("");
  return [
    `<svg viewBox="0 0 ${box.width} ${box.height}" role="img" data-series="${series}" data-collapsed="${g.collapsed}">`,
    `<rect x="${g.target.x}" y="${g.target.y}" width="${g.target.width}" height="${g.target.height}" fill="#b5e3b5" opacity="0.45" data-role="target-band"/>`,
    g.collapsed
      ? ""
      : `<polygon points="${g.band}" fill="#7aa6d8" opacity="0.35" data-role="quantile-band"/>`,
    `<polyline points="${g.median}" fill="none" stroke="#1f4e8c" stroke-width="1.5" data-role="median"/>`,
    ticksX,
    ticksY,
    `</svg>`,
  ].join("");
}
