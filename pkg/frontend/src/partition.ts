/**
 * Client-side mirror of the engine's five-interval weight map so slider
 * feedback never needs a server round trip. Formula-identical to the
 * engine's implementation; parity is pinned by shared test vectors.
 */
import type { Thresholds } from "./types.js";

export const MIN_GAP = 0.01;

/** Interval index (0..4) under the closed-left boundary convention. */
export function intervalIndex(m: number, ts: Thresholds): number {
  const [ts0, ts1, ts2, ts3] = ts;
  if (m <= ts0) return 0;
  if (m <= ts1) return 1;
  if (m <= ts2) return 2;
  if (m <= ts3) return 3;
  return 4;
}

export function partitionGrid(m: number[][], ts: Thresholds): number[][] {
  return m.map((row) => row.map((v) => intervalIndex(v, ts)));
}

/** The piecewise-linear edit weight for one correlation value. */
export function omega(m: number, d: number, ts: Thresholds, r: number): number {
  const [ts0, ts1, ts2, ts3] = ts;
  if (m <= ts0) return -d * r;
  if (m <= ts1) return -d * r + (d * r * (m - ts0)) / (ts1 - ts0);
  if (m <= ts2) return (0.5 * d * (m - ts1)) / (ts2 - ts1);
  if (m <= ts3) return 0.5 * d + (0.5 * d * (m - ts2)) / (ts3 - ts2);
  return d;
}

export function omegaCurve(
  d: number,
  ts: Thresholds,
  r: number,
  samples = 201,
): { m: number[]; w: number[] } {
  const m = Array.from({ length: samples }, (_, i) => i / (samples - 1));
  return { m, w: m.map((v) => omega(v, d, ts, r)) };
}

/**
 * Keep sliders strictly ordered: moving one threshold pushes neighbours
 * ahead of it rather than ever collapsing two thresholds onto one value.
 */
export function clampThresholds(ts: number[], movedIndex: number): Thresholds {
  const out = ts.slice() as [number, number, number, number];
  out[movedIndex] = Math.min(1, Math.max(0, out[movedIndex]));
  for (let i = movedIndex + 1; i < 4; i += 1) {
    if (out[i] < out[i - 1] + MIN_GAP) out[i] = out[i - 1] + MIN_GAP;
  }
  for (let i = movedIndex - 1; i >= 0; i -= 1) {
    if (out[i] > out[i + 1] - MIN_GAP) out[i] = out[i + 1] - MIN_GAP;
  }
  // keep everything inside [0, 1] even after pushing
  for (let i = 3; i >= 0; i -= 1) {
    if (out[i] > 1 - (3 - i) * MIN_GAP) out[i] = 1 - (3 - i) * MIN_GAP;
  }
  for (let i = 0; i < 4; i += 1) {
    if (out[i] < i * MIN_GAP) out[i] = i * MIN_GAP;
  }
  return out;
}

export function validThresholds(ts: number[]): ts is Thresholds {
  return (
    ts.length === 4 &&
    ts[0] >= 0 &&
    ts[0] < ts[1] &&
    ts[1] < ts[2] &&
    ts[2] < ts[3] &&
    ts[3] <= 1
  );
}

/** Interval palette used to recolor the partition mask client-side. */
export const INTERVAL_COLORS: [number, number, number][] = [
  [33, 102, 172], // strongest opposite edit
  [103, 169, 207],
  [247, 247, 247], // neutral band
  [239, 138, 98],
  [178, 24, 43], // full-strength edit
];

/** RGBA buffer (grid*grid*4) recoloring a partition for canvas blitting. */
export function partitionPixels(partition: number[][], alpha = 200): Uint8ClampedArray {
  const g = partition.length;
  const out = new Uint8ClampedArray(g * g * 4);
  for (let y = 0; y < g; y += 1) {
    for (let x = 0; x < g; x += 1) {
      const [r, gg, b] = INTERVAL_COLORS[partition[y][x]];
      const o = (y * g + x) * 4;
      out[o] = r;
      out[o + 1] = gg;
      out[o + 2] = b;
      out[o + 3] = alpha;
    }
  }
  return out;
}

/** Viridis-like ramp for rendering the raw m grid. */
export function valueToViridis(v: number): [number, number, number] {
  const stops: [number, [number, number, number]][] = [
    [0.0, [68, 1, 84]],
    [0.25, [59, 82, 139]],
    [0.5, [33, 145, 140]],
    [0.75, [94, 201, 98]],
    [1.0, [253, 231, 37]],
  ];
  const t = Math.min(1, Math.max(0, v));
  for (let i = 1; i < stops.length; i += 1) {
    if (t <= stops[i][0]) {
      const [t0, c0] = stops[i - 1];
      const [t1, c1] = stops[i];
      const f = (t - t0) / (t1 - t0);
      return [
        Math.round(c0[0] + f * (c1[0] - c0[0])),
        Math.round(c0[1] + f * (c1[1] - c0[1])),
        Math.round(c0[2] + f * (c1[2] - c0[2])),
      ];
    }
  }
  return stops[stops.length - 1][1];
}

export function heatmapPixels(m: number[][]): Uint8ClampedArray {
  const g = m.length;
  const out = new Uint8ClampedArray(g * g * 4);
  for (let y = 0; y < g; y += 1) {
    for (let x = 0; x < g; x += 1) {
      const [r, gg, b] = valueToViridis(m[y][x]);
      const o = (y * g + x) * 4;
      out[o] = r;
      out[o + 1] = gg;
      out[o + 2] = b;
      out[o + 3] = 255;
    }
  }
  return out;
}
