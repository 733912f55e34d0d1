/**
 * Studio wiring: reference upload and encoding, live threshold tuning over
 * the m heatmap (client-side recoloring, no server round trip per slider
 * move), an omega preview curve, a sequential manipulation stack, queued
 * colorization with polling, and a before/after wipe comparison.
 */
import { StudioApi } from "./api.js";
import {
  clampThresholds,
  heatmapPixels,
  omegaCurve,
  partitionGrid,
  partitionPixels,
} from "./partition.js";
import { pollJob } from "./poll.js";
import { DEFAULT_STRENGTH, DEFAULT_THRESHOLDS, ManipulationStack, StepValidationError } from "./stack.js";
import type { HeatmapResponse, StepSpec, Thresholds } from "./types.js";

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as T;
};

const api = new StudioApi((window as { REFCOLOR_API?: string }).REFCOLOR_API ?? "");

const state = {
  tokenSetId: null as string | null,
  editedTokenSetId: null as string | null,
  referenceB64: null as string | null,
  sketchB64: null as string | null,
  heatmap: null as HeatmapResponse | null,
  thresholds: [...DEFAULT_THRESHOLDS] as Thresholds,
  strength: DEFAULT_STRENGTH,
  stack: new ManipulationStack(),
  beforePng: null as string | null,
  afterPng: null as string | null,
};

function banner(message: string, isError = false): void {
  const el = $("banner");
  el.textContent = message;
  el.className = isError ? "banner error" : "banner";
}

async function fileToBase64(file: File): Promise<string> {
  const buf = await file.arrayBuffer();
  let binary = "";
  for (const byte of new Uint8Array(buf)) binary += String.fromCharCode(byte);
  return btoa(binary);
}

function drawGrid(canvas: HTMLCanvasElement, pixels: Uint8ClampedArray, grid: number): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const image = new ImageData(pixels, grid, grid);
  const off = document.createElement("canvas");
  off.width = grid;
  off.height = grid;
  off.getContext("2d")?.putImageData(image, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.drawImage(off, 0, 0, canvas.width, canvas.height);
}

function redrawOverlay(): void {
  if (!state.heatmap) return;
  drawGrid($("heatmap-canvas"), heatmapPixels(state.heatmap.m), state.heatmap.grid);
  const partition = partitionGrid(state.heatmap.m, state.thresholds);
  drawGrid($("partition-canvas"), partitionPixels(partition), state.heatmap.grid);
  drawOmega();
}

function drawOmega(): void {
  if (!state.heatmap) return;
  const canvas = $<HTMLCanvasElement>("omega-canvas");
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const { m, w } = omegaCurve(state.heatmap.d, state.thresholds, state.strength);
  const lo = Math.min(...w, 0);
  const hi = Math.max(...w, 0);
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.strokeStyle = "#2166ac";
  ctx.beginPath();
  m.forEach((mv, i) => {
    const x = mv * canvas.width;
    const y = canvas.height - ((w[i] - lo) / (hi - lo || 1)) * canvas.height;
    i === 0 ? ctx.moveTo(x, y) : ctx.lineTo(x, y);
  });
  ctx.stroke();
  ctx.strokeStyle = "#999";
  for (const t of state.thresholds) {
    ctx.beginPath();
    ctx.moveTo(t * canvas.width, 0);
    ctx.lineTo(t * canvas.width, canvas.height);
    ctx.stroke();
  }
}

async function refreshHeatmap(): Promise<void> {
  if (!state.tokenSetId) return;
  const control = $<HTMLInputElement>("control-text").value.trim();
  if (!control) return;
  try {
    state.heatmap = await api.heatmap(state.tokenSetId, control, state.thresholds, {
      target: $<HTMLInputElement>("target-text").value.trim() || control,
      target_scale: Number($<HTMLInputElement>("target-scale").value),
      strength: state.strength,
    });
    redrawOverlay();
    banner(`heatmap for "${control}" (d = ${state.heatmap.d.toFixed(2)})`);
  } catch (err) {
    banner(`heatmap failed: ${err}`, true);
  }
}

function onSlider(index: number): void {
  const raw = state.thresholds.slice();
  raw[index] = Number($<HTMLInputElement>(`ts${index}`).value);
  state.thresholds = clampThresholds(raw, index);
  state.thresholds.forEach((v, i) => {
    $<HTMLInputElement>(`ts${i}`).value = String(v);
    $(`ts${i}-label`).textContent = v.toFixed(2);
  });
  redrawOverlay(); // client side only: instant
}

function currentStep(): StepSpec {
  const kind = $<HTMLSelectElement>("step-kind").value as StepSpec["kind"];
  return {
    kind,
    target: $<HTMLInputElement>("target-text").value.trim(),
    anchor: $<HTMLInputElement>("anchor-text").value.trim() || null,
    control: $<HTMLInputElement>("control-text").value.trim() || null,
    target_scale: Number($<HTMLInputElement>("target-scale").value),
    enhance: $<HTMLInputElement>("enhance-flag").checked,
    thresholds: [...state.thresholds] as Thresholds,
    strength: state.strength,
  };
}

function renderStack(): void {
  const list = $("stack-list");
  list.innerHTML = "";
  state.stack.list().forEach((step, i) => {
    const item = document.createElement("li");
    const label = step.kind === "global"
      ? `global "${step.target}"${step.anchor ? ` − "${step.anchor}"` : ""} @${step.target_scale}${step.enhance ? " (enhance)" : ""}`
      : `local "${step.target}" ctrl "${step.control}" @${step.target_scale}`;
    item.textContent = label;
    for (const [text, action] of [
      ["↑", () => i > 0 && state.stack.move(i, i - 1)],
      ["↓", () => i < state.stack.length - 1 && state.stack.move(i, i + 1)],
      ["✕", () => state.stack.remove(i)],
    ] as const) {
      const btn = document.createElement("button");
      btn.textContent = text;
      btn.addEventListener("click", () => {
        action();
        renderStack();
      });
      item.appendChild(btn);
    }
    list.appendChild(item);
  });
  $("stack-count").textContent = String(state.stack.length);
}

async function applyStack(): Promise<string> {
  if (!state.tokenSetId) throw new Error("encode a reference first");
  const response = await api.manipulate(state.tokenSetId, state.stack.toRequestSteps());
  state.editedTokenSetId = response.token_set_id;
  return response.token_set_id;
}

async function runColorize(): Promise<void> {
  if (!state.sketchB64) {
    banner("load a sketch first", true);
    return;
  }
  try {
    const tokenId = state.stack.length ? await applyStack() : state.tokenSetId;
    if (!tokenId) throw new Error("encode a reference first");
    const config = {
      steps: Number($<HTMLInputElement>("cfg-steps").value),
      gs: Number($<HTMLInputElement>("cfg-gs").value),
      sgs: Number($<HTMLInputElement>("cfg-sgs").value),
      noise_level: Number($<HTMLInputElement>("cfg-noise").value),
      seed: Number($<HTMLInputElement>("cfg-seed").value),
    };
    banner("colorizing…");
    const { job_id } = await api.colorize(state.sketchB64, tokenId, config);
    const job = await pollJob(api, job_id);
    state.beforePng = state.afterPng ?? state.beforePng;
    state.afterPng = job.result_png ?? null;
    renderComparison();
    banner(`job ${job_id} done`);
  } catch (err) {
    banner(`colorize failed: ${err}`, true);
  }
}

function renderComparison(): void {
  if (state.afterPng) $<HTMLImageElement>("after-img").src = `data:image/png;base64,${state.afterPng}`;
  if (state.beforePng) $<HTMLImageElement>("before-img").src = `data:image/png;base64,${state.beforePng}`;
  applyWipe();
}

function applyWipe(): void {
  const fraction = Number($<HTMLInputElement>("wipe").value) / 100;
  $("before-wrap").style.width = `${fraction * 100}%`;
}

function exportStack(): void {
  const blob = new Blob([state.stack.exportFile()], { type: "application/json" });
  const a = document.createElement("a");
  a.href = URL.createObjectURL(blob);
  a.download = "manipulation_steps.json";
  a.click();
  URL.revokeObjectURL(a.href);
}

export function wire(): void {
  $("reference-input").addEventListener("change", async (ev) => {
    const file = (ev.target as HTMLInputElement).files?.[0];
    if (!file) return;
    state.referenceB64 = await fileToBase64(file);
    $<HTMLImageElement>("reference-img").src = `data:image/png;base64,${state.referenceB64}`;
    try {
      const res = await api.encode(state.referenceB64);
      state.tokenSetId = res.token_set_id;
      banner(`reference encoded: ${res.token_set_id.slice(0, 12)}…`);
      await refreshHeatmap();
    } catch (err) {
      banner(`encode failed: ${err}`, true);
    }
  });
  $("sketch-input").addEventListener("change", async (ev) => {
    const file = (ev.target as HTMLInputElement).files?.[0];
    if (!file) return;
    state.sketchB64 = await fileToBase64(file);
    $<HTMLImageElement>("sketch-img").src = `data:image/png;base64,${state.sketchB64}`;
  });
  for (let i = 0; i < 4; i += 1) {
    $(`ts${i}`).addEventListener("input", () => onSlider(i));
  }
  $("strength").addEventListener("input", () => {
    state.strength = Number($<HTMLInputElement>("strength").value);
    $("strength-label").textContent = state.strength.toFixed(1);
    drawOmega();
  });
  $("refresh-heatmap").addEventListener("click", refreshHeatmap);
  $("add-step").addEventListener("click", () => {
    try {
      state.stack.add(currentStep());
      renderStack();
    } catch (err) {
      if (err instanceof StepValidationError) banner(err.message, true);
      else throw err;
    }
  });
  $("export-stack").addEventListener("click", exportStack);
  $("import-stack").addEventListener("change", async (ev) => {
    const file = (ev.target as HTMLInputElement).files?.[0];
    if (!file) return;
    state.stack = ManipulationStack.importFile(await file.text());
    renderStack();
  });
  $("colorize-btn").addEventListener("click", runColorize);
  $("wipe").addEventListener("input", applyWipe);
  api
    .config()
    .then((cfg) => banner(`connected: ${cfg.variant} model, ${cfg.n_tokens} tokens`))
    .catch(() => banner("service unreachable — start `refcolor serve` and reload", true));
}

if (typeof document !== "undefined" && document.getElementById("banner")) {
  wire();
}
