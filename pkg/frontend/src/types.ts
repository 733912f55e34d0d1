/** Shared payload shapes for the colorization service. */

export type StepKind = "global" | "local";

export interface StepSpec {
  kind: StepKind;
  target: string;
  anchor: string | null;
  control?: string | null;
  target_scale: number;
  enhance: boolean;
  thresholds?: [number, number, number, number];
  strength?: number;
}

export interface ServiceConfig {
  variant: string;
  image_size: number;
  f: number;
  grid: number;
  n_tokens: number;
  token_dim: number;
  vocabulary: string[];
  default_thresholds: [number, number, number, number];
  default_strength: number;
}

export interface HeatmapResponse {
  grid: number;
  d: number;
  m: number[][];
  partition: number[][];
  omega: number[][];
  heatmap_png: string;
}

export interface EncodeResponse {
  token_set_id: string;
  grid: number;
  dim: number;
}

export interface ManipulateResponse {
  token_set_id: string;
  heatmaps: { control: string; m: number[][]; partition: number[][] }[];
}

export interface SamplerPayload {
  steps?: number;
  gs?: number;
  sgs?: number;
  noise_level?: number;
  scheduler?: string;
  seed?: number;
  solver?: string;
  inject?: boolean;
  adain?: boolean;
}

export type JobStatus = "queued" | "running" | "done" | "failed";

export interface JobState {
  status: JobStatus;
  config?: Record<string, unknown>;
  result_png?: string;
  error?: string;
}

export type Thresholds = [number, number, number, number];
