/** Thin fetch client for the colorization service. */
import type {
  EncodeResponse,
  HeatmapResponse,
  JobState,
  ManipulateResponse,
  SamplerPayload,
  ServiceConfig,
  StepSpec,
  Thresholds,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly detail: unknown,
  ) {
    super(`service returned ${status}: ${JSON.stringify(detail)}`);
  }
}

type FetchLike = typeof fetch;

export class StudioApi {
  constructor(
    public readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = fetch,
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchImpl(`${this.baseUrl}${path}`, init);
    const body = await response.json().catch(() => ({}));
    if (!response.ok) {
      throw new ApiError(response.status, (body as { detail?: unknown }).detail ?? body);
    }
    return body as T;
  }

  config(): Promise<ServiceConfig> {
    return this.request<ServiceConfig>("/config");
  }

  encode(imageBase64: string): Promise<EncodeResponse> {
    return this.request<EncodeResponse>("/encode", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ image: imageBase64 }),
    });
  }

  heatmap(
    tokenSetId: string,
    control: string,
    ts: Thresholds,
    options: { target?: string; anchor?: string; target_scale?: number;
               enhance?: boolean; strength?: number } = {},
  ): Promise<HeatmapResponse> {
    const params = new URLSearchParams({
      tokens: tokenSetId,
      control,
      ts0: String(ts[0]),
      ts1: String(ts[1]),
      ts2: String(ts[2]),
      ts3: String(ts[3]),
    });
    for (const [key, value] of Object.entries(options)) {
      if (value !== undefined) params.set(key, String(value));
    }
    return this.request<HeatmapResponse>(`/heatmap?${params.toString()}`);
  }

  manipulate(tokenSetId: string, steps: StepSpec[]): Promise<ManipulateResponse> {
    return this.request<ManipulateResponse>("/manipulate", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ token_set_id: tokenSetId, steps }),
    });
  }

  colorize(
    sketchBase64: string,
    tokenSetId: string,
    config: SamplerPayload,
    referenceBase64?: string,
  ): Promise<{ job_id: string }> {
    return this.request<{ job_id: string }>("/colorize", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({
        sketch: sketchBase64,
        token_set_id: tokenSetId,
        config,
        reference: referenceBase64 ?? null,
      }),
    });
  }

  job(jobId: string): Promise<JobState> {
    return this.request<JobState>(`/jobs/${jobId}`);
  }
}
