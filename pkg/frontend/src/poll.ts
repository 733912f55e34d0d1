/** Poll a colorization job until it reaches a terminal state. */
import type { JobState } from "./types.js";

export interface JobSource {
  job(jobId: string): Promise<JobState>;
}

export class JobFailed extends Error {
  constructor(public readonly state: JobState) {
    super(state.error ?? "job failed");
  }
}

export class JobTimeout extends Error {}

const sleep = (ms: number) => new Promise((resolve) => setTimeout(resolve, ms));

export async function pollJob(
  api: JobSource,
  jobId: string,
  { intervalMs = 500, timeoutMs = 120_000 }: { intervalMs?: number; timeoutMs?: number } = {},
): Promise<JobState> {
  const deadline = Date.now() + timeoutMs;
  for (;;) {
    const state = await api.job(jobId);
    if (state.status === "done") return state;
    if (state.status === "failed") throw new JobFailed(state);
    if (Date.now() >= deadline) throw new JobTimeout(`job ${jobId} still ${state.status}`);
    await sleep(intervalMs);
  }
}
