/**
 * Ordered, editable manipulation stack. Serializes to the engine's step-file
 * format so every UI session can be replayed headlessly via the CLI.
 */
import type { StepSpec, Thresholds } from "./types.js";

export const DEFAULT_THRESHOLDS: Thresholds = [0.5, 0.55, 0.65, 0.95];
export const DEFAULT_STRENGTH = 2.0;
export const STEP_FILE_VERSION = 1;

export class StepValidationError extends Error {}

export function validateStep(step: StepSpec): void {
  if (step.kind !== "global" && step.kind !== "local") {
    throw new StepValidationError(`unknown step kind '${step.kind}'`);
  }
  if (!step.target || !step.target.trim()) {
    throw new StepValidationError("step needs a target text");
  }
  if (step.enhance && !step.anchor) {
    throw new StepValidationError("enhance requires an anchor text");
  }
  if (step.kind === "local") {
    if (!step.control || !step.control.trim()) {
      throw new StepValidationError("local steps need a control text");
    }
    const ts = step.thresholds ?? DEFAULT_THRESHOLDS;
    if (!(ts[0] >= 0 && ts[0] < ts[1] && ts[1] < ts[2] && ts[2] < ts[3] && ts[3] <= 1)) {
      throw new StepValidationError(`thresholds must be ordered in [0, 1], got ${ts}`);
    }
    if ((step.strength ?? DEFAULT_STRENGTH) <= 0) {
      throw new StepValidationError("strength must be > 0");
    }
  }
}

export class ManipulationStack {
  private steps: StepSpec[] = [];

  list(): readonly StepSpec[] {
    return this.steps;
  }

  get length(): number {
    return this.steps.length;
  }

  add(step: StepSpec): void {
    validateStep(step);
    this.steps.push({ ...step });
  }

  remove(index: number): void {
    this.checkIndex(index);
    this.steps.splice(index, 1);
  }

  update(index: number, step: StepSpec): void {
    this.checkIndex(index);
    validateStep(step);
    this.steps[index] = { ...step };
  }

  move(from: number, to: number): void {
    this.checkIndex(from);
    this.checkIndex(to);
    const [step] = this.steps.splice(from, 1);
    this.steps.splice(to, 0, step);
  }

  clear(): void {
    this.steps = [];
  }

  /** The engine's step-file JSON, byte-compatible with the CLI loader. */
  exportFile(): string {
    const steps = this.steps.map((s) => {
      const base: Record<string, unknown> = {
        kind: s.kind,
        target: s.target,
        anchor: s.anchor ?? null,
        target_scale: s.target_scale,
        enhance: s.enhance,
      };
      if (s.kind === "local") {
        base.control = s.control;
        base.thresholds = s.thresholds ?? DEFAULT_THRESHOLDS;
        base.strength = s.strength ?? DEFAULT_STRENGTH;
      }
      return base;
    });
    return JSON.stringify({ version: STEP_FILE_VERSION, steps }, null, 2) + "\n";
  }

  static importFile(text: string): ManipulationStack {
    const payload = JSON.parse(text) as { version: number; steps: StepSpec[] };
    const stack = new ManipulationStack();
    for (const step of payload.steps ?? []) {
      stack.add({
        kind: step.kind,
        target: step.target,
        anchor: step.anchor ?? null,
        control: step.control ?? null,
        target_scale: step.target_scale ?? 8.0,
        enhance: step.enhance ?? false,
        thresholds: step.thresholds ?? DEFAULT_THRESHOLDS,
        strength: step.strength ?? DEFAULT_STRENGTH,
      });
    }
    return stack;
  }

  /** Payload for POST /manipulate. */
  toRequestSteps(): StepSpec[] {
    return this.steps.map((s) => ({
      kind: s.kind,
      target: s.target,
      anchor: s.anchor ?? null,
      control: s.kind === "local" ? s.control : null,
      target_scale: s.target_scale,
      enhance: s.enhance,
      thresholds: s.thresholds ?? DEFAULT_THRESHOLDS,
      strength: s.strength ?? DEFAULT_STRENGTH,
    }));
  }

  private checkIndex(index: number): void {
    if (index < 0 || index >= this.steps.length) {
      throw new RangeError(`step index ${index} out of range`);
    }
  }
}
