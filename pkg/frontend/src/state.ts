/**
 * Client-side view state: the regimen editor, measurement entry form, and the
 * comparison panel. All clinical numbers come from service payloads; the only
 * state here is which numbers the user is looking at or editing.
 */

import type { TForecast, TOptimizeResult, TSessionSummary } from "./api.js";

export const EDITABLE_DAYS = 14;

/** Editable daily doses with clamping to [0, uMax]; undo restores exactly. */
export class RegimenEditor {
  private days: number[];
  private readonly baseline: number[];

  constructor(
    initial: number[],
    public readonly uMax: number,
  ) {
    this.baseline = initial.slice(0, EDITABLE_DAYS);
    while (this.baseline.length < EDITABLE_DAYS) this.baseline.push(0);
    this.days = this.baseline.slice();
  }

  get doses(): readonly number[] {
    return this.days;
  }

  setDose(day: number, dose: number): number {
    if (day < 0 || day >= EDITABLE_DAYS) throw new RangeError(`day ${day} out of range`);
    const clamped = Math.min(Math.max(dose, 0), this.uMax);
    this.days[day] = clamped;
    return clamped;
  }

  reset(): void {
    this.days = this.baseline.slice();
  }

  loadFrom(doses: readonly number[]): void {
    for (let d = 0; d < EDITABLE_DAYS; d += 1) this.setDose(d, doses[d] ?? 0);
  }

  get dirty(): boolean {
    return this.days.some((v, i) => v !== this.baseline[i]);
  }

  /** Payload for forecast/decision calls: editable days followed by rest days. */
  toRegimen(totalDays = 21): number[] {
    const out = this.days.slice();
    while (out.length < totalDays) out.push(0);
    return out;
  }
}

export type ComparisonKind = "nominal" | "optimized" | "edited";

export interface ComparisonEntry {
  kind: ComparisonKind;
  label: string;
  doses: number[];
  meanCost: number | null;
  se: number | null;
  forecast: TForecast | null;
}

export interface SessionViewState {
  summary: TSessionSummary | null;
  configHash: string | null;
  stale: boolean;
  forecast: TForecast | null;
  optimization: TOptimizeResult | null;
  comparison: ComparisonEntry[];
  lastError: string | null;
  pendingJob: string | null;
}

export function initialState(): SessionViewState {
  return {
    summary: null,
    configHash: null,
    stale: false,
    forecast: null,
    optimization: null,
    comparison: [],
    lastError: null,
    pendingJob: null,
  };
}

export function loadSession(state: SessionViewState, summary: TSessionSummary): SessionViewState {
  return {
    ...state,
    summary,
    configHash: state.configHash ?? summary.config_hash,
    stale: state.configHash !== null && state.configHash !== summary.config_hash,
    lastError: null,
  };
}

/** A response carrying a different config hash means the session was rebuilt
 * behind our back; flag it instead of silently mixing numbers. */
export function checkHash(state: SessionViewState, hash: string): SessionViewState {
  if (state.configHash !== null && hash !== state.configHash) {
    return { ...state, stale: true };
  }
  return state;
}

export function nominalRegimen(summary: TSessionSummary): number[] {
  const n = summary.nominal_daily_dose_mg;
  const out: number[] = [];
  for (let d = 0; d < 21; d += 1) out.push(d < EDITABLE_DAYS ? n : 0);
  return out;
}

/** Assemble the three-way comparison panel; entries render in this order. */
export function buildComparison(
  summary: TSessionSummary,
  optimization: TOptimizeResult | null,
  editedDoses: number[] | null,
  forecasts: Partial<Record<ComparisonKind, TForecast>>,
): ComparisonEntry[] {
  const rows: ComparisonEntry[] = [
    {
      kind: "nominal",
      label: "Nominal 14-on / 7-off",
      doses: nominalRegimen(summary),
      meanCost: optimization?.nominal?.mean_cost ?? null,
      se: optimization?.nominal?.se ?? null,
      forecast: forecasts.nominal ?? null,
    },
  ];
  if (optimization) {
    rows.push({
      kind: "optimized",
      label: "Optimized",
      doses: optimization.winner.doses,
      meanCost: optimization.winner.mean_cost,
      se: optimization.winner.se,
      forecast: forecasts.optimized ?? null,
    });
  }
  if (editedDoses) {
    rows.push({
      kind: "edited",
      label: "Edited what-if",
      doses: editedDoses,
      meanCost: null,
      se: null,
      forecast: forecasts.edited ?? null,
    });
  }
  return rows;
}

/** Candidate table rows in exactly the order the service returned them. */
export function candidateTableRows(result: TOptimizeResult) {
  return result.candidates.map((row, index) => ({
    index,
    doses: row.doses,
    totalDose: row.total_dose,
    meanCost: row.mean_cost,
    se: row.se,
    isWinner: sameDoses(row.doses, result.winner.doses),
  }));
}

export function sameDoses(a: readonly number[], b: readonly number[]): boolean {
  return a.length === b.length && a.every((v, i) => v === b[i]);
}

export interface MeasurementForm {
  day: string;
  wbc: string;
  anc: string;
}

export type FormCheck =
  | { ok: true; day: number; wbc: number; anc: number }
  | { ok: false; message: string };

/** Local form validation; the service re-validates authoritatively. */
export function checkMeasurementForm(form: MeasurementForm, measuredDays: number[]): FormCheck {
  const day = Number(form.day);
  const wbc = Number(form.wbc);
  const anc = Number(form.anc);
  if (!Number.isInteger(day) || day < 0) return { ok: false, message: "day must be a nonnegative integer" };
  if (measuredDays.some((d) => d >= day)) {
    return { ok: false, message: `day must be after the last recorded day (${Math.max(...measuredDays)})` };
  }
  if (!(wbc > 0)) return { ok: false, message: "white-cell count must be positive" };
  if (!(anc > 0)) return { ok: false, message: "neutrophil count must be positive" };
  if (anc >= wbc) return { ok: false, message: "neutrophils cannot exceed total white cells" };
  return { ok: true, day, wbc, anc };
}
