/**
 * Typed client for the dosewise session service.
 *
 * Every response is validated against the schemas below before it reaches the
 * UI, so a rendered number always traces back to a validated service field.
 * Server errors are surfaced verbatim (status + body) for the retry banner.
 */

import { z } from "zod";

export const QuantileBand = z.object({
  q10: z.number(),
  q50: z.number(),
  q90: z.number(),
});

export const BeliefSummary = z.object({
  n_particles: z.number().int(),
  ess: z.number(),
  x_mean: z.array(z.number()).length(8),
  x_sd: z.array(z.number()).length(8),
  theta_mean: z.array(z.number()).length(8),
  anc_quantiles: QuantileBand,
  top_particles: z.array(
    z.object({ weight: z.number(), x: z.array(z.number()), theta: z.array(z.number()) }),
  ),
});

export const ThetaHat = z.record(z.string(), z.number());

export const MeasurementRow = z.object({
  day: z.number().int(),
  wbc: z.number(),
  anc: z.number(),
});

export const DecisionRow = z.object({
  regimen: z.array(z.number()),
  note: z.string(),
  recorded: z.string(),
  index: z.number().int(),
});

export const SessionSummary = z.object({
  session_id: z.string(),
  schema_version: z.number().int(),
  config_hash: z.string(),
  seed: z.number().int(),
  created: z.string(),
  updated: z.string(),
  bsa_m2: z.number(),
  nominal_daily_dose_mg: z.number(),
  u_max_mg: z.number(),
  band: z.tuple([z.number(), z.number()]),
  measurements: z.array(MeasurementRow),
  decisions: z.array(DecisionRow),
  theta_hat: ThetaHat,
  residuals: z.array(z.object({ day: z.number().int(), sq_residual: z.number() })),
  belief: BeliefSummary,
  belief_day: z.number().int(),
  current_regimen: z.array(z.number()),
});

export const MeasurementResponse = z.object({
  theta_hat: ThetaHat,
  belief: BeliefSummary,
  belief_day: z.number().int(),
  residuals: z.array(z.object({ day: z.number().int(), sq_residual: z.number() })),
});

export const ForecastResponse = z.object({
  from_day: z.number().int(),
  days: z.array(z.number().int()),
  wbc: z.array(QuantileBand),
  anc: z.array(QuantileBand),
  band: z.tuple([z.number(), z.number()]),
  regimen: z.array(z.number()),
});

export const CandidateRow = z.object({
  doses: z.array(z.number()),
  total_dose: z.number(),
  mean_cost: z.number(),
  se: z.number(),
  mean_perf: z.number().nullable(),
  mean_info: z.number().nullable(),
  mean_trace_sum: z.number().nullable(),
  mean_band_violation_hours: z.number().nullable(),
  evaluations: z.number().int(),
  excluded: z.number().int(),
});

export const OptimizeResult = z.object({
  winner: z.object({ doses: z.array(z.number()), mean_cost: z.number(), se: z.number() }),
  nominal: CandidateRow.nullable(),
  candidates: z.array(CandidateRow),
  from_day: z.number().int(),
  n_scenarios: z.number().int(),
});

export const JobStatus = z.object({
  status: z.enum(["running", "done", "error"]),
  result: OptimizeResult.nullable(),
  error: z.string().nullable(),
});

export const OptimizeAccepted = z.object({ job_id: z.string(), poll: z.string() });

export const DecisionResponse = z.object({
  acknowledged: z.boolean(),
  decision: DecisionRow,
});

export const ExportPayload = z.object({
  schema_version: z.number().int(),
  session: SessionSummary,
  config: z.record(z.string(), z.unknown()),
  replay: z.object({
    seed: z.number().int(),
    n_particles: z.number().int(),
    regimen: z.array(z.number()),
    note: z.string(),
  }),
});

export const Health = z.object({ status: z.string(), schema_version: z.number().int() });

export type TSessionSummary = z.infer<typeof SessionSummary>;
export type TForecast = z.infer<typeof ForecastResponse>;
export type TOptimizeResult = z.infer<typeof OptimizeResult>;
export type TCandidateRow = z.infer<typeof CandidateRow>;
export type TBeliefSummary = z.infer<typeof BeliefSummary>;
export type TJobStatus = z.infer<typeof JobStatus>;

/** The console only understands this service schema generation. */
export const SUPPORTED_SCHEMA_VERSION = 1;

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly body: string,
    public readonly url: string,
  ) {
    super(`HTTP ${status} from ${url}: ${body}`);
  }
}

export class SchemaMismatchError extends Error {
  constructor(public readonly serverVersion: number) {
    super(
      `service schema v${serverVersion} unsupported (console expects v${SUPPORTED_SCHEMA_VERSION})`,
    );
  }
}

type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export interface CreateSessionRequest {
  bsa_m2?: number;
  seed?: number;
  n_particles?: number;
  theta0_overrides?: Record<string, number>;
  zero_noise_demo?: boolean;
}

export class DosewiseClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = fetch,
  ) {}

  private async call<T>(
    schema: z.ZodType<T>,
    method: string,
    path: string,
    body?: unknown,
  ): Promise<T> {
    const url = `${this.baseUrl}${path}`;
    const resp = await this.fetchImpl(url, {
      method,
      headers: body === undefined ? undefined : { "content-type": "application/json" },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    const text = await resp.text();
    if (!resp.ok) throw new ApiError(resp.status, text, url);
    return schema.parse(JSON.parse(text));
  }

  async health() {
    const h = await this.call(Health, "GET", "/healthz");
    if (h.schema_version !== SUPPORTED_SCHEMA_VERSION) {
      throw new SchemaMismatchError(h.schema_version);
    }
    return h;
  }

  createSession(req: CreateSessionRequest = {}) {
    return this.call(SessionSummary, "POST", "/sessions", req);
  }

  getSession(id: string) {
    return this.call(SessionSummary, "GET", `/sessions/${id}`);
  }

  postMeasurement(id: string, day: number, wbc: number, anc: number, retryToken?: string) {
    return this.call(MeasurementResponse, "POST", `/sessions/${id}/measurements`, {
      day,
      wbc,
      anc,
      retry_token: retryToken,
    });
  }

  forecast(id: string, regimen: number[]) {
    return this.call(ForecastResponse, "POST", `/sessions/${id}/forecast`, { regimen });
  }

  startOptimize(id: string, nScenarios = 300, retryToken?: string) {
    return this.call(OptimizeAccepted, "POST", `/sessions/${id}/optimize`, {
      n_scenarios: nScenarios,
      retry_token: retryToken,
    });
  }

  pollJob(id: string, jobId: string) {
    return this.call(JobStatus, "GET", `/sessions/${id}/jobs/${jobId}`);
  }

  /** Poll until the optimization job leaves the running state. */
  async waitOptimize(
    id: string,
    jobId: string,
    opts: { intervalMs?: number; timeoutMs?: number } = {},
  ): Promise<TOptimizeResult> {
    const interval = opts.intervalMs ?? 250;
    const deadline = Date.now() + (opts.timeoutMs ?? 180_000);
    for (;;) {
      const job = await this.pollJob(id, jobId);
      if (job.status === "done" && job.result) return job.result;
      if (job.status === "error") throw new Error(`optimization failed: ${job.error}`);
      if (Date.now() > deadline) throw new Error("optimization timed out");
      await new Promise((r) => setTimeout(r, interval));
    }
  }

  recordDecision(id: string, regimen: number[], note = "", retryToken?: string) {
    return this.call(DecisionResponse, "POST", `/sessions/${id}/decisions`, {
      regimen,
      note,
      retry_token: retryToken,
    });
  }

  exportSession(id: string) {
    return this.call(ExportPayload, "GET", `/sessions/${id}/export`);
  }
}
