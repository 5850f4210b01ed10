/**
 * Console wiring: one page, one session at a time.
 *
 * Workflow: create/open a session, enter measurements as they arrive, watch
 * the fit and forecast refresh, edit candidate doses, run the optimizer,
 * compare nominal vs optimized vs edited, record the decision.
 */

import { ApiError, DosewiseClient, type TForecast, type TOptimizeResult } from "./api.js";
import { bandChartSvg } from "./charts.js";
import { formatCells, formatCost, formatDose } from "./format.js";
import {
  EDITABLE_DAYS,
  RegimenEditor,
  buildComparison,
  candidateTableRows,
  checkMeasurementForm,
  initialState,
  loadSession,
  type SessionViewState,
} from "./state.js";

const baseUrl =
  (globalThis as { DOSEWISE_BASE_URL?: string }).DOSEWISE_BASE_URL ?? "http://127.0.0.1:8754";

export function mountConsole(root: HTMLElement, client = new DosewiseClient(baseUrl)) {
  let state: SessionViewState = initialState();
  let editor: RegimenEditor | null = null;
  let forecastTimer: ReturnType<typeof setTimeout> | null = null;
  const forecasts: { nominal?: TForecast; optimized?: TForecast; edited?: TForecast } = {};

  root.innerHTML = `
    <header><h1>dosewise console</h1>
      <p class="disclaimer">Research artifact: not for clinical use.</p>
      <div id="error-banner" hidden></div>
      <div id="stale-banner" hidden>Session configuration changed on the server; reload.</div>
    </header>
    <section id="session-box">
      <button id="new-session">New session</button>
      <span id="session-label">no session</span>
    </section>
    <section id="measure-box" hidden>
      <h2>Measurements</h2>
      <ul id="measure-log"></ul>
      <form id="measure-form">
        day <input name="day" size="3">
        WBC/L <input name="wbc" size="10">
        ANC/L <input name="anc" size="10">
        <button type="submit">enter</button>
      </form>
      <div id="theta-box"></div>
    </section>
    <section id="editor-box" hidden>
      <h2>Regimen (mg/day, days 1–14)</h2>
      <div id="day-cells"></div>
      <button id="reset-edit">undo edits</button>
    </section>
    <section id="chart-box" hidden>
      <h2>Forecast</h2>
      <div id="chart-wbc"></div>
      <div id="chart-anc"></div>
    </section>
    <section id="optimize-box" hidden>
      <h2>Optimization</h2>
      <button id="run-optimize">optimize remaining days</button>
      <span id="job-state"></span>
      <table id="candidate-table"></table>
      <div id="comparison"></div>
      <button id="record-decision" hidden>record selected regimen</button>
    </section>`;

  const el = <T extends HTMLElement>(id: string) => root.querySelector<T>(`#${id}`)!;

  function showError(err: unknown) {
    const banner = el<HTMLDivElement>("error-banner");
    banner.hidden = false;
    banner.textContent =
      err instanceof ApiError ? `${err.status}: ${err.body}` : String(err);
    const retry = document.createElement("button");
    retry.textContent = "dismiss";
    retry.onclick = () => (banner.hidden = true);
    banner.appendChild(retry);
  }

  function renderSession() {
    const s = state.summary;
    if (!s) return;
    el("session-label").textContent =
      `${s.session_id} (config ${s.config_hash}, day ${s.belief_day})`;
    el<HTMLElement>("stale-banner").hidden = !state.stale;
    el<HTMLElement>("measure-box").hidden = false;
    el<HTMLElement>("editor-box").hidden = false;
    el<HTMLElement>("chart-box").hidden = false;
    el<HTMLElement>("optimize-box").hidden = false;
    el("measure-log").innerHTML = s.measurements
      .map(
        (m) =>
          `<li>day ${m.day}: WBC ${formatCells(m.wbc)}, ANC ${formatCells(m.anc)}</li>`,
      )
      .join("");
    el("theta-box").innerHTML = Object.entries(s.theta_hat)
      .map(([k, v]) => `<span class="theta">${k}=${v.toPrecision(4)}</span>`)
      .join(" ");
  }

  function renderEditor() {
    if (!editor) return;
    const cells = el("day-cells");
    cells.innerHTML = "";
    editor.doses.forEach((dose, day) => {
      const input = document.createElement("input");
      input.size = 6;
      input.value = String(dose);
      input.dataset.day = String(day);
      input.onchange = () => {
        const v = editor!.setDose(day, Number(input.value));
        input.value = String(v);
        scheduleForecast();
      };
      cells.appendChild(input);
    });
  }

  function renderCharts(f: TForecast) {
    el("chart-wbc").innerHTML = bandChartSvg(f, "wbc", undefined, (v) => formatCells(v));
    el("chart-anc").innerHTML = bandChartSvg(f, "anc", undefined, (v) => formatCells(v));
  }

  function renderOptimization(result: TOptimizeResult) {
    const rows = candidateTableRows(result);
    el("candidate-table").innerHTML =
      `<tr><th>#</th><th>doses</th><th>total</th><th>cost</th><th>se</th></tr>` +
      rows
        .map(
          (r) =>
            `<tr class="${r.isWinner ? "winner" : ""}"><td>${r.index}</td>` +
            `<td>${r.doses.slice(0, EDITABLE_DAYS).map((d) => formatDose(d)).join(" ")}</td>` +
            `<td>${r.totalDose.toFixed(0)}</td><td>${formatCost(r.meanCost)}</td>` +
            `<td>${formatCost(r.se)}</td></tr>`,
        )
        .join("");
    if (state.summary) {
      const cmp = buildComparison(state.summary, result, editor?.toRegimen() ?? null, forecasts);
      el("comparison").innerHTML = cmp
        .map(
          (c) =>
            `<div class="cmp ${c.kind}"><b>${c.label}</b> ` +
            `${c.doses.slice(0, EDITABLE_DAYS).map((d) => formatDose(d)).join(" ")}` +
            (c.meanCost !== null ? ` cost ${formatCost(c.meanCost)}` : "") +
            `</div>`,
        )
        .join("");
    }
    el<HTMLButtonElement>("record-decision").hidden = false;
  }

  async function refreshForecast() {
    if (!state.summary || !editor) return;
    try {
      const f = await client.forecast(state.summary.session_id, editor.toRegimen());
      state = { ...state, forecast: f };
      forecasts.edited = f;
      renderCharts(f);
    } catch (err) {
      showError(err);
    }
  }

  function scheduleForecast(delayMs = 300) {
    if (forecastTimer) clearTimeout(forecastTimer);
    forecastTimer = setTimeout(() => void refreshForecast(), delayMs);
  }

  el<HTMLButtonElement>("new-session").onclick = async () => {
    try {
      const summary = await client.createSession({});
      state = loadSession(initialState(), summary);
      editor = new RegimenEditor(summary.current_regimen, summary.u_max_mg);
      renderSession();
      renderEditor();
      await refreshForecast();
    } catch (err) {
      showError(err);
    }
  };

  el<HTMLFormElement>("measure-form").onsubmit = async (ev) => {
    ev.preventDefault();
    if (!state.summary) return;
    const form = ev.target as HTMLFormElement;
    const data = new FormData(form);
    const check = checkMeasurementForm(
      {
        day: String(data.get("day") ?? ""),
        wbc: String(data.get("wbc") ?? ""),
        anc: String(data.get("anc") ?? ""),
      },
      state.summary.measurements.map((m) => m.day),
    );
    if (!check.ok) {
      showError(check.message);
      return;
    }
    try {
      await client.postMeasurement(state.summary.session_id, check.day, check.wbc, check.anc);
      const summary = await client.getSession(state.summary.session_id);
      state = loadSession(state, summary);
      renderSession();
      await refreshForecast();
      form.reset();
    } catch (err) {
      showError(err);
    }
  };

  el<HTMLButtonElement>("reset-edit").onclick = () => {
    editor?.reset();
    renderEditor();
    scheduleForecast(0);
  };

  el<HTMLButtonElement>("run-optimize").onclick = async () => {
    const summary = state.summary;
    if (!summary) return;
    try {
      el("job-state").textContent = "running…";
      const { job_id } = await client.startOptimize(summary.session_id);
      state = { ...state, pendingJob: job_id };
      const result = await client.waitOptimize(summary.session_id, job_id);
      state = { ...state, optimization: result, pendingJob: null };
      forecasts.optimized = await client.forecast(summary.session_id, result.winner.doses);
      forecasts.nominal = await client.forecast(summary.session_id, summary.current_regimen);
      el("job-state").textContent = "done";
      renderOptimization(result);
    } catch (err) {
      el("job-state").textContent = "failed";
      showError(err);
    }
  };

  el<HTMLButtonElement>("record-decision").onclick = async () => {
    if (!state.summary || !editor) return;
    try {
      const chosen = state.optimization?.winner.doses ?? editor.toRegimen();
      await client.recordDecision(state.summary.session_id, chosen, "console decision");
      const summary = await client.getSession(state.summary.session_id);
      state = loadSession(state, summary);
      renderSession();
    } catch (err) {
      showError(err);
    }
  };

  return {
    getState: () => state,
    getEditor: () => editor,
  };
}

if (typeof document !== "undefined" && document.getElementById("dosewise-root")) {
  mountConsole(document.getElementById("dosewise-root") as HTMLElement);
}
