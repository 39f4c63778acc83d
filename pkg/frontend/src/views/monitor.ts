/**
 * Execution monitor: per-stage status derived from the event log, and the
 * anomaly modal when the run is paused waiting for a decision.
 */

import { allowed } from "../gating.js";
import { el } from "../dom.js";
import type { EventWire } from "../protocol.js";
import type { SessionViewModel } from "../viewmodel.js";

export type StageStatus = "pending" | "running" | "done" | "flagged" | "failed";

export function stageStatuses(stages: string[], events: EventWire[]): Map<string, StageStatus> {
  const statuses = new Map<string, StageStatus>(stages.map((s) => [s, "pending"]));
  for (const event of events) {
    const stage = event.payload["stage"];
    if (typeof stage !== "string" || !statuses.has(stage)) continue;
    if (event.kind === "stage_started" || event.kind === "stage_rerun") {
      statuses.set(stage, "running");
    } else if (event.kind === "stage_completed") {
      statuses.set(stage, "done");
    } else if (event.kind === "anomaly") {
      statuses.set(stage, "flagged");
    } else if (event.kind === "run_failed") {
      statuses.set(stage, "failed");
    }
  }
  return statuses;
}

export function renderStageList(vm: SessionViewModel): HTMLElement {
  const statuses = stageStatuses(vm.stages, vm.events);
  return el(
    "ul",
    { "data-role": "stage-status" },
    ...vm.stages.map((stage) =>
      el(
        "li",
        { "data-stage": stage, "data-status": statuses.get(stage) ?? "pending" },
        `${stage}: ${statuses.get(stage) ?? "pending"}`,
      ),
    ),
  );
}

export function renderMonitor(vm: SessionViewModel): HTMLElement {
  return el(
    "section",
    { "data-prompt": "monitor", class: "panel" },
    el("h2", {}, "Executing"),
    el(
      "p",
      { "data-role": "connection" },
      vm.connection === "retrying" ? "connection lost, retrying" : "live",
    ),
    renderStageList(vm),
  );
}

export function renderAnomalyModal(vm: SessionViewModel): HTMLElement {
  const anomaly = vm.anomaly;
  const paramsBox = el(
    "textarea",
    { "data-role": "anomaly-params", rows: 2 },
    "{}",
  );
  const noteBox = el("input", { "data-role": "anomaly-note", type: "text", placeholder: "note (optional)" });
  const can = allowed("resolve_anomaly", vm.state);
  const resolve = (choice: string) => {
    let params: Record<string, unknown> | null = null;
    if (choice === "adjust") {
      try {
        params = JSON.parse(paramsBox.value || "{}") as Record<string, unknown>;
        paramsBox.removeAttribute("data-invalid");
      } catch {
        paramsBox.setAttribute("data-invalid", "true");
        return;
      }
    }
    void vm.resolveAnomaly(choice, params, noteBox.value.trim() || null);
  };
  const evidenceRows = (anomaly?.evidence ?? []).map((row) =>
    el("li", {}, JSON.stringify(row)),
  );
  const buttons = (anomaly?.options ?? ["accept", "adjust", "rewrite"]).map((choice) =>
    el(
      "button",
      {
        "data-action": "resolve_anomaly",
        "data-choice": choice,
        disabled: !can,
        onclick: () => resolve(choice),
      },
      choice,
    ),
  );
  return el(
    "section",
    { "data-prompt": "anomaly", "data-role": "anomaly-modal", class: "panel modal" },
    el("h2", {}, `Anomaly: ${anomaly?.rule ?? ""}`),
    el("p", { "data-role": "anomaly-stage" }, `stage ${anomaly?.stage ?? ""} v${anomaly?.ver_id ?? ""}`),
    el("p", { "data-role": "anomaly-detail" }, anomaly?.detail ?? ""),
    el("ul", { "data-role": "anomaly-evidence" }, ...evidenceRows),
    el("label", {}, "adjust params (JSON) ", paramsBox),
    noteBox,
    el("div", { class: "choices" }, ...buttons),
    renderStageList(vm),
  );
}
