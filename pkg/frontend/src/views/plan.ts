/**
 * Plan report viewer: the logical nodes, the rewrites that fired while the
 * optimizer searched, and the function version each physical stage chose.
 */

import { el } from "../dom.js";
import type { PlanReportPayload, RewriteWire } from "../protocol.js";

function renderNodes(report: PlanReportPayload): HTMLElement {
  const rows = report.plan.nodes.map((node) =>
    el(
      "tr",
      { "data-plan-node": node.name },
      el("td", {}, node.name),
      el("td", {}, node.inputs.join(", ")),
      el("td", {}, node.output.name),
      el("td", {}, node.description),
    ),
  );
  return el(
    "table",
    { "data-role": "plan-nodes" },
    el(
      "thead",
      {},
      el("tr", {}, el("th", {}, "node"), el("th", {}, "inputs"), el("th", {}, "output"), el("th", {}, "description")),
    ),
    el("tbody", {}, ...rows),
  );
}

function describeRewrite(rw: RewriteWire): string {
  const extras = Object.entries(rw)
    .filter(([key]) => key !== "rule")
    .map(([key, value]) => `${key}=${Array.isArray(value) ? value.join("+") : String(value)}`);
  return extras.join(" ");
}

function renderRewrites(report: PlanReportPayload): HTMLElement {
  const rewrites = report.physical?.rewrites ?? [];
  if (rewrites.length === 0) {
    return el("p", { "data-role": "plan-rewrites-empty" }, "no rewrites applied");
  }
  return el(
    "ul",
    { "data-role": "plan-rewrites" },
    ...rewrites.map((rw) =>
      el("li", { "data-rule": rw.rule }, el("strong", {}, rw.rule), ` ${describeRewrite(rw)}`),
    ),
  );
}

function renderStages(report: PlanReportPayload): HTMLElement {
  const stages = report.physical?.stages ?? [];
  const rows = stages.map((stage) =>
    el(
      "tr",
      { "data-plan-stage": stage.node.name },
      el("td", {}, stage.node.name),
      el("td", {}, stage.func_id),
      el("td", { "data-role": "chosen-version" }, `v${stage.ver_id}`),
      el("td", {}, stage.pattern),
      el("td", {}, String(stage.candidates.length)),
    ),
  );
  return el(
    "table",
    { "data-role": "plan-stages" },
    el(
      "thead",
      {},
      el(
        "tr",
        {},
        el("th", {}, "stage"),
        el("th", {}, "function"),
        el("th", {}, "version"),
        el("th", {}, "pattern"),
        el("th", {}, "candidates"),
      ),
    ),
    el("tbody", {}, ...rows),
  );
}

export function renderPlanReport(report: PlanReportPayload): HTMLElement {
  const steps = Object.keys(report.plan.coverage).length;
  return el(
    "section",
    { "data-role": "plan-report", class: "panel" },
    el("h2", {}, "Plan report"),
    el(
      "p",
      { "data-role": "plan-summary" },
      `${report.plan.nodes.length} nodes covering ${steps} sketch steps, ` +
        `${report.report.iterations} planning iteration${report.report.iterations === 1 ? "" : "s"}`,
    ),
    renderNodes(report),
    el("h3", {}, "Rewrites"),
    renderRewrites(report),
    el("h3", {}, "Chosen versions"),
    renderStages(report),
  );
}
