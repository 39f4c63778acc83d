/**
 * Lineage explorer: a layered DAG of the selected row's derivation path
 * (one layer per topological depth), the per-field origin breakdown, and
 * the source files the walk terminated at.
 */

import { el, svgEl } from "../dom.js";
import type { RowExplanation } from "../protocol.js";

const BOX_W = 240;
const BOX_H = 34;
const GAP = 22;

export function renderLineageGraph(explanation: RowExplanation): SVGElement {
  const steps = explanation.path;
  const width = BOX_W + 20;
  const height = steps.length * (BOX_H + GAP) + 10;
  const svg = svgEl("svg", {
    "data-role": "lineage-graph",
    viewBox: `0 0 ${width} ${height}`,
    width,
    height,
  });
  steps.forEach((step, depth) => {
    const y = 5 + depth * (BOX_H + GAP);
    const group = svgEl("g", {});
    group.setAttribute("data-node", String(depth));
    group.setAttribute("data-function", step.function);
    group.setAttribute("data-depth", String(depth));
    const rect = svgEl("rect", {
      x: 10,
      y,
      width: BOX_W,
      height: BOX_H,
      rx: 6,
      class: `lineage-node ${step.granularity}`,
    });
    const label = svgEl("text", { x: 10 + BOX_W / 2, y: y + BOX_H / 2 + 4, "text-anchor": "middle" });
    label.textContent = `${step.function} v${step.ver_id}`;
    group.append(rect, label);
    svg.append(group);
    if (depth > 0) {
      const edge = svgEl("line", {
        x1: 10 + BOX_W / 2,
        y1: y - GAP,
        x2: 10 + BOX_W / 2,
        y2: y,
        class: "lineage-edge",
      });
      edge.setAttribute("data-edge", `${depth - 1}-${depth}`);
      svg.append(edge);
    }
  });
  return svg;
}

export function renderFieldBreakdown(explanation: RowExplanation): HTMLElement {
  const rows = Object.entries(explanation.fields).map(([name, origin]) => {
    let from: string;
    if (origin.origin === "stored") {
      from = `stored in ${origin.relation ?? "?"}`;
    } else if (origin.origin === "computed") {
      from = `computed by ${origin.function ?? "?"} v${origin.ver_id ?? "?"}`;
    } else {
      from = "origin unknown";
    }
    return el(
      "tr",
      { "data-field": name, "data-origin": origin.origin },
      el("td", {}, name),
      el("td", {}, String(origin.value)),
      el("td", {}, from),
    );
  });
  return el(
    "table",
    { "data-role": "field-breakdown" },
    el("thead", {}, el("tr", {}, el("th", {}, "field"), el("th", {}, "value"), el("th", {}, "origin"))),
    el("tbody", {}, ...rows),
  );
}

export function renderLineage(explanation: RowExplanation, lid: number): HTMLElement {
  return el(
    "section",
    { "data-role": "lineage-explorer", class: "panel" },
    el("h2", {}, `Derivation of row ${lid}`),
    renderLineageGraph(explanation),
    renderFieldBreakdown(explanation),
    el(
      "ul",
      { "data-role": "lineage-sources" },
      ...explanation.sources.map((uri) => el("li", {}, uri)),
    ),
  );
}
