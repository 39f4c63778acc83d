/**
 * Result grid plus the lineage question box.  Rows are clickable: selecting
 * one asks the server for that row's full derivation and opens the lineage
 * explorer next to the grid.
 */

import { el } from "../dom.js";
import { allowed } from "../gating.js";
import type { SessionViewModel } from "../viewmodel.js";
import { renderLineage } from "./lineage.js";

const SYSTEM_COLUMNS = new Set(["lid", "parent_lid", "ver_id"]);

export function renderResultGrid(vm: SessionViewModel): HTMLElement {
  const result = vm.result;
  if (!result) {
    return el("p", { "data-role": "result-empty" }, "no result loaded");
  }
  const visible = result.columns.filter(([name]) => !SYSTEM_COLUMNS.has(name));
  const header = el(
    "tr",
    {},
    ...visible.map(([name, type]) => el("th", { "data-column": name }, `${name} (${type})`)),
  );
  const body = result.rows.map((row) => {
    const cells = visible.map(([name]) => el("td", {}, String(row[name])));
    const tr = el(
      "tr",
      {
        "data-lid": String(row.lid),
        onclick: () => {
          void vm.selectRow(row.lid);
        },
      },
      ...cells,
    );
    if (vm.selectedLid === row.lid) {
      tr.setAttribute("data-selected", "true");
    }
    return tr;
  });
  return el(
    "table",
    { "data-role": "result-grid" },
    el("caption", {}, `${result.relation} (${result.rows.length} rows)`),
    el("thead", {}, header),
    el("tbody", {}, ...body),
  );
}

function renderAskBox(vm: SessionViewModel): HTMLElement {
  const input = el("input", {
    "data-role": "ask-input",
    type: "text",
    placeholder: "ask about this result, e.g. why is a row missing",
  }) as HTMLInputElement;
  const button = el(
    "button",
    {
      "data-action": "ask",
      disabled: !allowed("ask", vm.state),
      onclick: () => {
        const question = input.value.trim();
        if (question) {
          void vm.ask(question);
        }
      },
    },
    "Ask",
  );
  const log = el(
    "ul",
    { "data-role": "ask-log" },
    ...vm.askLog.map((entry) =>
      el(
        "li",
        { "data-category": entry.answer.category },
        el("p", { class: "question" }, entry.question),
        el("p", { class: "answer", "data-role": "ask-answer" }, entry.answer.answer),
      ),
    ),
  );
  return el("div", { "data-role": "ask-box" }, el("h3", {}, "Lineage Q&A"), input, button, log);
}

export function renderResultPanel(vm: SessionViewModel): HTMLElement {
  const parts: HTMLElement[] = [el("h2", {}, "Result"), renderResultGrid(vm)];
  if (vm.explanation && vm.selectedLid !== null) {
    parts.push(renderLineage(vm.explanation, vm.selectedLid));
  }
  parts.push(renderAskBox(vm));
  return el("section", { "data-prompt": "result", class: "panel" }, ...parts);
}
