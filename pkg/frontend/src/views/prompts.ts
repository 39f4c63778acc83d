/**
 * The per-state prompt panels. Exactly one of these is rendered at a time
 * (the view-model invariant); every button carries a data-action attribute
 * and is disabled unless the mirrored state machine allows that action, so
 * the UI can never issue a request the server would refuse.
 */

import { allowed } from "../gating.js";
import { el } from "../dom.js";
import type { SessionViewModel } from "../viewmodel.js";

function gatedButton(
  vm: SessionViewModel,
  action: Parameters<typeof allowed>[0],
  label: string,
  onClick: () => void,
  extra: Record<string, string> = {},
): HTMLButtonElement {
  return el(
    "button",
    {
      "data-action": action,
      disabled: !allowed(action, vm.state),
      onclick: () => onClick(),
      ...extra,
    },
    label,
  );
}

export function renderComposer(vm: SessionViewModel): HTMLElement {
  const input = el("textarea", {
    "data-role": "query-input",
    rows: 3,
    placeholder: "Ask a question about the data",
  });
  return el(
    "section",
    { "data-prompt": "composer", class: "panel" },
    el("h2", {}, "New query"),
    input,
    gatedButton(vm, "submit_query", "Submit", () => {
      const text = input.value.trim();
      if (text) void vm.submit(text);
    }),
  );
}

export function renderClarification(vm: SessionViewModel): HTMLElement {
  const input = el("input", { "data-role": "clarification-input", type: "text" });
  return el(
    "section",
    { "data-prompt": "clarification", class: "panel" },
    el("h2", {}, `Clarification (round ${vm.clarification?.round ?? "?"})`),
    el("p", { "data-role": "clarification-question" }, vm.clarification?.question ?? ""),
    input,
    gatedButton(vm, "answer_clarification", "Answer", () => {
      const text = input.value.trim();
      if (text) void vm.answer(text);
    }),
  );
}

export function renderSketch(vm: SessionViewModel): HTMLElement {
  const steps = vm.sketch?.sketch ?? [];
  const comments: HTMLInputElement[] = [];
  const items = steps.map((step, index) => {
    const comment = el("input", {
      "data-role": "step-comment",
      "data-step": String(index + 1),
      type: "text",
      placeholder: "correction (optional)",
    });
    comments.push(comment);
    return el("li", {}, el("span", { "data-role": "step-text" }, step), comment);
  });
  const submit = () => {
    const notes = comments
      .map((box, i) => ({ step: i + 1, text: box.value.trim() }))
      .filter((note) => note.text.length > 0);
    if (notes.length === 0) {
      void vm.approveSketch();
    } else {
      const feedback =
        notes.length === 1
          ? notes[0]!.text
          : notes.map((note) => `step ${note.step}: ${note.text}`).join("; ");
      void vm.reviseSketch(feedback);
    }
  };
  return el(
    "section",
    { "data-prompt": "sketch", class: "panel" },
    el(
      "h2",
      {},
      "Proposed steps ",
      el("span", { "data-role": "sketch-version" }, `v${vm.sketch?.version ?? "?"}`),
    ),
    el("p", {}, "Leave every box empty and press OK to approve, or comment on steps to request changes."),
    el("ol", { "data-role": "sketch-steps" }, ...items),
    gatedButton(vm, "sketch_decision", "OK", submit, { "data-role": "sketch-ok" }),
  );
}

export function renderPlanPrompt(vm: SessionViewModel): HTMLElement {
  return el(
    "section",
    { "data-prompt": "plan", class: "panel" },
    el("h2", {}, "Plan ready"),
    el(
      "p",
      {},
      `${vm.planNodeNames.length} nodes` +
        (vm.planReport ? `, approved after ${vm.planReport.report.iterations} iteration(s)` : ""),
    ),
    el(
      "ul",
      { "data-role": "plan-node-names" },
      ...vm.planNodeNames.map((name) => el("li", {}, name)),
    ),
    gatedButton(vm, "start_execution", "Run", () => void vm.run(), { "data-role": "run" }),
  );
}

export function renderFailure(vm: SessionViewModel): HTMLElement {
  return el(
    "section",
    { "data-prompt": "failure", class: "panel error" },
    el("h2", {}, "Session failed"),
    el("p", { "data-role": "failure" }, vm.error ?? "unknown failure"),
  );
}
