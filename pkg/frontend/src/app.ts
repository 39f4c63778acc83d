/**
 * Application shell.  The whole page re-renders from the view model on every
 * change; exactly one prompt panel is shown, chosen by the session state, so
 * the user always has a single active call to action that the server will
 * accept.
 */

import { el } from "./dom.js";
import type { Client } from "./protocol.js";
import { SessionViewModel, type ViewModelOptions } from "./viewmodel.js";
import {
  renderComposer,
  renderClarification,
  renderSketch,
  renderPlanPrompt,
  renderFailure,
} from "./views/prompts.js";
import { renderMonitor, renderAnomalyModal } from "./views/monitor.js";
import { renderPlanReport } from "./views/plan.js";
import { renderResultPanel } from "./views/result.js";

function renderPrompt(vm: SessionViewModel): HTMLElement {
  switch (vm.prompt) {
    case "composer":
      return renderComposer(vm);
    case "clarification":
      return renderClarification(vm);
    case "sketch":
      return renderSketch(vm);
    case "plan":
      return renderPlanPrompt(vm);
    case "monitor":
      return renderMonitor(vm);
    case "anomaly":
      return renderAnomalyModal(vm);
    case "result":
      return renderResultPanel(vm);
    case "failure":
      return renderFailure(vm);
  }
}

function renderTranscript(vm: SessionViewModel): HTMLElement | null {
  if (!vm.queryText && vm.clarificationLog.length === 0) {
    return null;
  }
  const items: HTMLElement[] = [];
  if (vm.queryText) {
    items.push(el("li", { "data-entry": "query" }, vm.queryText));
  }
  for (const entry of vm.clarificationLog) {
    items.push(
      el(
        "li",
        { "data-entry": "clarification" },
        el("span", { class: "question" }, entry.question),
        el("span", { class: "answer" }, ` ${entry.answer}`),
      ),
    );
  }
  return el(
    "section",
    { "data-role": "transcript", class: "panel" },
    el("h2", {}, "Conversation"),
    el("ul", {}, ...items),
  );
}

function renderEventLog(vm: SessionViewModel): HTMLElement | null {
  if (vm.events.length === 0) {
    return null;
  }
  const items = vm.events.map((event) =>
    el(
      "li",
      { "data-event-kind": event.kind, "data-seq": String(event.seq) },
      `${event.seq}. ${event.kind} ${JSON.stringify(event.payload)}`,
    ),
  );
  return el(
    "section",
    { "data-role": "event-log", class: "panel" },
    el("h2", {}, "Execution events"),
    el("ul", {}, ...items),
  );
}

function renderHeader(vm: SessionViewModel): HTMLElement {
  const parts: HTMLElement[] = [
    el("h1", {}, "Query workbench"),
    el("span", { "data-role": "state", class: "badge" }, vm.state),
  ];
  if (vm.sessionId) {
    parts.push(el("span", { "data-role": "session-id", class: "badge" }, vm.sessionId));
  }
  return el("header", {}, ...parts);
}

function render(root: HTMLElement, vm: SessionViewModel): void {
  root.replaceChildren();
  root.append(renderHeader(vm));
  if (vm.error && vm.state !== "Failed") {
    root.append(el("p", { "data-role": "error", class: "error" }, vm.error));
  }
  const transcript = renderTranscript(vm);
  if (transcript) {
    root.append(transcript);
  }
  root.append(renderPrompt(vm));
  if (vm.planReport) {
    root.append(renderPlanReport(vm.planReport));
  }
  const log = renderEventLog(vm);
  if (log) {
    root.append(log);
  }
}

export interface App {
  vm: SessionViewModel;
  root: HTMLElement;
}

export function mountApp(root: HTMLElement, client: Client, options: ViewModelOptions = {}): App {
  const vm = new SessionViewModel(client, options);
  vm.subscribe(() => {
    render(root, vm);
  });
  render(root, vm);
  return { vm, root };
}
