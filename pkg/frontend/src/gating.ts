/**
 * The server's state machine, mirrored for control gating only.
 *
 * The UI consults this table to enable or disable controls; it never uses
 * it to predict outcomes. The table must list exactly the transitions the
 * server accepts, and the protocol-matrix test drives every pair against a
 * server to keep the two in lockstep.
 */

import type { SessionState } from "./protocol.js";

export const STATES: readonly SessionState[] = [
  "AwaitingQuery",
  "Clarifying",
  "SketchReview",
  "Planning",
  "Executing",
  "AnomalyPause",
  "Done",
  "Explaining",
  "Failed",
];

export type ActionName =
  | "submit_query"
  | "answer_clarification"
  | "sketch_decision"
  | "get_plan_report"
  | "start_execution"
  | "events"
  | "resolve_anomaly"
  | "get_result"
  | "explain"
  | "ask";

export const LEGAL: Record<ActionName, readonly SessionState[]> = {
  submit_query: ["AwaitingQuery"],
  answer_clarification: ["Clarifying"],
  sketch_decision: ["SketchReview"],
  get_plan_report: ["Planning", "Executing", "AnomalyPause", "Done", "Explaining", "Failed"],
  start_execution: ["Planning"],
  events: ["Executing", "AnomalyPause", "Done", "Explaining", "Failed"],
  resolve_anomaly: ["AnomalyPause"],
  get_result: ["Done", "Explaining"],
  explain: ["Done", "Explaining"],
  ask: ["Done", "Explaining"],
};

export function allowed(action: ActionName, state: SessionState): boolean {
  return LEGAL[action].includes(state);
}

/**
 * Which single panel carries the active call-to-action for a state.
 * Every state maps to exactly one prompt; that is the view-model invariant
 * the panel renderer enforces.
 */
export type Prompt =
  | "composer"
  | "clarification"
  | "sketch"
  | "plan"
  | "monitor"
  | "anomaly"
  | "result"
  | "failure";

const PROMPT_BY_STATE: Record<SessionState, Prompt> = {
  AwaitingQuery: "composer",
  Clarifying: "clarification",
  SketchReview: "sketch",
  Planning: "plan",
  Executing: "monitor",
  AnomalyPause: "anomaly",
  Done: "result",
  Explaining: "result",
  Failed: "failure",
};

export function activePrompt(state: SessionState): Prompt {
  return PROMPT_BY_STATE[state];
}
