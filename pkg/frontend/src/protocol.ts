/**
 * Typed client for the session protocol.
 *
 * Every payload mirrors the server's JSON exactly; this module adds no
 * behavior beyond request plumbing and error mapping, so the UI stays a
 * pure view over server state.
 */

export type SessionState =
  | "AwaitingQuery"
  | "Clarifying"
  | "SketchReview"
  | "Planning"
  | "Executing"
  | "AnomalyPause"
  | "Done"
  | "Explaining"
  | "Failed";

export interface BasePayload {
  session_id: string;
  state: SessionState;
}

export interface ClarifyPayload extends BasePayload {
  term: string;
  question: string;
  round: number;
}

export interface SketchPayload extends BasePayload {
  sketch: string[];
  version: number;
}

export interface PlanReadyPayload extends BasePayload {
  plan: { nodes: string[] };
  iterations: number;
}

export interface PlanNodeWire {
  name: string;
  inputs: string[];
  output: { name: string; columns: [string, string][] };
  description: string;
}

export interface PhysicalStageWire {
  node: PlanNodeWire;
  func_id: string;
  ver_id: number;
  pattern: string;
  candidates: unknown[];
}

export interface PlanReportPayload extends BasePayload {
  plan: { nodes: PlanNodeWire[]; coverage: Record<string, string[]>; steps: string[] };
  report: { iterations: number; hints: Record<string, unknown> };
  physical: { stages: PhysicalStageWire[]; rewrites: RewriteWire[] } | null;
}

export interface RewriteWire {
  rule: string;
  [key: string]: unknown;
}

export interface ExecutePayload extends BasePayload {
  stages: string[];
}

export interface EventWire {
  seq: number;
  kind: string;
  payload: Record<string, unknown>;
  ts: number;
}

export interface AnomalyWire {
  anomaly_id: number;
  rule: string;
  stage: string;
  ver_id: number;
  detail: string;
  evidence: Record<string, unknown>[];
  options: string[];
}

export interface EventsPayload extends BasePayload {
  events: EventWire[];
  status: "running" | "paused" | "done" | "failed";
  anomaly?: AnomalyWire;
  error?: string;
}

export type ResultRow = Record<string, unknown> & { lid: number };

export interface ResultPayload extends BasePayload {
  relation: string;
  columns: [string, string][];
  rows: ResultRow[];
}

export interface FieldOrigin {
  value: unknown;
  origin: "stored" | "computed" | "unknown";
  relation?: string;
  function?: string;
  ver_id?: number;
  how?: string;
}

export interface RowExplanation {
  fields: Record<string, FieldOrigin>;
  path: { function: string; ver_id: number; granularity: string }[];
  sources: string[];
}

export interface ExplainPayload extends BasePayload {
  kind: string;
  explanation: RowExplanation;
}

export interface AskPayload extends BasePayload {
  category: string;
  answer: string;
  facts: Record<string, unknown>;
}

export interface SnapshotPayload {
  session_id: string;
  state: SessionState;
  error: string | null;
}

/** Error raised for any non-2xx response, carrying the server's verdict. */
export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly code: string,
    public readonly detail: string,
  ) {
    super(`${code}: ${detail}`);
    this.name = "ApiError";
  }
}

/** The surface the view model talks to; tests substitute a scripted fake. */
export interface Client {
  createSession(): Promise<{ session_id: string; state: SessionState }>;
  snapshot(sid: string): Promise<SnapshotPayload>;
  submitQuery(sid: string, text: string): Promise<ClarifyPayload | SketchPayload>;
  answerClarification(sid: string, answer: string): Promise<ClarifyPayload | SketchPayload>;
  sketchDecision(
    sid: string,
    action: "approve" | "revise",
    feedback?: string,
  ): Promise<SketchPayload | PlanReadyPayload>;
  planReport(sid: string): Promise<PlanReportPayload>;
  startExecution(sid: string): Promise<ExecutePayload>;
  events(sid: string, since: number): Promise<EventsPayload>;
  resolveAnomaly(
    sid: string,
    choice: string,
    params?: Record<string, unknown> | null,
    note?: string | null,
  ): Promise<BasePayload & { status: string }>;
  result(sid: string): Promise<ResultPayload>;
  explainRow(sid: string, lid: number): Promise<ExplainPayload>;
  ask(sid: string, question: string): Promise<AskPayload>;
}

export class HttpClient implements Client {
  constructor(private readonly base: string = "") {}

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const response = await fetch(this.base + path, {
      method,
      headers: body === undefined ? {} : { "content-type": "application/json" },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    const text = await response.text();
    let parsed: unknown = null;
    try {
      parsed = text ? JSON.parse(text) : null;
    } catch {
      parsed = null;
    }
    if (!response.ok) {
      const doc = (parsed ?? {}) as { error?: string; detail?: string };
      throw new ApiError(response.status, doc.error ?? "HttpError", doc.detail ?? text);
    }
    return parsed as T;
  }

  createSession() {
    return this.request<{ session_id: string; state: SessionState }>("POST", "/sessions");
  }

  snapshot(sid: string) {
    return this.request<SnapshotPayload>("GET", `/sessions/${sid}`);
  }

  submitQuery(sid: string, text: string) {
    return this.request<ClarifyPayload | SketchPayload>("POST", `/sessions/${sid}/query`, {
      text,
    });
  }

  answerClarification(sid: string, answer: string) {
    return this.request<ClarifyPayload | SketchPayload>(
      "POST",
      `/sessions/${sid}/clarification`,
      { answer },
    );
  }

  sketchDecision(sid: string, action: "approve" | "revise", feedback?: string) {
    return this.request<SketchPayload | PlanReadyPayload>("POST", `/sessions/${sid}/sketch`, {
      action,
      feedback: feedback ?? null,
    });
  }

  planReport(sid: string) {
    return this.request<PlanReportPayload>("GET", `/sessions/${sid}/plan`);
  }

  startExecution(sid: string) {
    return this.request<ExecutePayload>("POST", `/sessions/${sid}/execute`);
  }

  events(sid: string, since: number) {
    return this.request<EventsPayload>("GET", `/sessions/${sid}/events?since=${since}`);
  }

  resolveAnomaly(
    sid: string,
    choice: string,
    params?: Record<string, unknown> | null,
    note?: string | null,
  ) {
    return this.request<BasePayload & { status: string }>("POST", `/sessions/${sid}/anomaly`, {
      choice,
      params: params ?? null,
      note: note ?? null,
    });
  }

  result(sid: string) {
    return this.request<ResultPayload>("GET", `/sessions/${sid}/result`);
  }

  explainRow(sid: string, lid: number) {
    return this.request<ExplainPayload>("POST", `/sessions/${sid}/explain`, {
      kind: "row",
      lid,
    });
  }

  ask(sid: string, question: string) {
    return this.request<AskPayload>("POST", `/sessions/${sid}/ask`, { question });
  }
}
