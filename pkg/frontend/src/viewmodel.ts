/**
 * Session view model: everything the UI renders, kept in lockstep with the
 * server. All state here is a cached copy of server payloads; the only
 * client-side judgement is which single prompt is active, and that is a
 * pure function of the server-reported state.
 */

import { activePrompt, type Prompt } from "./gating.js";
import {
  ApiError,
  type AnomalyWire,
  type AskPayload,
  type BasePayload,
  type ClarifyPayload,
  type Client,
  type EventWire,
  type PlanReadyPayload,
  type PlanReportPayload,
  type ResultPayload,
  type RowExplanation,
  type SessionState,
  type SketchPayload,
} from "./protocol.js";

export interface ViewModelOptions {
  /** Injectable delay, so tests can run the polling loop synchronously. */
  sleep?: (ms: number) => Promise<void>;
  pollDelayMs?: number;
  backoffBaseMs?: number;
  backoffCapMs?: number;
  /** Where the session id is persisted for reconnects; null disables. */
  storage?: Pick<Storage, "getItem" | "setItem" | "removeItem"> | null;
}

const STORAGE_KEY = "prismdb.session_id";

function defaultSleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

export interface AskEntry {
  question: string;
  answer: AskPayload;
}

export class SessionViewModel {
  state: SessionState = "AwaitingQuery";
  sessionId: string | null = null;
  queryText = "";
  clarification: ClarifyPayload | null = null;
  clarificationLog: { question: string; answer: string }[] = [];
  sketch: SketchPayload | null = null;
  planNodeNames: string[] = [];
  planReport: PlanReportPayload | null = null;
  stages: string[] = [];
  events: EventWire[] = [];
  cursor = 0;
  runStatus: string | null = null;
  anomaly: AnomalyWire | null = null;
  result: ResultPayload | null = null;
  selectedLid: number | null = null;
  explanation: RowExplanation | null = null;
  askLog: AskEntry[] = [];
  error: string | null = null;
  connection: "idle" | "live" | "retrying" = "idle";
  retryCount = 0;

  private readonly sleep: (ms: number) => Promise<void>;
  private readonly pollDelayMs: number;
  private readonly backoffBaseMs: number;
  private readonly backoffCapMs: number;
  private readonly storage: Pick<Storage, "getItem" | "setItem" | "removeItem"> | null;
  private readonly listeners = new Set<() => void>();
  private polling = false;

  constructor(
    private readonly client: Client,
    options: ViewModelOptions = {},
  ) {
    this.sleep = options.sleep ?? defaultSleep;
    this.pollDelayMs = options.pollDelayMs ?? 150;
    this.backoffBaseMs = options.backoffBaseMs ?? 500;
    this.backoffCapMs = options.backoffCapMs ?? 8000;
    this.storage = options.storage === undefined
      ? (typeof sessionStorage === "undefined" ? null : sessionStorage)
      : options.storage;
  }

  get prompt(): Prompt {
    return activePrompt(this.state);
  }

  subscribe(listener: () => void): () => void {
    this.listeners.add(listener);
    return () => this.listeners.delete(listener);
  }

  private emit(): void {
    for (const listener of this.listeners) listener();
  }

  /** Wait until a predicate over the model holds; used heavily by tests. */
  waitFor(predicate: (vm: this) => boolean, timeoutMs = 30_000): Promise<void> {
    if (predicate(this)) return Promise.resolve();
    return new Promise((resolve, reject) => {
      const timer = setTimeout(() => {
        stop();
        reject(new Error(`timed out waiting; state=${this.state} error=${this.error}`));
      }, timeoutMs);
      const stop = this.subscribe(() => {
        if (predicate(this)) {
          clearTimeout(timer);
          stop();
          resolve();
        }
      });
    });
  }

  /** Create a session, or reattach to the one stored for this tab. */
  async start(): Promise<void> {
    const stored = this.storage?.getItem(STORAGE_KEY) ?? null;
    if (stored) {
      try {
        await this.reattach(stored);
        return;
      } catch {
        this.storage?.removeItem(STORAGE_KEY);
      }
    }
    const created = await this.client.createSession();
    this.sessionId = created.session_id;
    this.state = created.state;
    this.storage?.setItem(STORAGE_KEY, created.session_id);
    this.emit();
  }

  /** Rebuild local caches for an existing session from server state alone. */
  private async reattach(sid: string): Promise<void> {
    const snap = await this.client.snapshot(sid);
    this.sessionId = sid;
    this.state = snap.state;
    this.error = snap.error;
    if (["Planning", "Executing", "AnomalyPause", "Done", "Explaining", "Failed"].includes(snap.state)) {
      try {
        this.planReport = await this.client.planReport(sid);
        this.planNodeNames = this.planReport.plan.nodes.map((n) => n.name);
      } catch (exc) {
        if (!(exc instanceof ApiError && exc.status === 400)) throw exc;
      }
    }
    if (["Executing", "AnomalyPause", "Done", "Explaining", "Failed"].includes(snap.state)) {
      try {
        const payload = await this.client.events(sid, 0);
        this.applyEvents(payload.events);
        this.runStatus = payload.status;
        this.anomaly = payload.anomaly ?? null;
        this.state = payload.state;
      } catch (exc) {
        if (!(exc instanceof ApiError && exc.status === 400)) throw exc;
      }
    }
    if (this.state === "Done" || this.state === "Explaining") {
      this.result = await this.client.result(sid);
    }
    this.emit();
    if (this.state === "Executing") void this.poll();
  }

  private sid(): string {
    if (!this.sessionId) throw new Error("session not started");
    return this.sessionId;
  }

  private applyPhase(payload: BasePayload): void {
    this.state = payload.state;
    if (payload.state === "Clarifying") {
      this.clarification = payload as ClarifyPayload;
    } else if (payload.state === "SketchReview") {
      this.clarification = null;
      this.sketch = payload as SketchPayload;
    } else if (payload.state === "Planning") {
      this.sketch = null;
      const plan = (payload as PlanReadyPayload).plan;
      this.planNodeNames = plan?.nodes ?? [];
    }
    this.emit();
  }

  async submit(text: string): Promise<void> {
    this.queryText = text;
    this.applyPhase(await this.client.submitQuery(this.sid(), text));
  }

  async answer(text: string): Promise<void> {
    const question = this.clarification?.question ?? "";
    const payload = await this.client.answerClarification(this.sid(), text);
    this.clarificationLog.push({ question, answer: text });
    this.applyPhase(payload);
  }

  async approveSketch(): Promise<void> {
    this.applyPhase(await this.client.sketchDecision(this.sid(), "approve"));
    if (this.state === "Planning") await this.loadPlanReport();
  }

  async reviseSketch(feedback: string): Promise<void> {
    this.applyPhase(await this.client.sketchDecision(this.sid(), "revise", feedback));
  }

  async loadPlanReport(): Promise<void> {
    this.planReport = await this.client.planReport(this.sid());
    this.emit();
  }

  async run(): Promise<void> {
    const payload = await this.client.startExecution(this.sid());
    this.state = payload.state;
    this.stages = payload.stages;
    this.runStatus = "running";
    this.emit();
    await this.poll();
  }

  private applyEvents(incoming: EventWire[]): void {
    for (const event of incoming) {
      this.events.push(event);
      if (event.seq > this.cursor) this.cursor = event.seq;
    }
  }

  /**
   * Event subscription loop. Polls while the run is live, pauses on an
   * anomaly (resuming after the user resolves it), and reconnects with
   * exponential backoff when the server is unreachable.
   */
  async poll(): Promise<void> {
    if (this.polling) return;
    this.polling = true;
    let failures = 0;
    try {
      while (this.state === "Executing") {
        let payload;
        try {
          payload = await this.client.events(this.sid(), this.cursor);
        } catch (exc) {
          if (exc instanceof ApiError) {
            this.error = exc.detail;
            this.emit();
            return;
          }
          failures += 1;
          this.retryCount += 1;
          this.connection = "retrying";
          this.emit();
          const delay = Math.min(this.backoffBaseMs * 2 ** (failures - 1), this.backoffCapMs);
          await this.sleep(delay);
          continue;
        }
        failures = 0;
        this.connection = "live";
        this.applyEvents(payload.events);
        this.state = payload.state;
        this.runStatus = payload.status;
        this.anomaly = payload.anomaly ?? null;
        if (payload.state === "Failed") this.error = payload.error ?? "execution failed";
        this.emit();
        if (payload.state === "Executing") await this.sleep(this.pollDelayMs);
      }
      if (this.state === "Done") await this.loadResult();
    } finally {
      this.polling = false;
    }
  }

  async resolveAnomaly(
    choice: string,
    params?: Record<string, unknown> | null,
    note?: string | null,
  ): Promise<void> {
    const payload = await this.client.resolveAnomaly(this.sid(), choice, params, note);
    this.state = payload.state;
    this.anomaly = null;
    this.emit();
    if (this.state === "Executing") await this.poll();
    else if (this.state === "Done") await this.loadResult();
  }

  async loadResult(): Promise<void> {
    this.result = await this.client.result(this.sid());
    this.state = this.result.state;
    this.emit();
  }

  async selectRow(lid: number): Promise<void> {
    const payload = await this.client.explainRow(this.sid(), lid);
    this.selectedLid = lid;
    this.explanation = payload.explanation;
    this.state = payload.state;
    this.emit();
  }

  async ask(question: string): Promise<void> {
    const payload = await this.client.ask(this.sid(), question);
    this.askLog.push({ question, answer: payload });
    this.state = payload.state;
    this.emit();
  }
}
