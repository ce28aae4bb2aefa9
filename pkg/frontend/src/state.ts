/**
 * Pure view-state reducers for the chat and admin screens.
 *
 * Streaming tokens are appended in arrival order and citation chips mirror
 * the server's citation events one-to-one, so what the user sees is exactly
 * what the service emitted.
 */

import type { CostInfo, DailyMetrics, DoneEvent, RecordPayload } from "./api.js";

export interface ChatMessage {
  role: "user" | "assistant";
  text: string;
  streaming: boolean;
  citations: string[];
  refused: boolean;
  needsClarification: boolean;
  recordId: string | null;
}

export interface ChatViewState {
  sessionId: string | null;
  messages: ChatMessage[];
  pendingClarification: boolean;
  streamError: string | null;
  expandedCitation: { unitId: string; text: string } | null;
}

export function initialChatState(): ChatViewState {
  return {
    sessionId: null,
    messages: [],
    pendingClarification: false,
    streamError: null,
    expandedCitation: null,
  };
}

export function setSession(state: ChatViewState, sessionId: string): ChatViewState {
  return { ...state, sessionId };
}

/** User pressed send: append their turn plus an empty streaming reply. */
export function beginUserTurn(state: ChatViewState, text: string): ChatViewState {
  const user: ChatMessage = {
    role: "user",
    text,
    streaming: false,
    citations: [],
    refused: false,
    needsClarification: false,
    recordId: null,
  };
  const assistant: ChatMessage = { ...user, role: "assistant", text: "", streaming: true };
  return {
    ...state,
    messages: [...state.messages, user, assistant],
    pendingClarification: false,
    streamError: null,
    expandedCitation: null,
  };
}

function updateStreamingMessage(
  state: ChatViewState,
  update: (message: ChatMessage) => ChatMessage,
): ChatViewState {
  const messages = [...state.messages];
  for (let i = messages.length - 1; i >= 0; i--) {
    if (messages[i].role === "assistant" && messages[i].streaming) {
      messages[i] = update(messages[i]);
      return { ...state, messages };
    }
  }
  return state;
}

export function applyToken(state: ChatViewState, text: string): ChatViewState {
  return updateStreamingMessage(state, (m) => ({ ...m, text: m.text + text }));
}

export function applyCitation(state: ChatViewState, unitId: string): ChatViewState {
  return updateStreamingMessage(state, (m) => ({ ...m, citations: [...m.citations, unitId] }));
}

export function applyDone(state: ChatViewState, done: DoneEvent): ChatViewState {
  const next = updateStreamingMessage(state, (m) => ({
    ...m,
    streaming: false,
    refused: done.refused,
    needsClarification: done.needs_clarification,
    recordId: done.record_id,
  }));
  return { ...next, pendingClarification: done.needs_clarification };
}

/** Stream dropped: keep the partial text, surface a retry banner. */
export function applyStreamError(state: ChatViewState, message: string): ChatViewState {
  const next = updateStreamingMessage(state, (m) => ({ ...m, streaming: false }));
  return { ...next, streamError: message };
}

/** Recovery after a drop: replace the partial text with the fetched record. */
export function applyRecoveredRecord(state: ChatViewState, record: RecordPayload): ChatViewState {
  const messages = [...state.messages];
  for (let i = messages.length - 1; i >= 0; i--) {
    if (messages[i].role === "assistant") {
      messages[i] = {
        ...messages[i],
        text: record.answer,
        citations: [...record.citations],
        refused: record.refused,
        streaming: false,
        recordId: record.record_id,
      };
      break;
    }
  }
  return { ...state, messages, streamError: null };
}

export function expandCitation(
  state: ChatViewState,
  unitId: string,
  text: string,
): ChatViewState {
  return { ...state, expandedCitation: { unitId, text } };
}

export interface AdminViewState {
  adminToken: string | null;
  days: DailyMetrics[];
  queue: RecordPayload[];
  cost: CostInfo | null;
  error: string | null;
}

export function initialAdminState(): AdminViewState {
  return { adminToken: null, days: [], queue: [], cost: null, error: null };
}

export function applyMetrics(state: AdminViewState, days: DailyMetrics[]): AdminViewState {
  return { ...state, days, error: null };
}

export function applyQueue(state: AdminViewState, queue: RecordPayload[]): AdminViewState {
  return { ...state, queue };
}

export function applyCost(state: AdminViewState, cost: CostInfo): AdminViewState {
  return { ...state, cost };
}

export function applyVerdictLocally(
  state: AdminViewState,
  recordId: string,
  verdict: "correct" | "incorrect",
): AdminViewState {
  return {
    ...state,
    queue: state.queue.map((r) => (r.record_id === recordId ? { ...r, verdict } : r)),
  };
}

/** Accuracy is display-formatted only; the value always comes from the API. */
export function formatAccuracy(accuracy: number | null): string {
  if (accuracy === null || accuracy === undefined) return "–";
  return `${(accuracy * 100).toFixed(1)}%`;
}

export function formatCost(cost: CostInfo | null): string {
  if (!cost) return "–";
  return `$${cost.cost.toFixed(2)} (${cost.model})`;
}
