/** Chat screen: streamed answers, citation chips, clarification banners. */

import { ApiClient } from "./api.js";
import {
  applyCitation,
  applyDone,
  applyRecoveredRecord,
  applyStreamError,
  applyToken,
  beginUserTurn,
  ChatViewState,
  expandCitation,
  initialChatState,
  setSession,
} from "./state.js";

export class ChatView {
  private state: ChatViewState = initialChatState();
  private lastRecordId: string | null = null;

  constructor(
    private root: HTMLElement,
    private api: ApiClient,
  ) {}

  async mount(): Promise<void> {
    this.render();
    const sessionId = await this.api.createSession();
    this.state = setSession(this.state, sessionId);
    this.render();
  }

  private setState(state: ChatViewState): void {
    this.state = state;
    this.render();
  }

  async send(text: string): Promise<void> {
    if (!this.state.sessionId || !text.trim()) return;
    this.setState(beginUserTurn(this.state, text));
    try {
      const done = await this.api.sendMessage(this.state.sessionId, text, {
        onToken: (t) => this.setState(applyToken(this.state, t)),
        onCitation: (unitId) => this.setState(applyCitation(this.state, unitId)),
      });
      this.lastRecordId = done.record_id;
      this.setState(applyDone(this.state, done));
    } catch (err) {
      this.setState(applyStreamError(this.state, String(err)));
    }
  }

  /** Idempotent recovery: re-fetch the completed record after a dropped stream. */
  async retry(): Promise<void> {
    if (!this.lastRecordId) return;
    const record = await this.api.fetchRecord(this.lastRecordId);
    this.setState(applyRecoveredRecord(this.state, record));
  }

  async showCitation(unitId: string): Promise<void> {
    const unit = await this.api.unitText(unitId);
    this.setState(expandCitation(this.state, unitId, unit.text));
  }

  private render(): void {
    const s = this.state;
    const messages = s.messages
      .map((m) => {
        const classes = ["msg", m.role, m.refused ? "refused" : "", m.streaming ? "streaming" : ""]
          .filter(Boolean)
          .join(" ");
        const chips = m.refused
          ? ""
          : m.citations
              .map((c) => `<button class="chip" data-unit="${c}">${c}</button>`)
              .join(" ");
        return `<div class="${classes}"><div class="text">${escapeHtml(m.text)}</div>
          <div class="chips">${chips}</div></div>`;
      })
      .join("");

    const banner = s.pendingClarification
      ? `<div class="banner clarification">Cần thêm thông tin — vui lòng bổ sung. / More details needed.</div>`
      : "";
    const error = s.streamError
      ? `<div class="banner error">Mất kết nối khi đang trả lời. <button id="retry">Tải lại câu trả lời</button></div>`
      : "";
    const expanded = s.expandedCitation
      ? `<div class="citation-panel"><strong>${s.expandedCitation.unitId}</strong>
         <p>${escapeHtml(s.expandedCitation.text)}</p></div>`
      : "";

    this.root.innerHTML = `
      <div class="chat">
        <div class="messages" id="messages">${messages}</div>
        ${banner}${error}${expanded}
        <form id="composer">
          <input id="question" type="text" placeholder="Đặt câu hỏi tuyển sinh..."
                 ${s.sessionId ? "" : "disabled"} autocomplete="off" />
          <button type="submit" ${s.sessionId ? "" : "disabled"}>Gửi</button>
        </form>
      </div>`;

    this.root.querySelector<HTMLFormElement>("#composer")?.addEventListener("submit", (e) => {
      e.preventDefault();
      const input = this.root.querySelector<HTMLInputElement>("#question");
      if (input) {
        const text = input.value;
        input.value = "";
        void this.send(text);
      }
    });
    this.root.querySelectorAll<HTMLButtonElement>(".chip").forEach((chip) =>
      chip.addEventListener("click", () => void this.showCitation(chip.dataset.unit ?? "")),
    );
    this.root.querySelector("#retry")?.addEventListener("click", () => void this.retry());
    const log = this.root.querySelector("#messages");
    if (log) log.scrollTop = log.scrollHeight;
  }
}

function escapeHtml(text: string): string {
  return text
    .replaceAll("&", "&amp;")
    .replaceAll("<", "&lt;")
    .replaceAll(">", "&gt;")
    .replaceAll('"', "&quot;");
}
