/** Admin dashboard: daily accuracy chart, review queue, cost panel. */

import { ApiClient, ApiError } from "./api.js";
import {
  AdminViewState,
  applyCost,
  applyMetrics,
  applyQueue,
  applyVerdictLocally,
  formatAccuracy,
  formatCost,
  initialAdminState,
} from "./state.js";

const POLL_INTERVAL_MS = 30_000;

export class AdminView {
  private state: AdminViewState = initialAdminState();
  private timer: ReturnType<typeof setInterval> | null = null;

  constructor(
    private root: HTMLElement,
    private api: ApiClient,
  ) {}

  mount(): void {
    this.render();
  }

  unmount(): void {
    if (this.timer) clearInterval(this.timer);
  }

  private setState(state: AdminViewState): void {
    this.state = state;
    this.render();
  }

  async login(token: string): Promise<void> {
    this.state = { ...this.state, adminToken: token };
    try {
      await this.refresh();
      if (this.timer) clearInterval(this.timer);
      this.timer = setInterval(() => void this.refresh(), POLL_INTERVAL_MS);
    } catch (err) {
      const message =
        err instanceof ApiError && err.status === 401
          ? "Sai mã quản trị. / Wrong admin token."
          : String(err);
      this.setState({ ...this.state, adminToken: null, error: message });
    }
  }

  async refresh(): Promise<void> {
    const token = this.state.adminToken;
    if (!token) return;
    const today = new Date();
    const from = new Date(today.getTime() - 13 * 86_400_000);
    const iso = (d: Date) => d.toISOString().slice(0, 10);
    const queue = await this.api.listRecords(token);
    const days = await this.api.dailyMetrics(iso(from), iso(today));
    const cost = await this.api.cost();
    this.setState(applyCost(applyQueue(applyMetrics(this.state, days), queue), cost));
  }

  async mark(recordId: string, verdict: "correct" | "incorrect"): Promise<void> {
    const token = this.state.adminToken;
    if (!token) return;
    await this.api.rateRecord(recordId, verdict, "console", token);
    this.setState(applyVerdictLocally(this.state, recordId, verdict));
    await this.refresh(); // accuracy chart reflects the new verdict
  }

  private chartSvg(): string {
    const days = this.state.days;
    if (!days.length) return "";
    const width = 560;
    const barWidth = Math.floor(width / days.length) - 4;
    const bars = days
      .map((day, i) => {
        const x = i * (barWidth + 4);
        if (day.accuracy === null) {
          // no rated answers that day: render a gap, not a zero
          return `<text x="${x + barWidth / 2}" y="95" class="gap">·</text>`;
        }
        const h = Math.round(day.accuracy * 80);
        return `
          <rect x="${x}" y="${90 - h}" width="${barWidth}" height="${h}"
                class="bar" data-date="${day.date}"></rect>
          <text x="${x + barWidth / 2}" y="99" class="label">${day.date.slice(5)}</text>`;
      })
      .join("");
    return `<svg viewBox="0 0 ${width} 104" class="chart" role="img">${bars}</svg>`;
  }

  private render(): void {
    const s = this.state;
    if (!s.adminToken) {
      this.root.innerHTML = `
        <div class="admin login">
          ${s.error ? `<div class="banner error">${s.error}</div>` : ""}
          <form id="login">
            <input id="token" type="password" placeholder="Admin token" />
            <button type="submit">Đăng nhập</button>
          </form>
        </div>`;
      this.root.querySelector<HTMLFormElement>("#login")?.addEventListener("submit", (e) => {
        e.preventDefault();
        const token = this.root.querySelector<HTMLInputElement>("#token")?.value ?? "";
        void this.login(token);
      });
      return;
    }

    const rows = s.queue
      .map(
        (r) => `
        <tr class="${r.verdict ?? "unrated"}">
          <td>${r.record_id}</td>
          <td class="q">${escapeHtml(r.question ?? "")}</td>
          <td class="a">${escapeHtml(r.answer.slice(0, 160))}</td>
          <td>${r.verdict ?? "unrated"}</td>
          <td>
            <button class="mark" data-id="${r.record_id}" data-verdict="correct">✓</button>
            <button class="mark" data-id="${r.record_id}" data-verdict="incorrect">✗</button>
          </td>
        </tr>`,
      )
      .join("");

    const today = s.days.at(-1);
    this.root.innerHTML = `
      <div class="admin">
        <section class="panel">
          <h2>Độ chính xác theo ngày / Daily accuracy</h2>
          ${this.chartSvg()}
          <p>Hôm nay: <strong id="accuracy-today">${formatAccuracy(today?.accuracy ?? null)}</strong>
             — ${today?.questions ?? 0} câu hỏi,
             ${(today?.input_tokens ?? 0) + (today?.output_tokens ?? 0)} tokens</p>
        </section>
        <section class="panel">
          <h2>Chi phí / Cost</h2>
          <p id="cost">${formatCost(s.cost)}</p>
        </section>
        <section class="panel">
          <h2>Hàng chờ đánh giá / Review queue</h2>
          <table class="queue"><thead>
            <tr><th>id</th><th>câu hỏi</th><th>trả lời</th><th>đánh giá</th><th></th></tr>
          </thead><tbody>${rows}</tbody></table>
        </section>
      </div>`;

    this.root.querySelectorAll<HTMLButtonElement>(".mark").forEach((button) =>
      button.addEventListener("click", () =>
        void this.mark(button.dataset.id ?? "", button.dataset.verdict as "correct" | "incorrect"),
      ),
    );
  }
}

function escapeHtml(text: string): string {
  return text
    .replaceAll("&", "&amp;")
    .replaceAll("<", "&lt;")
    .replaceAll(">", "&gt;")
    .replaceAll('"', "&quot;");
}
