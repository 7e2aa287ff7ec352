/**
 * Admin view: per-pair stacked win/tie/loss bars and won-both counts.
 * Requires the admin token; a 401 turns into a token prompt.
 */

import { ApiClient, ApiError, WinMatrix } from "./api.js";

export class ResultsView {
  constructor(
    private root: HTMLElement,
    private api: ApiClient,
  ) {}

  async start(token = ""): Promise<void> {
    if (!token) {
      this.renderTokenPrompt();
      return;
    }
    await this.load(token);
  }

  async load(token: string): Promise<void> {
    let matrix: WinMatrix;
    try {
      matrix = await this.api.results(token);
    } catch (err) {
      if (err instanceof ApiError && err.status === 401) {
        this.renderTokenPrompt("That token was rejected.");
        return;
      }
      this.root.innerHTML = `<p class="error">Could not load results.</p>`;
      return;
    }
    this.render(matrix);
  }

  private renderTokenPrompt(message = ""): void {
    this.root.innerHTML = `
      <h1>Evaluation results</h1>
      ${message ? `<p class="error">${message}</p>` : ""}
      <form id="token-form">
        <label>Admin token <input id="token" type="password" /></label>
        <button type="submit">View results</button>
      </form>
    `;
    const form = this.root.querySelector("#token-form") as HTMLFormElement;
    form.addEventListener("submit", (event) => {
      event.preventDefault();
      const token = (this.root.querySelector("#token") as HTMLInputElement).value;
      void this.load(token);
    });
  }

  private render(matrix: WinMatrix): void {
    if (matrix.judgment_count === 0) {
      this.root.innerHTML = `<h1>Evaluation results</h1><p id="empty">No judgments logged yet.</p>`;
      return;
    }
    const bars = matrix.pairs
      .map((row) => {
        const total = row.a_wins + row.ties + row.b_wins;
        const seg = (cls: string, count: number) =>
          `<span class="seg ${cls}" data-count="${count}" style="flex:${count} 0 0">${count || ""}</span>`;
        return `
          <div class="pair-row" data-total="${total}">
            <div class="pair-label">${row.model_a} vs ${row.model_b}</div>
            <div class="bar">${seg("win", row.a_wins)}${seg("tie", row.ties)}${seg("loss", row.b_wins)}</div>
          </div>`;
      })
      .join("");
    const wonBoth = matrix.models
      .map(
        (m) =>
          `<li data-model="${m}">${m}: won against every baseline on <strong>${matrix.won_both[m] ?? 0}</strong> prompts, lost on ${matrix.lost_both[m] ?? 0}</li>`,
      )
      .join("");
    this.root.innerHTML = `
      <h1>Evaluation results</h1>
      <p>${matrix.judgment_count} judgments over ${matrix.pairs.length} model pairing(s).</p>
      <section id="bars">${bars}</section>
      <h2>Won-both counts</h2>
      <ul id="won-both">${wonBoth}</ul>
      <p class="legend"><span class="seg win">left wins</span><span class="seg tie">tie</span><span class="seg loss">right wins</span></p>
    `;
  }
}
