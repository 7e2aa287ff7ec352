/**
 * Annotation flow: show a prompt with two blinded responses, take one
 * A / B / tie decision per task, advance until the queue is done.
 *
 * Responses render as plain text with preserved line breaks; nothing in
 * this view ever knows a model name. The only client-side persistence is
 * the annotator id in storage, so a reload resumes the same queue.
 */

import { ApiClient, Choice, isDone, TaskPayload } from "./api.js";

const STORAGE_KEY = "annotator_id";

export class AnnotationApp {
  private annotatorId = "";
  private current: TaskPayload | null = null;
  private busy = false;

  constructor(
    private root: HTMLElement,
    private api: ApiClient,
    private storage: Storage,
  ) {}

  async start(): Promise<void> {
    this.renderSkeleton();
    const saved = this.storage.getItem(STORAGE_KEY);
    if (saved) {
      this.annotatorId = saved;
    } else {
      this.annotatorId = await this.api.newSession();
      this.storage.setItem(STORAGE_KEY, this.annotatorId);
    }
    await this.loadNext();
  }

  private renderSkeleton(): void {
    this.root.innerHTML = `
      <header>
        <h1>Which response is better?</h1>
        <div id="progress" class="progress"></div>
      </header>
      <div id="banner" class="banner" hidden></div>
      <div id="toast" class="toast" hidden></div>
      <section id="task" hidden>
        <pre id="prompt" class="prompt"></pre>
        <div class="responses">
          <article>
            <h2>Response A</h2>
            <pre id="response-a"></pre>
          </article>
          <article>
            <h2>Response B</h2>
            <pre id="response-b"></pre>
          </article>
        </div>
        <div class="buttons">
          <button type="button" data-choice="A">A is better</button>
          <button type="button" data-choice="tie">Neither is better</button>
          <button type="button" data-choice="B">B is better</button>
        </div>
      </section>
      <section id="done" hidden>
        <h2>All done</h2>
        <p>Every pair in your queue has been judged. Thank you!</p>
      </section>
    `;
    for (const button of this.buttons()) {
      button.addEventListener("click", () => {
        void this.choose(button.dataset.choice as Choice);
      });
    }
  }

  private el<T extends HTMLElement>(id: string): T {
    return this.root.querySelector(`#${id}`) as T;
  }

  private buttons(): HTMLButtonElement[] {
    return Array.from(this.root.querySelectorAll("button[data-choice]"));
  }

  private setButtonsEnabled(enabled: boolean): void {
    for (const b of this.buttons()) b.disabled = !enabled;
  }

  private showProgress(judged: number, total: number): void {
    this.el("progress").textContent = `${judged} / ${total} judged`;
  }

  private showBanner(message: string, retry: () => Promise<void>): void {
    const banner = this.el("banner");
    banner.hidden = false;
    banner.innerHTML = "";
    banner.append(message + " ");
    const button = document.createElement("button");
    button.type = "button";
    button.textContent = "Retry";
    button.addEventListener("click", () => {
      banner.hidden = true;
      void retry();
    });
    banner.append(button);
  }

  private showToast(message: string): void {
    const toast = this.el("toast");
    toast.textContent = message;
    toast.hidden = false;
  }

  async loadNext(): Promise<void> {
    this.el("toast").hidden = true;
    let next;
    try {
      next = await this.api.nextTask(this.annotatorId);
    } catch {
      this.showBanner("Could not reach the server.", () => this.loadNext());
      return;
    }
    this.showProgress(next.judged_count, next.total_count);
    if (isDone(next)) {
      this.current = null;
      this.el("task").hidden = true;
      this.el("done").hidden = false;
      return;
    }
    this.current = next;
    this.el("done").hidden = true;
    this.el("task").hidden = false;
    this.el("prompt").textContent = next.prompt;
    this.el("response-a").textContent = next.response_a;
    this.el("response-b").textContent = next.response_b;
    this.setButtonsEnabled(true);
  }

  /** One judgment per decision: buttons lock until the server answers. */
  async choose(choice: Choice): Promise<void> {
    if (this.busy || !this.current) return;
    this.busy = true;
    this.setButtonsEnabled(false);
    const pairId = this.current.pair_id;
    let status: number;
    try {
      status = await this.api.submitJudgment(pairId, this.annotatorId, choice);
    } catch {
      // task retained; the user may click again once the network is back
      this.busy = false;
      this.showBanner("Submission failed; check your connection.", async () => {
        this.setButtonsEnabled(true);
      });
      return;
    }
    this.busy = false;
    if (status === 201 || status === 409) {
      // 409: someone already recorded this judgment; just move on
      await this.loadNext();
      return;
    }
    this.showToast(`The server rejected the judgment (HTTP ${status}).`);
    this.setButtonsEnabled(true);
  }
}
