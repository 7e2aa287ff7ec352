/**
 * Typed client for the annotation service HTTP API.
 *
 * The UI is a pure client of this contract; the fetch implementation is
 * injectable so tests can run against a scripted stub server.
 */

export type Choice = "A" | "B" | "tie";

export interface TaskPayload {
  pair_id: string;
  prompt: string;
  response_a: string;
  response_b: string;
  judged_count: number;
  total_count: number;
}

export interface DonePayload {
  done: true;
  judged_count: number;
  total_count: number;
}

export type NextResponse = TaskPayload | DonePayload;

export function isDone(r: NextResponse): r is DonePayload {
  return (r as DonePayload).done === true;
}

export interface PairRow {
  model_a: string;
  model_b: string;
  a_wins: number;
  b_wins: number;
  ties: number;
}

export interface WinMatrix {
  models: string[];
  pairs: PairRow[];
  judgment_count: number;
  won_both: Record<string, number>;
  lost_both: Record<string, number>;
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private baseUrl: string = "",
    private fetchFn: FetchLike = (...args) => globalThis.fetch(...args),
  ) {}

  async newSession(): Promise<string> {
    const resp = await this.fetchFn(`${this.baseUrl}/api/session`, { method: "POST" });
    if (!resp.ok) throw new ApiError(resp.status, "could not start a session");
    const body = await resp.json();
    return body.annotator_id as string;
  }

  async nextTask(annotatorId: string): Promise<NextResponse> {
    const resp = await this.fetchFn(
      `${this.baseUrl}/api/tasks/next?annotator_id=${encodeURIComponent(annotatorId)}`,
    );
    if (!resp.ok) throw new ApiError(resp.status, "could not fetch the next task");
    return (await resp.json()) as NextResponse;
  }

  /** Resolves to the HTTP status (201 created, 409 duplicate, 400/404 errors). */
  async submitJudgment(pairId: string, annotatorId: string, choice: Choice): Promise<number> {
    const resp = await this.fetchFn(
      `${this.baseUrl}/api/tasks/${encodeURIComponent(pairId)}/judgment`,
      {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify({ annotator_id: annotatorId, choice }),
      },
    );
    return resp.status;
  }

  async results(token: string): Promise<WinMatrix> {
    const resp = await this.fetchFn(
      `${this.baseUrl}/api/results?token=${encodeURIComponent(token)}`,
    );
    if (!resp.ok) throw new ApiError(resp.status, "results unavailable");
    return (await resp.json()) as WinMatrix;
  }
}
