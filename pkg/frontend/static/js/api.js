/**
 * Typed client for the annotation service HTTP API.
 *
 * The UI is a pure client of this contract; the fetch implementation is
 * injectable so tests can run against a scripted stub server.
 */
export function isDone(r) {
    return r.done === true;
}
export class ApiError extends Error {
    constructor(status, message) {
        super(message);
        this.status = status;
    }
}
export class ApiClient {
    constructor(baseUrl = "", fetchFn = (...args) => globalThis.fetch(...args)) {
        this.baseUrl = baseUrl;
        this.fetchFn = fetchFn;
    }
    async newSession() {
        const resp = await this.fetchFn(`${this.baseUrl}/api/session`, { method: "POST" });
        if (!resp.ok)
            throw new ApiError(resp.status, "could not start a session");
        const body = await resp.json();
        return body.annotator_id;
    }
    async nextTask(annotatorId) {
        const resp = await this.fetchFn(`${this.baseUrl}/api/tasks/next?annotator_id=${encodeURIComponent(annotatorId)}`);
        if (!resp.ok)
            throw new ApiError(resp.status, "could not fetch the next task");
        return (await resp.json());
    }
    /** Resolves to the HTTP status (201 created, 409 duplicate, 400/404 errors). */
    async submitJudgment(pairId, annotatorId, choice) {
        const resp = await this.fetchFn(`${this.baseUrl}/api/tasks/${encodeURIComponent(pairId)}/judgment`, {
            method: "POST",
            headers: { "content-type": "application/json" },
            body: JSON.stringify({ annotator_id: annotatorId, choice }),
        });
        return resp.status;
    }
    async results(token) {
        const resp = await this.fetchFn(`${this.baseUrl}/api/results?token=${encodeURIComponent(token)}`);
        if (!resp.ok)
            throw new ApiError(resp.status, "results unavailable");
        return (await resp.json());
    }
}
