/** Gateway HTTP client with SSE-over-fetch streaming (works in browsers and
 * in node test runs alike; no EventSource dependency). */

import type { EdgeDoc, JournalEvent, SnapshotDoc } from "./types.js";

export class GatewayClient {
  constructor(
    readonly base: string,
    readonly token: string,
  ) {}

  private headers(): Record<string, string> {
    return { Authorization: `Bearer ${this.token}` };
  }

  private async checked(response: Response): Promise<Response> {
    if (!response.ok) {
      let detail: unknown = response.statusText;
      try {
        detail = (await response.json()).detail;
      } catch {
        /* non-json error body */
      }
      throw new Error(`gateway ${response.status}: ${JSON.stringify(detail)}`);
    }
    return response;
  }

  async health(): Promise<{ ok: boolean; sim_time: number; events: number }> {
    const r = await this.checked(
      await fetch(`${this.base}/health`, { headers: this.headers() }),
    );
    return r.json();
  }

  async snapshot(): Promise<SnapshotDoc> {
    const r = await this.checked(
      await fetch(`${this.base}/resources`, { headers: this.headers() }),
    );
    return r.json();
  }

  async graph(): Promise<{ edges: EdgeDoc[] }> {
    const r = await this.checked(
      await fetch(`${this.base}/graph`, { headers: this.headers() }),
    );
    return r.json();
  }

  async approve(jobId: string, decision: "approve" | "reject", approver: string) {
    const r = await this.checked(
      await fetch(`${this.base}/jobs/${jobId}/approve`, {
        method: "POST",
        headers: { ...this.headers(), "Content-Type": "application/json" },
        body: JSON.stringify({ decision, approver }),
      }),
    );
    return r.json();
  }

  async submitGroup(body: Record<string, unknown>): Promise<{ group_id: string }> {
    const r = await this.checked(
      await fetch(`${this.base}/task-groups`, {
        method: "POST",
        headers: { ...this.headers(), "Content-Type": "application/json" },
        body: JSON.stringify(body),
      }),
    );
    return r.json();
  }

  /** Stream journal events from `since`; resolves when the server closes the
   * stream (follow=false or server timeout). Caller re-invokes to resume. */
  async stream(
    since: number,
    onEvent: (event: JournalEvent) => void,
    options: { follow?: boolean; timeoutS?: number } = {},
  ): Promise<void> {
    const follow = options.follow ?? true;
    const timeout = options.timeoutS ?? 30;
    const url =
      `${this.base}/events?since=${since}&follow=${follow}&timeout=${timeout}`;
    const response = await this.checked(
      await fetch(url, { headers: this.headers() }),
    );
    const reader = response.body!.getReader();
    const decoder = new TextDecoder();
    let buffer = "";
    for (;;) {
      const { value, done } = await reader.read();
      if (done) break;
      buffer += decoder.decode(value, { stream: true });
      let split: number;
      while ((split = buffer.indexOf("\n\n")) >= 0) {
        const block = buffer.slice(0, split);
        buffer = buffer.slice(split + 2);
        const parsed = parseSseBlock(block);
        if (parsed) onEvent(parsed);
      }
    }
  }
}

export function parseSseBlock(block: string): JournalEvent | null {
  const lines = block.split("\n").filter((l) => l.length > 0);
  if (lines.length < 2) return null;
  const kind = lines[0].replace(/^event: /, "");
  const data = JSON.parse(lines[1].replace(/^data: /, ""));
  if (kind === "crutd" || kind === "job") {
    return { kind, data } as JournalEvent;
  }
  return null;
}
