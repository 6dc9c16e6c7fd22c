// Thin fetch client for the control-plane API. One trust level: every call
// carries the operator token.

import type {
  LedgerEntry,
  PendingApproval,
  RunStatus,
  TierState,
} from "./types";

export interface ApiConfig {
  baseUrl: string;
  token: string;
}

export class ApiError extends Error {
  constructor(
    public status: number,
    message: string,
  ) {
    super(message);
  }
}

export class ApiClient {
  constructor(private config: ApiConfig) {}

  private async request<T>(path: string, init: RequestInit = {}): Promise<T> {
    const response = await fetch(this.config.baseUrl + path, {
      ...init,
      headers: {
        Authorization: `Bearer ${this.config.token}`,
        "Content-Type": "application/json",
        ...(init.headers ?? {}),
      },
    });
    if (!response.ok) {
      let detail = response.statusText;
      try {
        const body = (await response.json()) as { detail?: string };
        if (body.detail) detail = body.detail;
      } catch {
        // keep the status text
      }
      throw new ApiError(response.status, detail);
    }
    return (await response.json()) as T;
  }

  runStatus(): Promise<RunStatus> {
    return this.request<RunStatus>("/run");
  }

  tier(): Promise<TierState> {
    return this.request<TierState>("/tier");
  }

  pendingApprovals(): Promise<{ pending: PendingApproval[]; now: number }> {
    return this.request("/approvals/pending");
  }

  decisions(params: Record<string, string | number | boolean>): Promise<{
    total: number;
    head_sequence: number;
    entries: LedgerEntry[];
  }> {
    const query = new URLSearchParams();
    for (const [key, value] of Object.entries(params)) query.set(key, String(value));
    return this.request(`/decisions?${query.toString()}`);
  }

  decisionDetail(decisionId: string): Promise<LedgerEntry> {
    return this.request(`/decisions/${encodeURIComponent(decisionId)}`);
  }

  resolveApproval(
    requestId: string,
    verdict: "approve" | "deny" | "override",
    action?: string,
    operatorId = "console",
  ): Promise<{ status: string }> {
    return this.request(`/approvals/${encodeURIComponent(requestId)}`, {
      method: "POST",
      body: JSON.stringify({ verdict, action, operator_id: operatorId }),
    });
  }

  killSwitch(engage: boolean, operatorId = "console"): Promise<{ status: string }> {
    return this.request("/killswitch", {
      method: "POST",
      body: JSON.stringify({ engage, operator_id: operatorId }),
    });
  }

  metrics(): Promise<{
    dora: Record<string, number | null>;
    ai: Record<string, number | null>;
    clock: number;
  }> {
    return this.request("/metrics");
  }

  eventStreamUrl(since: number): string {
    return `${this.config.baseUrl}/events?since=${since}`;
  }

  get token(): string {
    return this.config.token;
  }
}
