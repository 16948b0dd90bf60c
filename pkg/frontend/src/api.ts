/** Thin fetch client for the /v1 API. Responses are returned as parsed
 *  JSON with no reshaping, so every number downstream is service-provided. */

import type {
  ActivationResponse,
  ImagesResponse,
  ImportanceResponse,
  LocalizeResponse,
  MetaResponse,
  Polarity,
  RepresenterResponse,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
  }
}

function query(params: Record<string, string | number>): string {
  const parts = Object.entries(params).map(
    ([key, value]) => `${encodeURIComponent(key)}=${encodeURIComponent(String(value))}`,
  );
  return parts.length ? `?${parts.join("&")}` : "";
}

export class ApiClient {
  constructor(
    private readonly baseUrl: string = "",
    private readonly fetchImpl: typeof fetch = fetch,
  ) {}

  localizeUrl(imageId: string, theta: number, conn: number, policy: string): string {
    return (
      `${this.baseUrl}/v1/localize/${encodeURIComponent(imageId)}` +
      query({ theta, conn, policy })
    );
  }

  representerUrl(
    imageId: string,
    row: number,
    col: number,
    k: number,
    polarity: Polarity,
  ): string {
    return (
      `${this.baseUrl}/v1/representer/${encodeURIComponent(imageId)}` +
      query({ row, col, k, polarity })
    );
  }

  private async get<T>(url: string): Promise<T> {
    const response = await this.fetchImpl(url);
    if (!response.ok) {
      let detail = response.statusText;
      try {
        const body = (await response.json()) as { detail?: string };
        if (body.detail) detail = body.detail;
      } catch {
        // non-JSON error body; keep the status text
      }
      throw new ApiError(response.status, detail);
    }
    return (await response.json()) as T;
  }

  images(): Promise<ImagesResponse> {
    return this.get(`${this.baseUrl}/v1/images`);
  }

  meta(): Promise<MetaResponse> {
    return this.get(`${this.baseUrl}/v1/meta`);
  }

  activation(imageId: string): Promise<ActivationResponse> {
    return this.get(`${this.baseUrl}/v1/activation/${encodeURIComponent(imageId)}`);
  }

  localize(
    imageId: string,
    theta: number,
    conn = 4,
    policy = "largest",
  ): Promise<LocalizeResponse> {
    return this.get(this.localizeUrl(imageId, theta, conn, policy));
  }

  representer(
    imageId: string,
    row: number,
    col: number,
    k: number,
    polarity: Polarity = "both",
  ): Promise<RepresenterResponse> {
    return this.get(this.representerUrl(imageId, row, col, k, polarity));
  }

  importance(imageId: string): Promise<ImportanceResponse> {
    return this.get(`${this.baseUrl}/v1/importance/${encodeURIComponent(imageId)}`);
  }
}
