/** Thin fetch client for the /v1 API. Responses are returned as parsed
 *  JSON with no reshaping, so every number downstream is service-provided. */
export class ApiError extends Error {
    constructor(status, detail) {
        super(`HTTP ${status}: ${detail}`);
        this.status = status;
        this.detail = detail;
    }
}
function query(params) {
    const parts = Object.entries(params).map(([key, value]) => `${encodeURIComponent(key)}=${encodeURIComponent(String(value))}`);
    return parts.length ? `?${parts.join("&")}` : "";
}
export class ApiClient {
    constructor(baseUrl = "", fetchImpl = fetch) {
        this.baseUrl = baseUrl;
        this.fetchImpl = fetchImpl;
    }
    localizeUrl(imageId, theta, conn, policy) {
        return (`${this.baseUrl}/v1/localize/${encodeURIComponent(imageId)}` +
            query({ theta, conn, policy }));
    }
    representerUrl(imageId, row, col, k, polarity) {
        return (`${this.baseUrl}/v1/representer/${encodeURIComponent(imageId)}` +
            query({ row, col, k, polarity }));
    }
    async get(url) {
        const response = await this.fetchImpl(url);
        if (!response.ok) {
            let detail = response.statusText;
            try {
                const body = (await response.json());
                if (body.detail)
                    detail = body.detail;
            }
            catch {
                // non-JSON error body; keep the status text
            }
            throw new ApiError(response.status, detail);
        }
        return (await response.json());
    }
    images() {
        return this.get(`${this.baseUrl}/v1/images`);
    }
    meta() {
        return this.get(`${this.baseUrl}/v1/meta`);
    }
    activation(imageId) {
        return this.get(`${this.baseUrl}/v1/activation/${encodeURIComponent(imageId)}`);
    }
    localize(imageId, theta, conn = 4, policy = "largest") {
        return this.get(this.localizeUrl(imageId, theta, conn, policy));
    }
    representer(imageId, row, col, k, polarity = "both") {
        return this.get(this.representerUrl(imageId, row, col, k, polarity));
    }
    importance(imageId) {
        return this.get(`${this.baseUrl}/v1/importance/${encodeURIComponent(imageId)}`);
    }
}
