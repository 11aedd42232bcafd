/* Thin client over the pipeline service. Every method is one endpoint;
   the app never touches files or other transports, so this module is
   the complete surface between frontend and backend. */

import type {
  CorrectionRequest,
  CorrectionResponse,
  DetectionsDoc,
  SpotDoc,
  SpotInfo,
  SpotListDoc,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

async function detailOf(res: Response): Promise<string> {
  try {
    const body = (await res.json()) as { detail?: unknown };
    if (typeof body.detail === "string") return body.detail;
  } catch {
    // non-JSON error body, fall through
  }
  return `${res.status} ${res.statusText}`;
}

async function checked(res: Response): Promise<Response> {
  if (!res.ok) throw new ApiError(res.status, await detailOf(res));
  return res;
}

export class ApiClient {
  constructor(
    public baseUrl: string,
    public expertId: string,
    public sessionId: string,
  ) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
  }

  async listSpots(): Promise<SpotInfo[]> {
    const res = await checked(await fetch(`${this.baseUrl}/spots`));
    const doc = (await res.json()) as SpotListDoc;
    return doc.spots;
  }

  imageUrl(spotId: string, level: number): string {
    return `${this.baseUrl}/spots/${encodeURIComponent(spotId)}/image?level=${level}`;
  }

  async fetchImage(spotId: string, level: number): Promise<ArrayBuffer> {
    const res = await checked(await fetch(this.imageUrl(spotId, level)));
    return res.arrayBuffer();
  }

  async fetchProbabilityMap(spotId: string): Promise<ArrayBuffer> {
    const res = await checked(
      await fetch(`${this.baseUrl}/spots/${encodeURIComponent(spotId)}/probability-map`),
    );
    return res.arrayBuffer();
  }

  async getDetections(spotId: string): Promise<DetectionsDoc> {
    const res = await checked(
      await fetch(`${this.baseUrl}/spots/${encodeURIComponent(spotId)}/detections`),
    );
    return (await res.json()) as DetectionsDoc;
  }

  async getAnnotations(spotId: string): Promise<SpotDoc> {
    const res = await checked(
      await fetch(`${this.baseUrl}/spots/${encodeURIComponent(spotId)}/annotations`),
    );
    return (await res.json()) as SpotDoc;
  }

  async putAnnotations(doc: SpotDoc): Promise<number> {
    const res = await checked(
      await fetch(
        `${this.baseUrl}/spots/${encodeURIComponent(doc.spot_id)}/annotations`,
        {
          method: "PUT",
          headers: { "content-type": "application/json" },
          body: JSON.stringify(doc),
        },
      ),
    );
    const body = (await res.json()) as { n_annotations: number };
    return body.n_annotations;
  }

  async postCorrection(
    spotId: string,
    req: CorrectionRequest,
  ): Promise<CorrectionResponse> {
    const res = await checked(
      await fetch(
        `${this.baseUrl}/spots/${encodeURIComponent(spotId)}/corrections`,
        {
          method: "POST",
          headers: { "content-type": "application/json" },
          body: JSON.stringify(req),
        },
      ),
    );
    return (await res.json()) as CorrectionResponse;
  }
}
