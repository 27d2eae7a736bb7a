/**
 * Thin typed client for a node's HTTP endpoint. The workbench talks to the
 * engine through this surface only; there is no other channel by which it
 * could mutate grid state.
 */

import {
  AllocationResponse,
  ApiRequestError,
  CacheStats,
  PatientInfo,
  QueryResponse,
  SimilarCriteria,
  SiteInfo,
} from "./types.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private readonly baseUrl: string,
    private readonly token: string,
    private readonly fetchImpl: FetchLike = fetch,
  ) {}

  private async call<T>(method: string, path: string, body?: unknown): Promise<T> {
    const init: RequestInit = {
      method,
      headers: { Authorization: `Bearer ${this.token}` },
    };
    if (body !== undefined) {
      init.headers = { ...init.headers, "Content-Type": "application/json" };
      init.body = JSON.stringify(body);
    }
    const response = await this.fetchImpl(this.baseUrl + path, init);
    const text = await response.text();
    if (!response.ok) {
      let message = text;
      try {
        message = (JSON.parse(text) as { error?: string }).error ?? text;
      } catch {
        // non-JSON error body: report it verbatim
      }
      throw new ApiRequestError(response.status, message);
    }
    return JSON.parse(text) as T;
  }

  query(dsl: string, local = false): Promise<QueryResponse> {
    return this.call("POST", "/query", { dsl, local, format: "json" });
  }

  similar(patientId: string, criteria: SimilarCriteria): Promise<QueryResponse> {
    return this.call("POST", "/similar", {
      patient_id: patientId,
      criteria,
      format: "json",
    });
  }

  patient(patientId: string): Promise<PatientInfo> {
    return this.call("GET", `/patients/${encodeURIComponent(patientId)}`);
  }

  studies(patientId: string): Promise<Record<string, unknown>[]> {
    return this.call("GET", `/studies?patient=${encodeURIComponent(patientId)}`);
  }

  images(studyId: string): Promise<Record<string, unknown>[]> {
    return this.call("GET", `/images?study=${encodeURIComponent(studyId)}`);
  }

  annotations(imageId: string): Promise<Record<string, unknown>[]> {
    return this.call("GET", `/annotations?image=${encodeURIComponent(imageId)}`);
  }

  allocate(patientId: string): Promise<AllocationResponse> {
    return this.call("POST", "/allocate", { patient_id: patientId });
  }

  sites(): Promise<SiteInfo> {
    return this.call("GET", "/sites");
  }

  cacheStats(): Promise<CacheStats> {
    return this.call("GET", "/cache/stats");
  }
}
