/**
 * The screening-desk screen: one POST per arriving patient, a running log,
 * and live pair counts straight from the engine's allocation state.
 */

import { ApiClient } from "./api.js";
import { ApiRequestError } from "./types.js";

export interface DeskEntry {
  patientId: string;
  pair: [string, string] | null;
  error: string | null;
}

export class AllocationDesk {
  log: DeskEntry[] = [];
  pairCounts: Record<string, number> = {};

  constructor(private readonly api: ApiClient) {}

  async allocate(patientId: string): Promise<DeskEntry> {
    let entry: DeskEntry;
    try {
      const response = await this.api.allocate(patientId);
      this.pairCounts = response.pair_counts;
      entry = { patientId, pair: response.pair, error: null };
    } catch (err) {
      if (!(err instanceof ApiRequestError)) {
        throw err;
      }
      entry = { patientId, pair: null, error: err.message };
    }
    this.log = [...this.log, entry];
    return entry;
  }

  counts(): [string, number][] {
    return Object.entries(this.pairCounts).sort(([a], [b]) => a.localeCompare(b));
  }
}
