/** Wire shapes of the node's JSON rendering. */

export interface RecordRow {
  entity: string;
  id: string;
  site: string;
  fields: Record<string, string>;
}

export interface MissingSite {
  site: string;
  reason: string;
}

export interface QueryResponse {
  query: string;
  cache: "hit" | "miss";
  missing: MissingSite[];
  records: RecordRow[];
}

export interface PatientInfo {
  patient_id: string;
  age_years: number;
  children_count: number;
  age_first_pregnancy: number | null;
  age_last_pregnancy: number | null;
  hrt: boolean;
  hrt_start: string | null;
  site_id: string;
}

export interface LikeImageCriteria {
  image_id: string;
  threshold: number;
  views?: string[];
}

export interface SimilarCriteria {
  age_band: number;
  match_children_band: boolean;
  pregnancy_age_band?: number | null;
  like_image?: LikeImageCriteria | null;
}

export interface AllocationResponse {
  patient_id: string;
  pair: [string, string];
  pair_counts: Record<string, number>;
}

export interface SiteInfo {
  local: { site_id: string; data_version: number };
  peers: {
    site_id: string;
    address: string;
    status: string;
    last_known_version: number | null;
  }[];
}

export interface CacheStats {
  entries: number;
  hits: number;
  misses: number;
  evictions: number;
}

export class ApiRequestError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}
