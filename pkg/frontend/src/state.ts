/**
 * Workbench session state: the current DSL text and criteria controls (kept
 * consistent with each other), the last rendered result, and the selected
 * case set, capped at four cases.
 *
 * At most one query is relevant at a time: every submission takes a sequence
 * number and a response only lands if no newer submission has started since.
 */

import { ApiClient } from "./api.js";
import {
  SimilarControls,
  buildDsl,
  parseControls,
  toCriteria,
} from "./controls.js";
import { ApiRequestError, PatientInfo, QueryResponse } from "./types.js";
import { ResultViewModel, buildViewModel } from "./view.js";

export const MAX_SELECTED_CASES = 4;
export const SELECTION_HINT = "best four cases only";

export interface SelectionResult {
  ok: boolean;
  hint?: string;
}

export class Workbench {
  dsl = "";
  controls: SimilarControls | null = null;
  refPatient: PatientInfo | null = null;
  lastResponse: QueryResponse | null = null;
  view: ResultViewModel | null = null;
  error: string | null = null;
  selected: string[] = [];
  private seq = 0;

  constructor(private readonly api: ApiClient) {}

  /** Editing the DSL re-derives the controls (null for free-form queries). */
  setDsl(text: string): void {
    this.dsl = text;
    this.controls = this.refPatient ? parseControls(text, this.refPatient) : null;
  }

  async loadReference(patientId: string): Promise<void> {
    this.refPatient = await this.api.patient(patientId);
    if (this.controls) {
      this.controls = { ...this.controls, patientId };
      this.regenerateDsl();
    }
  }

  /** Control edits regenerate the DSL text. */
  setControls(controls: SimilarControls): void {
    this.controls = controls;
    this.regenerateDsl();
  }

  setAgeBand(band: number): Promise<void> {
    if (!this.controls) {
      throw new Error("no active criteria controls");
    }
    this.setControls({ ...this.controls, ageBand: band });
    return this.submitSimilar();
  }

  setChildrenBand(enabled: boolean): Promise<void> {
    if (!this.controls) {
      throw new Error("no active criteria controls");
    }
    this.setControls({ ...this.controls, childrenBand: enabled });
    return this.submitSimilar();
  }

  private regenerateDsl(): void {
    if (this.controls && this.refPatient) {
      this.dsl = buildDsl(this.controls, this.refPatient);
    }
  }

  async submitDsl(local = false): Promise<void> {
    const seq = ++this.seq;
    await this.dispatch(seq, () => this.api.query(this.dsl, local));
  }

  async submitSimilar(): Promise<void> {
    if (!this.controls) {
      throw new Error("no active criteria controls");
    }
    const seq = ++this.seq;
    const { patientId } = this.controls;
    const criteria = toCriteria(this.controls);
    await this.dispatch(seq, () => this.api.similar(patientId, criteria));
  }

  private async dispatch(
    seq: number,
    send: () => Promise<QueryResponse>,
  ): Promise<void> {
    try {
      const response = await send();
      this.applyResponse(seq, response);
    } catch (err) {
      if (seq !== this.seq) {
        return; // a newer submission superseded this one
      }
      if (err instanceof ApiRequestError) {
        this.error = err.message; // engine message rendered inline
        return;
      }
      throw err;
    }
  }

  applyResponse(seq: number, response: QueryResponse): void {
    if (seq !== this.seq) {
      return; // stale response: a newer submission is in flight or done
    }
    this.lastResponse = response;
    this.view = buildViewModel(response);
    this.error = null;
    // selections survive a refine only where the record ids persist
    const ids = new Set(response.records.map((r) => r.id));
    this.selected = this.selected.filter((id) => ids.has(id));
  }

  nextSeq(): number {
    return ++this.seq;
  }

  select(caseId: string): SelectionResult {
    if (this.selected.includes(caseId)) {
      return { ok: true };
    }
    if (this.selected.length >= MAX_SELECTED_CASES) {
      return { ok: false, hint: SELECTION_HINT };
    }
    this.selected = [...this.selected, caseId];
    return { ok: true };
  }

  deselect(caseId: string): void {
    this.selected = this.selected.filter((id) => id !== caseId);
  }
}
