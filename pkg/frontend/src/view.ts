/**
 * View models for the result table, the missing-site banner, the cache
 * badge, and the per-study lesion timeline. Pure functions over response
 * data; rendering to HTML happens at the very edge.
 */

import { QueryResponse, RecordRow } from "./types.js";

export interface SiteGroup {
  site: string;
  rows: RecordRow[];
}

export interface ResultViewModel {
  queryId: string;
  cacheBadge: string | null; // "served from knowledge base" on a hit
  missingBanner: string | null;
  groups: SiteGroup[];
  rowCount: number;
}

export function buildViewModel(response: QueryResponse): ResultViewModel {
  const groups: SiteGroup[] = [];
  // Engine order is (site, entity, id), so site groups are contiguous and
  // concatenating groups preserves engine order exactly.
  for (const row of response.records) {
    const last = groups[groups.length - 1];
    if (last && last.site === row.site) {
      last.rows.push(row);
    } else {
      groups.push({ site: row.site, rows: [row] });
    }
  }
  const missingBanner = response.missing.length
    ? "No answer from: " +
      response.missing.map((m) => `${m.site} (${m.reason})`).join(", ")
    : null;
  return {
    queryId: response.query,
    cacheBadge: response.cache === "hit" ? "served from knowledge base" : null,
    missingBanner,
    groups,
    rowCount: response.records.length,
  };
}

export function flattenedIds(vm: ResultViewModel): string[] {
  return vm.groups.flatMap((g) => g.rows.map((r) => r.id));
}

/** One row of the lesion-review timeline: a study's annotated regions over time. */
export interface TimelineRow {
  studyDate: string;
  studyId: string;
  imageId: string;
  author: string;
  kind: string;
  regions: [number, number, number, number][];
}

export function buildLesionTimeline(
  studies: { study_id: string; study_date: string }[],
  annotationsByImage: Map<string, { image_id: string; study_id: string; author: string; kind: string; regions: [number, number, number, number][] }[]>,
): TimelineRow[] {
  const dateOf = new Map(studies.map((s) => [s.study_id, s.study_date]));
  const rows: TimelineRow[] = [];
  for (const annotations of annotationsByImage.values()) {
    for (const a of annotations) {
      rows.push({
        studyDate: dateOf.get(a.study_id) ?? "",
        studyId: a.study_id,
        imageId: a.image_id,
        author: a.author,
        kind: a.kind,
        regions: a.regions,
      });
    }
  }
  rows.sort((a, b) =>
    a.studyDate === b.studyDate
      ? a.imageId.localeCompare(b.imageId)
      : a.studyDate.localeCompare(b.studyDate),
  );
  return rows;
}

const HTML_ESCAPES: [RegExp, string][] = [
  [/&/g, "&amp;"],
  [/</g, "&lt;"],
  [/>/g, "&gt;"],
  [/"/g, "&quot;"],
];

export function escapeHtml(text: string): string {
  return HTML_ESCAPES.reduce((out, [re, sub]) => out.replace(re, sub), text);
}

export function renderResultHtml(vm: ResultViewModel): string {
  const parts: string[] = [];
  if (vm.missingBanner) {
    parts.push(`<div class="banner warning">${escapeHtml(vm.missingBanner)}</div>`);
  }
  if (vm.cacheBadge) {
    parts.push(`<span class="badge cache">${escapeHtml(vm.cacheBadge)}</span>`);
  }
  for (const group of vm.groups) {
    parts.push(`<h3>Site ${escapeHtml(group.site)}</h3>`);
    const paths = Object.keys(group.rows[0]?.fields ?? {});
    const head = ["select", "id", ...paths]
      .map((p) => `<th>${escapeHtml(p)}</th>`)
      .join("");
    const body = group.rows
      .map((row) => {
        const cells = paths
          .map((p) => `<td>${escapeHtml(row.fields[p] ?? "")}</td>`)
          .join("");
        return (
          `<tr data-id="${escapeHtml(row.id)}">` +
          `<td><input type="checkbox" class="case-select" value="${escapeHtml(row.id)}"></td>` +
          `<td>${escapeHtml(row.id)}</td>${cells}</tr>`
        );
      })
      .join("");
    parts.push(
      `<table class="results"><thead><tr>${head}</tr></thead><tbody>${body}</tbody></table>`,
    );
  }
  if (vm.rowCount === 0) {
    parts.push('<p class="empty">No matching cases.</p>');
  }
  return parts.join("\n");
}
