/**
 * Similar-case criteria controls and their DSL text form.
 *
 * The workbench keeps the two representations consistent: editing a control
 * regenerates the DSL, and editing the DSL re-derives the controls. The
 * generated text mirrors the query the engine builds for the same criteria,
 * so either submission path asks the same question.
 */

import { PatientInfo } from "./types.js";

export type ViewChoice = "MLO" | "CC" | "both";

export interface LikeImageControl {
  imageId: string;
  threshold: number;
  views: ViewChoice;
}

export interface SimilarControls {
  patientId: string;
  ageBand: number;
  childrenBand: boolean;
  likeImage: LikeImageControl | null;
}

const CHILDREN_BANDS: [number, number | null][] = [
  [0, 0],
  [1, 2],
  [3, 4],
  [5, null],
];

export function childrenBandOf(count: number): [number, number | null] {
  for (const [lo, hi] of CHILDREN_BANDS) {
    if (count >= lo && (hi === null || count <= hi)) {
      return [lo, hi];
    }
  }
  throw new Error(`no children band for ${count}`);
}

function childrenClause(count: number): string {
  const [lo, hi] = childrenBandOf(count);
  if (hi === null) {
    return `children >= ${lo}`;
  }
  if (lo === hi) {
    return `children = ${lo}`;
  }
  return `children between ${lo} and ${hi}`;
}

export function buildDsl(controls: SimilarControls, ref: PatientInfo): string {
  if (controls.patientId !== ref.patient_id) {
    throw new Error("controls and reference patient disagree");
  }
  const lo = Math.max(0, ref.age_years - controls.ageBand);
  const hi = ref.age_years + controls.ageBand;
  const parts = [`age between ${lo} and ${hi}`];
  if (controls.childrenBand) {
    parts.push(childrenClause(ref.children_count));
  }
  if (controls.likeImage) {
    const li = controls.likeImage;
    parts.push(
      `similar like image ${li.imageId} threshold ${li.threshold} in ${li.views}`,
    );
  }
  parts.push(`patient != "${ref.patient_id}"`);
  const target = controls.likeImage ? "images" : "patients";
  return `find ${target} where ${parts.join(" and ")}`;
}

/**
 * Re-derive controls from DSL text, or null when the text is not a
 * similar-case query (free-form queries are submitted as-is).
 */
export function parseControls(dsl: string, ref: PatientInfo): SimilarControls | null {
  const exclusion = dsl.match(/patient != "([^"]+)"/);
  const ageBand = dsl.match(/age between (\d+) and (\d+)/);
  if (!exclusion || !ageBand || exclusion[1] !== ref.patient_id) {
    return null;
  }
  const hi = Number(ageBand[2]);
  const controls: SimilarControls = {
    patientId: ref.patient_id,
    ageBand: hi - ref.age_years,
    childrenBand: /children (?:=|>=|between) /.test(dsl),
    likeImage: null,
  };
  const like = dsl.match(
    /similar like image (\S+) threshold ([\d.]+)(?: in (MLO|CC|both))?/,
  );
  if (like) {
    controls.likeImage = {
      imageId: like[1]!,
      threshold: Number(like[2]),
      views: (like[3] as ViewChoice | undefined) ?? "both",
    };
  }
  if (controls.ageBand < 0) {
    return null;
  }
  return controls;
}

export function toCriteria(controls: SimilarControls) {
  return {
    age_band: controls.ageBand,
    match_children_band: controls.childrenBand,
    like_image: controls.likeImage
      ? {
          image_id: controls.likeImage.imageId,
          threshold: controls.likeImage.threshold,
          views:
            controls.likeImage.views === "both"
              ? ["CC", "MLO"]
              : [controls.likeImage.views],
        }
      : null,
  };
}
