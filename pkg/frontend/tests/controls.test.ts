import { describe, expect, it } from "vitest";

import {
  SimilarControls,
  buildDsl,
  childrenBandOf,
  parseControls,
  toCriteria,
} from "../src/controls.js";
import { PatientInfo } from "../src/types.js";

function ref(age: number, children = 2, pid = "A-P1"): PatientInfo {
  return {
    patient_id: pid,
    age_years: age,
    children_count: children,
    age_first_pregnancy: null,
    age_last_pregnancy: null,
    hrt: false,
    hrt_start: null,
    site_id: "A",
  };
}

describe("controls to DSL", () => {
  it("renders the age band around the reference age", () => {
    const controls: SimilarControls = {
      patientId: "A-P1",
      ageBand: 3,
      childrenBand: false,
      likeImage: null,
    };
    const dsl = buildDsl(controls, ref(52));
    expect(dsl).toBe('find patients where age between 49 and 55 and patient != "A-P1"');
  });

  it("widening the band to 5 renders [ref-5, ref+5]", () => {
    const controls: SimilarControls = {
      patientId: "A-P1",
      ageBand: 5,
      childrenBand: false,
      likeImage: null,
    };
    expect(buildDsl(controls, ref(52))).toContain("age between 47 and 57");
  });

  it("children bands follow the fixed partition", () => {
    expect(childrenBandOf(0)).toEqual([0, 0]);
    expect(childrenBandOf(2)).toEqual([1, 2]);
    expect(childrenBandOf(4)).toEqual([3, 4]);
    expect(childrenBandOf(7)).toEqual([5, null]);
    const zero: SimilarControls = {
      patientId: "A-P1",
      ageBand: 3,
      childrenBand: true,
      likeImage: null,
    };
    expect(buildDsl(zero, ref(52, 0))).toContain("children = 0");
    expect(buildDsl(zero, ref(52, 2))).toContain("children between 1 and 2");
    expect(buildDsl(zero, ref(52, 7))).toContain("children >= 5");
  });

  it("an image-match criterion switches the target to images", () => {
    const controls: SimilarControls = {
      patientId: "A-P1",
      ageBand: 3,
      childrenBand: false,
      likeImage: { imageId: "A-I1", threshold: 0.8, views: "MLO" },
    };
    const dsl = buildDsl(controls, ref(52));
    expect(dsl).toMatch(/^find images where /);
    expect(dsl).toContain("similar like image A-I1 threshold 0.8 in MLO");
  });
});

describe("DSL back to controls (round trip)", () => {
  it("round-trips every control combination", () => {
    let seed = 0x2c9a;
    const rand = () => {
      // xorshift32: deterministic pseudo-random control mixes
      seed ^= seed << 13;
      seed ^= seed >>> 17;
      seed ^= seed << 5;
      return (seed >>> 0) / 0xffffffff;
    };
    for (let i = 0; i < 200; i++) {
      const patient = ref(
        35 + Math.floor(rand() * 45),
        Math.floor(rand() * 8),
        `P-${i}`,
      );
      const controls: SimilarControls = {
        patientId: patient.patient_id,
        ageBand: Math.floor(rand() * 10),
        childrenBand: rand() < 0.5,
        likeImage:
          rand() < 0.4
            ? {
                imageId: `I-${i}`,
                threshold: Math.round(rand() * 100) / 100,
                views: (["MLO", "CC", "both"] as const)[Math.floor(rand() * 3)]!,
              }
            : null,
      };
      const dsl = buildDsl(controls, patient);
      expect(parseControls(dsl, patient)).toEqual(controls);
    }
  });

  it("returns null for free-form queries", () => {
    expect(parseControls("find images where age between 50 and 55", ref(52))).toBeNull();
    expect(parseControls("", ref(52))).toBeNull();
  });

  it("criteria payload mirrors the controls", () => {
    const controls: SimilarControls = {
      patientId: "A-P1",
      ageBand: 5,
      childrenBand: true,
      likeImage: { imageId: "I1", threshold: 0.8, views: "both" },
    };
    expect(toCriteria(controls)).toEqual({
      age_band: 5,
      match_children_band: true,
      like_image: { image_id: "I1", threshold: 0.8, views: ["CC", "MLO"] },
    });
  });
});
