"""Seeded record-stream generator shared by the test modules.

Produces JSONL-ready dicts honoring every schema invariant, with ids
prefixed by site so multi-site unions stay collision-free. Real-typed
fields are always emitted as floats and int fields as ints, so the
engine's parsed values and the raw dicts render identically.
"""

from __future__ import annotations

import random

READERS = ("R1", "R2", "R3")
VIEWS = ("CC", "MLO")
LATS = ("L", "R")


def gen_site_records(rng: random.Random, site_id: str, n_patients: int = 12,
                     with_annotations: bool = True) -> list[dict]:
    objs: list[dict] = []
    study_seq = 0
    image_seq = 0
    ann_seq = 0
    for i in range(n_patients):
        pid = f"{site_id}-P{i:03d}"
        children = rng.choice((0, 0, 1, 2, 3, 4, 5, 7))
        patient = {
            "entity": "patient",
            "patient_id": pid,
            "age_years": rng.randint(35, 80),
            "children_count": children,
            "hrt": rng.random() < 0.4,
            "site_id": site_id,
        }
        if children > 0 and rng.random() < 0.7:
            first = rng.randint(18, 32)
            patient["age_first_pregnancy"] = first
            patient["age_last_pregnancy"] = first + rng.randint(0, 10)
        if patient["hrt"] and rng.random() < 0.6:
            patient["hrt_start"] = f"{rng.randint(1988, 2002)}-{rng.randint(1, 12):02d}-{rng.randint(1, 28):02d}"
        objs.append(patient)

        for _ in range(rng.randint(0, 3)):
            study_seq += 1
            sid = f"{site_id}-S{study_seq:04d}"
            diagnosis = rng.choice((None, None, "normal", "benign", "cancer", "cancer"))
            study = {
                "entity": "study",
                "study_id": sid,
                "patient_id": pid,
                "study_date": f"{rng.randint(1995, 2006)}-{rng.randint(1, 12):02d}-{rng.randint(1, 28):02d}",
                "reader_ids": sorted(rng.sample(READERS, rng.randint(0, 2))),
            }
            if diagnosis is not None:
                study["diagnosis"] = diagnosis
            if diagnosis == "cancer":
                study["diagnosed_laterality"] = rng.choice(("left", "right"))
                if rng.random() < 0.8:
                    study["therapy_outcome"] = rng.choice(("successful", "successful",
                                                           "unsuccessful"))
            objs.append(study)

            combos = rng.sample([(lat, view) for lat in LATS for view in VIEWS],
                                rng.randint(0, 4))
            for lat, view in sorted(combos):
                image_seq += 1
                iid = f"{site_id}-I{image_seq:04d}"
                objs.append({
                    "entity": "image",
                    "image_id": iid,
                    "study_id": sid,
                    "laterality": lat,
                    "view": view,
                    "breast_area_mm2": float(rng.randint(4000, 12000)),
                    "mean_density": round(rng.random(), 3),
                    "feature_vector": [round(rng.uniform(0, 10), 1) for _ in range(8)],
                })
                if not with_annotations:
                    continue
                for _ in range(rng.randint(0, 2)):
                    ann_seq += 1
                    kind = rng.choice(("mass", "microcalcification_cluster"))
                    ann = {
                        "entity": "annotation",
                        "annotation_id": f"{site_id}-N{ann_seq:04d}",
                        "image_id": iid,
                        "author": rng.choice(READERS + ("cad",)),
                        "kind": kind,
                        "regions": _gen_regions(rng),
                    }
                    if kind == "microcalcification_cluster":
                        ann["microcalc_count"] = rng.randint(0, 12)
                    if rng.random() < 0.5:
                        ann["session_length_min"] = float(rng.randint(5, 40))
                    if rng.random() < 0.5:
                        ann["serial_order"] = rng.randint(1, 30)
                    if rng.random() < 0.5:
                        ann["reading"] = rng.choice(("first", "second"))
                    if rng.random() < 0.5:
                        ann["author_experience_years"] = rng.randint(1, 30)
                    objs.append(ann)
    return objs


def _gen_regions(rng: random.Random) -> list[list[float]]:
    regions = []
    for _ in range(rng.randint(0, 3)):
        x0 = rng.randint(0, 50)
        y0 = rng.randint(0, 50)
        regions.append([float(x0), float(y0),
                        float(x0 + rng.randint(1, 12)), float(y0 + rng.randint(1, 12))])
    return regions


def to_lines(objs: list[dict]) -> list[str]:
    import json

    return [json.dumps(o) for o in objs]


def build_tables(objs: list[dict]) -> dict[str, dict[str, dict]]:
    """Raw dict tables for the naive oracle; never touches the engine."""
    tables: dict[str, dict[str, dict]] = {
        "patients": {}, "studies": {}, "images": {}, "annotations": {}}
    key = {"patient": ("patients", "patient_id"), "study": ("studies", "study_id"),
           "image": ("images", "image_id"), "annotation": ("annotations", "annotation_id")}
    for obj in objs:
        table, id_field = key[obj["entity"]]
        tables[table][obj[id_field]] = obj
    return tables


def merge_tables(per_site: list[dict[str, dict[str, dict]]]) -> dict[str, dict[str, dict]]:
    union: dict[str, dict[str, dict]] = {
        "patients": {}, "studies": {}, "images": {}, "annotations": {}}
    for tables in per_site:
        for entity, table in tables.items():
            union[entity].update(table)
    return union
