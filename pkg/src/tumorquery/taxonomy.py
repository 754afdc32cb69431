"""Class hierarchy for organs, major tumors and tumor subtypes.

Two label spaces are derived from one hierarchy:

* detection space: ``[background] + shared + majors``
* diagnosis space: ``[background] + shared + flatten(subtype_groups)``

Shared classes (organs and tumors without subtypes) get the same id in both
spaces, so mapping a diagnosis label to the detection space only touches
subtype ids.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

BACKGROUND = "background"

DETECTION = "detection"
DIAGNOSIS = "diagnosis"


class TaxonomyError(ValueError):
    pass


@dataclass(frozen=True)
class Taxonomy:
    organs: tuple[str, ...]
    tumors_flat: tuple[str, ...]
    shared: tuple[str, ...]
    majors: tuple[str, ...]
    subtype_groups: tuple[tuple[str, ...], ...]
    merge_map: Mapping[str, str]
    tumor_organ: Mapping[str, str]
    _lut: np.ndarray = field(repr=False, compare=False, default=None)

    # ---- label spaces -------------------------------------------------
    @property
    def subtypes(self) -> tuple[str, ...]:
        return tuple(s for g in self.subtype_groups for s in g)

    @property
    def detection_classes(self) -> tuple[str, ...]:
        return (BACKGROUND,) + self.shared + self.majors

    @property
    def diagnosis_classes(self) -> tuple[str, ...]:
        return (BACKGROUND,) + self.shared + self.subtypes

    def classes(self, space: str) -> tuple[str, ...]:
        if space == DETECTION:
            return self.detection_classes
        if space == DIAGNOSIS:
            return self.diagnosis_classes
        raise ValueError(f"unknown label space {space!r}")

    @property
    def n_detection(self) -> int:
        return len(self.detection_classes)

    @property
    def n_diagnosis(self) -> int:
        return len(self.diagnosis_classes)

    def class_id(self, name: str, space: str = DIAGNOSIS) -> int:
        try:
            return self.classes(space).index(name)
        except ValueError:
            raise KeyError(f"{name!r} is not a {space}-space class") from None

    def class_name(self, class_id: int, space: str = DIAGNOSIS) -> str:
        names = self.classes(space)
        if not 0 <= class_id < len(names):
            raise IndexError(f"class id {class_id} out of range for {space} space")
        return names[class_id]

    # ---- groupings ----------------------------------------------------
    def is_tumor(self, name: str) -> bool:
        return name in self.tumor_organ

    def tumor_ids(self, space: str) -> list[int]:
        """Ids of every tumor class (shared tumors, majors or subtypes) in ``space``."""
        return [i for i, c in enumerate(self.classes(space)) if c in self.tumor_organ]

    def organ_tumor_ids(self, organ: str, space: str) -> list[int]:
        return [i for i, c in enumerate(self.classes(space)) if self.tumor_organ.get(c) == organ]

    @property
    def tumor_organs(self) -> tuple[str, ...]:
        """Organs that host at least one tumor class, in organ declaration order."""
        hosts = set(self.tumor_organ.values())
        return tuple(o for o in self.organs if o in hosts)

    def group_ids(self, major: str) -> list[int]:
        """Diagnosis-space ids of the subtypes of ``major``."""
        group = self.subtype_groups[self.majors.index(major)]
        return [self.class_id(s, DIAGNOSIS) for s in group]

    # ---- mappings -----------------------------------------------------
    @property
    def merge_lut(self) -> np.ndarray:
        """Lookup table from diagnosis-space id to detection-space id."""
        return self._lut

    def subtype_to_major(self, label: int) -> int:
        if not 0 <= int(label) < self.n_diagnosis:
            raise IndexError(f"label {label} out of range for diagnosis space")
        return int(self._lut[int(label)])

    def merge_labelmap(self, diag_map: np.ndarray) -> np.ndarray:
        diag_map = np.asarray(diag_map)
        if diag_map.size and (diag_map.min() < 0 or diag_map.max() >= self.n_diagnosis):
            raise ValueError("label map holds values outside the diagnosis space")
        return self._lut[diag_map].astype(diag_map.dtype, copy=False)

    # ---- serialization ------------------------------------------------
    def to_config(self) -> dict:
        tumors = []
        seen_major = set()
        for name in self.tumors_flat:
            major = self.merge_map.get(name)
            if major is None:
                tumors.append({"name": name, "organ": self.tumor_organ[name]})
            elif major not in seen_major:
                seen_major.add(major)
                group = self.subtype_groups[self.majors.index(major)]
                tumors.append({"name": major, "organ": self.tumor_organ[major],
                               "subtypes": list(group)})
        return {"organs": list(self.organs), "tumors": tumors}

    def to_json(self) -> str:
        doc = {
            "organs": list(self.organs),
            "tumors": self.to_config()["tumors"],
            "detection_classes": list(self.detection_classes),
            "diagnosis_classes": list(self.diagnosis_classes),
            "merge_map": dict(self.merge_map),
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    @classmethod
    def from_json(cls, text: str) -> "Taxonomy":
        doc = json.loads(text)
        return build_taxonomy({"organs": doc["organs"], "tumors": doc["tumors"]})


def build_taxonomy(config: Mapping) -> Taxonomy:
    """Validate a hierarchy description and assign class ids.

    ``config`` has ``organs`` (list of names) and ``tumors``, a list of
    ``{"name", "organ", "subtypes"?}`` records in declaration order. A tumor
    with ``subtypes`` becomes a major class; all others are shared.
    """
    organs = tuple(config.get("organs", ()))
    if not organs:
        raise TaxonomyError("at least one organ is required")
    names: list[str] = list(organs)
    shared_tumors: list[str] = []
    majors: list[str] = []
    groups: list[tuple[str, ...]] = []
    tumors_flat: list[str] = []
    merge_map: dict[str, str] = {}
    tumor_organ: dict[str, str] = {}

    for rec in config.get("tumors", ()):
        name, organ = rec["name"], rec["organ"]
        if organ not in organs:
            raise TaxonomyError(f"tumor {name!r} references unknown organ {organ!r}")
        subtypes = rec.get("subtypes")
        names.append(name)
        tumor_organ[name] = organ
        if subtypes is None:
            shared_tumors.append(name)
            tumors_flat.append(name)
            continue
        subtypes = tuple(subtypes)
        if len(subtypes) < 2:
            raise TaxonomyError(
                f"major tumor {name!r} needs at least 2 subtypes; declare it without subtypes instead")
        majors.append(name)
        groups.append(subtypes)
        for s in subtypes:
            names.append(s)
            tumors_flat.append(s)
            merge_map[s] = name
            tumor_organ[s] = organ

    dup = sorted({n for n in names if names.count(n) > 1})
    if dup:
        raise TaxonomyError(f"duplicate class names: {dup}")
    if BACKGROUND in names:
        raise TaxonomyError(f"{BACKGROUND!r} is reserved")

    shared = organs + tuple(shared_tumors)
    det = (BACKGROUND,) + shared + tuple(majors)
    diag = (BACKGROUND,) + shared + tuple(s for g in groups for s in g)
    lut = np.array([det.index(merge_map.get(c, c)) for c in diag], dtype=np.int64)
    lut.setflags(write=False)
    return Taxonomy(
        organs=organs,
        tumors_flat=tuple(tumors_flat),
        shared=shared,
        majors=tuple(majors),
        subtype_groups=tuple(groups),
        merge_map=dict(merge_map),
        tumor_organ=dict(tumor_organ),
        _lut=lut,
    )


def load_taxonomy(path) -> Taxonomy:
    with open(path) as fh:
        return Taxonomy.from_json(fh.read())


CLINICAL_CONFIG = {
    "organs": ["breast", "lung", "kidney", "pancreas", "esophagus", "liver", "stomach", "colorectum"],
    "tumors": [
        {"name": "lung cancer", "organ": "lung"},
        {"name": "breast cancer", "organ": "breast"},
        {"name": "colorectal cancer", "organ": "colorectum"},
        {"name": "kidney tumor/cyst", "organ": "kidney"},
        {"name": "pancreas tumor", "organ": "pancreas", "subtypes": ["PDAC", "nonPDAC"]},
        {"name": "liver tumor", "organ": "liver", "subtypes": ["HCC", "ICC", "metastasis", "hemangioma"]},
        {"name": "stomach tumor", "organ": "stomach", "subtypes": ["GC", "nonGC"]},
        {"name": "esophagus tumor", "organ": "esophagus", "subtypes": ["EC", "nonEC"]},
    ],
}

TOY_CONFIG = {
    "organs": ["liver", "kidney"],
    "tumors": [
        {"name": "liver tumor", "organ": "liver", "subtypes": ["HCC", "ICC"]},
        {"name": "kidney tumor", "organ": "kidney"},
    ],
}


def clinical_taxonomy() -> Taxonomy:
    return build_taxonomy(CLINICAL_CONFIG)


def toy_taxonomy() -> Taxonomy:
    return build_taxonomy(TOY_CONFIG)


def taxonomy_from_name(name: str) -> Taxonomy:
    if name == "clinical":
        return clinical_taxonomy()
    if name == "toy":
        return toy_taxonomy()
    return load_taxonomy(name)


def resolve_names(t: Taxonomy, names: Sequence[str], space: str = DIAGNOSIS) -> list[int]:
    return [t.class_id(n, space) for n in names]
