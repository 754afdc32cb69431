"""Patient-, lesion- and voxel-level evaluation plus the report document."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, astuple, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .inference import DEFAULT_CONNECTIVITY, LesionInstance, connected_components
from .taxonomy import DETECTION, DIAGNOSIS, Taxonomy

REPORT_VERSION = 1
TIE_BREAK_RULE = "largest voxel count; ties -> lower class id -> earlier scan order"
REQUIRED_METADATA = ("checkpoint_hash", "manifest_hash", "config", "min_voxels", "connectivity", "tie_break")


def _ratio(num: int, den: int) -> Optional[float]:
    return None if den == 0 else num / den


def _mean(values) -> Optional[float]:
    values = [v for v in values if v is not None]
    return math.fsum(values) / len(values) if values else None


# ---------------------------------------------------------------------------
# patient-level detection


def patient_detection_eval(pred_instances: Mapping[str, Sequence[LesionInstance]],
                           gt_maps: Mapping[str, np.ndarray], taxonomy: Taxonomy) -> dict:
    """Per-organ sensitivity under the any-overlap rule and pooled specificity.

    ``pred_instances`` holds detection-space instances per case id;
    ``gt_maps`` holds diagnosis-space ground truth per case id.
    """
    if set(pred_instances) != set(gt_maps):
        missing = sorted(set(gt_maps) ^ set(pred_instances))
        raise ValueError(f"prediction and ground-truth case ids differ: {missing[:5]}")
    organs = taxonomy.tumor_organs
    hits = {o: 0 for o in organs}
    bearing = {o: 0 for o in organs}
    negatives = true_negatives = 0
    all_tumor = taxonomy.tumor_ids(DIAGNOSIS)
    for cid in sorted(gt_maps):
        gt = np.asarray(gt_maps[cid])
        insts = pred_instances[cid]
        if not np.isin(gt, all_tumor).any():
            negatives += 1
            true_negatives += int(len(insts) == 0)
            continue
        merged = taxonomy.merge_labelmap(gt)
        for o in organs:
            ids = taxonomy.organ_tumor_ids(o, DETECTION)
            gt_mask = np.isin(merged, ids)
            if not gt_mask.any():
                continue
            bearing[o] += 1
            hits[o] += int(any(inst.class_id in ids and gt_mask[tuple(inst.coords.T)].any()
                               for inst in insts))
    sens = {o: _ratio(hits[o], bearing[o]) for o in organs}
    return {
        "sensitivity": sens,
        "average_sensitivity": _mean(sens.values()),
        "specificity": _ratio(true_negatives, negatives),
        "detected": hits,
        "tumor_cases": bearing,
        "true_negatives": true_negatives,
        "tumor_free_cases": negatives,
    }


# ---------------------------------------------------------------------------
# lesion-level detection


@dataclass
class LesionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    n_gt: int = 0
    n_pred: int = 0

    def __add__(self, other: "LesionCounts") -> "LesionCounts":
        return LesionCounts(*(a + b for a, b in zip(astuple(self), astuple(other))))

    @property
    def precision(self) -> Optional[float]:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> Optional[float]:
        return _ratio(self.n_gt - self.fn, self.n_gt)

    def to_dict(self) -> dict:
        return {**asdict(self), "precision": self.precision, "recall": self.recall}


def lesion_detection_eval(pred_map: np.ndarray, gt_map: np.ndarray, taxonomy: Taxonomy,
                          pred_space: str = DETECTION, min_voxels: int = 0,
                          connectivity: int = DEFAULT_CONNECTIVITY) -> LesionCounts:
    """Class-agnostic lesion matching on one case.

    Both maps are binarized to "any tumor". Predicted components below
    ``min_voxels`` are dropped; every ground-truth component counts. A
    predicted lesion touching any ground-truth lesion is a TP, so one
    ground-truth lesion may be matched by several TPs.
    """
    if pred_map.shape != gt_map.shape:
        raise ValueError("prediction and ground truth dims differ")
    pred_bin = np.isin(pred_map, taxonomy.tumor_ids(pred_space))
    gt_bin = np.isin(gt_map, taxonomy.tumor_ids(DIAGNOSIS))
    p_lab, n_p = connected_components(pred_bin, connectivity)
    g_lab, n_g = connected_components(gt_bin, connectivity)
    if n_p:
        sizes = np.bincount(p_lab.ravel(), minlength=n_p + 1)
        small = np.flatnonzero(sizes < min_voxels)
        small = small[small > 0]
        if len(small):
            p_lab = np.where(np.isin(p_lab, small), 0, p_lab)
        kept = [k for k in range(1, n_p + 1) if sizes[k] >= min_voxels]
    else:
        kept = []
    both = (p_lab > 0) & (g_lab > 0)
    pairs = np.unique(np.stack([p_lab[both], g_lab[both]]), axis=1) if both.any() else np.zeros((2, 0), int)
    matched_pred = set(pairs[0].tolist())
    matched_gt = set(pairs[1].tolist())
    tp = sum(1 for k in kept if k in matched_pred)
    return LesionCounts(tp=tp, fp=len(kept) - tp, fn=n_g - len(matched_gt), n_gt=n_g, n_pred=len(kept))


# ---------------------------------------------------------------------------
# voxel-level Dice


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    den = int(p.sum()) + int(g.sum())
    return 1.0 if den == 0 else 2.0 * int((p & g).sum()) / den


def organ_groups(taxonomy: Taxonomy) -> dict[str, tuple[list[int], list[int]]]:
    """Per organ: detection-space prediction ids and diagnosis-space GT ids of its tumors."""
    return {o: (taxonomy.organ_tumor_ids(o, DETECTION), taxonomy.organ_tumor_ids(o, DIAGNOSIS))
            for o in taxonomy.tumor_organs}


def subtype_groups(taxonomy: Taxonomy) -> dict[str, tuple[list[int], list[int]]]:
    """Per diagnosis-space tumor class, matched only to itself."""
    return {taxonomy.class_name(c): ([c], [c]) for c in taxonomy.tumor_ids(DIAGNOSIS)}


def dice_eval(pairs: Sequence[tuple[np.ndarray, np.ndarray]],
              groups: Mapping[str, tuple[Sequence[int], Sequence[int]]]) -> dict:
    """Macro Dice per group over cases whose ground truth contains the group."""
    per = {g: [] for g in groups}
    for pred, gt in pairs:
        if pred.shape != gt.shape:
            raise ValueError("prediction and ground truth dims differ")
        for g, (p_ids, g_ids) in groups.items():
            gm = np.isin(gt, g_ids)
            if gm.any():
                per[g].append(dice(np.isin(pred, p_ids), gm))
    return {g: {"dice": _mean(v), "n_cases": len(v), "per_case": v} for g, v in per.items()}


# ---------------------------------------------------------------------------
# diagnosis


def diagnosis_eval(preds: Mapping[str, Mapping[str, Optional[int]]],
                   gts: Mapping[str, Mapping[str, int]], taxonomy: Taxonomy) -> dict:
    """Per-subtype sensitivity of the patient-level subtype call.

    ``gts[case][major]`` is the ground-truth subtype id for each diseased
    major; a missing prediction counts as wrong.
    """
    hits: dict[int, int] = {c: 0 for c in taxonomy.tumor_ids(DIAGNOSIS) if taxonomy.class_name(c) in taxonomy.merge_map}
    totals = dict.fromkeys(hits, 0)
    for cid, case_gt in gts.items():
        case_pred = preds.get(cid, {})
        for major, gt_id in case_gt.items():
            totals[gt_id] += 1
            hits[gt_id] += int(case_pred.get(major) == gt_id)
    sens = {taxonomy.class_name(c): _ratio(hits[c], totals[c]) for c in hits}
    per_major = {m: _mean(sens[taxonomy.class_name(c)] for c in taxonomy.group_ids(m)) for m in taxonomy.majors}
    n = sum(totals.values())
    majority = sum(max(totals[c] for c in taxonomy.group_ids(m)) for m in taxonomy.majors)
    return {
        "sensitivity": sens,
        "organ_average": per_major,
        "accuracy": _ratio(sum(hits.values()), n),
        "majority_baseline": _ratio(majority, n),
        "cases": {taxonomy.class_name(c): totals[c] for c in totals},
    }


# ---------------------------------------------------------------------------
# report


class ReportError(ValueError):
    pass


@dataclass
class EvalReport:
    patient_detection: dict
    lesion_detection: dict
    dice_organ: dict
    dice_subtype: dict
    diagnosis: dict
    metadata: dict = field(default_factory=dict)

    def validate(self) -> None:
        missing = [k for k in REQUIRED_METADATA if k not in self.metadata]
        if missing:
            raise ReportError(f"report metadata missing fields: {missing}")

    def to_json(self) -> str:
        self.validate()
        doc = {"format_version": REPORT_VERSION, **asdict(self)}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        doc = json.loads(text)
        if doc.pop("format_version", None) != REPORT_VERSION:
            raise ReportError("unsupported report version")
        rep = cls(**doc)
        rep.validate()
        return rep

    def headline(self) -> dict:
        dice_vals = [v["dice"] for v in self.dice_organ.values()]
        return {
            "Sensitivity": self.patient_detection.get("average_sensitivity"),
            "Specificity": self.patient_detection.get("specificity"),
            "Dice": _mean(dice_vals),
            "Precision": self.lesion_detection.get("precision"),
            "Recall": self.lesion_detection.get("recall"),
            "Diagnosis accuracy": self.diagnosis.get("accuracy"),
        }


def emit_report(path, report: EvalReport) -> None:
    try:
        Path(path).write_text(report.to_json())
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc


def load_report(path) -> EvalReport:
    return EvalReport.from_json(Path(path).read_text())


def plot_report(report: EvalReport, out_dir) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    panels = {
        "sensitivity.png": ("Patient-level sensitivity", report.patient_detection["sensitivity"]),
        "dice.png": ("Tumor Dice per organ", {k: v["dice"] for k, v in report.dice_organ.items()}),
        "diagnosis.png": ("Subtype sensitivity", report.diagnosis["sensitivity"]),
    }
    paths = []
    for name, (title, values) in panels.items():
        keys = list(values)
        fig, ax = plt.subplots(figsize=(max(3, 0.8 * len(keys) + 1), 3))
        ax.bar(keys, [values[k] or 0.0 for k in keys])
        ax.set_ylim(0, 1)
        ax.set_title(title)
        ax.tick_params(axis="x", rotation=45)
        fig.tight_layout()
        fig.savefig(out_dir / name)
        plt.close(fig)
        paths.append(out_dir / name)
    return paths


# ---------------------------------------------------------------------------
# convenience driver


def evaluate(cases: Sequence[dict], taxonomy: Taxonomy, metadata: dict,
             min_voxels: int, connectivity: int = DEFAULT_CONNECTIVITY) -> EvalReport:
    """Build a report from per-case dicts.

    Each case dict has ``case_id``, ``gt`` (diagnosis-space map),
    ``det``/``diag`` (predicted argmax maps), ``det_instances`` and
    ``diagnosis`` (major -> predicted subtype id or None).
    """
    gt_maps = {c["case_id"]: c["gt"] for c in cases}
    patient = patient_detection_eval({c["case_id"]: c["det_instances"] for c in cases}, gt_maps, taxonomy)
    counts = LesionCounts()
    for c in cases:
        counts = counts + lesion_detection_eval(c["det"], c["gt"], taxonomy, DETECTION, min_voxels, connectivity)
    d_org = dice_eval([(c["det"], c["gt"]) for c in cases], organ_groups(taxonomy))
    d_sub = dice_eval([(c["diag"], c["gt"]) for c in cases], subtype_groups(taxonomy))
    gts = {}
    for c in cases:
        ids = set(np.unique(c["gt"]).tolist())
        gts[c["case_id"]] = {m: g for m in taxonomy.majors for g in taxonomy.group_ids(m) if g in ids}
    diag = diagnosis_eval({c["case_id"]: c["diagnosis"] for c in cases}, gts, taxonomy)
    meta = {"min_voxels": min_voxels, "connectivity": connectivity, "tie_break": TIE_BREAK_RULE,
            "dice": "macro over cases containing the group", **metadata}
    return EvalReport(patient, counts.to_dict(), d_org, d_sub, diag, meta)
