"""Whole-volume prediction and instance-level post-processing."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from scipy import ndimage

from .taxonomy import DETECTION, DIAGNOSIS, Taxonomy
from .volume import REFERENCE_SPACING

DEFAULT_MIN_VOXELS = 200
DEFAULT_CONNECTIVITY = 26
DEFAULT_SIGMA_FRACTION = 0.125

Predictor = Callable[[torch.Tensor], tuple[torch.Tensor, torch.Tensor]]


# ---------------------------------------------------------------------------
# sliding window


def gaussian_weight(dims: Sequence[int], sigma_fraction: float = DEFAULT_SIGMA_FRACTION) -> np.ndarray:
    """Separable Gaussian centered on the window, scaled so its maximum is 1.

    The per-axis standard deviation is ``sigma_fraction * dims[axis]``.
    """
    if sigma_fraction <= 0:
        raise ValueError("sigma_fraction must be positive")
    w = np.ones((), dtype=np.float64)
    for n in dims:
        if n < 1:
            raise ValueError(f"window dims must be >= 1, got {tuple(dims)}")
        i = np.arange(n, dtype=np.float64)
        sigma = sigma_fraction * n
        w = np.multiply.outer(w, np.exp(-((i - (n - 1) / 2.0) ** 2) / (2.0 * sigma ** 2)))
    return w / w.max()


def window_starts(size: int, win: int, step: float) -> list[int]:
    if win > size:
        raise ValueError(f"window {win} larger than volume extent {size}")
    if size == win:
        return [0]
    n = math.ceil((size - win) / (win * step)) + 1
    return sorted({int(round(v)) for v in np.linspace(0, size - win, n)})


def _flip_sets(tta: bool):
    if not tta:
        return [()]
    axes = (2, 3, 4)
    return [c for r in range(4) for c in itertools.combinations(axes, r)]


def sliding_window_predict(predict: Predictor, volume: np.ndarray, window: Sequence[int],
                           step: float = 0.5, gaussian: bool = True, tta: bool = True,
                           sigma_fraction: float = DEFAULT_SIGMA_FRACTION):
    """Blend overlapping window predictions over the whole volume.

    ``predict`` maps a (1, 1, *window) tensor to ``(det, diag)`` probability
    tensors of shape (1, C, *window). Returns float32 arrays ``(det, diag)``
    of shape (C, D, H, W). Accumulation is done in float64 so that blending a
    constant reproduces it exactly after the float32 cast.
    """
    volume = np.asarray(volume, dtype=np.float32)
    window = tuple(int(w) for w in window)
    orig = volume.shape
    pads = [(0, 0)] * 3
    if any(s < w for s, w in zip(orig, window)):
        pads = [((w - s) // 2, w - s - (w - s) // 2) if s < w else (0, 0) for s, w in zip(orig, window)]
        volume = np.pad(volume, pads, mode="reflect")
    dims = volume.shape
    weight = gaussian_weight(window, sigma_fraction) if gaussian else np.ones(window)
    starts = [window_starts(s, w, step) for s, w in zip(dims, window)]
    flips = _flip_sets(tta)

    acc_det = acc_diag = None
    wsum = np.zeros(dims, dtype=np.float64)
    for z, y, x in itertools.product(*starts):
        sl = (slice(z, z + window[0]), slice(y, y + window[1]), slice(x, x + window[2]))
        patch = torch.from_numpy(np.ascontiguousarray(volume[sl]))[None, None]
        det = diag = 0.0
        for axes in flips:
            inp = torch.flip(patch, axes) if axes else patch
            with torch.no_grad():
                p_det, p_diag = predict(inp)
            if axes:
                p_det, p_diag = torch.flip(p_det, axes), torch.flip(p_diag, axes)
            det = det + p_det[0].double().numpy()
            diag = diag + p_diag[0].double().numpy()
        det, diag = det / len(flips), diag / len(flips)
        if acc_det is None:
            acc_det = np.zeros((det.shape[0],) + dims)
            acc_diag = np.zeros((diag.shape[0],) + dims)
        acc_det[(slice(None),) + sl] += weight * det
        acc_diag[(slice(None),) + sl] += weight * diag
        wsum[sl] += weight
    if not (wsum > 0).all():
        raise RuntimeError("sliding windows left voxels uncovered")
    crop = (slice(None),) + tuple(slice(a, a + s) for (a, _), s in zip(pads, orig))
    det = (acc_det / wsum)[crop].astype(np.float32)
    diag = (acc_diag / wsum)[crop].astype(np.float32)
    return det, diag


# ---------------------------------------------------------------------------
# instances


def _structure(connectivity: int):
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


def connected_components(mask: np.ndarray, connectivity: int = DEFAULT_CONNECTIVITY):
    """Label maximal connected foreground sets.

    Returns ``(labels, n)`` with labels 1..n numbered by the raster-scan
    position of each component's first voxel.
    """
    struct = _structure(connectivity)
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=struct)
    if n > 1:
        flat = labels.ravel()
        ids, first = np.unique(flat, return_index=True)
        keep = ids > 0
        order = ids[keep][np.argsort(first[keep], kind="stable")]
        lut = np.zeros(n + 1, dtype=labels.dtype)
        lut[order] = np.arange(1, n + 1, dtype=labels.dtype)
        labels = lut[labels]
    return labels, int(n)


@dataclass
class LesionInstance:
    class_id: int
    space: str
    coords: np.ndarray            # (N, 3) voxel indices in raster order
    voxel_count: int
    volume_mm3: float
    bbox: tuple                   # ((z0, y0, x0), (z1, y1, x1)), exclusive upper

    def to_dict(self, taxonomy: Optional[Taxonomy] = None) -> dict:
        d = {
            "class_id": self.class_id,
            "space": self.space,
            "voxel_count": self.voxel_count,
            "volume_mm3": self.volume_mm3,
            "bbox": [list(self.bbox[0]), list(self.bbox[1])],
        }
        if taxonomy is not None:
            d["class_name"] = taxonomy.class_name(self.class_id, self.space)
        return d

    def mask(self, dims) -> np.ndarray:
        m = np.zeros(dims, dtype=bool)
        m[tuple(self.coords.T)] = True
        return m


def scaled_min_voxels(spacing, base: int = DEFAULT_MIN_VOXELS, reference=REFERENCE_SPACING) -> int:
    """Size threshold rescaled so it covers the same physical volume as ``base`` voxels at ``reference``."""
    return int(round(base * float(np.prod(reference)) / float(np.prod(spacing))))


def extract_instances(labelmap: np.ndarray, taxonomy: Taxonomy, space: str = DIAGNOSIS,
                      min_voxels: int = DEFAULT_MIN_VOXELS, connectivity: int = DEFAULT_CONNECTIVITY,
                      spacing=REFERENCE_SPACING) -> list[LesionInstance]:
    """Connected components of every tumor class, minus those below ``min_voxels``.

    Ordered by class id, then by component scan order.
    """
    labelmap = np.asarray(labelmap)
    voxel_mm3 = float(np.prod(spacing))
    out = []
    for cid in taxonomy.tumor_ids(space):
        mask = labelmap == cid
        if not mask.any():
            continue
        comp, n = connected_components(mask, connectivity)
        if n == 0:
            continue
        counts = np.bincount(comp.ravel(), minlength=n + 1)
        coords_all = np.argwhere(comp > 0)
        lab_all = comp[tuple(coords_all.T)]
        order = np.argsort(lab_all, kind="stable")
        groups = np.split(coords_all[order], np.cumsum(counts[1:])[:-1])
        for k, coords in enumerate(groups, start=1):
            if counts[k] < min_voxels:
                continue
            out.append(LesionInstance(
                class_id=cid, space=space, coords=coords, voxel_count=int(counts[k]),
                volume_mm3=float(counts[k]) * voxel_mm3,
                bbox=(tuple(int(v) for v in coords.min(0)), tuple(int(v) + 1 for v in coords.max(0))),
            ))
    return out


def instances_to_map(instances: Sequence[LesionInstance], dims) -> np.ndarray:
    out = np.zeros(dims, dtype=np.uint8)
    for inst in instances:
        out[tuple(inst.coords.T)] = inst.class_id
    return out


def patient_diagnosis(instances: Sequence[LesionInstance], taxonomy: Taxonomy) -> dict[str, Optional[int]]:
    """Per major tumor class, the subtype of the largest diagnosis-space instance.

    Ties on voxel count go to the lower class id, then to the earlier
    instance in scan order. Majors without instances map to None.
    """
    result: dict[str, Optional[int]] = {}
    for major in taxonomy.majors:
        group = set(taxonomy.group_ids(major))
        best = None
        for pos, inst in enumerate(instances):
            if inst.space != DIAGNOSIS or inst.class_id not in group:
                continue
            key = (-inst.voxel_count, inst.class_id, pos)
            if best is None or key < best[0]:
                best = (key, inst.class_id)
        result[major] = None if best is None else best[1]
    return result


# ---------------------------------------------------------------------------
# per-case driver


@dataclass
class CasePrediction:
    det: np.ndarray               # argmax labels, detection space
    diag: np.ndarray              # argmax labels, diagnosis space
    det_instances: list[LesionInstance]
    diag_instances: list[LesionInstance]
    diagnosis: dict


def predict_volume(model, volume: np.ndarray, window: Sequence[int], step: float = 0.5,
                   gaussian: bool = True, tta: bool = True, min_voxels: int = DEFAULT_MIN_VOXELS,
                   connectivity: int = DEFAULT_CONNECTIVITY, spacing=REFERENCE_SPACING) -> CasePrediction:
    predict = model.predict if hasattr(model, "predict") else model
    det_p, diag_p = sliding_window_predict(predict, volume, window, step, gaussian, tta)
    det = det_p.argmax(0).astype(np.uint8)
    diag = diag_p.argmax(0).astype(np.uint8)
    tax = model.taxonomy
    det_inst = extract_instances(det, tax, DETECTION, min_voxels, connectivity, spacing)
    diag_inst = extract_instances(diag, tax, DIAGNOSIS, min_voxels, connectivity, spacing)
    return CasePrediction(det, diag, det_inst, diag_inst, patient_diagnosis(diag_inst, tax))
