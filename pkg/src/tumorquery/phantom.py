"""Procedural phantoms: superellipsoid organs with embedded tumors.

Each tumor subtype has its own intensity offset and texture amplitude so that
subtypes inside one organ can be told apart from image statistics alone.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .taxonomy import DIAGNOSIS, Taxonomy, build_taxonomy
from .volume import REFERENCE_SPACING, LabelMap, Volume, save_case

MANIFEST_VERSION = 1
Range = tuple[float, float]


class InfeasibleSpecError(ValueError):
    """Raised when a tumor cannot be placed inside its host organ."""


@dataclass
class OrganSpec:
    center: tuple[Range, Range, Range]      # fraction of volume extent per axis
    radii_mm: tuple[Range, Range, Range]
    intensity: float
    exponent: Range = (2.0, 3.0)
    texture: float = 4.0


@dataclass
class TumorSpec:
    radii_mm: tuple[Range, Range, Range]
    intensity_offset: float
    texture: float
    exponent: Range = (2.0, 2.0)


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int]
    organs: dict[str, OrganSpec]
    tumors: dict[str, TumorSpec]            # keyed by diagnosis-space tumor class
    tumor_prob: dict[str, float]            # per host organ
    count: tuple[int, int] = (1, 1)         # tumors per diseased organ, inclusive
    spacing: tuple[float, float, float] = REFERENCE_SPACING
    background: float = -60.0
    noise: float = 10.0
    normal_prob: float = 0.0

    def validate(self, taxonomy: Taxonomy) -> None:
        if any(d < 8 for d in self.dims):
            raise ValueError(f"phantom dims must be >= 8, got {self.dims}")
        if not 0.0 <= self.normal_prob <= 1.0:
            raise ValueError("normal_prob must lie in [0, 1]")
        if not 1 <= self.count[0] <= self.count[1]:
            raise ValueError(f"invalid tumor count range {self.count}")
        if set(self.organs) != set(taxonomy.organs):
            raise ValueError("phantom spec organs do not match the taxonomy")
        for name, o in self.organs.items():
            if any(lo <= 0 or hi < lo for lo, hi in o.radii_mm):
                raise ValueError(f"organ {name!r}: radii must be positive ranges")
        for name in taxonomy.diagnosis_classes:
            if taxonomy.is_tumor(name) and name not in self.tumors:
                raise ValueError(f"no tumor spec for {name!r}")
        for name, t in self.tumors.items():
            host = taxonomy.tumor_organ.get(name)
            if host is None or name in taxonomy.majors:
                raise ValueError(f"{name!r} is not a diagnosis-space tumor class")
            if any(lo <= 0 or hi < lo for lo, hi in t.radii_mm):
                raise ValueError(f"tumor {name!r}: radii must be positive ranges")
            organ = self.organs[host]
            for (_, t_hi), (o_lo, _) in zip(t.radii_mm, organ.radii_mm):
                if t_hi >= o_lo:
                    raise InfeasibleSpecError(
                        f"tumor {name!r} radius {t_hi} mm does not fit inside organ {host!r} ({o_lo} mm)")
        for organ, p in self.tumor_prob.items():
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"tumor_prob[{organ!r}] must lie in [0, 1]")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        def tup(x):
            return tuple(tup(v) for v in x) if isinstance(x, list) else x
        d = dict(d)
        d["organs"] = {k: OrganSpec(**{f: tup(v) for f, v in o.items()}) for k, o in d["organs"].items()}
        d["tumors"] = {k: TumorSpec(**{f: tup(v) for f, v in t.items()}) for k, t in d["tumors"].items()}
        for key in ("dims", "count", "spacing"):
            d[key] = tup(d[key])
        return cls(**d)

    @property
    def digest(self) -> str:
        return _digest(self.to_dict())


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def default_phantom_spec(taxonomy: Taxonomy, dims=(64, 64, 64), spacing=REFERENCE_SPACING,
                         tumor_prob: float = 0.6, normal_prob: float = 0.25,
                         noise: float = 10.0) -> PhantomSpec:
    """Lay organs out on a coarse lattice and derive tumor sizes from organ sizes."""
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    n = len(taxonomy.organs)
    g = max(1, math.ceil(round(n ** (1 / 3), 9)))
    cells = [np.unravel_index(round(k * g ** 3 / n), (g, g, g)) for k in range(n)]
    cell = [d / g for d in dims]
    organ_int = np.linspace(40.0, 160.0, n) if n > 1 else np.array([80.0])

    organs, tumors = {}, {}
    for k, (name, c) in enumerate(zip(taxonomy.organs, cells)):
        center = tuple(((ci + 0.45) / g, (ci + 0.55) / g) for ci in c)
        radii = tuple((0.36 * cz * sz, 0.42 * cz * sz) for cz, sz in zip(cell, spacing))
        organs[name] = OrganSpec(center=center, radii_mm=radii, intensity=float(organ_int[k]))
        kinds = [t for t in taxonomy.diagnosis_classes if taxonomy.tumor_organ.get(t) == name]
        # organ radii are isotropic in voxels; tumors scale from the smallest one
        r_vox = min(lo / s for (lo, _), s in zip(radii, spacing))
        offsets = np.linspace(-70.0, 70.0, len(kinds)) if len(kinds) > 1 else [-70.0]
        for j, t in enumerate(kinds):
            tumors[t] = TumorSpec(
                radii_mm=tuple((0.42 * r_vox * s, 0.55 * r_vox * s) for s in spacing),
                intensity_offset=float(offsets[j]),
                texture=4.0 + 8.0 * j,
            )
    hosts = taxonomy.tumor_organs
    return PhantomSpec(dims=dims, organs=organs, tumors=tumors,
                       tumor_prob={o: tumor_prob for o in hosts}, spacing=spacing,
                       noise=noise, normal_prob=normal_prob)


@dataclass
class Phantom:
    volume: Volume
    labelmap: LabelMap
    labels: dict
    organ_masks: dict[str, np.ndarray] = field(repr=False)
    tumor_masks: list[tuple[str, str, np.ndarray]] = field(repr=False)   # (class, host organ, mask)


def _superellipsoid(dims, spacing, center_vox, radii_mm, p):
    grids = np.ogrid[tuple(slice(0, d) for d in dims)]
    acc = np.zeros(dims, dtype=np.float64)
    for g, c, s, r in zip(grids, center_vox, spacing, radii_mm):
        acc = acc + np.abs((g - c) * s / r) ** p
    return acc <= 1.0


def _texture(rng, dims, amplitude):
    if amplitude == 0:
        return np.zeros(dims)
    t = ndimage.gaussian_filter(rng.standard_normal(dims), sigma=1.0)
    return amplitude * t / max(t.std(), 1e-12)


def _uniform(rng, r: Range) -> float:
    return float(rng.uniform(r[0], r[1])) if r[1] > r[0] else float(r[0])


def generate_phantom(seed: int, spec: PhantomSpec, taxonomy: Taxonomy,
                     force_normal: Optional[bool] = None) -> Phantom:
    """Generate one labeled phantom; a pure function of its arguments.

    ``force_normal`` overrides the phantom spec's normal-control draw (used by
    :func:`make_dataset` to stratify normals across splits).
    """
    spec.validate(taxonomy)
    rng = np.random.default_rng(seed)
    dims, spacing = spec.dims, spec.spacing
    image = np.full(dims, spec.background, dtype=np.float64)
    labels = np.zeros(dims, dtype=np.uint8)

    normal_draw = rng.random() < spec.normal_prob
    normal = normal_draw if force_normal is None else force_normal

    organ_masks: dict[str, np.ndarray] = {}
    for name in taxonomy.organs:
        o = spec.organs[name]
        center = [_uniform(rng, r) * d for r, d in zip(o.center, dims)]
        radii = [_uniform(rng, r) for r in o.radii_mm]
        mask = _superellipsoid(dims, spacing, center, radii, _uniform(rng, o.exponent))
        for other in organ_masks.values():
            other &= ~mask
        organ_masks[name] = mask
        labels[mask] = taxonomy.class_id(name)
        image[mask] = o.intensity + _texture(rng, dims, o.texture)[mask]

    tumor_masks = []
    struct = ndimage.generate_binary_structure(3, 3)
    for organ in taxonomy.tumor_organs:
        hit = rng.random() < spec.tumor_prob.get(organ, 0.0)
        kinds = [t for t in taxonomy.diagnosis_classes if taxonomy.tumor_organ.get(t) == organ]
        kind = kinds[int(rng.integers(len(kinds)))]
        count = int(rng.integers(spec.count[0], spec.count[1] + 1))
        if normal or not hit:
            continue
        t = spec.tumors[kind]
        blocked = np.zeros(dims, dtype=bool)
        for _ in range(count):
            radii = [_uniform(rng, r) for r in t.radii_mm]
            p = _uniform(rng, t.exponent)
            mask = _place(rng, organ_masks[organ] & ~blocked, spacing, radii, p)
            if mask is None:
                raise InfeasibleSpecError(f"tumor {kind!r} does not fit inside organ {organ!r}")
            blocked |= ndimage.binary_dilation(mask, struct)
            tumor_masks.append((kind, organ, mask))
            labels[mask] = taxonomy.class_id(kind)
            base = spec.organs[organ].intensity + t.intensity_offset
            image[mask] = base + _texture(rng, dims, t.texture)[mask]

    image += rng.standard_normal(dims) * spec.noise
    present = sorted({k for k, _, _ in tumor_masks}, key=taxonomy.class_id)
    subtypes = {taxonomy.merge_map[k]: k for k in present if k in taxonomy.merge_map}
    return Phantom(
        volume=Volume(image.astype(np.float32), spacing),
        labelmap=LabelMap(labels, spacing),
        labels={"tumors": present, "subtypes": subtypes},
        organ_masks=organ_masks,
        tumor_masks=tumor_masks,
    )


def _place(rng, allowed, spacing, radii, p):
    """Return a tumor mask fully inside ``allowed``, or None when nothing fits."""
    half = [int(math.ceil(r / s)) + 1 for r, s in zip(radii, spacing)]
    local_dims = tuple(2 * h + 1 for h in half)
    local = _superellipsoid(local_dims, spacing, half, radii, p)
    offs = np.argwhere(local) - np.array(half)
    # containment test in voxel units: every offset lies within `reach` of the
    # center, and every voxel closer than dist(c) to c is allowed
    reach = float(np.sqrt((offs ** 2).sum(axis=1)).max())
    # pad so the volume border counts as outside
    dist = ndimage.distance_transform_edt(np.pad(allowed, 1))[1:-1, 1:-1, 1:-1]
    cand = np.argwhere(dist > reach)
    if len(cand) == 0:
        return None
    c = cand[int(rng.integers(len(cand)))]
    mask = np.zeros(allowed.shape, dtype=bool)
    pts = offs + c
    mask[pts[:, 0], pts[:, 1], pts[:, 2]] = True
    return mask


# ---------------------------------------------------------------------------
# datasets


@dataclass
class CaseRecord:
    case_id: str
    path: str
    sha256: str
    split: str
    labels: dict


@dataclass
class Manifest:
    seed: int
    phantom_spec: dict
    taxonomy: dict
    cases: list[CaseRecord]
    phantom_spec_hash: str = ""
    taxonomy_hash: str = ""
    root: Optional[Path] = field(default=None, compare=False)

    def to_dict(self) -> dict:
        return {
            "format_version": MANIFEST_VERSION,
            "seed": self.seed,
            "phantom_spec": self.phantom_spec,
            "phantom_spec_hash": self.phantom_spec_hash,
            "taxonomy": self.taxonomy,
            "taxonomy_hash": self.taxonomy_hash,
            "cases": [asdict(c) for c in self.cases],
        }

    @property
    def digest(self) -> str:
        return _digest(self.to_dict())

    def get_taxonomy(self) -> Taxonomy:
        return build_taxonomy(self.taxonomy)

    def split(self, name: str) -> list[CaseRecord]:
        return [c for c in self.cases if c.split == name]

    def case_path(self, rec: CaseRecord) -> Path:
        return (self.root or Path(".")) / rec.path

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def validate(self) -> None:
        ids = [c.case_id for c in self.cases]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate case ids in manifest")
        for c in self.cases:
            if not self.case_path(c).is_file():
                raise FileNotFoundError(f"case file missing: {self.case_path(c)}")


def load_manifest(path) -> Manifest:
    path = Path(path)
    d = json.loads(path.read_text())
    if d.get("format_version") != MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported manifest version {d.get('format_version')!r}")
    m = Manifest(
        seed=d["seed"], phantom_spec=d["phantom_spec"], taxonomy=d["taxonomy"],
        cases=[CaseRecord(**c) for c in d["cases"]],
        phantom_spec_hash=d["phantom_spec_hash"], taxonomy_hash=d["taxonomy_hash"],
        root=path.parent,
    )
    m.validate()
    return m


def case_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence(entropy=seed, spawn_key=(index,)).generate_state(1)[0])


def split_counts(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder allocation of ``n`` cases to splits."""
    raw = [f * n for f in fractions]
    counts = [int(math.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def make_dataset(spec: PhantomSpec, taxonomy: Taxonomy, n_cases: int, seed: int,
                 split_fractions: Sequence[float], out_dir,
                 split_names: Optional[Sequence[str]] = None) -> Manifest:
    """Generate ``n_cases`` phantoms into ``out_dir`` and write ``manifest.json``.

    Normal controls are stratified: each split receives
    ``round(normal_prob * split_size)`` tumor-free cases.
    """
    if n_cases < 1:
        raise ValueError("n_cases must be >= 1")
    if any(f < 0 for f in split_fractions) or abs(sum(split_fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must be non-negative and sum to 1")
    if split_names is None:
        split_names = {1: ["train"], 2: ["train", "test"], 3: ["train", "val", "test"]}.get(
            len(split_fractions)) or [f"split{i}" for i in range(len(split_fractions))]
    spec.validate(taxonomy)
    out = Path(out_dir)
    try:
        (out / "cases").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write to output directory {out}: {exc}") from exc

    perm = np.random.default_rng(seed).permutation(n_cases)
    split_of, normal_of = {}, {}
    start = 0
    for name, k in zip(split_names, split_counts(n_cases, split_fractions)):
        members = perm[start:start + k]
        n_normal = int(round(spec.normal_prob * k))
        for j, idx in enumerate(members):
            split_of[int(idx)] = name
            normal_of[int(idx)] = j < n_normal
        start += k

    records = []
    for i in range(n_cases):
        ph = generate_phantom(case_seed(seed, i), spec, taxonomy, force_normal=normal_of[i])
        rel = f"cases/case_{i:04d}.tqc"
        save_case(out / rel, ph.volume, ph.labelmap, taxonomy.digest)
        records.append(CaseRecord(
            case_id=f"case_{i:04d}", path=rel,
            sha256=hashlib.sha256((out / rel).read_bytes()).hexdigest(),
            split=split_of[i], labels=ph.labels,
        ))
    manifest = Manifest(
        seed=seed, phantom_spec=spec.to_dict(), taxonomy=taxonomy.to_config(), cases=records,
        phantom_spec_hash=spec.digest, taxonomy_hash=taxonomy.digest, root=out,
    )
    manifest.save(out / "manifest.json")
    (out / "taxonomy.json").write_text(taxonomy.to_json())
    return manifest


def scan_labels(labels: np.ndarray, taxonomy: Taxonomy) -> dict:
    """Patient-level labels recomputed from a diagnosis-space label map."""
    ids = set(np.unique(labels).tolist())
    present = [taxonomy.class_name(i) for i in sorted(ids) if i in taxonomy.tumor_ids(DIAGNOSIS)]
    return {"tumors": present,
            "subtypes": {taxonomy.merge_map[k]: k for k in present if k in taxonomy.merge_map}}
