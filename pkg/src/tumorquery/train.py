"""Patch sampling, augmentation and the optimization loop."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .decode import dual_loss
from .model import ModelConfig, TumorQueryModel, save_checkpoint
from .phantom import Manifest
from .volume import load_case

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    patch: tuple = (32, 32, 32)
    batch_size: int = 2
    lr: float = 2e-3
    weight_decay: float = 1e-5
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float = 12.0        # max global grad norm; 0 disables
    epochs: int = 1
    steps_per_epoch: int = 1500
    seed: int = 0
    balanced: bool = True
    flip: bool = True
    noise_std: float = 0.0
    mode: str = "hierarchy"
    d: int = 16
    channels: tuple = (8, 16, 32, 64)
    strides: str = "isotropic"
    deterministic: bool = True
    split: str = "train"

    def __post_init__(self):
        self.patch = tuple(int(p) for p in self.patch)
        self.betas = tuple(self.betas)
        self.channels = tuple(self.channels)
        if len(self.patch) != 3 or any(p <= 0 or p % 8 for p in self.patch):
            raise ValueError(f"patch dims must be positive multiples of 8, got {self.patch}")
        if not self.lr >= 0:
            raise ValueError("learning rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def model_config(self, taxonomy_config: dict) -> ModelConfig:
        return ModelConfig(taxonomy=taxonomy_config, mode=self.mode, d=self.d,
                           channels=self.channels, strides=self.strides, seed=self.seed)


# ---------------------------------------------------------------------------
# sampling


@dataclass
class CaseData:
    volume: np.ndarray
    labels: np.ndarray
    class_voxels: dict = field(default_factory=dict)

    @classmethod
    def build(cls, volume: np.ndarray, labels: np.ndarray) -> "CaseData":
        cv = {int(c): np.argwhere(labels == c) for c in np.unique(labels) if c != 0}
        return cls(volume, labels, cv)


def sample_patch(case: CaseData, rng: np.random.Generator, patch: Sequence[int], balanced: bool = True,
                 target: Optional[int] = None):
    """Crop ``patch`` from a case. Returns ``(vol, labels, target_class, start)``.

    Balanced sampling picks a foreground class uniformly among those present
    (or uses ``target``) and draws the crop so that a random voxel of that
    class lies inside it. ``target_class`` is None for uniform crops.
    """
    dims = case.volume.shape
    if any(p > d for p, d in zip(patch, dims)):
        raise ValueError(f"patch {tuple(patch)} larger than volume {dims}")
    if target is not None and target not in case.class_voxels:
        raise ValueError(f"class {target} not present in case")
    if balanced and case.class_voxels:
        if target is None:
            classes = sorted(case.class_voxels)
            target = classes[int(rng.integers(len(classes)))]
        vox = case.class_voxels[target]
        v = vox[int(rng.integers(len(vox)))]
        start = [int(rng.integers(max(0, c - p + 1), min(c, d - p) + 1)) for c, p, d in zip(v, patch, dims)]
    else:
        target = None
        start = [int(rng.integers(0, d - p + 1)) for p, d in zip(patch, dims)]
    sl = tuple(slice(s, s + p) for s, p in zip(start, patch))
    return case.volume[sl], case.labels[sl], target, tuple(start)


class CaseSampler:
    """Draws (case, class) pairs for a batch.

    Balanced mode picks a foreground class uniformly over all classes in the
    training set and then a case containing it, so rare subtypes are seen as
    often as common ones. Otherwise cases are drawn uniformly.
    """

    def __init__(self, cases: Sequence[CaseData], balanced: bool = True):
        self.cases = list(cases)
        self.balanced = balanced
        self.by_class: dict[int, list[int]] = {}
        for i, c in enumerate(self.cases):
            for k in c.class_voxels:
                self.by_class.setdefault(k, []).append(i)
        self.classes = sorted(self.by_class)

    def draw(self, rng: np.random.Generator) -> tuple[CaseData, Optional[int]]:
        if not self.balanced or not self.classes:
            return self.cases[int(rng.integers(len(self.cases)))], None
        k = self.classes[int(rng.integers(len(self.classes)))]
        members = self.by_class[k]
        return self.cases[members[int(rng.integers(len(members)))]], k


def augment(volume: np.ndarray, labels: np.ndarray, rng: np.random.Generator,
            flip: bool = True, noise_std: float = 0.0):
    """Random joint axis flips and additive Gaussian noise on the volume."""
    if flip:
        for axis in range(3):
            if rng.random() < 0.5:
                volume = np.flip(volume, axis)
                labels = np.flip(labels, axis)
    if noise_std > 0:
        volume = volume + rng.standard_normal(volume.shape).astype(volume.dtype) * noise_std
    return np.ascontiguousarray(volume), np.ascontiguousarray(labels)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: TumorQueryModel
    trace: list[dict]
    checkpoint: Optional[Path] = None
    digest: str = ""


def set_deterministic(enabled: bool = True) -> None:
    if enabled:
        torch.set_num_threads(1)
    torch.use_deterministic_algorithms(enabled)


def load_cases(manifest: Manifest, split: str) -> list[CaseData]:
    recs = manifest.split(split)
    if not recs:
        raise ValueError(f"manifest has no {split!r} cases")
    out = []
    for rec in recs:
        vol, lab = load_case(manifest.case_path(rec))
        out.append(CaseData.build(vol.voxels, lab.labels))
    return out


def train(cases: Sequence[CaseData], config: TrainConfig, taxonomy_config: dict,
          out_dir=None, on_step: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Optimize a fresh model on in-memory cases.

    Writes ``loss.jsonl`` and ``model.ckpt`` into ``out_dir`` when given.
    """
    if not cases:
        raise ValueError("no training cases")
    set_deterministic(config.deterministic)
    model = TumorQueryModel(config.model_config(taxonomy_config))
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, betas=config.betas,
                            eps=config.eps, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    sampler = CaseSampler(cases, config.balanced)
    trace = []
    trace_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        trace_fh = open(out_dir / "loss.jsonl", "w")
    try:
        for step in range(config.epochs * config.steps_per_epoch):
            vols, labs = [], []
            for _ in range(config.batch_size):
                case, target = sampler.draw(rng)
                v, l, _, _ = sample_patch(case, rng, config.patch, config.balanced, target)
                v, l = augment(v, l, rng, config.flip, config.noise_std)
                vols.append(v)
                labs.append(l)
            x = torch.from_numpy(np.stack(vols)[:, None].astype(np.float32))
            y = torch.from_numpy(np.stack(labs).astype(np.int64))
            try:
                terms = dual_loss(model(x), y, model.taxonomy)
            except FloatingPointError as exc:
                raise TrainingDivergedError(f"step {step}: {exc}") from exc
            opt.zero_grad(set_to_none=True)
            terms.total.backward()
            if config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            rec = {"step": step, **terms.as_floats()}
            trace.append(rec)
            if trace_fh:
                trace_fh.write(json.dumps(rec) + "\n")
            if on_step:
                on_step(rec)
            if step % 50 == 0:
                log.info("step %d loss %.4f", step, rec["total"])
    finally:
        if trace_fh:
            trace_fh.close()
    model.eval()
    result = TrainResult(model, trace)
    if out_dir is not None:
        result.checkpoint = out_dir / "model.ckpt"
        result.digest = save_checkpoint(result.checkpoint, model, {"train_config": config.to_dict()})
    return result


def train_from_manifest(manifest: Manifest, config: TrainConfig, out_dir=None, **kw) -> TrainResult:
    return train(load_cases(manifest, config.split), config, manifest.taxonomy, out_dir, **kw)
