"""The full network: backbone -> query decoder -> dual mask heads."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
from torch import nn

from .backbone import ANISOTROPIC_STRIDES, ISOTROPIC_STRIDES, Backbone
from .decode import DualMasks, decode_masks
from .queries import QueryDecoder, QuerySet
from .taxonomy import TOY_CONFIG, Taxonomy, build_taxonomy

CHECKPOINT_VERSION = 1
STRIDES = {"isotropic": ISOTROPIC_STRIDES, "anisotropic": ANISOTROPIC_STRIDES}


@dataclass
class ModelConfig:
    taxonomy: dict = field(default_factory=lambda: json.loads(json.dumps(TOY_CONFIG)))
    mode: str = "hierarchy"
    d: int = 16
    channels: tuple = (8, 16, 32, 64)
    strides: str = "isotropic"
    heads: int = 4
    layers: int = 3
    ffn_mult: int = 4
    levels: tuple = (4, 3, 2)
    intensity_shift: float = 50.0
    intensity_scale: float = 100.0
    seed: int = 0

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for k in ("channels", "levels"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


class TumorQueryModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.strides not in STRIDES:
            raise ValueError(f"unknown stride scheme {config.strides!r}")
        self.config = config
        self.taxonomy: Taxonomy = build_taxonomy(config.taxonomy)
        torch.manual_seed(config.seed)
        self.backbone = Backbone(config.d, config.channels, STRIDES[config.strides])
        self.queries = QuerySet(self.taxonomy, config.d, config.mode, seed=config.seed)
        self.decoder = QueryDecoder(config.d, config.layers, config.heads, config.ffn_mult, config.levels)

    @property
    def mode(self) -> str:
        return self.config.mode

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.config.intensity_shift) / self.config.intensity_scale

    def forward(self, x: torch.Tensor) -> DualMasks:
        """``x`` is (batch, 1, D, H, W) raw intensities."""
        feats = self.backbone(self.normalize(x))
        A, B, S = self.decoder(self.queries, feats)
        return decode_masks(A, B, S, feats[0], self.taxonomy)

    @torch.no_grad()
    def predict(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Probability maps ``(det, diag)`` for a sliding-window caller."""
        masks = self.forward(x)
        return masks.det, masks.diag


def state_digest(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        t = t.detach().to(torch.float32).contiguous()
        h.update(name.encode())
        h.update(json.dumps(list(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path, model: TumorQueryModel, extra: dict | None = None) -> str:
    """Write named float32 tensors plus the config echo; returns the content digest."""
    state = {k: v.detach().to(torch.float32).clone() for k, v in model.state_dict().items()}
    digest = state_digest(model)
    torch.save({
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "digest": digest,
        "state": state,
        "extra": extra or {},
    }, path)
    return digest


def load_checkpoint(path) -> tuple[TumorQueryModel, dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob.get('format_version')!r}")
    model = TumorQueryModel(ModelConfig.from_dict(blob["config"]))
    model.load_state_dict(blob["state"])
    model.eval()
    return model, blob
