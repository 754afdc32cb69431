"""Small 3D encoder-decoder producing a four-level feature pyramid."""
from __future__ import annotations

from typing import Sequence

import torch
from torch import nn

ISOTROPIC_STRIDES = ((2, 2, 2), (2, 2, 2), (2, 2, 2))
# z is halved only twice for thick-slice CT (48x192x192 patches)
ANISOTROPIC_STRIDES = ((1, 2, 2), (2, 2, 2), (2, 2, 2))


class InstanceNorm(nn.InstanceNorm3d):
    """Affine instance norm that also accepts a single spatial element.

    A lone voxel normalizes to exactly zero, leaving only the bias, which is
    the limit torch refuses to compute in training mode.
    """

    def __init__(self, channels: int):
        super().__init__(channels, affine=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x[0, 0].numel() > 1:
            return super().forward(x)
        return torch.zeros_like(x) + self.bias.view(1, -1, 1, 1, 1)


def conv_block(in_ch, out_ch, stride=1):
    return nn.Sequential(
        nn.Conv3d(in_ch, out_ch, 3, stride=stride, padding=1),
        InstanceNorm(out_ch),
        nn.ReLU(inplace=False),
        nn.Conv3d(out_ch, out_ch, 3, padding=1),
        InstanceNorm(out_ch),
        nn.ReLU(inplace=False),
    )


class Backbone(nn.Module):
    """UNet-style backbone.

    Returns ``[F1, F2, F3, F4]`` with ``d`` channels each; F1 is at patch
    resolution and F4 is the bottleneck. Each level is a 1x1x1 projection of
    the matching decoder stage.
    """

    def __init__(self, d: int = 16, channels: Sequence[int] = (8, 16, 32, 64),
                 strides: Sequence[Sequence[int]] = ISOTROPIC_STRIDES, in_ch: int = 1):
        super().__init__()
        if len(channels) != 4 or len(strides) != 3:
            raise ValueError("backbone needs 4 channel widths and 3 strides")
        self.d = d
        self.strides = tuple(tuple(int(v) for v in s) for s in strides)
        self.encoders = nn.ModuleList([conv_block(in_ch, channels[0])])
        for i in range(3):
            self.encoders.append(conv_block(channels[i], channels[i + 1], stride=self.strides[i]))
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for i in reversed(range(3)):
            s = self.strides[i]
            self.ups.append(nn.ConvTranspose3d(channels[i + 1], channels[i], s, stride=s))
            self.decoders.append(conv_block(2 * channels[i], channels[i]))
        # proj[j] maps decoder stage of level j+1 to d channels
        self.proj = nn.ModuleList(nn.Conv3d(c, d, 1) for c in channels)
        self._cache = None

    @property
    def factor(self) -> tuple[int, int, int]:
        f = [1, 1, 1]
        for s in self.strides:
            f = [a * b for a, b in zip(f, s)]
        return tuple(f)

    def level_factors(self) -> list[tuple[int, int, int]]:
        out, f = [(1, 1, 1)], [1, 1, 1]
        for s in self.strides:
            f = [a * b for a, b in zip(f, s)]
            out.append(tuple(f))
        return out

    def check_patch(self, dims) -> None:
        bad = [d for d, f in zip(dims, self.factor) if d % f]
        if bad or len(dims) != 3:
            raise ValueError(f"patch dims {tuple(dims)} must be divisible by {self.factor}")

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        self.check_patch(x.shape[-3:])
        skips = []
        h = x
        for enc in self.encoders:
            h = enc(h)
            skips.append(h)
        stages = [h]
        for k, (up, dec) in enumerate(zip(self.ups, self.decoders)):
            h = dec(torch.cat([up(h), skips[2 - k]], dim=1))
            stages.append(h)
        stages = stages[::-1]  # finest first
        return [p(s) for p, s in zip(self.proj, stages)]

    # explicit forward/backward pair for callers that drive gradients by hand
    def forward_cached(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = x.detach().requires_grad_(True)
        with torch.enable_grad():
            feats = self.forward(x)
        self._cache = (x, feats)
        return [f.detach() for f in feats]

    def backward_cached(self, grad_feats: Sequence[torch.Tensor]):
        """Return ``({name: grad}, grad_input)`` for the last cached forward."""
        if self._cache is None:
            raise RuntimeError("backward_cached called without a cached forward pass")
        x, feats = self._cache
        self._cache = None
        names, params = zip(*self.named_parameters())
        grads = torch.autograd.grad(feats, [x, *params], grad_outputs=list(grad_feats),
                                    allow_unused=True)
        out = {n: (torch.zeros_like(p) if g is None else g) for n, p, g in zip(names, params, grads[1:])}
        return out, grads[0]
