"""Shared, detection and diagnosis queries plus the transformer decoder.

Query layout inside the decoder is ``[A, B, S]``:

* ``A`` (m x d) detection queries, one per major tumor class
* ``B`` (n x d) diagnosis queries, one per subtype
* ``S`` ((|shared| + 1) x d) shared queries; row 0 is the background query

In ``hierarchy`` mode ``B`` is not a parameter: ``B_i = A_i W_i^T`` reshaped
to ``n_i`` queries. ``parallel`` keeps ``A`` and ``B`` as independent
parameters, ``plain`` drops ``A`` altogether.
"""
from __future__ import annotations

import math
from typing import Sequence

import torch
from torch import nn

from .taxonomy import Taxonomy

MODES = ("hierarchy", "parallel", "plain")
QUERY_INIT_STD = 1.0


def expand_hierarchy(A: torch.Tensor, W: Sequence[torch.Tensor]) -> torch.Tensor:
    """Project detection queries to diagnosis queries.

    ``A`` is ``(m, d)`` or batched ``(batch, m, d)``; ``W[i]`` is
    ``(n_i * d, d)``. Returns ``(sum n_i, d)`` (or batched).
    """
    d = A.shape[-1]
    if A.shape[-2] != len(W):
        raise ValueError(f"{A.shape[-2]} detection queries but {len(W)} projection matrices")
    out = []
    for i, w in enumerate(W):
        if w.dim() != 2 or w.shape[1] != d or w.shape[0] % d:
            raise ValueError(f"W[{i}] has shape {tuple(w.shape)}, expected (n_i*{d}, {d})")
        b = A[..., i:i + 1, :] @ w.transpose(0, 1)          # (..., 1, n_i*d)
        out.append(b.reshape(*A.shape[:-2], w.shape[0] // d, d))
    return torch.cat(out, dim=-2)


class QuerySet(nn.Module):
    def __init__(self, taxonomy: Taxonomy, d: int, mode: str = "hierarchy", seed: int = 0):
        super().__init__()
        if mode not in MODES:
            raise ValueError(f"invalid representation mode {mode!r}; expected one of {MODES}")
        if d < 4:
            raise ValueError("query dimension must be >= 4")
        self.mode = mode
        self.d = d
        self.group_sizes = tuple(len(g) for g in taxonomy.subtype_groups)
        self.m = len(taxonomy.majors)
        self.n = sum(self.group_sizes)
        self.n_shared = len(taxonomy.shared) + 1

        gen = torch.Generator().manual_seed(seed)

        def draw(*shape, std=QUERY_INIT_STD):
            return nn.Parameter(torch.randn(*shape, generator=gen) * std)

        self.S = draw(self.n_shared, d)
        self.A = draw(self.m, d) if mode != "plain" else None
        if mode == "hierarchy":
            # std 1/sqrt(d) keeps |B| on the same scale as |A|
            self.W = nn.ParameterList(draw(k * d, d, std=1.0 / math.sqrt(d)) for k in self.group_sizes)
            self.B = None
        else:
            self.W = None
            self.B = draw(self.n, d)

    def diagnosis_queries(self) -> torch.Tensor:
        if self.mode == "hierarchy":
            return expand_hierarchy(self.A, list(self.W))
        return self.B

    def initial(self) -> tuple[torch.Tensor | None, torch.Tensor, torch.Tensor]:
        return self.A, self.diagnosis_queries(), self.S


def init_queries(taxonomy: Taxonomy, d: int, seed: int = 0, mode: str = "hierarchy") -> QuerySet:
    return QuerySet(taxonomy, d, mode=mode, seed=seed)


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        if d % heads:
            raise ValueError(f"query dim {d} not divisible by {heads} heads")
        self.heads = heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)

    def forward(self, query: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        b, nq, d = query.shape
        nk = memory.shape[1]
        h, dh = self.heads, d // self.heads
        q = self.q(query).view(b, nq, h, dh).transpose(1, 2)
        k = self.k(memory).view(b, nk, h, dh).transpose(1, 2)
        v = self.v(memory).view(b, nk, h, dh).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        return self.out((att @ v).transpose(1, 2).reshape(b, nq, d))


class DecoderLayer(nn.Module):
    """Pre-norm cross-attention -> self-attention -> feed-forward, each residual."""

    def __init__(self, d: int, heads: int = 4, ffn_mult: int = 4):
        super().__init__()
        self.norm_ca = nn.LayerNorm(d)
        self.cross = MultiHeadAttention(d, heads)
        self.norm_sa = nn.LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, heads)
        self.norm_ff = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, ffn_mult * d), nn.ReLU(), nn.Linear(ffn_mult * d, d))

    def forward(self, queries: torch.Tensor, feature: torch.Tensor) -> torch.Tensor:
        """``queries`` is (batch, Q, d); ``feature`` is (batch, d, D, H, W) or (batch, N, d)."""
        if feature.dim() == 5:
            feature = feature.flatten(2).transpose(1, 2)
        if feature.shape[-1] != queries.shape[-1]:
            raise ValueError(f"feature channels {feature.shape[-1]} != query dim {queries.shape[-1]}")
        x = queries + self.cross(self.norm_ca(queries), feature)
        y = self.norm_sa(x)
        x = x + self.self_attn(y, y)
        x = x + self.ffn(self.norm_ff(x))
        if not torch.isfinite(x).all():
            raise FloatingPointError("decoder layer produced non-finite queries")
        return x


class QueryDecoder(nn.Module):
    """Stack of decoder layers; layer j reads feature level ``levels[j]`` (1-based)."""

    def __init__(self, d: int, n_layers: int = 3, heads: int = 4, ffn_mult: int = 4,
                 levels: Sequence[int] = (4, 3, 2)):
        super().__init__()
        if len(levels) != n_layers:
            raise ValueError("need one feature level per decoder layer")
        self.levels = tuple(levels)
        self.layers = nn.ModuleList(DecoderLayer(d, heads, ffn_mult) for _ in range(n_layers))

    def forward(self, qs: QuerySet, feats: Sequence[torch.Tensor]):
        """Return final ``(A*, B*, S*)``, each batched; ``A*`` is None in plain mode."""
        batch = feats[0].shape[0]
        A, B, S = qs.initial()
        parts = [p for p in (A, B, S) if p is not None]
        sizes = [p.shape[0] for p in parts]
        x = torch.cat(parts, dim=0).unsqueeze(0).expand(batch, -1, -1)
        for layer, lvl in zip(self.layers, self.levels):
            x = layer(x, feats[lvl - 1])
        out = list(torch.split(x, sizes, dim=1))
        if A is None:
            out.insert(0, None)
        return tuple(out)


def zero_residual_branches(decoder: QueryDecoder) -> None:
    """Zero the output projections so each layer is the identity map."""
    with torch.no_grad():
        for layer in decoder.layers:
            for lin in (layer.cross.out, layer.self_attn.out, layer.ffn[2]):
                lin.weight.zero_()
                lin.bias.zero_()

