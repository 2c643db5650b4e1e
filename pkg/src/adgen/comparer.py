"""Meta-comparer: patch anomaly scores, classification loss and co-attention-guided ranking loss."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, ShapeError
from .features import PatchSet

EPS = 1e-7
MIN_WEIGHT = 1e-12


class ComparerMLP(nn.Module):
    """MLP on concatenated ``[q, r]`` pairs with a sigmoid after every layer.

    ``pairwise`` evaluates all ``N_Q x N_R`` pairs without materializing the
    concatenation: the first layer is split into its query and reference
    column blocks, which is algebraically identical.
    """

    def __init__(self, in_dim: int, hidden: Sequence[int] = (128, 64)):
        super().__init__()
        self.in_dim = in_dim
        widths = [2 * in_dim, *hidden, 1]
        self.layers = nn.ModuleList([nn.Linear(a, b) for a, b in zip(widths[:-1], widths[1:])])

    def forward(self, pairs: torch.Tensor) -> torch.Tensor:
        x = pairs
        for lin in self.layers:
            x = torch.sigmoid(lin(x))
        return x.squeeze(-1)

    def pairwise(self, q: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
        first = self.layers[0]
        c = self.in_dim
        hq = q @ first.weight[:, :c].T + first.bias
        hr = r @ first.weight[:, c:].T
        x = torch.sigmoid(hq.unsqueeze(-2) + hr.unsqueeze(-3))
        for lin in self.layers[1:]:
            x = torch.sigmoid(lin(x))
        return x.squeeze(-1)


@dataclass
class AnomalyScores:
    per_scale: list[torch.Tensor]
    coords: list[np.ndarray] = field(default_factory=list)

    def image_score(self) -> float:
        return max(float(s.max()) for s in self.per_scale)


@dataclass
class RankPairBatch:
    scale: np.ndarray
    u: np.ndarray
    v: np.ndarray
    lam: float = 1.0

    def __post_init__(self):
        if self.lam <= 0:
            raise ConfigError("lambda must be positive")
        if np.any(self.u == self.v):
            raise ShapeError("rank pairs need u != v")

    def __len__(self) -> int:
        return len(self.u)


def _patches(x) -> torch.Tensor:
    return x.patches if isinstance(x, PatchSet) else x


def patch_scores(Q, R, mlp: ComparerMLP, chunk: int | None = None) -> torch.Tensor:
    """Largest comparer output of each query patch over all reference patches.

    ``chunk`` bounds memory by reducing over reference blocks; the result is
    identical to the unchunked max.
    """
    if isinstance(Q, PatchSet) and isinstance(R, PatchSet) and Q.scale_index != R.scale_index:
        raise ShapeError(f"query scale {Q.scale_index} != reference scale {R.scale_index}")
    q, r = _patches(Q), _patches(R)
    if r.shape[0] == 0:
        raise ShapeError("empty reference patch set")
    if chunk is None or r.shape[0] <= chunk:
        return mlp.pairwise(q, r).max(dim=-1).values
    best = None
    for start in range(0, r.shape[0], chunk):
        part = mlp.pairwise(q, r[start : start + chunk]).max(dim=-1).values
        best = part if best is None else torch.maximum(best, part)
    return best


def classification_loss(scores: Sequence[torch.Tensor], y: int, eps: float = EPS) -> torch.Tensor:
    """Binary cross-entropy on each scale's largest patch score, summed over scales."""
    per_scale = scores.per_scale if isinstance(scores, AnomalyScores) else scores
    total = per_scale[0].new_zeros(())
    for s in per_scale:
        if s.numel() == 0:
            raise ShapeError("empty score vector")
        m = s.max().clamp(eps, 1.0 - eps)
        total = total - (y * torch.log(m) + (1 - y) * torch.log(1.0 - m))
    return total


def rank_weight(a_u: float, a_v: float, lam: float = 1.0) -> tuple[float, int]:
    """Pair weight ``lam * (exp|a_u - a_v| - 1)`` and ordering sign ``-sgn(a_u - a_v)``."""
    d = a_u - a_v
    return lam * math.expm1(abs(d)), -int(np.sign(d))


def ranking_loss(
    scores: Sequence[torch.Tensor],
    guidance: Sequence[torch.Tensor],
    pairs: RankPairBatch,
) -> torch.Tensor:
    """Weighted hinge over sampled query-patch pairs.

    A pair whose guidance says ``u`` is less similar to the references than
    ``v`` (``a_u < a_v``) is penalized unless ``s_u`` exceeds ``s_v`` by the
    unit margin. Differentiable in both scores and guidance.
    """
    per_scale = scores.per_scale if isinstance(scores, AnomalyScores) else scores
    total = per_scale[0].new_zeros(())
    for i, (s, a) in enumerate(zip(per_scale, guidance)):
        sel = pairs.scale == i
        if not sel.any():
            continue
        u = torch.as_tensor(pairs.u[sel])
        v = torch.as_tensor(pairs.v[sel])
        n = s.shape[0]
        if int(u.max()) >= n or int(v.max()) >= n or int(u.min()) < 0 or int(v.min()) < 0:
            raise ShapeError(f"pair index out of range for scale {i} with {n} patches")
        d = a[u] - a[v]
        w = pairs.lam * torch.expm1(d.abs())
        keep = w >= MIN_WEIGHT
        if not keep.any():
            continue
        sigma = -torch.sign(d[keep]).detach()
        hinge = torch.relu(1.0 - sigma * (s[u[keep]] - s[v[keep]]))
        total = total + (w[keep] * hinge).sum()
    return total


def sample_rank_pairs(scales, n_pairs: int, rng: np.random.Generator, lam: float = 1.0) -> RankPairBatch:
    """Uniformly sample ``(scale, u, v)`` triples with ``u != v``.

    ``scales`` is a list of PatchSets or of per-scale patch counts. Scales
    with fewer than two patches cannot form a pair and are never drawn; if
    no scale qualifies the batch is empty.
    """
    if n_pairs <= 0:
        raise ConfigError("n_pairs must be positive")
    counts = np.array([s.n if isinstance(s, PatchSet) else int(s) for s in scales])
    eligible = np.flatnonzero(counts >= 2)
    if eligible.size == 0:
        empty = np.zeros(0, dtype=np.int64)
        return RankPairBatch(empty, empty, empty.copy(), lam)
    scale = eligible[rng.integers(eligible.size, size=n_pairs)]
    n = counts[scale]
    u = rng.integers(0, n)
    v = rng.integers(0, n - 1)
    v = v + (v >= u)
    return RankPairBatch(scale, u, v, lam)
