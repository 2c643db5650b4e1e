"""Query-reference co-attention: affinity matrices, guidance scores, attention loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError
from .features import PatchSet

EPS = 1e-7


class ProjectionHead(nn.Module):
    """Shared linear map into the latent space, followed by L2 row normalization."""

    def __init__(self, in_dim: int, latent_dim: int = 64, norm_eps: float = 1e-8):
        super().__init__()
        self.linear = nn.Linear(in_dim, latent_dim)
        self.norm_eps = norm_eps

    @classmethod
    def identity(cls, dim: int, dtype=torch.float64) -> "ProjectionHead":
        head = cls(dim, dim).to(dtype)
        with torch.no_grad():
            head.linear.weight.copy_(torch.eye(dim, dtype=dtype))
            head.linear.bias.zero_()
        return head

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.linear(x), dim=-1, eps=self.norm_eps)


@dataclass
class AttentionMaps:
    A: list[torch.Tensor]
    guidance: list[torch.Tensor]

    @classmethod
    def from_matrices(cls, A: list[torch.Tensor]) -> "AttentionMaps":
        return cls(A, [guidance_scores(a) for a in A])


def _as_matrix(x) -> tuple[torch.Tensor, int | None]:
    if isinstance(x, PatchSet):
        return x.patches, x.scale_index
    return x, None


def attention_matrix(Q, R, head: nn.Module) -> torch.Tensor:
    """``N_Q x N_R`` matrix of ``(cos(P q, P r) + 1) / 2``.

    ``Q`` and ``R`` are PatchSets of the same scale or plain ``N x C`` tensors.
    """
    q, qi = _as_matrix(Q)
    r, ri = _as_matrix(R)
    if qi is not None and ri is not None and qi != ri:
        raise ShapeError(f"query scale {qi} != reference scale {ri}")
    if q.shape[-1] != r.shape[-1]:
        raise ShapeError(f"embedding widths differ: {q.shape[-1]} vs {r.shape[-1]}")
    cos = head(q) @ head(r).transpose(-1, -2)
    # rounding can push |cos| a hair past 1
    return ((cos + 1.0) / 2.0).clamp(0.0, 1.0)


def guidance_scores(A: torch.Tensor) -> torch.Tensor:
    """Best similarity of each query patch to any reference patch (row max)."""
    return A.max(dim=-1).values


def attention_loss(A: Sequence[torch.Tensor], y: int, eps: float = EPS) -> torch.Tensor:
    """Per-scale binary cross-entropy on the global minimum affinity, summed over scales.

    A normal query (``y = 0``) should have every pair similar (min near 1);
    an abnormal one (``y = 1``) at least one dissimilar pair (min near 0).
    """
    total = A[0].new_zeros(())
    for a in A:
        if a.numel() == 0:
            raise ShapeError("empty attention matrix")
        m = a.min().clamp(eps, 1.0 - eps)
        total = total - (y * torch.log(1.0 - m) + (1 - y) * torch.log(m))
    return total
