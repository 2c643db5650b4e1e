"""Target-domain reference banks, image-level scores and pixel anomaly maps."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .comparer import AnomalyScores, patch_scores
from .data import ImageSample, reference_count
from .errors import DataError
from .features import flatten_level, grid_coords, to_tensor
from .model import AnomalyModel

REF_CHUNK = 2048
BATCH = 16


@dataclass
class ReferenceBank:
    per_scale: list[torch.Tensor]  # (n_images * H_i * W_i) x C
    image_ids: list[str]
    fraction: float
    grids: list[tuple[int, int]]

    @property
    def n_images(self) -> int:
        return len(self.image_ids)


@dataclass
class PixelAnomalyMap:
    values: np.ndarray  # H x W
    provenance: np.ndarray | None = None  # H x W x 2: (scale, patch index) of the max contributor


def _dtype(model: AnomalyModel) -> torch.dtype:
    return next(model.parameters()).dtype


@torch.no_grad()
def embed(images: Sequence[ImageSample], model: AnomalyModel) -> list[torch.Tensor]:
    """Pyramid maps for a list of images, batched; returns ``L`` tensors ``B x C x H_i x W_i``."""
    outs: list[list[torch.Tensor]] = []
    for start in range(0, len(images), BATCH):
        batch = to_tensor(images[start : start + BATCH]).to(_dtype(model))
        outs.append(model(batch))
    return [torch.cat([o[i] for o in outs]) for i in range(len(outs[0]))]


def bank_from_images(images: Sequence[ImageSample], model: AnomalyModel, fraction: float = 1.0) -> ReferenceBank:
    if not images:
        raise DataError("reference bank needs at least one image")
    maps = embed(images, model)
    per_scale = [flatten_level(m).reshape(-1, m.shape[1]) for m in maps]
    return ReferenceBank(per_scale, [s.path for s in images], fraction, [tuple(m.shape[-2:]) for m in maps])


def build_reference_bank(
    target_normals: Sequence[ImageSample],
    fraction: float,
    model: AnomalyModel,
    rng: np.random.Generator,
) -> ReferenceBank:
    """Pool the patches of ``ceil(fraction * n)`` (at least one) randomly chosen normal images."""
    if not target_normals:
        raise DataError("empty normal list: cannot build a reference bank")
    if any(s.label != 0 for s in target_normals):
        raise DataError("reference bank images must be normal")
    k = reference_count(fraction, len(target_normals))
    idx = np.sort(rng.choice(len(target_normals), size=k, replace=False))
    return bank_from_images([target_normals[i] for i in idx], model, fraction)


@torch.no_grad()
def query_scores(queries: Sequence[ImageSample], bank: ReferenceBank, model: AnomalyModel) -> list[AnomalyScores]:
    maps = embed(queries, model)
    out = []
    for b in range(len(queries)):
        per_scale, coords = [], []
        for m, ref in zip(maps, bank.per_scale):
            per_scale.append(patch_scores(flatten_level(m[b]), ref, model.mlp, chunk=REF_CHUNK))
            coords.append(grid_coords(*m.shape[-2:]))
        out.append(AnomalyScores(per_scale, coords))
    return out


def score_image(query: ImageSample, bank: ReferenceBank, model: AnomalyModel) -> tuple[float, AnomalyScores]:
    """Image score: the largest patch score over all scales."""
    scores = query_scores([query], bank, model)[0]
    return scores.image_score(), scores


def pixel_map(scores: AnomalyScores, strides: Sequence[int], size: tuple[int, int], provenance: bool = False) -> PixelAnomalyMap:
    """Elementwise max over scales of nearest-neighbour expanded patch grids.

    Patch ``(r, c)`` at stride ``s`` owns the pixel block
    ``[r*s, (r+1)*s) x [c*s, (c+1)*s)``.
    """
    h, w = size
    best = np.full((h, w), -np.inf)
    prov = np.zeros((h, w, 2), dtype=np.int64) if provenance else None
    for i, (s, stride) in enumerate(zip(scores.per_scale, strides)):
        gh, gw = h // stride, w // stride
        grid = s.detach().cpu().double().numpy().reshape(gh, gw)
        up = np.repeat(np.repeat(grid, stride, axis=0), stride, axis=1)
        better = up > best
        best = np.where(better, up, best)
        if prov is not None:
            idx = np.repeat(np.repeat(np.arange(gh * gw).reshape(gh, gw), stride, axis=0), stride, axis=1)
            prov[better] = np.stack([np.full_like(idx, i), idx], axis=-1)[better]
    return PixelAnomalyMap(best, prov)


def score_pixels(query: ImageSample, bank: ReferenceBank, model: AnomalyModel, provenance: bool = False) -> PixelAnomalyMap:
    scores = query_scores([query], bank, model)[0]
    return pixel_map(scores, model.config.extractor.strides, query.size, provenance)


def _smooth(values: np.ndarray, sigma: float) -> np.ndarray:
    from scipy.ndimage import gaussian_filter

    return gaussian_filter(values, sigma=sigma, mode="nearest")


def export_heatmap(
    amap: PixelAnomalyMap | np.ndarray,
    original: ImageSample,
    out_path: Path | str,
    smooth_sigma: float = 0.0,
    alpha: float = 0.6,
) -> tuple[Path, Path]:
    """Write ``<stem>_map.png`` (8-bit grayscale) and ``<stem>_overlay.png`` (red blend).

    ``smooth_sigma > 0`` applies a Gaussian blur for display only.
    """
    values = amap.values if isinstance(amap, PixelAnomalyMap) else np.asarray(amap)
    values = np.clip(values, 0.0, 1.0)
    if smooth_sigma > 0:
        values = _smooth(values, smooth_sigma)
    out_path = Path(out_path)
    stem = out_path.with_suffix("")
    map_path = stem.parent / f"{stem.name}_map.png"
    overlay_path = stem.parent / f"{stem.name}_overlay.png"
    try:
        map_path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {map_path.parent}: {exc}") from exc

    gray = np.rint(values * 255.0).astype(np.uint8)
    Image.fromarray(gray, mode="L").save(map_path)

    base = np.asarray(original.pixels, dtype=np.float64)
    if base.shape[:2] != values.shape:
        raise DataError(f"map shape {values.shape} does not match image {base.shape[:2]}")
    weight = alpha * values[..., None]
    red = np.zeros_like(base)
    red[..., 0] = 1.0
    overlay = (1.0 - weight) * base + weight * red
    Image.fromarray(np.rint(np.clip(overlay, 0, 1) * 255).astype(np.uint8), mode="RGB").save(overlay_path)
    return map_path, overlay_path
