"""AUROC evaluation, reference-fraction sweeps and FID domain distances."""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from scipy.stats import rankdata

from .comparer import AnomalyScores, patch_scores
from .data import DomainDataset, ImageSample
from .errors import EvaluationError, ShapeError
from .features import flatten_level, grid_coords
from .inference import REF_CHUNK, ReferenceBank, build_reference_bank, embed, pixel_map
from .model import AnomalyModel

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# AUROC
# ---------------------------------------------------------------------------


def auroc(scores, labels) -> float:
    """Rank-based AUROC (Mann-Whitney U), ties counted as one half.

    The statistic is accumulated as the integer ``2U`` so results are exact
    and ``auroc(s, y) + auroc(s, 1 - y) == 1``.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise EvaluationError(f"scores and labels differ in length: {s.size} vs {y.size}")
    if not np.isin(y, (0, 1)).all():
        raise EvaluationError("labels must be binary")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("AUROC needs both positive and negative samples")
    if not np.isfinite(s).all():
        raise EvaluationError("scores must be finite")
    # average ranks are multiples of 1/2, so 2 * rank sums are exact integers
    twice_rank_sum = int(round(2.0 * rankdata(s)[pos].sum()))
    twice_u = twice_rank_sum - n_pos * (n_pos + 1)
    return twice_u / (2 * n_pos * n_neg)


# ---------------------------------------------------------------------------
# Target evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    target_domain: str
    fraction: float
    seed: int
    image_auc: float
    pixel_auc: float | None
    per_image: list[dict] = field(default_factory=list)
    bank_ids: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: Path | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path


@torch.no_grad()
def _score_maps(maps: list[torch.Tensor], bank: ReferenceBank, model: AnomalyModel) -> list[AnomalyScores]:
    out = []
    for b in range(maps[0].shape[0]):
        per_scale = [patch_scores(flatten_level(m[b]), ref, model.mlp, chunk=REF_CHUNK) for m, ref in zip(maps, bank.per_scale)]
        out.append(AnomalyScores(per_scale, [grid_coords(*m.shape[-2:]) for m in maps]))
    return out


def _check_target(target: DomainDataset) -> tuple[list[ImageSample], list[ImageSample]]:
    pool, test = target.reference_pool(), target.test_pool()
    if not target.abnormal:
        raise EvaluationError(f"target domain {target.domain!r} has no abnormal test images")
    if not any(s.label == 0 for s in test):
        raise EvaluationError(f"target domain {target.domain!r} has no normal test images")
    if not pool:
        raise EvaluationError(f"target domain {target.domain!r} has no normal reference images")
    return pool, test


def _report(
    model: AnomalyModel,
    target: DomainDataset,
    test: list[ImageSample],
    test_maps: list[torch.Tensor],
    bank: ReferenceBank,
    fraction: float,
    seed: int,
    config: dict | None,
) -> EvalReport:
    scores = _score_maps(test_maps, bank, model)
    labels = [s.label for s in test]
    image_scores = [sc.image_score() for sc in scores]
    image_auc = auroc(image_scores, labels)

    pixel_auc = None
    if all(s.mask is not None for s in test if s.label == 1):
        strides = model.config.extractor.strides
        values = np.concatenate([pixel_map(sc, strides, q.size).values.ravel() for sc, q in zip(scores, test)])
        truth = np.concatenate(
            [(q.mask if q.mask is not None else np.zeros(q.size, np.uint8)).ravel() for q in test]
        )
        pixel_auc = auroc(values, truth)

    per_image = [{"path": q.path, "score": sc, "label": q.label} for q, sc in zip(test, image_scores)]
    return EvalReport(target.domain, fraction, seed, image_auc, pixel_auc, per_image, list(bank.image_ids), config or {})


def evaluate_target(
    model: AnomalyModel,
    target: DomainDataset,
    fraction: float = 1.0,
    seed: int = 0,
    config: dict | None = None,
) -> EvalReport:
    """Build a bank from the target's train-split normals and score its test pool.

    Pixel AUROC pools every pixel of every test image into one curve and is
    reported only when every abnormal test image has a mask.
    """
    pool, test = _check_target(target)
    bank = build_reference_bank(pool, fraction, model, np.random.default_rng(seed))
    return _report(model, target, test, embed(test, model), bank, fraction, seed, config)


def sweep_reference_fraction(
    model: AnomalyModel,
    target: DomainDataset,
    fractions: Sequence[float],
    seeds: Sequence[int] = (0,),
) -> list[dict]:
    """Mean image/pixel AUROC per reference fraction, averaged over seeds."""
    if not fractions:
        raise EvaluationError("fractions must be non-empty")
    unique = list(dict.fromkeys(float(f) for f in fractions))
    if len(unique) != len(fractions):
        warnings.warn(f"duplicate fractions removed: {list(fractions)} -> {unique}", stacklevel=2)
    pool, test = _check_target(target)
    test_maps = embed(test, model)

    rows = []
    for frac in unique:
        reports = []
        for seed in seeds:
            bank = build_reference_bank(pool, frac, model, np.random.default_rng(seed))
            reports.append(_report(model, target, test, test_maps, bank, frac, seed, None))
        pix = [r.pixel_auc for r in reports]
        rows.append(
            {
                "fraction": frac,
                "n_reference": len(reports[0].bank_ids),
                "image_auc": float(np.mean([r.image_auc for r in reports])),
                "pixel_auc": None if any(p is None for p in pix) else float(np.mean(pix)),
                "n_seeds": len(reports),
            }
        )
    return rows


def write_sweep_csv(rows: Sequence[dict], path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["fraction", "n_reference", "image_auc", "pixel_auc", "n_seeds"])
        writer.writeheader()
        writer.writerows(rows)
    return path


def plot_sweep(rows: Sequence[dict], path: Path | str, title: str = "") -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    x = [100 * r["fraction"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(x, [r["image_auc"] for r in rows], "o-", label="image AUC")
    if all(r["pixel_auc"] is not None for r in rows):
        ax.plot(x, [r["pixel_auc"] for r in rows], "s--", label="pixel AUC")
    ax.set_xlabel("target normal references (%)")
    ax.set_ylabel("AUC")
    ax.set_ylim(0.0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# FID
# ---------------------------------------------------------------------------


def _sqrt_psd(m: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    vals = np.where(vals < tol, 0.0, vals)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(features_a, features_b, tol: float = 1e-10) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    The trace of ``(S_a S_b)^(1/2)`` is taken as the trace of the square root
    of the symmetric matrix ``S_a^(1/2) S_b S_a^(1/2)``; eigenvalues below
    ``tol`` are clamped to zero.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"feature matrices must be N x d with equal d, got {a.shape} and {b.shape}")
    d = a.shape[1]
    if min(a.shape[0], b.shape[0]) <= d:
        warnings.warn(f"FID with fewer samples ({min(a.shape[0], b.shape[0])}) than dimensions + 1 ({d + 1}); covariances are singular", stacklevel=2)
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    root_a = _sqrt_psd(cov_a, tol)
    middle = root_a @ cov_b @ root_a
    vals = np.linalg.eigvalsh((middle + middle.T) / 2.0)
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    value = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    return max(value, 0.0)


@dataclass
class DomainDistanceTable:
    domains: list[str]
    matrix: np.ndarray

    @property
    def averages(self) -> dict[str, float]:
        """Mean FID of each domain to every other domain."""
        n = len(self.domains)
        off = self.matrix.sum(axis=1) - np.diag(self.matrix)
        return {d: float(off[i] / (n - 1)) for i, d in enumerate(self.domains)}

    def to_dict(self) -> dict:
        return {"domains": self.domains, "matrix": self.matrix.tolist(), "averages": self.averages}

    def format(self, precision: int = 3) -> str:
        width = max(8, max(len(d) for d in self.domains) + 1)
        header = "".ljust(width) + "".join(d.rjust(width) for d in self.domains) + "average".rjust(width)
        lines = [header]
        avg = self.averages
        for i, d in enumerate(self.domains):
            cells = "".join(
                ("-" if i == j else f"{self.matrix[i, j]:.{precision}f}").rjust(width) for j in range(len(self.domains))
            )
            lines.append(d.ljust(width) + cells + f"{avg[d]:.{precision}f}".rjust(width))
        return "\n".join(lines)


@torch.no_grad()
def pooled_features(images: Sequence[ImageSample], model: AnomalyModel) -> np.ndarray:
    """Global-average-pooled coarsest pyramid level, one row per image."""
    maps = embed(images, model)
    return maps[-1].mean(dim=(-2, -1)).double().numpy()


def inception_features(images: Sequence[ImageSample], pretrained: bool = True) -> np.ndarray:
    """2048-d pool features of torchvision's Inception-v3 (ImageNet weights by default)."""
    import torch.nn.functional as F
    from torchvision.models import Inception_V3_Weights, inception_v3

    net = inception_v3(weights=Inception_V3_Weights.IMAGENET1K_V1 if pretrained else None, aux_logits=True, init_weights=False)
    net.fc = torch.nn.Identity()
    net.eval()
    mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
    std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
    feats = []
    with torch.no_grad():
        for start in range(0, len(images), 16):
            x = torch.from_numpy(np.stack([s.pixels for s in images[start : start + 16]]).transpose(0, 3, 1, 2).copy())
            x = F.interpolate(x, size=(299, 299), mode="bilinear", align_corners=False)
            feats.append(net((x - mean) / std).double().numpy())
    return np.concatenate(feats)


def domain_distance_table(
    domains: Sequence[DomainDataset],
    extractor: Callable[[Sequence[ImageSample]], np.ndarray],
) -> DomainDistanceTable:
    """Pairwise FID between the normal images of every pair of domains."""
    if len(domains) < 2:
        raise EvaluationError("domain distance table needs at least two domains")
    feats = [extractor(list(d.normal)) for d in domains]
    if min(f.shape[0] for f in feats) <= feats[0].shape[1]:
        log.warning("FID features have more dimensions than some domains have images; covariances are singular")
    n = len(domains)
    m = np.zeros((n, n))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for i in range(n):
            for j in range(i + 1, n):
                m[i, j] = m[j, i] = fid(feats[i], feats[j])
    return DomainDistanceTable([d.domain for d in domains], m)
