"""Multi-domain image data: MVTec-style loading, synthetic textures, splits, episodes.

Images are held in memory as float32 ``H x W x 3`` arrays in ``[0, 1]`` that
have already been resized to the model input size. Synthetic pixels are
quantized to the 8-bit grid so an in-memory dataset and its PNG export load
back identically.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError, LayoutError

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")
MVTEC_TEXTURES = ("carpet", "grid", "leather", "tile", "wood")
TEXTURE_FAMILIES = ("stripes", "checker", "perlin-noise", "dots")
DEFECT_KINDS = ("blob", "scratch", "swap")


@dataclass(frozen=True)
class DefectRecord:
    """Geometry of one injected defect, in pixel units.

    blob: ``(cy, cx, radius)``; scratch: ``(y0, x0, y1, x1, width)``;
    swap: ``(top, left, height, width)``.
    """

    kind: str
    params: tuple[float, ...]


@dataclass(frozen=True, eq=False)
class ImageSample:
    pixels: np.ndarray
    label: int
    domain: str
    mask: np.ndarray | None = None
    path: str = ""
    split: str = "train"
    defects: tuple[DefectRecord, ...] = ()

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label!r}")
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise DataError(f"pixels must be HxWx3, got {self.pixels.shape}")
        if self.mask is not None:
            if self.mask.shape != self.pixels.shape[:2]:
                raise DataError(f"mask shape {self.mask.shape} != image {self.pixels.shape[:2]}")
            if self.label == 0 and self.mask.any():
                raise DataError(f"normal sample {self.path} carries a non-empty mask")

    @property
    def size(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


@dataclass(frozen=True)
class DomainDataset:
    domain: str
    normal: tuple[ImageSample, ...]
    abnormal: tuple[ImageSample, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "normal", tuple(self.normal))
        object.__setattr__(self, "abnormal", tuple(self.abnormal))
        for s in self.normal + self.abnormal:
            if s.domain != self.domain:
                raise DataError(f"sample {s.path} has domain {s.domain!r}, dataset is {self.domain!r}")
        if any(s.label != 0 for s in self.normal) or any(s.label != 1 for s in self.abnormal):
            raise DataError(f"label/list mismatch in domain {self.domain!r}")

    @property
    def samples(self) -> tuple[ImageSample, ...]:
        return self.normal + self.abnormal

    def reference_pool(self) -> list[ImageSample]:
        """Normal images available as inference references (train split)."""
        return [s for s in self.normal if s.split == "train"]

    def test_pool(self) -> list[ImageSample]:
        """Held-out test images: test-split normals plus every abnormal."""
        return [s for s in self.normal if s.split == "test"] + list(self.abnormal)


@dataclass(frozen=True)
class SplitConfig:
    source_domains: tuple[str, ...]
    target_domain: str
    reference_fraction: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "source_domains", tuple(self.source_domains))
        if not self.source_domains:
            raise ConfigError("source_domains must be non-empty")
        if len(set(self.source_domains)) != len(self.source_domains):
            raise ConfigError(f"duplicate source domains: {self.source_domains}")
        if self.target_domain in self.source_domains:
            raise ConfigError(f"target {self.target_domain!r} is also a source domain")
        if not 0.0 < self.reference_fraction <= 1.0:
            raise ConfigError(f"reference_fraction must lie in (0, 1], got {self.reference_fraction}")


@dataclass(frozen=True)
class Episode:
    query: ImageSample
    reference: tuple[ImageSample, ...]
    domain: str

    def __post_init__(self):
        object.__setattr__(self, "reference", tuple(self.reference))
        if not self.reference:
            raise DataError("episode needs at least one reference image")
        if any(r.label != 0 for r in self.reference):
            raise DataError("reference images must be normal")
        if any(s.domain != self.domain for s in (self.query, *self.reference)):
            raise DataError("query and references must share the episode domain")

    @property
    def sample_ids(self) -> list[str]:
        return [self.query.path] + [r.path for r in self.reference]


# ---------------------------------------------------------------------------
# MVTec-AD layout
# ---------------------------------------------------------------------------


def _image_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)


def read_image(path: Path | str, size: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def read_mask(path: Path | str, size: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("L")
        if im.size != (size, size):
            im = im.resize((size, size), Image.NEAREST)
        return (np.asarray(im) > 0).astype(np.uint8)


def load_mvtec_layout(root_dir: Path | str, domain: str, size: int = 256) -> DomainDataset:
    """Load one domain from a directory tree in MVTec-AD layout.

    Normal samples come from ``train/good`` and ``test/good``; every other
    ``test/<defect>`` directory contributes abnormal samples with masks from
    ``ground_truth/<defect>/<stem>_mask.png`` when present.
    """
    base = Path(root_dir) / domain
    if not base.is_dir():
        raise LayoutError(f"missing domain directory: {base}")
    train_good = base / "train" / "good"
    if not train_good.is_dir():
        raise LayoutError(f"missing directory: {train_good}")

    normal: list[ImageSample] = []
    abnormal: list[ImageSample] = []
    for p in _image_files(train_good):
        normal.append(ImageSample(read_image(p, size), 0, domain, None, str(p), "train"))

    test_dir = base / "test"
    if test_dir.is_dir():
        for defect_dir in sorted(d for d in test_dir.iterdir() if d.is_dir()):
            for p in _image_files(defect_dir):
                if defect_dir.name == "good":
                    normal.append(ImageSample(read_image(p, size), 0, domain, None, str(p), "test"))
                    continue
                mask_path = base / "ground_truth" / defect_dir.name / f"{p.stem}_mask.png"
                mask = None
                if mask_path.is_file():
                    mask = read_mask(mask_path, size)
                else:
                    log.warning("abnormal sample %s has no mask at %s", p, mask_path)
                abnormal.append(ImageSample(read_image(p, size), 1, domain, mask, str(p), "test"))
    return DomainDataset(domain, normal, abnormal)


def _to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)


def write_mvtec_layout(dataset: DomainDataset, root_dir: Path | str) -> Path:
    """Write a dataset under ``root_dir/<domain>`` in MVTec-AD layout."""
    base = Path(root_dir) / dataset.domain
    for i, s in enumerate(dataset.normal):
        sub = "train/good" if s.split == "train" else "test/good"
        out = base / sub / f"{i:03d}.png"
        out.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(_to_uint8(s.pixels)).save(out)
    for i, s in enumerate(dataset.abnormal):
        defect = s.defects[0].kind if s.defects else "defect"
        out = base / "test" / defect / f"{i:03d}.png"
        out.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(_to_uint8(s.pixels)).save(out)
        if s.mask is not None:
            mpath = base / "ground_truth" / defect / f"{i:03d}_mask.png"
            mpath.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(s.mask.astype(np.uint8) * 255).save(mpath)
    return base


# ---------------------------------------------------------------------------
# Synthetic textures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TextureSpec:
    """Parameters of one synthetic texture domain.

    ``frequency`` is in pattern cycles per image side; ``jitter`` scales the
    per-image randomization of phase, angle, frequency, brightness and noise.
    """

    family: str
    color_a: tuple[float, float, float] = (0.2, 0.2, 0.25)
    color_b: tuple[float, float, float] = (0.75, 0.7, 0.6)
    frequency: float = 8.0
    angle: float = 0.0
    jitter: float = 0.05

    def __post_init__(self):
        if self.family not in TEXTURE_FAMILIES:
            raise ConfigError(f"unknown texture family {self.family!r}; expected one of {TEXTURE_FAMILIES}")
        if self.frequency <= 0:
            raise ConfigError("frequency must be positive")


def _perlin(size: int, cells: int, rng: np.random.Generator) -> np.ndarray:
    cells = max(1, int(round(cells)))
    angles = rng.uniform(0.0, 2 * np.pi, size=(cells + 1, cells + 1))
    gx, gy = np.cos(angles), np.sin(angles)
    coord = (np.arange(size) + 0.5) * cells / size
    y, x = np.meshgrid(coord, coord, indexing="ij")
    y0, x0 = np.floor(y).astype(int), np.floor(x).astype(int)
    fy, fx = y - y0, x - x0

    def dot(oy, ox):
        return gy[y0 + oy, x0 + ox] * (fy - oy) + gx[y0 + oy, x0 + ox] * (fx - ox)

    fade = lambda t: t * t * t * (t * (t * 6 - 15) + 10)  # noqa: E731
    u, v = fade(fx), fade(fy)
    top = dot(0, 0) * (1 - u) + dot(0, 1) * u
    bottom = dot(1, 0) * (1 - u) + dot(1, 1) * u
    return top * (1 - v) + bottom * v


def _pattern(spec: TextureSpec, size: int, rng: np.random.Generator) -> np.ndarray:
    """Scalar pattern field in [0, 1]."""
    j = spec.jitter
    freq = spec.frequency * (1.0 + j * rng.uniform(-1, 1))
    angle = spec.angle + j * rng.uniform(-1, 1)
    coord = np.arange(size, dtype=np.float64) / size
    y, x = np.meshgrid(coord, coord, indexing="ij")
    u = x * np.cos(angle) + y * np.sin(angle)
    v = -x * np.sin(angle) + y * np.cos(angle)

    if spec.family == "stripes":
        t = 0.5 + 0.5 * np.sin(2 * np.pi * freq * u + rng.uniform(0, 2 * np.pi))
    elif spec.family == "checker":
        s = np.sin(2 * np.pi * freq * u + rng.uniform(0, 2 * np.pi)) * np.sin(
            2 * np.pi * freq * v + rng.uniform(0, 2 * np.pi)
        )
        t = 0.5 + 0.5 * np.tanh(6.0 * s)
    elif spec.family == "perlin-noise":
        n = _perlin(size, freq, rng) + 0.5 * _perlin(size, 2 * freq, rng)
        t = (n - n.min()) / max(n.max() - n.min(), 1e-12)
    else:  # dots
        pu = np.mod(freq * u + rng.uniform(0, 1), 1.0) - 0.5
        pv = np.mod(freq * v + rng.uniform(0, 1), 1.0) - 0.5
        t = np.exp(-(pu**2 + pv**2) / (2 * 0.15**2))
    return t


def render_texture(spec: TextureSpec, size: int, rng: np.random.Generator) -> np.ndarray:
    """Render one defect-free texture image, ``size x size x 3`` in [0, 1]."""
    t = _pattern(spec, size, rng)[..., None]
    a = np.asarray(spec.color_a, dtype=np.float64)
    b = np.asarray(spec.color_b, dtype=np.float64)
    img = a * (1.0 - t) + b * t
    img = img * (1.0 + spec.jitter * rng.uniform(-1, 1))
    img = img + rng.normal(0.0, 0.2 * spec.jitter, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def defect_region(record: DefectRecord, size: int) -> np.ndarray:
    """Boolean pixel mask of a defect's geometry (pixel centers)."""
    yy, xx = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
    p = record.params
    if record.kind == "blob":
        cy, cx, r = p
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if record.kind == "scratch":
        y0, x0, y1, x1, w = p
        dy, dx = y1 - y0, x1 - x0
        t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / (dy * dy + dx * dx), 0.0, 1.0)
        dist2 = (yy - (y0 + t * dy)) ** 2 + (xx - (x0 + t * dx)) ** 2
        return dist2 <= (w / 2.0) ** 2
    if record.kind == "swap":
        top, left, h, w = p
        return (yy >= top) & (yy < top + h) & (xx >= left) & (xx < left + w)
    raise ConfigError(f"unknown defect kind {record.kind!r}")


def _random_defect(size: int, rng: np.random.Generator) -> DefectRecord:
    kind = DEFECT_KINDS[rng.integers(len(DEFECT_KINDS))]
    if kind == "blob":
        r = rng.uniform(0.07, 0.14) * size
        cy, cx = rng.uniform(r, size - r, size=2)
        return DefectRecord(kind, (float(cy), float(cx), float(r)))
    if kind == "scratch":
        length = rng.uniform(0.3, 0.6) * size
        theta = rng.uniform(0, np.pi)
        w = max(2.0, rng.uniform(0.03, 0.06) * size)
        cy, cx = rng.uniform(0.25 * size, 0.75 * size, size=2)
        dy, dx = 0.5 * length * np.sin(theta), 0.5 * length * np.cos(theta)
        return DefectRecord(kind, (float(cy - dy), float(cx - dx), float(cy + dy), float(cx + dx), float(w)))
    h, w = rng.uniform(0.15, 0.3, size=2) * size
    top = rng.uniform(0, size - h)
    left = rng.uniform(0, size - w)
    return DefectRecord(kind, (float(top), float(left), float(h), float(w)))


def _paint_defect(img: np.ndarray, record: DefectRecord, spec: TextureSpec, rng: np.random.Generator) -> np.ndarray:
    size = img.shape[0]
    region = defect_region(record, size)
    if record.kind == "swap":
        others = [f for f in TEXTURE_FAMILIES if f != spec.family]
        swap_spec = TextureSpec(
            family=others[rng.integers(len(others))],
            color_a=tuple(rng.uniform(0, 1, size=3)),
            color_b=tuple(rng.uniform(0, 1, size=3)),
            frequency=float(rng.uniform(10, 20)),
            angle=float(rng.uniform(0, np.pi)),
            jitter=spec.jitter,
        )
        fill = render_texture(swap_spec, size, rng)
    else:
        # push away from the local mean colour so the defect is high-contrast
        mean = img[region].mean(axis=0) if region.any() else img.mean(axis=(0, 1))
        target = np.where(mean > 0.5, rng.uniform(0.0, 0.15, 3), rng.uniform(0.85, 1.0, 3))
        fill = np.broadcast_to(target, img.shape) + rng.normal(0.0, 0.03, size=img.shape)
    out = img.copy()
    out[region] = np.clip(fill[region], 0.0, 1.0)
    return out


def generate_synthetic_domain(
    spec: TextureSpec,
    n_normal: int,
    n_abnormal: int,
    seed: int,
    *,
    size: int = 256,
    domain: str | None = None,
    n_test_normal: int | None = None,
) -> DomainDataset:
    """Generate a deterministic synthetic texture domain.

    Normal images are jittered renderings of ``spec``; abnormal images get
    one to three injected defects whose exact pixel masks are recorded.
    The last ``n_test_normal`` normals are tagged as test-split images
    (default: ``min(n_abnormal, n_normal // 2)``).
    """
    if n_normal < 1:
        raise ConfigError("n_normal must be at least 1")
    if n_abnormal < 0:
        raise ConfigError("n_abnormal must be non-negative")
    name = domain or spec.family
    if n_test_normal is None:
        n_test_normal = min(n_abnormal, n_normal // 2)
    if not 0 <= n_test_normal < n_normal:
        raise ConfigError(f"n_test_normal must be in [0, {n_normal}), got {n_test_normal}")

    rng = np.random.default_rng(seed)
    quant = lambda a: (np.rint(a * 255.0) / 255.0).astype(np.float32)  # noqa: E731

    normal = []
    for i in range(n_normal):
        split = "train" if i < n_normal - n_test_normal else "test"
        px = quant(render_texture(spec, size, rng))
        normal.append(ImageSample(px, 0, name, None, f"synthetic/{name}/normal/{i:03d}", split))

    abnormal = []
    for i in range(n_abnormal):
        img = render_texture(spec, size, rng)
        records = tuple(_random_defect(size, rng) for _ in range(int(rng.integers(1, 4))))
        mask = np.zeros((size, size), dtype=bool)
        for rec in records:
            img = _paint_defect(img, rec, spec, rng)
            mask |= defect_region(rec, size)
        abnormal.append(
            ImageSample(
                quant(img), 1, name, mask.astype(np.uint8), f"synthetic/{name}/abnormal/{i:03d}", "test", records
            )
        )
    return DomainDataset(name, normal, abnormal)


# ---------------------------------------------------------------------------
# Splits and episodes
# ---------------------------------------------------------------------------


def make_leave_one_out_split(domains: Sequence[str], target: str, reference_fraction: float = 1.0) -> SplitConfig:
    if target not in domains:
        raise ConfigError(f"target {target!r} not among domains {list(domains)}")
    sources = tuple(d for d in domains if d != target)
    if not sources:
        raise ConfigError("leave-one-out split leaves no source domains")
    return SplitConfig(sources, target, reference_fraction)


def reference_count(fraction: float, n_available: int) -> int:
    """Images drawn for a reference bank: ``ceil(fraction * n)``, at least 1."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    if n_available < 1:
        raise DataError("no normal images available for the reference bank")
    # the tolerance absorbs float noise such as 0.1 * 30 = 3.0000000000000004
    return min(n_available, max(1, math.ceil(fraction * n_available - 1e-9)))


def sample_episode(
    sources: Sequence[DomainDataset],
    n_ref: int,
    rng: np.random.Generator,
    p_abnormal: float = 0.5,
) -> Episode:
    """Draw one query-reference episode from a uniformly chosen source domain.

    Domains with fewer than ``n_ref + 1`` normals are skipped; the choice is
    uniform over the remaining ones.
    """
    if n_ref < 1:
        raise ConfigError("n_ref must be at least 1")
    eligible = [d for d in sources if len(d.normal) >= n_ref + 1]
    if not eligible:
        raise DataError(f"no source domain has the {n_ref + 1} normal images an episode needs")
    ds = eligible[rng.integers(len(eligible))]

    if ds.abnormal and rng.random() < p_abnormal:
        query = ds.abnormal[rng.integers(len(ds.abnormal))]
        ref_idx = rng.choice(len(ds.normal), size=n_ref, replace=False)
    else:
        q = int(rng.integers(len(ds.normal)))
        query = ds.normal[q]
        pool = np.delete(np.arange(len(ds.normal)), q)
        ref_idx = rng.choice(pool, size=n_ref, replace=False)
    return Episode(query, tuple(ds.normal[i] for i in ref_idx), ds.domain)


def domain_paths(datasets: Iterable[DomainDataset]) -> set[str]:
    return {s.path for d in datasets for s in d.samples}


@dataclass(frozen=True)
class SyntheticDomainConfig:
    """One entry of a synthetic benchmark: a named texture plus image counts."""

    name: str
    texture: TextureSpec
    n_normal: int = 40
    n_abnormal: int = 20
    seed: int = 0
    n_test_normal: int | None = None

    def generate(self, size: int) -> DomainDataset:
        return generate_synthetic_domain(
            self.texture,
            self.n_normal,
            self.n_abnormal,
            self.seed,
            size=size,
            domain=self.name,
            n_test_normal=self.n_test_normal,
        )


def _jitter_sample(s: ImageSample, perm, gain, offset, invert: bool, k: int, flip: bool) -> ImageSample:
    px = s.pixels[..., perm] * gain + offset
    if invert:
        px = 1.0 - px
    px = np.rot90(np.clip(px, 0.0, 1.0), k)
    mask = None if s.mask is None else np.rot90(s.mask, k)
    if flip:
        px = px[:, ::-1]
        mask = None if mask is None else mask[:, ::-1]
    mask = None if mask is None else np.ascontiguousarray(mask)
    return ImageSample(np.ascontiguousarray(px, dtype=np.float32), s.label, s.domain, mask, s.path, s.split, ())


def jitter_episode(episode: Episode, rng: np.random.Generator, strength: float) -> Episode:
    """Apply one random appearance transform to the query and all references alike.

    Channel permutation, per-channel gain/offset, optional inversion and a
    random dihedral rotation; every image in the episode shares the draw, so
    the episode looks like it came from a new domain.
    """
    if strength <= 0:
        return episode
    perm = rng.permutation(3)
    gain = rng.uniform(1.0 - strength, 1.0 + strength, size=3).astype(np.float32)
    offset = rng.uniform(-strength / 2, strength / 2, size=3).astype(np.float32)
    invert = bool(rng.random() < 0.5 * strength)
    k, flip = int(rng.integers(4)), bool(rng.integers(2))
    args = (perm, gain, offset, invert, k, flip)
    return Episode(_jitter_sample(episode.query, *args), tuple(_jitter_sample(r, *args) for r in episode.reference), episode.domain)
