"""Pyramidal slides: construction, tissue masks, synthesis and disk I/O."""
from __future__ import annotations

import dataclasses
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from . import kernels

LOG = logging.getLogger(__name__)

NUM_CLASSES = 3
BACKGROUND, TUMOR, OTHERS = 0, 1, 2
CLASS_NAMES = ("background", "tumor", "others")

_MASK_RED = np.array([0, 128, 255], dtype=np.uint8)


class SlideFormatError(ValueError):
    """Raised for malformed or inconsistent on-disk slides."""


@dataclass(frozen=True)
class LabelMask:
    """Per-pixel class plus an ``annotated`` plane; unannotated pixels are ignored."""

    classes: np.ndarray
    annotated: np.ndarray
    level: int = 0

    def __post_init__(self):
        if self.classes.shape != self.annotated.shape:
            raise ValueError(
                f"classes {self.classes.shape} and annotated {self.annotated.shape} differ"
            )

    @property
    def shape(self):
        return self.classes.shape

    @classmethod
    def full(cls, classes, level=0):
        classes = np.asarray(classes, dtype=np.uint8)
        return cls(classes, np.ones(classes.shape, dtype=bool), level)

    def coverage(self):
        return float(self.annotated.mean())


@dataclass(frozen=True)
class PyramidalSlide:
    levels: tuple
    id: str = "slide"
    base_mpp: float = 0.25
    tags: dict = field(default_factory=lambda: {"stain": "ER", "scanner": "Morphle", "source": "DS1"})

    @property
    def num_levels(self):
        return len(self.levels)

    @property
    def width(self):
        return self.levels[0].shape[1]

    @property
    def height(self):
        return self.levels[0].shape[0]

    def level(self, k):
        return self.levels[k]


def level_shape(height, width, k):
    """Dims of level ``k`` from level-0 dims (repeated ceil-halving)."""
    for _ in range(k):
        height, width = (height + 1) // 2, (width + 1) // 2
    return height, width


def build_pyramid(base, num_levels, **meta):
    """Stack ``num_levels`` factor-2 box-mean levels on top of ``base``.

    Odd edges average over the pixels that exist; means round half up.
    """
    base = np.asarray(base)
    if base.ndim != 3 or base.shape[2] != 3:
        raise ValueError(f"expected an RGB raster, got shape {base.shape}")
    if num_levels < 2:
        raise ValueError(f"num_levels must be >= 2, got {num_levels}")
    need = 2 ** (num_levels - 1)
    if base.shape[0] < need or base.shape[1] < need:
        raise ValueError(
            f"base {base.shape[1]}x{base.shape[0]} too small for {num_levels} levels "
            f"(needs >= {need} px per axis)"
        )
    levels = [np.ascontiguousarray(base, dtype=np.uint8)]
    for _ in range(num_levels - 1):
        levels.append(kernels.box_downsample(levels[-1]))
    return PyramidalSlide(levels=tuple(levels), **meta)


# --------------------------------------------------------------------------
# tissue mask
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TissueMask:
    mask: np.ndarray
    fraction: float
    threshold: int
    degenerate: bool


def to_gray(rgb):
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim == 2:
        return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    g = rgb[..., 0] * 0.299 + rgb[..., 1] * 0.587 + rgb[..., 2] * 0.114
    return np.clip(np.rint(g), 0, 255).astype(np.uint8)


def otsu_tissue_mask(level_image):
    """Otsu on grayscale; tissue is the darker side (``gray <= threshold``)."""
    gray = to_gray(level_image)
    if gray.size == 0:
        raise ValueError("empty image")
    hist = np.bincount(gray.ravel(), minlength=256).astype(np.float64)
    t = int(kernels.otsu_from_hist(hist))
    if t < 0:
        return TissueMask(np.zeros(gray.shape, dtype=bool), 0.0, -1, True)
    mask = gray <= t
    return TissueMask(mask, float(mask.mean()), t, False)


# --------------------------------------------------------------------------
# synthetic slides
# --------------------------------------------------------------------------

# nuclear stain colours (RGB) per stain tag; HE counterstain is blue/purple
_STAIN_NUCLEUS = {
    "ER": (120, 70, 30),
    "PR": (135, 80, 35),
    "Ki67": (110, 60, 25),
    "HER2": (150, 95, 40),
    "HE": (70, 60, 140),
}
_SCANNER_CAST = {
    "Morphle": (0, 0, 0),
    "Optrascan": (8, -4, -6),
    "Philips": (-6, 2, 10),
    "Motic": (4, 6, -8),
}


@dataclass(frozen=True)
class SynthSpec:
    width: int = 1280
    height: int = 1280
    num_levels: int = 4
    tumor_blob_count: int = 3
    ring_structure_count: int = 2
    texture_scale: float = 1.0
    seed: int = 0
    tumor_radius: tuple = (110, 170)
    ring_radius: tuple = (165, 205)
    ring_thickness: tuple = (14, 20)
    stain: str = "ER"
    scanner: str = "Morphle"
    source: str = "DS1"
    base_mpp: float = 0.25

    @classmethod
    def from_text(cls, text):
        """Parse ``key = value`` lines (``#`` comments allowed)."""
        defaults = cls()
        names = {f.name for f in dataclasses.fields(cls)}
        kw = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"bad spec line: {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in names:
                raise ValueError(f"unknown spec key {key!r}")
            cur = getattr(defaults, key)
            if isinstance(cur, tuple):
                kw[key] = tuple(float(v) for v in val.replace(",", " ").split())
            elif isinstance(cur, str):
                kw[key] = val
            elif isinstance(cur, float):
                kw[key] = float(val)
            else:
                kw[key] = int(val)
        return cls(**kw)

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = " ".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _blob_mask(shape, cy, cx, radius, rng, wobble=0.12, harmonics=4):
    """Star-shaped (hence connected) blob with a wobbly boundary.

    Returns the mask of the bounding window and the window's top-left corner.
    """
    h, w = shape
    reach = int(np.ceil(radius * (1 + wobble))) + 2
    y0, x0 = max(int(cy) - reach, 0), max(int(cx) - reach, 0)
    y1, x1 = min(int(cy) + reach + 1, h), min(int(cx) + reach + 1, w)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dy, dx = yy - cy, xx - cx
    theta = np.arctan2(dy, dx)
    r = np.ones_like(theta)
    for k in range(2, 2 + harmonics):
        r += wobble / k * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
    return np.hypot(dy, dx) <= radius * r, (slice(y0, y1), slice(x0, x1))


def _nuclear_texture(shape, rng, nucleus_rgb, scale):
    """Densely packed dark nuclei on a tinted cytoplasm background."""
    h, w = shape
    base = np.array([205, 170, 165], dtype=np.float64)
    img = np.empty((h, w, 3))
    img[:] = base
    density = 0.012 / scale**2
    n = rng.poisson(density * h * w)
    ys = rng.integers(0, h, n)
    xs = rng.integers(0, w, n)
    centers = np.zeros((h, w), dtype=bool)
    centers[ys, xs] = True
    rad = max(1, int(round(3 * scale)))
    disk = np.hypot(*np.mgrid[-rad:rad + 1, -rad:rad + 1]) <= rad
    nuclei = ndimage.binary_dilation(centers, structure=disk)
    shade = 1.0 + 0.15 * rng.standard_normal((h, w))
    nuc = np.asarray(nucleus_rgb, dtype=np.float64)
    img[nuclei] = nuc * shade[nuclei, None]
    img += 6.0 * rng.standard_normal((h, w, 3))
    return img


def _stroma_texture(shape, rng, scale):
    h, w = shape
    low = ndimage.gaussian_filter(rng.standard_normal((h, w)), 12 * scale)
    low /= np.abs(low).max() + 1e-9
    fibre = ndimage.gaussian_filter(rng.standard_normal((h, w)), (1.0, 6.0 * scale))
    fibre /= np.abs(fibre).max() + 1e-9
    base = np.array([200, 150, 172], dtype=np.float64)
    img = base + 10.0 * low[..., None] + 12.0 * fibre[..., None]
    img += 3.0 * rng.standard_normal((h, w, 3))
    return img


def _place(rng, shape, radius, placed, tissue, margin=24, tries=1500):
    """Rejection-sample a centre; shrinks the structure when the slide is crowded.

    Returns ``(cy, cx, shrink)`` with ``shrink`` the factor applied to ``radius``.
    """
    h, w = shape
    for shrink in (1.0, 0.9, 0.8, 0.7, 0.6):
        r = radius * shrink
        if h - 2 * (r + margin) <= 0 or w - 2 * (r + margin) <= 0:
            continue
        for _ in range(tries):
            cy = rng.uniform(r + margin, h - r - margin)
            cx = rng.uniform(r + margin, w - r - margin)
            if not tissue[int(cy), int(cx)]:
                continue
            if all(np.hypot(cy - py, cx - px) > r + pr + margin for py, px, pr in placed):
                return cy, cx, shrink
    raise ValueError(
        "could not place all structures; enlarge the slide or reduce counts/radii"
    )


def synth_slide(spec: SynthSpec):
    """Generate a synthetic slide and its exact level-0 label mask.

    Tumor blobs and ring interiors share one texture generator, so the two
    classes differ only by the enclosing ring.
    """
    rng = np.random.default_rng(spec.seed)
    shape = (spec.height, spec.width)
    h, w = shape

    # tissue region: a large smooth blob, glass outside
    yy, xx = np.mgrid[0:h, 0:w]
    field_ = ndimage.gaussian_filter(rng.standard_normal((h // 8 + 1, w // 8 + 1)), 4)
    field_ = ndimage.zoom(field_, 8, order=1)[:h, :w]
    field_ /= np.abs(field_).max() + 1e-9
    ell = ((yy - h / 2) / (0.47 * h)) ** 2 + ((xx - w / 2) / (0.47 * w)) ** 2
    tissue = ell + 0.25 * field_ < 1.0

    img = np.empty((h, w, 3))
    img[:] = (244, 244, 246)
    stroma = _stroma_texture(shape, rng, spec.texture_scale)
    img[tissue] = stroma[tissue]

    classes = np.zeros(shape, dtype=np.uint8)
    nucleus = _STAIN_NUCLEUS.get(spec.stain, _STAIN_NUCLEUS["ER"])
    placed = []

    # rings first: they are the largest
    for _ in range(spec.ring_structure_count):
        radius = rng.uniform(*spec.ring_radius)
        cy, cx, shrink = _place(rng, shape, radius * 1.15, placed, tissue)
        radius *= shrink
        placed.append((cy, cx, radius * 1.15))
        outer, win = _blob_mask(shape, cy, cx, radius, rng, wobble=0.05, harmonics=3)
        thick = rng.uniform(*spec.ring_thickness)
        inner = ndimage.binary_erosion(outer, iterations=int(round(thick)))
        tex = _nuclear_texture(outer.shape, rng, nucleus, spec.texture_scale)
        sub = img[win]
        sub[inner] = tex[inner]
        band = outer & ~inner
        ring_rgb = np.array([95, 55, 120], dtype=np.float64)
        sub[band] = ring_rgb + 8.0 * rng.standard_normal((int(band.sum()), 3))
        classes[win][outer] = OTHERS

    for _ in range(spec.tumor_blob_count):
        radius = rng.uniform(*spec.tumor_radius)
        cy, cx, shrink = _place(rng, shape, radius * 1.3, placed, tissue)
        radius *= shrink
        placed.append((cy, cx, radius * 1.3))
        blob, win = _blob_mask(shape, cy, cx, radius, rng)
        tex = _nuclear_texture(blob.shape, rng, nucleus, spec.texture_scale)
        img[win][blob] = tex[blob]
        classes[win][blob] = TUMOR

    cast = np.asarray(_SCANNER_CAST.get(spec.scanner, (0, 0, 0)), dtype=np.float64)
    img[tissue] += cast
    base = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    slide = build_pyramid(
        base,
        spec.num_levels,
        id=f"synth_{spec.seed}",
        base_mpp=spec.base_mpp,
        tags={"stain": spec.stain, "scanner": spec.scanner, "source": spec.source},
    )
    return slide, LabelMask.full(classes, level=0)


def structure_centers(mask: LabelMask):
    """Centroids (y, x, class) of every connected class-1/2 component."""
    out = []
    for cls in (TUMOR, OTHERS):
        lab, n = ndimage.label(mask.classes == cls)
        for cy, cx in ndimage.center_of_mass(np.ones_like(lab), lab, range(1, n + 1)):
            out.append((int(round(cy)), int(round(cx)), cls))
    return out


def partial_annotation(mask: LabelMask, n_regions=3, region_size=384, seed=0):
    """Keep annotation only inside a few square regions.

    Regions are centred on distinct structures (one per class where possible),
    mimicking selective region-wise annotation by pathologists.
    """
    rng = np.random.default_rng(seed)
    h, w = mask.shape
    centers = structure_centers(mask)
    rng.shuffle(centers)
    chosen = []
    for cls in (OTHERS, TUMOR):
        for c in centers:
            if c[2] == cls and c not in chosen:
                chosen.append(c)
                break
    for c in centers:
        if len(chosen) >= n_regions:
            break
        if c not in chosen:
            chosen.append(c)
    # fill up with background-only regions
    bg = np.argwhere(mask.classes[::32, ::32] == BACKGROUND) * 32
    while len(chosen) < n_regions and len(bg):
        y, x = bg[rng.integers(len(bg))]
        chosen.append((int(y), int(x), BACKGROUND))
    ann = np.zeros(mask.shape, dtype=bool)
    half = region_size // 2
    for cy, cx, _ in chosen[:n_regions]:
        ann[max(cy - half, 0):cy + half, max(cx - half, 0):cx + half] = True
    return LabelMask(mask.classes.copy(), ann & mask.annotated, mask.level)


# --------------------------------------------------------------------------
# disk format
# --------------------------------------------------------------------------

MANIFEST_KEYS = ("id", "num_levels", "width", "height", "base_mpp", "stain", "scanner", "source")


def _atomic_png(arr, path):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".png.tmp")
    os.close(fd)
    try:
        Image.fromarray(arr).save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_mask(mask: LabelMask):
    rgb = np.zeros(mask.shape + (3,), dtype=np.uint8)
    rgb[..., 0] = _MASK_RED[mask.classes]
    rgb[..., 1] = np.where(mask.annotated, 255, 0).astype(np.uint8)
    return rgb


def decode_mask(rgb, level=0):
    red = rgb[..., 0]
    classes = np.full(red.shape, 255, dtype=np.uint8)
    for k, v in enumerate(_MASK_RED):
        classes[red == v] = k
    if (classes == 255).any():
        raise SlideFormatError("mask red channel holds values outside {0,128,255}")
    return LabelMask(classes, rgb[..., 1] >= 128, level)


def save_mask(mask: LabelMask, path):
    _atomic_png(encode_mask(mask), path)


def load_mask(path, level=0):
    with Image.open(path) as im:
        return decode_mask(np.asarray(im.convert("RGB")), level)


def save_slide(slide: PyramidalSlide, path, mask: LabelMask | None = None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for k, lvl in enumerate(slide.levels):
        _atomic_png(lvl, path / f"level_{k}.png")
    if mask is not None:
        if mask.shape != slide.levels[0].shape[:2]:
            raise SlideFormatError("mask must match level-0 dims")
        save_mask(mask, path / "mask_level0.png")
    meta = {
        "id": slide.id,
        "num_levels": slide.num_levels,
        "width": slide.width,
        "height": slide.height,
        "base_mpp": repr(float(slide.base_mpp)),
        **{k: slide.tags.get(k, "") for k in ("stain", "scanner", "source")},
    }
    text = "".join(f"{k}={meta[k]}\n" for k in MANIFEST_KEYS)
    tmp = path / "manifest.tmp"
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path / "manifest")


def read_manifest(path):
    meta = {}
    for line in (Path(path) / "manifest").read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, _, val = line.partition("=")
            meta[key.strip()] = val.strip()
    missing = [k for k in MANIFEST_KEYS if k not in meta]
    if missing:
        raise SlideFormatError(f"manifest missing keys {missing}")
    return meta


def load_slide(path, with_mask=False):
    """Load a slide directory; with ``with_mask`` also return the mask (or None)."""
    path = Path(path)
    if not (path / "manifest").exists():
        raise SlideFormatError(f"no manifest in {path}")
    meta = read_manifest(path)
    n = int(meta["num_levels"])
    h, w = int(meta["height"]), int(meta["width"])
    levels = []
    for k in range(n):
        f = path / f"level_{k}.png"
        if not f.exists():
            raise SlideFormatError(f"missing level file {f.name}")
        with Image.open(f) as im:
            arr = np.asarray(im.convert("RGB"))
        if arr.shape[:2] != level_shape(h, w, k):
            raise SlideFormatError(
                f"{f.name} is {arr.shape[1]}x{arr.shape[0]}, manifest implies "
                f"{level_shape(h, w, k)[1]}x{level_shape(h, w, k)[0]}"
            )
        levels.append(arr)
    slide = PyramidalSlide(
        levels=tuple(levels),
        id=meta["id"],
        base_mpp=float(meta["base_mpp"]),
        tags={k: meta[k] for k in ("stain", "scanner", "source")},
    )
    if not with_mask:
        return slide
    mpath = path / "mask_level0.png"
    mask = load_mask(mpath) if mpath.exists() else None
    if mask is not None and mask.shape != (h, w):
        raise SlideFormatError("mask_level0.png does not match level-0 dims")
    return slide, mask
