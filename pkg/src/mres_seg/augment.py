"""Training-time augmentations, SSIM and the style-infusion hook.

Every function here is pure in ``(input, seed)``. Colour-only ops never touch
masks; geometric ops move image and mask through one shared index map.
"""
from __future__ import annotations

import dataclasses
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage import color

from .pyramid import LabelMask
from .sampler import PatchPair

LOG = logging.getLogger(__name__)

AUGMENT_NAMES = (
    "basic_geometric",
    "color_jitter",
    "heavy_color",
    "targeted_hsv",
    "noise_blur",
    "style_infuse",
    "xy_jitter",
)


@dataclass(frozen=True)
class HsvJitterRange:
    """Additive offsets on the 8-bit S and V channels (inclusive bounds)."""

    saturation_offset: tuple
    value_offset: tuple
    hue_window: tuple
    min_saturation: int = 40


STAIN_RANGES = {
    "brown": HsvJitterRange((-30, 81), (-80, 81), (10.0, 50.0)),
    "blue": HsvJitterRange((-40, 61), (-60, 61), (180.0, 280.0)),
}


@dataclass(frozen=True)
class AugmentPlan:
    enabled: frozenset = frozenset({"basic_geometric"})
    style_probability: float = 0.3
    op_probability: float = 0.5
    seed: int = 0

    def __post_init__(self):
        unknown = set(self.enabled) - set(AUGMENT_NAMES)
        if unknown:
            raise ValueError(f"unknown augmentations {sorted(unknown)}")
        if not 0.0 <= self.style_probability <= 1.0:
            raise ValueError("style_probability must lie in [0, 1]")
        object.__setattr__(self, "enabled", frozenset(self.enabled))

    def to_names(self):
        return [n for n in AUGMENT_NAMES if n in self.enabled]

    @classmethod
    def from_names(cls, names, **kw):
        return cls(enabled=frozenset(n.strip() for n in names if n.strip()), **kw)


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _to_uint8(x):
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


# --------------------------------------------------------------------------
# geometry
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GeometricDraw:
    flip: bool = False
    quarter_turns: int = 0  # clockwise
    scale: float = 1.0
    shift: tuple = (0.0, 0.0)  # (dy, dx) in high-level pixels

    @property
    def is_identity(self):
        return not self.flip and self.quarter_turns % 4 == 0 and self.scale == 1.0 \
            and self.shift == (0.0, 0.0)

    def source_coords(self, size, shift_div=1):
        """Source (row, col) for every output pixel of a ``size``-square patch."""
        c = (size - 1) / 2.0
        ii, jj = np.mgrid[0:size, 0:size].astype(np.float64)
        u = (ii - c - self.shift[0] / shift_div) / self.scale
        v = (jj - c - self.shift[1] / shift_div) / self.scale
        # undo the clockwise rotation: out[i, j] = in[n-1-j, i]
        for _ in range(self.quarter_turns % 4):
            u, v = -v, u
        if self.flip:
            v = -v
        return np.stack([u + c, v + c])


def draw_geometric(seed, patch_size=512, max_scale=0.1, max_shift=None):
    rng = _rng(seed)
    max_shift = patch_size // 16 if max_shift is None else max_shift
    return GeometricDraw(
        flip=bool(rng.integers(2)),
        quarter_turns=int(rng.integers(4)),
        scale=float(rng.uniform(1 - max_scale, 1 + max_scale)),
        shift=(float(rng.integers(-max_shift, max_shift + 1)),
               float(rng.integers(-max_shift, max_shift + 1))),
    )


def warp(arr, coords, order):
    """Resample a 2-D or HxWxC array at ``coords`` (reflect at borders)."""
    if arr.ndim == 2:
        return ndimage.map_coordinates(arr.astype(np.float64), coords, order=order, mode="mirror")
    return np.stack(
        [warp(arr[..., k], coords, order) for k in range(arr.shape[2])], axis=-1
    )


def _warp_mask(mask: LabelMask, coords):
    n = mask.shape[0]
    inside = np.all((coords > -0.5) & (coords < n - 0.5), axis=0)
    cls = warp(mask.classes, coords, 0).astype(np.uint8)
    ann = warp(mask.annotated.astype(np.uint8), coords, 0).astype(bool) & inside
    return LabelMask(cls, ann, mask.level)


def apply_geometric(pair: PatchPair, draw: GeometricDraw) -> PatchPair:
    if draw.is_identity:
        return dataclasses.replace(pair)
    div = 2 ** (pair.levels[1] - pair.levels[0])
    out = {}
    for name, d in (("high", 1), ("low", div)):
        img = getattr(pair, name)
        coords = draw.source_coords(img.shape[0], d)
        out[name] = _to_uint8(warp(img, coords, 1))
        m = getattr(pair, name + "_mask")
        out[name + "_mask"] = None if m is None else _warp_mask(m, coords)
    return dataclasses.replace(pair, **out)


def geometric_augment(pair: PatchPair, seed) -> PatchPair:
    """Flip / quarter-turn / rescale / shift, shared by both branches.

    The shift at the low level is the high-level shift divided by the level
    ratio, so the pair stays co-centred.
    """
    return apply_geometric(pair, draw_geometric(seed, pair.high.shape[0]))


# --------------------------------------------------------------------------
# colour
# --------------------------------------------------------------------------

def hsv_adjust(image, hue_shift=0.0, sat_scale=1.0, val_scale=1.0):
    """Rotate hue by ``hue_shift`` turns and scale S and V (clipped)."""
    if hue_shift == 0.0 and sat_scale == 1.0 and val_scale == 1.0:
        return image.copy()
    hsv = color.rgb2hsv(image)
    hsv[..., 0] = np.mod(hsv[..., 0] + hue_shift, 1.0)
    hsv[..., 1] = np.clip(hsv[..., 1] * sat_scale, 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] * val_scale, 0.0, 1.0)
    return _to_uint8(color.hsv2rgb(hsv) * 255.0)


def heavy_color_augment(image, seed):
    """Extreme colour draw: any hue rotation, S and V scaled in [0.5, 1.5]."""
    rng = _rng(seed)
    return hsv_adjust(image, rng.uniform(0.0, 1.0), rng.uniform(0.5, 1.5), rng.uniform(0.5, 1.5))


def color_jitter(image, seed):
    """Mild jitter: +-0.02 turn hue, 0.9-1.1 saturation/value/contrast."""
    rng = _rng(seed)
    out = hsv_adjust(image, rng.uniform(-0.02, 0.02), rng.uniform(0.9, 1.1), rng.uniform(0.9, 1.1))
    k = rng.uniform(0.9, 1.1)
    mean = out.reshape(-1, 3).mean(axis=0)
    return _to_uint8((out - mean) * k + mean)


def rgb_to_hsv8(image):
    """Hue in degrees, saturation and value on the 8-bit scale (floats)."""
    hsv = color.rgb2hsv(image)
    return np.stack([hsv[..., 0] * 360.0, hsv[..., 1] * 255.0, hsv[..., 2] * 255.0], axis=-1)


def hsv8_to_rgb(hsv8):
    hsv = np.stack([hsv8[..., 0] / 360.0, hsv8[..., 1] / 255.0, hsv8[..., 2] / 255.0], axis=-1)
    return _to_uint8(color.hsv2rgb(hsv) * 255.0)


def stain_mask(hsv8, rng_def: HsvJitterRange):
    lo, hi = rng_def.hue_window
    h, s = hsv8[..., 0], hsv8[..., 1]
    return (h >= lo) & (h <= hi) & (s > rng_def.min_saturation)


def shift_sv(hsv8, mask, sat_offset, val_offset):
    """Add offsets to S and V of masked pixels only (clipped to [0, 255])."""
    out = hsv8.copy()
    out[..., 1] = np.where(mask, np.clip(hsv8[..., 1] + sat_offset, 0, 255), hsv8[..., 1])
    out[..., 2] = np.where(mask, np.clip(hsv8[..., 2] + val_offset, 0, 255), hsv8[..., 2])
    return out


def draw_hsv_offsets(seed, ranges=None):
    rng = _rng(seed)
    ranges = STAIN_RANGES if ranges is None else ranges
    return {
        name: (int(rng.integers(r.saturation_offset[0], r.saturation_offset[1], endpoint=True)),
               int(rng.integers(r.value_offset[0], r.value_offset[1], endpoint=True)))
        for name, r in ranges.items()
    }


def targeted_hsv_augment(image, seed, ranges=None, offsets=None):
    """Shift S/V of stained (brown or blue) pixels only.

    One offset pair per stain colour per image. Pixels outside the stain
    masks are copied through untouched.
    """
    ranges = STAIN_RANGES if ranges is None else ranges
    offsets = draw_hsv_offsets(seed, ranges) if offsets is None else offsets
    hsv8 = rgb_to_hsv8(image)
    shifted = hsv8
    touched = np.zeros(image.shape[:2], dtype=bool)
    for name, r in ranges.items():
        m = stain_mask(hsv8, r) & ~touched
        ds, dv = offsets.get(name, (0, 0))
        if (ds or dv) and m.any():
            shifted = shift_sv(shifted, m, ds, dv)
            touched |= m
    out = image.copy()
    if touched.any():
        out[touched] = hsv8_to_rgb(shifted)[touched]
    return out


# --------------------------------------------------------------------------
# noise / blur
# --------------------------------------------------------------------------

NOISE_KINDS = ("gaussian_noise", "gaussian_blur", "motion_blur")


def _motion_kernel(length, angle):
    k = np.zeros((length, length))
    c = length // 2
    if angle == 0:
        k[c, :] = 1
    elif angle == 90:
        k[:, c] = 1
    elif angle == 45:
        k[np.arange(length)[::-1], np.arange(length)] = 1
    else:
        k[np.arange(length), np.arange(length)] = 1
    return k / k.sum()


def noise_blur_augment(image, seed, kind=None, strength=None):
    """One of Gaussian noise, Gaussian blur or motion blur.

    ``strength`` is the noise sigma, the blur sigma or the motion length.
    """
    rng = _rng(seed)
    kind = NOISE_KINDS[int(rng.integers(3))] if kind is None else kind
    img = image.astype(np.float64)
    if kind == "gaussian_noise":
        sigma = rng.uniform(2, 10) if strength is None else strength
        if sigma == 0:
            return image.copy()
        return _to_uint8(img + rng.normal(0.0, sigma, img.shape))
    if kind == "gaussian_blur":
        sigma = rng.uniform(0.5, 2.0) if strength is None else strength
        return _to_uint8(ndimage.gaussian_filter(img, (sigma, sigma, 0), mode="reflect"))
    if kind == "motion_blur":
        length = int(rng.integers(3, 10)) if strength is None else int(strength)
        angle = (0, 45, 90, 135)[int(rng.integers(4))]
        k = _motion_kernel(length, angle)
        out = np.stack(
            [ndimage.convolve(img[..., c], k, mode="reflect") for c in range(img.shape[2])], axis=-1
        )
        return _to_uint8(out)
    raise ValueError(f"unknown noise/blur kind {kind!r}")


# --------------------------------------------------------------------------
# SSIM
# --------------------------------------------------------------------------

SSIM_SIGMA = 1.5
SSIM_WINDOW = 11
SSIM_C1 = (0.01 * 255) ** 2
SSIM_C2 = (0.03 * 255) ** 2


def gaussian_window_1d(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def _local_mean(x, w):
    x = ndimage.correlate1d(x, w, axis=0, mode="reflect")
    return ndimage.correlate1d(x, w, axis=1, mode="reflect")


def ssim_map(a, b):
    """Per-pixel SSIM of two single-channel images on the 0-255 scale."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    w = gaussian_window_1d()
    mu_a, mu_b = _local_mean(a, w), _local_mean(b, w)
    var_a = _local_mean(a * a, w) - mu_a * mu_a
    var_b = _local_mean(b * b, w) - mu_b * mu_b
    cov = _local_mean(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(a, b):
    """Mean SSIM; three-channel inputs average the per-channel scores."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim needs equal shapes, got {a.shape} and {b.shape}")
    if a.ndim == 2:
        return float(ssim_map(a, b).mean())
    return float(np.mean([ssim_map(a[..., c], b[..., c]).mean() for c in range(a.shape[2])]))


# --------------------------------------------------------------------------
# style infusion
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class StyleEntry:
    """Target colour statistics in CIELAB (L, a, b means and stds)."""

    stain: str
    scanner: str
    mean: tuple
    std: tuple


def lab_stats(image):
    lab = color.rgb2lab(image).reshape(-1, 3)
    return tuple(lab.mean(axis=0)), tuple(lab.std(axis=0))


def color_transfer(image, src_stats, entry: StyleEntry):
    lab = color.rgb2lab(image)
    mean_s, std_s = (np.asarray(v) for v in src_stats)
    mean_t, std_t = np.asarray(entry.mean), np.asarray(entry.std)
    lab = (lab - mean_s) / np.maximum(std_s, 1e-6) * std_t + mean_t
    with warnings.catch_warnings():
        # out-of-gamut Lab values are clipped on purpose
        warnings.simplefilter("ignore", UserWarning)
        rgb = color.lab2rgb(lab)
    return _to_uint8(rgb * 255.0)


def style_infuse(pairs, style_bank, probability=0.3, seed=0, min_ssim=0.7):
    """Remap colour statistics of some pairs to a random style-bank entry.

    Returns ``(pairs, styled)`` where ``styled[i]`` tells whether pair ``i``
    was restyled. Draws whose SSIM against the original fall below
    ``min_ssim`` are rejected and the original kept.
    """
    rng = _rng(seed)
    pairs = list(pairs)
    styled = [False] * len(pairs)
    if not style_bank:
        if probability > 0:
            warnings.warn("empty style bank; style infusion disabled", RuntimeWarning, stacklevel=2)
        return pairs, styled
    bank = list(style_bank)
    out = []
    for i, p in enumerate(pairs):
        if rng.random() >= probability:
            out.append(p)
            continue
        entry = bank[int(rng.integers(len(bank)))]
        stats = lab_stats(p.high)
        high = color_transfer(p.high, stats, entry)
        if ssim(p.high, high) < min_ssim:
            out.append(p)
            continue
        out.append(dataclasses.replace(p, high=high, low=color_transfer(p.low, stats, entry)))
        styled[i] = True
    return out, styled


def build_style_bank(slides, level=2):
    """One entry per (stain, scanner) averaging tissue Lab stats of its slides."""
    from .pyramid import otsu_tissue_mask

    groups = {}
    for s in slides:
        img = s.level(min(level, s.num_levels - 1))
        tissue = otsu_tissue_mask(img).mask
        pix = img[tissue] if tissue.any() else img.reshape(-1, 3)
        lab = color.rgb2lab(pix[None])[0]
        key = (s.tags.get("stain", "?"), s.tags.get("scanner", "?"))
        groups.setdefault(key, []).append((lab.mean(axis=0), lab.std(axis=0)))
    return [
        StyleEntry(k[0], k[1], tuple(np.mean([m for m, _ in v], axis=0)),
                   tuple(np.mean([sd for _, sd in v], axis=0)))
        for k, v in sorted(groups.items())
    ]


def write_style_bank(bank, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# stain scanner mean_L mean_a mean_b std_L std_a std_b (CIELAB)\n")
        for e in bank:
            nums = " ".join(f"{v:.6f}" for v in (*e.mean, *e.std))
            fh.write(f"{e.stain} {e.scanner} {nums}\n")


def read_style_bank(path):
    bank = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ValueError(f"style bank line needs 8 fields: {line!r}")
        vals = [float(v) for v in parts[2:]]
        bank.append(StyleEntry(parts[0], parts[1], tuple(vals[:3]), tuple(vals[3:])))
    return bank


# --------------------------------------------------------------------------
# plan application
# --------------------------------------------------------------------------

def jitter_offsets(n, max_offset, seed):
    """Per-pair (dx, dy) centre offsets in level-0 pixels for xy-jitter."""
    rng = _rng(seed)
    return [tuple(int(v) for v in rng.integers(-max_offset, max_offset + 1, 2)) for _ in range(n)]


_COLOR_OPS = {
    "color_jitter": color_jitter,
    "heavy_color": heavy_color_augment,
    "targeted_hsv": targeted_hsv_augment,
    "noise_blur": noise_blur_augment,
}


def apply_plan(pairs, plan: AugmentPlan, seed, style_bank=()):
    """Apply every enabled op of ``plan`` to a list of pairs.

    Each colour op fires with ``plan.op_probability`` and uses one draw for
    both branches of a pair, so the two resolutions stay consistent.
    """
    ss = np.random.SeedSequence(seed)
    style_seed, *pair_seeds = ss.spawn(len(pairs) + 1)
    if "style_infuse" in plan.enabled:
        pairs, _ = style_infuse(pairs, style_bank, plan.style_probability,
                                np.random.default_rng(style_seed))
    out = []
    for p, s in zip(pairs, pair_seeds):
        rng = np.random.default_rng(s)
        if "basic_geometric" in plan.enabled:
            p = geometric_augment(p, rng)
        for name, fn in _COLOR_OPS.items():
            if name in plan.enabled and rng.random() < plan.op_probability:
                op_seed = int(rng.integers(2**63))
                p = dataclasses.replace(p, high=fn(p.high, op_seed), low=fn(p.low, op_seed))
        out.append(p)
    return out
