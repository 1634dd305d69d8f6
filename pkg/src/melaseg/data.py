"""Dataset ingestion, box derivation, splitting, resizing, crop/pad with exact
inverse mapping, and the synthetic dermoscopy-like generator."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import netpbm
from .detector import BoundingBox, write_labels

log = logging.getLogger(__name__)

MIN_COMPONENT = 9
FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


class DatasetError(ValueError):
    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class LabeledSample:
    image: np.ndarray          # (H, W, 3) uint8
    mask: np.ndarray           # (H, W) uint8 in {0, 1}
    boxes: list
    stem: str
    flags: list = field(default_factory=list)


# ---------------------------------------------------------------- boxes

def component_boxes(mask: np.ndarray, min_pixels: int = MIN_COMPONENT):
    """Inclusive pixel boxes ``(x1, y1, x2, y2)`` of 4-connected components, in label order."""
    labels, count = ndimage.label(np.asarray(mask) > 0, structure=FOUR_CONNECTED)
    out = []
    if count == 0:
        return out
    sizes = np.bincount(labels.ravel(), minlength=count + 1)
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None or sizes[k] < min_pixels:
            continue
        out.append((sl[1].start, sl[0].start, sl[1].stop - 1, sl[0].stop - 1))
    return out


def pixel_box_to_normalized(box, width: int, height: int) -> BoundingBox:
    x1, y1, x2, y2 = box
    return BoundingBox.from_corners(x1 / width, y1 / height, (x2 + 1) / width, (y2 + 1) / height)


def derive_box(mask: np.ndarray, min_pixels: int = MIN_COMPONENT) -> list[BoundingBox]:
    h, w = np.asarray(mask).shape
    return [pixel_box_to_normalized(b, w, h) for b in component_boxes(mask, min_pixels)]


# ---------------------------------------------------------------- loading

def load_dataset(image_dir, mask_dir) -> list[LabeledSample]:
    """Pair ``<stem>.ppm`` images with ``<stem>.pgm`` masks; all problems are
    collected and raised together."""
    image_dir, mask_dir = Path(image_dir), Path(mask_dir)
    images = {p.stem: p for p in sorted(image_dir.glob("*.ppm"))}
    masks = {p.stem: p for p in sorted(mask_dir.glob("*.pgm"))}
    problems = [f"{s}: image without mask" for s in sorted(images.keys() - masks.keys())]
    problems += [f"{s}: mask without image" for s in sorted(masks.keys() - images.keys())]
    samples = []
    for stem in sorted(images.keys() & masks.keys()):
        try:
            img = netpbm.read_ppm(images[stem])
            m = netpbm.read_pgm(masks[stem])
        except netpbm.NetpbmError as exc:
            problems.append(f"{stem}: {exc}")
            continue
        if img.shape[:2] != m.shape:
            problems.append(f"{stem}: image {img.shape[:2]} and mask {m.shape} extents differ")
            continue
        mask = (m >= 128).astype(np.uint8)
        sample = LabeledSample(img, mask, derive_box(mask), stem)
        if not sample.boxes:
            sample.flags.append("no-lesion")
            log.warning("%s: mask has no lesion component", stem)
        samples.append(sample)
    if problems:
        raise DatasetError(problems)
    if not samples:
        log.warning("no samples found under %s / %s", image_dir, mask_dir)
    return samples


def split_dataset(samples: Sequence, ratio: float = 0.7, seed: int = 0):
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    order = np.random.default_rng(seed).permutation(len(samples))
    cut = int(math.floor(len(samples) * ratio))
    return [samples[i] for i in order[:cut]], [samples[i] for i in order[cut:]]


# ---------------------------------------------------------------- resize

def _nearest_index(n_out: int, n_in: int) -> np.ndarray:
    i = np.arange(n_out)
    return ((2 * i + 1) * n_in) // (2 * n_out)


def resize(raster: np.ndarray, size, mode: str = "bilinear") -> np.ndarray:
    """Resize an (H, W[, C]) raster to ``size`` = (height, width).

    ``nearest`` samples the source pixel under each output pixel center;
    ``bilinear`` uses half-pixel-center alignment with edge clamping.
    """
    th, tw = (size, size) if isinstance(size, int) else size
    if th <= 0 or tw <= 0:
        raise ValueError(f"target extents must be positive, got {(th, tw)}")
    h, w = raster.shape[:2]
    if (h, w) == (th, tw):
        return raster.copy()
    if mode == "nearest":
        return raster[_nearest_index(th, h)][:, _nearest_index(tw, w)]
    if mode != "bilinear":
        raise ValueError(f"unknown resize mode {mode!r}")

    def axis(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(th, h)
    x0, x1, fx = axis(tw, w)
    r = raster.astype(np.float64)
    if r.ndim == 3:
        fy = fy[:, None, None]
        fxx = fx[None, :, None]
    else:
        fy = fy[:, None]
        fxx = fx[None, :]
    top = r[y0][:, x0] * (1 - fxx) + r[y0][:, x1] * fxx
    bot = r[y1][:, x0] * (1 - fxx) + r[y1][:, x1] * fxx
    out = top * (1 - fy) + bot * fy
    if np.issubdtype(raster.dtype, np.integer):
        info = np.iinfo(raster.dtype)
        return np.clip(np.rint(out), info.min, info.max).astype(raster.dtype)
    return out.astype(raster.dtype)


# ---------------------------------------------------------------- crop / pad

@dataclass(frozen=True)
class CropRecord:
    source: tuple          # (H, W)
    crop: tuple            # (x0, y0, x1, y1), half-open pixel rectangle
    pad: tuple             # (top, left) zero bands inside the padded square
    side: int              # padded square side
    target: tuple          # (th, tw) patch extents

    @property
    def scale(self) -> tuple[Fraction, Fraction]:
        """Source pixels per patch pixel along (y, x)."""
        return Fraction(self.side, self.target[0]), Fraction(self.side, self.target[1])

    def patch_to_source(self, px, py) -> tuple[Fraction, Fraction]:
        sy, sx = self.scale
        x0, y0 = self.crop[0], self.crop[1]
        top, left = self.pad
        return x0 - left + Fraction(px) * sx, y0 - top + Fraction(py) * sy

    def source_to_patch(self, x, y) -> tuple[Fraction, Fraction]:
        sy, sx = self.scale
        top, left = self.pad
        return (Fraction(x) - self.crop[0] + left) / sx, (Fraction(y) - self.crop[1] + top) / sy


def expanded_crop(box: BoundingBox, width: int, height: int, margin: float):
    """Half-open integer rectangle covering ``box`` grown by ``margin`` of its size per side."""
    x1, y1, x2, y2 = box.to_pixels(width, height)
    mx = margin * (x2 - x1)
    my = margin * (y2 - y1)
    x0 = max(0, int(math.floor(x1 - mx + 1e-9)))
    y0 = max(0, int(math.floor(y1 - my + 1e-9)))
    xe = min(width, int(math.ceil(x2 + mx - 1e-9)))
    ye = min(height, int(math.ceil(y2 + my - 1e-9)))
    return x0, y0, xe, ye


def crop_and_pad(image: np.ndarray, box: BoundingBox, margin: float = 0.1, target=64,
                 mode: str = "bilinear"):
    """Crop the margin-expanded box, zero-pad to a centered square, resize to ``target``."""
    h, w = image.shape[:2]
    x0, y0, x1, y1 = expanded_crop(box, w, h, margin)
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"box {box} does not intersect the {w}x{h} image")
    crop = image[y0:y1, x0:x1]
    ch, cw = crop.shape[:2]
    side = max(ch, cw)
    top, left = (side - ch) // 2, (side - cw) // 2
    padded = np.zeros((side, side) + image.shape[2:], dtype=image.dtype)
    padded[top:top + ch, left:left + cw] = crop
    th, tw = (target, target) if isinstance(target, int) else tuple(target)
    rec = CropRecord((h, w), (x0, y0, x1, y1), (top, left), side, (th, tw))
    return resize(padded, (th, tw), mode), rec


def map_mask_back(mask: np.ndarray, record: CropRecord, source=None) -> np.ndarray:
    """Place a patch-space mask back into a zero canvas at source resolution."""
    source = tuple(source) if source is not None else record.source
    if tuple(mask.shape[:2]) != tuple(record.target):
        raise ValueError(f"mask extents {mask.shape[:2]} differ from the record target {record.target}")
    if source != tuple(record.source):
        raise ValueError(f"source extents {source} differ from the record source {record.source}")
    padded = resize(np.asarray(mask), (record.side, record.side), "nearest")
    x0, y0, x1, y1 = record.crop
    top, left = record.pad
    canvas = np.zeros(source, dtype=padded.dtype)
    canvas[y0:y1, x0:x1] = padded[top:top + (y1 - y0), left:left + (x1 - x0)]
    return canvas


# ---------------------------------------------------------------- synthesis

@dataclass
class SynthSpec:
    count: int = 100
    side: int = 64
    lesions: tuple = (1, 2)
    radius: tuple = (0.09, 0.2)        # semi-axis range, fraction of side
    aspect: tuple = (0.7, 1.0)         # minor / major semi-axis ratio
    irregularity: float = 0.15         # amplitude a of r0 * (1 + a sin(k theta + phi))
    lobes: tuple = (3, 7)              # k range, inclusive
    hair: bool = True
    frame: bool = True
    ruler: bool = True
    bubbles: bool = True
    noise: float = 0.03
    seed: int = 0
    train_ratio: float = 0.7

    def __post_init__(self):
        for name in ("lesions", "radius", "aspect", "lobes"):
            setattr(self, name, tuple(getattr(self, name)))
        if not 0 <= self.irregularity < 1:
            raise ValueError("irregularity must lie in [0, 1)")


@dataclass
class Lesion:
    cx: float
    cy: float
    major: float
    minor: float
    angle: float
    amp: float
    lobes: int
    phase: float

    def radius_at(self, theta):
        """Boundary distance along direction ``theta`` (image frame)."""
        t = theta - self.angle
        a, b = self.major, self.minor
        base = a * b / np.sqrt((b * np.cos(t)) ** 2 + (a * np.sin(t)) ** 2)
        return base * (1 + self.amp * np.sin(self.lobes * t + self.phase))

    def support(self, height: int, width: int) -> np.ndarray:
        ys, xs = np.mgrid[0:height, 0:width]
        dx = xs + 0.5 - self.cx
        dy = ys + 0.5 - self.cy
        return np.hypot(dx, dy) <= self.radius_at(np.arctan2(dy, dx))

    def extent(self) -> float:
        return self.major * (1 + self.amp)

    def bounds(self, samples: int = 4096):
        """Continuous boundary extents ``(xmin, ymin, xmax, ymax)``."""
        th = np.linspace(0, 2 * np.pi, samples, endpoint=False)
        r = self.radius_at(th)
        xs = self.cx + r * np.cos(th)
        ys = self.cy + r * np.sin(th)
        return xs.min(), ys.min(), xs.max(), ys.max()


def _place_lesions(spec: SynthSpec, rng: np.random.Generator, n: int) -> list[Lesion]:
    side = spec.side
    out: list[Lesion] = []
    limit = side * (0.45 if spec.frame else 0.5)
    for _ in range(200 * max(n, 1)):
        if len(out) == n:
            break
        major = rng.uniform(*spec.radius) * side
        minor = major * rng.uniform(*spec.aspect)
        k = int(rng.integers(spec.lobes[0], spec.lobes[1] + 1))
        les = Lesion(0.0, 0.0, major, minor, rng.uniform(0, np.pi), spec.irregularity, k,
                     rng.uniform(0, 2 * np.pi))
        ext = les.extent() + 2
        lo, hi = ext, side - ext
        if hi <= lo:
            continue
        cx, cy = rng.uniform(lo, hi), rng.uniform(lo, hi)
        if spec.frame and math.hypot(cx - side / 2, cy - side / 2) + ext > limit:
            continue
        if any(math.hypot(cx - o.cx, cy - o.cy) < ext + o.extent() + 3 for o in out):
            continue
        les.cx, les.cy = cx, cy
        out.append(les)
    return out


def _draw_line(img, x0, y0, x1, y1, color, alpha=1.0):
    n = int(max(abs(x1 - x0), abs(y1 - y0)) * 2) + 2
    xs = np.clip(np.rint(np.linspace(x0, x1, n)).astype(int), 0, img.shape[1] - 1)
    ys = np.clip(np.rint(np.linspace(y0, y1, n)).astype(int), 0, img.shape[0] - 1)
    img[ys, xs] = img[ys, xs] * (1 - alpha) + np.asarray(color) * alpha


def synthesize_sample(spec: SynthSpec, index: int):
    """Return ``(image uint8 HxWx3, mask uint8 HxW, lesions)`` for sample ``index``."""
    rng = np.random.default_rng([spec.seed, index])
    side = spec.side
    ys, xs = np.mgrid[0:side, 0:side]
    skin = np.array([222.0, 178.0, 152.0]) + rng.uniform(-15, 15, 3)
    gx, gy = rng.uniform(-0.15, 0.15, 2)
    shade = 1 + gx * (xs / side - 0.5) + gy * (ys / side - 0.5)
    img = skin[None, None, :] * shade[..., None]
    n = int(rng.integers(spec.lesions[0], spec.lesions[1] + 1))
    lesions = _place_lesions(spec, rng, n)
    mask = np.zeros((side, side), dtype=bool)
    for les in lesions:
        sup = les.support(side, side)
        mask |= sup
        color = np.array([115.0, 68.0, 48.0]) * rng.uniform(0.6, 1.1) + rng.uniform(-10, 10, 3)
        dist = np.hypot(xs + 0.5 - les.cx, ys + 0.5 - les.cy) / max(les.major, 1.0)
        core = color * (0.85 + 0.15 * np.clip(dist, 0, 1))[..., None]
        mottle = rng.normal(0, 8, (side, side, 1))
        img = np.where(sup[..., None], core + mottle, img)
    if spec.bubbles:
        for _ in range(int(rng.integers(1, 4))):
            bx, by, br = rng.uniform(0, side), rng.uniform(0, side), rng.uniform(1.5, 4.0)
            disk = np.hypot(xs + 0.5 - bx, ys + 0.5 - by) <= br
            img[disk] = img[disk] * 0.4 + 255 * 0.6
    if spec.hair:
        for _ in range(int(rng.integers(2, 6))):
            px, py = rng.uniform(0, side, 2)
            ang = rng.uniform(0, 2 * np.pi)
            for _ in range(3):
                ang += rng.normal(0, 0.4)
                step = rng.uniform(side * 0.1, side * 0.3)
                qx, qy = px + step * math.cos(ang), py + step * math.sin(ang)
                _draw_line(img, px, py, qx, qy, (45.0, 32.0, 25.0), 0.85)
                px, py = qx, qy
    if spec.ruler:
        edge = int(rng.integers(0, 4))
        for t in range(2, side - 2, 4):
            length = 4 if t % 16 == 2 else 2
            if edge == 0:
                _draw_line(img, t, 0, t, length, (30.0, 30.0, 30.0))
            elif edge == 1:
                _draw_line(img, t, side - 1, t, side - 1 - length, (30.0, 30.0, 30.0))
            elif edge == 2:
                _draw_line(img, 0, t, length, t, (30.0, 30.0, 30.0))
            else:
                _draw_line(img, side - 1, t, side - 1 - length, t, (30.0, 30.0, 30.0))
    if spec.frame:
        outside = np.hypot(xs + 0.5 - side / 2, ys + 0.5 - side / 2) > side * 0.5 * rng.uniform(0.98, 1.1)
        img[outside] = rng.uniform(0, 12)
    img = img + rng.normal(0, spec.noise * 255, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), mask.astype(np.uint8), lesions


def intended_pixel_box(les: Lesion, side: int):
    """Inclusive pixel box of pixels whose centers fall inside the lesion bounds."""
    xmin, ymin, xmax, ymax = les.bounds()
    return (int(math.ceil(xmin - 0.5)), int(math.ceil(ymin - 0.5)),
            int(math.floor(xmax - 0.5)), int(math.floor(ymax - 0.5)))


def synthesize(spec: SynthSpec) -> list[LabeledSample]:
    out = []
    for i in range(spec.count):
        img, mask, _ = synthesize_sample(spec, i)
        out.append(LabeledSample(img, mask, derive_box(mask), f"s{i:05d}"))
    return out


def generate_synthetic(spec: SynthSpec, out_dir) -> list[LabeledSample]:
    """Write ``images/``, ``masks/``, ``labels/`` and ``manifest.txt`` under ``out_dir``."""
    out_dir = Path(out_dir)
    for sub in ("images", "masks", "labels"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    samples = synthesize(spec)
    train, _ = split_dataset(samples, spec.train_ratio, spec.seed)
    train_stems = {s.stem for s in train}
    lines = []
    for s in samples:
        netpbm.write(out_dir / "images" / f"{s.stem}.ppm", s.image)
        netpbm.write_mask(out_dir / "masks" / f"{s.stem}.pgm", s.mask)
        write_labels(out_dir / "labels" / f"{s.stem}.txt", s.boxes)
        lines.append(f"{s.stem} {'train' if s.stem in train_stems else 'validation'}")
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n")
    return samples


def read_manifest(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if len(parts) == 2:
            out[parts[0]] = parts[1]
    return out


def images_to_tensor(images: Sequence[np.ndarray], side: int | None = None, dtype=np.float64) -> np.ndarray:
    """Stack HxWx3 uint8 rasters into an (N, 3, side, side) array scaled to [-0.5, 0.5]."""
    arrs = [resize(im, side) if side and im.shape[:2] != (side, side) else im for im in images]
    x = np.stack(arrs).astype(dtype) / 255.0 - 0.5
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))
