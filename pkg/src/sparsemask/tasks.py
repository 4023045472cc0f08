"""Synthetic dense-prediction datasets.

Every sample is a pure function of ``(spec, split, index)``: the generator is
seeded from those values, so regenerating a dataset is bit-identical.

Images hold 1-4 anti-aliased shapes (rectangles, ellipses, triangles) at
scales from a few pixels to most of the frame, on a smooth textured
background. Shape colour carries a class-dependent hue plus jitter, so the
classes are learnable while boundaries still need high-resolution features.
"""

from __future__ import annotations

import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path

import numpy as np

KINDS = ("multi_class_shapes", "binary_saliency", "edge_map")
SHAPES = ("rect", "ellipse", "triangle")
_SPLITS = {"train": 0, "val": 1}
_SUPERSAMPLE = 4

CACHE_MAGIC = b"SMDS"
CACHE_VERSION = 1


@dataclass(frozen=True)
class SyntheticTaskSpec:
    kind: str = "multi_class_shapes"
    image_size: int = 64
    num_classes: int = 4
    num_train: int = 500
    num_val: int = 100
    seed: int = 0
    shape_scale_range: tuple[float, float] = (0.12, 0.6)
    class_priors: tuple[float, ...] | None = None
    # False: hue is drawn independently of class, so only geometry identifies it
    class_color: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.kind != "multi_class_shapes" and self.num_classes != 2:
            raise ValueError(f"{self.kind} is a binary task; num_classes must be 2")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        lo, hi = self.shape_scale_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"invalid shape_scale_range {self.shape_scale_range}")
        object.__setattr__(self, "shape_scale_range", (float(lo), float(hi)))
        if self.class_priors is not None:
            pri = tuple(float(p) for p in self.class_priors)
            if len(pri) != self.foreground_classes or min(pri) < 0 or sum(pri) <= 0:
                raise ValueError("class_priors needs one non-negative weight per foreground class")
            object.__setattr__(self, "class_priors", pri)

    @property
    def foreground_classes(self) -> int:
        return self.num_classes - 1 if self.kind == "multi_class_shapes" else 1

    def priors(self) -> np.ndarray:
        """Probability that a drawn shape belongs to each foreground class."""
        k = self.foreground_classes
        p = np.ones(k) if self.class_priors is None else np.asarray(self.class_priors)
        return p / p.sum()

    def split_size(self, split: str) -> int:
        return self.num_train if split == "train" else self.num_val

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape_scale_range"] = list(self.shape_scale_range)
        if self.class_priors is not None:
            d["class_priors"] = list(self.class_priors)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTaskSpec":
        d = dict(d)
        if "shape_scale_range" in d:
            d["shape_scale_range"] = tuple(d["shape_scale_range"])
        if d.get("class_priors") is not None:
            d["class_priors"] = tuple(d["class_priors"])
        return cls(**d)


@dataclass
class ShapeInstance:
    shape: str
    cls: int
    cy: float
    cx: float
    radius: float
    aspect: float
    angle: float
    color: np.ndarray = field(repr=False)


def _class_palette(num_fg: int) -> np.ndarray:
    hues = np.arange(num_fg) / max(num_fg, 1)
    # evenly spaced hues on a saturated RGB wheel
    phase = 2 * np.pi * hues[:, None] + np.array([0.0, 2.0, 4.0])[None] * np.pi / 3
    return 0.5 + 0.45 * np.cos(phase)


def _inside(shape: ShapeInstance, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    """Boolean coverage of ``shape`` at sample coordinates (pixel units)."""
    dy, dx = yy - shape.cy, xx - shape.cx
    ca, sa = np.cos(shape.angle), np.sin(shape.angle)
    u = ca * dx + sa * dy
    v = -sa * dx + ca * dy
    a = shape.radius
    b = shape.radius * shape.aspect
    if shape.shape == "rect":
        return (np.abs(u) <= a) & (np.abs(v) <= b)
    if shape.shape == "ellipse":
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    # triangle: three half-planes of an isoceles triangle pointing along +v
    pts = np.array([[0.0, b], [-a, -b], [a, -b]])
    inside = np.ones(u.shape, dtype=bool)
    for i in range(3):
        p0, p1 = pts[i], pts[(i + 1) % 3]
        cross = (p1[0] - p0[0]) * (v - p0[1]) - (p1[1] - p0[1]) * (u - p0[0])
        inside &= cross <= 0
    return inside


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Low-frequency colour field plus fine grain."""
    coarse = rng.uniform(0.15, 0.55, size=(3, 5, 5))
    idx = np.linspace(0, 4, size)
    lo = np.floor(idx).astype(int)
    hi = np.minimum(lo + 1, 4)
    f = idx - lo
    rows = coarse[:, lo] * (1 - f)[None, :, None] + coarse[:, hi] * f[None, :, None]
    field_ = rows[:, :, lo] * (1 - f)[None, None, :] + rows[:, :, hi] * f[None, None, :]
    grain = rng.normal(0.0, 0.04, size=(3, size, size))
    return field_ + grain


def sample_shapes(spec: SyntheticTaskSpec, rng: np.random.Generator) -> list[ShapeInstance]:
    size = spec.image_size
    lo, hi = spec.shape_scale_range
    count = int(rng.integers(1, 5))
    palette = _class_palette(spec.foreground_classes)
    priors = spec.priors()
    shapes = []
    for _ in range(count):
        cls = int(rng.choice(len(priors), p=priors))
        kind = SHAPES[cls % len(SHAPES)] if spec.kind == "multi_class_shapes" else SHAPES[int(rng.integers(3))]
        # log-uniform extent so small and large objects are equally common
        extent = float(np.exp(rng.uniform(np.log(lo), np.log(hi)))) * size
        base = palette[cls] if spec.class_color else _class_palette(12)[int(rng.integers(12))]
        color = np.clip(base + rng.normal(0, 0.06, size=3), 0, 1)
        shapes.append(ShapeInstance(
            shape=kind, cls=cls + 1, cy=float(rng.uniform(0.1, 0.9) * size),
            cx=float(rng.uniform(0.1, 0.9) * size), radius=extent / 2,
            aspect=float(rng.uniform(0.5, 1.0)), angle=float(rng.uniform(0, np.pi)), color=color,
        ))
    # larger shapes first so small ones stay visible
    shapes.sort(key=lambda s: -s.radius)
    return shapes


def render(spec: SyntheticTaskSpec, shapes: list[ShapeInstance], rng: np.random.Generator):
    size = spec.image_size
    ss = _SUPERSAMPLE
    image = _background(rng, size)
    labels = np.zeros((size, size), dtype=np.uint8)
    centers = np.arange(size) + 0.5
    cy, cx = np.meshgrid(centers, centers, indexing="ij")
    sub = (np.arange(size * ss) + 0.5) / ss
    sy, sx = np.meshgrid(sub, sub, indexing="ij")
    for shp in shapes:
        cover = _inside(shp, sy, sx).reshape(size, ss, size, ss).mean(axis=(1, 3))
        image = image * (1 - cover)[None] + shp.color[:, None, None] * cover[None]
        labels[_inside(shp, cy, cx)] = shp.cls
    if spec.kind == "binary_saliency":
        labels = (labels > 0).astype(np.uint8)
    elif spec.kind == "edge_map":
        labels = edge_labels(labels)
    return image.astype(np.float32), labels


def edge_labels(region: np.ndarray) -> np.ndarray:
    """1 where a pixel differs from a 4-neighbour, 0 elsewhere."""
    edge = np.zeros(region.shape, dtype=bool)
    edge[:-1] |= region[:-1] != region[1:]
    edge[1:] |= region[1:] != region[:-1]
    edge[:, :-1] |= region[:, :-1] != region[:, 1:]
    edge[:, 1:] |= region[:, 1:] != region[:, :-1]
    return edge.astype(np.uint8)


def _rng(spec: SyntheticTaskSpec, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, _SPLITS[split], index, KINDS.index(spec.kind)])


def generate(spec: SyntheticTaskSpec, index: int, split: str = "train"):
    """Return ``(image (3, H, W) float32 in [0, 1], labels (H, W) uint8)``."""
    if split not in _SPLITS:
        raise ValueError(f"unknown split {split!r}")
    n = spec.split_size(split)
    if not 0 <= index < n:
        raise IndexError(f"index {index} outside {split} split of size {n}")
    rng = _rng(spec, split, index)
    shapes = sample_shapes(spec, rng)
    image, labels = render(spec, shapes, rng)
    return np.clip(image, 0.0, 1.0), labels


def generate_split(spec: SyntheticTaskSpec, split: str = "train", workers: int = 1):
    """Whole split; with ``workers > 1`` items are rendered in a process pool (same bytes)."""
    n = spec.split_size(split)
    images = np.empty((n, 3, spec.image_size, spec.image_size), dtype=np.float32)
    labels = np.empty((n, spec.image_size, spec.image_size), dtype=np.uint8)
    if workers > 1 and n > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            items = pool.map(partial(generate, spec, split=split), range(n), chunksize=16)
            for i, (im, lb) in enumerate(items):
                images[i], labels[i] = im, lb
    else:
        for i in range(n):
            images[i], labels[i] = generate(spec, i, split)
    return images, labels


# -- augmentation ----------------------------------------------------------
def augment(image: np.ndarray, labels: np.ndarray, rng: np.random.Generator,
            flip: bool = True, scale_range: tuple[float, float] | None = None,
            ignore_index: int = 255):
    """Random left-right flip and optional scale jitter that keeps the output size.

    Rescaled images are centre-cropped or zero-padded; padded label pixels get
    ``ignore_index``.
    """
    if flip and rng.random() < 0.5:
        image = image[..., ::-1]
        labels = labels[..., ::-1]
    if scale_range is not None:
        factor = float(rng.uniform(*scale_range))
        image, labels = _rescale(image, labels, factor, ignore_index)
    return np.ascontiguousarray(image), np.ascontiguousarray(labels)


def _rescale(image, labels, factor, ignore_index):
    c, h, w = image.shape
    nh, nw = max(1, int(round(h * factor))), max(1, int(round(w * factor)))
    ys = np.minimum(((np.arange(nh) + 0.5) / factor).astype(int), h - 1)
    xs = np.minimum(((np.arange(nw) + 0.5) / factor).astype(int), w - 1)
    img = image[:, ys][:, :, xs]
    lab = labels[ys][:, xs]
    out_img = np.zeros_like(image)
    out_lab = np.full_like(labels, ignore_index)
    oy, ox = (nh - h) // 2, (nw - w) // 2
    sy0, dy0 = max(oy, 0), max(-oy, 0)
    sx0, dx0 = max(ox, 0), max(-ox, 0)
    hh, ww = min(h - dy0, nh - sy0), min(w - dx0, nw - sx0)
    out_img[:, dy0:dy0 + hh, dx0:dx0 + ww] = img[:, sy0:sy0 + hh, sx0:sx0 + ww]
    out_lab[dy0:dy0 + hh, dx0:dx0 + ww] = lab[sy0:sy0 + hh, sx0:sx0 + ww]
    return out_img, out_lab


# -- cache files -----------------------------------------------------------
def write_cache(path: str | Path, images: np.ndarray, labels: np.ndarray) -> None:
    """16-byte header, little-endian float32 images, then uint8 labels."""
    n, c, h, w = images.shape
    if labels.shape != (n, h, w):
        raise ValueError(f"labels shape {labels.shape} does not match images {images.shape}")
    header = CACHE_MAGIC + struct.pack("<HHIHH", CACHE_VERSION, c, n, h, w)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(images.astype("<f4").tobytes())
        fh.write(labels.astype(np.uint8).tobytes())


def read_cache(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != CACHE_MAGIC:
        raise ValueError(f"{path}: not a dataset cache file")
    version, c, n, h, w = struct.unpack("<HHIHH", raw[4:16])
    if version != CACHE_VERSION:
        raise ValueError(f"{path}: unsupported cache version {version}")
    n_img = n * c * h * w * 4
    n_lab = n * h * w
    if len(raw) != 16 + n_img + n_lab:
        raise ValueError(f"{path}: truncated or oversized cache ({len(raw)} bytes)")
    images = np.frombuffer(raw, dtype="<f4", count=n * c * h * w, offset=16).reshape(n, c, h, w)
    labels = np.frombuffer(raw, dtype=np.uint8, count=n_lab, offset=16 + n_img).reshape(n, h, w)
    return images.astype(np.float32), labels.copy()


def load_split(spec: SyntheticTaskSpec, split: str, cache_dir: str | Path | None = None,
               workers: int = 1):
    """Generate a split, reusing a cache file keyed by the spec when ``cache_dir`` is given."""
    if cache_dir is None:
        return generate_split(spec, split, workers)
    import hashlib
    import json

    key = hashlib.sha256(json.dumps(spec.to_dict(), sort_keys=True).encode()).hexdigest()[:16]
    path = Path(cache_dir) / f"{spec.kind}-{split}-{key}.bin"
    if path.exists():
        return read_cache(path)
    images, labels = generate_split(spec, split, workers)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_cache(path, images, labels)
    return images, labels
