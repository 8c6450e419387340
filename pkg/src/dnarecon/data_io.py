"""Phantoms, image normalisation, on-disk formats and datasets."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy import ndimage

from .geometry import GeometryConfig, circle_mask, radon_forward

log = logging.getLogger(__name__)

IMAGE_MAGIC = b"IMG1"
SINO_MAGIC = b"SIN1"
ROLES = ("train", "val", "test")


class FormatError(ValueError):
    """Malformed file contents."""


# --------------------------------------------------------------------------
# phantoms


@dataclass(frozen=True)
class Ellipse:
    intensity: float
    semi_x: float
    semi_y: float
    centre_x: float = 0.0
    centre_y: float = 0.0
    rotation: float = 0.0  # radians


@dataclass
class EllipsePhantomSpec:
    """Ellipses in normalised coordinates: the image disc is ``[-1, 1]^2``."""

    ellipses: list[Ellipse] = field(default_factory=list)
    seed: int | None = None


SHEPP_LOGAN = EllipsePhantomSpec(
    [
        Ellipse(1.0, 0.69, 0.92),
        Ellipse(-0.8, 0.6624, 0.874, 0.0, -0.0184),
        Ellipse(-0.2, 0.11, 0.31, 0.22, 0.0, math.radians(-18)),
        Ellipse(-0.2, 0.16, 0.41, -0.22, 0.0, math.radians(18)),
        Ellipse(0.1, 0.21, 0.25, 0.0, 0.35),
        Ellipse(0.1, 0.046, 0.046, 0.0, 0.1),
        Ellipse(0.1, 0.046, 0.046, 0.0, -0.1),
        Ellipse(0.1, 0.046, 0.023, -0.08, -0.605),
        Ellipse(0.1, 0.023, 0.023, 0.0, -0.606),
        Ellipse(0.1, 0.023, 0.046, 0.06, -0.605),
    ]
)


def render_phantom(spec: EllipsePhantomSpec, n: int) -> np.ndarray:
    """Rasterise ``spec`` on an ``n x n`` grid: summed intensities, clipped to [0, 1], masked.

    A pixel belongs to an ellipse when its centre does; the unit coordinate
    maps to ``n / 2`` pixels with +y pointing up.
    """
    centre = (n - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(n, dtype=np.float64), np.arange(n, dtype=np.float64), indexing="ij")
    x = (cc - centre) / (n / 2.0)
    y = (centre - rr) / (n / 2.0)
    img = np.zeros((n, n))
    for e in spec.ellipses:
        cos, sin = math.cos(e.rotation), math.sin(e.rotation)
        dx, dy = x - e.centre_x, y - e.centre_y
        u = (cos * dx + sin * dy) / e.semi_x
        v = (-sin * dx + cos * dy) / e.semi_y
        img += np.where(u * u + v * v <= 1.0, e.intensity, 0.0)
    return circle_mask(np.clip(img, 0.0, 1.0))


def random_phantom_spec(rng: np.random.Generator, max_features: int = 8) -> EllipsePhantomSpec:
    """A body-like ellipse with a random set of inner structures."""
    body = Ellipse(
        intensity=float(rng.uniform(0.35, 0.6)),
        semi_x=float(rng.uniform(0.6, 0.88)),
        semi_y=float(rng.uniform(0.55, 0.88)),
        centre_x=float(rng.uniform(-0.05, 0.05)),
        centre_y=float(rng.uniform(-0.05, 0.05)),
        rotation=float(rng.uniform(0, math.pi)),
    )
    ellipses = [body]
    for _ in range(int(rng.integers(3, max_features + 1))):
        r = float(rng.uniform(0, 0.5))
        phi = float(rng.uniform(0, 2 * math.pi))
        ellipses.append(
            Ellipse(
                intensity=float(rng.choice([-1, 1]) * rng.uniform(0.1, 0.45)),
                semi_x=float(rng.uniform(0.04, 0.25)),
                semi_y=float(rng.uniform(0.04, 0.25)),
                centre_x=r * math.cos(phi),
                centre_y=r * math.sin(phi),
                rotation=float(rng.uniform(0, math.pi)),
            )
        )
    return EllipsePhantomSpec(ellipses)


def random_phantoms(count: int, n: int, seed: int) -> np.ndarray:
    """``count`` random ellipse phantoms as a float32 array ``[count, n, n]``."""
    rng = np.random.default_rng(seed)
    out = np.zeros((count, n, n), dtype=np.float32)
    for i in range(count):
        spec = random_phantom_spec(rng)
        spec.seed = seed
        out[i] = render_phantom(spec, n)
    return out


# --------------------------------------------------------------------------
# normalisation


def normalize_and_mask(raw, n: int | None = None) -> np.ndarray:
    """Min-max normalise to [0, 1], resize to ``n x n`` bilinearly, apply the circle mask.

    A constant image maps to zeros. Non-square inputs are centre-cropped to a
    square first.
    """
    img = np.asarray(raw, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=-1)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {img.shape}")
    if not np.isfinite(img).all():
        raise ValueError("image contains non-finite values")
    h, w = img.shape
    if h != w:
        s = min(h, w)
        top, left = (h - s) // 2, (w - s) // 2
        img = img[top : top + s, left : left + s]
    lo, hi = img.min(), img.max()
    img = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
    if n is not None and img.shape[0] != n:
        img = resize_bilinear(img, n)
    return circle_mask(np.clip(img, 0.0, 1.0))


def resize_bilinear(img: np.ndarray, n: int) -> np.ndarray:
    """Resample a square image to ``n x n`` by bilinear interpolation of pixel centres."""
    m = img.shape[0]
    coords = (np.arange(n) + 0.5) * (m / n) - 0.5
    rr, cc = np.meshgrid(coords, coords, indexing="ij")
    return ndimage.map_coordinates(img, [rr, cc], order=1, mode="nearest")


# --------------------------------------------------------------------------
# file formats


def save_raw(path, array, kind: str = "image") -> None:
    """Write a 2-D float array as RAW: magic, u32 LE dims, f32 LE row-major data."""
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"RAW files hold 2-D arrays, got shape {arr.shape}")
    magic = {"image": IMAGE_MAGIC, "sinogram": SINO_MAGIC}[kind]
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


def load_raw(path, kind: str | None = None) -> np.ndarray:
    """Read a RAW file; ``kind`` ("image"/"sinogram") enforces the magic."""
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FormatError(f"{path}: header needs 12 bytes, file has {len(data)}")
    magic = data[:4]
    allowed = {"image": (IMAGE_MAGIC,), "sinogram": (SINO_MAGIC,), None: (IMAGE_MAGIC, SINO_MAGIC)}[kind]
    if magic not in allowed:
        raise FormatError(f"{path}: bad magic {magic!r} at byte offset 0, expected one of {allowed}")
    rows, cols = struct.unpack_from("<II", data, 4)
    expected = 12 + 4 * rows * cols
    if len(data) != expected:
        raise FormatError(
            f"{path}: payload for {rows}x{cols} needs {expected} bytes, file has {len(data)} "
            f"(mismatch from byte offset {min(expected, len(data))})"
        )
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(rows, cols).astype(np.float32)


def raw_kind(path) -> str:
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == IMAGE_MAGIC:
        return "image"
    if magic == SINO_MAGIC:
        return "sinogram"
    raise FormatError(f"{path}: bad magic {magic!r} at byte offset 0")


def save_pgm(path, img) -> None:
    """Binary 16-bit PGM (P5, maxval 65535); values are clipped to [0, 1]."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("PGM holds 2-D images")
    q = np.round(np.clip(arr, 0.0, 1.0) * 65535).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n65535\n".encode("ascii"))
        fh.write(q.tobytes())


def load_pgm(path) -> np.ndarray:
    """Read a binary P5 PGM (8- or 16-bit) scaled to [0, 1]."""
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header at byte offset {pos}")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: bad magic {tokens[0]!r} at byte offset 0, expected b'P5'")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric PGM header field before byte offset {pos}") from exc
    if not 0 < maxval < 65536 or width < 1 or height < 1:
        raise FormatError(f"{path}: invalid PGM header values {width}x{height} maxval {maxval}")
    pos += 1  # single whitespace after maxval
    dtype = ">u1" if maxval < 256 else ">u2"
    itemsize = np.dtype(dtype).itemsize
    expected = width * height * itemsize
    if len(data) - pos < expected:
        raise FormatError(
            f"{path}: pixel data needs {expected} bytes from byte offset {pos}, found {len(data) - pos}"
        )
    px = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos)
    return (px.reshape(height, width).astype(np.float64) / maxval).astype(np.float32)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def array_digest(arr) -> str:
    return hashlib.sha256(np.ascontiguousarray(np.asarray(arr, dtype="<f4")).tobytes()).hexdigest()


# --------------------------------------------------------------------------
# datasets


@dataclass
class DatasetManifest:
    """Image files with roles, the projection geometry and the normalisation record."""

    entries: list[tuple[str, str]]
    image_size: int
    num_views: int
    angular_span: float = math.pi
    normalization: str = "per-image min-max"
    seed: int = 0

    def __post_init__(self):
        for path, role in self.entries:
            if role not in ROLES:
                raise ValueError(f"unknown role {role!r} for {path}")
        paths = [p for p, _ in self.entries]
        if len(set(paths)) != len(paths):
            raise ValueError("a file may appear under only one role")

    @property
    def geometry(self) -> GeometryConfig:
        return GeometryConfig(self.image_size, self.num_views, self.angular_span)

    def paths(self, role: str | None = None) -> list[str]:
        return [p for p, r in self.entries if role is None or r == role]

    def to_json(self, path) -> None:
        record = asdict(self)
        record["entries"] = [{"path": p, "role": r} for p, r in self.entries]
        Path(path).write_text(json.dumps(record, indent=2))

    @classmethod
    def from_json(cls, path) -> "DatasetManifest":
        record = json.loads(Path(path).read_text())
        base = Path(path).parent
        entries = []
        for e in record.pop("entries"):
            p = Path(e["path"])
            entries.append((str(p if p.is_absolute() else base / p), e["role"]))
        return cls(entries=entries, **record)


def load_image_file(path, n: int | None = None) -> np.ndarray:
    """Load a RAW image or a PGM; PGMs go through :func:`normalize_and_mask`."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return normalize_and_mask(load_pgm(path), n).astype(np.float32)
    img = load_raw(path, "image")
    if n is not None and img.shape != (n, n):
        raise FormatError(f"{path}: image is {img.shape}, geometry expects ({n}, {n})")
    return img


def load_images(paths: Sequence, n: int, max_skip_fraction: float = 0.1) -> np.ndarray:
    """Load many images, skipping unreadable ones with a warning.

    Raises when more than ``max_skip_fraction`` of the files fail.
    """
    images, skipped = [], []
    for p in paths:
        try:
            images.append(load_image_file(p, n))
        except (OSError, ValueError) as exc:
            log.warning("skipping %s: %s", p, exc)
            skipped.append(p)
    if paths and len(skipped) > max_skip_fraction * len(paths):
        raise FormatError(f"{len(skipped)} of {len(paths)} files unreadable: {skipped[:5]}")
    if not images:
        return np.zeros((0, n, n), dtype=np.float32)
    return np.stack(images).astype(np.float32)


def epoch_order(n_items: int, epoch: int, seed: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n_items)


def batch_indices(n_items: int, batch_size: int, iteration: int, seed: int) -> np.ndarray:
    """Indices of batch ``iteration`` in a stream of seeded per-epoch permutations."""
    start = iteration * batch_size
    idx = []
    while len(idx) < batch_size:
        epoch, offset = divmod(start + len(idx), n_items)
        order = epoch_order(n_items, epoch, seed)
        idx.extend(order[offset : offset + batch_size - len(idx)].tolist())
    return np.asarray(idx, dtype=np.int64)


def build_dataset(
    manifest: DatasetManifest, role: str | None = "train", shuffle: bool = False, epoch: int = 0
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(image, sinogram)`` pairs; sinograms are synthesised with :func:`radon_forward`."""
    geo = manifest.geometry
    images = load_images(manifest.paths(role), geo.image_size)
    order = epoch_order(len(images), epoch, manifest.seed) if shuffle else np.arange(len(images))
    for i in order:
        sino = radon_forward(images[i], geo).numpy()
        yield images[i], sino


# --------------------------------------------------------------------------
# natural-image corpus


NATURAL_SOURCES = (
    "camera", "astronaut", "coffee", "chelsea", "rocket", "moon", "coins", "page", "text",
    "brick", "grass", "gravel", "clock", "horse", "hubble_deep_field", "immunohistochemistry", "cell",
)


def natural_image_corpus(count: int, n: int, seed: int = 0) -> np.ndarray:
    """Random crops of scikit-image's bundled photographs, normalised and masked.

    A desk-scale stand-in for a large natural-image collection.
    """
    from skimage import data as skdata

    rng = np.random.default_rng(seed)
    sources = [np.asarray(getattr(skdata, name)(), dtype=np.float64) for name in NATURAL_SOURCES]
    sources = [s.mean(axis=-1) if s.ndim == 3 else s for s in sources]
    out = np.zeros((count, n, n), dtype=np.float32)
    for i in range(count):
        src = sources[int(rng.integers(len(sources)))]
        h, w = src.shape
        size = int(rng.integers(max(n, min(h, w) // 4), min(h, w) + 1))
        top = int(rng.integers(0, h - size + 1))
        left = int(rng.integers(0, w - size + 1))
        crop = src[top : top + size, left : left + size]
        crop = np.rot90(crop, int(rng.integers(4)))
        if rng.random() < 0.5:
            crop = crop[:, ::-1]
        out[i] = normalize_and_mask(crop, n)
    return out


def write_pgm_corpus(images: Iterable[np.ndarray], out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        p = out_dir / f"natural_{i:05d}.pgm"
        save_pgm(p, img)
        paths.append(p)
    return paths
