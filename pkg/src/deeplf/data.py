"""Image and mask I/O, dataset manifests, the synthetic phantom generator,
and boundary-overlay rendering.

Supported image formats are PGM (P2/P5, 8- or 16-bit) and PNG (grayscale or
RGB).  Images load as float32 intensity grids in [0, 1]; masks load as
uint8 {0, 1} by thresholding at half the bit-depth maximum, which keeps
anti-aliased ground-truth files deterministic.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ops
from .metrics import boundary_mask

__all__ = [
    "Sample",
    "DatasetManifest",
    "PhantomParams",
    "load_image",
    "load_mask",
    "read_pgm",
    "write_pgm",
    "write_mask",
    "resize_image",
    "resize_mask",
    "resize_pair",
    "generate_phantoms",
    "render_overlay",
]

LUMA_WEIGHTS = (0.299, 0.587, 0.114)  # Rec. 601


# ---------------------------------------------------------------------------
# PGM codec (P2 ascii / P5 binary; 16-bit rasters are big-endian per PNM)

def read_pgm(path):
    """Read a PGM file; returns (values, maxval) with values as uint8/uint16."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise ValueError(f"cannot read {path}: {exc}") from exc
    if blob[:2] not in (b"P2", b"P5"):
        raise ValueError(f"{path}: not a PGM file (magic {blob[:2]!r})")
    binary = blob[:2] == b"P5"

    # tokenize the header, skipping '#' comments
    pos = 2
    tokens = []
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(blob):
            raise ValueError(f"{path}: truncated PGM header")
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise ValueError(f"{path}: malformed PGM header {tokens!r}") from exc
    if not (0 < maxval < 65536):
        raise ValueError(f"{path}: PGM maxval {maxval} out of range")

    if binary:
        pos += 1  # single whitespace after maxval
        if maxval > 255:
            raster = np.frombuffer(blob, dtype=">u2", offset=pos, count=-1)
        else:
            raster = np.frombuffer(blob, dtype=np.uint8, offset=pos, count=-1)
        if raster.size < h * w:
            raise ValueError(f"{path}: truncated PGM raster")
        values = raster[: h * w]
    else:
        try:
            values = np.array(blob[pos:].split(), dtype=np.uint32)
        except ValueError as exc:
            raise ValueError(f"{path}: malformed PGM ascii raster") from exc
        if values.size < h * w:
            raise ValueError(f"{path}: truncated PGM raster")
        values = values[: h * w]
    if values.max(initial=0) > maxval:
        raise ValueError(f"{path}: PGM sample exceeds maxval {maxval}")
    dtype = np.uint16 if maxval > 255 else np.uint8
    return values.astype(dtype).reshape(h, w), maxval


def write_pgm(path, values, maxval=None):
    """Write a binary (P5) PGM file; 16-bit samples go out big-endian."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError(f"PGM data must be 2-D, got shape {values.shape}")
    if maxval is None:
        maxval = 255 if values.dtype == np.uint8 else 65535
    header = f"P5\n{values.shape[1]} {values.shape[0]}\n{maxval}\n".encode()
    if maxval > 255:
        raster = values.astype(">u2").tobytes()
    else:
        raster = values.astype(np.uint8).tobytes()
    Path(path).write_bytes(header + raster)


def write_mask(path, mask):
    """Write a {0,1} mask as an 8-bit PGM with foreground = 255."""
    mask = np.asarray(mask)
    write_pgm(path, (mask > 0).astype(np.uint8) * 255)


# ---------------------------------------------------------------------------
# generic loading

def _read_png(path):
    """Returns (array, maxval).  Array is (h, w) or (h, w, 3)."""
    from PIL import Image

    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.uint32)
                return arr, 65535
            if mode == "L":
                return np.asarray(im, dtype=np.uint8), 255
            if mode in ("RGB", "RGBA", "P", "LA"):
                rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
                return rgb, 255
            raise ValueError(f"unsupported PNG mode {mode!r}")
    except (OSError, SyntaxError, ValueError) as exc:
        raise ValueError(f"cannot decode PNG {path}: {exc}") from exc


def _read_any(path):
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        return read_pgm(path)
    if suffix == ".png":
        return _read_png(path)
    raise ValueError(f"unsupported image format {suffix!r} for {path}")


def load_image(path) -> np.ndarray:
    """Load a single-channel intensity grid scaled into [0, 1].

    Grayscale samples divide by the bit-depth maximum; RGB inputs collapse
    to luma with the Rec. 601 weights.
    """
    arr, maxval = _read_any(path)
    scaled = arr.astype(np.float32) / np.float32(maxval)
    if scaled.ndim == 3:
        r, g, b = LUMA_WEIGHTS
        scaled = (
            np.float32(r) * scaled[..., 0]
            + np.float32(g) * scaled[..., 1]
            + np.float32(b) * scaled[..., 2]
        )
    return scaled


def load_mask(path) -> np.ndarray:
    """Load a binary mask: raw samples above half the bit-depth max become 1."""
    arr, maxval = _read_any(path)
    if arr.ndim == 3:
        warnings.warn(
            f"mask {path} is not grayscale; converting by luma before thresholding",
            stacklevel=2,
        )
        r, g, b = LUMA_WEIGHTS
        arr = r * arr[..., 0] + g * arr[..., 1] + b * arr[..., 2]
    return (arr > maxval / 2.0).astype(np.uint8)


# ---------------------------------------------------------------------------
# the fixed-size resize step

def resize_image(image, size=256) -> np.ndarray:
    """Bilinear resize of a 2-D intensity grid to size x size (stretched)."""
    image = np.asarray(image)
    if image.ndim != 2 or image.shape[0] < 1 or image.shape[1] < 1:
        raise ValueError(f"image must be 2-D and nonzero, got shape {image.shape}")
    if image.shape == (size, size):
        return image.copy()
    out, _ = ops.bilinear_resize(image[None, None].astype(image.dtype), size, size)
    return out[0, 0]


def resize_mask(mask, size=256) -> np.ndarray:
    """Nearest-neighbour resize of a {0,1} mask to size x size."""
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.shape[0] < 1 or mask.shape[1] < 1:
        raise ValueError(f"mask must be 2-D and nonzero, got shape {mask.shape}")
    h, w = mask.shape
    rows = np.minimum((np.arange(size) + 0.5) * h / size, h - 1).astype(np.intp)
    cols = np.minimum((np.arange(size) + 0.5) * w / size, w - 1).astype(np.intp)
    return mask[np.ix_(rows, cols)]


def resize_pair(image, mask, size=256):
    """Resize image (bilinear) and mask (nearest) to the fixed square size."""
    return resize_image(image, size), resize_mask(mask, size)


# ---------------------------------------------------------------------------
# manifests

@dataclass(frozen=True)
class Sample:
    id: str
    image_path: Path
    mask_path: Path | None = None
    split: str | None = None


@dataclass
class DatasetManifest:
    """Ordered list of image/mask samples, optionally tagged train/test."""

    samples: list[Sample] = field(default_factory=list)
    provenance: str | None = None

    def __len__(self):
        return len(self.samples)

    def ids(self):
        return [s.id for s in self.samples]

    def split_view(self, tag: str) -> "DatasetManifest":
        return DatasetManifest(
            samples=[s for s in self.samples if s.split == tag],
            provenance=self.provenance,
        )

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            entries = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"cannot read manifest {path}: {exc}") from exc
        if not isinstance(entries, list):
            raise ValueError(f"manifest {path} must be a JSON array")
        base = path.parent
        samples = []
        seen = set()
        for entry in entries:
            sid = entry.get("id")
            if not sid:
                raise ValueError(f"manifest {path}: entry without id: {entry!r}")
            if sid in seen:
                raise ValueError(f"manifest {path}: duplicate sample id {sid!r}")
            seen.add(sid)
            image = (base / entry["image"]).resolve()
            if not image.is_file():
                raise ValueError(f"manifest {path}: missing image file {image}")
            mask = None
            if entry.get("mask"):
                mask = (base / entry["mask"]).resolve()
                if not mask.is_file():
                    raise ValueError(f"manifest {path}: missing mask file {mask}")
            split = entry.get("split")
            if split is not None and split not in ("train", "test"):
                raise ValueError(
                    f"manifest {path}: sample {sid!r} has invalid split {split!r}"
                )
            samples.append(Sample(id=sid, image_path=image, mask_path=mask, split=split))
        tagged = [s for s in samples if s.split is not None]
        if tagged and len(tagged) != len(samples):
            untagged = next(s.id for s in samples if s.split is None)
            raise ValueError(
                f"manifest {path}: split tags must cover every sample "
                f"(sample {untagged!r} is untagged)"
            )
        return cls(samples=samples)

    def save(self, path):
        path = Path(path)
        base = path.parent
        entries = []
        for s in self.samples:
            entry = {"id": s.id, "image": _relpath(s.image_path, base)}
            if s.mask_path is not None:
                entry["mask"] = _relpath(s.mask_path, base)
            if s.split is not None:
                entry["split"] = s.split
            entries.append(entry)
        path.write_text(json.dumps(entries, indent=2) + "\n")


def _relpath(target: Path, base: Path) -> str:
    import os

    return os.path.relpath(Path(target), base)


# ---------------------------------------------------------------------------
# synthetic phantoms

@dataclass(frozen=True)
class PhantomParams:
    """Generator settings for synthetic two-lung phantoms.

    Each phantom is a dark gradient background carrying two bright-bordered
    elliptical "lung" regions (randomly scaled, rotated and sheared within
    the ranges below), Gaussian noise, and optionally a bright disc occluder
    partially covering one lung.  Output is deterministic per seed.
    """

    count: int = 300
    image_size: int = 128
    seed: int = 0
    size_range: tuple[float, float] = (0.11, 0.16)  # minor semi-axis / image size
    eccentricity_range: tuple[float, float] = (1.6, 2.2)  # major / minor axis
    rotation_deg: float = 12.0
    shear_range: float = 0.15
    noise_sigma: float = 0.02
    occluder_probability: float = 0.3
    occluder_intensity_range: tuple[float, float] = (0.75, 0.95)

    def validate(self):
        if self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")
        if self.image_size < 32:
            raise ValueError(f"image_size must be >= 32, got {self.image_size}")
        if not 0.0 <= self.occluder_probability <= 1.0:
            raise ValueError("occluder_probability must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def _ellipse_mask(size, cy, cx, semi_minor, semi_major, angle_deg, shear):
    """Filled ellipse under rotation and x-shear, evaluated on the pixel grid."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    u = xx - cx
    v = yy - cy
    th = np.deg2rad(angle_deg)
    ur = np.cos(th) * u + np.sin(th) * v
    vr = -np.sin(th) * u + np.cos(th) * v
    ur = ur - shear * vr
    return (ur / semi_minor) ** 2 + (vr / semi_major) ** 2 <= 1.0


def _touches(a, b):
    """True when any pixel of a is 8-adjacent to (or overlaps) a pixel of b."""
    grown = a.copy()
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            grown |= np.roll(np.roll(a, dr, axis=0), dc, axis=1)
    return bool((grown & b).any())


def _draw_lung(rng, params, cx_frac):
    size = params.image_size
    minor = rng.uniform(*params.size_range) * size
    major = minor * rng.uniform(*params.eccentricity_range)
    angle = rng.uniform(-params.rotation_deg, params.rotation_deg)
    shear = rng.uniform(-params.shear_range, params.shear_range)
    cx = (cx_frac + rng.uniform(-0.03, 0.03)) * size
    cy = (0.52 + rng.uniform(-0.04, 0.04)) * size
    return _ellipse_mask(size, cy, cx, minor, major, angle, shear), (cy, cx, minor)


def _render_phantom(rng, params):
    size = params.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    base = rng.uniform(0.10, 0.22)
    direction = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(direction) * xx + np.sin(direction) * yy) / size
    img = base + rng.uniform(0.0, 0.10) * (ramp - ramp.min())

    # two disjoint (and non-adjacent) lung ellipses; redraw on collision
    frame = np.ones((size, size), dtype=bool)
    frame[1:-1, 1:-1] = False
    for _ in range(100):
        left, left_geom = _draw_lung(rng, params, 0.32)
        right, right_geom = _draw_lung(rng, params, 0.68)
        off_border = not (left & frame).any() and not (right & frame).any()
        if off_border and not _touches(left, right):
            break
    else:
        raise RuntimeError("could not place disjoint lung ellipses")

    mask = left | right
    for lung, geom in ((left, left_geom), (right, right_geom)):
        cy, cx, minor = geom
        ring_width = max(1.0, 0.10 * minor)
        grown = lung.copy()
        for _ in range(int(round(ring_width))):
            g = grown.copy()
            g[1:, :] |= grown[:-1, :]
            g[:-1, :] |= grown[1:, :]
            g[:, 1:] |= grown[:, :-1]
            g[:, :-1] |= grown[:, 1:]
            grown = g
        ring = grown & ~mask
        img[ring] = rng.uniform(0.80, 0.92)

    interior_level = rng.uniform(0.55, 0.72)
    img[mask] = interior_level

    if rng.random() < params.occluder_probability:
        lung_geom = left_geom if rng.random() < 0.5 else right_geom
        cy, cx, minor = lung_geom
        angle = rng.uniform(0, 2 * np.pi)
        dist = rng.uniform(0.5, 0.9) * minor
        ocy = cy + np.sin(angle) * dist
        ocx = cx + np.cos(angle) * dist
        radius = rng.uniform(0.35, 0.7) * minor
        disc = (yy - ocy) ** 2 + (xx - ocx) ** 2 <= radius**2
        img[disc] = rng.uniform(*params.occluder_intensity_range)

    img = img + rng.normal(0.0, params.noise_sigma, img.shape)
    img = np.clip(img, 0.0, 1.0)
    return np.round(img * 255).astype(np.uint8), mask.astype(np.uint8)


def generate_phantoms(params: PhantomParams, out_dir) -> DatasetManifest:
    """Write ``count`` phantom image/mask pairs plus a manifest.

    Layout: ``images/<id>.pgm``, ``masks/<id>.pgm``, ``manifest.json``;
    identical params produce bitwise-identical files.
    """
    params.validate()
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ValueError(f"cannot create output directory {out_dir}: {exc}") from exc

    samples = []
    for i in range(params.count):
        rng = np.random.default_rng([params.seed, i])
        img, mask = _render_phantom(rng, params)
        sid = f"phantom_{i:04d}"
        image_path = out_dir / "images" / f"{sid}.pgm"
        mask_path = out_dir / "masks" / f"{sid}.pgm"
        write_pgm(image_path, img)
        write_mask(mask_path, mask)
        samples.append(
            Sample(id=sid, image_path=image_path.resolve(), mask_path=mask_path.resolve())
        )
    manifest = DatasetManifest(samples=samples, provenance="synthetic phantoms")
    manifest.save(out_dir / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# overlays

def render_overlay(image, gt_mask, pred_mask, out_path):
    """Write an RGB overlay: ground-truth boundary green, predicted boundary
    red, coincident boundary pixels yellow, over the grayscale base image."""
    image = np.asarray(image)
    gt_mask = np.asarray(gt_mask)
    pred_mask = np.asarray(pred_mask)
    if not (image.shape == gt_mask.shape == pred_mask.shape):
        raise ValueError(
            f"dimension mismatch: image {image.shape}, ground truth "
            f"{gt_mask.shape}, prediction {pred_mask.shape}"
        )
    base = np.clip(np.round(image * 255), 0, 255).astype(np.uint8)
    rgb = np.stack([base, base, base], axis=-1)
    gb = boundary_mask(gt_mask)
    pb = boundary_mask(pred_mask)
    rgb[gb] = (0, 255, 0)
    rgb[pb] = (255, 0, 0)
    rgb[gb & pb] = (255, 255, 0)

    from PIL import Image

    Image.fromarray(rgb, mode="RGB").save(Path(out_path), format="PNG")
    return rgb
