"""Everything between bytes on disk and normalized patch batches.

Covers 16-bit binary PGM I/O, circular field-of-view geometry, percentile
dynamic-range compression, inscribed-square patch tiling, rotation
augmentation, dataset manifests, and the seeded synthetic image generator
used in place of clinical data.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from .tensor import Rng

SITES = ("vocal_fold", "oral_cavity", "both")
LABELS = ("normal", "carcinoma")


class DataError(Exception):
    pass


class PgmFormatError(DataError):
    """Not a binary PGM (bad magic) or malformed header."""


class PgmDepthError(DataError):
    """Unsupported sample depth (maxval must be 65535)."""


class PgmTruncatedError(DataError):
    """Pixel data shorter than the header promises."""


class ManifestError(DataError):
    pass


@dataclass(frozen=True)
class Fov:
    """Circular field of view in pixel-index coordinates."""

    cy: float
    cx: float
    radius: float

    def fits(self, h: int, w: int) -> bool:
        return (self.radius <= self.cy <= h - 1 - self.radius
                and self.radius <= self.cx <= w - 1 - self.radius)

    def mask(self, h: int, w: int) -> np.ndarray:
        yy, xx = np.ogrid[:h, :w]
        return (yy - self.cy) ** 2 + (xx - self.cx) ** 2 <= self.radius**2


def default_fov(h: int, w: int) -> Fov:
    """Largest centered circle with a 1 px guard band."""
    return Fov((h - 1) / 2.0, (w - 1) / 2.0, min(h, w) // 2 - 1)


@dataclass
class CleImage:
    pixels: np.ndarray  # uint16 (h, w)
    fov: Fov
    patient_id: str
    site: str
    label: str

    def __post_init__(self):
        if self.pixels.dtype != np.uint16 or self.pixels.ndim != 2:
            raise DataError(f"image pixels must be uint16 (h, w), got "
                            f"{self.pixels.dtype} {self.pixels.shape}")
        if not self.patient_id or not self.label:
            raise DataError("patient_id and label must be non-empty")
        h, w = self.pixels.shape
        if not self.fov.fits(h, w):
            raise DataError(f"FOV {self.fov} does not fit inside {h}x{w} raster")


@dataclass
class Patch:
    """8-bit square crop with provenance back to its source image."""

    pixels: np.ndarray  # uint8 (P, P)
    source_id: str
    offset: tuple[int, int]
    rotation_deg: float = 0.0

    def normalized(self) -> np.ndarray:
        return self.pixels.astype(np.float64) / 255.0


# --- PGM -------------------------------------------------------------------

def _read_pgm_tokens(data: bytes, count: int, start: int) -> tuple[list[bytes], int]:
    toks: list[bytes] = []
    i = start
    while len(toks) < count:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if i < len(data) and data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j : j + 1].isspace():
            j += 1
        if j == i:
            raise PgmFormatError("PGM header ended prematurely")
        toks.append(data[i:j])
        i = j
    return toks, i + 1  # single whitespace byte after maxval precedes the raster


def read_pgm16(path: str) -> np.ndarray:
    """Read a binary 16-bit PGM (P5, maxval 65535, big-endian samples)."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:2] != b"P5":
        raise PgmFormatError(f"{path}: bad magic {data[:2]!r}, expected P5")
    try:
        toks, off = _read_pgm_tokens(data, 3, 2)
        w, h, maxval = (int(t) for t in toks)
    except (ValueError, PgmFormatError) as e:
        raise PgmFormatError(f"{path}: malformed PGM header: {e}") from e
    if maxval != 65535:
        raise PgmDepthError(f"{path}: unsupported depth maxval={maxval}, expected 65535")
    need = w * h * 2
    raster = data[off : off + need]
    if len(raster) < need:
        raise PgmTruncatedError(f"{path}: raster has {len(raster)} bytes, expected {need}")
    return np.frombuffer(raster, dtype=">u2").reshape(h, w).astype(np.uint16)


def write_pgm16(pixels: np.ndarray, path: str) -> None:
    if pixels.dtype != np.uint16 or pixels.ndim != 2:
        raise DataError(f"write_pgm16 expects uint16 (h, w), got {pixels.dtype} {pixels.shape}")
    h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode())
        f.write(pixels.astype(">u2").tobytes())


def write_pgm8(pixels: np.ndarray, path: str) -> None:
    """8-bit PGM writer used for activation previews."""
    if pixels.dtype != np.uint8 or pixels.ndim != 2:
        raise DataError(f"write_pgm8 expects uint8 (h, w), got {pixels.dtype} {pixels.shape}")
    h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(pixels.tobytes())


# --- preprocessing -----------------------------------------------------------

def _nearest_rank(sorted_vals: np.ndarray, pct: float) -> float:
    idx = max(int(math.ceil(pct / 100.0 * sorted_vals.size)) - 1, 0)
    return float(sorted_vals[idx])


def dynamic_compress(img: CleImage) -> np.ndarray:
    """Stretch the 1st..99th in-FOV percentile range onto 0..255.

    Pixels outside the FOV are set to 0. A flat FOV (p99 == p1) maps to
    all zeros. Output is uint8 and monotone in the input values.
    """
    h, w = img.pixels.shape
    mask = img.fov.mask(h, w)
    vals = np.sort(img.pixels[mask].ravel())
    p_lo = _nearest_rank(vals, 1.0)
    p_hi = _nearest_rank(vals, 99.0)
    out = np.zeros((h, w), dtype=np.uint8)
    if p_hi > p_lo:
        scaled = (img.pixels.astype(np.float64) - p_lo) / (p_hi - p_lo)
        out8 = np.rint(255.0 * np.clip(scaled, 0.0, 1.0)).astype(np.uint8)
        out[mask] = out8[mask]
    return out


def inscribed_square(fov: Fov) -> tuple[int, int, int]:
    """(y0, x0, side) of the largest axis-aligned square inside the circle.

    side = floor(radius * sqrt(2)); the square is centered on the FOV so
    every corner stays within the radius.
    """
    side = int(math.floor(fov.radius * math.sqrt(2.0)))
    y0 = int(round(fov.cy - (side - 1) / 2.0))
    x0 = int(round(fov.cx - (side - 1) / 2.0))
    for cy, cx in ((y0, x0), (y0, x0 + side - 1), (y0 + side - 1, x0),
                   (y0 + side - 1, x0 + side - 1)):
        if math.hypot(cy - fov.cy, cx - fov.cx) > fov.radius:
            raise DataError("inscribed square corner escaped the FOV circle")
    return y0, x0, side


def extract_inscribed_patches(
    img8: np.ndarray, fov: Fov, patch_size: int, source_id: str = "",
    rotation_deg: float = 0.0,
) -> list[Patch]:
    """Tile the inscribed square with non-overlapping patches, row-major.

    Partial tiles at the square's edge are dropped.
    """
    y0, x0, side = inscribed_square(fov)
    if side < patch_size:
        raise DataError(
            f"patch size {patch_size} too large: inscribed square side is {side}"
        )
    per_axis = side // patch_size
    patches = []
    for a in range(per_axis):
        for b in range(per_axis):
            y, x = y0 + a * patch_size, x0 + b * patch_size
            patches.append(Patch(
                pixels=np.ascontiguousarray(img8[y : y + patch_size, x : x + patch_size]),
                source_id=source_id, offset=(y, x), rotation_deg=rotation_deg,
            ))
    return patches


def rotate_image(pixels: np.ndarray, fov: Fov, angle_deg: float) -> np.ndarray:
    """Rotate about the FOV center, bilinear interpolation, fill 0 outside."""
    h, w = pixels.shape
    t = math.radians(angle_deg)
    ct, st = math.cos(t), math.sin(t)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    dy, dx = yy - fov.cy, xx - fov.cx
    sy = fov.cy + ct * dy + st * dx
    sx = fov.cx - st * dy + ct * dx
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    wy, wx = sy - y0, sx - x0

    def sample(yi, xi):
        inside = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        v = pixels[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)].astype(np.float64)
        return np.where(inside, v, 0.0)

    out = ((1 - wy) * (1 - wx) * sample(y0, x0)
           + (1 - wy) * wx * sample(y0, x0 + 1)
           + wy * (1 - wx) * sample(y0 + 1, x0)
           + wy * wx * sample(y0 + 1, x0 + 1))
    return np.rint(np.clip(out, 0, 65535)).astype(np.uint16)


def augment_rotate(img: CleImage, rng: Rng) -> tuple[CleImage, float]:
    """One rotated copy of a training image; the angle consumes the stream."""
    angle = rng.uniform(0.0, 360.0)
    rotated = rotate_image(img.pixels, img.fov, angle)
    return CleImage(rotated, img.fov, img.patient_id, img.site, img.label), angle


# --- manifests ---------------------------------------------------------------

MANIFEST_HEADER = ["path", "patient_id", "site", "label"]


@dataclass(frozen=True)
class ManifestRow:
    path: str  # relative to the manifest's directory
    patient_id: str
    site: str
    label: str

    @property
    def image_id(self) -> str:
        return self.path


def write_manifest(rows: list[ManifestRow], path: str) -> None:
    with open(path, "w", newline="\n") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(MANIFEST_HEADER)
        for r in rows:
            wr.writerow([r.path, r.patient_id, r.site, r.label])


def load_manifest(path: str) -> list[ManifestRow]:
    """Load and validate a manifest; every referenced file must exist."""
    root = os.path.dirname(os.path.abspath(path))
    rows = []
    with open(path, newline="") as f:
        rd = csv.reader(f)
        header = next(rd, None)
        # a trailing exclusion_mask column is a reserved hook and is ignored
        if header is None or header[:4] != MANIFEST_HEADER:
            raise ManifestError(f"{path}: bad manifest header {header}")
        for lineno, row in enumerate(rd, start=2):
            if not row:
                continue
            if len(row) < 4:
                raise ManifestError(f"{path}:{lineno}: expected 4+ columns, got {len(row)}")
            r = ManifestRow(*row[:4])
            if r.site not in SITES:
                raise ManifestError(f"{path}:{lineno}: unknown site {r.site!r}")
            if r.label not in LABELS:
                raise ManifestError(f"{path}:{lineno}: unknown label {r.label!r}")
            if not r.patient_id:
                raise ManifestError(f"{path}:{lineno}: empty patient_id")
            rows.append(r)
    seen = set()
    for r in rows:
        if r.path in seen:
            raise ManifestError(f"{path}: duplicate entry {r.path}")
        seen.add(r.path)
        full = os.path.join(root, r.path)
        if not os.path.isfile(full):
            raise ManifestError(f"{path}: referenced file missing: {r.path}")
    return rows


class Dataset:
    """Manifest plus lazy image loading, with read instrumentation.

    `reads` records every image path actually decoded, which lets tests
    assert that training never touches the test split.
    """

    def __init__(self, manifest_path: str):
        self.manifest_path = os.path.abspath(manifest_path)
        self.root = os.path.dirname(self.manifest_path)
        self.rows = load_manifest(manifest_path)
        self.by_id = {r.image_id: r for r in self.rows}
        self.reads: list[str] = []

    def ids(self) -> list[str]:
        return [r.image_id for r in self.rows]

    def load_image(self, image_id: str) -> CleImage:
        row = self.by_id[image_id]
        path = os.path.join(self.root, row.path)
        try:
            pixels = read_pgm16(path)
        except OSError as e:
            raise DataError(f"cannot load {row.path}: {e}") from e
        self.reads.append(row.path)
        h, w = pixels.shape
        return CleImage(pixels, default_fov(h, w), row.patient_id, row.site, row.label)


LABEL_TO_CLASS = {"normal": 0, "carcinoma": 1}


# --- synthetic generator -----------------------------------------------------
# Texture recipe (fixed so acceptance numbers are seed-stable):
#   normal    = bilinearly upsampled coarse noise field (large smooth blobs)
#               + faint fine noise
#   carcinoma = the same smooth field at lower weight + strong fine speckle
#               + a handful of elliptical intensity bumps
# Both classes share a per-patient brightness offset (a learnable nuisance)
# and a per-image gain jitter; carcinoma speckle amplitude varies per image
# so the class boundary is not trivial.

_BASE = 28000.0
_SMOOTH_AMP = 9000.0
_NORMAL_FINE_AMP = 700.0
_CARC_FINE_LO, _CARC_FINE_HI = 2400.0, 5200.0
_PATIENT_OFFSET = 4500.0
_STAMP_AMP = 5000.0


def _bilinear_upsample(grid: np.ndarray, h: int, w: int) -> np.ndarray:
    gh, gw = grid.shape
    y = np.linspace(0.0, gh - 1.0, h)
    x = np.linspace(0.0, gw - 1.0, w)
    y0 = np.clip(np.floor(y).astype(int), 0, gh - 2)
    x0 = np.clip(np.floor(x).astype(int), 0, gw - 2)
    wy = (y - y0)[:, None]
    wx = (x - x0)[None, :]
    g = grid
    return ((1 - wy) * (1 - wx) * g[np.ix_(y0, x0)]
            + (1 - wy) * wx * g[np.ix_(y0, x0 + 1)]
            + wy * (1 - wx) * g[np.ix_(y0 + 1, x0)]
            + wy * wx * g[np.ix_(y0 + 1, x0 + 1)])


def _synth_pixels(rng: Rng, size: int, label: str, patient_offset: float) -> np.ndarray:
    h = w = size
    coarse = rng.uniform_array(12 * 12, -1.0, 1.0).reshape(12, 12)
    smooth = _bilinear_upsample(coarse, h, w)
    fine = rng.uniform_array(h * w, -1.0, 1.0).reshape(h, w)
    gain = rng.uniform(0.85, 1.15)
    img = _BASE + patient_offset + gain * _SMOOTH_AMP * smooth
    if label == "normal":
        img += _NORMAL_FINE_AMP * fine
    else:
        amp = rng.uniform(_CARC_FINE_LO, _CARC_FINE_HI)
        img += amp * fine
        yy, xx = np.ogrid[:h, :w]
        for _ in range(6):
            cy = rng.uniform(0.25 * h, 0.75 * h)
            cx = rng.uniform(0.25 * w, 0.75 * w)
            a = rng.uniform(size / 40.0, size / 14.0)
            b = rng.uniform(size / 40.0, size / 14.0)
            theta = rng.uniform(0.0, math.pi)
            amp_s = rng.uniform(-_STAMP_AMP, _STAMP_AMP)
            dy, dx = yy - cy, xx - cx
            ry = math.cos(theta) * dy + math.sin(theta) * dx
            rx = -math.sin(theta) * dy + math.cos(theta) * dx
            q = (ry / a) ** 2 + (rx / b) ** 2
            img += amp_s * np.exp(-q)
    fov = default_fov(h, w)
    out = np.clip(img, 0.0, 65535.0)
    out[~fov.mask(h, w)] = 0.0
    return np.rint(out).astype(np.uint16)


def synth_dataset(seed: int, n_patients: int, images_per_patient: int,
                  size: int, out_dir: str) -> str:
    """Write a deterministic synthetic dataset; returns the manifest path.

    Labels alternate per image so each patient is balanced; sites cycle
    through the three anatomical groups. Identical seeds give byte
    identical files.
    """
    if n_patients < 1 or images_per_patient < 1 or size < 32:
        raise ValueError("n_patients, images_per_patient must be >= 1 and size >= 32")
    try:
        os.makedirs(out_dir, exist_ok=True)
        probe = os.path.join(out_dir, ".write_probe")
        with open(probe, "w"):
            pass
        os.remove(probe)
    except OSError as e:
        raise DataError(f"output directory not writable: {out_dir}: {e}") from e
    root = Rng(seed)
    rows = []
    for p in range(n_patients):
        offset = root.derive(p, 0).uniform(-_PATIENT_OFFSET, _PATIENT_OFFSET)
        patient = f"patient_{p:02d}"
        for i in range(images_per_patient):
            label = LABELS[i % 2]
            site = SITES[i % 3]
            pixels = _synth_pixels(root.derive(p, i + 1), size, label, offset)
            name = f"p{p:02d}_i{i:03d}_{label}.pgm"
            write_pgm16(pixels, os.path.join(out_dir, name))
            rows.append(ManifestRow(name, patient, site, label))
    manifest_path = os.path.join(out_dir, "manifest.csv")
    write_manifest(rows, manifest_path)
    return manifest_path
