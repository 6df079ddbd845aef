"""Image I/O, luminance and residual maps, patches, manifests and synthetic data.

Grayscale images are 2-D float64 arrays with values in [0, 1].
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import ImageError, ManifestError, ShapeError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
MANIFEST_HEADER = ["dist_path", "ref_path", "score", "ref_id"]
FAMILIES = ("blur", "noise", "quant")
MAX_PSEUDO_MOS = 9.0


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def rgb_to_luminance(rgb) -> np.ndarray:
    """BT.601 luma of 8-bit RGB, scaled to [0, 1].  2-D input is treated as gray."""
    a = np.asarray(rgb, dtype=np.float64)
    if a.ndim == 2:
        return a / 255.0
    if a.ndim != 3 or a.shape[2] < 3:
        raise ShapeError(f"expected an (H, W, 3) RGB array, got {a.shape}")
    r, g, b = a[..., 0], a[..., 1], a[..., 2]
    return (LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b) / 255.0


def read_image(path) -> np.ndarray:
    """Decode a PNG/PGM/PPM file into a luminance image."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("1", "L", "P", "LA", "RGBA", "RGB"):
                if im.mode == "P":
                    im = im.convert("RGB")
                elif im.mode in ("1", "LA"):
                    im = im.convert("L")
                arr = np.asarray(im)
            else:
                raise ImageError(f"{path}: unsupported image mode {im.mode}")
    except (OSError, UnidentifiedImageError) as exc:
        raise ImageError(f"cannot decode image {path}: {exc}") from exc
    if arr.ndim == 3:
        arr = arr[..., :3]
    return rgb_to_luminance(arr)


def to_uint8(img) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, img) -> None:
    """Write a [0, 1] grayscale image as 8-bit PNG or PGM (chosen by suffix)."""
    Image.fromarray(to_uint8(img)).save(path)


def residual_map(d, o) -> np.ndarray:
    d = np.asarray(d)
    o = np.asarray(o)
    if d.shape != o.shape:
        raise ShapeError(f"residual needs equal sizes, got {d.shape} and {o.shape}")
    return np.abs(d - o)


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------

def grid_anchors(height: int, width: int, size: int = 128) -> list:
    """Top-left corners of the non-overlapping grid; partial tiles are dropped."""
    if height < size or width < size:
        raise ImageError(f"image {height}x{width} is smaller than the {size}px patch")
    return [(y, x) for y in range(0, height - size + 1, size)
            for x in range(0, width - size + 1, size)]


def random_anchors(height: int, width: int, size: int, count: int, rng) -> list:
    if height < size or width < size:
        raise ImageError(f"image {height}x{width} is smaller than the {size}px patch")
    ys = rng.integers(0, height - size + 1, size=count)
    xs = rng.integers(0, width - size + 1, size=count)
    return [(int(y), int(x)) for y, x in zip(ys, xs)]


def extract_patches(d, r, mode: str = "test", count: int = 32, rng=None, size: int = 128):
    """Aligned ``(distorted, residual)`` crops.

    ``mode="train"`` draws ``count`` uniform random anchors from ``rng``;
    ``mode="test"`` walks the non-overlapping grid.
    """
    d = np.asarray(d)
    r = np.asarray(r)
    if d.shape != r.shape:
        raise ShapeError(f"distorted {d.shape} and residual {r.shape} differ in size")
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode patch sampling needs a seeded generator")
        anchors = random_anchors(*d.shape, size, count, rng)
    elif mode == "test":
        anchors = grid_anchors(*d.shape, size)
    else:
        raise ValueError(f"mode must be 'train' or 'test', got {mode!r}")
    return [(d[y:y + size, x:x + size], r[y:y + size, x:x + size]) for y, x in anchors]


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Sample:
    dist_path: Path
    ref_path: Path
    score: float
    ref_id: str


class Manifest(list):
    """Ordered list of ``Sample`` records."""

    @property
    def ref_ids(self) -> list:
        return sorted({s.ref_id for s in self})


def load_manifest(path, check_files: bool = True) -> Manifest:
    path = Path(path)
    base = path.parent
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    out = Manifest()
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != MANIFEST_HEADER:
            raise ManifestError(f"{path}: missing header {','.join(MANIFEST_HEADER)!r}")
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ManifestError(f"{path}: row {row_no} has {len(row)} fields, expected 4")
            dist, ref, score, ref_id = (c.strip() for c in row)
            try:
                score = float(score)
            except ValueError:
                raise ManifestError(f"{path}: row {row_no} has non-numeric score {score!r}") from None
            dist_p, ref_p = base / dist, base / ref
            if check_files:
                for p in (dist_p, ref_p):
                    if not p.is_file():
                        raise ManifestError(f"{path}: row {row_no} references missing file {p}")
            out.append(Sample(dist_p, ref_p, score, ref_id))
    if not out:
        raise ManifestError(f"{path}: manifest has no samples")
    return out


def write_manifest(manifest, path) -> None:
    """Write a manifest; paths are stored relative to its directory when possible."""
    path = Path(path)
    base = path.parent.resolve()

    def rel(p):
        p = Path(p).resolve()
        try:
            return p.relative_to(base).as_posix()
        except ValueError:
            return os.path.relpath(p, base)

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for s in manifest:
            w.writerow([rel(s.dist_path), rel(s.ref_path), repr(float(s.score)), s.ref_id])


def split_by_reference(manifest, train_fraction: float = 0.8, rng=None):
    """Content-disjoint split: whole reference groups go to one side.

    ``round(train_fraction * n_refs)`` (half up) references train, clamped so
    both sides keep at least one reference.
    """
    refs = sorted({s.ref_id for s in manifest})
    if len(refs) < 2:
        raise ValueError("splitting by reference needs at least two distinct ref_ids")
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    order = [refs[i] for i in rng.permutation(len(refs))]
    n_train = int(np.floor(train_fraction * len(refs) + 0.5))
    n_train = min(max(n_train, 1), len(refs) - 1)
    train_refs = set(order[:n_train])
    train = Manifest(s for s in manifest if s.ref_id in train_refs)
    test = Manifest(s for s in manifest if s.ref_id not in train_refs)
    return train, test


@dataclass
class LoadedSample:
    distorted: np.ndarray
    residual: np.ndarray
    score: float
    ref_id: str
    dist_path: Path | None = None


def load_sample(sample: Sample) -> LoadedSample:
    d = read_image(sample.dist_path)
    o = read_image(sample.ref_path)
    if d.shape != o.shape:
        raise ImageError(
            f"{sample.dist_path} ({d.shape}) and {sample.ref_path} ({o.shape}) differ in size")
    return LoadedSample(d, residual_map(d, o), sample.score, sample.ref_id, sample.dist_path)


def load_samples(manifest) -> list:
    return [load_sample(s) for s in manifest]


# ---------------------------------------------------------------------------
# synthetic distortions
# ---------------------------------------------------------------------------

def gaussian_blur(img, sigma: float) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if sigma == 0:
        return img.copy()
    return ndimage.gaussian_filter(img, sigma, mode="reflect")


def add_noise(img, sigma: float, rng) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return np.clip(img + sigma * rng.standard_normal(img.shape), 0.0, 1.0)


def quantize(img, bits: float) -> np.ndarray:
    """Uniform quantisation to ``round(2**bits)`` gray levels."""
    levels = int(round(2.0 ** bits))
    img = np.asarray(img, dtype=np.float64)
    return np.rint(img * (levels - 1)) / (levels - 1)


def family_parameters(levels: int) -> dict:
    """Distortion strength per family, mildest first."""
    return {
        "blur": np.linspace(0.5, 4.0, levels),
        "noise": np.linspace(0.01, 0.15, levels),
        "quant": np.linspace(6.0, 2.0, levels),
    }


def pseudo_mos(level: int, levels: int) -> float:
    """Stand-in opinion score on a 0..9 scale; level is 0-based, mildest first.

    Not a subjective score: it only encodes the distortion rank inside a family.
    """
    magnitude = (level + 1) / (levels + 1)
    return MAX_PSEUDO_MOS * (1.0 - magnitude)


def render_reference(rng, size: int = 256) -> np.ndarray:
    """Random mixture of a ramp, a checkerboard, a grating and band-limited noise."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    theta = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(theta) * xx + np.sin(theta) * yy

    period = rng.integers(8, 49)
    oy, ox = rng.integers(0, period, size=2)
    iy, ix = np.mgrid[0:size, 0:size]
    checker = (((iy + oy) // period + (ix + ox) // period) % 2).astype(np.float64)

    freq = rng.uniform(2, 12)
    phi = rng.uniform(0, 2 * np.pi)
    grating = np.sin(2 * np.pi * freq * (np.cos(phi) * xx + np.sin(phi) * yy))

    noise = ndimage.gaussian_filter(rng.standard_normal((size, size)), rng.uniform(1.0, 5.0),
                                    mode="wrap")
    noise /= noise.std()

    w = rng.uniform(0.2, 1.0, size=4)
    img = w[0] * ramp + w[1] * checker + 0.5 * w[2] * grating + 0.4 * w[3] * noise
    img = (img - img.min()) / (img.max() - img.min())
    return 0.1 + 0.8 * img


def distort(ref, family: str, param: float, rng) -> np.ndarray:
    if family == "blur":
        return gaussian_blur(ref, param)
    if family == "noise":
        return add_noise(ref, param, rng)
    if family == "quant":
        return quantize(ref, param)
    raise ValueError(f"unknown distortion family {family!r}")


def synth_generate(out_dir, n_refs: int, levels: int, rng=None, size: int = 256) -> Manifest:
    """Render a synthetic dataset and write ``manifest.csv`` into ``out_dir``.

    Layout: ``refs/ref_XXX.png`` and ``dist/<family>/<level>/ref_XXX.png``
    with 1-based levels.  Returns the manifest (``n_refs * 3 * levels`` rows).
    """
    if n_refs < 1 or levels < 1:
        raise ValueError("n_refs and levels must both be at least 1")
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    out = Path(out_dir)
    (out / "refs").mkdir(parents=True, exist_ok=True)
    params = family_parameters(levels)
    manifest = Manifest()
    for r in range(n_refs):
        ref_id = f"ref_{r:03d}"
        ref = to_uint8(render_reference(rng, size)) / 255.0
        ref_path = out / "refs" / f"{ref_id}.png"
        write_image(ref_path, ref)
        for family in FAMILIES:
            for k, value in enumerate(params[family]):
                level_dir = out / "dist" / family / str(k + 1)
                level_dir.mkdir(parents=True, exist_ok=True)
                dist_path = level_dir / f"{ref_id}.png"
                write_image(dist_path, distort(ref, family, float(value), rng))
                manifest.append(Sample(dist_path, ref_path, pseudo_mos(k, levels), ref_id))
    write_manifest(manifest, out / "manifest.csv")
    return manifest
