"""Dataset ingestion: fixations, density maps, images, manifests.

Conventions
-----------
* Images are float64 ``(channels, height, width)`` arrays in [0, 1].
* Maps are float64 ``(height, width)`` arrays.
* Fixation files hold one ``x<TAB>y`` pair per line, 0-based integer pixels.
* A dataset directory holds ``manifest.json`` plus the files it lists, with
  paths relative to the manifest.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from emlnet.core import EmptyFixations, OutOfBounds, SaliencyError, ShapeMismatch
from emlnet.micronet import bilinear_resize

DEFAULT_SIGMA_640 = 19.0
MANIFEST_NAME = "manifest.json"


class UnsupportedFormat(SaliencyError):
    pass


class IoFailure(OSError):
    pass


def default_sigma(width):
    """Blur sigma scaled from 19 px at 640 px wide."""
    return DEFAULT_SIGMA_640 * width / 640.0


@dataclass
class FixationRecord:
    image_id: str
    fixations: list
    width: int
    height: int

    def __post_init__(self):
        self.fixations = [(int(x), int(y)) for x, y in self.fixations]
        for x, y in self.fixations:
            if not (0 <= x < self.width and 0 <= y < self.height):
                raise OutOfBounds(f"fixation ({x}, {y}) outside {self.width}x{self.height} image {self.image_id!r}")


@dataclass
class Sample:
    image_id: str
    image: np.ndarray
    density: np.ndarray
    fixations: np.ndarray

    @property
    def size(self):
        return self.image.shape[2], self.image.shape[1]


# ---------------------------------------------------------------------------
# fixations -> maps
# ---------------------------------------------------------------------------


def fixations_to_binary(rec):
    """0/1 map with a one at every fixated pixel (duplicates collapse)."""
    F = np.zeros((rec.height, rec.width))
    for x, y in rec.fixations:
        if not (0 <= x < rec.width and 0 <= y < rec.height):
            raise OutOfBounds(f"fixation ({x}, {y}) outside the image")
        F[y, x] = 1.0
    return F


def fixations_to_density(rec, sigma):
    """Gaussian-blurred fixation impulses, truncated at 4 sigma, summing to one."""
    if not rec.fixations:
        raise EmptyFixations(f"no fixations for {rec.image_id!r}")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    impulses = np.zeros((rec.height, rec.width))
    for x, y in rec.fixations:
        impulses[y, x] += 1.0
    blurred = gaussian_filter(impulses, sigma, mode="constant", truncate=4.0)
    return blurred / blurred.sum()


# ---------------------------------------------------------------------------
# padding and resizing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PadGeometry:
    top: int
    bottom: int
    left: int
    right: int

    @property
    def is_identity(self):
        return not (self.top or self.bottom or self.left or self.right)


def pad_to_ratio(image, ratio=(4, 3)):
    """Zero-pad the last two axes (height, width) to a width:height ratio.

    Only the deficient axis is padded, symmetrically, with the odd pixel on
    the bottom/right.  Returns ``(padded, PadGeometry)``.
    """
    image = np.asarray(image)
    h, w = image.shape[-2:]
    rw, rh = ratio
    if w * rh > h * rw:
        new_h, new_w = max(h, int(round(w * rh / rw))), w
    elif w * rh < h * rw:
        new_h, new_w = h, max(w, int(round(h * rw / rh)))
    else:
        new_h, new_w = h, w
    top = (new_h - h) // 2
    left = (new_w - w) // 2
    geom = PadGeometry(top, new_h - h - top, left, new_w - w - left)
    pad = [(0, 0)] * (image.ndim - 2) + [(geom.top, geom.bottom), (geom.left, geom.right)]
    return np.pad(image, pad), geom


def unpad(image, geom):
    """Crop away the padding recorded in ``geom``."""
    h, w = image.shape[-2:]
    return image[..., geom.top : h - geom.bottom, geom.left : w - geom.right]


def resize_map(values, target_w, target_h):
    """Bilinear resize; a sum-normalized input stays sum-normalized."""
    values = np.asarray(values, dtype=np.float64)
    out = bilinear_resize(values, target_w, target_h)
    if abs(values.sum() - 1.0) < 1e-9 and out.sum() > 0:
        out = out / out.sum()
    return out


def resize_fixations(F, target_w, target_h):
    """Move every fixated pixel to its nearest pixel in the target grid."""
    h, w = F.shape
    out = np.zeros((target_h, target_w))
    ys, xs = np.nonzero(F)
    ty = np.minimum((ys + 0.5) * target_h / h, target_h - 1).astype(int)
    tx = np.minimum((xs + 0.5) * target_w / w, target_w - 1).astype(int)
    out[ty, tx] = 1.0
    return out


def resize_image(image, target_w, target_h):
    return np.clip(bilinear_resize(image, target_w, target_h), 0.0, 1.0)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def save_map_image(values, path, bits=16):
    """Write a map as grayscale PNG, stretching [min, max] to the full range.

    A constant map is written as all zeros.  Lossy by construction.
    """
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise SaliencyError("cannot save a map with non-finite values")
    lo, hi = values.min(), values.max()
    scaled = np.zeros_like(values) if hi == lo else (values - lo) / (hi - lo)
    if bits == 16:
        img = Image.fromarray(np.round(scaled * 65535).astype(np.uint16))
    elif bits == 8:
        img = Image.fromarray(np.round(scaled * 255).astype(np.uint8), mode="L")
    else:
        raise ValueError("bits must be 8 or 16")
    try:
        img.save(path, format="PNG")
    except OSError as err:
        raise IoFailure(f"cannot write {path}: {err}") from err


def load_map_image(path):
    """Read an 8- or 16-bit grayscale image as floats in [0, 1]."""
    try:
        img = Image.open(path)
        img.load()
    except FileNotFoundError as err:
        raise IoFailure(f"no such file: {path}") from err
    except OSError as err:
        raise UnsupportedFormat(f"{path}: {err}") from err
    if img.mode == "L":
        return np.asarray(img, dtype=np.float64) / 255.0
    if img.mode in ("I;16", "I;16B", "I;16L"):
        return np.asarray(img, dtype=np.float64) / 65535.0
    if img.mode == "I":
        arr = np.asarray(img, dtype=np.float64)
        if arr.min() < 0 or arr.max() > 65535:
            raise UnsupportedFormat(f"{path}: values outside 16-bit range")
        return arr / 65535.0
    raise UnsupportedFormat(f"{path}: expected grayscale, got mode {img.mode}")


def load_image(path):
    """Read an image file as ``(3, H, W)`` floats in [0, 1]."""
    try:
        img = Image.open(path)
        img = img.convert("RGB")
    except FileNotFoundError as err:
        raise IoFailure(f"no such file: {path}") from err
    except OSError as err:
        raise UnsupportedFormat(f"{path}: {err}") from err
    return np.asarray(img, dtype=np.float64).transpose(2, 0, 1) / 255.0


def save_image(image, path):
    arr = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_fixations(path):
    out = []
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise IoFailure(f"cannot read {path}: {err}") from err
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise UnsupportedFormat(f"{path}:{lineno}: expected 'x<TAB>y'")
        out.append((int(parts[0]), int(parts[1])))
    return out


def write_fixations(fixations, path):
    Path(path).write_text("".join(f"{x}\t{y}\n" for x, y in fixations), encoding="utf-8")


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    root: Path
    entries: list = field(default_factory=list)
    split: str = "train"
    sigma: float = None
    width: int = None
    height: int = None

    def to_json(self):
        doc = {
            "split": self.split,
            "sigma": self.sigma,
            "width": self.width,
            "height": self.height,
            "entries": self.entries,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def save(self):
        path = Path(self.root) / MANIFEST_NAME
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    def path_of(self, entry, key):
        return Path(self.root) / entry[key]


def load_manifest(path):
    """Read a manifest (file or directory containing ``manifest.json``).

    Every referenced file must exist.
    """
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as err:
        raise IoFailure(f"cannot read manifest {path}: {err}") from err
    m = DatasetManifest(
        root=path.parent,
        entries=doc["entries"],
        split=doc.get("split", "train"),
        sigma=doc.get("sigma"),
        width=doc.get("width"),
        height=doc.get("height"),
    )
    for entry in m.entries:
        for key in ("image", "fixations", "density"):
            if entry.get(key) and not m.path_of(entry, key).exists():
                raise IoFailure(f"manifest entry {entry['id']!r}: missing {key} file {entry[key]}")
    return m


def load_sample(manifest, entry):
    image = load_image(manifest.path_of(entry, "image"))
    h, w = image.shape[1:]
    rec = FixationRecord(entry["id"], read_fixations(manifest.path_of(entry, "fixations")), w, h)
    F = fixations_to_binary(rec)
    if entry.get("density"):
        Q = load_map_image(manifest.path_of(entry, "density"))
        if Q.shape != (h, w):
            raise ShapeMismatch(f"{entry['id']}: density {Q.shape} does not match image {(h, w)}")
        Q = Q / Q.sum()
    else:
        Q = fixations_to_density(rec, manifest.sigma or default_sigma(w))
    return Sample(entry["id"], image, Q, F)


def load_dataset(manifest):
    """Load every entry as a :class:`Sample`, in manifest order."""
    if not isinstance(manifest, DatasetManifest):
        manifest = load_manifest(manifest)
    return [load_sample(manifest, e) for e in manifest.entries]


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def _blob_centers(rng, count, w, h, margin, min_sep):
    centers = []
    for _ in range(1000):
        if len(centers) == count:
            break
        x = int(rng.integers(margin, w - margin))
        y = int(rng.integers(margin, h - margin))
        if all(math.hypot(x - cx, y - cy) >= min_sep for cx, cy in centers):
            centers.append((x, y))
    if len(centers) < count:
        raise ValueError(f"cannot place {count} separated blobs in a {w}x{h} image")
    return centers


def _observer_fixations(rng, center, count, spread, width, height):
    """``count`` fixations on one object: a third exactly on ``center``, the
    rest scattered ~ N(0, spread) around it and clipped to the image."""
    cx, cy = center
    n_center = count // 3
    out = [(cx, cy)] * n_center
    offsets = np.round(rng.normal(0.0, spread, size=(count - n_center, 2))).astype(int)
    for dx, dy in offsets:
        out.append((int(np.clip(cx + dx, 0, width - 1)), int(np.clip(cy + dy, 0, height - 1))))
    return out


def synthetic_sigma(width):
    """GT blur used for synthetic data: 3 px at 64 px wide."""
    return 3.0 * width / 64.0


def _blob_color(rng, target):
    """Reddish for fixated blobs, bluish for distractors, equal brightness."""
    hi = rng.uniform(0.8, 1.0)
    lo = rng.uniform(0.1, 0.3, size=2)
    return np.array([hi, lo[0], lo[1]]) if target else np.array([lo[0], lo[1], hi])


def synthetic_samples(
    count, width, height, blobs_per_image=2, seed=0, sigma=None, fixations_per_blob=48, distractors=4
):
    """Colored Gaussian blobs on textured noise.

    Reddish blobs attract fixations; ``distractors`` bluish blobs of the same
    brightness are never looked at, so a model has to learn color rather
    than plain contrast.  Each fixated blob collects ``fixations_per_blob``
    fixations (a stand-in for many observers): a third on the center, the
    rest scattered over the blob.  Scatter is redrawn until the ground-truth
    density peaks on a blob center.  Images are quantized to 8 bits so that
    a written-and-reloaded image equals the in-memory one.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    sigma = synthetic_sigma(width) if sigma is None else sigma
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width]
    scale = width / 64.0
    samples = []
    for k in range(count):
        texture = gaussian_filter(rng.normal(0.0, 1.0, (3, height, width)), sigma=(0, scale, scale))
        texture = 0.3 + 0.25 * texture / (np.abs(texture).max() + 1e-12)
        image = texture
        n_blobs = blobs_per_image + distractors
        placed = _blob_centers(rng, n_blobs, width, height, margin=int(6 * scale), min_sep=11 * scale)
        radii = rng.uniform(2.5, 4.5, size=n_blobs) * scale
        for i, ((cx, cy), radius) in enumerate(zip(placed, radii)):
            color = _blob_color(rng, i < blobs_per_image)
            blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * radius**2))
            image = image + color[:, None, None] * blob
        image = np.round(np.clip(image, 0.0, 1.0) * 255) / 255.0
        image_id = f"synth_{k:05d}"
        centers = placed[:blobs_per_image]
        for _ in range(100):
            fixations = []
            for center, radius in zip(centers, radii):
                fixations += _observer_fixations(rng, center, fixations_per_blob, 0.5 * radius, width, height)
            rec = FixationRecord(image_id, fixations, width, height)
            Q = fixations_to_density(rec, sigma)
            peak = np.unravel_index(np.argmax(Q), Q.shape)
            if (int(peak[1]), int(peak[0])) in centers:
                break
        else:
            raise ValueError(f"{image_id}: density peak never landed on a blob center")
        samples.append(Sample(image_id, image, Q, fixations_to_binary(rec)))
    return samples


def generate_synthetic(
    root,
    count,
    width,
    height,
    blobs_per_image=2,
    seed=0,
    sigma=None,
    split="train",
    fixations_per_blob=48,
    distractors=4,
):
    """Write a synthetic dataset under ``root`` and return its manifest."""
    root = Path(root)
    sigma = synthetic_sigma(width) if sigma is None else sigma
    try:
        for sub in ("images", "fixations", "density"):
            (root / sub).mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise IoFailure(f"cannot create {root}: {err}") from err
    manifest = DatasetManifest(root=root, split=split, sigma=sigma, width=width, height=height)
    for s in synthetic_samples(
        count, width, height, blobs_per_image, seed, sigma, fixations_per_blob, distractors
    ):
        entry = {
            "id": s.image_id,
            "image": f"images/{s.image_id}.png",
            "fixations": f"fixations/{s.image_id}.txt",
            "density": f"density/{s.image_id}.png",
        }
        save_image(s.image, root / entry["image"])
        ys, xs = np.nonzero(s.fixations)
        write_fixations(list(zip(xs.tolist(), ys.tolist())), root / entry["fixations"])
        save_map_image(s.density, root / entry["density"], bits=16)
        manifest.entries.append(entry)
    manifest.save()
    return manifest
