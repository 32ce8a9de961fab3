"""Procedural Circle-of-Willis-like vessel phantoms in three phenotype classes.

The template is a fixed node graph laid out on a 64-unit frame (x to the right,
y down, anterior at the top) and scaled to the requested image size::

    anterior arc        ICA_L ---- ARC ---- ICA_R
    middle cerebral   MCA_L <- ICA_L        ICA_R -> MCA_R
    PComA connectors    ICA_L -> PCA_L(1/2)  ICA_R -> PCA_R(1/2)
    posterior          PCA_L <- BAS_TOP -> PCA_R
    basilar trunk               BAS_TOP <- BAS_BOT

Every segment is a quadratic Bezier curve. Jitter moves the shared nodes, so
junctions stay connected. The PComA connectors are the only segments that
depend on the class, and the two PComA zones are fixed rectangles around them.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

TEMPLATE_FRAME = 64.0

# (x, y) in the 64-unit frame.
TEMPLATE_NODES: dict[str, tuple[float, float]] = {
    "BAS_BOT": (32.0, 60.0),
    "BAS_CTRL": (32.0, 52.0),
    "BAS_TOP": (32.0, 44.0),
    "PCA_L_CTRL": (24.0, 40.0),
    "PCA_L_END": (12.0, 46.0),
    "PCA_R_CTRL": (40.0, 40.0),
    "PCA_R_END": (52.0, 46.0),
    "ICA_L": (22.0, 28.0),
    "ICA_R": (42.0, 28.0),
    "ARC_CTRL": (32.0, 8.0),
    "MCA_L_CTRL": (14.0, 24.0),
    "MCA_L_END": (4.0, 26.0),
    "MCA_R_CTRL": (50.0, 24.0),
    "MCA_R_END": (60.0, 26.0),
    "PCOM_L_CTRL": (22.0, 35.0),
    "PCOM_R_CTRL": (42.0, 35.0),
}

# name -> (start, control, end); "@SEG" ends refer to the midpoint of SEG.
TEMPLATE_SEGMENTS: dict[str, tuple[str, str, str]] = {
    "basilar": ("BAS_BOT", "BAS_CTRL", "BAS_TOP"),
    "pca_left": ("BAS_TOP", "PCA_L_CTRL", "PCA_L_END"),
    "pca_right": ("BAS_TOP", "PCA_R_CTRL", "PCA_R_END"),
    "anterior_arc": ("ICA_L", "ARC_CTRL", "ICA_R"),
    "mca_left": ("ICA_L", "MCA_L_CTRL", "MCA_L_END"),
    "mca_right": ("ICA_R", "MCA_R_CTRL", "MCA_R_END"),
    "pcom_left": ("ICA_L", "PCOM_L_CTRL", "@pca_left"),
    "pcom_right": ("ICA_R", "PCOM_R_CTRL", "@pca_right"),
}

# Half-open pixel rectangles (x0, y0, x1, y1) in the 64-unit frame.
PCOMA_ZONES: dict[str, tuple[int, int, int, int]] = {
    "left": (18, 33, 28, 38),
    "right": (36, 33, 46, 38),
}

VOLUME_MAGIC = b"VSV1"
DTYPE_F32 = 1
_HEADER = struct.Struct("<4sHHII")

MANIFEST_NAME = "manifest.tsv"


class CowClass(IntEnum):
    CLASS1 = 1  # both PComA present
    CLASS2 = 2  # exactly one PComA
    CLASS3 = 3  # no PComA


class PhantomSpecError(ValueError):
    """Raised for an invalid :class:`PhantomSpec`; ``field`` names the culprit."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class PhantomSpec:
    class_label: int = CowClass.CLASS1
    image_size: int = 64
    depth: int = 1
    tube_sigma: float = 2.0
    jitter_amplitude: float = 1.5
    noise_sigma: float = 0.03
    seed: int = 0

    def validate(self) -> None:
        if int(self.class_label) not in (1, 2, 3):
            raise PhantomSpecError("class_label", f"must be 1, 2 or 3, got {self.class_label!r}")
        if int(self.image_size) != self.image_size or self.image_size < 32:
            raise PhantomSpecError("image_size", f"must be an integer >= 32, got {self.image_size!r}")
        if int(self.depth) != self.depth or self.depth < 1:
            raise PhantomSpecError("depth", f"must be an integer >= 1, got {self.depth!r}")
        if not self.tube_sigma > 0:
            raise PhantomSpecError("tube_sigma", f"must be > 0, got {self.tube_sigma!r}")
        if not self.jitter_amplitude >= 0:
            raise PhantomSpecError("jitter_amplitude", f"must be >= 0, got {self.jitter_amplitude!r}")
        if not self.noise_sigma >= 0:
            raise PhantomSpecError("noise_sigma", f"must be >= 0, got {self.noise_sigma!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise PhantomSpecError("seed", f"must fit in 64 bits, got {self.seed!r}")


@dataclass
class PhantomVolume:
    voxels: np.ndarray  # (depth, H, W) float32 in [0, 1]
    class_label: int
    pcoma: str = "both"

    @property
    def binary_mask(self) -> np.ndarray:
        return self.voxels >= 0.5


def pcoma_sides(class_label: int, rng: np.random.Generator) -> tuple[str, ...]:
    """PComA sides present for a class; Class 2 draws its side from ``rng``."""
    if class_label == CowClass.CLASS1:
        return ("left", "right")
    if class_label == CowClass.CLASS2:
        return (("left", "right")[int(rng.integers(2))],)
    return ()


def _bezier(p0, p1, p2, s):
    s = s[:, None]
    return (1 - s) ** 2 * p0 + 2 * s * (1 - s) * p1 + s**2 * p2


def segment_control_points(spec: PhantomSpec) -> tuple[dict[str, np.ndarray], tuple[str, ...]]:
    """Jittered 3D control points (z, y, x order per row) of every segment.

    Returns the segments present for this spec and the PComA sides drawn.
    """
    spec.validate()
    rng = np.random.default_rng(int(spec.seed))
    sides = pcoma_sides(int(spec.class_label), rng)
    scale = spec.image_size / TEMPLATE_FRAME
    z_mid = (spec.depth - 1) / 2.0
    nodes = {}
    for name, (x, y) in TEMPLATE_NODES.items():
        dx, dy = rng.uniform(-1.0, 1.0, size=2) * spec.jitter_amplitude
        dz = 0.0
        if spec.depth > 1:
            dz = float(rng.uniform(-1.0, 1.0)) * min(spec.jitter_amplitude, z_mid)
        nodes[name] = np.array([z_mid + dz, y * scale + dy, x * scale + dx])

    segments = {}
    for name, (a, c, b) in TEMPLATE_SEGMENTS.items():
        if name.startswith("pcom_") and name.split("_")[1] not in sides:
            continue
        if b.startswith("@"):
            pa, pc, pb = segments[b[1:]]
            end = _bezier(pa, pc, pb, np.array([0.5]))[0]
        else:
            end = nodes[b]
        segments[name] = np.stack([nodes[a], nodes[c], end])
    return segments, sides


def _curve_samples(ctrl: np.ndarray) -> np.ndarray:
    chord = np.linalg.norm(ctrl[1] - ctrl[0]) + np.linalg.norm(ctrl[2] - ctrl[1])
    n = max(16, int(np.ceil(chord * 2)))
    return _bezier(ctrl[0], ctrl[1], ctrl[2], np.linspace(0.0, 1.0, n + 1))


def _polyline_sqdist(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Squared distance from each row of ``points`` to the polyline ``poly``."""
    a = poly[:-1]
    ab = poly[1:] - a
    denom = np.maximum((ab**2).sum(axis=1), 1e-24)
    ap = points[:, None, :] - a[None, :, :]
    t = np.clip((ap * ab[None]).sum(axis=2) / denom, 0.0, 1.0)
    diff = ap - t[..., None] * ab[None]
    return (diff**2).sum(axis=2).min(axis=1)


def generate_phantom(spec: PhantomSpec) -> PhantomVolume:
    """Rasterize the phantom described by ``spec``; a pure function of ``spec``."""
    segments, sides = segment_control_points(spec)
    size, depth = spec.image_size, spec.depth
    field_ = np.zeros((depth, size, size))
    two_var = 2.0 * spec.tube_sigma**2
    reach = 6.0 * spec.tube_sigma  # profile tail beyond this is < 2e-8
    for name in segments:
        poly = _curve_samples(segments[name])
        lo = np.maximum(np.floor(poly.min(axis=0) - reach), 0).astype(int)
        hi = np.minimum(np.ceil(poly.max(axis=0) + reach) + 1, (depth, size, size)).astype(int)
        zz, yy, xx = np.meshgrid(
            np.arange(lo[0], hi[0], dtype=np.float64),
            np.arange(lo[1], hi[1], dtype=np.float64),
            np.arange(lo[2], hi[2], dtype=np.float64),
            indexing="ij",
        )
        pts = np.stack([zz.ravel(), yy.ravel(), xx.ravel()], axis=1)
        vals = np.exp(-_polyline_sqdist(pts, poly) / two_var).reshape(zz.shape)
        box = field_[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
        np.maximum(box, vals, out=box)
    voxels = field_
    if spec.noise_sigma > 0:
        rng = np.random.default_rng([int(spec.seed), 1])
        voxels = voxels + rng.normal(0.0, spec.noise_sigma, size=voxels.shape)
    voxels = np.clip(voxels, 0.0, 1.0).astype(np.float32)
    pcoma = {2: "both", 1: sides[0] if sides else "none", 0: "none"}[len(sides)]
    return PhantomVolume(voxels=voxels, class_label=int(spec.class_label), pcoma=pcoma)


def mip_render(volume, axis="z") -> np.ndarray:
    """Maximum intensity projection of a (depth, H, W) volume along ``axis``."""
    vox = volume.voxels if isinstance(volume, PhantomVolume) else np.asarray(volume)
    if vox.ndim == 2:
        vox = vox[None]
    axes = {"z": 0, "y": 1, "x": 2}
    if isinstance(axis, str):
        if axis.lower() not in axes:
            raise ValueError(f"axis must be one of z/y/x, got {axis!r}")
        ax = axes[axis.lower()]
    else:
        ax = int(axis)
        if ax not in (0, 1, 2):
            raise ValueError(f"axis must be 0, 1 or 2, got {axis!r}")
    return vox.max(axis=ax)


# --- PComA zone oracle ------------------------------------------------------


def zone_slices(image_size: int) -> dict[str, tuple[slice, slice]]:
    scale = image_size / TEMPLATE_FRAME
    out = {}
    for side, (x0, y0, x1, y1) in PCOMA_ZONES.items():
        out[side] = (
            slice(int(round(y0 * scale)), int(round(y1 * scale))),
            slice(int(round(x0 * scale)), int(round(x1 * scale))),
        )
    return out


def zone_mask(image_size: int) -> np.ndarray:
    mask = np.zeros((image_size, image_size), dtype=bool)
    for ys, xs in zone_slices(image_size).values():
        mask[ys, xs] = True
    return mask


def pcoma_zone_feature(image: np.ndarray) -> np.ndarray:
    """Mean intensity of the two PComA zones, sorted (larger first).

    Sorting removes the left/right ambiguity of Class 2.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image.max(axis=0)
    means = [image[ys, xs].mean() for ys, xs in zone_slices(image.shape[-1]).values()]
    return np.sort(np.array(means))[::-1]


class ZoneClassifier:
    """Nearest-class-mean classifier on :func:`pcoma_zone_feature`."""

    def __init__(self):
        self.classes_: np.ndarray | None = None
        self.means_: np.ndarray | None = None

    def fit(self, images: Sequence[np.ndarray], labels: Sequence[int]) -> "ZoneClassifier":
        feats = np.stack([pcoma_zone_feature(im) for im in images])
        labels = np.asarray(labels)
        self.classes_ = np.unique(labels)
        self.means_ = np.stack([feats[labels == c].mean(axis=0) for c in self.classes_])
        return self

    def predict(self, images: Sequence[np.ndarray]) -> np.ndarray:
        if self.means_ is None:
            raise RuntimeError("ZoneClassifier is not fitted")
        feats = np.stack([pcoma_zone_feature(im) for im in images])
        d = ((feats[:, None, :] - self.means_[None]) ** 2).sum(axis=2)
        return self.classes_[d.argmin(axis=1)]


# --- files ------------------------------------------------------------------


def write_volume(path, voxels: np.ndarray) -> None:
    arr = np.asarray(voxels, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected a (depth, H, W) array, got shape {arr.shape}")
    depth, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(VOLUME_MAGIC, DTYPE_F32, depth, h, w))
        fh.write(arr.tobytes(order="C"))


def read_volume(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated volume header")
    magic, dtype, depth, h, w = _HEADER.unpack_from(raw)
    if magic != VOLUME_MAGIC or dtype != DTYPE_F32:
        raise ValueError(f"{path}: not a float32 volume file")
    n = depth * h * w
    body = raw[_HEADER.size :]
    if len(body) != 4 * n:
        raise ValueError(f"{path}: expected {4 * n} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(depth, h, w).astype(np.float32)


def save_image(path, image: np.ndarray) -> None:
    """Write a [0, 1] image as 8-bit PNG, or binary PGM for a ``.pgm`` path."""
    path = Path(path)
    img8 = (np.clip(np.asarray(image, dtype=np.float64), 0, 1) * 255 + 0.5).astype(np.uint8)
    if path.suffix.lower() == ".pgm":
        h, w = img8.shape
        path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img8.tobytes())
        return
    from PIL import Image

    Image.fromarray(img8, mode="L").save(path)


def tile_grid(images: Sequence[np.ndarray], ncols: int, pad: int = 2) -> np.ndarray:
    images = [np.asarray(im) for im in images]
    h, w = images[0].shape
    nrows = -(-len(images) // ncols)
    grid = np.zeros((nrows * (h + pad) + pad, ncols * (w + pad) + pad), dtype=np.float32)
    for i, im in enumerate(images):
        r, c = divmod(i, ncols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        grid[y : y + h, x : x + w] = im
    return grid


# --- datasets ---------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    class_label: int
    seed: int
    split: str
    pcoma: str = ""


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    generator_hash: str
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        keys = [(e.seed, e.class_label) for e in self.entries]
        if len(set(keys)) != len(keys):
            raise ValueError("manifest entries must be unique by (seed, class_label)")
        for e in self.entries:
            if e.split not in ("train", "val", "synth"):
                raise ValueError(f"unknown split {e.split!r}")

    def select(self, split: str | None = None, class_label: int | None = None) -> list[ManifestEntry]:
        return [
            e
            for e in self.entries
            if (split is None or e.split == split) and (class_label is None or e.class_label == class_label)
        ]

    def load(self, entry: ManifestEntry) -> np.ndarray:
        return read_volume(self.root / entry.path)

    def load_mips(self, entries: Iterable[ManifestEntry]) -> np.ndarray:
        return np.stack([mip_render(self.load(e)) for e in entries])

    def to_text(self) -> str:
        lines = [f"# generator {self.generator_hash}"]
        for e in self.entries:
            lines.append(f"{e.path}\t{e.class_label}\t{e.seed}\t{e.split}\t{e.pcoma}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def write(self, path=None) -> Path:
        path = Path(path) if path is not None else self.root / MANIFEST_NAME
        path.write_text(self.to_text(), encoding="utf-8")
        return path

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        generator_hash = ""
        entries = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 2 and parts[0] == "generator":
                    generator_hash = parts[1]
                continue
            cols = line.split("\t")
            if len(cols) not in (4, 5):
                raise ValueError(f"{path}:{lineno}: expected 4 or 5 tab-separated columns")
            pcoma = cols[4] if len(cols) == 5 else ""
            entries.append(ManifestEntry(cols[0], int(cols[1]), int(cols[2]), cols[3], pcoma))
        return cls(entries=entries, generator_hash=generator_hash, root=path.parent)


def generator_hash(spec_template: PhantomSpec, n_per_class: int, base_seed: int, train_fraction: float) -> str:
    payload = {
        "spec": {k: v for k, v in asdict(spec_template).items() if k not in ("class_label", "seed")},
        "n_per_class": n_per_class,
        "base_seed": base_seed,
        "train_fraction": train_fraction,
    }
    blob = json.dumps(payload, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def n_train(n_per_class: int, train_fraction: float = 0.8) -> int:
    return max(1, int(n_per_class * train_fraction))


def generate_dataset(
    out_dir,
    n_per_class: int,
    spec_template: PhantomSpec = PhantomSpec(),
    base_seed: int = 0,
    train_fraction: float = 0.8,
) -> DatasetManifest:
    """Write ``3 * n_per_class`` phantom volumes plus ``manifest.tsv`` to ``out_dir``.

    Entry ``i`` (classes in order 1, 2, 3) gets seed ``base_seed + i``; within
    each class the first ``int(train_fraction * n)`` entries form the train split.
    """
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    spec_template.validate()
    out = Path(out_dir)
    try:
        (out / "volumes").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    k_train = n_train(n_per_class, train_fraction)
    entries = []
    index = 0
    for cls in CowClass:
        for j in range(n_per_class):
            seed = base_seed + index
            vol = generate_phantom(replace(spec_template, class_label=int(cls), seed=seed))
            rel = f"volumes/c{int(cls)}_{seed:06d}.vol"
            write_volume(out / rel, vol.voxels)
            entries.append(ManifestEntry(rel, int(cls), seed, "train" if j < k_train else "val", vol.pcoma))
            index += 1
    manifest = DatasetManifest(
        entries, generator_hash(spec_template, n_per_class, base_seed, train_fraction), root=out
    )
    manifest.write()
    return manifest
