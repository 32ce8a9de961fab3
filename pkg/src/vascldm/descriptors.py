"""Hu and Zernike shape moments and the per-class shape condition vector."""
from __future__ import annotations

from dataclasses import dataclass
from math import factorial

import numpy as np

from .phantom import CowClass, DatasetManifest

HU_LEN = 7
DEFAULT_MAX_ORDER = 8


class ZeroMassError(ValueError):
    """The image has no mass, so its centroid is undefined."""


def _as_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2D image, got shape {img.shape}")
    return img


def _centroid(img: np.ndarray) -> tuple[float, float, float]:
    m00 = img.sum()
    if not m00 > 0:
        raise ZeroMassError("image has zero total mass")
    ys, xs = np.indices(img.shape, dtype=np.float64)
    return m00, (xs * img).sum() / m00, (ys * img).sum() / m00


def central_moment(img, p: int, q: int) -> float:
    """mu_pq = sum (x - xbar)^p (y - ybar)^q I(x, y); x is the column index."""
    if p < 0 or q < 0:
        raise ValueError("moment orders must be >= 0")
    img = _as_image(img)
    _, xbar, ybar = _centroid(img)
    ys, xs = np.indices(img.shape, dtype=np.float64)
    return float(((xs - xbar) ** p * (ys - ybar) ** q * img).sum())


def normalized_moments(img, max_order: int = 3) -> dict[tuple[int, int], float]:
    img = _as_image(img)
    m00, xbar, ybar = _centroid(img)
    ys, xs = np.indices(img.shape, dtype=np.float64)
    dx, dy = xs - xbar, ys - ybar
    eta = {}
    for p in range(max_order + 1):
        for q in range(max_order + 1 - p):
            if p + q < 2:
                continue
            mu = (dx**p * dy**q * img).sum()
            eta[p, q] = mu / m00 ** (1 + (p + q) / 2)
    return eta


def hu_moments(img) -> np.ndarray:
    """The seven Hu invariants of the normalized central moments."""
    n = normalized_moments(img, 3)
    n20, n02, n11 = n[2, 0], n[0, 2], n[1, 1]
    n30, n03, n21, n12 = n[3, 0], n[0, 3], n[2, 1], n[1, 2]
    a, b = n30 + n12, n21 + n03
    return np.array(
        [
            n20 + n02,
            (n20 - n02) ** 2 + 4 * n11**2,
            (n30 - 3 * n12) ** 2 + (3 * n21 - n03) ** 2,
            a**2 + b**2,
            (n30 - 3 * n12) * a * (a**2 - 3 * b**2) + (3 * n21 - n03) * b * (3 * a**2 - b**2),
            (n20 - n02) * (a**2 - b**2) + 4 * n11 * a * b,
            (3 * n21 - n03) * a * (a**2 - 3 * b**2) - (n30 - 3 * n12) * b * (3 * a**2 - b**2),
        ]
    )


def zernike_indices(max_order: int) -> list[tuple[int, int]]:
    """(n, m) pairs with m >= 0 and n - m even, ordered by n then m."""
    return [(n, m) for n in range(max_order + 1) for m in range(n % 2, n + 1, 2)]


def zernike_radial(n: int, m: int, rho: np.ndarray) -> np.ndarray:
    m = abs(m)
    if (n - m) % 2:
        return np.zeros_like(rho)
    out = np.zeros_like(rho)
    for k in range((n - m) // 2 + 1):
        c = (-1) ** k * factorial(n - k) / (
            factorial(k) * factorial((n + m) // 2 - k) * factorial((n - m) // 2 - k)
        )
        out = out + c * rho ** (n - 2 * k)
    return out


def zernike_basis(n: int, m: int, rho: np.ndarray, theta: np.ndarray) -> np.ndarray:
    return zernike_radial(n, m, rho) * np.exp(1j * m * theta)


def unit_disk_coords(img) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """Polar coordinates of each pixel on the centroid-centred unit disk.

    The radius is the largest centroid-to-foreground-pixel distance. Returns
    (rho, theta, inside_mask, radius).
    """
    img = _as_image(img)
    _, xbar, ybar = _centroid(img)
    ys, xs = np.indices(img.shape, dtype=np.float64)
    dx, dy = xs - xbar, ys - ybar
    r = np.hypot(dx, dy)
    radius = r[img > 0].max()
    if radius == 0:
        # single-pixel image: the disk degenerates to that pixel
        radius = 1.0
    rho = r / radius
    return rho, np.arctan2(dy, dx), rho <= 1.0 + 1e-12, radius


def zernike_complex(img, max_order: int = DEFAULT_MAX_ORDER) -> dict[tuple[int, int], complex]:
    if max_order < 0:
        raise ValueError("max_order must be >= 0")
    img = _as_image(img)
    rho, theta, inside, radius = unit_disk_coords(img)
    vals, rho, theta = img[inside], rho[inside], theta[inside]
    area = 1.0 / radius**2
    out = {}
    for n, m in zernike_indices(max_order):
        v = zernike_basis(n, m, rho, theta)
        out[n, m] = (n + 1) / np.pi * np.sum(vals * np.conj(v)) * area
    return out


def zernike_moments(img, max_order: int = DEFAULT_MAX_ORDER) -> np.ndarray:
    """|A_nm| for every (n, m) of :func:`zernike_indices`."""
    return np.array([abs(a) for a in zernike_complex(img, max_order).values()])


def zernike_reconstruct(img, max_order: int) -> tuple[np.ndarray, np.ndarray]:
    """Truncated Zernike expansion of ``img``; returns (reconstruction, disk mask)."""
    img = _as_image(img)
    moments = zernike_complex(img, max_order)
    rho, theta, inside, _ = unit_disk_coords(img)
    rec = np.zeros(img.shape)
    for (n, m), a in moments.items():
        term = (a * zernike_basis(n, m, rho, theta)).real
        rec += term if m == 0 else 2 * term
    return np.where(inside, rec, 0.0), inside


def compress_hu(phi: np.ndarray) -> np.ndarray:
    """sign(phi) * log10(1 + |phi| * 1e12) / 12; keeps Hu values on an O(1) scale."""
    phi = np.asarray(phi, dtype=np.float64)
    return np.sign(phi) * np.log10(1.0 + np.abs(phi) * 1e12) / 12.0


def image_descriptor(img, max_order: int = DEFAULT_MAX_ORDER) -> np.ndarray:
    return np.concatenate([hu_moments(img), zernike_moments(img, max_order)])


@dataclass
class ShapeConditionVector:
    class_label: int
    values: np.ndarray  # [Hu phi1..phi7 || Zernike magnitudes], raw
    max_order: int = DEFAULT_MAX_ORDER


@dataclass
class ShapeConditions:
    """The three class vectors plus the standardization statistics across them."""

    vectors: dict[int, ShapeConditionVector]
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_vectors(cls, vectors: dict[int, ShapeConditionVector]) -> "ShapeConditions":
        lengths = {len(v.values) for v in vectors.values()}
        if len(lengths) != 1:
            raise ValueError(f"shape vectors differ in length: {sorted(lengths)}")
        feats = np.stack([_scaled(v.values) for v in vectors.values()])
        std = feats.std(axis=0)
        return cls(vectors, feats.mean(axis=0), np.where(std > 0, std, 1.0))

    def standardized(self, class_label: int) -> np.ndarray:
        return (_scaled(self.vectors[int(class_label)].values) - self.mean) / self.std

    @property
    def length(self) -> int:
        return len(self.mean)


def _scaled(values: np.ndarray) -> np.ndarray:
    return np.concatenate([compress_hu(values[:HU_LEN]), values[HU_LEN:]])


def build_shape_condition(
    manifest: DatasetManifest,
    class_label: int,
    max_order: int = DEFAULT_MAX_ORDER,
    split: str = "train",
) -> ShapeConditionVector:
    """Element-wise mean of [Hu || Zernike] over the MIPs of one class's images."""
    entries = manifest.select(split, int(class_label))
    if not entries:
        raise ValueError(f"class {int(class_label)} has no {split} images")
    descs = [image_descriptor(img, max_order) for img in manifest.load_mips(entries)]
    values = np.mean(descs, axis=0)
    if not np.all(np.isfinite(values)):
        raise ValueError(f"non-finite shape descriptor for class {int(class_label)}")
    return ShapeConditionVector(int(class_label), values, max_order)


def build_shape_conditions(
    manifest: DatasetManifest, max_order: int = DEFAULT_MAX_ORDER, split: str = "train"
) -> ShapeConditions:
    vectors = {int(c): build_shape_condition(manifest, c, max_order, split) for c in CowClass}
    return ShapeConditions.from_vectors(vectors)
