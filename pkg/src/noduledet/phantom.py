"""Synthetic chest-CT phantoms with known nodule ground truth.

Background is lung-like noise; nodules are solid spheres.  Optional vessels
are capsules running roughly along the axial direction: in a single axial
slice their cross-section looks like a nodule, but in 3D they are tubes,
which gives the false-positive reducer something to learn.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PhantomPackingError
from .records import Annotation
from .volume import CtVolume


@dataclass
class PhantomParams:
    extent: tuple[int, int, int] = (64, 64, 40)  # voxels (x, y, z)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.25)  # mm
    origin: tuple[float, float, float] = (-32.0, -32.0, -25.0)
    sphere_count: int = 3
    diameter_range: tuple[float, float] = (5.0, 9.0)
    contrast: float = 600.0
    background: float = -800.0
    noise_sigma: float = 40.0
    margin: tuple[float, float, float] = (12.0, 12.0, 7.0)  # mm kept clear at each face
    vessel_count: int = 0
    vessel_diameter_range: tuple[float, float] = (4.0, 7.0)
    vessel_length_range: tuple[float, float] = (25.0, 40.0)
    vessel_max_tilt: float = 0.3
    min_gap: float = 3.0  # mm between object surfaces
    max_tries: int = 2000


def _coords(params: PhantomParams):
    nx, ny, nz = params.extent
    sx, sy, sz = params.spacing
    ox, oy, oz = params.origin
    z, y, x = np.meshgrid(
        oz + sz * np.arange(nz), oy + sy * np.arange(ny), ox + sx * np.arange(nx), indexing="ij"
    )
    return x, y, z


def _segment_distance(px, py, pz, a, b):
    ab = b - a
    t = ((px - a[0]) * ab[0] + (py - a[1]) * ab[1] + (pz - a[2]) * ab[2]) / float(ab @ ab)
    t = np.clip(t, 0.0, 1.0)
    return np.sqrt((px - a[0] - t * ab[0]) ** 2 + (py - a[1] - t * ab[1]) ** 2 + (pz - a[2] - t * ab[2]) ** 2)


def _point_segment(p, a, b) -> float:
    ab = b - a
    t = float(np.clip((p - a) @ ab / (ab @ ab), 0.0, 1.0))
    return float(np.linalg.norm(p - a - t * ab))


def _sample_center(rng, lo, hi):
    return lo + rng.random(3) * (hi - lo)


def generate_phantom(seed, params: PhantomParams | None = None, uid: str | None = None):
    """Return ``(CtVolume, annotations)``; deterministic for a given seed."""
    params = params or PhantomParams()
    rng = np.random.default_rng(seed)
    extent_mm = np.asarray(params.spacing) * (np.asarray(params.extent) - 1)
    lo = np.asarray(params.origin) + np.asarray(params.margin)
    hi = np.asarray(params.origin) + extent_mm - np.asarray(params.margin)
    if np.any(hi <= lo):
        raise PhantomPackingError("margins leave no room for objects")

    spheres: list[tuple[np.ndarray, float]] = []
    for _ in range(params.sphere_count):
        for _ in range(params.max_tries):
            d = rng.uniform(*params.diameter_range)
            c = _sample_center(rng, lo, hi)
            if all(np.linalg.norm(c - c2) > d / 2 + d2 / 2 + params.min_gap for c2, d2 in spheres):
                spheres.append((c, d))
                break
        else:
            raise PhantomPackingError(
                f"could not place {params.sphere_count} non-overlapping spheres in {params.max_tries} tries"
            )

    vessels: list[tuple[np.ndarray, np.ndarray, float]] = []
    for _ in range(params.vessel_count):
        for _ in range(params.max_tries):
            d = rng.uniform(*params.vessel_diameter_range)
            mid = _sample_center(rng, lo, hi)
            tilt = rng.uniform(-params.vessel_max_tilt, params.vessel_max_tilt, size=2)
            direction = np.array([tilt[0], tilt[1], 1.0])
            direction /= np.linalg.norm(direction)
            half = rng.uniform(*params.vessel_length_range) / 2
            a, b = mid - half * direction, mid + half * direction
            if all(_point_segment(c, a, b) > dn / 2 + d / 2 + params.min_gap for c, dn in spheres):
                vessels.append((a, b, d))
                break
        else:
            raise PhantomPackingError(f"could not place vessel clear of nodules in {params.max_tries} tries")

    x, y, z = _coords(params)
    soft = min(params.spacing)
    fill = np.zeros(x.shape)
    for c, d in spheres:
        dist = np.sqrt((x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2)
        fill = np.maximum(fill, np.clip((d / 2 - dist) / soft + 0.5, 0.0, 1.0))
    for a, b, d in vessels:
        dist = _segment_distance(x, y, z, a, b)
        fill = np.maximum(fill, np.clip((d / 2 - dist) / soft + 0.5, 0.0, 1.0))

    hu = params.background + params.contrast * fill + rng.normal(0.0, params.noise_sigma, size=x.shape)
    values = np.clip(np.rint(hu), -32768, 32767).astype(np.int16)
    uid = uid or f"phantom-{seed}"
    volume = CtVolume(uid, values, params.spacing, params.origin)
    annotations = [Annotation(uid, float(c[0]), float(c[1]), float(c[2]), float(d)) for c, d in spheres]
    return volume, annotations


def generate_dataset(seed: int, count: int, params: PhantomParams | None = None):
    """``count`` phantoms whose per-scan seeds derive from ``(seed, index)``.

    The first ``k`` scans are the same whatever ``count`` is.
    """
    scans = []
    for i in range(count):
        scans.append(generate_phantom([seed, i], params, uid=f"phantom-{seed}-{i:03d}"))
    return scans
