"""Ray-driven x-ray projector for parallel- and fan-beam 2D geometries.

Each ray is sampled every half pixel and the image is read with bilinear
interpolation (Joseph-style). Point sampling at unit detector spacing
does not conserve a pixel's mass from view to view (up to ~9% at 45
degrees), so each pixel's per-view footprint is rescaled to the exact ray
density through that pixel. The weights are assembled once per geometry
into a sparse matrix, so ``back_project`` is the exact transpose of
``forward_project``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

STEP = 0.5  # ray sampling step in pixels


@dataclass(frozen=True)
class Geometry:
    beam: str
    angles_deg: tuple
    detector_count: int
    image_side: int
    fan_dso: float | None = None

    def __post_init__(self):
        if self.beam not in ("parallel", "fan"):
            raise ValueError(f"beam must be 'parallel' or 'fan', got {self.beam!r}")
        angles = tuple(float(a) for a in self.angles_deg)
        object.__setattr__(self, "angles_deg", angles)
        if len(angles) < 1:
            raise ValueError("geometry needs at least one view")
        if not all(math.isfinite(a) for a in angles):
            raise ValueError("view angles must be finite")
        if self.detector_count < 1 or self.image_side < 1:
            raise ValueError("detector_count and image_side must be positive")
        if self.beam == "fan":
            dso = 2.0 * self.image_side if self.fan_dso is None else float(self.fan_dso)
            if not dso > self.image_side / math.sqrt(2):
                raise ValueError(f"fan_dso={dso} puts the source inside the image")
            object.__setattr__(self, "fan_dso", dso)
        else:
            object.__setattr__(self, "fan_dso", None)

    @property
    def n_views(self):
        return len(self.angles_deg)

    @property
    def shape(self):
        return (self.n_views, self.detector_count)


@dataclass
class Sinogram:
    data: np.ndarray  # (v, d) or (n, v, d)
    geometry: Geometry

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.shape[-2:] != self.geometry.shape:
            raise ValueError(f"sinogram shape {self.data.shape} does not match geometry {self.geometry.shape}")


def make_limited_geometry(beam, arc_deg, step_deg=1.0, d=28, detector_count=None, fan_dso=None):
    """Views at 0, step, 2*step, ... strictly below ``arc_deg``."""
    if not (arc_deg > 0 and step_deg > 0):
        raise ValueError(f"arc and step must be positive (arc={arc_deg}, step={step_deg})")
    if arc_deg > 180:
        raise ValueError(f"arc must be at most 180 degrees, got {arc_deg}")
    v = int(math.ceil(round(arc_deg / step_deg, 9)))
    angles = tuple(float(k * step_deg) for k in range(v))
    return Geometry(beam, angles, detector_count or d, d, fan_dso)


def _ray_samples(geom: Geometry):
    """Sample points for every ray: arrays (n_rays, K) of x and y in pixel units."""
    d, nd = geom.image_side, geom.detector_count
    theta = np.deg2rad(np.asarray(geom.angles_deg))[:, None]
    s = (np.arange(nd) - (nd - 1) / 2.0)[None, :]
    e = (np.cos(theta), np.sin(theta))      # detector axis
    u = (-np.sin(theta), np.cos(theta))     # central ray direction
    half = d * math.sqrt(2) / 2 + 1.0
    k_half = int(math.ceil(half / STEP))
    t = np.arange(-k_half, k_half + 1) * STEP
    if geom.beam == "parallel":
        ox, oy = s * e[0], s * e[1]
        dx, dy = u[0] + 0 * s, u[1] + 0 * s
        tc = np.zeros_like(ox)
    else:
        dso = geom.fan_dso
        sx, sy = -dso * u[0], -dso * u[1]
        px, py = s * e[0] - sx, s * e[1] - sy
        norm = np.hypot(px, py)
        dx, dy = px / norm, py / norm
        ox, oy = sx + 0 * s, sy + 0 * s
        tc = -(sx * dx + sy * dy)  # closest approach to the rotation centre
    tt = tc[..., None] + t
    x = ox[..., None] + tt * dx[..., None]
    y = oy[..., None] + tt * dy[..., None]
    n_rays = geom.n_views * nd
    return x.reshape(n_rays, -1), y.reshape(n_rays, -1)


@lru_cache(maxsize=32)
def system_matrix(geom: Geometry, normalize=True) -> sp.csr_matrix:
    """Sparse (v*nd, d*d) matrix of half-pixel bilinear sampling weights."""
    d = geom.image_side
    x, y = _ray_samples(geom)
    col = x + (d - 1) / 2.0
    row = (d - 1) / 2.0 - y
    c0 = np.floor(col)
    r0 = np.floor(row)
    fc = col - c0
    fr = row - r0
    c0 = c0.astype(np.int64)
    r0 = r0.astype(np.int64)
    ray = np.broadcast_to(np.arange(x.shape[0])[:, None], x.shape)
    rows, cols, vals = [], [], []
    for dr, dc, w in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                      (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        rr, cc = r0 + dr, c0 + dc
        ok = (rr >= 0) & (rr < d) & (cc >= 0) & (cc < d) & (w > 0)
        rows.append(ray[ok])
        cols.append(rr[ok] * d + cc[ok])
        vals.append(STEP * w[ok])
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(x.shape[0], d * d),
    ).tocsr()
    mat.sum_duplicates()
    if normalize:
        _normalize_footprints(mat, geom)
    return mat


def footprint_targets(geom: Geometry):
    """Exact per-view mass of each pixel and whether its footprint is fully seen.

    Returns ``(target, covered)``, both shaped (v, d*d). ``target`` is the
    number of rays per unit width crossing the pixel centre (1 for parallel
    beam).
    """
    d, nd = geom.image_side, geom.detector_count
    theta = np.deg2rad(np.asarray(geom.angles_deg))[:, None]
    c = np.arange(d) - (d - 1) / 2.0
    px = np.tile(c, d)[None, :]
    py = np.repeat(-c, d)[None, :]
    pe = px * np.cos(theta) + py * np.sin(theta)
    pu = -px * np.sin(theta) + py * np.cos(theta)
    limit = (nd - 1) / 2.0
    if geom.beam == "parallel":
        target = np.ones_like(pe)
        covered = np.abs(pe) + 1.5 <= limit
    else:
        dso = geom.fan_dso
        depth = dso + pu                      # along the central ray
        mag = dso / depth
        s_det = pe * mag
        cos_g = depth / np.hypot(depth, pe)   # obliquity of the ray through the pixel
        dist = np.hypot(depth, pe)
        target = dso / (dist * cos_g**2)
        covered = np.abs(s_det) + 1.5 * mag <= limit
    return target, covered


def _normalize_footprints(mat, geom):
    nd = geom.detector_count
    view_of_row = np.repeat(np.arange(geom.n_views), nd)
    row_of_entry = np.repeat(np.arange(mat.shape[0]), np.diff(mat.indptr))
    views = view_of_row[row_of_entry]
    mass = np.zeros((geom.n_views, mat.shape[1]))
    np.add.at(mass, (views, mat.indices), mat.data)
    target, covered = footprint_targets(geom)
    scale = np.ones_like(mass)
    ok = covered & (mass > 0)
    scale[ok] = target[ok] / mass[ok]
    mat.data *= scale[views, mat.indices]


def project_array(x, geom: Geometry):
    """Forward-project a (d, d) image or an (n, d, d) stack."""
    x = np.asarray(x, dtype=np.float64)
    d = geom.image_side
    if x.shape[-2:] != (d, d) or x.ndim not in (2, 3):
        raise ValueError(f"image shape {x.shape} does not match geometry image side {d}")
    A = system_matrix(geom)
    flat = x.reshape(-1, d * d)
    y = (A @ flat.T).T
    return y.reshape(x.shape[:-2] + geom.shape)


def backproject_array(y, geom: Geometry):
    """Adjoint of :func:`project_array`."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-2:] != geom.shape or y.ndim not in (2, 3):
        raise ValueError(f"sinogram shape {y.shape} does not match geometry {geom.shape}")
    d = geom.image_side
    A = system_matrix(geom)
    flat = y.reshape(-1, geom.n_views * geom.detector_count)
    x = (A.T @ flat.T).T
    return x.reshape(y.shape[:-2] + (d, d))


def forward_project(image, geom: Geometry) -> Sinogram:
    return Sinogram(project_array(image, geom), geom)


def back_project(sino: Sinogram):
    return backproject_array(sino.data, sino.geometry)
