"""Cone-beam DRR rendering, patch extraction, VOI annotations and z-scoring."""
from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import AXES, Image2D, Volume, world_to_voxel

SAGITTAL = "sagittal"
CORONAL = "coronal"
_VIEW_AXIS = {SAGITTAL: 0, CORONAL: 1}
RAY_CHUNK = 2048


class AnnotationType(str, enum.Enum):
    NONE = "none"
    C2V = "c2v"  # centroid disc
    B2V = "b2v"  # vertebral-body mask
    V2V = "v2v"  # full-vertebra mask

    @property
    def table_row(self):
        return {"none": "No annotation", "c2v": "C2V", "b2v": "B2V", "v2v": "V2V"}[self.value]


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class ConeBeamGeometry:
    """Source and flat detector for one view, in world millimetres.

    The source sits ``sod_mm`` before the isocentre along the view's
    integration axis and the detector plane ``sdd_mm`` after the source.
    Detector coordinates (u, v) are millimetres from the detector centre;
    u follows world y (sagittal) or x (coronal), v follows world z.
    """

    view: str = SAGITTAL
    sdd_mm: float = 1800.0
    sod_mm: float = 1500.0
    detector_spacing_mm: tuple = (1.2, 1.2)
    detector_shape: tuple = (128, 128)
    isocenter_mm: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.view not in _VIEW_AXIS:
            raise GeometryError(f"unknown view {self.view!r}")
        if not 0 < self.sod_mm < self.sdd_mm:
            raise GeometryError(f"need 0 < sod ({self.sod_mm}) < sdd ({self.sdd_mm})")
        sp = tuple(float(s) for s in self.detector_spacing_mm)
        shp = tuple(int(n) for n in self.detector_shape)
        if len(sp) != 2 or min(sp) <= 0 or len(shp) != 2 or min(shp) <= 0:
            raise GeometryError("detector spacing/shape must be two positive values")
        object.__setattr__(self, "detector_spacing_mm", sp)
        object.__setattr__(self, "detector_shape", shp)
        object.__setattr__(self, "isocenter_mm", tuple(float(v) for v in self.isocenter_mm))

    @property
    def magnification(self):
        return self.sdd_mm / self.sod_mm

    @property
    def axis(self):
        return _VIEW_AXIS[self.view]

    @property
    def image_axes(self):
        return AXES.image_axes(self.view)

    def basis(self):
        """(beam direction, u direction, v direction) as unit world vectors."""
        e = np.eye(3)
        au, av = self.image_axes
        return e[self.axis], e[au], e[av]

    @property
    def source_mm(self):
        return np.asarray(self.isocenter_mm) - self.sod_mm * self.basis()[0]

    def pixel_to_mm(self, px):
        px = np.asarray(px, dtype=np.float64)
        c = (np.asarray(self.detector_shape) - 1) / 2.0
        return (px - c) * np.asarray(self.detector_spacing_mm)

    def mm_to_pixel(self, uv):
        uv = np.asarray(uv, dtype=np.float64)
        c = (np.asarray(self.detector_shape) - 1) / 2.0
        return uv / np.asarray(self.detector_spacing_mm) + c

    def pixel_world(self, px):
        """World position of detector points given as (..., 2) pixel coordinates."""
        uv = self.pixel_to_mm(px)
        e, au, av = self.basis()
        plane = np.asarray(self.isocenter_mm) + (self.sdd_mm - self.sod_mm) * e
        return plane + uv[..., :1] * au + uv[..., 1:2] * av


def geometry_for(volume, view, isocenter_mm=None, sdd_mm=1800.0, sod_mm=1500.0, detector_spacing_mm=(1.2, 1.2), margin_px=8):
    """Geometry whose detector covers the magnified footprint of ``volume``."""
    ext = np.asarray(volume.shape) * np.asarray(volume.spacing_mm)
    if isocenter_mm is None:
        lo = np.asarray(volume.origin_mm) - 0.5 * np.asarray(volume.spacing_mm)
        isocenter_mm = tuple(lo + ext / 2)
    au, av = AXES.image_axes(view)
    depth = ext[_VIEW_AXIS[view]] / 2
    mag = sdd_mm / (sod_mm - depth)  # near face magnifies most
    shape = tuple(int(math.ceil(ext[a] * mag / s)) + 2 * margin_px for a, s in zip((au, av), detector_spacing_mm))
    return ConeBeamGeometry(view, sdd_mm, sod_mm, detector_spacing_mm, shape, isocenter_mm)


def project_point(g, p):
    """Perspective projection of world point ``p`` to detector mm (u, v)."""
    p = np.asarray(p, dtype=np.float64)
    e, au, av = g.basis()
    rel = p - g.source_mm
    depth = rel @ e
    if np.any(depth <= 0):
        raise GeometryError("point lies at or behind the source")
    t = g.sdd_mm / depth
    iso_rel = p - np.asarray(g.isocenter_mm)
    return np.stack([(iso_rel @ au) * t, (iso_rel @ av) * t], axis=-1)


def _ray_integrals(data, vol_origin, vol_spacing, src_vox, pix_vox, step_mm):
    """Line integrals from ``src_vox`` to each row of ``pix_vox`` (voxel coords)."""
    shape = np.asarray(data.shape, dtype=np.float64)
    d = pix_vox - src_vox  # (R, 3)
    seg_mm = np.linalg.norm(d * vol_spacing, axis=1)
    lo, hi = -0.5, shape - 0.5
    with np.errstate(divide="ignore", invalid="ignore"):
        t_a = (lo - src_vox) / d
        t_b = (hi - src_vox) / d
    t_near = np.where(d != 0, np.minimum(t_a, t_b), -np.inf)
    t_far = np.where(d != 0, np.maximum(t_a, t_b), np.inf)
    # rays parallel to a slab must start inside it
    inside = np.all((d != 0) | ((src_vox >= lo) & (src_vox <= hi)), axis=1)
    t0 = np.clip(t_near.max(axis=1), 0.0, 1.0)
    t1 = np.clip(t_far.min(axis=1), 0.0, 1.0)
    hit = inside & (t1 > t0)
    out = np.zeros(len(d), dtype=np.float64)
    if not hit.any():
        return out
    idx = np.nonzero(hit)[0]
    chord = (t1[idx] - t0[idx]) * seg_mm[idx]
    n = np.maximum(1, np.ceil(chord / step_mm - 1e-9)).astype(int)
    nmax = int(n.max())
    k = np.arange(nmax) + 0.5
    frac = k[None, :] / n[:, None]  # (R, nmax)
    valid = frac < 1.0
    t = t0[idx, None] + frac * (t1[idx] - t0[idx])[:, None]
    pts = src_vox[None, None, :] + t[..., None] * d[idx, None, :]
    vals = ndimage.map_coordinates(
        data, pts[valid].T, order=1, mode="grid-constant", cval=0.0, prefilter=False, output=np.float64
    )
    sums = np.zeros(valid.shape, dtype=np.float64)
    sums[valid] = vals
    out[idx] = sums.sum(axis=1) * (chord / n)
    return out


def render_drr(density, g, window=None, threads=1, step_mm=None):
    """DRR of ``density`` under geometry ``g`` (units of density x mm).

    Each pixel integrates the trilinearly interpolated density along the
    segment from the focal point to the pixel centre, sampled at midpoints
    of equal sub-segments no longer than half the smallest voxel spacing.
    ``window=(i0, j0, ni, nj)`` renders only that block of pixel indices
    (which may extend beyond the nominal detector).
    """
    if not isinstance(g, ConeBeamGeometry):
        raise TypeError("g must be a ConeBeamGeometry")
    data = np.asarray(density.data, dtype=np.float32)
    if not np.all(np.isfinite(data)) or data.min() < 0:
        raise ValueError("density must be finite and non-negative")
    if window is None:
        window = (0, 0) + g.detector_shape
    i0, j0, ni, nj = (int(v) for v in window)
    step = float(step_mm) if step_mm else min(density.spacing_mm) / 2.0
    ii, jj = np.meshgrid(np.arange(i0, i0 + ni), np.arange(j0, j0 + nj), indexing="ij")
    px = np.stack([ii.ravel(), jj.ravel()], axis=1).astype(np.float64)
    pix_vox = world_to_voxel(density, g.pixel_world(px))
    src_vox = world_to_voxel(density, g.source_mm)
    spacing = np.asarray(density.spacing_mm)

    chunks = [slice(s, min(len(px), s + RAY_CHUNK)) for s in range(0, len(px), RAY_CHUNK)]
    out = np.zeros(len(px), dtype=np.float64)

    def work(sl):
        out[sl] = _ray_integrals(data, density.origin_mm, spacing, src_vox, pix_vox[sl], step)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(work, chunks))
    else:
        for sl in chunks:
            work(sl)
    img = out.reshape(ni, nj).astype(np.float32)
    origin = tuple(g.pixel_to_mm((i0, j0)))
    return Image2D(img, g.detector_spacing_mm, origin)


def round_half_up(v):
    return np.floor(np.asarray(v, dtype=np.float64) + 0.5).astype(int)


def patch_window(center_px, size=64):
    """Pixel index window (i0, j0, size, size) of a patch centred on ``center_px``."""
    if size % 2:
        raise ValueError("patch size must be even")
    c = round_half_up(center_px)
    return (int(c[0]) - size // 2, int(c[1]) - size // 2, size, size)


def extract_patch(img, center_px, size=64):
    """``size`` x ``size`` crop centred on the rounded ``center_px``; edges replicate."""
    i0, j0, _, _ = patch_window(center_px, size)
    a = np.asarray(img.data)
    ri = np.clip(np.arange(i0, i0 + size), 0, a.shape[0] - 1)
    rj = np.clip(np.arange(j0, j0 + size), 0, a.shape[1] - 1)
    sp = np.asarray(img.spacing_mm)
    origin = tuple(np.asarray(img.origin_mm) + np.array([i0, j0]) * sp)
    return Image2D(a[np.ix_(ri, rj)], img.spacing_mm, origin)


def make_annotation(t, centroid_px=None, projected_mask=None, size=64):
    """VOI annotation image in {0, 1}.

    ``centroid_px`` is in patch pixel coordinates (C2V); ``projected_mask`` is
    a patch-sized image of the projected vertebra or body (B2V/V2V).
    """
    t = AnnotationType(t)
    if t is AnnotationType.NONE:
        return Image2D(np.zeros((size, size), np.float32))
    if t is AnnotationType.C2V:
        if centroid_px is None:
            raise ValueError("C2V annotation needs a centroid")
        c = round_half_up(centroid_px)
        ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        disc = (ii - c[0]) ** 2 + (jj - c[1]) ** 2 <= 1
        return Image2D(disc.astype(np.float32))
    if projected_mask is None:
        raise ValueError(f"{t.value.upper()} annotation needs a projected mask")
    m = np.asarray(projected_mask.data if isinstance(projected_mask, Image2D) else projected_mask)
    if m.shape != (size, size):
        raise ValueError(f"projected mask must be {size}x{size}, got {m.shape}")
    return Image2D((m > 0).astype(np.float32))


def zscore(img):
    a = np.asarray(img.data, dtype=np.float64)
    if a.size == 0:
        raise ValueError("empty image")
    sd = a.std()
    if sd == 0 or not np.isfinite(sd):
        raise ValueError("constant image cannot be z-scored")
    return img.with_data(((a - a.mean()) / sd).astype(np.float32))


def project_mask(mask_volume, g, window, min_path_mm=0.5):
    """Binary projection: pixels whose ray crosses at least ``min_path_mm`` of the mask."""
    ind = Volume((np.asarray(mask_volume.data) > 0).astype(np.float32), mask_volume.spacing_mm, mask_volume.origin_mm)
    img = render_drr(ind, g, window=window)
    return img.with_data((img.data >= min_path_mm).astype(np.float32))
