"""Training/evaluation samples cut from rendered spine phantoms."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import drr
from .drr import AnnotationType
from .geometry import Centroid, Image2D, Volume, world_to_voxel
from .phantom import PATCH

# targets hold {0, i} with i <= 24; the network regresses values in [0, 1]
LABEL_SCALE = 24.0


@dataclass
class Sample:
    x_s: Image2D
    x_c: Image2D
    y_s: Image2D
    y_c: Image2D
    y: Volume
    label: int
    sample_id: str = ""
    centroid_mm: tuple = (0.0, 0.0, 0.0)
    centroid_px: dict = field(default_factory=dict)  # view -> detector pixel (u, v)

    def inputs(self):
        """(x_s, x_c, y_s, y_c) as 5-D arrays with the collapsed axis singleton."""
        s = lambda im: im.data[None, None, None, :, :]
        c = lambda im: im.data[None, None, :, None, :]
        return s(self.x_s), c(self.x_c), s(self.y_s), c(self.y_c)

    def target(self):
        return (np.asarray(self.y.data, np.float32) / LABEL_SCALE)[None, None]


def crop_volume(v, center_vox, size=PATCH, fill=0):
    """``size``³ block of ``v`` whose voxel ``size//2`` sits on ``center_vox``."""
    c = np.asarray(center_vox, dtype=int)
    lo = c - size // 2
    out = np.full((size,) * 3, fill, dtype=v.data.dtype)
    src = tuple(slice(max(0, l), min(n, l + size)) for l, n in zip(lo, v.shape))
    dst = tuple(slice(s.start - l, s.stop - l) for s, l in zip(src, lo))
    if all(s.stop > s.start for s in src):
        out[dst] = v.data[src]
    origin = np.asarray(v.origin_mm) + lo * np.asarray(v.spacing_mm)
    return Volume(out, v.spacing_mm, tuple(origin))


def centroid_voxel(v, centroid_mm):
    return drr.round_half_up(world_to_voxel(v, centroid_mm))


def spine_geometries(phantom, sdd_mm=1800.0, sod_mm=1500.0, detector_spacing_mm=(1.2, 1.2)):
    return {
        view: drr.geometry_for(phantom.density, view, sdd_mm=sdd_mm, sod_mm=sod_mm, detector_spacing_mm=detector_spacing_mm)
        for view in (drr.SAGITTAL, drr.CORONAL)
    }


def build_samples(phantom, annotation=AnnotationType.C2V, prefix="s", geometries=None, threads=1, drrs=None):
    """One sample per vertebra of ``phantom``.

    Returns ``(samples, geometries, drrs)`` so callers can reuse the full
    renders (reports, assembly).
    """
    annotation = AnnotationType(annotation)
    geoms = geometries or spine_geometries(phantom)
    if drrs is None:
        drrs = {view: drr.render_drr(phantom.density, g, threads=threads) for view, g in geoms.items()}
    out = []
    for c in phantom.centroids:
        label = c.label
        cv = centroid_voxel(phantom.labels, c.position_mm)
        crop = crop_volume(phantom.labels, cv)
        y = crop.with_data(np.where(crop.data == label, label, 0).astype(np.uint8))
        imgs, anns, px = {}, {}, {}
        for view, g in geoms.items():
            p = g.mm_to_pixel(drr.project_point(g, c.position_mm))
            px[view] = tuple(float(v) for v in p)
            imgs[view] = drr.zscore(drr.extract_patch(drrs[view], p))
            win = drr.patch_window(p)
            local = np.asarray(p) - np.asarray(win[:2])
            mask = None
            if annotation is AnnotationType.V2V:
                mask = drr.project_mask(y, g, win)
            elif annotation is AnnotationType.B2V:
                if phantom.body is None:
                    raise ValueError("B2V annotations need the vertebral-body label volume")
                body = crop_volume(phantom.body, cv)
                mask = drr.project_mask(body.with_data((body.data == label).astype(np.uint8)), g, win)
            anns[view] = drr.make_annotation(annotation, local, mask)
        out.append(
            Sample(
                imgs[drr.SAGITTAL], imgs[drr.CORONAL], anns[drr.SAGITTAL], anns[drr.CORONAL], y, label,
                sample_id=f"{prefix}{label}", centroid_mm=c.position_mm, centroid_px=px,
            )
        )
    return out, geoms, drrs


def to_centroids(samples):
    return [Centroid(s.centroid_mm, s.label) for s in samples]
