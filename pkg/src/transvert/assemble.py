"""3D centroids from two orthogonal views, and stacking vertebrae into a spine canvas."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .drr import CORONAL, SAGITTAL, round_half_up
from .geometry import LABEL_MAX, LABEL_MIN, Volume, world_to_voxel

Z_TOLERANCE_MM = 5.0


class AssemblyWarning(UserWarning):
    pass


def fuse_centroids(c_sag, c_cor, g_sag, g_cor, z_tol_mm=Z_TOLERANCE_MM):
    """World position (mm) of a point seen at detector mm ``c_sag`` and ``c_cor``.

    The sagittal view fixes y and z up to the point's depth along x, the
    coronal view fixes x up to its depth along y; solving both rays together
    undoes the magnification exactly (for points on the isocentre planes this
    is plain division by sdd/sod). The sagittal z is returned; a coronal z
    more than ``z_tol_mm`` away raises an :class:`AssemblyWarning`.
    """
    if g_sag.view != SAGITTAL or g_cor.view != CORONAL:
        raise ValueError("expected a sagittal and a coronal geometry")
    iso = np.asarray(g_sag.isocenter_mm)
    if not np.allclose(iso, g_cor.isocenter_mm):
        raise ValueError("geometries must share the isocentre")
    u_s, v_s = (float(t) for t in c_sag)
    u_c, v_c = (float(t) for t in c_cor)
    a_s, a_c = u_s / g_sag.sdd_mm, u_c / g_cor.sdd_mm
    # y = a_s (sod_s + x),  x = a_c (sod_c + y)   (coordinates relative to iso)
    det = 1.0 - a_s * a_c
    if abs(det) < 1e-12:
        raise ValueError("rays are parallel; cannot triangulate")
    x = (a_c * g_cor.sod_mm + a_c * a_s * g_sag.sod_mm) / det
    y = (a_s * g_sag.sod_mm + a_s * a_c * g_cor.sod_mm) / det
    z = v_s * (g_sag.sod_mm + x) / g_sag.sdd_mm
    z_cor = v_c * (g_cor.sod_mm + y) / g_cor.sdd_mm
    if abs(z - z_cor) > z_tol_mm:
        warnings.warn(
            f"views disagree on z by {abs(z - z_cor):.2f} mm; keeping the sagittal value", AssemblyWarning, stacklevel=2
        )
    return iso + np.array([x, y, z])


@dataclass
class SpineModel:
    canvas: Volume
    placed: list = field(default_factory=list)  # (label, centroid_mm)


def stack_spine(preds, centroids, canvas_shape, spacing=(1.0, 1.0, 1.0), origin_mm=(0.0, 0.0, 0.0)):
    """Place each ``(mask, label)`` so its foreground centroid lands on the matching 3D centroid.

    Placement snaps to whole voxels. A voxel claimed twice goes to the label
    whose centroid is closer to it (ties to the lower label). Parts falling
    outside the canvas are dropped with an :class:`AssemblyWarning`.
    """
    preds = list(preds)
    centroids = [np.asarray(c, dtype=np.float64) for c in centroids]
    if len(preds) != len(centroids):
        raise ValueError(f"{len(preds)} predictions for {len(centroids)} centroids")
    labels = [int(lab) for _, lab in preds]
    if len(set(labels)) != len(labels):
        raise ValueError("labels must be unique")
    for lab in labels:
        if not LABEL_MIN <= lab <= LABEL_MAX:
            raise ValueError(f"label {lab} outside [8, 24]")
    shape = tuple(int(n) for n in canvas_shape)
    ref = Volume(np.zeros((1, 1, 1), np.uint8), spacing, origin_mm)
    sp = np.asarray(ref.spacing_mm)
    canvas = np.zeros(shape, np.uint8)
    claim = np.full(shape, np.inf)
    placed = []
    for (mask, lab), c in zip(preds, centroids):
        fg = np.argwhere(np.asarray(mask.data if isinstance(mask, Volume) else mask) != 0)
        placed.append((lab, tuple(float(t) for t in c)))
        if len(fg) == 0:
            warnings.warn(f"prediction for label {lab} is empty", AssemblyWarning, stacklevel=2)
            continue
        shift = round_half_up(world_to_voxel(ref, c) - fg.mean(axis=0))
        idx = fg + shift
        inside = np.all((idx >= 0) & (idx < shape), axis=1)
        if not inside.all():
            warnings.warn(f"label {lab}: {int((~inside).sum())} voxels fall outside the canvas", AssemblyWarning, stacklevel=2)
            idx = idx[inside]
        ix = tuple(idx.T)
        d = np.sqrt((((idx * sp + ref.origin_mm) - c) ** 2).sum(axis=1))
        old = canvas[ix]
        win = (d < claim[ix]) | ((d == claim[ix]) & ((old == 0) | (lab < old)))
        sel = tuple(a[win] for a in ix)
        canvas[sel] = lab
        claim[sel] = d[win]
    return SpineModel(Volume(canvas, tuple(sp), ref.origin_mm), placed)


def read_centroid_csv(path):
    """Rows ``label,x_mm,y_mm,z_mm`` -> {label: (x, y, z)}."""
    out = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            out[int(r["label"])] = (float(r["x_mm"]), float(r["y_mm"]), float(r["z_mm"]))
    return out


def write_centroid_csv(path, placed):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "x_mm", "y_mm", "z_mm"])
        for lab, c in placed:
            w.writerow([lab, *(repr(float(t)) for t in c)])
    return path
