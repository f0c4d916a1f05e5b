"""Procedural vertebra and spine phantoms.

A vertebra is an ellipsoidal body plus a cylindrical posterior process in a
64^3 patch with the body centre on voxel (32, 32, 32). Spines stack these
patches along +z with a fixed gap and displace them along y on a smooth
curve. Parameter defaults are illustrative, not clinical statistics.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import LABEL_MAX, LABEL_MIN, Centroid, Volume, read_volume, write_volume

PATCH = 64
BODY_DENSITY = 1.0
SOFT_TISSUE_DENSITY = 0.2
RADIUS_JITTER = 0.02  # relative, per axis; kept below one index of growth
MANIFEST_NAME = "manifest.tsv"
MANIFEST_FIELDS = ["sample", "split", "path", "label", "x_mm", "y_mm", "z_mm"]


@dataclass(frozen=True)
class PhantomParams:
    body_radii_mm: tuple = (14.0, 11.0, 9.0)
    process_length_mm: float = 13.0
    process_radius_mm: float = 3.0
    size_growth_per_index: float = 0.6
    rotation_deg: tuple = (0.0, 0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        radii = tuple(float(r) for r in self.body_radii_mm)
        if len(radii) != 3 or min(radii) <= 0:
            raise ValueError(f"body radii must be 3 positive values, got {self.body_radii_mm}")
        if self.process_length_mm <= 0 or self.process_radius_mm <= 0:
            raise ValueError("process length and radius must be positive")
        if self.size_growth_per_index < 0:
            raise ValueError("size_growth_per_index must be non-negative")
        rot = tuple(float(r) for r in self.rotation_deg)
        if len(rot) != 3 or max(abs(r) for r in rot) > 45.0:
            raise ValueError(f"rotations must lie in [-45, 45] degrees, got {self.rotation_deg}")
        object.__setattr__(self, "body_radii_mm", radii)
        object.__setattr__(self, "rotation_deg", rot)


@dataclass(eq=False)
class SpinePhantom:
    labels: Volume
    density: Volume
    centroids: list
    body: Volume = None  # vertebral-body-only labels, used for B2V annotations
    curvature: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def vertebra_labels(self):
        return [c.label for c in self.centroids]

    def centroid(self, label):
        for c in self.centroids:
            if c.label == label:
                return c
        raise KeyError(f"no vertebra with label {label}")


def _check_label(label):
    if not LABEL_MIN <= int(label) <= LABEL_MAX:
        raise ValueError(f"label {label} outside [{LABEL_MIN}, {LABEL_MAX}] (T1..L5)")


def _rotation(deg):
    ax, ay, az = np.deg2rad(deg)
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def vertebra_parts(label, params, spacing_mm=1.0, size=PATCH):
    """Boolean (body, process) masks of a ``size``^3 patch centred on voxel size//2."""
    _check_label(label)
    c = size // 2
    idx = (np.arange(size) - c) * float(spacing_mm)
    gx, gy, gz = np.meshgrid(idx, idx, idx, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1)
    # body-frame coordinates: q = R^T r
    q = pts @ _rotation(params.rotation_deg)
    radii = np.asarray(params.body_radii_mm) + params.size_growth_per_index * (int(label) - LABEL_MIN)
    body = ((q / radii) ** 2).sum(axis=-1) <= 1.0
    ry = radii[1]
    # process leaves the body posteriorly (-y), starting inside it so the set stays connected
    along = -q[..., 1]
    process = (
        (along >= 0.5 * ry)
        & (along <= ry + params.process_length_mm)
        & (q[..., 0] ** 2 + q[..., 2] ** 2 <= params.process_radius_mm**2)
    )
    return body, process & ~body


def make_vertebra(label, params=None, spacing_mm=1.0):
    """64^3 uint8 patch holding ``label`` on the vertebra voxels."""
    params = params or PhantomParams()
    body, process = vertebra_parts(label, params, spacing_mm)
    data = np.where(body | process, np.uint8(label), np.uint8(0)).astype(np.uint8)
    origin = (-(PATCH // 2) * float(spacing_mm),) * 3
    return Volume(data, (spacing_mm,) * 3, origin)


def _shift(mask, off):
    """Move a boolean mask by whole voxels; voxels leaving the array are dropped."""
    out = np.zeros_like(mask)
    src = tuple(slice(max(0, -o), n - max(0, o)) for o, n in zip(off, mask.shape))
    dst = tuple(slice(max(0, o), n - max(0, -o)) for o, n in zip(off, mask.shape))
    out[dst] = mask[src]
    return out


def _spine_curve(t, curvature):
    return curvature * np.sin(np.pi * t)


def make_spine(
    n_vertebrae,
    curvature=0.0,
    gap_mm=4.0,
    seed=0,
    first_label=None,
    canvas_xy=128,
    spacing_mm=1.0,
    params=None,
    jitter=True,
    margin_z=8,
):
    """Stack ``n_vertebrae`` vertebra patches along z.

    Patch pitch along z is ``64 + gap`` voxels; vertebra ``k`` is displaced
    along y by ``curvature * sin(pi * k / (n - 1))`` mm and tilted about x to
    follow the curve.
    """
    if not 2 <= int(n_vertebrae) <= LABEL_MAX - LABEL_MIN + 1:
        raise ValueError(f"n_vertebrae must be in [2, 17], got {n_vertebrae}")
    if gap_mm <= 0:
        raise ValueError("gap_mm must be positive")
    n = int(n_vertebrae)
    rng = np.random.default_rng(seed)
    base = params or PhantomParams()
    if first_label is None:
        first_label = int(rng.integers(LABEL_MIN, LABEL_MAX - n + 2))
    if first_label < LABEL_MIN or first_label + n - 1 > LABEL_MAX:
        raise ValueError(f"labels {first_label}..{first_label + n - 1} leave [8, 24]")

    sp = float(spacing_mm)
    gap = int(round(gap_mm / sp))
    pitch = PATCH + gap
    nx = ny = int(canvas_xy)
    nz = n * PATCH + (n - 1) * gap + 2 * margin_z
    t = np.arange(n) / (n - 1)
    disp = np.round(_spine_curve(t, curvature) / sp).astype(int)
    cx, cy0 = nx // 2, ny // 2
    cy = cy0 + disp - int(round(disp.mean()))
    if cy.min() - PATCH // 2 < 0 or cy.max() + PATCH // 2 > ny or nx < PATCH:
        raise ValueError(f"curvature {curvature} mm does not fit the {nx}x{ny} canvas")
    slope = np.gradient(_spine_curve(t, curvature), t) / ((n - 1) * pitch * sp)
    tilt = np.degrees(np.arctan(slope))

    labels = np.zeros((nx, ny, nz), dtype=np.uint8)
    body_lab = np.zeros_like(labels)
    origin = tuple(-(m - 1) / 2 * sp for m in (nx, ny, nz))
    centroids, vparams = [], []
    for k in range(n):
        lab = first_label + k
        rot = np.array([tilt[k], 0.0, 0.0])
        radii = np.asarray(base.body_radii_mm)
        if jitter:
            rot = rot + rng.uniform(-5, 5, size=3)
            radii = radii * rng.uniform(1 - RADIUS_JITTER, 1 + RADIUS_JITTER, size=3)
        p = replace(base, body_radii_mm=tuple(radii), rotation_deg=tuple(np.clip(rot, -45, 45)), seed=int(seed))
        vparams.append(p)
        body, proc = vertebra_parts(lab, p, sp)
        # whole-voxel shift so the vertebra's own centre of mass rounds to the patch centre
        off = np.floor(np.argwhere(body | proc).mean(axis=0) + 0.5).astype(int) - PATCH // 2
        body, proc = _shift(body, -off), _shift(proc, -off)
        cz = margin_z + PATCH // 2 + k * pitch
        c = np.array([cx, cy[k], cz])
        lo = c - PATCH // 2
        sl = tuple(slice(a, a + PATCH) for a in lo)
        labels[sl][body | proc] = lab
        body_lab[sl][body] = lab
        centroids.append(Centroid(tuple(np.asarray(origin) + c * sp), lab))

    # torso: soft tissue inside an ellipsoid spanning the canvas
    ix = (np.arange(nx) - (nx - 1) / 2) / (nx / 2 - 1)
    iy = (np.arange(ny) - (ny - 1) / 2) / (ny / 2 - 1)
    iz = (np.arange(nz) - (nz - 1) / 2) / (0.75 * nz)
    r2 = ix[:, None, None] ** 2 + iy[None, :, None] ** 2 + iz[None, None, :] ** 2
    density = np.where(r2 <= 1.0, np.float32(SOFT_TISSUE_DENSITY), np.float32(0.0)).astype(np.float32)
    density[labels > 0] = BODY_DENSITY

    vox = (sp,) * 3
    return SpinePhantom(
        labels=Volume(labels, vox, origin),
        density=Volume(density, vox, origin),
        centroids=centroids,
        body=Volume(body_lab, vox, origin),
        curvature=float(curvature),
        meta={"seed": int(seed), "gap_mm": float(gap * sp), "first_label": int(first_label)},
    )


def dataset(n_samples, seed=0, n_vertebrae=(2, 5), curvature_mm=(-12.0, 12.0), **spine_kw):
    """Deterministic 5:1 train/validation split of random spines.

    ``n_vertebrae`` and ``curvature_mm`` are an inclusive integer range and
    a uniform range; pass equal bounds to fix them.
    """
    if n_samples < 6:
        raise ValueError("need at least 6 samples for a 5:1 split")
    spines = []
    for child in np.random.SeedSequence(seed).spawn(n_samples):
        rng = np.random.default_rng(child)
        nv = int(rng.integers(n_vertebrae[0], n_vertebrae[1] + 1))
        curv = float(rng.uniform(*curvature_mm))
        s = int(rng.integers(0, 2**31 - 1))
        spines.append(make_spine(nv, curvature=curv, seed=s, **spine_kw))
    tr, va = split_indices(n_samples, seed)
    return [spines[i] for i in tr], [spines[i] for i in va]


def split_indices(n_samples, seed=0):
    """Indices (train, val) of a 5:1 split; val gets floor(n / 6) samples."""
    order = np.random.default_rng([int(seed), 5, 1]).permutation(n_samples)
    val = sorted(order[: n_samples // 6].tolist())
    return [i for i in range(n_samples) if i not in val], val


# ---------------------------------------------------------------------------
# persistence

def save_phantom(ph, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_volume(ph.labels, d / "labels")
    write_volume(ph.density, d / "density")
    if ph.body is not None:
        write_volume(ph.body, d / "body")
    with open(d / "centroids.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "x_mm", "y_mm", "z_mm"])
        for c in ph.centroids:
            w.writerow([c.label, *(repr(v) for v in c.position_mm)])
    return d


def load_phantom(directory):
    d = Path(directory)
    labels = read_volume(d / "labels.vhdr")
    density = read_volume(d / "density.vhdr")
    body = read_volume(d / "body.vhdr") if (d / "body.vhdr").exists() else None
    with open(d / "centroids.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    cents = [Centroid((float(r["x_mm"]), float(r["y_mm"]), float(r["z_mm"])), int(r["label"])) for r in rows]
    return SpinePhantom(labels, density, cents, body)


def write_phantom_set(out_dir, train, val=()):
    """Write ``s<k>/`` directories plus a manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for k, (ph, split) in enumerate([(p, "train") for p in train] + [(p, "val") for p in val]):
        name = f"s{k}"
        save_phantom(ph, out / name)
        for c in ph.centroids:
            rows.append([name, split, name, c.label, *(repr(v) for v in c.position_mm)])
    with open(out / MANIFEST_NAME, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(MANIFEST_FIELDS)
        w.writerows(rows)
    return out / MANIFEST_NAME


def read_manifest(root):
    """Return {sample: {"split", "path", "labels"}} in manifest order."""
    root = Path(root)
    path = root / MANIFEST_NAME if root.is_dir() else root
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    out = {}
    for r in rows:
        e = out.setdefault(r["sample"], {"split": r["split"], "path": path.parent / r["path"], "labels": []})
        e["labels"].append(int(r["label"]))
    return out
