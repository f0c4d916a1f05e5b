"""Binarization, overlap and distance metrics, and the ablation harness."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .drr import AnnotationType
from .geometry import LABEL_MAX, LABEL_MIN, Volume
from .model import AblationVariant

METRIC_FIELDS = ["sample", "label", "dice", "hausdorff_mm", "chamfer_mm", "mean_pred_label"]
ABLATION_FIELDS = [
    "table", "key", "row", "variant", "annotation", "n", "steps", "dice_mean", "dice_std",
    "hausdorff_mm_mean", "hausdorff_mm_std", "chamfer_mm_mean", "reference_dice_pct", "reference_hausdorff_mm",
]

# Published numbers for context only; phantom runs are not expected to match them.
REFERENCE = {
    ("table1", AblationVariant.SAGITTAL_ONLY.value): (88.40, 7.43),
    ("table1", AblationVariant.NAIVE_OUTER_PRODUCT.value): (92.59, 6.45),
    ("table1", AblationVariant.NO_ATTENTION.value): (94.75, 5.75),
    ("table1", AblationVariant.NO_ADVERSARIAL.value): (95.31, 5.27),
    ("table1", AblationVariant.FULL.value): (95.52, 5.11),
    ("table2", AnnotationType.NONE.value): (76.44, 14.74),
    ("table2", AnnotationType.V2V.value): (96.24, 4.18),
    ("table2", AnnotationType.B2V.value): (95.67, 4.95),
    ("table2", AnnotationType.C2V.value): (95.31, 5.27),
}

# annotation cells train the attention model without the adversarial term
ANNOTATION_CELL_VARIANT = AblationVariant.NO_ADVERSARIAL


def _array(v):
    return np.asarray(v.data if isinstance(v, Volume) else v)


def _spacing(v, spacing):
    if spacing is not None:
        return np.asarray(spacing, dtype=np.float64)
    if isinstance(v, Volume):
        return np.asarray(v.spacing_mm)
    return np.ones(3)


def binarize(pred, label):
    """Foreground where the label-unit prediction exceeds ``label / 2``."""
    if not LABEL_MIN <= int(label) <= LABEL_MAX:
        raise ValueError(f"label {label} outside [8, 24]")
    a = _array(pred).astype(np.float32)
    mask = np.where(a > np.float32(label / 2), label, 0).astype(np.uint8)
    if isinstance(pred, Volume):
        return pred.with_data(mask)
    return Volume(mask)


def dice(a, b):
    x, y = _array(a) != 0, _array(b) != 0
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    na, nb = int(x.sum()), int(y.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(x, y).sum()) / (na + nb)


def pairwise_dist(a, b):
    """Euclidean distances between rows of ``a`` and ``b``; the one formula used everywhere."""
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))


def nearest_distances(src, dst):
    """Exact distance from each row of ``src`` to its nearest row of ``dst``.

    A k-d tree finds a nearest candidate; every point of ``dst`` within a hair
    of that distance is then re-measured with :func:`pairwise_dist`, so the
    result is bitwise what an exhaustive search with that formula returns.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) == 0 or len(dst) == 0:
        raise ValueError("empty point set")
    tree = cKDTree(dst)
    d, _ = tree.query(src, k=1)
    radius = d * (1 + 1e-9) + 1e-9
    out = np.empty(len(src))
    for i, cand in enumerate(tree.query_ball_point(src, radius)):
        out[i] = pairwise_dist(src[i : i + 1], dst[cand]).min()
    return out


def _voxel_points(mask, spacing):
    return np.argwhere(mask).astype(np.float64) * spacing


def directed_hausdorff_mm(a, b, spacing=None):
    x, y = _array(a) != 0, _array(b) != 0
    sp = _spacing(a, spacing)
    if not x.any() or not y.any():
        raise ValueError("Hausdorff distance needs two nonempty sets")
    outside = x & ~y
    if not outside.any():
        return 0.0
    # nearest members of B always lie on B's 6-neighbourhood surface
    return float(nearest_distances(_voxel_points(outside, sp), _voxel_points(_surface(y), sp)).max())


def hausdorff_mm(a, b, spacing=None):
    x, y = _array(a), _array(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    sp = _spacing(a, spacing)
    return max(directed_hausdorff_mm(x, y, sp), directed_hausdorff_mm(y, x, sp))


_SIX = ndimage.generate_binary_structure(3, 1)


def _surface(mask):
    return mask & ~ndimage.binary_erosion(mask, structure=_SIX, border_value=0)


def surface_voxels(mask):
    """Foreground voxels with at least one background 6-neighbour (outside counts as background)."""
    return _surface(_array(mask) != 0)


def surface_points(mask, n=2048, seed=0, spacing=None):
    """``n`` surface-voxel centres in mm (drawn with replacement only if there are fewer than ``n``)."""
    surf = surface_voxels(mask)
    if not surf.any():
        raise ValueError("mask is empty")
    pts = np.argwhere(surf).astype(np.float64)
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(pts), size=n, replace=len(pts) < n)
    sp = _spacing(mask, spacing)
    origin = np.asarray(mask.origin_mm) if isinstance(mask, Volume) else np.zeros(3)
    return origin + pts[pick] * sp


@dataclass
class ChamferResult:
    value: float
    a_to_b: np.ndarray  # per-point distances, for the colour-coded map
    b_to_a: np.ndarray

    def __float__(self):
        return self.value


def chamfer(pc_a, pc_b):
    d_ab = nearest_distances(pc_a, pc_b)
    d_ba = nearest_distances(pc_b, pc_a)
    return ChamferResult(float((d_ab.mean() + d_ba.mean()) / 2), d_ab, d_ba)


def chamfer_mm(pc_a, pc_b):
    return chamfer(pc_a, pc_b).value


def mean_pred_label(pred, truth):
    """Mean label-unit prediction over the true foreground."""
    p, t = _array(pred), _array(truth) != 0
    if not t.any():
        return float("nan")
    return float(p[t].astype(np.float64).mean())


def evaluate_prediction(pred, truth, label, sample="", n_points=2048, seed=0):
    """Metrics row for one vertebra; ``pred`` is in label units, ``truth`` holds {0, label}."""
    spacing = _spacing(truth, None)
    mask = binarize(pred, label).data
    t = _array(truth)
    row = {
        "sample": sample,
        "label": int(label),
        "dice": dice(mask, t),
        "hausdorff_mm": float("nan"),
        "chamfer_mm": float("nan"),
        "mean_pred_label": mean_pred_label(pred, t),
    }
    if mask.any() and t.any():
        row["hausdorff_mm"] = hausdorff_mm(mask, t, spacing)
        row["chamfer_mm"] = chamfer_mm(
            surface_points(mask, n_points, seed, spacing), surface_points(t, n_points, seed + 1, spacing)
        )
    return row


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)

    def add(self, row):
        missing = [k for k in METRIC_FIELDS if k not in row]
        if missing:
            raise ValueError(f"metrics row lacks {missing}")
        self.rows.append({k: row[k] for k in METRIC_FIELDS})

    def column(self, key):
        return np.array([r[key] for r in self.rows], dtype=np.float64)

    def summary(self):
        """Mean and standard deviation per metric, ignoring undefined (NaN) entries."""
        out = {}
        for k in METRIC_FIELDS[2:]:
            c = self.column(k)
            c = c[np.isfinite(c)]
            out[k] = (float(c.mean()), float(c.std())) if len(c) else (math.nan, math.nan)
        return out

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
        return path

    @classmethod
    def read_csv(cls, path):
        rep = cls()
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                rep.add({**{k: float(r[k]) for k in METRIC_FIELDS[2:]}, "sample": r["sample"], "label": int(r["label"])})
        return rep


def evaluate_model(G, samples, n_points=2048, seed=0):
    from .train import predict

    rep = MetricsReport()
    for j, s in enumerate(samples):
        rep.add(evaluate_prediction(predict(G, s), s.y, s.label, s.sample_id, n_points, seed + 2 * j))
    return rep


# ---------------------------------------------------------------------------
# ablation harness


@dataclass(frozen=True)
class AblationCell:
    table: str
    key: str  # variant value (table1) or annotation value (table2)

    @property
    def variant(self):
        return AblationVariant(self.key) if self.table == "table1" else ANNOTATION_CELL_VARIANT

    @property
    def annotation(self):
        return AnnotationType.C2V if self.table == "table1" else AnnotationType(self.key)

    @property
    def name(self):
        return f"{self.table}-{self.key}"

    @property
    def row(self):
        return self.variant.table_row if self.table == "table1" else self.annotation.table_row


def ablation_cells(variants=(), annotations=()):
    return [AblationCell("table1", AblationVariant(v).value) for v in variants] + [
        AblationCell("table2", AnnotationType(a).value) for a in annotations
    ]


def run_ablation(sample_fn, variants, annotations, cfg, out_dir, checkpoints=None, log=None):
    """Train (or load) and evaluate one model per requested cell.

    ``sample_fn(annotation)`` returns the training samples for an annotation
    type. ``checkpoints`` optionally maps cell names (``table1-full``) to
    checkpoint directories; cells without one train for ``cfg.steps``.
    Writes ``ablation.csv`` and per-cell metric CSVs under ``out_dir``.
    """
    from .train import load_trainer, train_loop

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    cache = {}
    for cell in ablation_cells(variants, annotations):
        if cell.annotation not in cache:
            cache[cell.annotation] = sample_fn(cell.annotation)
        samples = cache[cell.annotation]
        if checkpoints and cell.name in checkpoints:
            tr = load_trainer(checkpoints[cell.name])
            if (tr.cfg.variant, tr.cfg.annotation) != (cell.variant, cell.annotation):
                raise ValueError(
                    f"checkpoint for {cell.name} was trained as {tr.cfg.variant.value}/{tr.cfg.annotation.value}"
                )
        else:
            if cfg.steps <= 0:
                raise FileNotFoundError(f"no checkpoint for ablation cell {cell.name} and no training budget")
            ccfg = replace(cfg, variant=cell.variant, annotation=cell.annotation)
            ckpt, _ = train_loop(samples, ccfg, out / cell.name)
            tr = load_trainer(ckpt)
        rep = evaluate_model(tr.G, samples)
        rep.write_csv(out / f"{cell.name}.csv")
        summ = rep.summary()
        ref = REFERENCE[(cell.table, cell.key)]
        rows.append({
            "table": cell.table,
            "key": cell.key,
            "row": cell.row,
            "variant": cell.variant.value,
            "annotation": cell.annotation.value,
            "n": len(rep.rows),
            "steps": tr.step,
            "dice_mean": summ["dice"][0],
            "dice_std": summ["dice"][1],
            "hausdorff_mm_mean": summ["hausdorff_mm"][0],
            "hausdorff_mm_std": summ["hausdorff_mm"][1],
            "chamfer_mm_mean": summ["chamfer_mm"][0],
            "reference_dice_pct": ref[0],
            "reference_hausdorff_mm": ref[1],
        })
        if log:
            log(f"{cell.name}: dice {summ['dice'][0]:.4f}")
    path = out / "ablation.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return path, rows
