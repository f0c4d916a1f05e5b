"""``transvert`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numeric failure.
Failures print one line to stderr: ``transvert: error code=<n> kind=<Type> msg=<text>``.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import assemble, drr, phantom
from .autodiff import CheckpointError
from .config import ConfigError, RunConfig
from .geometry import FormatError, Volume, read_volume, write_image, write_pgm16, write_volume

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
RESOLVED = "config.resolved.cfg"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _threads(args):
    if args.threads is not None:
        n = args.threads
    else:
        env = os.environ.get("TRANSVERT_THREADS", "1")
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"TRANSVERT_THREADS={env!r} is not an integer") from None
    if n < 1:
        raise ConfigError("thread count must be >= 1")
    return n


def _config(args, **flag_keys):
    over = list(args.set or [])
    for key, val in flag_keys.items():
        if val is not None:
            over.append(f"{key}={val if not isinstance(val, (list, tuple)) else ','.join(map(str, val))}")
    return RunConfig.load(args.config, over)


def _log(msg):
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# data helpers


def _geometries(cfg, ph):
    geoms = {
        view: drr.geometry_for(
            ph.density, view, sdd_mm=cfg["sdd_mm"], sod_mm=cfg["sod_mm"], detector_spacing_mm=cfg["detector_spacing_mm"]
        )
        for view in (drr.SAGITTAL, drr.CORONAL)
    }
    if cfg["detector_shape"]:
        if len(cfg["detector_shape"]) != 2:
            raise ConfigError("detector_shape needs two integers")
        geoms = {v: replace(g, detector_shape=cfg["detector_shape"]) for v, g in geoms.items()}
    return geoms


def _resolve_sample(ref, dataset):
    """Phantom directory for a sample name or path."""
    p = Path(ref)
    if (p / "labels.vhdr").exists():
        return p.name, p
    if not dataset:
        raise FileNotFoundError(f"sample {ref!r} is not a phantom directory and no dataset was given")
    entries = phantom.read_manifest(_manifest(dataset))
    if ref not in entries:
        raise KeyError(f"sample {ref!r} not in dataset manifest")
    return ref, Path(entries[ref]["path"])


def _manifest(dataset):
    p = Path(dataset)
    m = p / phantom.MANIFEST_NAME if p.is_dir() else p
    if not m.exists():
        raise FileNotFoundError(f"dataset manifest not found: {m}")
    return m


def _load_samples(cfg, annotation, threads):
    from .samples import build_samples

    if not cfg["dataset"]:
        raise ConfigError("no dataset configured (key 'dataset')")
    entries = phantom.read_manifest(_manifest(cfg["dataset"]))
    split = cfg["split"]
    out = []
    for name, e in entries.items():
        if split != "all" and e["split"] != split:
            continue
        ph = phantom.load_phantom(e["path"])
        s, _, _ = build_samples(ph, annotation, prefix=f"{name}:v", geometries=_geometries(cfg, ph), threads=threads)
        out.extend(s)
    if not out:
        raise ValueError(f"dataset has no samples in split {split!r}")
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_phantom(args):
    cfg = _config(args, out=args.out, seed=args.seed, n_samples=args.n)
    out = Path(cfg["out"])
    kw = dict(gap_mm=cfg["gap_mm"], canvas_xy=cfg["canvas_xy"], spacing_mm=cfg["spacing_mm"])
    if args.overfit:
        lo, hi = cfg["curvature_mm"]
        spine = phantom.make_spine(args.overfit, curvature=(lo + hi) / 2, seed=cfg["seed"], first_label=8, **kw)
        train, val = [spine], []
    else:
        nv = cfg["n_vertebrae"]
        if len(nv) != 2:
            raise ConfigError("n_vertebrae needs two integers (min,max)")
        train, val = phantom.dataset(cfg["n_samples"], cfg["seed"], tuple(nv), tuple(cfg["curvature_mm"]), **kw)
    m = phantom.write_phantom_set(out, train, val)
    cfg["dataset"] = str(out)
    cfg.dump(out / RESOLVED)
    _log(f"wrote {len(train) + len(val)} phantoms and {m}")
    return EXIT_OK


def cmd_render(args):
    from . import report

    cfg = _config(args, dataset=args.dataset, out=args.out)
    name, path = _resolve_sample(args.sample, cfg["dataset"])
    ph = phantom.load_phantom(path)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    imgs = {}
    for view, g in _geometries(cfg, ph).items():
        img = drr.render_drr(ph.density, g, threads=_threads(args))
        imgs[view] = img
        write_image(img, out / f"drr_{view}")
        write_pgm16(img, out / f"drr_{view}.pgm")
    cfg.dump(out / RESOLVED)
    if cfg["figures"]:
        report.view_panels([imgs[v].data for v in imgs], out / "drr_views.png", [f"{name} {v}" for v in imgs])
    _log(f"rendered {name} to {out}")
    return EXIT_OK


def cmd_train(args):
    from . import report
    from .train import read_loss_log, train_loop

    cfg = _config(args, dataset=args.dataset, out=args.out, steps=args.steps, seed=args.seed, resume=args.resume)
    tcfg = cfg.train_config()
    samples = _load_samples(cfg, tcfg.annotation, _threads(args))
    out = Path(cfg["out"])
    cfg.dump(out / RESOLVED)

    def progress(tr, losses):
        if tr.step % 50 == 0 or tr.step == tcfg.steps:
            _log(f"step {tr.step} loss_g {losses['loss_g']:.5f} loss_d {losses['loss_d']:.5f}")

    ckpt, log = train_loop(samples, tcfg, out, resume=cfg["resume"] or None, callback=progress)
    rows = read_loss_log(log)
    if cfg["figures"] and rows:
        report.loss_curves(rows, out / "losses.png")
    _log(f"checkpoint {ckpt}")
    _log(f"loss log {log}")
    return EXIT_OK


def _vertebra_dir(pred_path):
    p = Path(pred_path)
    stem = p.with_suffix("") if p.suffix in (".vhdr", ".vraw") else p
    return stem, stem.parent / (stem.name + ".vertebrae")


def cmd_infer(args):
    from . import report
    from .eval import binarize
    from .samples import build_samples
    from .train import load_trainer, predict

    cfg = _config(args, dataset=args.dataset)
    name, path = _resolve_sample(args.sample, cfg["dataset"])
    tr = load_trainer(args.checkpoint)
    ph = phantom.load_phantom(path)
    geoms = _geometries(cfg, ph)
    samples, _, _ = build_samples(ph, tr.cfg.annotation, prefix=f"{name}:v", geometries=geoms, threads=_threads(args))
    stem, vdir = _vertebra_dir(args.out)
    vdir.mkdir(parents=True, exist_ok=True)
    preds, cents, index = [], [], []
    gs, gc = geoms[drr.SAGITTAL], geoms[drr.CORONAL]
    for s in samples:
        p = s.y.with_data(predict(tr.G, s))
        vpath = write_volume(p, vdir / f"v{s.label}")
        uv_s = gs.pixel_to_mm(s.centroid_px[drr.SAGITTAL])
        uv_c = gc.pixel_to_mm(s.centroid_px[drr.CORONAL])
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            c = assemble.fuse_centroids(uv_s, uv_c, gs, gc)
        for w in caught:
            print(f"transvert: warning {w.message}", file=sys.stderr)
        preds.append((binarize(p, s.label), s.label))
        cents.append(c)
        index.append({"sample": s.sample_id, "label": s.label, "path": vpath.name})
    model = assemble.stack_spine(preds, cents, ph.labels.shape, ph.labels.spacing_mm, ph.labels.origin_mm)
    write_volume(model.canvas, stem)
    assemble.write_centroid_csv(stem.parent / (stem.name + ".centroids.csv"), model.placed)
    with open(vdir / "index.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["sample", "label", "path"], lineterminator="\n")
        w.writeheader()
        w.writerows(index)
    cfg.dump(stem.parent / RESOLVED)
    if cfg["figures"] and samples:
        s = samples[0]
        report.view_panels(
            [s.x_s.data, s.y_s.data, s.x_c.data, s.y_c.data],
            stem.parent / (stem.name + ".inputs.png"),
            ["sagittal DRR", "sagittal annotation", "coronal DRR", "coronal annotation"],
        )
    _log(f"wrote {stem}.vhdr with {len(samples)} vertebrae")
    return EXIT_OK


def cmd_eval(args):
    from . import report
    from .eval import MetricsReport, binarize, chamfer, evaluate_prediction, surface_points
    from .samples import crop_volume

    cfg = _config(args, dataset=args.dataset)
    name, path = _resolve_sample(args.sample, cfg["dataset"])
    ph = phantom.load_phantom(path)
    _, vdir = _vertebra_dir(args.pred)
    index = vdir / "index.csv"
    if not index.exists():
        raise FileNotFoundError(f"per-vertebra predictions not found: {index}")
    with open(index, newline="") as fh:
        entries = list(csv.DictReader(fh))
    rep = MetricsReport()
    out = Path(args.out)
    for j, e in enumerate(entries):
        label = int(e["label"])
        pred = read_volume(vdir / e["path"])
        lo = np.rint(ph.labels.world_to_voxel(pred.origin_mm)).astype(int)
        truth = crop_volume(ph.labels, lo + pred.shape[0] // 2, pred.shape[0])
        truth = truth.with_data(np.where(truth.data == label, label, 0).astype(np.uint8))
        rep.add(evaluate_prediction(pred, truth, label, e["sample"], cfg["n_points"], seed=cfg["seed"] + 2 * j))
        mask = binarize(pred, label)
        if cfg["figures"] and mask.data.any():
            pa = surface_points(mask, cfg["n_points"], cfg["seed"])
            pb = surface_points(truth, cfg["n_points"], cfg["seed"] + 1)
            ch = chamfer(pa, pb)
            report.chamfer_map(pa, ch.a_to_b, out.parent / f"{out.stem}.chamfer_v{label}.png", f"{e['sample']} chamfer {ch.value:.2f} mm")
    rep.write_csv(out)
    summ = rep.summary()
    _log(f"{name}: dice {summ['dice'][0]:.4f} hausdorff {summ['hausdorff_mm'][0]:.3f} mm -> {out}")
    return EXIT_OK


def cmd_ablate(args):
    from . import report
    from .eval import run_ablation

    cfg = _config(args, dataset=args.dataset, out=args.out, steps=args.steps)
    tcfg = cfg.train_config()
    threads = _threads(args)
    out = Path(cfg["out"])
    cfg.dump(out / RESOLVED)
    ckpts = None
    if args.checkpoints:
        root = Path(args.checkpoints)
        ckpts = {p.name: p for p in root.iterdir() if (p / "manifest.txt").exists()}
    path, rows = run_ablation(
        lambda ann: _load_samples(cfg, ann, threads),
        cfg["ablate_variants"],
        cfg["ablate_annotations"],
        tcfg,
        out,
        checkpoints=ckpts,
        log=_log,
    )
    if cfg["figures"] and rows:
        report.ablation_bars(rows, out / "ablation.png")
    _log(f"ablation table {path}")
    return EXIT_OK


def cmd_assemble(args):
    from .eval import binarize

    cfg = _config(args)
    cents = assemble.read_centroid_csv(args.centroids)
    mpath = Path(args.manifest)
    with open(mpath, newline="") as fh:
        entries = list(csv.DictReader(fh))
    preds, cs = [], []
    for e in entries:
        label = int(e["label"])
        if label not in cents:
            raise KeyError(f"no centroid for label {label}")
        v = read_volume(mpath.parent / e["path"])
        preds.append((binarize(v, label) if v.data.dtype == np.float32 else v, label))
        cs.append(cents[label])
    like = read_volume(args.like)
    model = assemble.stack_spine(preds, cs, like.shape, like.spacing_mm, like.origin_mm)
    out = write_volume(model.canvas, args.out)
    cfg.dump(Path(out).parent / RESOLVED)
    _log(f"assembled {len(preds)} vertebrae into {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--threads", type=int, help="worker threads for rendering (env TRANSVERT_THREADS)")

    p = _Parser(prog="transvert", description="Desk-scale 2D-to-3D vertebra reconstruction lab.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("phantom", parents=[common], help="generate a phantom dataset")
    s.add_argument("--n", type=int, help="number of spines (5:1 train/val split)")
    s.add_argument("--overfit", type=int, metavar="K", help="write one spine of K vertebrae (labels from 8) instead")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("render", parents=[common], help="render both DRR views of a phantom")
    s.add_argument("--sample", required=True)
    s.add_argument("--dataset")
    s.add_argument("--out")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("train", parents=[common], help="train a model")
    s.add_argument("--dataset")
    s.add_argument("--out")
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--resume")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", parents=[common], help="predict every vertebra of a sample and assemble the spine")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--sample", required=True)
    s.add_argument("--dataset")
    s.add_argument("--out", required=True, help="output canvas (.vhdr)")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", parents=[common], help="metrics for predictions written by infer")
    s.add_argument("--pred", required=True)
    s.add_argument("--sample", required=True)
    s.add_argument("--dataset")
    s.add_argument("--out", required=True, help="metrics CSV")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", parents=[common], help="train and evaluate the ablation cells")
    s.add_argument("--dataset")
    s.add_argument("--out")
    s.add_argument("--steps", type=int)
    s.add_argument("--checkpoints", help="directory of per-cell checkpoints named like table1-full")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("assemble", parents=[common], help="stack per-vertebra volumes at 3D centroids")
    s.add_argument("--manifest", required=True, help="CSV with label,path columns")
    s.add_argument("--centroids", required=True, help="CSV with label,x_mm,y_mm,z_mm columns")
    s.add_argument("--like", required=True, help="volume whose grid the canvas copies")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_assemble)
    return p


def _fail(code, exc):
    msg = " ".join(str(exc).split()) or exc.__class__.__name__
    print(f"transvert: error code={code} kind={type(exc).__name__} msg={msg}", file=sys.stderr)
    return code


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    from .train import NonFiniteLoss

    try:
        return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    except (NonFiniteLoss, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, exc)
    except (ConfigError, FormatError, CheckpointError, OSError, KeyError, ValueError) as exc:
        return _fail(EXIT_DATA, exc)


if __name__ == "__main__":
    sys.exit(main())
