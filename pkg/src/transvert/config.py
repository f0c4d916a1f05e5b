"""Flat ``key = value`` run configuration."""
from __future__ import annotations

from pathlib import Path

from .drr import AnnotationType
from .model import AblationVariant, ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


def _floats(n):
    def parse(s):
        vals = tuple(float(t) for t in str(s).replace(" ", "").split(",") if t)
        if n and len(vals) != n:
            raise ValueError(f"expected {n} comma-separated numbers")
        return vals
    return parse


def _ints(s):
    return tuple(int(t) for t in str(s).replace(" ", "").split(",") if t)


def _names(s):
    return tuple(t.strip() for t in str(s).split(",") if t.strip())


def _bool(s):
    t = str(s).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def _path(s):
    return str(s).strip()


# key -> (parser, default)
SCHEMA = {
    # paths
    "dataset": (_path, ""),
    "out": (_path, "runs/default"),
    "resume": (_path, ""),
    "split": (str, "train"),
    # training
    "alpha_g": (float, 10.0),
    "alpha_d": (float, 0.1),
    "lr": (float, 1e-4),
    "steps": (int, 2000),
    "batch": (int, 1),
    "seed": (int, 0),
    "variant": (str, AblationVariant.FULL.value),
    "annotation": (str, AnnotationType.C2V.value),
    "checkpoint_every": (int, 0),
    "lr_schedule": (str, "linear"),
    # model
    "patch": (int, 64),
    "enc_downsamples": (int, 3),
    "fuse_layers": (int, 4),
    "fuse_doublings": (int, 3),
    "dec_upsamples": (int, 3),
    "base_channels": (_ints, (8, 8, 16, 32)),
    "residual_blocks": (int, 4),
    "disc_channels": (int, 64),
    "disc_refine_layers": (int, 4),
    "bn_eval_stats": (str, "batch"),
    # geometry
    "sdd_mm": (float, 1800.0),
    "sod_mm": (float, 1500.0),
    "detector_spacing_mm": (_floats(2), (1.2, 1.2)),
    "detector_shape": (_ints, ()),  # empty: sized to the phantom
    # phantom
    "n_samples": (int, 6),
    "n_vertebrae": (_ints, (2, 5)),
    "curvature_mm": (_floats(2), (-12.0, 12.0)),
    "gap_mm": (float, 4.0),
    "canvas_xy": (int, 128),
    "spacing_mm": (float, 1.0),
    # evaluation / ablation
    "n_points": (int, 2048),
    "ablate_variants": (_names, tuple(v.value for v in AblationVariant)),
    "ablate_annotations": (_names, tuple(a.value for a in AnnotationType)),
    "figures": (_bool, True),
}


def _fmt(v):
    if isinstance(v, tuple):
        return ",".join(_fmt(t) for t in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


class RunConfig(dict):
    """Typed flat mapping; every key is listed in :data:`SCHEMA`."""

    @classmethod
    def defaults(cls):
        return cls({k: d for k, (_, d) in SCHEMA.items()})

    def set(self, key, raw):
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        parser = SCHEMA[key][0]
        try:
            self[key] = parser(raw) if isinstance(raw, str) else (raw if not isinstance(raw, list) else tuple(raw))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from exc
        return self

    def update_text(self, text, source="<config>"):
        for n, line in enumerate(text.splitlines(), 1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ConfigError(f"{source}:{n}: expected 'key = value'")
            k, v = body.split("=", 1)
            try:
                self.set(k, v.strip())
            except ConfigError as exc:
                raise ConfigError(f"{source}:{n}: {exc}") from None
        return self

    @classmethod
    def load(cls, path=None, overrides=()):
        cfg = cls.defaults()
        if path:
            p = Path(path)
            try:
                text = p.read_text(encoding="utf-8")
            except OSError as exc:
                raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
            cfg.update_text(text, str(p))
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            k, v = item.split("=", 1)
            cfg.set(k, v)
        return cfg

    def dumps(self):
        return "".join(f"{k} = {_fmt(self[k])}\n" for k in SCHEMA)

    def dump(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding="utf-8")
        return path

    def model_config(self):
        try:
            return ModelConfig(
                patch=self["patch"],
                enc_downsamples=self["enc_downsamples"],
                fuse_layers=self["fuse_layers"],
                fuse_doublings=self["fuse_doublings"],
                dec_upsamples=self["dec_upsamples"],
                base_channels=self["base_channels"],
                residual_blocks=self["residual_blocks"],
                disc_channels=self["disc_channels"],
                disc_refine_layers=self["disc_refine_layers"],
                bn_eval_stats=self["bn_eval_stats"],
            )
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from None

    def train_config(self):
        try:
            return TrainConfig(
                alpha_g=self["alpha_g"],
                alpha_d=self["alpha_d"],
                lr=self["lr"],
                steps=self["steps"],
                batch=self["batch"],
                seed=self["seed"],
                variant=self["variant"],
                annotation=self["annotation"],
                checkpoint_every=self["checkpoint_every"],
                lr_schedule=self["lr_schedule"],
                model=self.model_config(),
            )
        except ValueError as exc:
            raise ConfigError(f"train: {exc}") from None
