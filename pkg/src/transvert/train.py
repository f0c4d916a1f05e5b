"""Losses, alternating least-squares GAN updates, seeding and checkpointing."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .drr import AnnotationType
from .model import AblationVariant, Discriminator, ModelConfig, TransVert
from .samples import LABEL_SCALE, Sample  # noqa: F401  (re-exported)

LOSS_FIELDS = ["step", "loss_g", "loss_d", "l1_term", "adv_term"]
LOSS_LOG = "losses.csv"


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step, values):
        self.step, self.values = step, values
        super().__init__(f"non-finite loss at step {step}: {values}")


LR_SCHEDULES = ("constant", "linear")


@dataclass
class TrainConfig:
    alpha_g: float = 10.0
    alpha_d: float = 0.1
    lr: float = 1e-4
    steps: int = 2000
    batch: int = 1
    seed: int = 0
    variant: AblationVariant = AblationVariant.FULL
    annotation: AnnotationType = AnnotationType.C2V
    checkpoint_every: int = 0  # 0: only the initial and final checkpoints
    lr_schedule: str = "linear"  # "constant", or constant then linear decay to 0 over the second half
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        self.variant = AblationVariant(self.variant)
        self.annotation = AnnotationType(self.annotation)
        if self.alpha_g < 0 or self.alpha_d < 0:
            raise ValueError("loss weights must be non-negative")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.steps < 0 or self.batch < 1 or self.checkpoint_every < 0:
            raise ValueError("steps >= 0, batch >= 1 and checkpoint_every >= 0 required")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")

    def lr_at(self, step):
        """Learning rate for the update made at 0-based ``step``."""
        if self.lr_schedule == "constant":
            return self.lr
        half = self.steps // 2
        if step < half:
            return self.lr
        return self.lr * max(0, self.steps - step) / (self.steps - half)

    @property
    def adversarial(self):
        return self.variant.adversarial and self.alpha_d > 0

    def to_meta(self):
        d = asdict(self)
        d["variant"] = self.variant.value
        d["annotation"] = self.annotation.value
        d["model"] = json.dumps(asdict(self.model))
        return d


def generator_loss(pred, y, d_score=None, alpha_g=10.0, alpha_d=0.1):
    """Weighted l1 plus least-squares adversarial term; returns (total, l1, adv)."""
    l1 = ad.l1_loss(pred, y)
    total = ad.scale(l1, alpha_g)
    if d_score is None or alpha_d == 0:
        return total, l1, None
    adv = ad.squared_error(d_score, 1.0)
    return total + ad.scale(adv, alpha_d), l1, adv


def discriminator_loss(d_real, d_fake):
    return ad.squared_error(d_real, 1.0) + ad.squared_error(d_fake, 0.0)


class Trainer:
    """Generator, discriminator and their optimizers."""

    def __init__(self, cfg):
        self.cfg = cfg
        seeds = np.random.SeedSequence(cfg.seed).generate_state(2)
        self.G = TransVert(cfg.model, cfg.variant, seed=int(seeds[0]))
        self.D = Discriminator(cfg.model, seed=int(seeds[1])) if cfg.variant.adversarial else None
        self.opt_g = Adam(self.G.parameters(), lr=cfg.lr)
        self.opt_d = Adam(self.D.parameters(), lr=cfg.lr) if self.D is not None else None
        for opt in self._optimizers():
            opt.state.update(t=0, m=[np.zeros_like(t.data) for t in opt.tensors], v=[np.zeros_like(t.data) for t in opt.tensors])
        self.step = 0

    def _optimizers(self):
        return [o for o in (self.opt_g, self.opt_d) if o is not None]

    def train(self):
        self.G.train()
        if self.D is not None:
            self.D.train()

    # -- checkpoint --------------------------------------------------------
    def state(self):
        arrays = {f"G.{k}": v for k, v in self.G.state_dict().items()}
        names = [f"G.{k}" for k, _ in self.G.named_parameters()]
        opt_sets = [("optG", self.opt_g, names)]
        if self.D is not None:
            arrays.update({f"D.{k}": v for k, v in self.D.state_dict().items()})
            opt_sets.append(("optD", self.opt_d, [f"D.{k}" for k, _ in self.D.named_parameters()]))
        meta = self.cfg.to_meta()
        meta["step"] = self.step
        for tag, opt, pnames in opt_sets:
            meta[f"{tag}.t"] = opt.state["t"]
            for n, m, v in zip(pnames, opt.state["m"], opt.state["v"]):
                arrays[f"{tag}.m.{n}"] = m
                arrays[f"{tag}.v.{n}"] = v
        return arrays, meta

    def save(self, path):
        arrays, meta = self.state()
        ad.save_checkpoint(path, arrays, meta)
        return Path(path)

    def load_arrays(self, arrays, meta):
        self.G.load_state_dict(arrays, prefix="G.")
        names = [f"G.{k}" for k, _ in self.G.named_parameters()]
        opt_sets = [("optG", self.opt_g, names)]
        if self.D is not None:
            self.D.load_state_dict(arrays, prefix="D.")
            opt_sets.append(("optD", self.opt_d, [f"D.{k}" for k, _ in self.D.named_parameters()]))
        for tag, opt, pnames in opt_sets:
            opt.state["t"] = int(meta[f"{tag}.t"])
            for j, n in enumerate(pnames):
                opt.state["m"][j][...] = arrays[f"{tag}.m.{n}"]
                opt.state["v"][j][...] = arrays[f"{tag}.v.{n}"]
        self.step = int(meta["step"])


def config_from_meta(meta):
    model = ModelConfig(**json.loads(meta["model"]))
    kw = {}
    for f, typ in (("alpha_g", float), ("alpha_d", float), ("lr", float), ("steps", int), ("batch", int), ("seed", int), ("checkpoint_every", int)):
        kw[f] = typ(meta[f])
    return TrainConfig(
        variant=meta["variant"], annotation=meta["annotation"], lr_schedule=meta.get("lr_schedule", "constant"), model=model, **kw
    )


def load_trainer(path):
    arrays, meta = ad.load_checkpoint(path)
    tr = Trainer(config_from_meta(meta))
    tr.load_arrays(arrays, meta)
    return tr


def stack_batch(samples):
    parts = [s.inputs() for s in samples]
    xs = [np.concatenate([p[j] for p in parts], axis=0) for j in range(4)]
    y = np.concatenate([s.target() for s in samples], axis=0)
    return xs, y


def _check(step, **vals):
    bad = {k: v for k, v in vals.items() if v is not None and not np.isfinite(v)}
    if bad:
        raise NonFiniteLoss(step, bad)


def train_step(tr, batch):
    """One discriminator update then one generator update.

    Returns a dict with loss_g, loss_d, l1_term, adv_term.
    """
    cfg = tr.cfg
    xs, y = batch
    tr.train()
    lr = cfg.lr_at(tr.step)
    tr.opt_g.lr = lr
    if tr.opt_d is not None:
        tr.opt_d.lr = lr
    pred = tr.G(*xs)
    loss_d = 0.0
    if cfg.adversarial:
        tr.D.requires_grad_(True)
        tr.opt_d.zero_grad()
        ld = discriminator_loss(tr.D(Tensor(y)), tr.D(pred.detach()))
        loss_d = ld.item()
        _check(tr.step, loss_d=loss_d)
        ld.backward()
        tr.opt_d.step()
        tr.D.requires_grad_(False)
        d_fake = tr.D(pred)
    else:
        d_fake = None
    tr.opt_g.zero_grad()
    lg, l1, adv = generator_loss(pred, Tensor(y), d_fake, cfg.alpha_g, cfg.alpha_d)
    out = {
        "loss_g": lg.item(),
        "loss_d": loss_d,
        "l1_term": l1.item(),
        "adv_term": adv.item() if adv is not None else 0.0,
    }
    _check(tr.step, **out)
    lg.backward()
    tr.opt_g.step()
    tr.step += 1
    return out


def sample_order(n, step, batch, seed):
    """Indices of the samples used at ``step`` (0-based), reshuffled every epoch."""
    idx = []
    for k in range(step * batch, (step + 1) * batch):
        epoch, pos = divmod(k, n)
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        idx.append(int(perm[pos]))
    return idx


def _ckpt_name(step):
    return f"ckpt-{step:06d}"


def _open_log(path, keep_steps):
    """Open the loss log for appending, dropping rows beyond ``keep_steps``."""
    rows = []
    if keep_steps and path.exists():
        with open(path, newline="") as fh:
            rows = [r for r in csv.DictReader(fh) if int(r["step"]) <= keep_steps]
    fh = open(path, "w", newline="")
    w = csv.DictWriter(fh, fieldnames=LOSS_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return fh, w


def train_loop(samples, cfg, out_dir, resume=None, callback=None):
    """Train on ``samples``; returns ``(final checkpoint path, loss log path)``.

    Steps are numbered from 1 in the loss log. ``resume`` is a checkpoint
    directory written by an earlier run with the same samples.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("dataset is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        arrays, meta = ad.load_checkpoint(resume)
        tr = Trainer(cfg)
        tr.load_arrays(arrays, meta)
    else:
        tr = Trainer(cfg)
        tr.save(out / _ckpt_name(0))
    log_path = out / LOSS_LOG
    fh, writer = _open_log(log_path, tr.step)
    last = out / _ckpt_name(tr.step)
    try:
        while tr.step < cfg.steps:
            idx = sample_order(len(samples), tr.step, cfg.batch, cfg.seed)
            batch = stack_batch([samples[i] for i in idx])
            try:
                losses = train_step(tr, batch)
            except NonFiniteLoss:
                np.savez(out / "failed_batch.npz", x_s=batch[0][0], x_c=batch[0][1], y_s=batch[0][2], y_c=batch[0][3], y=batch[1])
                raise
            writer.writerow({"step": tr.step, **{k: repr(float(v)) for k, v in losses.items()}})
            fh.flush()
            if callback is not None:
                callback(tr, losses)
            if cfg.checkpoint_every and tr.step % cfg.checkpoint_every == 0:
                last = tr.save(out / _ckpt_name(tr.step))
        if tr.step and last.name != _ckpt_name(tr.step):
            last = tr.save(out / _ckpt_name(tr.step))
    finally:
        fh.close()
    return last, log_path


def read_loss_log(path):
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()} for r in csv.DictReader(fh)]


def predict(G, sample):
    """Generator output for one sample in label units, as a (P, P, P) float32 array."""
    G.eval()
    with ad.no_grad():
        out = G(*sample.inputs())
    return (out.data[0, 0] * LABEL_SCALE).astype(np.float32)
