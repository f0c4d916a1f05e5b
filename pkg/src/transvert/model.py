"""TransVert generator, the spectral-normalized discriminator and ablation variants.

Spatial tensor axes are (x, y, z) = (left-right, anterior-posterior,
cranio-caudal), so the sagittal view collapses axis 2 and the coronal view
collapses axis 3 of an (N, C, X, Y, Z) tensor.

Departures from the literal layer table (kept so that 64^2 inputs decode to
a 64^3 volume):

* encoder convolutions use stride 1 and padding 3 on the collapsed axis and
  padding 3 in-plane, so the in-plane size halves exactly 64 -> 32 -> 16 -> 8;
* the decoder has three stride-2 transpose convolutions instead of two;
* the discriminator's stride-1 convolutions alternate padding 1 and 2 to keep
  a 4^3 score map, and the last one emits a single channel.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SAGITTAL = "sagittal"
CORONAL = "coronal"
# tensor axis (within X, Y, Z) each view integrates over
COLLAPSED_AXIS = {SAGITTAL: 0, CORONAL: 1}


class AblationVariant(str, enum.Enum):
    FULL = "full"
    NO_ADVERSARIAL = "no_adversarial"
    NO_ATTENTION = "no_attention"
    NAIVE_OUTER_PRODUCT = "naive_outer_product"
    SAGITTAL_ONLY = "sagittal_only"

    @property
    def table_row(self):
        return _TABLE1_ROWS[self]

    @property
    def attention(self):
        return self in (AblationVariant.FULL, AblationVariant.NO_ADVERSARIAL)

    @property
    def adversarial(self):
        return self is AblationVariant.FULL

    @property
    def fusion(self):
        return "outer" if self is AblationVariant.NAIVE_OUTER_PRODUCT else "lift"

    @property
    def views(self):
        return (SAGITTAL,) if self is AblationVariant.SAGITTAL_ONLY else (SAGITTAL, CORONAL)


_TABLE1_ROWS = {
    AblationVariant.SAGITTAL_ONLY: "Sagittal only",
    AblationVariant.NAIVE_OUTER_PRODUCT: "Naive View-Fusion (Outer Product)",
    AblationVariant.NO_ATTENTION: "TransVert",
    AblationVariant.NO_ADVERSARIAL: "TransVert + Self Attn.",
    AblationVariant.FULL: "TransVert + SelfAttn + Adv.",
}


BN_EVAL_STATS = ("batch", "running")


@dataclass(frozen=True)
class ModelConfig:
    patch: int = 64
    enc_downsamples: int = 3
    fuse_layers: int = 4
    fuse_doublings: int = 3
    dec_upsamples: int = 3
    base_channels: tuple = (8, 8, 16, 32)
    residual_blocks: int = 4
    out_channels: int = 1
    stem_kernel: int = 7
    disc_channels: int = 64
    disc_refine_layers: int = 4
    bn_eval_stats: str = "batch"  # "batch": per-sample statistics at inference, "running": tracked averages

    def __post_init__(self):
        object.__setattr__(self, "base_channels", tuple(int(c) for c in self.base_channels))
        if self.bn_eval_stats not in BN_EVAL_STATS:
            raise ValueError(f"bn_eval_stats must be one of {BN_EVAL_STATS}, got {self.bn_eval_stats!r}")
        p, d = self.patch, self.enc_downsamples
        if p <= 0 or p % (2**d):
            raise ValueError(f"patch {p} is not divisible by 2^{d}")
        bott = p // 2**d
        if 2**self.fuse_doublings != bott:
            raise ValueError(f"2^fuse_doublings must equal the bottleneck size {bott}")
        if bott * 2**self.dec_upsamples != p:
            raise ValueError("decoder upsampling does not return to the patch size")
        if self.fuse_layers < self.fuse_doublings:
            raise ValueError("fuse_layers must be >= fuse_doublings")
        if len(self.base_channels) != d + 1:
            raise ValueError(f"base_channels needs {d + 1} entries")
        if self.disc_downsamples < 1:
            raise ValueError("patch too small for the discriminator")

    @property
    def bottleneck(self):
        return self.patch // 2**self.enc_downsamples

    @property
    def feat_channels(self):
        return self.base_channels[-1]

    @property
    def dec_channels(self):
        return tuple(max(16, 2 * self.feat_channels >> (j + 1)) for j in range(self.dec_upsamples))

    @property
    def disc_downsamples(self):
        # stop at a 4^3 score map
        return int(round(math.log2(self.patch / 4)))


# ---------------------------------------------------------------------------
# module plumbing

class Module:
    training = True

    def _children(self):
        for k, v in vars(self).items():
            if isinstance(v, Module):
                yield k, v
            elif isinstance(v, (list, tuple)) and v and all(isinstance(m, Module) for m in v):
                for i, m in enumerate(v):
                    yield f"{k}.{i}", m

    def named_parameters(self, prefix=""):
        for k, v in vars(self).items():
            if isinstance(v, Tensor):
                yield prefix + k, v
        for k, m in self._children():
            yield from m.named_parameters(f"{prefix}{k}.")

    def named_buffers(self, prefix=""):
        for k, v in vars(self).items():
            if isinstance(v, np.ndarray):
                yield prefix + k, v
        for k, m in self._children():
            yield from m.named_buffers(f"{prefix}{k}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return int(sum(p.data.size for p in self.parameters()))

    def train(self, mode=True):
        self.training = mode
        for _, m in self._children():
            m.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def requires_grad_(self, flag):
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def state_dict(self):
        out = {k: p.data for k, p in self.named_parameters()}
        out.update(dict(self.named_buffers()))
        return out

    def load_state_dict(self, state, prefix=""):
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        for k, p in own.items():
            arr = _fetch(state, prefix + k, p.shape)
            p.data[...] = arr
        for k, b in bufs.items():
            b[...] = _fetch(state, prefix + k, b.shape)

    def astype(self, dtype):
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        for m in self._modules_recursive():
            for k, v in list(vars(m).items()):
                if isinstance(v, np.ndarray):
                    setattr(m, k, v.astype(dtype))
        return self

    def _modules_recursive(self):
        yield self
        for _, m in self._children():
            yield from m._modules_recursive()


def _fetch(state, key, shape):
    if key not in state:
        raise KeyError(f"missing tensor {key!r} in state")
    arr = np.asarray(state[key])
    if arr.shape != tuple(shape):
        raise ValueError(f"tensor {key!r}: shape {arr.shape} != expected {tuple(shape)}")
    return arr


def _param(rng, shape, std):
    data = (rng.standard_normal(shape) * std).astype(ad.default_dtype())
    return Tensor(data, requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape, dtype=ad.default_dtype()), requires_grad=True)


class Conv3d(Module):
    def __init__(self, rng, cin, cout, k, stride=1, pad=0, spectral=False, gain=2.0):
        ks = (k,) * 3 if np.isscalar(k) else tuple(k)
        fan_in = cin * int(np.prod(ks))
        self.w = _param(rng, (cout, cin) + ks, math.sqrt(gain / fan_in))
        self.b = _zeros((cout,))
        self.stride, self.pad = stride, pad
        self.spectral = spectral
        if spectral:
            self.u = _normalized(rng.standard_normal(cout)).astype(ad.default_dtype())

    def __call__(self, x):
        w = ad.spectral_norm(self.w, self.u, 1, self.training) if self.spectral else self.w
        return ad.conv3d(x, w, self.b, self.stride, self.pad)


def _normalized(v):
    return v / np.linalg.norm(v)


class ConvTranspose3d(Module):
    def __init__(self, rng, cin, cout, k, stride=1, pad=0, output_pad=0):
        ks = (k,) * 3 if np.isscalar(k) else tuple(k)
        st = (stride,) * 3 if np.isscalar(stride) else tuple(stride)
        fan_in = cin * int(np.prod(ks)) / int(np.prod(st))
        self.w = _param(rng, (cin, cout) + ks, math.sqrt(2.0 / fan_in))
        self.b = _zeros((cout,))
        self.stride, self.pad, self.output_pad = st, pad, output_pad

    def __call__(self, x):
        return ad.conv_transpose3d(x, self.w, self.b, self.stride, self.pad, self.output_pad)


class BatchNorm3d(Module):
    def __init__(self, c, momentum=0.1, eps=1e-5):
        dt = ad.default_dtype()
        self.gamma = Tensor(np.ones(c, dtype=dt), requires_grad=True)
        self.beta = _zeros((c,))
        self.running_mean = np.zeros(c, dtype=dt)
        self.running_var = np.ones(c, dtype=dt)
        self.momentum, self.eps = momentum, eps
        self.eval_stats = "running"

    def __call__(self, x):
        if not self.training and self.eval_stats == "batch":
            # normalize with this batch's statistics, leave the tracked averages alone
            rm, rv = self.running_mean.copy(), self.running_var.copy()
            return ad.batch_norm(x, self.gamma, self.beta, rm, rv, True, self.momentum, self.eps)
        return ad.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.momentum, self.eps
        )


class ConvBNReLU(Module):
    def __init__(self, conv, cout):
        self.conv = conv
        self.bn = BatchNorm3d(cout)

    def __call__(self, x):
        return ad.relu(self.bn(self.conv(x)))


class ResidualBlock(Module):
    """x + [pad1, conv3, BN, ReLU] x 2."""

    def __init__(self, rng, c):
        self.a = ConvBNReLU(Conv3d(rng, c, c, 3), c)
        self.b = ConvBNReLU(Conv3d(rng, c, c, 3), c)

    def __call__(self, x):
        h = self.a(ad.replication_pad3d(x, 1))
        h = self.b(ad.replication_pad3d(h, 1))
        return ad.add(x, h)


class AttentionGate(Module):
    """A = sigmoid(conv1(f_img) + conv2(f_ann)), one channel broadcast over f_img."""

    def __init__(self, rng, c):
        self.conv_img = Conv3d(rng, c, 1, 1, gain=1.0)
        self.conv_ann = Conv3d(rng, c, 1, 1, gain=1.0)

    def coefficients(self, f_img, f_ann):
        return ad.sigmoid(ad.add(self.conv_img(f_img), self.conv_ann(f_ann)))

    def __call__(self, f_img, f_ann):
        return attention_gate(f_img, f_ann, self)


def attention_gate(f_img, f_ann, gate):
    if f_img.shape[2:] != f_ann.shape[2:]:
        raise ValueError(f"attention_gate: spatial mismatch {f_img.shape} vs {f_ann.shape}")
    return ad.mul(gate.coefficients(f_img, f_ann), f_img)


def _view_tuple(view, inplane, collapsed):
    t = [inplane, inplane, inplane]
    t[COLLAPSED_AXIS[view]] = collapsed
    return tuple(t)


class Encoder(Module):
    def __init__(self, rng, cfg, view, attention):
        if view not in COLLAPSED_AXIS:
            raise ValueError(f"unknown view {view!r}")
        self.view, self.attention = view, attention
        ch = cfg.base_channels
        k = cfg.stem_kernel
        self.stem_pad = k // 2
        self.stem_img = ConvBNReLU(Conv3d(rng, 1 if attention else 2, ch[0], k), ch[0])
        if attention:
            self.stem_ann = ConvBNReLU(Conv3d(rng, 1, ch[0], k), ch[0])
            self.gate = AttentionGate(rng, ch[0])
        stride = _view_tuple(view, 2, 1)
        self.down = [
            ConvBNReLU(Conv3d(rng, ch[j], ch[j + 1], k, stride=stride, pad=k // 2), ch[j + 1])
            for j in range(cfg.enc_downsamples)
        ]
        self.res = [ResidualBlock(rng, ch[-1]) for _ in range(cfg.residual_blocks)]
        self.patch = cfg.patch

    def expected_input_shape(self, n=1):
        return (n, 1) + _view_tuple(self.view, self.patch, 1)

    def __call__(self, img, ann):
        if img.shape[1:] != self.expected_input_shape()[1:] or ann.shape != img.shape:
            raise ValueError(
                f"{self.view} encoder expects inputs (N,{','.join(map(str, self.expected_input_shape()[1:]))}), "
                f"got {img.shape} and {ann.shape}"
            )
        if self.attention:
            f = self.stem_img(ad.replication_pad3d(img, self.stem_pad))
            g = self.stem_ann(ad.replication_pad3d(ann, self.stem_pad))
            h = self.gate(f, g)
        else:
            h = self.stem_img(ad.replication_pad3d(ad.concat([img, ann], 1), self.stem_pad))
        for layer in self.down:
            h = layer(h)
        for block in self.res:
            h = block(h)
        return h


class Lift(Module):
    """Transpose convolutions striding only along the view's collapsed axis."""

    def __init__(self, rng, cfg, view):
        if view not in COLLAPSED_AXIS:
            raise ValueError(f"unknown view {view!r}")
        self.view = view
        c = cfg.feat_channels
        layers = []
        for j in range(cfg.fuse_layers):
            if j < cfg.fuse_doublings:
                s, op = _view_tuple(view, 1, 2), _view_tuple(view, 0, 1)
            else:
                s, op = (1, 1, 1), (0, 0, 0)
            layers.append(ConvBNReLU(ConvTranspose3d(rng, c, c, 3, stride=s, pad=1, output_pad=op), c))
        self.layers = layers

    def __call__(self, h):
        axis = 2 + COLLAPSED_AXIS[self.view]
        if h.shape[axis] != 1:
            raise ValueError(f"{self.view} lift expects a singleton axis {axis}, got {h.shape}")
        for layer in self.layers:
            h = layer(h)
        return h


def outer_product_fuse(f_sag, f_cor):
    """Naive fusion: each view's map times the other's z-averaged profile."""
    prof_cor = ad.mean(f_cor, axis=4, keepdims=True)  # (N, C, X, 1, 1)
    prof_sag = ad.mean(f_sag, axis=4, keepdims=True)  # (N, C, 1, Y, 1)
    return ad.mul(f_sag, prof_cor), ad.mul(f_cor, prof_sag)


class Decoder(Module):
    def __init__(self, rng, cfg):
        c = 2 * cfg.feat_channels
        self.res = [ResidualBlock(rng, c) for _ in range(cfg.residual_blocks)]
        ups = []
        for cout in cfg.dec_channels:
            ups.append(ConvBNReLU(ConvTranspose3d(rng, c, cout, 3, stride=2, pad=1, output_pad=1), cout))
            c = cout
        self.up = ups
        self.head_pad = cfg.stem_kernel // 2
        self.head = Conv3d(rng, c, cfg.out_channels, cfg.stem_kernel, gain=1.0)
        # start from an empty prediction: random head weights add noise of
        # order 1 over a mostly-zero target and the l1 term then spends
        # hundreds of steps removing it
        self.head.w.data[...] = 0

    def __call__(self, h):
        for block in self.res:
            h = block(h)
        for layer in self.up:
            h = layer(h)
        return self.head(ad.replication_pad3d(h, self.head_pad))


class TransVert(Module):
    """Generator mapping (x_s, x_c, y_s, y_c) to a 64^3 label-regression volume.

    Inputs are tensors of shape (N, 1, 1, P, P) for the sagittal view and
    (N, 1, P, 1, P) for the coronal view. The output is in scaled units
    (label / 24); see :data:`transvert.samples.LABEL_SCALE`.
    """

    def __init__(self, cfg=None, variant=AblationVariant.FULL, seed=0):
        self.cfg = cfg or ModelConfig()
        self.variant = AblationVariant(variant)
        rng = np.random.default_rng(seed)
        v = self.variant
        self.enc_s = Encoder(rng, self.cfg, SAGITTAL, v.attention)
        self.lift_s = Lift(rng, self.cfg, SAGITTAL) if v.fusion == "lift" else None
        if CORONAL in v.views:
            self.enc_c = Encoder(rng, self.cfg, CORONAL, v.attention)
            self.lift_c = Lift(rng, self.cfg, CORONAL) if v.fusion == "lift" else None
        else:
            self.enc_c = self.lift_c = None
        self.decoder = Decoder(rng, self.cfg)
        self._trace = None
        for m in self._modules_recursive():
            if isinstance(m, BatchNorm3d):
                m.eval_stats = self.cfg.bn_eval_stats

    def fuse(self, x_s, x_c, y_s, y_c):
        f_s = self.enc_s(x_s, y_s)
        self._record("enc_s", f_s)
        if self.enc_c is None:
            l_s = self.lift_s(f_s)
            zero = Tensor(np.zeros(l_s.shape, dtype=l_s.dtype))
            self._record("lift_s", l_s)
            return ad.concat([l_s, zero], 1)
        f_c = self.enc_c(x_c, y_c)
        self._record("enc_c", f_c)
        if self.variant.fusion == "outer":
            l_s, l_c = outer_product_fuse(f_s, f_c)
        else:
            l_s, l_c = self.lift_s(f_s), self.lift_c(f_c)
        self._record("lift_s", l_s)
        self._record("lift_c", l_c)
        return ad.concat([l_s, l_c], 1)

    def __call__(self, x_s, x_c, y_s, y_c):
        fused = self.fuse(*(ad.as_tensor(t) for t in (x_s, x_c, y_s, y_c)))
        self._record("fused", fused)
        return self.decoder(fused)

    def trace_shapes(self, x_s, x_c, y_s, y_c):
        """Forward once and return the intermediate shapes keyed by stage."""
        self._trace = {}
        try:
            out = self(x_s, x_c, y_s, y_c)
            shapes = dict(self._trace)
            shapes["output"] = out.shape
            return shapes
        finally:
            self._trace = None

    def _record(self, key, t):
        if self._trace is not None:
            self._trace[key] = t.shape


class Discriminator(Module):
    """Spectral-normalized stride-2 convs down to 4^3, stride-1 refinement, sigmoid."""

    def __init__(self, cfg=None, seed=0):
        self.cfg = cfg or ModelConfig()
        rng = np.random.default_rng(seed)
        ch = self.cfg.disc_channels
        layers, cin = [], 1
        for _ in range(self.cfg.disc_downsamples):
            layers.append(Conv3d(rng, cin, ch, 4, stride=2, pad=1, spectral=True))
            cin = ch
        n_ref = self.cfg.disc_refine_layers
        for j in range(n_ref):
            cout = 1 if j == n_ref - 1 else ch
            layers.append(Conv3d(rng, cin, cout, 4, stride=1, pad=1 if j % 2 == 0 else 2, spectral=True))
            cin = cout
        self.layers = layers

    def __call__(self, vol):
        vol = ad.as_tensor(vol)
        p = self.cfg.patch
        if vol.shape[1:] != (1, p, p, p):
            raise ValueError(f"discriminator expects (N,1,{p},{p},{p}), got {vol.shape}")
        h = vol
        for j, layer in enumerate(self.layers):
            h = layer(h)
            if j < len(self.layers) - 1:
                h = ad.relu(h)
        return ad.sigmoid(h)


def embed_view(img2d, view):
    """(P, P) or (N, P, P) array -> (N, 1, ...) tensor with the view's singleton axis."""
    a = np.asarray(img2d)
    if a.ndim == 2:
        a = a[None]
    axis = 2 + COLLAPSED_AXIS[view]
    return Tensor(np.expand_dims(a[:, None], axis).astype(ad.default_dtype(), copy=False))
