"""Raw numpy kernels for 3-D convolution and its transpose.

Arrays use the layout (N, C, D, H, W). Two lowerings are used:

* ``gather``: explicit im2col through strided slice copies, valid for any
  stride. Memory grows as C_in * k^3 * V_out.
* ``flat``: stride-1 only. The zero-padded input is flattened, so every
  kernel offset becomes a constant shift of the flat index and the shifted
  operand is a view instead of a copy. Positions that wrap around a row are
  computed and then discarded.

Both paths are checked against a naive loop reference in the test suite.
"""
from __future__ import annotations

import itertools

import numpy as np

# elements per temporary buffer before a kernel splits the work into chunks
CHUNK_ELEMS = 1 << 24


def triple(v):
    if np.isscalar(v):
        return (int(v),) * 3
    out = tuple(int(i) for i in v)
    if len(out) != 3:
        raise ValueError(f"expected 3 values, got {v!r}")
    return out


def conv_out_size(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def conv_transpose_out_size(n, k, s, p, op):
    return (n - 1) * s - 2 * p + k + op


def _offsets(ksize):
    return list(itertools.product(*(range(k) for k in ksize)))


def _strided(a, o, stride, out_sp):
    """View of ``a[..., o_d::s_d, o_h::s_h, o_w::s_w]`` clipped to ``out_sp``."""
    sl = tuple(slice(oi, oi + si * (ni - 1) + 1, si) for oi, si, ni in zip(o, stride, out_sp))
    return a[(Ellipsis,) + sl]


def gather(xp, ksize, stride, out_sp):
    """im2col: (C, Dp, Hp, Wp) -> (C, K, V_out)."""
    c = xp.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(xp, ksize, axis=(1, 2, 3))
    win = win[(slice(None),) + tuple(slice(0, s * (n - 1) + 1, s) for s, n in zip(stride, out_sp))]
    # (C, Do, Ho, Wo, kd, kh, kw) -> (C, kd, kh, kw, Do, Ho, Wo)
    cols = np.ascontiguousarray(win.transpose(0, 4, 5, 6, 1, 2, 3))
    return cols.reshape(c, int(np.prod(ksize)), -1)


def scatter_add(buf, cols, ksize, stride, out_sp):
    """col2im: accumulate (C, K, V) columns into ``buf`` (C, Dp, Hp, Wp) in place."""
    c = buf.shape[0]
    offs = _offsets(ksize)
    cols = cols.reshape((c, len(offs)) + tuple(out_sp))
    for j, o in enumerate(offs):
        _strided(buf, o, stride, out_sp)[...] += cols[:, j]
    return buf


def _zero_pad(x, pad):
    if not any(pad):
        return x
    width = ((0, 0),) * (x.ndim - 3) + tuple((p, p) for p in pad)
    return np.pad(x, width)


def _crop(x, pad, sp):
    sl = tuple(slice(p, p + n) for p, n in zip(pad, sp))
    return x[(Ellipsis,) + sl]


# ---------------------------------------------------------------------------
# flat (stride 1) path

class _FlatLayout:
    def __init__(self, padded_sp, ksize):
        self.dp, self.hp, self.wp = padded_sp
        self.ksize = ksize
        self.out_sp = tuple(n - k + 1 for n, k in zip(padded_sp, ksize))
        do, ho, wo = self.out_sp
        self.L = self.dp * self.hp * self.wp
        self.Lq = (do - 1) * self.hp * self.wp + (ho - 1) * self.wp + wo
        self.deltas = [a * self.hp * self.wp + b * self.wp + c for a, b, c in _offsets(ksize)]

    def unflatten(self, q):
        """(C, Lq) with padded-grid addressing -> (C, Do, Ho, Wo)."""
        do, ho, wo = self.out_sp
        full = np.zeros((q.shape[0], do * self.hp * self.wp), dtype=q.dtype)
        full[:, : self.Lq] = q
        return full.reshape(q.shape[0], do, self.hp, self.wp)[:, :, :ho, :wo]

    def flatten(self, g):
        """(C, Do, Ho, Wo) -> (C, Lq), zero at wrap-around positions."""
        do, ho, wo = self.out_sp
        full = np.zeros((g.shape[0], do, self.hp, self.wp), dtype=g.dtype)
        full[:, :, :ho, :wo] = g
        return full.reshape(g.shape[0], -1)[:, : self.Lq]

    def chunk(self, per_offset):
        return max(1, min(len(self.deltas), CHUNK_ELEMS // max(per_offset, 1)))


class _SplitLayout(_FlatLayout):
    """Flat layout that unfolds the innermost kernel axis explicitly.

    The input side is expanded over ``kw`` (C_in * kw rows) and the
    remaining ``kd * kh`` offsets are handled as shifts of the result,
    which keeps both temporaries small when C_out is small.
    """

    def __init__(self, padded_sp, ksize):
        super().__init__(padded_sp, ksize)
        kd, kh, kw = ksize
        self.kw = kw
        self.Lc = self.L - kw + 1
        self.deltas_ab = [a * self.hp * self.wp + b * self.wp for a in range(kd) for b in range(kh)]

    def unfold_w(self, xf):
        ci = xf.shape[0]
        xc = np.empty((ci, self.kw, self.Lc), dtype=xf.dtype)
        for c in range(self.kw):
            xc[:, c] = xf[:, c : c + self.Lc]
        return xc.reshape(ci * self.kw, self.Lc)


def _split_weight(w3, lay):
    """(Co, Ci, K) -> (nab * Co, Ci * kw)."""
    co, ci, _ = w3.shape
    w = w3.reshape(co, ci, len(lay.deltas_ab), lay.kw)
    return np.ascontiguousarray(w.transpose(2, 0, 1, 3)).reshape(-1, ci * lay.kw)


def _split_forward(xf, w3, lay):
    co = w3.shape[0]
    z = (_split_weight(w3, lay) @ lay.unfold_w(xf)).reshape(len(lay.deltas_ab), co, lay.Lc)
    out = np.zeros((co, lay.Lq), dtype=z.dtype)
    for j, d in enumerate(lay.deltas_ab):
        out += z[j, :, d : d + lay.Lq]
    return out


def _split_backward(gq, xf, w3, lay, need_x=True, need_w=True):
    co, ci, nk = w3.shape
    nab = len(lay.deltas_ab)
    cols = np.zeros((nab, co, lay.Lc), dtype=gq.dtype)
    for j, d in enumerate(lay.deltas_ab):
        cols[j, :, d : d + lay.Lq] = gq
    cols = cols.reshape(nab * co, lay.Lc)
    gx = gw = None
    if need_w:
        g = cols @ lay.unfold_w(xf).T  # (nab*Co, Ci*kw)
        gw = g.reshape(nab, co, ci, lay.kw).transpose(1, 2, 0, 3).reshape(co, ci, nk)
    if need_x:
        t = (_split_weight(w3, lay).T @ cols).reshape(ci, lay.kw, lay.Lc)
        gx = np.zeros((ci, lay.L), dtype=gq.dtype)
        for c in range(lay.kw):
            gx[:, c : c + lay.Lc] += t[:, c]
    return gx, gw


def _use_split(ci, co, ksize, lay):
    return co <= ci and ci * ksize[2] * lay.Lc <= 4 * CHUNK_ELEMS


def _flat_forward(xf, w3, lay):
    """xf (Ci, L), w3 (Co, Ci, K) -> (Co, Lq)."""
    co, ci, nk = w3.shape
    out = np.zeros((co, lay.Lq), dtype=np.result_type(xf, w3))
    if co <= ci:
        # shift the (small) output side
        step = lay.chunk(co * lay.L)
        for s0 in range(0, nk, step):
            ks = range(s0, min(nk, s0 + step))
            wk = np.ascontiguousarray(w3[:, :, s0 : s0 + len(ks)].transpose(2, 0, 1)).reshape(-1, ci)
            z = (wk @ xf).reshape(len(ks), co, lay.L)
            for j, k in enumerate(ks):
                d = lay.deltas[k]
                out += z[j, :, d : d + lay.Lq]
    else:
        for k, d in enumerate(lay.deltas):
            out += w3[:, :, k] @ xf[:, d : d + lay.Lq]
    return out


def _flat_backward(gq, xf, w3, lay, need_x=True, need_w=True):
    """Gradients of ``_flat_forward`` w.r.t. xf and w3."""
    co, ci, nk = w3.shape
    gx = np.zeros((ci, lay.L), dtype=gq.dtype) if need_x else None
    gw = np.zeros((co, ci, nk), dtype=gq.dtype) if need_w else None
    if co <= ci:
        # unfold the (small) output gradient: cols[k, co, r] = gq[co, r - delta_k]
        step = lay.chunk(co * lay.L)
        for s0 in range(0, nk, step):
            ks = range(s0, min(nk, s0 + step))
            cols = np.zeros((len(ks), co, lay.L), dtype=gq.dtype)
            for j, k in enumerate(ks):
                d = lay.deltas[k]
                cols[j, :, d : d + lay.Lq] = gq
            cols2 = cols.reshape(-1, lay.L)
            if need_w:
                gw[:, :, s0 : s0 + len(ks)] = (cols2 @ xf.T).reshape(len(ks), co, ci).transpose(1, 2, 0)
            if need_x:
                wk = w3[:, :, s0 : s0 + len(ks)].transpose(1, 2, 0).reshape(ci, -1)
                gx += wk @ cols2
    else:
        for k, d in enumerate(lay.deltas):
            xs = xf[:, d : d + lay.Lq]
            if need_w:
                gw[:, :, k] = gq @ xs.T
            if need_x:
                gx[:, d : d + lay.Lq] += w3[:, :, k].T @ gq
    return gx, gw


def _use_flat(ci, nk, stride, vout):
    return stride == (1, 1, 1) and ci * nk * vout > CHUNK_ELEMS


# ---------------------------------------------------------------------------
# public kernels

def conv3d_forward(x, w, b, stride, pad):
    n, ci, *sp = x.shape
    co, ci_w, *ks = w.shape
    if ci != ci_w:
        raise ValueError(f"conv3d: input has {ci} channels, weight expects {ci_w}")
    ks, stride, pad = tuple(ks), triple(stride), triple(pad)
    out_sp = tuple(conv_out_size(a, k, s, p) for a, k, s, p in zip(sp, ks, stride, pad))
    if min(out_sp) <= 0:
        raise ValueError(f"conv3d: non-positive output size {out_sp} for input {tuple(sp)}")
    nk = int(np.prod(ks))
    dtype = np.result_type(x, w)
    y = np.empty((n, co) + out_sp, dtype=dtype)
    vout = int(np.prod(out_sp))
    flat = _use_flat(ci, nk, stride, vout)
    for i in range(n):
        xp = _zero_pad(x[i], pad)
        if flat:
            lay = _SplitLayout(xp.shape[1:], ks)
            fwd = _split_forward if _use_split(ci, co, ks, lay) else _flat_forward
            q = fwd(xp.reshape(ci, -1), w.reshape(co, ci, nk), lay)
            y[i] = lay.unflatten(q)
        else:
            cols = gather(xp, ks, stride, out_sp).reshape(ci * nk, vout)
            y[i] = (w.reshape(co, -1) @ cols).reshape((co,) + out_sp)
    if b is not None:
        y += b.reshape(1, co, 1, 1, 1)
    return y


def conv3d_backward(gy, x, w, stride, pad, need_x=True, need_w=True):
    n, ci, *sp = x.shape
    co, _, *ks = w.shape
    ks, stride, pad = tuple(ks), triple(stride), triple(pad)
    out_sp = gy.shape[2:]
    nk = int(np.prod(ks))
    vout = int(np.prod(out_sp))
    gx = np.empty_like(x, dtype=gy.dtype) if need_x else None
    gw = np.zeros(w.shape, dtype=gy.dtype) if need_w else None
    flat = _use_flat(ci, nk, stride, vout)
    for i in range(n):
        xp = _zero_pad(x[i], pad)
        if flat:
            lay = _SplitLayout(xp.shape[1:], ks)
            bwd = _split_backward if _use_split(ci, co, ks, lay) else _flat_backward
            gxf, gwi = bwd(lay.flatten(gy[i]), xp.reshape(ci, -1), w.reshape(co, ci, nk), lay, need_x, need_w)
            if need_w:
                gw += gwi.reshape(w.shape)
            if need_x:
                gx[i] = _crop(gxf.reshape(xp.shape), pad, sp)
        else:
            g2 = gy[i].reshape(co, vout)
            if need_w:
                cols = gather(xp, ks, stride, out_sp).reshape(ci * nk, vout)
                gw += (g2 @ cols.T).reshape(w.shape)
            if need_x:
                gcols = w.reshape(co, -1).T @ g2
                buf = np.zeros(xp.shape, dtype=gy.dtype)
                scatter_add(buf, gcols, ks, stride, out_sp)
                gx[i] = _crop(buf, pad, sp)
    return gx, gw


def _tconv_buffer(sp, ks, stride, pad, out_sp):
    return tuple(max((a - 1) * s + k, p + o) for a, k, s, p, o in zip(sp, ks, stride, pad, out_sp))


def conv_transpose3d_forward(x, w, b, stride, pad, output_pad):
    """Weight layout (C_in, C_out, kd, kh, kw), as the adjoint of conv3d."""
    n, ci, *sp = x.shape
    ci_w, co, *ks = w.shape
    if ci != ci_w:
        raise ValueError(f"conv_transpose3d: input has {ci} channels, weight expects {ci_w}")
    ks, stride, pad, op = tuple(ks), triple(stride), triple(pad), triple(output_pad)
    if any(o >= s for o, s in zip(op, stride)):
        raise ValueError(f"conv_transpose3d: output_pad {op} must be < stride {stride}")
    out_sp = tuple(conv_transpose_out_size(a, k, s, p, o) for a, k, s, p, o in zip(sp, ks, stride, pad, op))
    if min(out_sp) <= 0:
        raise ValueError(f"conv_transpose3d: non-positive output size {out_sp}")
    nk = int(np.prod(ks))
    vin = int(np.prod(sp))
    bshape = _tconv_buffer(sp, ks, stride, pad, out_sp)
    y = np.empty((n, co) + out_sp, dtype=np.result_type(x, w))
    for i in range(n):
        z = w.reshape(ci, co * nk).T @ x[i].reshape(ci, vin)
        buf = np.zeros((co,) + bshape, dtype=y.dtype)
        scatter_add(buf, z, ks, stride, tuple(sp))
        y[i] = _crop(buf, pad, out_sp)
    if b is not None:
        y += b.reshape(1, co, 1, 1, 1)
    return y


def conv_transpose3d_backward(gy, x, w, stride, pad, output_pad, need_x=True, need_w=True):
    n, ci, *sp = x.shape
    _, co, *ks = w.shape
    ks, stride, pad = tuple(ks), triple(stride), triple(pad)
    out_sp = gy.shape[2:]
    nk = int(np.prod(ks))
    vin = int(np.prod(sp))
    bshape = _tconv_buffer(sp, ks, stride, pad, out_sp)
    gx = np.empty_like(x, dtype=gy.dtype) if need_x else None
    gw = np.zeros(w.shape, dtype=gy.dtype) if need_w else None
    for i in range(n):
        buf = np.zeros((co,) + bshape, dtype=gy.dtype)
        sl = tuple(slice(p, p + o) for p, o in zip(pad, out_sp))
        buf[(slice(None),) + sl] = gy[i]
        cols = gather(buf, ks, stride, tuple(sp)).reshape(co * nk, vin)
        if need_x:
            gx[i] = (w.reshape(ci, co * nk) @ cols).reshape(x.shape[1:])
        if need_w:
            gw += (x[i].reshape(ci, vin) @ cols.T).reshape(w.shape)
    return gx, gw


def replication_pad3d(x, pad):
    pad = triple(pad)
    if not any(pad):
        return x.copy()
    width = ((0, 0),) * (x.ndim - 3) + tuple((p, p) for p in pad)
    return np.pad(x, width, mode="edge")


def replication_pad3d_backward(gy, pad, in_sp):
    """Fold border gradients back onto the edge voxels they were copied from."""
    pad = triple(pad)
    g = gy
    for ax, (p, n) in enumerate(zip(pad, in_sp)):
        if p == 0:
            continue
        axis = g.ndim - 3 + ax
        lo = np.take(g, range(0, p + 1), axis=axis).sum(axis=axis, keepdims=True)
        hi = np.take(g, range(p + n - 1, 2 * p + n), axis=axis).sum(axis=axis, keepdims=True)
        mid = np.take(g, range(p + 1, p + n - 1), axis=axis)
        if n == 1:
            g = lo + hi - np.take(g, [p], axis=axis)
        else:
            g = np.concatenate([lo, mid, hi], axis=axis)
    return g
