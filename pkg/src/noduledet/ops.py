"""Differentiable layers used by the slice detector and the 3D classifier.

Spatial operations accept either a single sample ``[C, *spatial]`` or a batch
``[N, C, *spatial]``.  All arithmetic runs on whatever dtype the inputs carry
(float64 in training).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import Tensor


def conv_output_extent(extent: int, kernel: int, stride: int, pad: int) -> int:
    return (extent + 2 * pad - kernel) // stride + 1


def transposed_output_extent(extent: int, kernel: int, stride: int, pad: int) -> int:
    return (extent - 1) * stride - 2 * pad + kernel


def _pad_spatial(x: np.ndarray, pad: int, nsp: int) -> np.ndarray:
    if pad == 0:
        return x
    widths = [(0, 0)] * (x.ndim - nsp) + [(pad, pad)] * nsp
    return np.pad(x, widths)


def _windows(xp: np.ndarray, kshape: Sequence[int], stride: int) -> np.ndarray:
    """Strided view ``[N, C, *out, *kernel]`` over a padded batch."""
    nsp = len(kshape)
    axes = tuple(range(2, 2 + nsp))
    view = sliding_window_view(xp, tuple(kshape), axis=axes)
    if stride != 1:
        view = view[(slice(None), slice(None)) + (slice(None, None, stride),) * nsp]
    return view


# Below this many input channels a single im2col product is faster than
# looping over kernel offsets; above it the im2col copy dominates.
_IM2COL_MAX_CHANNELS = 4


def _offset_slices(offset, out_sp, stride):
    return (slice(None), slice(None)) + tuple(
        slice(o, o + stride * (e - 1) + 1, stride) for o, e in zip(offset, out_sp)
    )


def _conv_fwd(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    nsp = w.ndim - 2
    xp = _pad_spatial(x, pad, nsp)
    if x.shape[1] >= _IM2COL_MAX_CHANNELS:
        out_sp = [(e - k) // stride + 1 for e, k in zip(xp.shape[2:], w.shape[2:])]
        out = None
        for offset in np.ndindex(*w.shape[2:]):
            part = np.tensordot(
                w[(slice(None), slice(None)) + offset], xp[_offset_slices(offset, out_sp, stride)], axes=([1], [1])
            )
            out = part if out is None else out + part
        # out: [C_out, N, *out_spatial]
        return np.moveaxis(out, 0, 1)
    win = _windows(xp, w.shape[2:], stride)
    k_axes = list(range(2 + nsp, 2 + 2 * nsp))
    out = np.tensordot(win, w, axes=([1] + k_axes, [1] + list(range(2, 2 + nsp))))
    # out: [N, *out_spatial, C_out]
    return np.moveaxis(out, -1, 1)


def _conv_grad_input(
    g: np.ndarray, w: np.ndarray, stride: int, pad: int, in_spatial: Sequence[int]
) -> np.ndarray:
    """Adjoint of :func:`_conv_fwd` with respect to its input."""
    nsp = w.ndim - 2
    n = g.shape[0]
    out_sp = g.shape[2:]
    padded = [e + 2 * pad for e in in_spatial]
    gx = np.zeros((n, w.shape[1], *padded), dtype=np.result_type(g, w))
    for offset in np.ndindex(*w.shape[2:]):
        contrib = np.tensordot(g, w[(slice(None), slice(None)) + offset], axes=([1], [0]))
        gx[_offset_slices(offset, out_sp, stride)] += np.moveaxis(contrib, -1, 1)
    if pad:
        gx = gx[(slice(None), slice(None)) + tuple(slice(pad, pad + e) for e in in_spatial)]
    return gx


def _conv_grad_weight(
    x: np.ndarray, g: np.ndarray, stride: int, pad: int, kshape: Sequence[int]
) -> np.ndarray:
    nsp = len(kshape)
    xp = _pad_spatial(x, pad, nsp)
    batch_sp = [0] + list(range(2, 2 + nsp))
    if x.shape[1] >= _IM2COL_MAX_CHANNELS:
        gw = np.empty((g.shape[1], x.shape[1], *kshape), dtype=np.result_type(x, g))
        for offset in np.ndindex(*kshape):
            gw[(slice(None), slice(None)) + offset] = np.tensordot(
                g, xp[_offset_slices(offset, g.shape[2:], stride)], axes=(batch_sp, batch_sp)
            )
        return gw
    win = _windows(xp, kshape, stride)
    # [C_out, C_in, *k]
    return np.tensordot(g, win, axes=(batch_sp, batch_sp))


def _batched(x: Tensor, nsp: int) -> tuple[np.ndarray, bool]:
    if x.ndim == nsp + 1:
        return x.data[None], True
    if x.ndim == nsp + 2:
        return x.data, False
    raise ShapeError(f"expected [C,{nsp}d] or [N,C,{nsp}d] input, got shape {x.shape}")


def _convnd(x: Tensor, w: Tensor, b: Tensor | None, stride: int, pad: int, nsp: int) -> Tensor:
    if w.ndim != nsp + 2:
        raise ShapeError(f"kernel must have rank {nsp + 2}, got shape {w.shape}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"invalid stride={stride} / pad={pad}")
    xd, squeeze = _batched(x, nsp)
    if xd.shape[1] != w.shape[1]:
        raise ShapeError(
            f"kernel expects {w.shape[1]} input channels but input has {xd.shape[1]} "
            f"(input {x.shape}, kernel {w.shape})"
        )
    in_sp = xd.shape[2:]
    for extent, k in zip(in_sp, w.shape[2:]):
        if k > extent + 2 * pad:
            raise ShapeError(f"kernel {w.shape[2:]} larger than padded input {in_sp} (pad {pad})")
    out = _conv_fwd(xd, w.data, stride, pad)
    if b is not None:
        out = out + b.data.reshape((1, -1) + (1,) * nsp)
    wd, kshape = w.data, w.shape[2:]

    def backward(g):
        gb = g[None] if squeeze else g
        gx = _conv_grad_input(gb, wd, stride, pad, in_sp) if x.requires_grad else None
        gw = _conv_grad_weight(xd, gb, stride, pad, kshape) if w.requires_grad else None
        if gx is not None and squeeze:
            gx = gx[0]
        grads = [gx, gw]
        if b is not None:
            grads.append(gb.sum(axis=(0,) + tuple(range(2, 2 + nsp))))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return Tensor.from_op(out[0] if squeeze else out, parents, backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2D cross-correlation; ``w`` is ``[C_out, C_in, kH, kW]``."""
    return _convnd(x, w, b, stride, pad, 2)


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """3D cross-correlation; ``w`` is ``[C_out, C_in, kD, kH, kW]``."""
    return _convnd(x, w, b, stride, pad, 3)


def transposed_conv2d(
    x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0
) -> Tensor:
    """Learnable upsampling; ``w`` is ``[C_in, C_out, kH, kW]``.

    The forward pass is exactly the input-gradient of :func:`conv2d` run with
    the same kernel, stride and padding.
    """
    nsp = 2
    if w.ndim != 4:
        raise ShapeError(f"kernel must have rank 4, got shape {w.shape}")
    xd, squeeze = _batched(x, nsp)
    if xd.shape[1] != w.shape[0]:
        raise ShapeError(f"kernel expects {w.shape[0]} input channels, input has {xd.shape[1]}")
    if stride < 1 or not 0 <= pad < min(w.shape[2:]):
        raise ShapeError(f"invalid stride={stride} / pad={pad} for kernel {w.shape[2:]}")
    out_sp = [transposed_output_extent(e, k, stride, pad) for e, k in zip(xd.shape[2:], w.shape[2:])]
    if min(out_sp) < 1:
        raise ShapeError(f"transposed convolution would produce extents {out_sp}")
    out = _conv_grad_input(xd, w.data, stride, pad, out_sp)
    if b is not None:
        out = out + b.data.reshape(1, -1, 1, 1)
    wd = w.data

    def backward(g):
        gb = g[None] if squeeze else g
        gx = _conv_fwd(gb, wd, stride, pad) if x.requires_grad else None
        # the adjoint conv takes g as input and x as its output gradient
        gw = _conv_grad_weight(gb, xd, stride, pad, wd.shape[2:]) if w.requires_grad else None
        if gx is not None and squeeze:
            gx = gx[0]
        grads = [gx, gw]
        if b is not None:
            grads.append(gb.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return Tensor.from_op(out[0] if squeeze else out, parents, backward)


def max_pool(x: Tensor, window, stride=None, dims: int = 2) -> Tensor:
    """Max pooling over the trailing ``dims`` axes.

    Ties resolve to the first element in row-major window order; the
    gradient flows to that element only.
    """
    if dims not in (2, 3):
        raise ShapeError("max_pool supports 2 or 3 pooled axes")
    window = (window,) * dims if np.isscalar(window) else tuple(window)
    stride = window if stride is None else ((stride,) * dims if np.isscalar(stride) else tuple(stride))
    if len(window) != dims or len(stride) != dims:
        raise ShapeError("window/stride rank must equal dims")
    if min(window) < 1 or min(stride) < 1:
        raise ShapeError(f"pool window {window} and stride {stride} must be positive")
    sp = x.shape[-dims:]
    if any(k > e for k, e in zip(window, sp)):
        raise ShapeError(f"pool window {window} exceeds input extents {sp}")

    data = x.data
    lead = data.shape[:-dims]
    axes = tuple(range(data.ndim - dims, data.ndim))
    view = sliding_window_view(data, window, axis=axes)
    view = view[(Ellipsis,) + tuple(slice(None, None, s) for s in stride) + (slice(None),) * dims]
    out_sp = view.shape[len(lead) : len(lead) + dims]
    flat = view.reshape(view.shape[: len(lead) + dims] + (-1,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    # flat input index of each winner for the scatter in backward
    local = np.unravel_index(arg, window)
    grids = np.meshgrid(*[np.arange(e) for e in out_sp], indexing="ij")
    coords = [g * s + l for g, s, l in zip(grids, stride, local)]
    spatial_idx = np.ravel_multi_index(coords, sp)
    lead_count = int(np.prod(lead)) if lead else 1
    plane = int(np.prod(sp))
    flat_idx = (spatial_idx.reshape(lead_count, -1) + plane * np.arange(lead_count)[:, None]).ravel()
    total = data.size

    def backward(g):
        gx = np.bincount(flat_idx, weights=g.ravel(), minlength=total)
        return (gx.reshape(data.shape),)

    return Tensor.from_op(out, (x,), backward)


def roi_cells(start: int, length: int, grid: int) -> list[tuple[int, int]]:
    """Half-open index ranges of the ``grid`` sub-windows along one roi axis."""
    cells = []
    for i in range(grid):
        lo = (i * length) // grid
        hi = ((i + 1) * length) // grid
        lo = min(lo, length - 1)
        hi = max(hi, lo + 1)
        cells.append((start + lo, start + hi))
    return cells


def roi_bounds(roi, height: int, width: int) -> tuple[int, int, int, int]:
    """Clip a corner-form roi ``(x1, y1, x2, y2)`` in feature cells to integer bounds.

    Returns ``(x0, y0, w, h)``; the roi covers columns ``[x0, x0 + w)``.
    """
    x1, y1, x2, y2 = (float(v) for v in roi)
    x0 = max(int(np.floor(x1)), 0)
    y0 = max(int(np.floor(y1)), 0)
    xe = min(int(np.ceil(x2)), width)
    ye = min(int(np.ceil(y2)), height)
    if xe <= x0 or ye <= y0:
        raise ShapeError(f"roi {tuple(roi)} has zero area after clipping to {height}x{width}")
    return x0, y0, xe - x0, ye - y0


def roi_pool(featmap: Tensor, rois, grid=(7, 7)) -> Tensor:
    """Max-pool each roi of a ``[C, H, W]`` map onto a fixed ``grid`` (W_g, H_g).

    ``rois`` is one corner-form box ``(x1, y1, x2, y2)`` in feature-map cells
    (returns ``[C, H_g, W_g]``) or an ``[R, 4]`` array (returns ``[R, C, H_g, W_g]``).
    """
    if featmap.ndim != 3:
        raise ShapeError(f"roi_pool expects a [C,H,W] map, got {featmap.shape}")
    rois_arr = np.asarray(rois, dtype=np.float64)
    single = rois_arr.ndim == 1
    rois_arr = rois_arr.reshape(-1, 4)
    gw, gh = grid
    c, h, w = featmap.shape

    row_cells = []
    col_cells = []
    for roi in rois_arr:
        x0, y0, rw, rh = roi_bounds(roi, h, w)
        row_cells.append(roi_cells(y0, rh, gh))
        col_cells.append(roi_cells(x0, rw, gw))
    mh = max(hi - lo for cells in row_cells for lo, hi in cells)
    mw = max(hi - lo for cells in col_cells for lo, hi in cells)
    # pad each cell's index list by repeating its last index (max/argmax unaffected)
    rows = np.array([[[min(lo + a, hi - 1) for a in range(mh)] for lo, hi in cells] for cells in row_cells])
    cols = np.array([[[min(lo + b, hi - 1) for b in range(mw)] for lo, hi in cells] for cells in col_cells])
    r = len(rois_arr)
    # spatial flat index per [R, gh, mh, gw, mw]
    spatial = rows[:, :, :, None, None] * w + cols[:, None, None, :, :]
    spatial = spatial.transpose(0, 1, 3, 2, 4).reshape(r, gh, gw, mh * mw)
    plane = featmap.data.reshape(c, h * w)
    gathered = plane[:, spatial]  # [C, R, gh, gw, mh*mw]
    arg = gathered.argmax(axis=-1)
    out = np.take_along_axis(gathered, arg[..., None], axis=-1)[..., 0]
    winner = np.take_along_axis(np.broadcast_to(spatial, gathered.shape), arg[..., None], axis=-1)[..., 0]
    flat_idx = (winner + (np.arange(c) * h * w)[:, None, None, None]).ravel()
    out = out.transpose(1, 0, 2, 3)  # [R, C, gh, gw]
    order = np.arange(out.size).reshape(c, r, gh, gw).transpose(1, 0, 2, 3).ravel()
    flat_idx_out_order = flat_idx[order]
    total = featmap.size

    def backward(g):
        gx = np.bincount(flat_idx_out_order, weights=g.ravel(), minlength=total)
        return (gx.reshape(featmap.shape),)

    return Tensor.from_op(out[0] if single else np.ascontiguousarray(out), (featmap,), backward)


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``w @ x + b`` for ``x`` of shape ``[N]`` or a batch ``[B, N]``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weights {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"dense: bias {b.shape} does not match weights {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def backward(g):
        gx = g @ wd
        gw = np.outer(g, xd) if g.ndim == 1 else g.T @ xd
        grads = [gx, gw]
        if b is not None:
            grads.append(g if g.ndim == 1 else g.sum(axis=0))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return Tensor.from_op(out, parents, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor.from_op(x.data * mask, (x,), lambda g: (g * mask,))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout; identity when ``training`` is false or ``rate`` is 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return Tensor.from_op(x.data * keep, (x,), lambda g: (g * keep,))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Negative log-likelihood of ``labels`` under a softmax over the last axis.

    ``[K]`` logits with an int label give a scalar; ``[B, K]`` logits with
    ``B`` labels give the ``[B]`` per-sample losses.
    """
    k = logits.shape[-1]
    if k < 2:
        raise ShapeError("softmax cross-entropy needs at least two classes")
    lab = np.asarray(labels, dtype=np.int64)
    if lab.shape != logits.shape[:-1]:
        raise ShapeError(f"labels {lab.shape} do not match logits {logits.shape}")
    if np.any(lab < 0) or np.any(lab >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    logp = log_softmax(logits.data)
    picked = np.take_along_axis(logp, lab[..., None], axis=-1)[..., 0]
    loss = -picked
    if loss.ndim == 0:
        loss = loss.reshape(1)
    onehot = np.eye(k, dtype=logp.dtype)[lab]
    prob = np.exp(logp)

    def backward(g):
        return ((prob - onehot) * g.reshape(lab.shape + (1,)),)

    return Tensor.from_op(loss, (logits,), backward)


def smooth_l1(pred: Tensor, target) -> Tensor:
    """Sum over the last axis of 0.5 d^2 (|d| < 1) or |d| - 0.5."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if t.shape != pred.shape:
        raise ShapeError(f"smooth_l1: prediction {pred.shape} vs target {t.shape}")
    d = pred.data - t
    ad = np.abs(d)
    quad = ad < 1.0
    per = np.where(quad, 0.5 * d * d, ad - 0.5).sum(axis=-1)
    if per.ndim == 0:
        per = per.reshape(1)
    slope = np.where(quad, d, np.sign(d))
    out_shape = pred.shape[:-1]

    def backward(g):
        return (slope * g.reshape(out_shape + (1,)),)

    return Tensor.from_op(per, (pred,), backward)


def he_init(shape, fan_in: int, rng: np.random.Generator) -> Tensor:
    """Zero-mean Gaussian weights with variance ``2 / fan_in``."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=tuple(shape)), requires_grad=True)


def flatten(x: Tensor, start: int = 0) -> Tensor:
    return x.reshape(x.shape[:start] + (-1,))
