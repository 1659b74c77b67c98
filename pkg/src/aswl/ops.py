"""Differentiable operations over :class:`~aswl.tensor.Tensor`.

Each op computes its forward value eagerly and, when a tape is active and
some input wants gradients, records a closure implementing the local
gradient rule. Without an active tape the ops are plain numpy forward
passes, which is the path evaluation and inference take.

Convolution uses NHWC layout and cross-correlation (no kernel flip);
columns built for the forward pass are kept alive by the backward closure.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, active_tape


def _maybe_record(op, inputs, out, rule):
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, rule)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a [m,k] by b [k,n]."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    def rule(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _maybe_record("matmul", (a, b), out, rule)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, _, _, c = xp.shape
    cols = np.empty((n, oh, ow, kh, kw, c), dtype=xp.dtype)
    for p in range(kh):
        for q in range(kw):
            cols[:, :, :, p, q, :] = xp[:, p:p + oh * stride:stride, q:q + ow * stride:stride, :]
    return cols.reshape(n * oh * ow, kh * kw * c)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x [N,H,W,Cin] with kernel [kh,kw,Cin,Cout]."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d needs 4-d input and kernel, have {x.shape} and {kernel.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, have {stride}")
    if padding < 0:
        raise ShapeError(f"conv2d padding must be >= 0, have {padding}")
    n, h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(
            f"conv2d kernel {kernel.shape} larger than padded input {(n, hp, wp, cin)}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1

    if padding:
        xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    kmat = kernel.data.reshape(kh * kw * cin, cout)
    out = Tensor((cols @ kmat).reshape(n, oh, ow, cout))

    def rule(g):
        gmat = g.reshape(n * oh * ow, cout)
        if kernel.requires_grad:
            kernel.accumulate_grad((cols.T @ gmat).reshape(kernel.shape))
        if x.requires_grad:
            gcols = (gmat @ kmat.T).reshape(n, oh, ow, kh, kw, cin)
            gxp = np.zeros_like(xp)
            for p in range(kh):
                for q in range(kw):
                    gxp[:, p:p + oh * stride:stride, q:q + ow * stride:stride, :] += \
                        gcols[:, :, :, p, q, :]
            if padding:
                gxp = gxp[:, padding:padding + h, padding:padding + w, :]
            x.accumulate_grad(gxp)

    return _maybe_record("conv2d", (x, kernel), out, rule)


def scalar_gate(t: Tensor, a: Tensor) -> Tensor:
    """Multiply a tensor elementwise by a recorded scalar."""
    if a.data.size != 1:
        raise ShapeError(f"gate scalar must have a single element, have shape {a.shape}")
    out = Tensor(a.data.reshape(()) * t.data)

    def rule(g):
        if t.requires_grad:
            t.accumulate_grad(a.data.reshape(()) * g)
        if a.requires_grad:
            a.accumulate_grad(np.sum(g * t.data).reshape(a.shape).astype(a.dtype, copy=False))

    return _maybe_record("scalar_gate", (t, a), out, rule)


def apply_mask(t: Tensor, mask: np.ndarray) -> Tensor:
    """Elementwise product with a constant 0/1 mask.

    The gradient rule multiplies by the same mask, so masked slots never
    receive a fresh gradient: this is the junction that routes gradients
    computed on compressed weights back to the dense copy.
    """
    if mask.shape != t.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match tensor shape {t.shape}")
    out = Tensor(t.data * mask)

    def rule(g):
        if t.requires_grad:
            t.accumulate_grad(g * mask)

    return _maybe_record("apply_mask", (t,), out, rule)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a bias vector along the trailing axis."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"bias shape {b.shape} does not match output shape {x.shape}")
    out = Tensor(x.data + b.data)

    def rule(g):
        if x.requires_grad:
            x.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g.reshape(-1, b.shape[0]).sum(axis=0))

    return _maybe_record("add_bias", (x, b), out, rule)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))

    def rule(g):
        if x.requires_grad:
            x.accumulate_grad(g * (x.data > 0))

    return _maybe_record("relu", (x,), out, rule)


def max_pool2d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping max pooling with window == stride.

    Ties route the gradient to the first maximum in window scan order,
    keeping the backward pass deterministic.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2d needs 4-d input, have {x.shape}")
    n, h, w, c = x.shape
    if window < 1 or h % window or w % window:
        raise ShapeError(f"max_pool2d window {window} does not tile input {x.shape}")
    oh, ow = h // window, w // window
    tiles = x.data.reshape(n, oh, window, ow, window, c)
    tiles = tiles.transpose(0, 1, 3, 5, 2, 4).reshape(n, oh, ow, c, window * window)
    idx = np.argmax(tiles, axis=-1)
    out = Tensor(np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0])

    def rule(g):
        if x.requires_grad:
            gtiles = np.zeros_like(tiles)
            np.put_along_axis(gtiles, idx[..., None], g[..., None], axis=-1)
            gx = gtiles.reshape(n, oh, ow, c, window, window).transpose(0, 1, 4, 2, 5, 3)
            x.accumulate_grad(gx.reshape(n, h, w, c))

    return _maybe_record("max_pool2d", (x,), out, rule)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def rule(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(x.shape))

    return _maybe_record("reshape", (x,), out, rule)


def flatten(x: Tensor) -> Tensor:
    """Collapse all axes after the batch axis."""
    return reshape(x, (x.shape[0], -1) if x.data.ndim > 1 else x.shape)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy between softmax(logits) and integer labels."""
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be [batch, classes], have {logits.shape}")
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"labels must be integers, have dtype {labels.dtype}")
    n, classes = logits.shape
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= classes:
        raise ValueError(f"labels out of range [0, {classes})")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    log_probs = (z - zmax) - np.log(sez)
    out = Tensor(np.asarray(-log_probs[np.arange(n), labels].mean(), dtype=z.dtype))

    def rule(g):
        if logits.requires_grad:
            probs = ez / sez
            probs[np.arange(n), labels] -= 1
            logits.accumulate_grad(probs * (g / n))

    return _maybe_record("softmax_cross_entropy", (logits,), out, rule)


def sum_of_squares(tensors) -> Tensor:
    """Sum of squared elements over one tensor or a list of tensors."""
    if isinstance(tensors, Tensor):
        tensors = [tensors]
    tensors = list(tensors)
    if not tensors:
        raise ValueError("sum_of_squares needs at least one tensor")
    dtype = tensors[0].dtype
    total = np.zeros((), dtype=dtype)
    for t in tensors:
        total = total + np.sum(t.data * t.data)
    out = Tensor(np.asarray(total, dtype=dtype))

    def rule(g):
        for t in tensors:
            if t.requires_grad:
                t.accumulate_grad(2 * t.data * g)

    return _maybe_record("sum_of_squares", tuple(tensors), out, rule)


def reduce_sum(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))

    def rule(g):
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(g, x.shape).astype(x.dtype, copy=False))

    return _maybe_record("reduce_sum", (x,), out, rule)


def add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeError(f"add shapes differ: {x.shape} vs {y.shape}")
    out = Tensor(x.data + y.data)

    def rule(g):
        if x.requires_grad:
            x.accumulate_grad(g)
        if y.requires_grad:
            y.accumulate_grad(g)

    return _maybe_record("add", (x, y), out, rule)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a plain (untracked) scalar constant."""
    out = Tensor(x.data * c)

    def rule(g):
        if x.requires_grad:
            x.accumulate_grad(g * c)

    return _maybe_record("scale", (x,), out, rule)
