"""Shared test utilities: oracles, finite differences, IDX fixture writers,
synthetic data."""

from __future__ import annotations

import gzip
import math
import struct
from pathlib import Path

import numpy as np

from aswl import ops
from aswl.layers import attention_vector, build_model
from aswl.pruning import sparsity_regularizer
from aswl.tensor import Tape, Tensor, backward
from aswl.training import Adam, loss_forward


def oracle_mask(w: np.ndarray, p: float) -> np.ndarray:
    """Independent pruning reference: sort |w| ascending (ties by flat index),
    zero the first ceil(p*n), keep the rest."""
    flat = w.ravel()
    k = math.ceil(p * flat.size)
    order = sorted(range(flat.size), key=lambda i: (abs(flat[i]), i))
    mask = np.ones(flat.size)
    for i in order[:k]:
        mask[i] = 0
    return mask.reshape(w.shape)


def dense_trainer_reference(arch: str, seed: int, batch_list, lam: float, lr: float):
    """A conventional dense trainer built straight on the ops: no masks, no
    gates, no pruning machinery. Returns per-step parameter snapshots."""
    model = build_model(arch, seed=seed)
    params = []
    layer_specs = []
    for layer in model.layers:
        w = Tensor(layer.w.data.copy(), requires_grad=True)
        b = Tensor(layer.bias.data.copy(), requires_grad=True)
        params.extend([w, b])
        layer_specs.append((w, b))
    optimizer = Adam(lr=lr)
    snapshots = []
    for images, labels in batch_list:
        with Tape() as tape:
            h = Tensor(images)
            for i, (w, b) in enumerate(layer_specs):
                h = ops.add_bias(ops.matmul(h, w), b)
                if i < len(layer_specs) - 1:
                    h = ops.relu(h)
            ce = ops.softmax_cross_entropy(h, labels)
            l2 = ops.scale(ops.sum_of_squares([w for w, _ in layer_specs]), lam)
            loss = ops.add(ce, l2)
        backward(tape, loss)
        optimizer.step(params)
        snapshots.append([p.data.copy() for p in params])
    return snapshots


def total_loss_value(model, images, labels, cfg) -> float:
    """Full objective (CE + L2 + gamma*Psi) with the current masks, untaped."""
    loss, _, _, _, psi = loss_forward(model, images, labels, cfg)
    return loss.item() + cfg.gamma * psi


def tape_gradients(model, images, labels, cfg) -> list[np.ndarray]:
    """Gradients per model.parameters(), tape plus the analytic Psi term."""
    with Tape() as tape:
        loss, *_ = loss_forward(model, images, labels, cfg)
    backward(tape, loss)
    if cfg.gamma > 0:
        _, psi_grad = sparsity_regularizer(attention_vector(model),
                                           model.weight_counts(), cfg.alpha)
        for layer, g in zip(model.layers, psi_grad):
            layer.attention.accumulate_grad(
                np.asarray(cfg.gamma * g, dtype=layer.attention.dtype))
    return [p.grad.copy() for p in model.parameters()]


def finite_difference_gradients(model, images, labels, cfg, h: float) -> list[np.ndarray]:
    """Central differences of the full objective for every parameter element."""
    grads = []
    for p in model.parameters():
        flat = p.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            up = total_loss_value(model, images, labels, cfg)
            flat[i] = saved - h
            down = total_loss_value(model, images, labels, cfg)
            flat[i] = saved
            g[i] = (up - down) / (2 * h)
        grads.append(g.reshape(p.shape))
    return grads


def max_rel_error(fd: list[np.ndarray], ad: list[np.ndarray]) -> float:
    worst = 0.0
    for f, a in zip(fd, ad):
        rel = np.abs(f - a) / np.maximum(1.0, np.abs(f))
        worst = max(worst, float(rel.max()))
    return worst


def write_idx_images(path, images: np.ndarray, compress: bool = False) -> None:
    """Write uint8 images [N, rows, cols] in IDX format (magic 0x803)."""
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    payload = struct.pack(">IIII", 0x00000803, n, rows, cols) + images.tobytes()
    _write(path, payload, compress)


def write_idx_labels(path, labels, compress: bool = False) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    payload = struct.pack(">II", 0x00000801, labels.size) + labels.tobytes()
    _write(path, payload, compress)


def _write(path, payload: bytes, compress: bool) -> None:
    if compress:
        payload = gzip.compress(payload, mtime=0)
    Path(path).write_bytes(payload)


def synthetic_digits(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Procedural 10-class 28x28 glyph images (uint8) with jitter and noise.

    Stands in for handwritten digits when the real IDX files are not
    available; each class is a distinct geometric pattern.
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=n)
    yy, xx = np.mgrid[0:28, 0:28]
    images = np.zeros((n, 28, 28), dtype=np.float64)
    for i in range(n):
        c = labels[i]
        dy, dx = rng.integers(-3, 4, size=2)
        cy, cx = 14 + dy, 14 + dx
        t = rng.integers(2, 4)          # stroke thickness
        g = np.zeros((28, 28), dtype=bool)
        if c == 0:
            g = np.abs(yy - (cy - 7)) < t
        elif c == 1:
            g = np.abs(yy - (cy + 6)) < t
        elif c == 2:
            g = np.abs(xx - (cx - 7)) < t
        elif c == 3:
            g = np.abs(xx - (cx + 6)) < t
        elif c == 4:
            d = np.maximum(np.abs(yy - cy), np.abs(xx - cx))
            g = (d >= 7 - t) & (d <= 7)
        elif c == 5:
            g = (yy - cy) ** 2 + (xx - cx) ** 2 <= 36
        elif c == 6:
            g = np.abs((yy - cy) - (xx - cx)) < t
        elif c == 7:
            g = np.abs((yy - cy) + (xx - cx)) < t
        elif c == 8:
            g = (np.abs(yy - cy) < t) | (np.abs(xx - cx) < t)
        else:
            r2 = (yy - cy) ** 2 + (xx - cx) ** 2
            g = (r2 >= (7 - t) ** 2) & (r2 <= 49)
        img = g * rng.uniform(0.6, 1.0)
        img = img + rng.uniform(0.0, 0.15, size=(28, 28))
        images[i] = np.clip(img, 0.0, 1.0)
    return (images * 255).astype(np.uint8), labels.astype(np.uint8)


def make_synthetic_mnist_dir(root, n_train: int, n_test: int, seed: int) -> Path:
    """Write a complete MNIST-shaped IDX directory with synthetic glyphs."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    train_images, train_labels = synthetic_digits(n_train, seed)
    test_images, test_labels = synthetic_digits(n_test, seed + 1)
    write_idx_images(root / "train-images-idx3-ubyte.gz", train_images, compress=True)
    write_idx_labels(root / "train-labels-idx1-ubyte.gz", train_labels, compress=True)
    write_idx_images(root / "t10k-images-idx3-ubyte.gz", test_images, compress=True)
    write_idx_labels(root / "t10k-labels-idx1-ubyte.gz", test_labels, compress=True)
    return root
