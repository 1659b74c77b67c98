"""Persistence: compact sparse inference export and training checkpoints.

The sparse format stores, per layer, the surviving weight values with the
attention already multiplied in (and the bias scaled the same way), plus
their ascending flat indices. A model imported from it reproduces the
attended forward pass bit-exactly with no attention scalars left.

Layout (little-endian): magic "ASWL", version u16, layer count u16,
architecture text (u32 length + utf-8), then per layer: kind u8, ndim u8,
dims u32*ndim, stride u8, pad u8, nnz u32, indices u32*nnz, values
f32*nnz, bias count u32, bias f32*count.

Checkpoints are npz archives carrying dense weights, masks, attentions,
optimizer state and the iteration counter bit-exactly.
"""

from __future__ import annotations

import io
import json
import struct
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .layers import Model, build_model
from .tensor import Tensor
from .training import Adam, AdamSlot, MomentumSlot, SGD, TrainConfig, trainable_parameters

SPARSE_MAGIC = b"ASWL"
SPARSE_VERSION = 1
CHECKPOINT_VERSION = 1

_KIND_CODES = {"dense": 0, "conv2d": 1}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


@dataclass
class SparseLayer:
    kind: str
    shape: tuple[int, ...]
    stride: int
    padding: int
    indices: np.ndarray           # u32, strictly ascending
    values: np.ndarray            # f32, attention folded in
    bias: np.ndarray              # f32, attention folded in


@dataclass
class SparseModel:
    layers: list[SparseLayer]
    arch_text: str
    version: int = SPARSE_VERSION

    def pruned_ratio(self) -> float:
        total = sum(int(np.prod(layer.shape)) for layer in self.layers)
        kept = sum(layer.indices.size for layer in self.layers)
        return (total - kept) / total


def export_sparse(model: Model) -> SparseModel:
    """Fold each layer's attention into its surviving weights and bias."""
    layers = []
    for layer in model.layers:
        a = layer.attention.data.reshape(())
        folded = a * layer.w_hat.data
        indices = np.flatnonzero(layer.mask.ravel()).astype(np.uint32)
        layers.append(SparseLayer(
            kind=layer.kind,
            shape=layer.w.shape,
            stride=layer.stride,
            padding=layer.padding,
            indices=indices,
            values=folded.ravel()[indices].astype(np.float32, copy=False),
            bias=(a * layer.bias.data).astype(np.float32, copy=False),
        ))
    return SparseModel(layers=layers, arch_text=model.arch_text)


def sparse_file_bytes(model: Model) -> int:
    """Exact on-disk size write_sparse would produce for this model."""
    arch = model.arch_text.encode("utf-8")
    size = 4 + 2 + 2 + 4 + len(arch)
    for layer in model.layers:
        nnz = layer.n_w - layer.mask_zeros()
        size += 1 + 1 + 4 * layer.w.data.ndim + 1 + 1 + 4 + 8 * nnz + 4 + 4 * layer.bias.size
    return size


def dense_file_bytes(model: Model) -> int:
    """Raw float32 bytes of all dense weights and biases."""
    return 4 * sum(layer.n_w + layer.bias.size for layer in model.layers)


@dataclass
class CompressionReport:
    dense_bytes: int
    sparse_bytes: int
    ratio: float


def report_compression(model: Model) -> CompressionReport:
    dense = dense_file_bytes(model)
    sparse = sparse_file_bytes(model)
    return CompressionReport(dense_bytes=dense, sparse_bytes=sparse, ratio=dense / sparse)


def write_sparse(sparse: SparseModel, path) -> None:
    buf = io.BytesIO()
    buf.write(SPARSE_MAGIC)
    buf.write(struct.pack("<HH", sparse.version, len(sparse.layers)))
    arch = sparse.arch_text.encode("utf-8")
    buf.write(struct.pack("<I", len(arch)))
    buf.write(arch)
    for layer in sparse.layers:
        buf.write(struct.pack("<BB", _KIND_CODES[layer.kind], len(layer.shape)))
        buf.write(struct.pack(f"<{len(layer.shape)}I", *layer.shape))
        buf.write(struct.pack("<BB", layer.stride, layer.padding))
        buf.write(struct.pack("<I", layer.indices.size))
        buf.write(np.ascontiguousarray(layer.indices, dtype="<u4").tobytes())
        buf.write(np.ascontiguousarray(layer.values, dtype="<f4").tobytes())
        buf.write(struct.pack("<I", layer.bias.size))
        buf.write(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise FormatError(
                f"{self.path}: truncated at offset {self.offset} (need {n} more bytes)")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_sparse(path) -> SparseModel:
    reader = _Reader(Path(path).read_bytes(), path)
    magic = reader.take(4)
    if magic != SPARSE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    version, n_layers = reader.unpack("<HH")
    if version != SPARSE_VERSION:
        raise FormatError(f"{path}: unsupported version {version} (want {SPARSE_VERSION})")
    (arch_len,) = reader.unpack("<I")
    arch_text = reader.take(arch_len).decode("utf-8")
    layers = []
    for li in range(n_layers):
        kind_code, ndim = reader.unpack("<BB")
        if kind_code not in _KIND_NAMES:
            raise FormatError(f"{path}: unknown layer kind {kind_code} in layer {li}")
        shape = reader.unpack(f"<{ndim}I")
        stride, padding = reader.unpack("<BB")
        (nnz,) = reader.unpack("<I")
        n_w = int(np.prod(shape))
        indices = np.frombuffer(reader.take(4 * nnz), dtype="<u4")
        if nnz and (indices[-1] >= n_w or indices[0] >= n_w):
            raise FormatError(f"{path}: layer {li} index out of bounds (n_w={n_w})")
        if nnz > 1 and not np.all(np.diff(indices.astype(np.int64)) > 0):
            raise FormatError(f"{path}: layer {li} indices not strictly ascending")
        values = np.frombuffer(reader.take(4 * nnz), dtype="<f4")
        (n_bias,) = reader.unpack("<I")
        bias = np.frombuffer(reader.take(4 * n_bias), dtype="<f4")
        layers.append(SparseLayer(kind=_KIND_NAMES[kind_code], shape=shape,
                                  stride=stride, padding=padding,
                                  indices=indices, values=values, bias=bias))
    if reader.offset != len(reader.data):
        raise FormatError(f"{path}: {len(reader.data) - reader.offset} trailing bytes")
    return SparseModel(layers=layers, arch_text=arch_text, version=version)


def import_sparse(path) -> Model:
    """Rebuild an inference-only model: gates at 1, weights already folded."""
    sparse = read_sparse(path)
    model = build_model(sparse.arch_text, seed=0)
    if len(model.layers) != len(sparse.layers):
        raise FormatError(f"{path}: layer count mismatch with architecture text")
    for layer, stored in zip(model.layers, sparse.layers):
        if tuple(layer.w.shape) != tuple(stored.shape) or layer.kind != stored.kind:
            raise FormatError(
                f"{path}: stored layer {stored.kind}{stored.shape} does not match "
                f"architecture layer {layer.kind}{tuple(layer.w.shape)}")
        dense = np.zeros(layer.n_w, dtype=np.float32)
        dense[stored.indices] = stored.values
        layer.w = Tensor(dense.reshape(stored.shape))
        mask = np.zeros(layer.n_w, dtype=np.float32)
        mask[stored.indices] = 1
        layer.mask = mask.reshape(stored.shape)
        layer.w_hat = Tensor(layer.w.data * layer.mask)
        layer.bias = Tensor(stored.bias.copy())
        layer.attention = Tensor(np.asarray(1.0, dtype=np.float32))
    return model


def save_checkpoint(path, model: Model, config: TrainConfig, optimizer=None,
                    iteration: int = 0, epoch: int = 0) -> None:
    """Write model, config and optimizer state; round-trips bit-exactly."""
    meta = {
        "ckpt_version": CHECKPOINT_VERSION,
        "arch": model.arch_text,
        "config": asdict(config),
        "iteration": iteration,
        "epoch": epoch,
        "optimizer": None,
    }
    arrays: dict[str, np.ndarray] = {}
    for i, layer in enumerate(model.layers):
        arrays[f"w_{i}"] = layer.w.data
        arrays[f"mask_{i}"] = layer.mask
        arrays[f"bias_{i}"] = layer.bias.data
        arrays[f"attn_{i}"] = layer.attention.data
    if optimizer is not None and optimizer.slots:
        if isinstance(optimizer, Adam):
            meta["optimizer"] = "adam"
            for i, slot in enumerate(optimizer.slots):
                arrays[f"opt_m_{i}"] = slot.m
                arrays[f"opt_v_{i}"] = slot.v
            arrays["opt_t"] = np.asarray([slot.t for slot in optimizer.slots], dtype=np.int64)
        else:
            meta["optimizer"] = "sgd"
            for i, slot in enumerate(optimizer.slots):
                arrays[f"opt_vel_{i}"] = slot.velocity
    arrays["meta"] = np.asarray(json.dumps(meta))
    with open(path, "wb") as fh:   # np.savez would append .npz to a bare path
        np.savez(fh, **arrays)


@dataclass
class Checkpoint:
    model: Model
    config: TrainConfig
    optimizer: object | None
    iteration: int
    epoch: int


def load_checkpoint(path) -> Checkpoint:
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {k: archive[k] for k in archive.files}
    except (zipfile.BadZipFile, OSError, ValueError, KeyError) as exc:
        raise FormatError(f"{path}: not a readable checkpoint ({exc})") from None
    if "meta" not in arrays:
        raise FormatError(f"{path}: checkpoint missing metadata record")
    try:
        meta = json.loads(str(arrays["meta"]))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: corrupt metadata ({exc})") from None
    version = meta.get("ckpt_version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version} "
                          f"(want {CHECKPOINT_VERSION})")

    config = TrainConfig(**meta["config"])
    model = build_model(meta["arch"], seed=config.seed)
    for i, layer in enumerate(model.layers):
        layer.w = Tensor(arrays[f"w_{i}"], requires_grad=True)
        layer.mask = arrays[f"mask_{i}"]
        layer.bias = Tensor(arrays[f"bias_{i}"], requires_grad=True)
        layer.attention = Tensor(arrays[f"attn_{i}"], requires_grad=True)
        layer.w_hat = Tensor(layer.w.data * layer.mask)

    optimizer = None
    if meta["optimizer"] == "adam":
        optimizer = Adam(lr=config.lr)
        t = arrays["opt_t"]
        optimizer.slots = [AdamSlot(arrays[f"opt_m_{i}"], arrays[f"opt_v_{i}"], int(t[i]))
                           for i in range(len(trainable_parameters(model, config)))]
    elif meta["optimizer"] == "sgd":
        optimizer = SGD(lr=config.lr, momentum=config.momentum)
        optimizer.slots = [MomentumSlot(arrays[f"opt_vel_{i}"])
                           for i in range(len(trainable_parameters(model, config)))]
    return Checkpoint(model=model, config=config, optimizer=optimizer,
                      iteration=int(meta["iteration"]), epoch=int(meta["epoch"]))
