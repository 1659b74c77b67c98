"""Prunable attention-gated layers and the feed-forward model container.

Every prunable layer (dense or conv2d) carries a dense weight tensor, a
compressed copy, a binary mask, a bias, and one trainable attention scalar
in (0, 1]. The gate multiplies the whole layer output including the bias,
before the activation; it is realized by scaling the compressed weights
and the bias, which computes the same value and makes the attention fold
at export bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import DescriptorError, ShapeError
from .tensor import Tensor, default_dtype

ATTENTION_INIT = 0.5
ATTENTION_FLOOR = 1e-4

ARCH_PRESETS = {
    "mnist-cnn": """\
input 28 28 1
conv 3x3 filters=16 stride=1 pad=1
relu
maxpool 2
conv 3x3 filters=32 stride=1 pad=1
relu
maxpool 2
flatten
dense 64
relu
dense 10
""",
}


class AttentionLayer:
    """One prunable layer: dense weights, compressed weights, mask, bias, gate."""

    def __init__(self, kind: str, w: np.ndarray, bias: np.ndarray,
                 stride: int = 1, padding: int = 0):
        if kind not in ("dense", "conv2d"):
            raise ValueError(f"unknown layer kind {kind!r}")
        self.kind = kind
        self.stride = stride
        self.padding = padding
        self.w = Tensor(w, requires_grad=True)
        self.mask = np.ones_like(self.w.data)
        self.w_hat = Tensor(self.w.data * self.mask)
        self.bias = Tensor(bias, requires_grad=True)
        self.attention = Tensor(np.asarray(ATTENTION_INIT, dtype=self.w.dtype),
                                requires_grad=True)

    @property
    def n_w(self) -> int:
        return self.w.size

    @property
    def attention_value(self) -> float:
        return float(self.attention.data)

    def mask_zeros(self) -> int:
        return int(self.mask.size - np.count_nonzero(self.mask))

    def parameters(self) -> list[Tensor]:
        return [self.w, self.bias, self.attention]

    def forward(self, x: Tensor) -> Tensor:
        return attended_forward(self, x)


def attended_forward(layer: AttentionLayer, x: Tensor) -> Tensor:
    """Gated layer output: attention times (linear op on compressed weights plus bias).

    The compressed weights are rebuilt on the tape from the dense weights
    and the current mask, so masked positions contribute nothing forward
    and receive no gradient backward.
    """
    w_hat = ops.apply_mask(layer.w, layer.mask)
    w_eff = ops.scalar_gate(w_hat, layer.attention)
    b_eff = ops.scalar_gate(layer.bias, layer.attention)
    if layer.kind == "dense":
        if x.data.ndim != 2:
            raise ShapeError(f"dense layer expects [batch, features] input, have {x.shape}")
        y = ops.matmul(x, w_eff)
    else:
        y = ops.conv2d(x, w_eff, stride=layer.stride, padding=layer.padding)
    return ops.add_bias(y, b_eff)


@dataclass
class _Piece:
    op: str                      # layer | relu | maxpool | flatten
    layer: AttentionLayer | None = None
    window: int = 0


class Model:
    """Ordered prunable layers interleaved with fixed nonlinearities."""

    def __init__(self, pieces: list[_Piece], arch_text: str, input_shape: tuple[int, ...]):
        self.pieces = pieces
        self.arch_text = arch_text
        self.input_shape = input_shape
        self.layers = [p.layer for p in pieces if p.op == "layer"]

    def forward(self, x: Tensor) -> Tensor:
        for piece in self.pieces:
            if piece.op == "layer":
                x = piece.layer.forward(x)
            elif piece.op == "relu":
                x = ops.relu(x)
            elif piece.op == "maxpool":
                x = ops.max_pool2d(x, piece.window)
            else:
                x = ops.flatten(x)
        return x

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        for layer in self.layers:
            params.extend(layer.parameters())
        return params

    def weight_counts(self) -> list[int]:
        return [layer.n_w for layer in self.layers]

    def set_attentions(self, value: float) -> None:
        for layer in self.layers:
            layer.attention.data = np.asarray(value, dtype=layer.attention.dtype)


def attention_vector(model: Model) -> list[float]:
    """Attention scalars in layer order."""
    return [layer.attention_value for layer in model.layers]


def clamp_attentions(model: Model, floor: float = ATTENTION_FLOOR) -> None:
    """Project every attention back into [floor, 1] after an optimizer step."""
    for layer in model.layers:
        np.clip(layer.attention.data, floor, 1.0, out=layer.attention.data)


def _parse_int(token: str, lineno: int, field: str) -> int:
    try:
        return int(token)
    except ValueError:
        raise DescriptorError(f"line {lineno}: {field} must be an integer, have {token!r}") from None


def _parse_kv(parts: list[str], lineno: int, allowed: dict[str, int]) -> dict[str, int]:
    values = dict(allowed)
    for part in parts:
        if "=" not in part:
            raise DescriptorError(f"line {lineno}: expected key=value, have {part!r}")
        key, _, raw = part.partition("=")
        if key not in allowed:
            raise DescriptorError(f"line {lineno}: unknown option {key!r}")
        values[key] = _parse_int(raw, lineno, key)
    return values


def parse_architecture(text: str) -> tuple[list[tuple], tuple[int, ...]]:
    """Parse a plain-text layer descriptor into validated layer specs.

    Returns (specs, input_shape) where each spec is a tuple starting with
    the layer kind. Raises :class:`DescriptorError` naming the offending
    line on any malformed or shape-inconsistent entry.
    """
    specs: list[tuple] = []
    input_shape: tuple[int, ...] | None = None
    shape: tuple[int, ...] | None = None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        kind = parts[0]

        if kind == "input":
            if input_shape is not None:
                raise DescriptorError(f"line {lineno}: duplicate input declaration")
            if len(parts) == 4:
                h, w, c = (_parse_int(p, lineno, "input dim") for p in parts[1:])
                input_shape = (h, w, c)
            elif len(parts) == 2:
                input_shape = (_parse_int(parts[1], lineno, "input dim"),)
            else:
                raise DescriptorError(f"line {lineno}: input needs 'H W C' or a single size")
            if any(d <= 0 for d in input_shape):
                raise DescriptorError(f"line {lineno}: input dims must be positive")
            shape = input_shape
            continue
        if input_shape is None:
            raise DescriptorError(f"line {lineno}: descriptor must start with an input line")

        if kind == "conv":
            if len(shape) != 3:
                raise DescriptorError(f"line {lineno}: conv needs HxWxC input, have {shape}")
            if len(parts) < 3 or "x" not in parts[1]:
                raise DescriptorError(f"line {lineno}: conv needs '<kh>x<kw>' and filters=")
            kh_s, _, kw_s = parts[1].partition("x")
            kh = _parse_int(kh_s, lineno, "kernel height")
            kw = _parse_int(kw_s, lineno, "kernel width")
            kv = _parse_kv(parts[2:], lineno, {"filters": 0, "stride": 1, "pad": 0})
            if kv["filters"] <= 0:
                raise DescriptorError(f"line {lineno}: conv needs filters=<n> with n > 0")
            if kv["stride"] < 1:
                raise DescriptorError(f"line {lineno}: stride must be >= 1")
            h, w, c = shape
            hp, wp = h + 2 * kv["pad"], w + 2 * kv["pad"]
            if kh > hp or kw > wp:
                raise DescriptorError(
                    f"line {lineno}: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
            oh = (hp - kh) // kv["stride"] + 1
            ow = (wp - kw) // kv["stride"] + 1
            specs.append(("conv2d", kh, kw, c, kv["filters"], kv["stride"], kv["pad"]))
            shape = (oh, ow, kv["filters"])
        elif kind == "dense":
            if len(shape) != 1:
                raise DescriptorError(
                    f"line {lineno}: dense needs a flattened input, have shape {shape}")
            if len(parts) != 2:
                raise DescriptorError(f"line {lineno}: dense needs a single unit count")
            units = _parse_int(parts[1], lineno, "units")
            if units <= 0:
                raise DescriptorError(f"line {lineno}: dense units must be positive")
            specs.append(("dense", shape[0], units))
            shape = (units,)
        elif kind == "relu":
            specs.append(("relu",))
        elif kind == "maxpool":
            if len(parts) != 2:
                raise DescriptorError(f"line {lineno}: maxpool needs a window size")
            window = _parse_int(parts[1], lineno, "window")
            if len(shape) != 3:
                raise DescriptorError(f"line {lineno}: maxpool needs HxWxC input, have {shape}")
            h, w, c = shape
            if window < 1 or h % window or w % window:
                raise DescriptorError(
                    f"line {lineno}: window {window} does not tile input {h}x{w}")
            specs.append(("maxpool", window))
            shape = (h // window, w // window, c)
        elif kind == "flatten":
            specs.append(("flatten",))
            shape = (int(np.prod(shape)),)
        else:
            raise DescriptorError(f"line {lineno}: unknown layer type {kind!r}")

    if input_shape is None:
        raise DescriptorError("descriptor has no input line")
    if not any(s[0] in ("dense", "conv2d") for s in specs):
        raise DescriptorError("descriptor has no prunable layers")
    return specs, input_shape


def resolve_architecture(arch: str) -> str:
    """Map a preset name to its descriptor text, or pass raw text through."""
    if arch in ARCH_PRESETS:
        return ARCH_PRESETS[arch]
    if "\n" not in arch and arch.strip() == arch and " " not in arch:
        raise DescriptorError(f"unknown architecture preset {arch!r}")
    return arch


def build_model(arch: str, seed: int) -> Model:
    """Construct a model with fan-in-scaled uniform weights and gates at 0.5.

    ``arch`` is a preset name or descriptor text. The same seed always
    yields bit-identical initial weights.
    """
    text = resolve_architecture(arch)
    specs, input_shape = parse_architecture(text)
    rng = np.random.default_rng(seed)
    dtype = default_dtype()

    pieces: list[_Piece] = []
    for spec in specs:
        if spec[0] == "conv2d":
            _, kh, kw, cin, cout, stride, pad = spec
            fan_in = kh * kw * cin
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(kh, kw, cin, cout)).astype(dtype)
            layer = AttentionLayer("conv2d", w, np.zeros(cout, dtype=dtype),
                                   stride=stride, padding=pad)
            pieces.append(_Piece("layer", layer=layer))
        elif spec[0] == "dense":
            _, fan_in, units = spec
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, units)).astype(dtype)
            layer = AttentionLayer("dense", w, np.zeros(units, dtype=dtype))
            pieces.append(_Piece("layer", layer=layer))
        elif spec[0] == "maxpool":
            pieces.append(_Piece("maxpool", window=spec[1]))
        elif spec[0] == "relu":
            pieces.append(_Piece("relu"))
        else:
            pieces.append(_Piece("flatten"))
    return Model(pieces, text, input_shape)
