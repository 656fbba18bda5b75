"""Layers, models, hand-written backpropagation and the model file format.

All passes are batched: inputs carry a leading batch axis.  A single example
(shape equal to ``model.input_shape``) is accepted too and the outputs drop
the batch axis accordingly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .kwta import ActivationPattern, check_gamma, k_from_gamma, winner_mask
from .tensor import DEFAULT_DTYPE, Tensor

LAYER_KINDS = ("dense", "conv2d", "relu", "kwta", "flatten")
ACTIVATION_KINDS = ("relu", "kwta")


class ModelBuildError(ValueError):
    pass


class StaleTraceError(RuntimeError):
    """Raised when a trace is replayed against a model mutated since forward."""


@dataclass
class LayerSpec:
    kind: str
    in_dim: int | None = None
    out_dim: int | None = None
    in_channels: int | None = None
    out_channels: int | None = None
    kernel_size: int | None = None
    stride: int = 1
    padding: int = 0
    gamma: float | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ModelBuildError(f"unknown layer kind {self.kind!r}")
        if self.kind == "kwta":
            if self.gamma is None:
                raise ModelBuildError("kwta layer needs a gamma")
            check_gamma(self.gamma)

    @classmethod
    def dense(cls, in_dim, out_dim):
        return cls("dense", in_dim=in_dim, out_dim=out_dim)

    @classmethod
    def conv2d(cls, in_channels, out_channels, kernel_size, stride=1, padding=0):
        return cls("conv2d", in_channels=in_channels, out_channels=out_channels,
                   kernel_size=kernel_size, stride=stride, padding=padding)

    @classmethod
    def relu(cls):
        return cls("relu")

    @classmethod
    def kwta(cls, gamma):
        return cls("kwta", gamma=gamma)

    @classmethod
    def flatten(cls):
        return cls("flatten")

    @property
    def parametric(self) -> bool:
        return self.kind in ("dense", "conv2d")

    def describe(self) -> str:
        if self.kind == "dense":
            return f"dense {self.in_dim}->{self.out_dim}"
        if self.kind == "conv2d":
            return (f"conv2d {self.in_channels}->{self.out_channels} k{self.kernel_size}"
                    f" s{self.stride} p{self.padding}")
        if self.kind == "kwta":
            return f"kwta gamma={self.gamma}"
        return self.kind

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _infer_shapes(specs: list[LayerSpec], input_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    """Output shape after each layer; raises naming the offending layer pair."""
    shapes = []
    shape = tuple(input_shape)
    prev = "input"
    for i, spec in enumerate(specs):
        where = f"{prev} -> layer {i} ({spec.describe()})"
        if spec.kind == "dense":
            if len(shape) != 1 or shape[0] != spec.in_dim:
                raise ModelBuildError(f"shape {shape} does not fit {where}")
            shape = (spec.out_dim,)
        elif spec.kind == "conv2d":
            if len(shape) != 3 or shape[0] != spec.in_channels:
                raise ModelBuildError(f"shape {shape} does not fit {where}")
            _, h, w = shape
            kern, s, p = spec.kernel_size, spec.stride, spec.padding
            if kern > h + 2 * p or kern > w + 2 * p:
                raise ModelBuildError(f"kernel {kern} larger than padded input {shape} at {where}")
            shape = (spec.out_channels, conv_output_size(h, kern, s, p), conv_output_size(w, kern, s, p))
        elif spec.kind == "flatten":
            shape = (int(np.prod(shape)),)
        shapes.append(shape)
        prev = f"layer {i} ({spec.describe()})"
    return shapes


@dataclass
class Model:
    layers: list[LayerSpec]
    params: list[dict[str, Tensor]]
    input_shape: tuple[int, ...]
    meta: dict = field(default_factory=dict)
    dtype: type = DEFAULT_DTYPE
    version: int = 0
    backward_calls: int = 0

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.shapes = _infer_shapes(self.layers, self.input_shape)
        for i, (spec, p) in enumerate(zip(self.layers, self.params)):
            expected = _param_shapes(spec)
            got = {name: tuple(t.shape) for name, t in p.items()}
            if got != expected:
                raise ModelBuildError(f"layer {i} ({spec.describe()}) has parameters {got}, expected {expected}")

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[-1] if self.shapes else self.input_shape

    @property
    def kwta_layers(self) -> list[int]:
        return [i for i, s in enumerate(self.layers) if s.kind == "kwta"]

    @property
    def gammas(self) -> list[float]:
        return [self.layers[i].gamma for i in self.kwta_layers]

    def set_gamma(self, gamma: float) -> None:
        """Set the same sparsity ratio on every k-WTA layer."""
        check_gamma(gamma)
        if not self.kwta_layers:
            raise ValueError("model has no kwta layers")
        for i in self.kwta_layers:
            self.layers[i].gamma = gamma
        self.touch()

    def touch(self) -> None:
        """Mark the model as mutated; outstanding traces become stale."""
        self.version += 1

    def param_tensors(self) -> list[Tensor]:
        return [t for p in self.params for t in p.values()]

    def n_params(self) -> int:
        return sum(t.size for t in self.param_tensors())

    def copy(self) -> "Model":
        return Model([LayerSpec(**asdict(s)) for s in self.layers],
                     [{k: v.copy() for k, v in p.items()} for p in self.params],
                     self.input_shape, dict(self.meta), self.dtype)


def _param_shapes(spec: LayerSpec) -> dict[str, tuple[int, ...]]:
    if spec.kind == "dense":
        return {"W": (spec.out_dim, spec.in_dim), "b": (spec.out_dim,)}
    if spec.kind == "conv2d":
        k = spec.kernel_size
        return {"W": (spec.out_channels, spec.in_channels, k, k), "b": (spec.out_channels,)}
    return {}


def build_model(specs: list[LayerSpec], rng: np.random.Generator, input_shape=None,
                dtype=DEFAULT_DTYPE, name: str = "model", seed: int | None = None) -> Model:
    """Allocate parameters: weights ~ N(0, 1/fan_out), biases zero.

    fan_out is ``out_dim`` for dense layers and ``out_channels * kernel**2``
    for convolutions.  ``input_shape`` defaults to ``(in_dim,)`` when the
    first layer is dense.
    """
    if not specs:
        raise ModelBuildError("a model needs at least one layer")
    if input_shape is None:
        if specs[0].kind != "dense":
            raise ModelBuildError("input_shape is required unless the first layer is dense")
        input_shape = (specs[0].in_dim,)
    _infer_shapes(specs, tuple(input_shape))
    params = []
    for spec in specs:
        shapes = _param_shapes(spec)
        if not shapes:
            params.append({})
            continue
        fan_out = spec.out_dim if spec.kind == "dense" else spec.out_channels * spec.kernel_size ** 2
        W = rng.standard_normal(shapes["W"]) * np.sqrt(1.0 / fan_out)
        params.append({"W": W.astype(dtype), "b": np.zeros(shapes["b"], dtype=dtype)})
    meta = {"name": name, "seed": seed, "history": []}
    return Model(list(specs), params, tuple(input_shape), meta, dtype)


# ---------------------------------------------------------------------------
# convolution


def _im2col(x: Tensor, kernel: int, stride: int, padding: int) -> tuple[Tensor, int, int]:
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = conv_output_size(h, kernel, stride, padding)
    ow = conv_output_size(w, kernel, stride, padding)
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kernel * kernel)
    return cols, oh, ow


def _conv_forward_batch(x, W, b, stride, padding):
    n = x.shape[0]
    cout, cin, kern, _ = W.shape
    if x.shape[1] != cin:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {cin}")
    if kern > x.shape[2] + 2 * padding or kern > x.shape[3] + 2 * padding:
        raise ValueError(f"kernel {kern} larger than padded input {x.shape[1:]}")
    cols, oh, ow = _im2col(x, kern, stride, padding)
    out = cols @ W.reshape(cout, -1).T + b
    return out.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2), cols


def _conv_backward_batch(dout, cols, x_shape, W, stride, padding):
    n, cin, h, w = x_shape
    cout, _, kern, _ = W.shape
    oh, ow = dout.shape[2], dout.shape[3]
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, cout)
    dW = (d2.T @ cols).reshape(W.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ W.reshape(cout, -1)).reshape(n, oh, ow, cin, kern, kern)
    dxp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding), dtype=dout.dtype)
    for i in range(kern):
        for j in range(kern):
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, padding:padding + h, padding:padding + w]
    return dW, db, dx


def conv2d_forward(x, weights, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of one C x H x W input with a [C', C, k, k] kernel bank."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise ValueError(f"expected a C x H x W input, got shape {x.shape}")
    out, _ = _conv_forward_batch(x[None], np.asarray(weights), np.asarray(bias), stride, padding)
    return out[0]


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardTrace:
    """Per-layer record of one (batched) forward pass.

    ``inputs[i]`` is what layer ``i`` consumed; for activation layers that is
    the pre-activation.  ``masks[i]`` holds the boolean winner/active mask for
    relu and kwta layers and ``None`` elsewhere.
    """

    inputs: list[Tensor]
    masks: list[np.ndarray | None]
    cache: list
    logits: Tensor
    batched: bool
    version: int

    def __len__(self):
        return len(self.inputs)

    def patterns(self, example: int = 0) -> dict[int, ActivationPattern]:
        """Activation patterns of every kwta layer for one example."""
        out = {}
        for i, (m, c) in enumerate(zip(self.masks, self.cache)):
            if isinstance(c, str) and c == "kwta":
                out[i] = ActivationPattern.from_mask(m[example].reshape(-1))
        return out

    @property
    def pre_activations(self) -> dict[int, Tensor]:
        return {i: self.inputs[i] for i, m in enumerate(self.masks) if m is not None}


def _as_batch(model: Model, x) -> tuple[Tensor, bool]:
    x = np.asarray(x, dtype=model.dtype)
    if x.shape == model.input_shape:
        return x[None], False
    if x.shape[1:] == model.input_shape:
        return x, True
    raise ValueError(f"input shape {x.shape} does not match model input {model.input_shape}")


def forward(model: Model, x, masks: list | None = None) -> ForwardTrace:
    """Run the model and record everything backward needs.

    ``masks`` optionally replays fixed activation masks (one entry per layer,
    ``None`` for non-activation layers), turning the network into the linear
    map of that region.
    """
    h, batched = _as_batch(model, x)
    n = h.shape[0]
    inputs, out_masks, cache = [], [], []
    for i, (spec, p) in enumerate(zip(model.layers, model.params)):
        inputs.append(h)
        if spec.kind == "dense":
            out_masks.append(None)
            cache.append(None)
            h = h @ p["W"].T + p["b"]
        elif spec.kind == "conv2d":
            out_masks.append(None)
            h, cols = _conv_forward_batch(h, p["W"], p["b"], spec.stride, spec.padding)
            cache.append(cols)
        elif spec.kind == "flatten":
            out_masks.append(None)
            cache.append(None)
            h = h.reshape(n, -1)
        else:
            if masks is not None and masks[i] is not None:
                m = np.broadcast_to(masks[i], h.shape)
            elif spec.kind == "relu":
                m = h > 0
            else:
                flat = h.reshape(n, -1)
                m = winner_mask(flat, k_from_gamma(spec.gamma, flat.shape[1])).reshape(h.shape)
            out_masks.append(m)
            cache.append(spec.kind)
            h = np.where(m, h, 0.0).astype(model.dtype, copy=False)
    logits = h if batched else h[0]
    return ForwardTrace(inputs, out_masks, cache, logits, batched, model.version)


def logits(model: Model, x, batch_size: int = 512) -> Tensor:
    """Forward pass without keeping a trace, chunked over the batch axis."""
    x, batched = _as_batch(model, x)
    if x.shape[0] <= batch_size:
        out = forward(model, x).logits
    else:
        out = np.concatenate([forward(model, x[i:i + batch_size]).logits
                              for i in range(0, x.shape[0], batch_size)])
    return out if batched else out[0]


def predict(model: Model, x, batch_size: int = 512) -> np.ndarray:
    return np.argmax(logits(model, x, batch_size), axis=-1)


def backward(model: Model, trace: ForwardTrace, loss_grad, need_param_grads: bool = True):
    """Reverse pass.  Returns ``(param_grads, input_grad)``.

    ``param_grads`` mirrors ``model.params`` (a dict per layer, empty for
    parameter-free layers).  k-WTA and ReLU layers pass gradient through
    their recorded masks.
    """
    if trace.version != model.version:
        raise StaleTraceError("model was modified after this trace was recorded; rerun forward")
    model.backward_calls += 1
    g = np.asarray(loss_grad, dtype=model.dtype)
    if not trace.batched:
        g = g[None]
    if g.shape != trace.inputs[-1].shape[:1] + model.output_shape:
        raise ValueError(f"loss gradient shape {g.shape} does not match logits")
    grads: list[dict[str, Tensor]] = [dict() for _ in model.layers]
    for i in range(len(model.layers) - 1, -1, -1):
        spec, p, x_in = model.layers[i], model.params[i], trace.inputs[i]
        if spec.kind == "dense":
            if need_param_grads:
                grads[i] = {"W": g.T @ x_in, "b": g.sum(axis=0)}
            g = g @ p["W"]
        elif spec.kind == "conv2d":
            dW, db, g = _conv_backward_batch(g, trace.cache[i], x_in.shape, p["W"], spec.stride, spec.padding)
            if need_param_grads:
                grads[i] = {"W": dW, "b": db}
        elif spec.kind == "flatten":
            g = g.reshape(x_in.shape)
        else:
            g = np.where(trace.masks[i], g, 0.0)
    input_grad = g if trace.batched else g[0]
    return grads, input_grad


# ---------------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits_, label: int) -> tuple[float, Tensor]:
    """Loss ``-log softmax(logits)[label]`` and its gradient for one example."""
    z = np.asarray(logits_, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError(f"expected a logit vector, got shape {z.shape}")
    losses, grad = softmax_cross_entropy_batch(z[None], np.array([label]))
    return float(losses[0]), grad[0]


def softmax_cross_entropy_batch(z, labels) -> tuple[np.ndarray, Tensor]:
    """Per-example losses and per-example (unaveraged) logit gradients."""
    z = np.asarray(z)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = z.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    losses = np.log(s[:, 0]) - shifted[rows, labels]
    grad = e / s
    grad[rows, labels] -= 1.0
    return losses, grad


def squared_error_batch(pred, target) -> tuple[np.ndarray, Tensor]:
    """``0.5*||pred - target||^2`` per example and its gradient."""
    pred = np.asarray(pred)
    diff = pred - np.asarray(target, dtype=pred.dtype).reshape(pred.shape)
    return 0.5 * (diff.reshape(len(diff), -1) ** 2).sum(axis=1), diff


def loss_and_input_grad(model: Model, x, y) -> tuple[np.ndarray, Tensor]:
    """Per-example cross-entropy losses and their input gradients (batched)."""
    trace = forward(model, x)
    z = trace.logits if trace.batched else trace.logits[None]
    y = np.atleast_1d(y)
    losses, g = softmax_cross_entropy_batch(z, y)
    _, gx = backward(model, trace, g if trace.batched else g[0], need_param_grads=False)
    return (losses if trace.batched else losses[0]), gx


# ---------------------------------------------------------------------------
# presets


def activation_spec(activation: str, gamma: float | None) -> LayerSpec:
    if activation == "relu":
        if gamma is not None:
            raise ValueError("gamma only applies to kwta activations")
        return LayerSpec.relu()
    if activation == "kwta":
        return LayerSpec.kwta(0.2 if gamma is None else gamma)
    raise ValueError(f"activation must be one of {ACTIVATION_KINDS}, got {activation!r}")


def mnist_cnn_specs(activation: str = "relu", gamma: float | None = None,
                    width_divisor: int = 8) -> list[LayerSpec]:
    """Four-conv MNIST CNN; ``width_divisor=1`` gives the full 128/256/10000 widths."""
    c1, c2 = 128 // width_divisor, 256 // width_divisor
    hidden = 10000 // width_divisor
    act = lambda: activation_spec(activation, gamma)  # noqa: E731
    return [
        LayerSpec.conv2d(1, c1, 3, stride=1, padding=1), act(),
        LayerSpec.conv2d(c1, c1, 3, stride=2, padding=1), act(),
        LayerSpec.conv2d(c1, c2, 3, stride=1, padding=1), act(),
        LayerSpec.conv2d(c2, c2, 3, stride=2, padding=1),
        LayerSpec.flatten(),
        LayerSpec.dense(c2 * 7 * 7, hidden), act(),
        LayerSpec.dense(hidden, 10),
    ]


def mlp_specs(in_dim: int, widths, out_dim: int, activation: str = "relu",
              gamma: float | None = None, flatten: bool = False) -> list[LayerSpec]:
    specs = [LayerSpec.flatten()] if flatten else []
    prev = in_dim
    for w in widths:
        specs += [LayerSpec.dense(prev, w), activation_spec(activation, gamma)]
        prev = w
    specs.append(LayerSpec.dense(prev, out_dim))
    return specs


def mnist_mlp_specs(activation: str = "relu", gamma: float | None = None,
                    widths=(256, 256)) -> list[LayerSpec]:
    return mlp_specs(784, widths, 10, activation, gamma, flatten=True)


PRESETS = {
    "mnist-cnn": (mnist_cnn_specs, (1, 28, 28)),
    "mnist-mlp": (mnist_mlp_specs, (1, 28, 28)),
}


def build_preset(name: str, rng, activation="relu", gamma=None, seed=None) -> Model:
    try:
        make, shape = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return build_model(make(activation, gamma), rng, shape, name=name, seed=seed)


# ---------------------------------------------------------------------------
# serialization

_MAGIC = b"KWTALAB-MODEL\n"


def save_model(model: Model, path) -> None:
    """Write the container: magic, textual JSON header, then length-prefixed
    little-endian parameter blobs in layer order (W before b)."""
    dt = np.dtype(model.dtype)
    header = {
        "format": 1,
        "dtype": dt.name,
        "input_shape": list(model.input_shape),
        "layers": [s.to_dict() for s in model.layers],
        "gammas": model.gammas,
        "meta": model.meta,
    }
    text = json.dumps(header, indent=1, sort_keys=True).encode("utf-8")
    le = dt.newbyteorder("<")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(text)))
        f.write(text)
        for spec, p in zip(model.layers, model.params):
            for name in ("W", "b"):
                if name in p:
                    arr = np.ascontiguousarray(p[name], dtype=le)
                    f.write(struct.pack("<Q", arr.size))
                    f.write(arr.tobytes())


def load_model(path) -> Model:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise ValueError(f"{path}: not a model file")
    pos = len(_MAGIC)
    (hlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    dt = np.dtype(header["dtype"])
    le = dt.newbyteorder("<")
    specs = [LayerSpec(**d) for d in header["layers"]]
    params = []
    for spec in specs:
        p = {}
        for name, shape in _param_shapes(spec).items():
            (count,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            if count != int(np.prod(shape)):
                raise ValueError(f"{path}: blob for {spec.describe()} {name} has {count} values, expected {shape}")
            nbytes = count * le.itemsize
            if pos + nbytes > len(data):
                raise ValueError(f"{path}: truncated parameter data")
            p[name] = np.frombuffer(data, dtype=le, count=count, offset=pos).astype(dt).reshape(shape)
            pos += nbytes
        params.append(p)
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return Model(specs, params, tuple(header["input_shape"]), header["meta"], dt.type)
