"""Declarative classifier architectures and parameter management.

A model is an ``ArchSpec`` (ordered layer descriptors plus class count) and a
flat parameter registry of named tensors. ``Model.apply`` maps an image batch
to pre-softmax logits; ``predict`` adds the softmax and argmax on top.

Checkpoints are a single binary file with a deterministic byte layout (JSON
header + raw little-endian float64 arrays), so identical runs produce
identical files and write/read round-trips are bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from advda import tensor as T
from advda.tensor import PRECISION, ShapeError, Tensor, check_finite

ACTIVATIONS = ("relu", "elu")
CKPT_MAGIC = b"ADVDACKPT1\x00"


class ArchError(ValueError):
    """Architecture is internally inconsistent; message carries the layer index."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | fc | dropout | maxpool | gap
    channels: int | None = None
    kernel: int | None = None
    stride: int | None = None
    padding: str | None = None
    units: int | None = None
    rate: float | None = None
    activation: str | None = None
    size: int | None = None

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        for key in ("channels", "kernel", "stride", "padding", "units", "rate", "activation", "size"):
            v = getattr(self, key)
            if v is not None:
                d[key] = v
        return d

    @staticmethod
    def from_dict(d: dict) -> "LayerSpec":
        known = {"kind", "channels", "kernel", "stride", "padding", "units", "rate", "activation", "size"}
        unknown = set(d) - known
        if unknown:
            raise ArchError(f"unknown layer fields: {sorted(unknown)}")
        return LayerSpec(**d)


def conv(channels, kernel, stride=2, padding="valid", activation="relu") -> LayerSpec:
    return LayerSpec(kind="conv", channels=channels, kernel=kernel, stride=stride,
                     padding=padding, activation=activation)


def fc(units, activation=None) -> LayerSpec:
    return LayerSpec(kind="fc", units=units, activation=activation)


def dropout(rate) -> LayerSpec:
    return LayerSpec(kind="dropout", rate=rate)


def maxpool(size, stride) -> LayerSpec:
    return LayerSpec(kind="maxpool", size=size, stride=stride)


def gap() -> LayerSpec:
    return LayerSpec(kind="gap")


@dataclass(frozen=True)
class ArchSpec:
    """Ordered layer descriptors, input shape (c, h, w), and class count."""

    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]
    num_classes: int

    def to_dict(self) -> dict:
        return {
            "layers": [l.to_dict() for l in self.layers],
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
        }

    @staticmethod
    def from_dict(d: dict) -> "ArchSpec":
        unknown = set(d) - {"layers", "input_shape", "num_classes"}
        if unknown:
            raise ArchError(f"unknown arch fields: {sorted(unknown)}")
        return ArchSpec(
            layers=tuple(LayerSpec.from_dict(l) for l in d["layers"]),
            input_shape=tuple(d["input_shape"]),
            num_classes=int(d["num_classes"]),
        )

    def infer_shapes(self) -> list[tuple[int, ...]]:
        """Per-layer output shapes (without the batch axis); validates the spec."""
        shape: tuple[int, ...] = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv":
                if len(shape) != 3:
                    raise ArchError(f"layer {i}: conv after flatten (input shape {shape})")
                if layer.activation is not None and layer.activation not in ACTIVATIONS:
                    raise ArchError(f"layer {i}: unknown activation {layer.activation!r}")
                c, h, w = shape
                k, s = layer.kernel, layer.stride
                if layer.padding == "same":
                    oh, ow = -(-h // s), -(-w // s)
                elif layer.padding == "valid":
                    if h < k or w < k:
                        raise ArchError(f"layer {i}: {h}x{w} input smaller than {k}x{k} kernel")
                    oh, ow = (h - k) // s + 1, (w - k) // s + 1
                else:
                    raise ArchError(f"layer {i}: padding must be 'same' or 'valid'")
                shape = (layer.channels, oh, ow)
            elif layer.kind == "fc":
                if layer.activation is not None and layer.activation not in ACTIVATIONS:
                    raise ArchError(f"layer {i}: unknown activation {layer.activation!r}")
                shape = (layer.units,)
            elif layer.kind == "dropout":
                if not 0.0 <= layer.rate < 1.0:
                    raise ArchError(f"layer {i}: dropout rate {layer.rate} outside [0, 1)")
            elif layer.kind == "maxpool":
                if len(shape) != 3:
                    raise ArchError(f"layer {i}: maxpool needs a conv-shaped input, got {shape}")
                c, h, w = shape
                if h < layer.size or w < layer.size:
                    raise ArchError(f"layer {i}: {h}x{w} input smaller than pool {layer.size}")
                shape = (c, (h - layer.size) // layer.stride + 1, (w - layer.size) // layer.stride + 1)
            elif layer.kind == "gap":
                if len(shape) != 3:
                    raise ArchError(f"layer {i}: gap needs a conv-shaped input, got {shape}")
                shape = (shape[0],)
            else:
                raise ArchError(f"layer {i}: unknown layer kind {layer.kind!r}")
            out.append(shape)
        if not out:
            raise ArchError("architecture has no layers")
        if out[-1] != (self.num_classes,):
            raise ArchError(
                f"final layer outputs {out[-1]}, expected ({self.num_classes},) logits"
            )
        return out


def _presets() -> dict:
    def fmnist(layers, k, input_shape):
        return ArchSpec(layers=tuple(layers), input_shape=input_shape, num_classes=k)

    return {
        # strides/padding are not part of the published layer tables; stride-2
        # valid keeps these nets CPU-sized without touching the listed shapes
        "fmnist-main": lambda k=10, input_shape=(1, 28, 28): fmnist(
            [conv(16, 4), conv(32, 4), fc(100, "relu"), fc(k)], k, input_shape),
        "fmnist-pretrained-a": lambda k=10, input_shape=(1, 28, 28): fmnist(
            [conv(32, 5), conv(32, 5), dropout(0.1), fc(128, "relu"), dropout(0.5), fc(k)],
            k, input_shape),
        "fmnist-pretrained-b": lambda k=10, input_shape=(1, 28, 28): fmnist(
            [dropout(0.2), conv(32, 3), conv(32, 3), fc(128, "relu"), dropout(0.5), fc(k)],
            k, input_shape),
        "fmnist-holdout": lambda k=10, input_shape=(1, 28, 28): fmnist(
            [conv(64, 3), fc(300, "relu"), dropout(0.5), fc(300, "relu"), dropout(0.5), fc(k)],
            k, input_shape),
        # fast fixture for property tests; not one of the published models
        "small": lambda k=10, input_shape=(1, 8, 8): fmnist(
            [conv(8, 3), fc(32, "relu"), fc(k)], k, input_shape),
    }


PRESETS = _presets()


def preset(name: str, k: int | None = None, input_shape: tuple[int, int, int] | None = None) -> ArchSpec:
    if name not in PRESETS:
        raise ArchError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    kwargs = {}
    if k is not None:
        kwargs["k"] = k
    if input_shape is not None:
        kwargs["input_shape"] = tuple(input_shape)
    return PRESETS[name](**kwargs)


@dataclass
class Model:
    """An architecture bound to its parameter registry."""

    arch: ArchSpec
    params: dict[str, Tensor]
    seed: int
    precision: str = PRECISION
    meta: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return self.arch.num_classes

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def apply(self, x, mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
        """Forward pass to the logits. ``mode`` is 'train' or 'eval'; dropout
        consumes ``rng`` only in train mode and is the identity in eval."""
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        t = x if isinstance(x, Tensor) else Tensor(x, name="input")
        c, h, w = self.arch.input_shape
        if t.ndim != 4 or t.shape[1:] != (c, h, w):
            raise ShapeError(
                f"input: expected (n, {c}, {h}, {w}), got {t.shape}"
            )
        check_finite(t.data, "model input")
        train = mode == "train"
        for i, layer in enumerate(self.arch.layers):
            name = f"layer{i}/{layer.kind}"
            if layer.kind == "conv":
                t = T.conv2d(t, self.params[f"{name}.w"], self.params[f"{name}.b"],
                             stride=layer.stride, padding=layer.padding, name=name)
                if layer.activation == "relu":
                    t = T.relu(t)
                elif layer.activation == "elu":
                    t = T.elu(t)
            elif layer.kind == "fc":
                if t.ndim != 2:
                    t = T.flatten_rows(t)
                t = T.affine(t, self.params[f"{name}.w"], self.params[f"{name}.b"], name=name)
                if layer.activation == "relu":
                    t = T.relu(t)
                elif layer.activation == "elu":
                    t = T.elu(t)
            elif layer.kind == "dropout":
                t = T.dropout(t, layer.rate, rng, train)
            elif layer.kind == "maxpool":
                t = T.maxpool2d(t, layer.size, layer.stride, name=name)
            elif layer.kind == "gap":
                t = T.global_avg_pool(t)
        return t


def build_model(arch: ArchSpec | str, seed: int) -> Model:
    """Initialize parameters deterministically from ``seed``.

    Weights are fan-in-scaled uniform (±sqrt(6 / fan_in)); biases start at
    zero. Layers consume the RNG in declaration order.
    """
    if isinstance(arch, str):
        arch = preset(arch)
    shapes = arch.infer_shapes()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    in_shape: tuple[int, ...] = arch.input_shape
    for i, layer in enumerate(arch.layers):
        name = f"layer{i}/{layer.kind}"
        if layer.kind == "conv":
            ci = in_shape[0]
            fan_in = ci * layer.kernel * layer.kernel
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(layer.channels, ci, layer.kernel, layer.kernel))
            params[f"{name}.w"] = Tensor(w, requires_grad=True, name=f"{name}.w")
            params[f"{name}.b"] = Tensor(np.zeros(layer.channels), requires_grad=True, name=f"{name}.b")
        elif layer.kind == "fc":
            fan_in = int(np.prod(in_shape))
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, layer.units))
            params[f"{name}.w"] = Tensor(w, requires_grad=True, name=f"{name}.w")
            params[f"{name}.b"] = Tensor(np.zeros(layer.units), requires_grad=True, name=f"{name}.b")
        in_shape = shapes[i]
    return Model(arch=arch, params=params, seed=seed)


def logits(model: Model, x, mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
    return model.apply(x, mode=mode, rng=rng)


def predict(model: Model, x) -> tuple[np.ndarray, np.ndarray]:
    """Labels (row-wise argmax, ties to the smallest class index) and softmax
    probabilities, computed without recording a graph."""
    with T.no_grad():
        z = model.apply(x, mode="eval").data
    return z.argmax(axis=1), T.softmax(z)


# ---------------------------------------------------------------------------
# checkpoint file format


def save_checkpoint(model: Model, path, extra_meta: dict | None = None) -> None:
    """Single-file binary checkpoint with deterministic bytes.

    Layout: magic, little-endian uint64 header length, UTF-8 JSON header
    (sorted keys), then each parameter's raw C-order float64 bytes in the
    order listed in the header.
    """
    meta = {
        "arch": model.arch.to_dict(),
        "seed": model.seed,
        "precision": model.precision,
    }
    meta.update(model.meta)
    if extra_meta:
        meta.update(extra_meta)
    arrays = []
    blobs = []
    for key in model.params:  # insertion order is deterministic from the arch
        arr = np.ascontiguousarray(model.params[key].data, dtype="<f8")
        arrays.append({"key": key, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = json.dumps({"meta": meta, "arrays": arrays}, sort_keys=True,
                        separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(np.uint64(len(header)).tobytes())
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> Model:
    path = Path(path)
    raw = path.read_bytes()
    if not raw.startswith(CKPT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    off = len(CKPT_MAGIC)
    (hlen,) = np.frombuffer(raw, dtype="<u8", count=1, offset=off)
    off += 8
    header = json.loads(raw[off : off + int(hlen)].decode())
    off += int(hlen)
    meta = header["meta"]
    if meta["precision"] != PRECISION:
        raise ValueError(f"{path}: precision {meta['precision']} != {PRECISION}")
    arch = ArchSpec.from_dict(meta["arch"])
    arch.infer_shapes()
    params: dict[str, Tensor] = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += n * 8
        check_finite(arr, f"checkpoint parameter {entry['key']}")
        params[entry["key"]] = Tensor(arr, requires_grad=True, name=entry["key"])
    extra = {k: v for k, v in meta.items() if k not in ("arch", "seed", "precision")}
    return Model(arch=arch, params=params, seed=meta["seed"], precision=meta["precision"],
                 meta=extra)
