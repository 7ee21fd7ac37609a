"""Model specifications and the network that executes them."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..imaging import ParameterError
from .layers import (Conv2D, Dense, Dropout, Flatten, Layer, MaxPool2, ReLU,
                     ShapeError, Softmax, log_softmax)

MODEL_KINDS = ("mlnn", "cnn", "cnnl", "concat")
CLASS_COUNTS = (2, 3, 5)
N_FEATURES = 5
ROI_INPUT = (64, 192)
FULL_INPUT = (128, 128)


@dataclass
class ModelSpec:
    """Layer graph: one branch per input, optionally joined by concatenation.

    Single-input models keep every layer (softmax included) in their only
    branch and have an empty ``head``.  Multi-input models concatenate the
    branch outputs and feed the result through ``head``.
    """

    kind: str
    class_count: int
    inputs: list
    branches: list
    head: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.inputs) != len(self.branches):
            raise ParameterError("need exactly one branch per input")
        layers = [l for b in self.branches for l in b] + list(self.head)
        n_soft = sum(l["kind"] == "softmax" for l in layers)
        last = self.head[-1] if self.head else self.branches[-1][-1]
        if n_soft != 1 or last["kind"] != "softmax":
            raise ParameterError("a model needs exactly one softmax, as its final layer")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**copy.deepcopy(d))

    @property
    def junction_width(self) -> int | None:
        if len(self.branches) < 2:
            return None
        return sum(_propagate(inp["shape"], b)[0] for inp, b in zip(self.inputs, self.branches))


def _propagate(shape, layer_specs) -> tuple:
    """Output shape of a layer list, for sizing the concatenation junction."""
    shape = tuple(shape)
    for spec in layer_specs:
        k = spec["kind"]
        if k == "conv2d":
            shape = (spec["out"], shape[1], shape[2])
        elif k == "maxpool2":
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif k == "flatten":
            shape = (int(np.prod(shape)),)
        elif k == "dense":
            shape = (spec["out"],)
    return shape


def _conv_trunk(conv_channels, dense_units, dropout):
    layers = []
    for out in conv_channels:
        layers += [{"kind": "conv2d", "out": out}, {"kind": "relu"}, {"kind": "maxpool2"}]
    layers += [{"kind": "flatten"}, {"kind": "dense", "out": dense_units}, {"kind": "relu"}]
    if dropout > 0:
        layers.append({"kind": "dropout", "rate": dropout})
    return layers


def _mlnn_trunk(units):
    layers = []
    for u in units:
        layers += [{"kind": "dense", "out": u}, {"kind": "relu"}]
    return layers


def build_model(kind: str, class_count: int, *, image_size=ROI_INPUT,
                conv_channels=(8, 16, 32), dense_units=64, mlnn_units=(32, 16),
                head_units=32, dropout=0.5) -> ModelSpec:
    """Architecture for one of ``mlnn``, ``cnn``, ``cnnl`` or ``concat``.

    ``cnnl`` is ``cnn`` with a second input channel carrying the binary line
    raster.  ``concat`` joins the ``cnnl`` trunk (through its dense layer) and
    the ``mlnn`` trunk (through its last hidden layer) and classifies the
    concatenation with a small dense head.  The keyword arguments exist so
    tests can build downsized variants.
    """
    if kind not in MODEL_KINDS:
        raise ParameterError(f"unknown model kind {kind!r}; expected one of {', '.join(MODEL_KINDS)}")
    if class_count not in CLASS_COUNTS:
        raise ParameterError(f"class_count must be one of {CLASS_COUNTS}, got {class_count}")
    h, w = image_size
    out = [{"kind": "dense", "out": class_count}, {"kind": "softmax"}]
    if kind == "mlnn":
        return ModelSpec(kind, class_count, [{"name": "features", "shape": [N_FEATURES]}],
                         [_mlnn_trunk(mlnn_units) + out])
    if kind in ("cnn", "cnnl"):
        c = 1 if kind == "cnn" else 2
        return ModelSpec(kind, class_count, [{"name": "image", "shape": [c, h, w]}],
                         [_conv_trunk(conv_channels, dense_units, dropout) + out])
    return ModelSpec(kind, class_count,
                     [{"name": "image", "shape": [2, h, w]}, {"name": "features", "shape": [N_FEATURES]}],
                     [_conv_trunk(conv_channels, dense_units, dropout), _mlnn_trunk(mlnn_units)],
                     [{"kind": "dense", "out": head_units}, {"kind": "relu"}] + out)


def _make_layers(specs, in_shape, rng, dtype):
    layers = []
    shape = tuple(in_shape)
    for i, spec in enumerate(specs):
        k = spec["kind"]
        followed_by_relu = i + 1 < len(specs) and specs[i + 1]["kind"] == "relu"
        if k == "dense":
            if len(shape) != 1:
                raise ShapeError(f"dense layer {i} needs a flat input, got {shape}")
            layer = Dense(shape[0], spec["out"], rng, he=followed_by_relu, dtype=dtype)
        elif k == "conv2d":
            if len(shape) != 3:
                raise ShapeError(f"conv2d layer {i} needs (c, h, w) input, got {shape}")
            layer = Conv2D(shape[0], spec["out"], rng, k=spec.get("k", 3), dtype=dtype)
        elif k == "relu":
            layer = ReLU()
        elif k == "maxpool2":
            layer = MaxPool2()
        elif k == "flatten":
            layer = Flatten()
        elif k == "dropout":
            layer = Dropout(spec["rate"], rng)
        elif k == "softmax":
            layer = Softmax()
        else:
            raise ParameterError(f"unknown layer kind {k!r}")
        shape = layer.output_shape(shape)
        layers.append(layer)
    return layers, shape


class Network:
    """Executable instance of a ``ModelSpec`` holding weights."""

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.branches = []
        widths = []
        for inp, specs in zip(spec.inputs, spec.branches):
            layers, shape = _make_layers(specs, inp["shape"], rng, self.dtype)
            self.branches.append(layers)
            widths.append(shape)
        self.head = []
        if spec.head:
            if any(len(s) != 1 for s in widths):
                raise ShapeError("branches must end flat before concatenation")
            self._split = np.cumsum([s[0] for s in widths])[:-1]
            self.head, _ = _make_layers(spec.head, (sum(s[0] for s in widths),), rng, self.dtype)

    # graph traversal ---------------------------------------------------

    def _all_layers(self) -> list[Layer]:
        return [l for b in self.branches for l in b] + self.head

    def parameters(self):
        """``(layer, name)`` pairs in a fixed order."""
        return [(l, n) for l in self._all_layers() for n in sorted(l.params)]

    @property
    def n_parameters(self) -> int:
        return int(sum(l.params[n].size for l, n in self.parameters()))

    def _check_inputs(self, inputs):
        if len(inputs) != len(self.spec.inputs):
            raise ShapeError(f"model expects {len(self.spec.inputs)} inputs, got {len(inputs)}")
        out = []
        for x, desc in zip(inputs, self.spec.inputs):
            x = np.asarray(x, dtype=self.dtype)
            if tuple(x.shape[1:]) != tuple(desc["shape"]):
                raise ShapeError(f"input {desc['name']!r}: expected (batch, {', '.join(map(str, desc['shape']))}), "
                                 f"got {x.shape}")
            out.append(x)
        return out

    def logits(self, inputs, training=False):
        inputs = self._check_inputs(inputs)
        outs = []
        for x, layers in zip(inputs, self.branches):
            stop = len(layers) - (0 if self.head else 1)
            for layer in layers[:stop]:
                x = layer.forward(x, training)
            outs.append(x)
        if not self.head:
            return outs[0]
        x = np.concatenate(outs, axis=1)
        for layer in self.head[:-1]:
            x = layer.forward(x, training)
        return x

    def forward(self, inputs, training=False):
        """Class probabilities, shape ``(batch, class_count)``, in float64."""
        softmax = (self.head or self.branches[0])[-1]
        return softmax.forward(self.logits(inputs, training).astype(np.float64))

    def backward(self, dlogits):
        d = dlogits
        if self.head:
            for layer in reversed(self.head[:-1]):
                d = layer.backward(d)
            parts = np.split(d, self._split, axis=1)
        else:
            parts = [d]
        for part, layers in zip(parts, self.branches):
            stop = len(layers) - (0 if self.head else 1)
            for layer in reversed(layers[:stop]):
                part = layer.backward(part)

    def loss_and_grad(self, inputs, labels, training=True, return_correct=False):
        """Mean cross-entropy; parameter gradients land in each layer's ``grads``.

        With ``return_correct`` also returns how many rows the forward pass
        classified correctly.
        """
        z = self.logits(inputs, training)
        logp = log_softmax(z.astype(np.float64))
        n = z.shape[0]
        labels = np.asarray(labels)
        loss = -float(logp[np.arange(n), labels].mean())
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        self.backward((d / n).astype(self.dtype))
        if return_correct:
            return loss, int((np.argmax(z, axis=1) == labels).sum())
        return loss

    def loss(self, inputs, labels) -> float:
        logp = log_softmax(self.logits(inputs, training=False).astype(np.float64))
        return -float(logp[np.arange(logp.shape[0]), np.asarray(labels)].mean())

    def predict(self, inputs) -> np.ndarray:
        # argmax returns the first maximum, i.e. ties go to the smaller class
        return np.argmax(self.forward(inputs), axis=1)

    # weights -----------------------------------------------------------

    def get_weights(self) -> list[np.ndarray]:
        return [l.params[n].copy() for l, n in self.parameters()]

    def set_weights(self, weights) -> None:
        pairs = self.parameters()
        if len(weights) != len(pairs):
            raise ShapeError(f"expected {len(pairs)} weight blocks, got {len(weights)}")
        for (l, n), w in zip(pairs, weights):
            if l.params[n].shape != np.shape(w):
                raise ShapeError(f"{l.kind}.{n}: expected shape {l.params[n].shape}, got {np.shape(w)}")
            l.params[n] = np.asarray(w, dtype=self.dtype).copy()

    def zero_output_layer(self) -> None:
        last_dense = [l for l in self._all_layers() if isinstance(l, Dense)][-1]
        for n in last_dense.params:
            last_dense.params[n][...] = 0


# model file ------------------------------------------------------------

MODEL_MAGIC = "GLISSON-MODEL"
MODEL_VERSION = 1


def config_digest(config) -> str:
    payload = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


def save_model(net: Network, dest, config=None, history=None) -> None:
    """Textual JSON header line, then raw little-endian float64 weight blocks."""
    weights = net.get_weights()
    header = {
        "format_version": MODEL_VERSION,
        "spec": net.spec.to_dict(),
        "class_count": net.spec.class_count,
        "config_digest": config_digest(config or {}),
        "shapes": [list(w.shape) for w in weights],
        "history": history or [],
    }
    dest = Path(dest)
    dest.parent.mkdir(parents=True, exist_ok=True)
    with dest.open("wb") as fh:
        fh.write(f"{MODEL_MAGIC} {MODEL_VERSION}\n".encode())
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for w in weights:
            fh.write(np.asarray(w, dtype="<f8").tobytes())


def load_model(src, dtype=np.float32) -> tuple[Network, dict]:
    raw = Path(src).read_bytes()
    first, _, rest = raw.partition(b"\n")
    magic = first.decode(errors="replace").split()
    if len(magic) != 2 or magic[0] != MODEL_MAGIC:
        raise ShapeError(f"{src}: not a model file")
    if int(magic[1]) != MODEL_VERSION:
        raise ShapeError(f"{src}: unsupported format version {magic[1]}")
    header_line, _, blob = rest.partition(b"\n")
    header = json.loads(header_line)
    if header["format_version"] != MODEL_VERSION:
        raise ShapeError(f"{src}: header version {header['format_version']} mismatch")
    net = Network(ModelSpec.from_dict(header["spec"]), dtype=dtype)
    expected = [list(l.params[n].shape) for l, n in net.parameters()]
    if header["shapes"] != expected:
        raise ShapeError(f"{src}: weight shapes do not match the stored spec")
    sizes = [int(np.prod(s)) for s in expected]
    if len(blob) != 8 * sum(sizes):
        raise ShapeError(f"{src}: expected {8 * sum(sizes)} weight bytes, found {len(blob)}")
    flat = np.frombuffer(blob, dtype="<f8")
    weights, offset = [], 0
    for shape, size in zip(expected, sizes):
        weights.append(flat[offset:offset + size].reshape(shape))
        offset += size
    net.set_weights(weights)
    return net, header
