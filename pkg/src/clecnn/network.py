"""Network specifications, model assembly, regimes and checkpoint I/O.

A :class:`NetworkSpec` is a JSON-serialisable list of layer descriptors::

    {"name": "conv1", "type": "conv", "filters": 96, "kernel": 11, "stride": 4}
    {"name": "norm1", "type": "lrn", "size": 5, "alpha": 1.0, "beta": 0.75}
    {"name": "pool1", "type": "pool", "window": 3, "stride": 2}
    {"name": "inc3a", "type": "inception", "b1": 64, "b3_reduce": 96, "b3": 128,
     "b5_reduce": 16, "b5": 32, "pool_proj": 32}
    {"name": "fc8", "type": "fc", "units": 2}

plus ``relu`` and ``dropout`` (``ratio``). Dense layers flatten their input.
The spec's ``classifier`` names the dense layer(s) that are re-initialised
and trained under the fine-tuning regimes.
"""
import json
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import layers as L
from .errors import CheckpointFormatError, ConfigError, DonorMismatchError, ShapeError
from .tensor import DTYPE, init_weights

REGIMES = ("DT", "SFT", "DFT")

MAGIC = b"CLEN"
FORMAT_VERSION = 1


class BadMagicError(CheckpointFormatError):
    pass


class TruncatedCheckpointError(CheckpointFormatError):
    pass


# ---------------------------------------------------------------- specs

@dataclass
class NetworkSpec:
    name: str
    input_shape: tuple
    layers: list
    classifier: list

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.classifier = list(self.classifier)
        names = [d["name"] for d in self.layers]
        if len(set(names)) != len(names):
            raise ConfigError(f"{self.name}: duplicate layer names")
        fc = [d["name"] for d in self.layers if d["type"] == "fc"]
        if not fc or self.layers[-1]["type"] != "fc":
            raise ConfigError(f"{self.name}: the last layer must be the dense classifier feeding the loss")
        if not self.classifier or any(c not in fc for c in self.classifier):
            raise ConfigError(f"{self.name}: classifier layers must name dense layers")
        if fc[-1] not in self.classifier:
            raise ConfigError(f"{self.name}: the output layer must be part of the classifier")

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], d["input_shape"], d["layers"], d["classifier"])

    def to_dict(self):
        return {"name": self.name, "input_shape": list(self.input_shape),
                "layers": self.layers, "classifier": self.classifier}

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @property
    def num_classes(self):
        return int(self.layers[-1]["units"])


def builtin_specs():
    return sorted(p.name[:-5] for p in resources.files("clecnn.specs").iterdir() if p.name.endswith(".json"))


def get_spec(name_or_path):
    """Load a bundled spec (``net1``, ``net1-mini``, ...) or a JSON file."""
    if str(name_or_path) in builtin_specs():
        text = resources.files("clecnn.specs").joinpath(f"{name_or_path}.json").read_text()
        return NetworkSpec.from_dict(json.loads(text))
    path = Path(name_or_path)
    if not path.exists():
        raise ConfigError(f"unknown network spec {name_or_path!r}; bundled: {', '.join(builtin_specs())}")
    return NetworkSpec.load(path)


def replicate_channels(batch, channels=3):
    """Adapter feeding single-channel images to specs that expect RGB input."""
    if batch.shape[1] == channels:
        return batch
    if batch.shape[1] != 1:
        raise ShapeError(f"can only replicate single-channel input, got {batch.shape[1]} channels")
    return np.repeat(batch, channels, axis=1)


# ---------------------------------------------------------------- layers

class Dense:
    """Weights (D, K), bias (K,)."""

    def __init__(self, weights, bias, name):
        self.weights, self.bias, self.name = weights, bias, name


class _Layer:
    params = ()

    def param_layers(self):
        return []


class ConvLayer(_Layer):
    def __init__(self, name, filters, kernel, stride=1, pad=0, groups=1):
        self.name = name
        self.filters, self.kernel, self.stride, self.pad, self.groups = filters, kernel, stride, pad, groups
        self.p = None
        self.input_grad = True

    def setup(self, in_shape):
        c = in_shape[0]
        if c % self.groups:
            raise ShapeError(f"{self.name}: {c} input channels not divisible into {self.groups} groups")
        w = np.zeros((self.filters, c // self.groups, self.kernel, self.kernel), dtype=DTYPE)
        self.p = L.ConvParams(w, np.zeros(self.filters, dtype=DTYPE), self.stride, self.pad, self.groups, self.name)
        return self.p.output_shape(in_shape)

    def param_layers(self):
        return [self.p]

    def forward(self, x, ctx):
        out, cols = L.conv_forward(x, self.p, return_cols=True)
        self._cache = (x, cols) if ctx.train else None
        return out

    def backward(self, g, grads):
        x, cols = self._cache
        gx, gw, gb = L.conv_backward(x, self.p, g, cols=cols, input_grad=self.input_grad)
        grads[self.name] = (gw, gb)
        return gx


class ReluLayer(_Layer):
    def __init__(self, name):
        self.name = name

    def setup(self, in_shape):
        return in_shape

    def forward(self, x, ctx):
        self._cache = x if ctx.train else None
        return L.relu_forward(x)

    def backward(self, g, grads):
        return L.relu_backward(self._cache, g)


class LrnLayer(_Layer):
    def __init__(self, name, size=5, alpha=1.0, beta=0.75):
        self.name = name
        self.p = L.LrnParams(size, alpha, beta)

    def setup(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"{self.name}: LRN needs a CHW input")
        return in_shape

    def forward(self, x, ctx):
        self._cache = x if ctx.train else None
        return L.lrn_forward(x, self.p)

    def backward(self, g, grads):
        return L.lrn_backward(self._cache, self.p, g)


class PoolLayer(_Layer):
    def __init__(self, name, window=2, stride=2, pad=0):
        self.name = name
        self.p = L.PoolParams(window, stride, pad)

    def setup(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"{self.name}: pooling needs a CHW input")
        return self.p.output_shape(in_shape)

    def forward(self, x, ctx):
        out, argmax = L.maxpool_forward(x, self.p)
        self._cache = (argmax, x.shape) if ctx.train else None
        return out

    def backward(self, g, grads):
        argmax, shape = self._cache
        return L.maxpool_backward(argmax, g, shape)


class DropoutLayer(_Layer):
    def __init__(self, name, ratio=0.5):
        self.name = name
        self.state = L.DropoutState(ratio)

    def setup(self, in_shape):
        return in_shape

    def forward(self, x, ctx):
        self.state.mode = "train" if ctx.train else "infer"
        return L.dropout_forward(x, self.state, ctx.rng)

    def backward(self, g, grads):
        return L.dropout_backward(g, self.state)


class DenseLayer(_Layer):
    def __init__(self, name, units):
        self.name = name
        self.units = units
        self.p = None

    def setup(self, in_shape):
        d = int(np.prod(in_shape))
        self.p = Dense(np.zeros((d, self.units), dtype=DTYPE), np.zeros(self.units, dtype=DTYPE), self.name)
        return (self.units,)

    def param_layers(self):
        return [self.p]

    def forward(self, x, ctx):
        flat = x.reshape(x.shape[0], -1)
        self._cache = (flat, x.shape) if ctx.train else None
        return L.fc_forward(flat, self.p.weights, self.p.bias)

    def backward(self, g, grads):
        flat, shape = self._cache
        gx, gw, gb = L.fc_backward(flat, self.p.weights, g)
        grads[self.name] = (gw, gb)
        return gx.reshape(shape)


class InceptionLayer(_Layer):
    """Four parallel branches concatenated along channels.

    1x1 | 1x1 -> 3x3 | 1x1 -> 5x5 | 3x3 max pool -> 1x1, each conv followed by ReLU.
    """

    def __init__(self, name, b1, b3_reduce, b3, b5_reduce, b5, pool_proj):
        self.name = name
        self.widths = (b1, b3, b5, pool_proj)

        def conv(suffix, filters, kernel):
            return [ConvLayer(f"{name}/{suffix}", filters, kernel, 1, kernel // 2), ReluLayer(f"{name}/{suffix}/relu")]

        self.branches = [
            conv("1x1", b1, 1),
            conv("3x3_reduce", b3_reduce, 1) + conv("3x3", b3, 3),
            conv("5x5_reduce", b5_reduce, 1) + conv("5x5", b5, 5),
            [PoolLayer(f"{name}/pool", 3, 1, 1)] + conv("pool_proj", pool_proj, 1),
        ]

    def setup(self, in_shape):
        outs = []
        for branch in self.branches:
            shape = in_shape
            for layer in branch:
                shape = layer.setup(shape)
            outs.append(shape)
        if any(o[1:] != in_shape[1:] for o in outs):
            raise ShapeError(f"{self.name}: inception branches must preserve the spatial extent")
        return (sum(o[0] for o in outs),) + tuple(in_shape[1:])

    def param_layers(self):
        return [p for branch in self.branches for layer in branch for p in layer.param_layers()]

    def forward(self, x, ctx):
        outs = []
        for branch in self.branches:
            h = x
            for layer in branch:
                h = layer.forward(h, ctx)
            outs.append(h)
        return np.concatenate(outs, axis=1)

    def backward(self, g, grads):
        gx = None
        start = 0
        for branch, width in zip(self.branches, self.widths):
            h = g[:, start:start + width]
            start += width
            for layer in reversed(branch):
                h = layer.backward(h, grads)
            gx = h if gx is None else gx + h
        return gx


def _make_layer(d):
    kind = d["type"]
    name = d["name"]
    if kind == "conv":
        return ConvLayer(name, d["filters"], d["kernel"], d.get("stride", 1), d.get("pad", 0), d.get("groups", 1))
    if kind == "relu":
        return ReluLayer(name)
    if kind == "lrn":
        return LrnLayer(name, d.get("size", 5), d.get("alpha", 1.0), d.get("beta", 0.75))
    if kind == "pool":
        return PoolLayer(name, d.get("window", 2), d.get("stride", 2), d.get("pad", 0))
    if kind == "dropout":
        return DropoutLayer(name, d.get("ratio", 0.5))
    if kind == "fc":
        return DenseLayer(name, d["units"])
    if kind == "inception":
        return InceptionLayer(name, d["b1"], d["b3_reduce"], d["b3"], d["b5_reduce"], d["b5"], d["pool_proj"])
    raise ConfigError(f"unknown layer type {kind!r} ({name})")


# ---------------------------------------------------------------- model

@dataclass
class _Context:
    train: bool
    rng: object = None


@dataclass
class RegimeSpec:
    regime: str = "DT"
    donor: "Checkpoint" = None

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.regime == "DT" and self.donor is not None:
            raise ConfigError("deep training (DT) starts from random weights; no donor allowed")
        if self.regime != "DT" and self.donor is None:
            raise ConfigError(f"regime {self.regime} needs a donor checkpoint")

    def multiplier(self, layer_name, classifier_names):
        if self.regime == "SFT" and layer_name not in classifier_names:
            return 0.0
        return 1.0


class Model:
    def __init__(self, spec):
        self.spec = spec
        self.layers = [_make_layer(d) for d in spec.layers]
        shape = spec.input_shape
        self.shapes = [shape]
        for layer in self.layers:
            shape = layer.setup(shape)
            self.shapes.append(shape)
        if shape != (spec.num_classes,):
            raise ShapeError(f"{spec.name}: output shape {shape} is not a class vector")
        self.params = {}
        for layer in self.layers:
            for p in layer.param_layers():
                self.params[p.name] = p
        self.multipliers = {name: 1.0 for name in self.params}
        self.regime = "DT"
        if isinstance(self.layers[0], ConvLayer):
            self.layers[0].input_grad = False

    # parameters as {name: (weights, bias)}
    def state(self):
        return {name: (p.weights.copy(), p.bias.copy()) for name, p in self.params.items()}

    def load_state(self, state):
        for name, (w, b) in state.items():
            p = self.params[name]
            p.weights[...] = w
            p.bias[...] = b

    def is_classifier(self, name):
        return name in self.spec.classifier

    def logits(self, x, train=False, rng=None):
        if x.ndim != 4 or tuple(x.shape[1:]) != self.spec.input_shape:
            raise ShapeError(f"{self.spec.name}: batch shape {x.shape[1:]} != input shape {self.spec.input_shape}")
        ctx = _Context(train, rng)
        h = x.astype(DTYPE, copy=False) if x.dtype != np.float64 else x
        for layer in self.layers:
            h = layer.forward(h, ctx)
        return h

    def backward(self, grad_logits):
        grads = {}
        g = grad_logits
        for layer in reversed(self.layers):
            g = layer.backward(g, grads)
            if g is None:
                break
        return grads

    def loss_and_grads(self, x, targets, rng):
        logits = self.logits(x, train=True, rng=rng)
        loss, g = L.softmax_loss(logits, targets)
        return loss, self.backward(g)


def forward(model, batch, mode="infer", rng=None):
    """Class probabilities (N, classes) for ``batch``."""
    if mode not in ("train", "infer"):
        raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
    logits = model.logits(batch, train=mode == "train", rng=rng)
    return L.softmax(logits.astype(np.float64))


def build(spec, regime=None, rng=None, init="uniform_scaled"):
    """Assemble a model and bind its weights according to ``regime``.

    Every layer draws fresh weights from ``rng`` in declaration order; under
    SFT/DFT the non-classifier layers are then overwritten with the donor's.
    """
    regime = regime or RegimeSpec("DT")
    model = Model(spec)
    for name, p in model.params.items():
        p.weights[...] = init_weights(p.weights.shape, init, rng)
        p.bias[...] = 0
    if regime.donor is not None:
        bind_donor(model, regime.donor)
    model.regime = regime.regime
    model.multipliers = {name: regime.multiplier(name, spec.classifier) for name in model.params}
    return model


def bind_donor(model, donor):
    bad = []
    for name, p in model.params.items():
        if model.is_classifier(name):
            continue
        rec = donor.records.get(name)
        if rec is None or rec[0].shape != p.weights.shape or rec[1].shape != p.bias.shape:
            bad.append(name)
    if bad:
        raise DonorMismatchError(bad)
    for name, p in model.params.items():
        if not model.is_classifier(name):
            w, b = donor.records[name]
            p.weights[...] = w
            p.bias[...] = b


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    records: dict  # name -> (weights, bias), in layer order
    metadata: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, model, **metadata):
        meta = {"spec": model.spec.name, "regime": model.regime}
        meta.update(metadata)
        return cls(model.state(), meta)

    def check_against(self, spec):
        model = Model(spec)
        bad = [n for n, p in model.params.items()
               if n not in self.records or self.records[n][0].shape != p.weights.shape]
        bad += [n for n in self.records if n not in model.params]
        if bad:
            raise DonorMismatchError(bad)

    def to_model(self, spec):
        self.check_against(spec)
        model = Model(spec)
        model.load_state(self.records)
        model.regime = self.metadata.get("regime", "DT")
        return model


def _bias_len(dims):
    # conv weights (out, in, kh, kw) -> out; dense (in, out) -> out
    return dims[0] if len(dims) != 2 else dims[1]


def checkpoint_bytes(ckpt):
    out = [MAGIC, struct.pack("<II", ckpt.version, len(ckpt.records))]
    for name, (w, b) in ckpt.records.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", w.ndim) + struct.pack(f"<{w.ndim}Q", *w.shape))
        if b.shape != (_bias_len(w.shape),):
            raise ShapeError(f"{name}: bias shape {b.shape} inconsistent with weights {w.shape}")
        out.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
        out.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    meta = json.dumps(ckpt.metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out.append(struct.pack("<I", len(meta)) + meta)
    return b"".join(out)


def save_checkpoint(model_or_ckpt, path, **metadata):
    ckpt = model_or_ckpt if isinstance(model_or_ckpt, Checkpoint) else Checkpoint.from_model(model_or_ckpt, **metadata)
    Path(path).write_bytes(checkpoint_bytes(ckpt))
    return ckpt


def parse_checkpoint(data):
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedCheckpointError(f"checkpoint truncated at byte {pos} (needed {n} more)")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise BadMagicError("not a checkpoint file (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    records = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        nw = int(np.prod(dims))
        w = np.frombuffer(take(4 * nw), dtype="<f4").reshape(dims).astype(DTYPE)
        b = np.frombuffer(take(4 * _bias_len(dims)), dtype="<f4").astype(DTYPE)
        records[name] = (w, b)
    (mlen,) = struct.unpack("<I", take(4))
    metadata = json.loads(take(mlen).decode("utf-8"))
    if pos != len(data):
        raise CheckpointFormatError(f"{len(data) - pos} trailing bytes after checkpoint payload")
    return Checkpoint(records, metadata, version)


def load_checkpoint(path, spec=None):
    ckpt = parse_checkpoint(Path(path).read_bytes())
    if spec is not None:
        ckpt.check_against(spec)
    return ckpt
