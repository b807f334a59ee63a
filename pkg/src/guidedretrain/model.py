"""Small CNN classifiers: build, train, evaluate, serialize, extract traces.

A ModelState is immutable: training returns a new state, so retraining
configurations that restart "from the original weights" are exact by
construction. Weights initialize He-uniform from a PCG32 stream; training is
plain mini-batch SGD with momentum and a PCG32-shuffled batch order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Conv2D, Dense, Graph, MaxPool2D, Relu, backward_grads, forward_eval, sgd_step
from .rng import Pcg32

MAGIC = b"GRCNN1\x00"
FORMAT_VERSION = 1


class ModelFileError(ValueError):
    """Base class for model file problems."""


class BadMagicError(ModelFileError):
    pass


class VersionMismatchError(ModelFileError):
    pass


class TruncatedFileError(ModelFileError):
    pass


@dataclass(frozen=True)
class ArchitectureDescriptor:
    """Layer chain plus input shape; the last layer is the dense class head."""

    input_shape: tuple[int, int, int]
    classes: int
    layers: tuple

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.classes}")
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        if not self.layers or not isinstance(self.layers[-1], Dense):
            raise ValueError("architecture must end in a dense head")
        if self.layers[-1].units != self.classes:
            raise ValueError(
                f"head has {self.layers[-1].units} units but classes = {self.classes}"
            )

    def neuron_layers(self) -> tuple[str, ...]:
        """Names of the conv/dense layers, in architecture order."""
        return tuple(l.name for l in self.layers if isinstance(l, (Conv2D, Dense)))

    def post_activation_source(self, name: str) -> str:
        """Node whose output is the post-activation value of neuron layer `name`.

        That is the relu immediately following the layer when present,
        otherwise the layer itself.
        """
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                if not isinstance(layer, (Conv2D, Dense)):
                    raise KeyError(f"layer {name!r} has no neurons")
                nxt = self.layers[i + 1] if i + 1 < len(self.layers) else None
                if isinstance(nxt, Relu):
                    return nxt.name
                return name
        raise KeyError(f"unknown layer {name!r}")

    def to_json(self) -> str:
        entries = []
        for layer in self.layers:
            if isinstance(layer, Conv2D):
                entries.append({
                    "kind": "conv", "name": layer.name, "filters": layer.filters,
                    "kernel": layer.kernel, "stride": layer.stride, "padding": layer.padding,
                })
            elif isinstance(layer, MaxPool2D):
                entries.append({"kind": "maxpool", "name": layer.name, "size": layer.size})
            elif isinstance(layer, Dense):
                entries.append({"kind": "dense", "name": layer.name, "units": layer.units})
            elif isinstance(layer, Relu):
                entries.append({"kind": "relu", "name": layer.name})
            else:
                raise ValueError(f"unknown layer {layer!r}")
        doc = {"input_shape": list(self.input_shape), "classes": self.classes, "layers": entries}
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_json(text: str) -> "ArchitectureDescriptor":
        doc = json.loads(text)
        layers = []
        for e in doc["layers"]:
            kind = e["kind"]
            if kind == "conv":
                layers.append(Conv2D(e["name"], e["filters"], e["kernel"], e["stride"], e["padding"]))
            elif kind == "maxpool":
                layers.append(MaxPool2D(e["name"], e["size"]))
            elif kind == "dense":
                layers.append(Dense(e["name"], e["units"]))
            elif kind == "relu":
                layers.append(Relu(e["name"]))
            else:
                raise ValueError(f"unknown layer kind {kind!r}")
        return ArchitectureDescriptor(tuple(doc["input_shape"]), doc["classes"], tuple(layers))


def desk_architecture(input_shape=(16, 16, 1), classes=4) -> ArchitectureDescriptor:
    """Default desk-scale CNN exercising every supported layer kind."""
    return ArchitectureDescriptor(
        input_shape=tuple(input_shape),
        classes=classes,
        layers=(
            Conv2D("conv1", filters=8, kernel=3, stride=1, padding="same"),
            Relu("relu1"),
            MaxPool2D("pool1", size=2),
            Conv2D("conv2", filters=16, kernel=3, stride=1, padding="same"),
            Relu("relu2"),
            MaxPool2D("pool2", size=2),
            Dense("dense1", units=32),
            Relu("relu3"),
            Dense("dense2", units=classes),
        ),
    )


@dataclass(frozen=True)
class ModelState:
    architecture: ArchitectureDescriptor
    parameters: dict
    init_seed: int
    training_history: tuple = ()

    def graph(self) -> Graph:
        return Graph(self.architecture.input_shape, self.architecture.layers, self.parameters)

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters.values()))


@dataclass(frozen=True)
class Dataset:
    """Images (N, H, W, C) in [0, 1] with integer class labels."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, H, W, C), got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ValueError("images and labels disagree on N")
        if len(self.images) < 1:
            raise ValueError("dataset must contain at least one input")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ValueError("label out of range")
        lo, hi = float(self.images.min()), float(self.images.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"pixel values outside [0, 1]: min {lo}, max {hi}")

    def __len__(self) -> int:
        return len(self.images)

    def take(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.class_count)


@dataclass(frozen=True)
class ActivationTrace:
    """Post-activation values of selected layers, concatenated in architecture order."""

    input_id: int
    layers: tuple[str, ...]
    values: np.ndarray  # float64


@dataclass(frozen=True)
class TrainParams:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    shuffle_seed: int = 0
    shuffle_stream: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def _freeze(params: dict) -> dict:
    for arr in params.values():
        arr.flags.writeable = False
    return params


def build_model(arch: ArchitectureDescriptor, seed: int) -> ModelState:
    """He-uniform weights from PCG32(seed), zero biases."""
    shapes = Graph(
        arch.input_shape, arch.layers,
        _zero_params(arch),
    ).param_shapes()
    rng = Pcg32(seed)
    params = {}
    for key, shape in shapes.items():
        if key.endswith(".b"):
            params[key] = np.zeros(shape, dtype=np.float32)
            continue
        fan_in = int(np.prod(shape[:-1]))
        limit = math.sqrt(6.0 / fan_in)
        u = rng.uniforms(int(np.prod(shape)))
        params[key] = ((2.0 * u - 1.0) * limit).astype(np.float32).reshape(shape)
    return ModelState(arch, _freeze(params), init_seed=seed)


def _zero_params(arch: ArchitectureDescriptor) -> dict:
    params = {}
    shape = arch.input_shape
    for layer in arch.layers:
        if isinstance(layer, Conv2D):
            h, w, c = shape
            params[f"{layer.name}.w"] = np.zeros((layer.kernel, layer.kernel, c, layer.filters), np.float32)
            params[f"{layer.name}.b"] = np.zeros((layer.filters,), np.float32)
            if layer.padding == "same":
                shape = (-(-h // layer.stride), -(-w // layer.stride), layer.filters)
            else:
                shape = ((h - layer.kernel) // layer.stride + 1,
                         (w - layer.kernel) // layer.stride + 1, layer.filters)
        elif isinstance(layer, MaxPool2D):
            h, w, c = shape
            shape = (h // layer.size, w // layer.size, c)
        elif isinstance(layer, Dense):
            d = int(np.prod(shape))
            params[f"{layer.name}.w"] = np.zeros((d, layer.units), np.float32)
            params[f"{layer.name}.b"] = np.zeros((layer.units,), np.float32)
            shape = (layer.units,)
    return params


def train(model: ModelState, data: Dataset, hp: TrainParams) -> ModelState:
    """Mini-batch SGD with momentum; returns a new ModelState, input untouched."""
    if data.class_count != model.architecture.classes:
        raise ValueError(
            f"dataset has {data.class_count} classes, model head expects {model.architecture.classes}"
        )
    params = {k: v.copy() for k, v in model.parameters.items()}
    graph = Graph(model.architecture.input_shape, model.architecture.layers, params)
    rng = Pcg32(hp.shuffle_seed, stream=hp.shuffle_stream)
    velocity = None
    history = list(model.training_history)
    n = len(data)
    for epoch in range(hp.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, hp.batch_size):
            idx = order[start:start + hp.batch_size]
            state = forward_eval(graph, data.images[idx], data.labels[idx])
            grads = backward_grads(state)
            graph.params, velocity = sgd_step(graph.params, grads, hp.lr, hp.momentum, velocity)
            total += state.loss * len(idx)
        history.append((len(model.training_history) + epoch, total / n))
    return ModelState(model.architecture, _freeze(graph.params), model.init_seed, tuple(history))


def predict(model: ModelState, images: np.ndarray, batch_size: int = 256):
    """(argmax labels, softmax probabilities); ties resolve to the lowest class."""
    images = np.asarray(images, dtype=np.float32)
    if images.shape == model.architecture.input_shape:
        images = images[None]
    graph = model.graph()
    labels = np.empty(len(images), dtype=np.int64)
    probs = np.empty((len(images), model.architecture.classes), dtype=np.float32)
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        logits = forward_eval(graph, chunk).logits.astype(np.float64)
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        probs[start:start + len(chunk)] = (e / e.sum(axis=1, keepdims=True)).astype(np.float32)
        labels[start:start + len(chunk)] = logits.argmax(axis=1)
    return labels, probs


def accuracy(model: ModelState, data: Dataset) -> float:
    labels, _ = predict(model, data.images)
    return float(np.mean(labels == data.labels))


def activation_trace(model: ModelState, image: np.ndarray, layers, input_id: int = 0) -> ActivationTrace:
    """Trace of one input over the selected neuron layers (conv/dense names)."""
    selected = _resolve_trace_layers(model.architecture, layers)
    values = activation_traces(model, np.asarray(image, dtype=np.float32)[None], selected)[0]
    return ActivationTrace(input_id=input_id, layers=selected, values=values)


def _resolve_trace_layers(arch: ArchitectureDescriptor, layers) -> tuple[str, ...]:
    known = arch.neuron_layers()
    requested = set(layers)
    unknown = requested - set(known)
    if unknown:
        all_names = {l.name for l in arch.layers}
        for name in sorted(unknown):
            if name not in all_names:
                raise KeyError(f"unknown layer {name!r}")
            raise KeyError(f"layer {name!r} has no neurons (select conv/dense layers)")
    # architecture order regardless of request order
    return tuple(name for name in known if name in requested)


def activation_traces(model: ModelState, images: np.ndarray, layers=None, batch_size: int = 256) -> np.ndarray:
    """Float64 trace matrix (N, total neurons of selected layers).

    `layers=None` selects every conv/dense layer.
    """
    arch = model.architecture
    selected = arch.neuron_layers() if layers is None else _resolve_trace_layers(arch, layers)
    if not selected:
        raise ValueError("no layers selected")
    sources = [arch.post_activation_source(name) for name in selected]
    graph = model.graph()
    images = np.asarray(images, dtype=np.float32)
    rows = []
    for start in range(0, len(images), batch_size):
        state = forward_eval(graph, images[start:start + batch_size])
        n = state.batch
        parts = [state.activations[src].reshape(n, -1).astype(np.float64) for src in sources]
        rows.append(np.concatenate(parts, axis=1))
    return np.concatenate(rows, axis=0)


def neuron_count(arch: ArchitectureDescriptor, layers=None) -> int:
    """Total neurons of the selected (default: all) conv/dense layers."""
    selected = arch.neuron_layers() if layers is None else _resolve_trace_layers(arch, layers)
    graph = Graph(arch.input_shape, arch.layers, _zero_params(arch))
    counts = {
        node.name: int(np.prod(node.out_shape))
        for node in graph.nodes
        if node.kind in ("conv2d", "dense")
    }
    return sum(counts[name] for name in selected)


def save_model(model: ModelState, path) -> None:
    """Write the model file: magic, version, descriptor JSON, raw float32 blobs."""
    blob = model.architecture.to_json().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([FORMAT_VERSION]))
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for value in model.parameters.values():
            fh.write(np.ascontiguousarray(value, dtype="<f4").tobytes())


def load_model(path) -> ModelState:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 9:
        raise TruncatedFileError(f"file too short ({len(raw)} bytes)")
    if raw[:len(MAGIC)] != MAGIC:
        raise BadMagicError(f"bad magic {raw[:len(MAGIC)]!r}")
    version = raw[len(MAGIC)]
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, expected {FORMAT_VERSION}")
    off = len(MAGIC) + 1
    blob_len = int.from_bytes(raw[off:off + 8], "little")
    off += 8
    if len(raw) < off + blob_len:
        raise TruncatedFileError("descriptor truncated")
    arch = ArchitectureDescriptor.from_json(raw[off:off + blob_len].decode("utf-8"))
    off += blob_len
    shapes = Graph(arch.input_shape, arch.layers, _zero_params(arch)).param_shapes()
    params = {}
    for key, shape in shapes.items():
        count = int(np.prod(shape))
        end = off + 4 * count
        if len(raw) < end:
            raise TruncatedFileError(f"parameter {key!r} truncated")
        params[key] = np.frombuffer(raw[off:end], dtype="<f4").reshape(shape).copy()
        off = end
    if off != len(raw):
        raise TruncatedFileError(f"{len(raw) - off} trailing bytes after parameters")
    return ModelState(arch, _freeze(params), init_seed=0)
