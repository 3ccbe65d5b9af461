"""Sequential models, the architecture catalog, and weight files."""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import layers as L
from .layers import LayerSpec
from .tensor import ShapeError, Rng

CATALOG = ("CNN5", "CNN6", "CNN7", "VGG19", "VGG19_TRUNC", "VGG_S")

# default depth, width and activation for the fresh CNNs: (conv layers, dense nodes, activation)
CNN_DEFAULTS = {"CNN5": (5, 409, "relu"), "CNN6": (6, 449, "tanh"), "CNN7": (7, 87, "relu")}
CNN_FILTERS = (32, 64, 128, 256, 256, 256, 256)
VGG19_BLOCKS = ((2, 64), (2, 128), (4, 256), (4, 512), (4, 512))
VGG_S_WIDTHS = (8, 16, 32, 64, 64)


@dataclass
class Layer:
    spec: LayerSpec
    params: list[np.ndarray]
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params))


@dataclass
class Model:
    name: str
    input_shape: tuple[int, ...]
    layers: list[Layer]
    trainable: set[str] = field(default_factory=set)

    def __post_init__(self):
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names in {self.name}")
        for i, l in enumerate(self.layers):
            if l.spec.activation == "softmax" and i != len(self.layers) - 1:
                raise ValueError(f"{l.name}: softmax is only allowed on the final layer")
        unknown = self.trainable - set(self.param_layer_names())
        if unknown:
            raise ValueError(f"trainable names not parameterized layers: {sorted(unknown)}")

    # -- lookup ----------------------------------------------------------------

    def index(self, name: str) -> int:
        for i, l in enumerate(self.layers):
            if l.name == name:
                return i
        raise KeyError(f"no layer named {name!r} in {self.name}")

    def layer(self, name: str) -> Layer:
        return self.layers[self.index(name)]

    def param_layer_names(self) -> list[str]:
        return [l.name for l in self.layers if l.spec.parameterized]

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.layers[-1].out_shape if self.layers else self.input_shape

    # -- computation -------------------------------------------------------------

    def forward(self, x: np.ndarray, start: int = 0, stop: int | None = None,
                cache_from: int | None = None):
        """Run layers ``[start, stop)``; keep backward caches for indices >= ``cache_from``."""
        stop = len(self.layers) if stop is None else stop
        caches: list = [None] * len(self.layers)
        for i in range(start, stop):
            x, caches[i] = _layer_forward(self.layers[i], x, cache_from is not None and i >= cache_from)
        return x, caches

    def backward(self, dy: np.ndarray, caches: list, stop: int, start: int | None = None,
                 logits_grad: bool = False) -> dict[str, list[np.ndarray]]:
        """Backpropagate from the output down to layer ``stop`` (inclusive).

        Returns parameter gradients for trainable layers only.  When
        ``logits_grad`` is set, ``dy`` is already the gradient w.r.t. the
        final layer's pre-activation (softmax + cross-entropy shortcut).
        """
        start = len(self.layers) - 1 if start is None else start
        grads: dict[str, list[np.ndarray]] = {}
        for i in range(start, stop - 1, -1):
            layer = self.layers[i]
            skip_act = logits_grad and i == len(self.layers) - 1
            dy, g = _layer_backward(layer, dy, caches[i], need_input=i > stop, skip_activation=skip_act)
            if g is not None and layer.name in self.trainable:
                grads[layer.name] = g
        return grads

    def predict(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        if tuple(x.shape[1:]) != tuple(self.input_shape):
            raise ShapeError(f"{self.name}: expected input (n, {self.input_shape}), got {x.shape}")
        dtype = next((l.params[0].dtype for l in self.layers if l.params), np.float32)
        outs = []
        for s in range(0, len(x), batch_size):
            y, _ = self.forward(np.asarray(x[s:s + batch_size], dtype=dtype))
            outs.append(y)
        if not outs:
            return np.zeros((0, *self.output_shape), dtype=dtype)
        return np.concatenate(outs, axis=0)

    def summary_rows(self) -> list[tuple[str, str, tuple[int, ...], int, bool]]:
        """``(name, kind, output shape, params, trainable)`` per layer."""
        return [(l.name, l.spec.kind, l.out_shape, l.n_params, l.name in self.trainable) for l in self.layers]


def _layer_forward(layer: Layer, x: np.ndarray, keep: bool):
    s = layer.spec
    if s.kind == "conv2d":
        return L.conv2d_forward(x, layer.params[0], layer.params[1], s.padding, s.activation, keep)
    if s.kind == "dense":
        return L.dense_forward(x, layer.params[0], layer.params[1], s.activation, keep)
    if s.kind == "maxpool2d":
        return L.maxpool_forward(x, s.pool)
    return L.flatten_forward(x)


def _layer_backward(layer: Layer, dy, cache, need_input: bool, skip_activation: bool = False):
    s = layer.spec
    if cache is None:
        raise RuntimeError(f"{layer.name}: no forward cache; run forward with cache_from set")
    if skip_activation and s.parameterized:
        cache = cache[:-1] + ("linear",)
    if s.kind == "conv2d":
        dx, dw, db = L.conv2d_backward(dy, cache, need_input)
        return dx, [dw, db]
    if s.kind == "dense":
        dx, dw, db = L.dense_backward(dy, cache, need_input)
        return dx, [dw, db]
    if s.kind == "maxpool2d":
        return (L.maxpool_backward(dy, cache) if need_input else None), None
    return (L.flatten_backward(dy, cache) if need_input else None), None


# -- construction ---------------------------------------------------------------------

def init_params(spec: LayerSpec, shapes: list[tuple[int, ...]], rng: Rng, dtype=np.float32) -> list[np.ndarray]:
    """He-normal for relu layers, Glorot-normal otherwise; zero biases."""
    if not shapes:
        return []
    wshape = shapes[0]
    if spec.kind == "conv2d":
        receptive = wshape[0] * wshape[1]
        fan_in, fan_out = receptive * wshape[2], receptive * wshape[3]
    else:
        fan_in, fan_out = wshape
    if spec.activation == "relu":
        std = math.sqrt(2.0 / fan_in)
    else:
        std = math.sqrt(2.0 / (fan_in + fan_out))
    return [rng.normal(wshape, 0.0, std, dtype), np.zeros(shapes[1], dtype=dtype)]


def assemble(name: str, input_shape: Sequence[int], specs: Iterable[LayerSpec], rng: Rng | None,
             dtype=np.float32) -> Model:
    """Validate shapes along ``specs`` and initialize parameters (zeros when ``rng`` is None)."""
    shape = tuple(int(d) for d in input_shape)
    built = []
    for i, spec in enumerate(specs):
        if spec.kind in ("conv2d", "maxpool2d") and len(shape) != 3:
            raise ShapeError(f"{spec.name}: expects (h, w, c) input, got {shape}")
        out = spec.output_shape(shape)
        pshapes = spec.param_shapes(shape)
        if rng is None:
            params = [np.zeros(s, dtype=dtype) for s in pshapes]
        else:
            params = init_params(spec, pshapes, rng.child(i), dtype)
        built.append(Layer(spec, params, shape, out))
        shape = out
    model = Model(name, tuple(int(d) for d in input_shape), built)
    model.trainable = set(model.param_layer_names())
    return model


def vgg_specs(blocks: Sequence[tuple[int, int]]) -> list[LayerSpec]:
    specs = []
    for b, (n_conv, width) in enumerate(blocks, start=1):
        for c in range(1, n_conv + 1):
            specs.append(LayerSpec("conv2d", f"block{b}_conv{c}", filters=width, activation="relu"))
        specs.append(LayerSpec("maxpool2d", f"block{b}_pool"))
    return specs


def catalog_specs(catalog_id: str, num_dense_nodes: int | None = None, class_count: int | None = None,
                  activation: str | None = None, head_name: str | None = None,
                  input_size: int | None = None) -> tuple[tuple[int, int, int], list[LayerSpec]]:
    """Input shape and layer list for a catalog entry."""
    if class_count is None:
        class_count = 1000 if catalog_id == "VGG19" else 3
    if catalog_id in CNN_DEFAULTS:
        n_conv, nodes, act = CNN_DEFAULTS[catalog_id]
        nodes = nodes if num_dense_nodes is None else num_dense_nodes
        act = act if activation is None else activation
        if nodes <= 0:
            raise ValueError("num_dense_nodes must be positive")
        specs = []
        for i in range(n_conv):
            specs.append(LayerSpec("conv2d", f"conv{i + 1}", filters=CNN_FILTERS[i], activation=act))
            specs.append(LayerSpec("maxpool2d", f"pool{i + 1}"))
        specs += [LayerSpec("flatten", "flatten"),
                  LayerSpec("dense", "dense", units=nodes, activation=act),
                  LayerSpec("dense", head_name or "predictions", units=class_count, activation="softmax")]
        size = input_size or 224
        return (size, size, 3), specs
    if catalog_id == "VGG19":
        specs = vgg_specs(VGG19_BLOCKS) + [
            LayerSpec("flatten", "flatten"),
            LayerSpec("dense", "fc1", units=4096, activation="relu"),
            LayerSpec("dense", "fc2", units=4096, activation="relu"),
            LayerSpec("dense", head_name or "predictions", units=class_count, activation="softmax"),
        ]
        size = input_size or 224
        return (size, size, 3), specs
    if catalog_id in ("VGG19_TRUNC", "VGG_S"):
        blocks = VGG19_BLOCKS if catalog_id == "VGG19_TRUNC" else tuple(
            (n, w) for (n, _), w in zip(VGG19_BLOCKS, VGG_S_WIDTHS))
        specs = vgg_specs(blocks) + [
            LayerSpec("flatten", "flatten"),
            LayerSpec("dense", head_name or "predictions_traffic", units=class_count, activation="softmax"),
        ]
        size = input_size or (224 if catalog_id == "VGG19_TRUNC" else 64)
        return (size, size, 3), specs
    raise ValueError(f"unknown catalog id {catalog_id!r}; expected one of {CATALOG}")


def build(catalog_id: str, rng: Rng | int = 0, num_dense_nodes: int | None = None,
          class_count: int | None = None,
          activation: str | None = None, head_name: str | None = None, input_size: int | None = None,
          dtype=np.float32) -> Model:
    """Build and initialize a catalog architecture.

    ``class_count`` defaults to 1000 for VGG19 (ImageNet head) and 3
    elsewhere.  All parameterized layers start trainable.
    """
    if num_dense_nodes is not None and num_dense_nodes <= 0:
        raise ValueError("num_dense_nodes must be positive")
    if class_count is not None and class_count < 1:
        raise ValueError("class_count must be positive")
    in_shape, specs = catalog_specs(catalog_id, num_dense_nodes, class_count, activation, head_name, input_size)
    if not isinstance(rng, Rng):
        rng = Rng(rng)
    return assemble(catalog_id, in_shape, specs, rng, dtype)


# -- accounting and freezing ------------------------------------------------------------

def count_params(model: Model, scope: str = "total"):
    """``total`` and ``trainable`` give ints; ``per_layer`` maps name -> count."""
    if scope == "per_layer":
        return {l.name: l.n_params for l in model.layers}
    if scope == "total":
        return sum(l.n_params for l in model.layers)
    if scope == "trainable":
        return sum(l.n_params for l in model.layers if l.name in model.trainable)
    if scope == "frozen":
        return sum(l.n_params for l in model.layers if l.name not in model.trainable)
    raise ValueError(f"unknown scope {scope!r}")


def spec_param_counts(catalog_id: str, last_k: int | None = None, **kwargs) -> tuple[int, int]:
    """(total, trainable) parameter counts from the layer specs alone, without allocating weights.

    ``last_k=None`` treats every parameterized layer as trainable.
    """
    shape, specs = catalog_specs(catalog_id, **kwargs)
    sizes = []
    for spec in specs:
        if spec.parameterized:
            sizes.append(L.param_count(spec.param_shapes(shape)))
        shape = spec.output_shape(shape)
    trainable = sizes if last_k is None else sizes[len(sizes) - last_k:]
    return sum(sizes), sum(trainable)


def set_trainable(model: Model, last_k: int | None = None, names: Iterable[str] | None = None) -> Model:
    """Freeze everything except the last ``last_k`` parameterized layers (or an explicit name set)."""
    params = model.param_layer_names()
    if (last_k is None) == (names is None):
        raise ValueError("give exactly one of last_k or names")
    if names is not None:
        chosen = set(names)
        unknown = chosen - set(params)
        if unknown:
            raise KeyError(f"unknown or non-parameterized layers: {sorted(unknown)}")
    else:
        if last_k == "all":
            last_k = len(params)
        if not 0 <= last_k <= len(params):
            raise ValueError(f"last_k={last_k} outside [0, {len(params)}]")
        chosen = set(params[len(params) - last_k:])
    model.trainable = chosen
    return model


def truncate_at(model: Model, layer_name: str) -> Model:
    """Feature extractor whose output is the activation of ``layer_name``.

    Parameter arrays are shared with ``model``, not copied.
    """
    idx = model.index(layer_name)
    kept = model.layers[:idx + 1]
    return Model(f"{model.name}@{layer_name}", model.input_shape, list(kept),
                 {n for n in model.trainable if any(l.name == n for l in kept)})


def split_at(model: Model, layer_name: str) -> tuple[Model, Model]:
    """Split after ``layer_name`` into (head, tail); ``tail`` consumes the head's output."""
    idx = model.index(layer_name)
    head = truncate_at(model, layer_name)
    rest = model.layers[idx + 1:]
    if not rest:
        raise ValueError(f"{layer_name} is the last layer; nothing to split off")
    tail = Model(f"{model.name}>{layer_name}", rest[0].in_shape, list(rest),
                 {n for n in model.trainable if any(l.name == n for l in rest)})
    return head, tail


# -- weight files ----------------------------------------------------------------------------

MAGIC = b"NNWT"
VERSION = 1


class WeightFileError(ValueError):
    pass


class ShapeConflictError(WeightFileError):
    def __init__(self, layer: str, expected, found):
        super().__init__(f"shape conflict for layer {layer!r}: model has {expected}, file has {found}")
        self.layer = layer


def write_weight_file(path: str | Path, entries: Iterable[tuple[str, Sequence[np.ndarray]]]) -> None:
    """Write ``(name, tensors)`` records in order.  Tensors are stored as little-endian float32."""
    entries = list(entries)
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(entries)))
        for name, tensors in entries:
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise WeightFileError(f"layer name too long: {name[:40]}...")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", len(tensors)))
            for t in tensors:
                t = np.asarray(t)
                f.write(struct.pack("<B", t.ndim))
                f.write(struct.pack(f"<{t.ndim}I", *t.shape))
                f.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    pos = f.tell()
    buf = f.read(n)
    if len(buf) != n:
        raise WeightFileError(f"truncated weight file at byte {pos}: expected {n} bytes for {what}")
    return buf


def read_weight_file(path: str | Path) -> dict[str, list[np.ndarray]]:
    """Read every record into a name -> tensors mapping (insertion order = file order)."""
    out: dict[str, list[np.ndarray]] = {}
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != MAGIC:
            raise WeightFileError(f"bad magic {magic!r} in {path}")
        version, count = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != VERSION:
            raise WeightFileError(f"unsupported weight file version {version} in {path}")
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, nlen, "layer name").decode("utf-8")
            (tcount,) = struct.unpack("<B", _read_exact(f, 1, "tensor count"))
            tensors = []
            for _ in range(tcount):
                (rank,) = struct.unpack("<B", _read_exact(f, 1, "rank"))
                dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "dims"))
                n = int(np.prod(dims, dtype=np.int64))
                pos = f.tell()
                arr = np.fromfile(f, dtype="<f4", count=n)
                if arr.size != n:
                    raise WeightFileError(f"truncated weight file at byte {pos}: tensor of {name!r} "
                                          f"needs {n} values, found {arr.size}")
                tensors.append(arr.astype(np.float32, copy=False).reshape(dims))
            out[name] = tensors
    return out


def save_weights(model: Model, path: str | Path) -> None:
    write_weight_file(path, [(l.name, l.params) for l in model.layers if l.spec.parameterized])


def load_weights(model: Model, path: str | Path) -> Model:
    """Strict load: every parameterized layer must be present with identical shapes."""
    data = read_weight_file(path)
    missing = [n for n in model.param_layer_names() if n not in data]
    if missing:
        raise WeightFileError(f"{path}: missing layers {missing}")
    _copy_matching(model, data, model.param_layer_names())
    return model


@dataclass
class ImportReport:
    matched: list[str]
    unmatched_model: list[str]
    unmatched_file: list[str]


def import_by_name(model: Model, source: str | Path | dict) -> ImportReport:
    """Copy tensors for layers present in both model and ``source``; others keep their init."""
    data = source if isinstance(source, dict) else read_weight_file(source)
    params = model.param_layer_names()
    matched = [n for n in params if n in data]
    _copy_matching(model, data, matched)
    return ImportReport(matched, [n for n in params if n not in data],
                        [n for n in data if n not in set(params)])


def _copy_matching(model: Model, data: dict, names: list[str]) -> None:
    # validate everything before touching the model
    for n in names:
        layer = model.layer(n)
        expected = [p.shape for p in layer.params]
        found = [t.shape for t in data[n]]
        if expected != found:
            raise ShapeConflictError(n, expected, found)
    for n in names:
        layer = model.layer(n)
        layer.params = [t.astype(p.dtype, copy=True) for p, t in zip(layer.params, data[n])]


def weights_fingerprint(model: Model, upto: int | None = None) -> str:
    h = hashlib.sha256()
    for l in model.layers[: (None if upto is None else upto + 1)]:
        h.update(l.name.encode())
        for p in l.params:
            h.update(str(p.shape).encode())
            h.update(np.ascontiguousarray(p, dtype="<f4").tobytes())
    return h.hexdigest()
