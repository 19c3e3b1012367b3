"""Model graphs for IR-BRAINNET and Modified-DEMNET.

A :class:`ModelGraph` is an ordered list of :class:`LayerSpec` plus a flat
``"layer/tensor" -> array`` parameter map. Graphs know nothing about
training; :func:`forward` and :func:`backward` walk the layer list and call
into :mod:`adensemble.tensor`.

IR-BRAINNET's filter sequence (64, 128, 128, 256, 256, 256) is derived, not
quoted: it is the only non-decreasing sequence that gives a 73,856-parameter
second convolution, a 2x2x256 final map and 1,801,464 parameters overall.
Modified-DEMNET's per-block layer list is likewise a reconstruction that
reproduces the 16 -> 256 filter progression and 1,821,192 parameters.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import tensor as T
from .archive import WeightArchive
from .errors import ConfigError, NotFoundError, ShapeError, TransferError

CLASS_NAMES = ("MID", "MOD", "ND", "VMD")
INPUT_SHAPE = (176, 176, 3)

IR_FILTERS = (64, 128, 128, 256, 256, 256)
DEMNET_STEM = (16, 16)
DEMNET_BLOCKS = ((32, "max"), (64, "max"), (128, "max"), (256, "avg"))

LAYER_KINDS = ("conv3x3", "maxpool2", "avgpool2", "batchnorm", "flatten", "dense", "relu", "softmax")

# Externally reported GFLOPs figures, kept as reference outputs only.
REFERENCE_GFLOPS = {
    "ir-brainnet": 2.8071,
    "modified-demnet": 0.5155,
    "ensemble": 3.3226,
    "ir-brainnet/conv2": 2.2858,
}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    units: int | None = None  # output channels (conv) or output units (dense)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv3x3", "dense") and not self.units:
            raise ConfigError(f"layer {self.name!r} ({self.kind}) needs a unit count")


@dataclass
class ModelGraph:
    layers: list[LayerSpec]
    params: dict[str, np.ndarray] = field(default_factory=dict)
    input_shape: tuple[int, ...] = INPUT_SHAPE
    name: str = ""
    # builder name and kwargs, so a checkpoint can rebuild the same graph
    recipe: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ConfigError("layer names must be unique within a graph")
        if not self.params:
            self.params = _zero_params(self.layers, self.input_shape)

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise NotFoundError(f"graph {self.name!r} has no layer {name!r}")

    def trainable_names(self) -> list[str]:
        return [k for k in self.params if not _is_moving_stat(k)]

    def copy(self) -> "ModelGraph":
        return ModelGraph(list(self.layers), {k: v.copy() for k, v in self.params.items()},
                          self.input_shape, self.name, copy.deepcopy(self.recipe))


def _is_moving_stat(key: str) -> bool:
    return key.endswith("/moving_mean") or key.endswith("/moving_var")


# --------------------------------------------------------------------------
# shapes and parameter layout


def _out_shape(layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    k = layer.kind
    if k == "conv3x3":
        if len(shape) != 3:
            raise ShapeError(f"{layer.name}: conv needs an HxWxC input, got {shape}")
        return (shape[0], shape[1], layer.units)
    if k in ("maxpool2", "avgpool2"):
        if len(shape) != 3 or shape[0] < 2 or shape[1] < 2:
            raise ShapeError(f"{layer.name}: cannot pool a {shape} map")
        return (shape[0] // 2, shape[1] // 2, shape[2])
    if k == "flatten":
        return (int(np.prod(shape)),)
    if k == "dense":
        if len(shape) != 1:
            raise ShapeError(f"{layer.name}: dense needs a flat input, got {shape}")
        return (layer.units,)
    if k == "softmax" and (len(shape) != 1 or shape[0] < 2):
        raise ShapeError(f"{layer.name}: softmax needs a flat input of >= 2 scores")
    return shape


def layer_shapes(g: ModelGraph) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    """``(input_shape, output_shape)`` per layer, excluding the batch axis."""
    out = []
    shape = tuple(g.input_shape)
    for layer in g.layers:
        nxt = _out_shape(layer, shape)
        out.append((shape, nxt))
        shape = nxt
    return out


def _param_shapes(layer: LayerSpec, in_shape) -> dict[str, tuple[int, ...]]:
    n = layer.name
    if layer.kind == "conv3x3":
        return {f"{n}/w": (3, 3, in_shape[-1], layer.units), f"{n}/b": (layer.units,)}
    if layer.kind == "dense":
        return {f"{n}/w": (in_shape[0], layer.units), f"{n}/b": (layer.units,)}
    if layer.kind == "batchnorm":
        c = (in_shape[-1],)
        return {f"{n}/gamma": c, f"{n}/beta": c, f"{n}/moving_mean": c, f"{n}/moving_var": c}
    return {}


def _zero_params(layers, input_shape) -> dict[str, np.ndarray]:
    params = {}
    shape = tuple(input_shape)
    for layer in layers:
        for key, s in _param_shapes(layer, shape).items():
            fill = 1.0 if key.endswith(("/gamma", "/moving_var")) else 0.0
            params[key] = np.full(s, fill, dtype=np.float32)
        shape = _out_shape(layer, shape)
    return params


# --------------------------------------------------------------------------
# builders


def build_ir_brainnet(input_size: int = 176, filters=IR_FILTERS, dense_units: int = 100,
                      num_classes: int = len(CLASS_NAMES)) -> ModelGraph:
    """Six conv3x3+ReLU+maxpool blocks, then flatten, dense+ReLU, dense+softmax."""
    layers = []
    for i, f in enumerate(filters, 1):
        layers += [LayerSpec("conv3x3", f"conv{i}", f), LayerSpec("relu", f"relu{i}"),
                   LayerSpec("maxpool2", f"pool{i}")]
    layers += [LayerSpec("flatten", "flatten"),
               LayerSpec("dense", "dense1", dense_units), LayerSpec("relu", "relu_dense1"),
               LayerSpec("dense", "dense2", num_classes), LayerSpec("softmax", "softmax")]
    recipe = {"builder": "ir-brainnet", "input_size": input_size, "filters": list(filters),
              "dense_units": dense_units, "num_classes": num_classes}
    g = ModelGraph(layers, input_shape=(input_size, input_size, 3), name="IR-BRAINNET", recipe=recipe)
    layer_shapes(g)
    return g


def build_modified_demnet(input_size: int = 176, stem=DEMNET_STEM, blocks=DEMNET_BLOCKS,
                          dense_units: int = 100, num_classes: int = len(CLASS_NAMES)) -> ModelGraph:
    """DEMNET's conv stem and four conv-conv-BN-pool blocks with a slim head.

    The stem pool and the last block's pool are average pools; the rest are
    max pools. DEMNET's dropout layers and wide dense head are dropped.
    """
    layers = []
    i = 0
    for f in stem:
        i += 1
        layers += [LayerSpec("conv3x3", f"conv{i}", f), LayerSpec("relu", f"relu{i}")]
    layers.append(LayerSpec("avgpool2", "pool0"))
    for b, (f, pool) in enumerate(blocks, 1):
        for _ in range(2):
            i += 1
            layers += [LayerSpec("conv3x3", f"conv{i}", f), LayerSpec("relu", f"relu{i}")]
        layers += [LayerSpec("batchnorm", f"bn{b}"),
                   LayerSpec("avgpool2" if pool == "avg" else "maxpool2", f"pool{b}")]
    layers += [LayerSpec("flatten", "flatten"),
               LayerSpec("dense", "dense1", dense_units), LayerSpec("relu", "relu_dense1"),
               LayerSpec("dense", "dense2", num_classes), LayerSpec("softmax", "softmax")]
    recipe = {"builder": "modified-demnet", "input_size": input_size, "stem": list(stem),
              "blocks": [list(b) for b in blocks], "dense_units": dense_units,
              "num_classes": num_classes}
    g = ModelGraph(layers, input_shape=(input_size, input_size, 3), name="Modified-DEMNET",
                   recipe=recipe)
    layer_shapes(g)
    return g


# Scaled-down variants for the 32x32 synthetic fixture. Same layer kinds,
# one fewer IR block so the map does not pool below 1x1.
TOY_INPUT = 32


def build_toy_ir_brainnet() -> ModelGraph:
    return build_ir_brainnet(TOY_INPUT, filters=(8, 16, 16, 32, 32), dense_units=32)


def build_toy_modified_demnet() -> ModelGraph:
    return build_modified_demnet(TOY_INPUT, stem=(8, 8),
                                 blocks=((16, "max"), (16, "max"), (32, "max"), (32, "avg")),
                                 dense_units=32)


MODEL_NAMES = ("ir-brainnet", "modified-demnet")


def build_model(name: str, toy: bool = False) -> ModelGraph:
    builders = {
        ("ir-brainnet", False): build_ir_brainnet,
        ("modified-demnet", False): build_modified_demnet,
        ("ir-brainnet", True): build_toy_ir_brainnet,
        ("modified-demnet", True): build_toy_modified_demnet,
    }
    try:
        return builders[(name, bool(toy))]()
    except KeyError:
        raise ConfigError(f"unknown model {name!r}; choose from {', '.join(MODEL_NAMES)}") from None


def build_from_recipe(recipe: dict) -> ModelGraph:
    kwargs = dict(recipe)
    builder = kwargs.pop("builder", None)
    if builder == "ir-brainnet":
        kwargs["filters"] = tuple(kwargs.get("filters", IR_FILTERS))
        return build_ir_brainnet(**kwargs)
    if builder == "modified-demnet":
        kwargs["stem"] = tuple(kwargs.get("stem", DEMNET_STEM))
        kwargs["blocks"] = tuple(tuple(b) for b in kwargs.get("blocks", DEMNET_BLOCKS))
        return build_modified_demnet(**kwargs)
    raise ConfigError(f"unknown graph recipe {recipe!r}")


# --------------------------------------------------------------------------
# cost accounting


def layer_param_count(g: ModelGraph, name: str) -> int:
    layer = g.layer(name)
    return sum(g.params[k].size for k in g.params if k.startswith(layer.name + "/"))


def param_count(g: ModelGraph) -> tuple[int, int]:
    """``(total, trainable)``; batchnorm moving statistics are non-trainable."""
    total = sum(int(v.size) for v in g.params.values())
    frozen = sum(int(v.size) for k, v in g.params.items() if _is_moving_stat(k))
    return total, total - frozen


def memory_bytes(g: ModelGraph) -> int:
    return 4 * param_count(g)[0]


FLOP_CONVENTIONS = ("default", "literal", "mac")


def _layer_flops(layer: LayerSpec, ins, outs, convention: str) -> int:
    k = layer.kind
    n_in = int(np.prod(ins))
    n_out = int(np.prod(outs))
    if convention == "default":
        if k == "conv3x3":
            return n_out * (2 * 9 * ins[-1]) + n_out
        if k in ("maxpool2", "avgpool2"):
            return n_out * 4
        if k == "dense":
            return 2 * ins[0] * outs[0]
        if k == "relu":
            return n_out
        if k == "batchnorm":
            return 2 * n_out
        if k == "softmax":
            return 3 * n_out
        return 0
    if convention == "literal":
        # input map size x Cin x Cout x kernel x 2; pools: input size x C x window
        if k == "conv3x3":
            return ins[0] * ins[1] * ins[2] * outs[2] * 9 * 2
        if k in ("maxpool2", "avgpool2"):
            return n_in * 4
        if k == "dense":
            return 2 * ins[0] * outs[0]
        return 0
    if convention == "mac":
        if k == "conv3x3":
            return n_out * 9 * ins[-1]
        if k in ("maxpool2", "avgpool2"):
            return n_in
        if k == "dense":
            return ins[0] * outs[0]
        if k == "batchnorm":
            return 2 * n_out
        return 0
    raise ConfigError(f"unknown FLOPs convention {convention!r}; choose from {FLOP_CONVENTIONS}")


@dataclass
class CostReport:
    model: str
    convention: str
    total_params: int
    trainable_params: int
    flops: int
    memory_bytes: int
    per_layer: list[dict] = field(default_factory=list)

    @property
    def gflops(self) -> float:
        return self.flops / 1e9

    @property
    def memory_mib(self) -> float:
        return self.memory_bytes / 2**20

    def to_dict(self) -> dict:
        return {"model": self.model, "convention": self.convention,
                "total_params": self.total_params, "trainable_params": self.trainable_params,
                "flops": self.flops, "gflops": self.gflops,
                "memory_bytes": self.memory_bytes, "memory_mib": round(self.memory_mib, 4),
                "per_layer": self.per_layer}


def flop_count(g: ModelGraph, convention: str = "default") -> CostReport:
    """Per-image forward cost under ``convention``.

    ``default``: 2 FLOPs per multiply-accumulate, plus bias adds on convs and
    one op per element for ReLU. ``literal``: the reported recipe read at
    face value (input map x Cin x Cout x kernel x 2). ``mac``: one FLOP per
    multiply-accumulate, the profiler-style count.
    """
    if convention not in FLOP_CONVENTIONS:
        raise ConfigError(f"unknown FLOPs convention {convention!r}; choose from {FLOP_CONVENTIONS}")
    per_layer = []
    total = 0
    for layer, (ins, outs) in zip(g.layers, layer_shapes(g)):
        f = _layer_flops(layer, ins, outs, convention)
        total += f
        n_params = sum(int(np.prod(s)) for s in _param_shapes(layer, ins).values())
        per_layer.append({"name": layer.name, "kind": layer.kind, "output_shape": list(outs),
                          "params": n_params, "flops": f})
    tot, trainable = param_count(g)
    return CostReport(g.name, convention, tot, trainable, total, 4 * tot, per_layer)


def ensemble_cost(reports: list[CostReport], num_classes: int = len(CLASS_NAMES)) -> CostReport:
    """Members' costs plus 3 FLOPs per class for the averaging step."""
    avg = 3 * num_classes
    return CostReport(
        "Ensemble", reports[0].convention,
        sum(r.total_params for r in reports), sum(r.trainable_params for r in reports),
        sum(r.flops for r in reports) + avg, sum(r.memory_bytes for r in reports),
        [{"name": "average", "kind": "average", "output_shape": [num_classes],
          "params": 0, "flops": avg}],
    )


# --------------------------------------------------------------------------
# initialization and transfer


def kaiming_init(g: ModelGraph, seed: int) -> ModelGraph:
    """He-normal weights, zero biases, identity batchnorm.

    Draws come from a PCG64 stream seeded with ``seed``, layer by layer in
    graph order, so a given seed always yields the same weights.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    out = g.copy()
    for layer, (ins, _) in zip(g.layers, layer_shapes(g)):
        n = layer.name
        if layer.kind in ("conv3x3", "dense"):
            w = out.params[f"{n}/w"]
            fan_in = 9 * ins[-1] if layer.kind == "conv3x3" else ins[0]
            out.params[f"{n}/w"] = (rng.standard_normal(w.shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
            out.params[f"{n}/b"] = np.zeros_like(out.params[f"{n}/b"])
        elif layer.kind == "batchnorm":
            for key, fill in (("gamma", 1.0), ("beta", 0.0), ("moving_mean", 0.0), ("moving_var", 1.0)):
                out.params[f"{n}/{key}"] = np.full_like(out.params[f"{n}/{key}"], fill)
    return out


def import_pretrained_layer(g: ModelGraph, layer_name: str, archive: WeightArchive,
                            entry_name: str) -> ModelGraph:
    """Copy ``<entry_name>/w`` and ``<entry_name>/b`` into a conv or dense layer.

    The imported tensors stay trainable.
    """
    layer = g.layer(layer_name)
    if layer.kind not in ("conv3x3", "dense"):
        raise TransferError(f"layer {layer_name!r} ({layer.kind}) has no weights to import")
    out = g.copy()
    for part in ("w", "b"):
        key = f"{entry_name}/{part}"
        if key not in archive:
            raise NotFoundError(f"archive has no entry {key!r}")
        src = archive[key]
        dst = out.params[f"{layer_name}/{part}"]
        if src.shape != dst.shape:
            raise TransferError(
                f"cannot import {key!r} into {layer_name}/{part}: "
                f"archive shape {src.shape} vs layer shape {dst.shape}")
        out.params[f"{layer_name}/{part}"] = np.array(src, dtype=np.float32)
    return out


# --------------------------------------------------------------------------
# forward / backward


def forward(g: ModelGraph, x, mode: str = "infer"):
    """Run the graph on a batch ``x`` of shape (N, H, W, 3).

    Infer mode returns class probabilities. Train mode returns
    ``(probs, caches)`` and updates batchnorm moving statistics in ``g``.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    x = T.as_float(x)
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(g.input_shape):
        raise ShapeError(f"{g.name}: expected input (N, {', '.join(map(str, g.input_shape))}), "
                         f"got {x.shape}")
    p = g.params
    caches = []
    for layer in g.layers:
        n, k = layer.name, layer.kind
        if k == "conv3x3":
            x, c = T.conv2d(x, p[f"{n}/w"], p[f"{n}/b"])
        elif k == "maxpool2":
            x, c = T.pool2d(x, "max")
        elif k == "avgpool2":
            x, c = T.pool2d(x, "avg")
        elif k == "batchnorm":
            x, c, (mm, mv) = T.batchnorm(x, p[f"{n}/gamma"], p[f"{n}/beta"],
                                         p[f"{n}/moving_mean"], p[f"{n}/moving_var"], mode)
            if mode == "train":
                p[f"{n}/moving_mean"], p[f"{n}/moving_var"] = mm, mv
        elif k == "flatten":
            x, c = T.flatten(x)
        elif k == "dense":
            x, c = T.dense(x, p[f"{n}/w"], p[f"{n}/b"])
        elif k == "relu":
            x, c = T.relu(x)
        elif k == "softmax":
            x, c = T.softmax(x), None
        caches.append(c)
    if mode == "train":
        return x, caches
    return x


def backward(g: ModelGraph, caches, dscores) -> dict[str, np.ndarray]:
    """Gradients of every trainable tensor given d(loss)/d(logits).

    The trailing softmax is skipped: ``dscores`` already comes from the fused
    softmax/cross-entropy gradient.
    """
    grads = {}
    dx = dscores
    for layer, c in zip(reversed(g.layers), reversed(caches)):
        n, k = layer.name, layer.kind
        if k == "softmax":
            continue
        if k == "conv3x3":
            dx, grads[f"{n}/w"], grads[f"{n}/b"] = T.conv2d_backward(c, dx)
        elif k in ("maxpool2", "avgpool2"):
            dx = T.pool2d_backward(c, dx)
        elif k == "batchnorm":
            dx, grads[f"{n}/gamma"], grads[f"{n}/beta"] = T.batchnorm_backward(c, dx)
        elif k == "flatten":
            dx = T.unflatten(c, dx)
        elif k == "dense":
            dx, grads[f"{n}/w"], grads[f"{n}/b"] = T.dense_backward(c, dx)
        elif k == "relu":
            dx = T.relu_backward(c, dx)
    return grads


def predict(g: ModelGraph, x, batch_size: int = 32) -> np.ndarray:
    """Infer-mode probabilities, evaluated in batches."""
    x = np.asarray(x)
    outs = [forward(g, x[i:i + batch_size], "infer") for i in range(0, len(x), batch_size)]
    if not outs:
        return np.zeros((0, layer_shapes(g)[-1][1][0]), dtype=np.float32)
    return np.concatenate(outs, axis=0)
