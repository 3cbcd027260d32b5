"""Layers, tiny networks with a feature tap, the channel projection, and
weight persistence.

Weight init is uniform in [-sqrt(6/fan_in), +sqrt(6/fan_in)] with zero
biases, fully determined by (spec, seed).
"""

import json

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError, ShapeError, UsageError

BS_VAR_FLOOR = 1e-5
BS_MOMENTUM = 0.1

WEIGHT_FORMAT_VERSION = 1


# -- layer specs -------------------------------------------------------------

def linear(n_in, n_out):
    return {"kind": "linear", "n_in": int(n_in), "n_out": int(n_out)}


def conv2d(c_in, c_out, k, padding=0):
    return {"kind": "conv2d", "c_in": int(c_in), "c_out": int(c_out),
            "k": int(k), "padding": int(padding)}


def relu():
    return {"kind": "relu"}


def batch_standardize(channels):
    return {"kind": "batch_standardize", "channels": int(channels)}


def dropout(keep):
    return {"kind": "dropout", "keep": float(keep)}


def global_avg_pool():
    return {"kind": "global_avg_pool"}


_KINDS = {"linear", "conv2d", "relu", "batch_standardize", "dropout", "global_avg_pool"}


def _validate_spec(spec):
    for i, ls in enumerate(spec):
        kind = ls.get("kind")
        if kind not in _KINDS:
            raise ConfigError(f"layer {i}: unknown kind {kind!r}")
        if kind == "linear" and (ls["n_in"] < 1 or ls["n_out"] < 1):
            raise ConfigError(f"layer {i}: bad linear dims")
        if kind == "conv2d":
            if ls["k"] not in (1, 3) or ls["c_in"] < 1 or ls["c_out"] < 1:
                raise ConfigError(f"layer {i}: bad conv2d parameters")
        if kind == "dropout" and not (0.0 < ls["keep"] <= 1.0):
            raise ConfigError(f"layer {i}: dropout keep must be in (0, 1]")
        if kind == "batch_standardize" and ls["channels"] < 1:
            raise ConfigError(f"layer {i}: bad channel count")


class Layer:
    def __init__(self, spec):
        self.spec = spec
        self.kind = spec["kind"]
        self.weight = None
        self.bias = None
        self.running_mean = None
        self.running_var = None

    def params(self):
        return [p for p in (self.weight, self.bias) if p is not None]

    def init(self, rng):
        if self.kind == "linear":
            fan_in = self.spec["n_in"]
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(self.spec["n_in"], self.spec["n_out"]))
            self.weight = T.Tensor(w, requires_grad=True)
            self.bias = T.Tensor(np.zeros(self.spec["n_out"]), requires_grad=True)
        elif self.kind == "conv2d":
            k = self.spec["k"]
            fan_in = self.spec["c_in"] * k * k
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound,
                            size=(self.spec["c_out"], self.spec["c_in"], k, k))
            self.weight = T.Tensor(w, requires_grad=True)
            self.bias = T.Tensor(np.zeros(self.spec["c_out"]), requires_grad=True)
        elif self.kind == "batch_standardize":
            c = self.spec["channels"]
            self.running_mean = np.zeros(c)
            self.running_var = np.ones(c)

    def forward(self, x, train, rng):
        kind = self.kind
        if kind == "relu":
            return T.relu(x)
        if kind == "linear":
            if x.data.ndim != 2 or x.shape[1] != self.spec["n_in"]:
                raise ShapeError(f"linear expected (B, {self.spec['n_in']}), got {x.shape}")
            return T.add(T.matmul(x, self.weight), self.bias)
        if kind == "conv2d":
            out = T.conv2d(x, self.weight, padding=self.spec["padding"])
            b = T.reshape(self.bias, (1, self.spec["c_out"], 1, 1))
            return T.add(out, b)
        if kind == "global_avg_pool":
            if x.data.ndim != 4:
                raise ShapeError(f"global_avg_pool expects 4-D input, got {x.shape}")
            return T.reshape(T.reduce_mean(x, axes=(2, 3)), (x.shape[0], x.shape[1]))
        if kind == "dropout":
            keep = self.spec["keep"]
            if not train or keep >= 1.0:
                return x
            mask = (rng.random(x.shape) < keep).astype(np.float64)
            return T.mul(x, T.Tensor(mask))
        if kind == "batch_standardize":
            return self._standardize(x, train)
        raise UsageError(f"unhandled layer kind {kind!r}")

    def _standardize(self, x, train):
        if x.data.ndim != 4:
            raise ShapeError("batch_standardize expects B x C x H x W input")
        if train:
            if x.shape[0] < 2:
                raise UsageError("batch_standardize needs batch size >= 2 in train mode")
            mu = x.data.mean(axis=(0, 2, 3))
            var = x.data.var(axis=(0, 2, 3))
            self.running_mean = (1 - BS_MOMENTUM) * self.running_mean + BS_MOMENTUM * mu
            self.running_var = (1 - BS_MOMENTUM) * self.running_var + BS_MOMENTUM * var
            denom = np.sqrt(np.maximum(var, BS_VAR_FLOOR))
        else:
            mu = self.running_mean
            denom = np.sqrt(self.running_var + BS_VAR_FLOOR)
        mu_t = T.Tensor(mu.reshape(1, -1, 1, 1))
        denom_t = T.Tensor(denom.reshape(1, -1, 1, 1))
        return T.div(T.sub(x, mu_t), denom_t)


class Network:
    """Ordered layers plus the index of the distillation feature tap."""

    def __init__(self, layers, feature_tap_index, dropout_seed=0):
        if not 0 <= feature_tap_index < len(layers):
            raise ConfigError(f"feature_tap_index {feature_tap_index} out of range")
        self.layers = layers
        self.feature_tap_index = feature_tap_index
        self.mode = "train"
        self._dropout_seed = dropout_seed
        self._dropout_rng = np.random.default_rng(dropout_seed)

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def forward(self, x, tap_override=None):
        """Run all layers; returns (output, feature at the tap layer)."""
        tap = self.feature_tap_index if tap_override is None else tap_override
        train = self.mode == "train"
        feature = None
        for i, layer in enumerate(self.layers):
            try:
                x = layer.forward(x, train, self._dropout_rng)
            except ShapeError as e:
                raise ShapeError(f"layer {i} ({layer.kind}): {e}") from None
            if i == tap:
                feature = x
        return x, feature

    def forward_from(self, feature, start_index):
        """Continue the forward pass from a (possibly perturbed) tap feature."""
        x = feature
        train = self.mode == "train"
        for i in range(start_index, len(self.layers)):
            x = self.layers[i].forward(x, train, self._dropout_rng)
        return x


def init_network(spec, feature_tap_index, seed):
    _validate_spec(spec)
    rng = np.random.default_rng(seed)
    layers = [Layer(ls) for ls in spec]
    for layer in layers:
        layer.init(rng)
    return Network(layers, feature_tap_index, dropout_seed=seed)


# -- the toy teacher / student pair ------------------------------------------

def teacher_spec(in_channels=1, width=16, classes=4):
    return [
        conv2d(in_channels, width, 3, padding=1),
        relu(),
        conv2d(width, width, 3, padding=1),
        global_avg_pool(),
        linear(width, classes),
    ]


def student_spec(in_channels=1, width=8, classes=4):
    return teacher_spec(in_channels, width, classes)


TEACHER_TAP_INDEX = 2  # output of the second conv


class Projection:
    """1x1 conv adapter mapping student feature channels onto the teacher's."""

    def __init__(self, c_student, c_teacher, seed):
        rng = np.random.default_rng(seed)
        bound = np.sqrt(6.0 / c_student)
        w = rng.uniform(-bound, bound, size=(c_teacher, c_student, 1, 1))
        self.weight = T.Tensor(w, requires_grad=True)

    def params(self):
        return [self.weight]

    def __call__(self, feat):
        return T.conv2d(feat, self.weight, padding=0)


# -- persistence -------------------------------------------------------------

def save_weights(net, path):
    layers = []
    running = {}
    for i, layer in enumerate(net.layers):
        entry = {"kind": layer.kind}
        if layer.weight is not None:
            entry["shape"] = list(layer.weight.shape)
            entry["values"] = layer.weight.data.reshape(-1).tolist()
            entry["bias"] = layer.bias.data.tolist()
        else:
            entry["shape"] = []
            entry["values"] = []
        layers.append(entry)
        if layer.running_mean is not None:
            running[str(i)] = {"mean": layer.running_mean.tolist(),
                               "var": layer.running_var.tolist()}
    doc = {
        "format_version": WEIGHT_FORMAT_VERSION,
        "layers": layers,
        "feature_tap_index": net.feature_tap_index,
        "running_stats": running,
        "layer_specs": [layer.spec for layer in net.layers],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True)


def load_weights(path):
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("format_version") != WEIGHT_FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {doc.get('format_version')!r}")
    for key in ("layers", "feature_tap_index", "layer_specs"):
        if key not in doc:
            raise FormatError(f"missing key {key!r}")
    specs = doc["layer_specs"]
    _validate_spec(specs)
    if len(doc["layers"]) != len(specs):
        raise FormatError("layer entry count does not match layer_specs")
    net = init_network(specs, doc["feature_tap_index"], seed=0)
    for i, (layer, entry) in enumerate(zip(net.layers, doc["layers"])):
        if entry.get("kind") != layer.kind:
            raise FormatError(f"layer {i}: kind {entry.get('kind')!r} != spec {layer.kind!r}")
        if layer.weight is not None:
            if "values" not in entry or "bias" not in entry:
                raise FormatError(f"layer {i} ({layer.kind}): missing weight values")
            shape = tuple(entry.get("shape", []))
            if shape != layer.weight.shape:
                raise FormatError(
                    f"layer {i} ({layer.kind}): shape {shape} != expected {layer.weight.shape}")
            vals = np.asarray(entry["values"], dtype=np.float64)
            if vals.size != layer.weight.size:
                raise FormatError(f"layer {i} ({layer.kind}): value count mismatch")
            layer.weight.data = vals.reshape(shape)
            layer.bias.data = np.asarray(entry["bias"], dtype=np.float64)
        if layer.running_mean is not None:
            stats = doc.get("running_stats", {}).get(str(i))
            if stats is None:
                raise FormatError(f"layer {i}: missing running_stats entry")
            layer.running_mean = np.asarray(stats["mean"], dtype=np.float64)
            layer.running_var = np.asarray(stats["var"], dtype=np.float64)
    return net
