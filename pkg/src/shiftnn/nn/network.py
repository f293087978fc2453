"""Network graph: an ordered layer chain plus optional shortcut adds."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, NumericError
from .layers import BatchNorm2D, Conv2D, Dense, Flatten, LeakyReLU, MaxPool2D

LAYER_KINDS = {"conv2d", "batchnorm", "leaky-relu", "maxpool", "dense", "flatten"}


@dataclass
class LayerSpec:
    kind: str
    args: dict = field(default_factory=dict)

    def to_dict(self):
        return {"kind": self.kind, **self.args}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        return cls(d.pop("kind"), d)


@dataclass
class SkipSpec:
    """Adds the output of node `src` into the output of layer `dst`.

    A 1x1 projection convolution is inserted automatically when the two
    node shapes differ.
    """

    src: int
    dst: int

    def to_dict(self):
        return {"src": self.src, "dst": self.dst}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["src"]), int(d["dst"]))


@dataclass
class NetworkConfig:
    id: str
    style: str
    input_shape: tuple
    classes: int
    layers: list
    skips: list = field(default_factory=list)

    def to_dict(self):
        return {
            "id": self.id,
            "style": self.style,
            "input_shape": list(self.input_shape),
            "classes": self.classes,
            "layers": [s.to_dict() for s in self.layers],
            "skips": [s.to_dict() for s in self.skips],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            id=d["id"],
            style=d["style"],
            input_shape=tuple(d["input_shape"]),
            classes=int(d["classes"]),
            layers=[LayerSpec.from_dict(s) for s in d["layers"]],
            skips=[SkipSpec.from_dict(s) for s in d.get("skips", [])],
        )


def _build_layer(i, spec: LayerSpec, in_shape):
    name = f"L{i}"
    a = spec.args
    if spec.kind == "conv2d":
        return Conv2D(
            name,
            in_channels=a["in_channels"],
            out_channels=a["out_channels"],
            kernel=a["kernel"],
            stride=a.get("stride", 1),
            pad=a.get("pad", 0),
            bias=a.get("bias", True),
        )
    if spec.kind == "batchnorm":
        return BatchNorm2D(
            name, channels=in_shape[0], momentum=a.get("momentum", 0.1), eps=a.get("eps", 1e-5)
        )
    if spec.kind == "leaky-relu":
        return LeakyReLU(name, slope=a.get("slope", 0.01))
    if spec.kind == "maxpool":
        return MaxPool2D(name, size=a["size"])
    if spec.kind == "flatten":
        return Flatten(name)
    if spec.kind == "dense":
        return Dense(
            name,
            in_features=a.get("in_features", in_shape[0] if len(in_shape) == 1 else None),
            out_features=a["out_features"],
            bias=a.get("bias", True),
        )
    raise ConfigError(f"unknown layer kind {spec.kind!r}")


class Network:
    """Executable network with externally held parameters."""

    def __init__(self, config: NetworkConfig, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.layers = []
        self.projections = {}  # dst layer index -> Conv2D or None (identity skip)
        self._skip_by_dst = {}
        shape = tuple(config.input_shape)
        node_shapes = []  # node i = output of layer i
        for i, spec in enumerate(config.layers):
            if spec.kind not in LAYER_KINDS:
                raise ConfigError(f"unknown layer kind {spec.kind!r}")
            if spec.kind == "dense" and len(shape) != 1:
                raise ConfigError(f"L{i}: dense needs flattened input, got shape {shape}")
            layer = _build_layer(i, spec, shape)
            shape = layer.out_shape(shape)
            self.layers.append(layer)
            node_shapes.append(shape)
        self.node_shapes = node_shapes
        if node_shapes[-1] != (config.classes,):
            raise ConfigError(
                f"network output shape {node_shapes[-1]} does not match {config.classes} classes"
            )
        for j, skip in enumerate(config.skips):
            if not (0 <= skip.src < skip.dst < len(self.layers)):
                raise ConfigError(f"skip {j}: invalid endpoints {skip.src}->{skip.dst}")
            if skip.dst in self._skip_by_dst:
                raise ConfigError(f"skip {j}: layer {skip.dst} already receives a skip")
            s_src, s_dst = node_shapes[skip.src], node_shapes[skip.dst]
            if len(s_src) != 3 or len(s_dst) != 3:
                raise ConfigError(f"skip {j}: endpoints must be feature maps")
            if s_src == s_dst:
                self.projections[skip.dst] = None
            else:
                if s_src[1] % s_dst[1] or s_src[2] % s_dst[2]:
                    raise ConfigError(f"skip {j}: shapes {s_src} -> {s_dst} are incompatible")
                stride = s_src[1] // s_dst[1]
                if s_dst[1] * stride != s_src[1] or s_dst[2] * stride != s_src[2]:
                    raise ConfigError(f"skip {j}: shapes {s_src} -> {s_dst} are incompatible")
                proj = Conv2D(f"S{j}", s_src[0], s_dst[0], kernel=1, stride=stride, bias=False)
                if proj.out_shape(s_src) != s_dst:
                    raise ConfigError(f"skip {j}: projection cannot map {s_src} to {s_dst}")
                self.projections[skip.dst] = proj
            self._skip_by_dst[skip.dst] = skip.src

    # --- parameter management -------------------------------------------------

    def _all_layers(self):
        for layer in self.layers:
            yield layer
        for dst in sorted(self.projections):
            if self.projections[dst] is not None:
                yield self.projections[dst]

    def param_shapes(self):
        shapes = {}
        for layer in self._all_layers():
            shapes.update(layer.param_shapes())
        return shapes

    def init_params(self, seed):
        rng = np.random.default_rng(seed)
        params = {}
        for layer in self._all_layers():
            params.update(layer.init_params(rng, self.dtype))
        return params

    def init_state(self):
        state = {}
        for layer in self.layers:
            if isinstance(layer, BatchNorm2D):
                state.update(layer.init_state(self.dtype))
        return state

    @property
    def weight_names(self):
        """Quantizable weights: conv/dense/projection kernels, in graph order."""
        return [
            layer.weight_name for layer in self._all_layers() if isinstance(layer, (Conv2D, Dense))
        ]

    @property
    def bias_names(self):
        names = []
        for layer in self._all_layers():
            for name in layer.param_shapes():
                if not name.endswith(".W"):
                    names.append(name)
        return names

    def layer_for_weight(self, weight_name):
        for layer in self._all_layers():
            if isinstance(layer, (Conv2D, Dense)) and layer.weight_name == weight_name:
                return layer
        raise KeyError(weight_name)

    def check_params(self, params):
        for name, shape in self.param_shapes().items():
            if name not in params:
                raise ConfigError(f"missing parameter {name}")
            if tuple(params[name].shape) != shape:
                raise ConfigError(
                    f"parameter {name} has shape {params[name].shape}, expected {shape}"
                )

    # --- execution --------------------------------------------------------------

    def forward(self, x, params, state=None, train=False):
        """Run the network; returns (logits, cache) for a later backward."""
        x = np.asarray(x)
        if x.shape[1:] != tuple(self.config.input_shape):
            raise ConfigError(
                f"input shape {x.shape[1:]} does not match network input "
                f"{tuple(self.config.input_shape)}"
            )
        state = state if state is not None else {}
        caches = []
        skip_caches = {}
        nodes = []
        out = x
        for i, layer in enumerate(self.layers):
            out, cache = layer.forward(out, params, state, train)
            caches.append(cache)
            if i in self._skip_by_dst:
                src = self._skip_by_dst[i]
                proj = self.projections[i]
                if proj is None:
                    out = out + nodes[src]
                    skip_caches[i] = None
                else:
                    branch, pcache = proj.forward(nodes[src], params, state, train)
                    out = out + branch
                    skip_caches[i] = pcache
            nodes.append(out)
        logits = nodes[-1]
        if not np.isfinite(logits).all():
            raise NumericError("non-finite network output")
        return logits, {
            "net": self,
            "train": train,
            "caches": caches,
            "skip_caches": skip_caches,
            "batch": x.shape[0],
        }

    def backward(self, cache, dlogits, params):
        """Gradients of every parameter plus the input, from a forward cache."""
        if not isinstance(cache, dict) or cache.get("net") is not self:
            raise ValueError("cache does not belong to this network's forward pass")
        if dlogits.shape[0] != cache["batch"]:
            raise ValueError("logit gradient batch size does not match the cached forward")
        caches = cache["caches"]
        grads = {}
        node_grads = [None] * len(self.layers)
        node_grads[-1] = dlogits
        for i in range(len(self.layers) - 1, -1, -1):
            g = node_grads[i]
            if i in self._skip_by_dst:
                src = self._skip_by_dst[i]
                proj = self.projections[i]
                if proj is None:
                    branch_grad = g
                else:
                    branch_grad, pgrads = proj.backward(g, cache["skip_caches"][i], params)
                    for k, v in pgrads.items():
                        grads[k] = grads.get(k, 0) + v
                if node_grads[src] is None:
                    node_grads[src] = branch_grad.copy()
                else:
                    node_grads[src] = node_grads[src] + branch_grad
            dx, layer_grads = self.layers[i].backward(g, caches[i], params)
            for k, v in layer_grads.items():
                grads[k] = grads.get(k, 0) + v
            if i > 0:
                if node_grads[i - 1] is None:
                    node_grads[i - 1] = dx
                else:
                    node_grads[i - 1] = node_grads[i - 1] + dx
        return dx, grads


def build_network(config: NetworkConfig, seed, dtype=np.float32):
    """Construct a network and deterministically initialize its parameters."""
    net = Network(config, dtype=dtype)
    params = net.init_params(seed)
    state = net.init_state()
    return net, params, state
