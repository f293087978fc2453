"""Storage and operation-count accounting plus Pareto utilities.

Storage counts quantized weight payload bits exactly as packed (term
codes, per-filter k_i headers, byte padding), or raw bits-per-weight for
unquantized baselines; biases and batch-norm parameters are excluded
throughout.  Operation counts cover the multiply replacements (shifts
plus extra adds) and the accumulation adds of conv/dense layers; pooling
and activations are not counted.  Multiplies map to the DSP proxy and
shifts to the LUT proxy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .nn.layers import Conv2D, Dense
from .nn.network import Network
from . import packing


@dataclass
class LayerCost:
    name: str
    positions: int  # output positions per image
    volume: int  # weights per filter
    filters: int
    shifts: int
    adds: int
    multiplies: int


@dataclass
class CostReport:
    storage_bits: int
    shift_count: int
    add_count: int
    multiply_count: int
    dsp_proxy: int
    lut_proxy: int
    per_layer: list = field(default_factory=list)

    def to_dict(self):
        return {
            "storage_bits": self.storage_bits,
            "shift_count": self.shift_count,
            "add_count": self.add_count,
            "multiply_count": self.multiply_count,
            "dsp_proxy": self.dsp_proxy,
            "lut_proxy": self.lut_proxy,
            "per_layer": [vars(c) for c in self.per_layer],
        }


def quantizable_param_count(net: Network) -> int:
    shapes = net.param_shapes()
    return sum(int(np.prod(shapes[name])) for name in net.weight_names)


def full_precision_storage_bits(net: Network, bits_per_weight: int = 32) -> int:
    """Weight-only storage of an unquantized model."""
    return quantizable_param_count(net) * bits_per_weight


def quantized_storage_bits(qlayers: list) -> int:
    return packing.storage_bits(qlayers)


def _layer_geometry(net: Network):
    """(layer, positions, volume, filters, has_bias) per weight tensor, in order."""
    out = {}
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Conv2D):
            _, H, W = net.node_shapes[i]
            out[layer.weight_name] = (
                H * W,
                layer.in_channels * layer.kernel * layer.kernel,
                layer.out_channels,
                layer.bias,
            )
        elif isinstance(layer, Dense):
            out[layer.weight_name] = (1, layer.in_features, layer.out_features, layer.bias)
    for dst, proj in net.projections.items():
        if proj is not None:
            _, H, W = net.node_shapes[dst]
            out[proj.weight_name] = (H * W, proj.in_channels, proj.out_channels, proj.bias)
    return out


def op_counts(net: Network, k_map=None, multiply_baseline=False) -> CostReport:
    """Per-inference operation counts for one input image.

    k_map maps each weight name to a per-filter k_i vector (or a scalar
    applied to every filter).  With multiply_baseline=True the model is
    costed as a multiplier design (full-precision or fixed-point): one
    multiply per MAC and no shifts.  Pruned filters (k_i = 0) drop both
    their shifts and their accumulation adds.  Shortcut adds count one
    add per element of the destination map.
    """
    geom = _layer_geometry(net)
    per_layer = []
    shifts = adds = mults = 0
    for name in net.weight_names:
        P, V, F, has_bias = geom[name]
        if multiply_baseline:
            l_shift = 0
            l_mult = P * V * F
            l_add = P * F * (V - 1 + (1 if has_bias else 0))
        else:
            if k_map is None:
                raise ConfigError("op_counts needs k_map unless multiply_baseline is set")
            k_i = k_map[name]
            k_i = np.full(F, int(k_i), dtype=np.int64) if np.isscalar(k_i) else np.asarray(
                k_i, dtype=np.int64
            )
            if k_i.shape != (F,):
                raise ConfigError(f"{name}: k map has shape {k_i.shape}, expected ({F},)")
            live = k_i > 0
            l_shift = int(P * V * k_i.sum())
            extra = int(P * V * np.maximum(k_i - 1, 0).sum())
            acc = int(P * (V - 1 + (1 if has_bias else 0)) * live.sum())
            l_mult = 0
            l_add = extra + acc
        per_layer.append(LayerCost(name, P, V, F, l_shift, l_add, l_mult))
        shifts += l_shift
        adds += l_add
        mults += l_mult
    # one add per destination element of each shortcut
    for dst in net.projections:
        C, H, W = net.node_shapes[dst]
        adds += C * H * W
    return CostReport(
        storage_bits=0,
        shift_count=shifts,
        add_count=adds,
        multiply_count=mults,
        dsp_proxy=mults,
        lut_proxy=shifts,
        per_layer=per_layer,
    )


def cost_report(net: Network, qlayers_by_name: dict | None = None, bits_per_weight=32):
    """Full report: quantized if qlayers are given, multiplier baseline otherwise."""
    if qlayers_by_name is None:
        report = op_counts(net, multiply_baseline=True)
        report.storage_bits = full_precision_storage_bits(net, bits_per_weight)
        return report
    k_map = {name: q.k_i for name, q in qlayers_by_name.items()}
    report = op_counts(net, k_map=k_map)
    report.storage_bits = quantized_storage_bits(
        [qlayers_by_name[name] for name in net.weight_names]
    )
    return report


@dataclass
class ParetoPoint:
    model_id: str
    lambda0: float
    lambda1: float
    seed: int
    accuracy: float
    storage_bits: int
    shifts: int
    adds: int
    multiplies: int
    mean_k: float

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ConfigError(f"accuracy must be in [0, 1], got {self.accuracy}")

    def csv_row(self) -> str:
        return ",".join(
            [
                self.model_id,
                repr(self.lambda0),
                repr(self.lambda1),
                str(self.seed),
                repr(self.accuracy),
                str(self.storage_bits),
                str(self.shifts),
                str(self.adds),
                str(self.multiplies),
                repr(self.mean_k),
            ]
        )


PARETO_CSV_HEADER = (
    "model_id,lambda0,lambda1,seed,accuracy,storage_bits,shifts,adds,multiplies,mean_k"
)


def write_pareto_csv(path, points):
    with open(path, "w") as fh:
        fh.write(PARETO_CSV_HEADER + "\n")
        for p in points:
            fh.write(p.csv_row() + "\n")


def pareto_front(points, cost_attr="storage_bits"):
    """Points not dominated in (accuracy up, cost down), ordered by cost.

    A point survives unless another point is at least as accurate and at
    least as cheap with one of the two strict; exact duplicates of a
    surviving point survive with it.
    """
    if not points:
        raise ConfigError("pareto_front needs at least one point")
    order = sorted(range(len(points)), key=lambda i: (getattr(points[i], cost_attr), -points[i].accuracy))
    kept = []
    best_acc = -np.inf
    best_cost = None
    for i in order:
        p = points[i]
        cost = getattr(p, cost_attr)
        if p.accuracy > best_acc:
            kept.append(p)
            best_acc = p.accuracy
            best_cost = cost
        elif p.accuracy == best_acc and cost == best_cost:
            kept.append(p)
    return kept
