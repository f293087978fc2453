"""Lambda sweeps: one trained model per (lambda, seed) grid cell."""

from __future__ import annotations

from dataclasses import dataclass, replace

from ..costmodel import CostReport, ParetoPoint, cost_report
from ..errors import ShiftNNError
from ..nn.network import NetworkConfig, build_network
from .loop import (
    TrainSettings,
    evaluate,
    init_train_state,
    k_statistics,
    quantize_weights,
    train_model,
)


@dataclass
class SweepCell:
    lambdas: tuple
    seed: int
    accuracy: float | None
    mean_k: float | None
    cost: CostReport | None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def run_cell(net_config: NetworkConfig, settings: TrainSettings, data) -> SweepCell:
    """Train one model and report quantized accuracy plus its cost."""
    train_x, train_y, test_x, test_y = data
    try:
        net, params, bn_state = build_network(net_config, settings.seed)
        ts = init_train_state(net, params, bn_state, settings)
        train_model(ts, train_x, train_y)
        qparams, qinfo = quantize_weights(net, ts.params, ts.thresholds, settings)
        acc = evaluate(net, qparams, ts.bn_state, test_x, test_y, settings.batch_size)
        mean_k, _ = k_statistics(qinfo, settings.max_k)
        qlayers = {name: qinfo[name][0] for name in net.weight_names}
        cost = cost_report(net, qlayers)
        return SweepCell(tuple(settings.lambdas), settings.seed, acc, mean_k, cost)
    except (ShiftNNError, FloatingPointError) as exc:
        return SweepCell(tuple(settings.lambdas), settings.seed, None, None, None, str(exc))


def sweep_lambda(net_config, base: TrainSettings, data, lambda_list, seeds):
    """Grid of training runs; failures are recorded per cell, not raised."""
    if not lambda_list:
        raise ValueError("sweep needs at least one lambda setting")
    cells = []
    for lambdas in lambda_list:
        for seed in seeds:
            settings = replace(base, lambdas=tuple(lambdas), seed=int(seed)).validate()
            cells.append(run_cell(net_config, settings, data))
    return cells


def cell_to_point(cell: SweepCell, model_id: str) -> ParetoPoint:
    if not cell.ok:
        raise ValueError(f"cell failed: {cell.error}")
    lam = list(cell.lambdas) + [0.0, 0.0]
    return ParetoPoint(
        model_id=model_id,
        lambda0=float(lam[0]),
        lambda1=float(lam[1]),
        seed=cell.seed,
        accuracy=cell.accuracy,
        storage_bits=cell.cost.storage_bits,
        shifts=cell.cost.shift_count,
        adds=cell.cost.add_count,
        multiplies=cell.cost.multiply_count,
        mean_k=cell.mean_k,
    )
