"""
Spectrum compression and cost accounting
Plans which DCT frequencies each layer keeps (uniform, progressive or
adaptive), applies a plan to coefficient sets, and counts parameters and
multiply-adds for conventional, two-stage and merged layers.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Union

import numpy as np
import pandas as pd

from dct_basis import SpectrumSelection, select_spectrum
from errors import ConfigError, PlanMismatchError, SelectionError
from model_spec import LayerSpec, ModelSpec, layer_selection

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Uniform:
    lam: int
    exempt_first: bool = True
    first_lambda: Optional[int] = None

    def __post_init__(self):
        if self.lam < 1:
            raise SelectionError(f"lambda must be >= 1, got {self.lam}")


@dataclass(frozen=True)
class Progressive:
    """lambda = max(alpha, min(2K - 1, floor(T / depth))), overridable per output resolution"""
    alpha: int = 2
    T: float = 30.0
    overrides: Dict[str, int] = field(default_factory=dict)
    exempt_first: bool = True
    first_lambda: Optional[int] = None

    def __post_init__(self):
        if self.alpha not in (1, 2):
            raise SelectionError(f"alpha must be 1 or 2, got {self.alpha}")
        if self.T <= 0:
            raise SelectionError(f"T must be positive, got {self.T}")


@dataclass(frozen=True)
class Adaptive:
    """Drop a frequency when its share of the layer's L1 weight mass falls below T"""
    T: float
    exempt_first: bool = True
    first_lambda: Optional[int] = None

    def __post_init__(self):
        if not 0.0 < self.T < 1.0:
            raise SelectionError(f"adaptive threshold must be in (0, 1), got {self.T}")


CompressionStrategy = Union[Uniform, Progressive, Adaptive]
STRATEGIES = ('none', 'uniform', 'progressive', 'adaptive')


def parse_strategy(name: str, lam: Optional[int] = None, alpha: int = 2, t: Optional[float] = None,
                   overrides: Optional[Mapping[str, int]] = None, first_lambda: Optional[int] = None,
                   exempt_first: bool = True) -> Optional[CompressionStrategy]:
    """Build a strategy from CLI-style arguments; 'none' yields no strategy"""
    name = (name or 'none').lower()
    if name == 'none':
        return None
    if name == 'uniform':
        if lam is None:
            raise ConfigError("uniform strategy needs --lambda")
        return Uniform(lam, exempt_first, first_lambda)
    if name == 'progressive':
        return Progressive(alpha, 30.0 if t is None else t, dict(overrides or {}), exempt_first, first_lambda)
    if name == 'adaptive':
        if t is None:
            raise ConfigError("adaptive strategy needs --t")
        return Adaptive(t, exempt_first, first_lambda)
    raise ConfigError(f"unknown strategy '{name}' (expected one of {', '.join(STRATEGIES)})")


@dataclass
class CompressionPlan:
    model_name: str
    strategy: str
    selections: Dict[str, SpectrumSelection]

    def __contains__(self, name: str) -> bool:
        return name in self.selections

    def to_dict(self) -> dict:
        return {
            'model': self.model_name,
            'strategy': self.strategy,
            'layers': {name: sel.to_dict() for name, sel in self.selections.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'CompressionPlan':
        return cls(data['model'], data['strategy'],
                   {name: SpectrumSelection.from_dict(sel) for name, sel in data['layers'].items()})


def frequency_shares(weights: np.ndarray) -> np.ndarray:
    """Per-frequency share of the L1 mass of an M x N x P coefficient tensor"""
    l1 = np.abs(np.asarray(weights, dtype=np.float64)).sum(axis=(0, 1))
    total = l1.sum()
    if total == 0:
        return np.full(l1.shape, 1.0 / l1.size)
    return l1 / total


def _clamped_lambda(layer: LayerSpec, lam: int) -> int:
    top = 2 * layer.kernel - 1
    if lam > top:
        logger.warning(f"lambda={lam} clamped to {top} for {layer.kernel}x{layer.kernel} layer '{layer.name}'")
        return top
    if lam < 1:
        raise SelectionError(f"lambda must be >= 1 for layer '{layer.name}', got {lam}")
    return lam


def _adaptive_selection(layer: LayerSpec, current: SpectrumSelection, weights: np.ndarray,
                        T: float) -> SpectrumSelection:
    if weights.ndim != 3 or weights.shape[2] != current.count:
        raise PlanMismatchError(
            f"layer '{layer.name}': coefficients carry {weights.shape[-1]} frequencies, "
            f"layer keeps {current.count}"
        )
    shares = frequency_shares(weights)
    kept = [ij for ij, share in zip(current.indices, shares) if share >= T]
    if not kept:
        best = current.indices[int(np.argmax(shares))]
        logger.warning(f"adaptive T={T} would empty layer '{layer.name}', keeping {best}")
        kept = [best]
    return SpectrumSelection.from_indices(current.K, kept)


def plan(model: ModelSpec, strategy: CompressionStrategy,
         weights: Optional[Mapping[str, np.ndarray]] = None) -> CompressionPlan:
    """
    Per-layer frequency selections for every spatial (K > 1) conv / harm layer.

    Selections never add frequencies a layer does not already keep. The first
    spatial layer keeps its spectrum unless the strategy disables the
    exemption or names an explicit first-layer lambda.

    Args:
        model: layer descriptors
        strategy: Uniform, Progressive or Adaptive
        weights: layer name -> M x N x P coefficients (Adaptive only)
    """
    layers = model.spatial_layers()
    if isinstance(strategy, Adaptive) and weights is None:
        raise ConfigError("adaptive compression needs trained weights")
    if isinstance(strategy, Progressive):
        resolutions = {layer.resolution_key for layer in layers}
        missing = sorted(set(strategy.overrides) - resolutions)
        if missing:
            raise PlanMismatchError(
                f"override resolutions not in '{model.name}': {', '.join(missing)} "
                f"(available: {', '.join(sorted(resolutions))})"
            )

    selections: Dict[str, SpectrumSelection] = {}
    for position, layer in enumerate(layers):
        current = layer_selection(layer)
        K = layer.kernel
        if position == 0 and strategy.first_lambda is not None:
            target = select_spectrum(K, _clamped_lambda(layer, strategy.first_lambda))
        elif position == 0 and strategy.exempt_first:
            selections[layer.name] = current
            continue
        elif isinstance(strategy, Uniform):
            target = select_spectrum(K, _clamped_lambda(layer, strategy.lam))
        elif isinstance(strategy, Progressive):
            if layer.resolution_key in strategy.overrides:
                lam = _clamped_lambda(layer, strategy.overrides[layer.resolution_key])
            else:
                lam = max(strategy.alpha, min(2 * K - 1, math.floor(strategy.T / layer.depth)))
            target = select_spectrum(K, lam)
        elif isinstance(strategy, Adaptive):
            if layer.name not in weights:
                raise PlanMismatchError(f"no trained weights for layer '{layer.name}'")
            selections[layer.name] = _adaptive_selection(layer, current, weights[layer.name], strategy.T)
            continue
        else:
            raise ConfigError(f"unsupported strategy {strategy!r}")
        selections[layer.name] = current.intersect(target)
        logger.debug(f"{layer.name}: K={K} keeps {selections[layer.name].count} frequencies")

    logger.info(f"Planned {type(strategy).__name__.lower()} compression for '{model.name}' ({len(selections)} layers)")
    return CompressionPlan(model.name, type(strategy).__name__.lower(), selections)


@dataclass
class LayerCoefficients:
    """M x N x P combination weights and the frequencies they belong to"""
    weights: np.ndarray
    selection: SpectrumSelection

    def __post_init__(self):
        if self.weights.ndim != 3 or self.weights.shape[2] != self.selection.count:
            raise PlanMismatchError(
                f"coefficients with shape {self.weights.shape} do not match "
                f"{self.selection.count} selected frequencies"
            )


@dataclass
class CompressionReport:
    retained: Dict[str, int] = field(default_factory=dict)
    dropped: Dict[str, int] = field(default_factory=dict)
    errors: Dict[str, float] = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'layer': list(self.errors),
            'retained': [self.retained[name] for name in self.errors],
            'dropped': [self.dropped[name] for name in self.errors],
            'error': [self.errors[name] for name in self.errors],
        })


def apply_plan(params: Mapping[str, LayerCoefficients],
               compression: CompressionPlan) -> tuple:
    """
    Keep the planned coefficients of every layer.

    Returns:
        (compressed params, CompressionReport) where each layer's error is the
        root-sum-square of its dropped coefficients
    """
    unknown = [name for name in compression.selections if name not in params]
    if unknown:
        raise PlanMismatchError(f"plan names layers without coefficients: {', '.join(unknown)}")

    compressed: Dict[str, LayerCoefficients] = {}
    report = CompressionReport()
    for name, coeffs in params.items():
        target = compression.selections.get(name)
        if target is None:
            compressed[name] = coeffs
            continue
        if not target.issubset(coeffs.selection):
            raise PlanMismatchError(f"layer '{name}': plan keeps frequencies the coefficients do not carry")
        keep = [coeffs.selection.position(u, v) for u, v in target.indices]
        drop = [p for p in range(coeffs.selection.count) if p not in set(keep)]
        compressed[name] = LayerCoefficients(coeffs.weights[:, :, keep].copy(), target)
        dropped = coeffs.weights[:, :, drop].astype(np.float64)
        report.retained[name] = len(keep)
        report.dropped[name] = len(drop)
        report.errors[name] = float(np.sqrt(np.sum(dropped * dropped)))
    return compressed, report


# Accounting

@dataclass
class LayerCost:
    name: str
    kind: str
    N: int
    M: int
    K: int
    P: int
    A: int
    B: int
    params_conv: int
    params_harm: int
    macs_conv: int
    macs_twostage: int
    macs_merged: int

    @property
    def twostage_overhead(self) -> float:
        """Relative extra work of the two-stage block over the plain convolution"""
        return self.macs_twostage / self.macs_conv - 1.0 if self.macs_conv else 0.0


@dataclass
class CostReport:
    model_name: str
    layers: List[LayerCost]

    @property
    def params_conv(self) -> int:
        return sum(layer.params_conv for layer in self.layers)

    @property
    def params_harm(self) -> int:
        return sum(layer.params_harm for layer in self.layers)

    @property
    def macs_conv(self) -> int:
        return sum(layer.macs_conv for layer in self.layers)

    @property
    def macs_twostage(self) -> int:
        return sum(layer.macs_twostage for layer in self.layers)

    @property
    def macs_merged(self) -> int:
        return sum(layer.macs_merged for layer in self.layers)

    def layer(self, name: str) -> LayerCost:
        for cost in self.layers:
            if cost.name == name:
                return cost
        raise KeyError(name)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(cost) for cost in self.layers])

    def to_dict(self) -> dict:
        return {
            'model': self.model_name,
            'layers': [vars(cost) for cost in self.layers],
            'params_conv': self.params_conv,
            'params_harm': self.params_harm,
            'macs_conv': self.macs_conv,
            'macs_twostage': self.macs_twostage,
            'macs_merged': self.macs_merged,
        }


def layer_cost(layer: LayerSpec, selection: Optional[SpectrumSelection]) -> LayerCost:
    N, M, K = layer.in_channels, layer.out_channels, layer.kernel
    A, B = layer.out_res
    bias = M if layer.bias else 0
    params_conv = N * M * K * K + bias
    macs_conv = N * M * K * K * A * B
    if not layer.is_spatial:
        # 1x1 layers pass through unchanged
        return LayerCost(layer.name, layer.kind, N, M, K, 1, A, B, params_conv, params_conv,
                         macs_conv, macs_conv, macs_conv)
    P = selection.count
    params_harm = N * P * M + bias
    if layer.kind == 'harm' and layer.spectrum_bn:
        params_harm += 2 * N * P
    return LayerCost(
        layer.name, layer.kind, N, M, K, P, A, B,
        params_conv=params_conv,
        params_harm=params_harm,
        macs_conv=macs_conv,
        macs_twostage=N * P * A * B * K * K + N * P * M * A * B,
        macs_merged=N * M * K * K * A * B + N * M * P * K * K,
    )


def account(model: ModelSpec, compression: Optional[CompressionPlan] = None) -> CostReport:
    """Parameter and multiply-add counts per layer; BN and biases count as parameters only"""
    costs: List[LayerCost] = []
    for layer in model.flat_layers():
        if layer.kind in ('conv', 'harm'):
            selection = None
            if layer.is_spatial:
                if compression is not None and layer.name in compression:
                    selection = compression.selections[layer.name]
                else:
                    selection = layer_selection(layer)
            costs.append(layer_cost(layer, selection))
        elif layer.kind == 'fc':
            n, m = layer.in_channels, layer.out_channels
            params = n * m + (m if layer.bias else 0)
            costs.append(LayerCost(layer.name, 'fc', n, m, 1, 1, 1, 1, params, params, n * m, n * m, n * m))
        elif layer.kind == 'bn':
            c = layer.in_channels
            A, B = layer.out_res
            costs.append(LayerCost(layer.name, 'bn', c, c, 1, 1, A, B, 2 * c, 2 * c, 0, 0, 0))
    report = CostReport(model.name, costs)
    logger.debug(f"Accounted '{model.name}': {report.params_harm} harmonic params")
    return report
