"""
Conventional-to-harmonic conversion
Re-expresses K x K convolution filters as DCT coefficients (exactly, or
truncated by a compression plan) and compresses trained harmonic models.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from compression import CompressionPlan, CompressionReport, LayerCoefficients, apply_plan
from dct_basis import DctBasis, SpectrumSelection, make_basis
from errors import PlanMismatchError, SelectionError, ShapeError, UnsupportedLayerError
from model_spec import LayerSpec, ModelSpec, layer_selection
from nn_train import Model

logger = logging.getLogger(__name__)


def project_filter(f: np.ndarray, basis: DctBasis, selection: SpectrumSelection) -> np.ndarray:
    """
    DCT coefficients of the retained frequencies for one K x K filter.

    Orthonormal basis: w_uv = <f, psi_uv>, the least-squares optimum on the
    retained subspace. l1 basis: the same projection rescaled by each filter's
    L1 norm, so that synthesis with the l1 filters reproduces it.
    """
    f = np.asarray(f)
    if f.shape != (basis.size, basis.size):
        raise ShapeError("filter does not match the basis", expected=(basis.size, basis.size), got=f.shape)
    if selection.K != basis.size:
        raise SelectionError(f"selection K={selection.K} does not match basis K={basis.size}")
    return _project(f[None, None], basis, selection)[0, 0]


def _project(filters: np.ndarray, basis: DctBasis, selection: SpectrumSelection) -> np.ndarray:
    """(M, N, K, K) filters -> (M, N, P) coefficients, computed in float64"""
    coeffs = basis.astype(np.float64).project(filters.astype(np.float64))[..., selection.flat_indices()]
    if basis.norm_mode == 'l1':
        coeffs = coeffs * basis.l1_norms[selection.flat_indices()]
    return coeffs


@dataclass
class LayerConversion:
    name: str
    K: int
    retained: int
    max_error: float
    rms_error: float
    total_error: float


@dataclass
class ConversionReport:
    layers: List[LayerConversion] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max((layer.max_error for layer in self.layers), default=0.0)

    @property
    def total_error(self) -> float:
        return float(np.sqrt(sum(layer.total_error ** 2 for layer in self.layers)))

    def layer(self, name: str) -> LayerConversion:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(layer) for layer in self.layers])

    def to_dict(self) -> dict:
        return {'layers': [vars(layer) for layer in self.layers],
                'max_error': self.max_error, 'total_error': self.total_error}


def convert_layer(weights: np.ndarray, selection: SpectrumSelection,
                  basis: DctBasis) -> Tuple[np.ndarray, np.ndarray]:
    """
    Returns:
        (M x N x P coefficients, M x N per-filter Parseval error of the dropped frequencies)
    """
    full = basis.astype(np.float64).project(weights.astype(np.float64))
    dropped = np.ones(basis.size * basis.size, dtype=bool)
    dropped[selection.flat_indices()] = False
    errors = np.sqrt(np.sum(full[..., dropped] ** 2, axis=-1))
    return _project(weights, basis, selection), errors


def spectral_weights(model: Model, norm_mode: str = 'orthonormal') -> Dict[str, np.ndarray]:
    """
    M x N x P DCT coefficients of every spatial layer, keyed by layer name.

    Harmonic layers report their trained coefficients; conv layers are
    projected onto the full basis, so adaptive plans work on either kind.
    """
    weights = {}
    for layer in model.spec.spatial_layers():
        weight = model.params[f"{layer.name}.weight"]
        if layer.kind == 'harm':
            weights[layer.name] = weight
        else:
            basis = make_basis(layer.kernel, norm_mode)
            weights[layer.name] = _project(weight, basis, SpectrumSelection.full(layer.kernel))
    return weights


def convert_model(model: Model, compression: Optional[CompressionPlan] = None,
                  norm_mode: str = 'orthonormal') -> Tuple[Model, ConversionReport]:
    """
    Replace every spatial conv layer by a harmonic layer with projected weights.

    1x1 convolutions, harmonic layers and all other layers are carried over
    verbatim, BN statistics included. Converted blocks get no spectrum BN
    since its statistics do not exist for a conventional source.
    """
    unsupported = [layer.name for layer in model.spec.layers if layer.kind == 'residual-group']
    if unsupported:
        raise UnsupportedLayerError(unsupported, "cannot convert layer kind 'residual-group'")
    if compression is not None:
        spatial = {layer.name for layer in model.spec.spatial_layers()}
        unknown = sorted(set(compression.selections) - spatial)
        if unknown:
            raise PlanMismatchError(f"plan names unknown layers: {', '.join(unknown)}")

    layers: List[LayerSpec] = []
    params = dict(model.params)
    report = ConversionReport()
    for layer in model.spec.layers:
        if layer.kind != 'conv' or not layer.is_spatial:
            layers.append(layer)
            continue
        selection = SpectrumSelection.full(layer.kernel)
        if compression is not None and layer.name in compression:
            selection = compression.selections[layer.name]
        basis = make_basis(layer.kernel, norm_mode)
        weight = model.params[f"{layer.name}.weight"]
        coeffs, errors = convert_layer(weight, selection, basis)
        params[f"{layer.name}.weight"] = coeffs.astype(weight.dtype)
        layers.append(replace(layer, kind='harm', spectrum_bn=False, basis_norm=norm_mode,
                              lam=selection.lam, frequencies=list(selection.indices), drop_dc=False,
                              formulation='twostage'))
        report.layers.append(LayerConversion(
            name=layer.name,
            K=layer.kernel,
            retained=selection.count,
            max_error=float(errors.max()),
            rms_error=float(np.sqrt(np.mean(errors ** 2))),
            total_error=float(np.sqrt(np.sum(errors ** 2))),
        ))
        logger.debug(f"{layer.name}: kept {selection.count}/{layer.kernel ** 2} frequencies, "
                     f"max error {errors.max():.3g}")

    spec = ModelSpec(model.spec.name, model.spec.input_channels, model.spec.input_res,
                     model.spec.classes, layers)
    converted = Model(spec, params, dict(model.state), model.dtype)
    logger.info(f"🔁 Converted {len(report.layers)} layers of '{model.spec.name}' "
                f"(max reconstruction error {report.max_error:.3g})")
    return converted, report


def compress_model(model: Model, compression: CompressionPlan) -> Tuple[Model, CompressionReport]:
    """
    Drop planned frequencies from a harmonic model's coefficients.

    Remaining spatial conv layers are converted first. Spectrum-BN entries of
    retained frequencies are kept, the others dropped with their coefficients.
    """
    if any(layer.kind == 'conv' and layer.is_spatial for layer in model.spec.layers):
        model, _ = convert_model(model)

    by_name = {layer.name: layer for layer in model.spec.layers}
    unknown = [name for name in compression.selections if by_name.get(name) is None or by_name[name].kind != 'harm']
    if unknown:
        raise PlanMismatchError(f"plan names layers that are not harmonic blocks: {', '.join(unknown)}")

    coefficients: Dict[str, LayerCoefficients] = {
        name: LayerCoefficients(model.params[f"{name}.weight"], layer_selection(by_name[name]))
        for name in compression.selections
    }
    compressed, report = apply_plan(coefficients, compression)

    params, state = dict(model.params), dict(model.state)
    layers: List[LayerSpec] = []
    for layer in model.spec.layers:
        if layer.name not in compressed:
            layers.append(layer)
            continue
        old, new = coefficients[layer.name].selection, compressed[layer.name].selection
        params[f"{layer.name}.weight"] = compressed[layer.name].weights
        if layer.spectrum_bn:
            keep = [old.position(u, v) for u, v in new.indices]
            for store, key in ((params, 'bn_gamma'), (params, 'bn_beta'),
                               (state, 'bn_running_mean'), (state, 'bn_running_var')):
                full_key = f"{layer.name}.{key}"
                store[full_key] = store[full_key].reshape(layer.in_channels, old.count)[:, keep].reshape(-1).copy()
        layers.append(replace(layer, lam=new.lam, frequencies=list(new.indices), drop_dc=False))

    spec = ModelSpec(model.spec.name, model.spec.input_channels, model.spec.input_res, model.spec.classes, layers)
    logger.info(f"Compressed {len(compressed)} layers of '{model.spec.name}'")
    return Model(spec, params, state, model.dtype), report
