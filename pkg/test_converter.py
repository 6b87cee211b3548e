"""
Tests for conventional-to-harmonic conversion and model compression
"""
import numpy as np
import pytest

from compression import CompressionPlan, Uniform, plan
from converter import compress_model, convert_layer, convert_model, project_filter
from dct_basis import SpectrumSelection, make_basis, select_spectrum
from errors import PlanMismatchError, ShapeError
from model_spec import TRAINABLE_PRESETS
from nn_train import build_preset
from tensor_core import make_rng


def _inputs(model, count=10, seed=0):
    rng = make_rng(seed)
    shape = (count, model.spec.input_channels, *model.spec.input_res)
    return rng.random(shape).astype(model.dtype)


@pytest.mark.parametrize('preset', TRAINABLE_PRESETS)
def test_full_spectrum_conversion_preserves_outputs(preset):
    model = build_preset(preset, scale=0.25, input_channels=1, classes=5, image_size=32, seed=3)
    converted, report = convert_model(model)
    assert all(layer.kind != 'conv' or layer.kernel == 1 for layer in converted.spec.layers)
    x = _inputs(model)
    before, after = model.forward(x), converted.forward(x)
    scale = max(1.0, float(np.max(np.abs(before))))
    assert np.max(np.abs(after - before)) <= 1e-4 * scale
    assert report.max_error < 1e-5


def test_conversion_keeps_parameter_count_at_full_spectrum():
    model = build_preset('cnn2', scale=0.25, input_channels=1, classes=5, image_size=32, dtype=np.float64)
    converted, report = convert_model(model)
    assert converted.parameter_count() == model.parameter_count()
    assert [layer.name for layer in report.layers] == ['conv1', 'conv2']
    assert report.layer('conv1').K == 5 and report.layer('conv1').retained == 25


def test_truncated_conversion_error_is_the_parseval_sum():
    model = build_preset('cnn3', scale=0.25, input_channels=1, classes=5, image_size=32, seed=4, dtype=np.float64)
    compression = plan(model.spec, Uniform(2, exempt_first=False))
    converted, report = convert_model(model, compression)
    for layer in converted.spec.spatial_layers():
        basis = make_basis(layer.kernel)
        selection = compression.selections[layer.name]
        coeffs = converted.params[f"{layer.name}.weight"]
        assert coeffs.shape[2] == selection.count == 3
        rebuilt = np.tensordot(coeffs, basis.filters[selection.flat_indices()], axes=([2], [0]))
        residual = np.sqrt(np.sum((model.params[f"{layer.name}.weight"] - rebuilt) ** 2))
        assert report.layer(layer.name).total_error == pytest.approx(residual, abs=1e-9)
    assert report.total_error == pytest.approx(
        np.sqrt(sum(layer.total_error ** 2 for layer in report.layers)), rel=1e-12)


def test_l1_basis_conversion_preserves_outputs():
    model = build_preset('cnn2', scale=0.25, input_channels=1, classes=5, image_size=32, dtype=np.float64)
    converted, _ = convert_model(model, norm_mode='l1')
    x = _inputs(model, 4)
    np.testing.assert_allclose(converted.forward(x), model.forward(x), atol=1e-10)
    assert {layer.basis_norm for layer in converted.spec.spatial_layers()} == {'l1'}


def test_project_filter_recovers_basis_coefficients():
    basis = make_basis(3)
    coeffs = project_filter(basis.filter(1, 2), basis, SpectrumSelection.full(3))
    expected = np.zeros(9)
    expected[5] = 1.0
    np.testing.assert_allclose(coeffs, expected, atol=1e-14)
    truncated = project_filter(basis.filter(1, 2), basis, select_spectrum(3, 2))
    np.testing.assert_allclose(truncated, 0.0, atol=1e-14)
    with pytest.raises(ShapeError):
        project_filter(np.zeros((4, 4)), basis, SpectrumSelection.full(3))


def test_convert_layer_reports_per_filter_errors():
    rng = make_rng(5)
    w = rng.standard_normal((3, 2, 3, 3))
    basis = make_basis(3)
    coeffs, errors = convert_layer(w, select_spectrum(3, 1), basis)
    assert coeffs.shape == (3, 2, 1) and errors.shape == (3, 2)
    np.testing.assert_allclose(coeffs[..., 0], w.sum(axis=(2, 3)) / 3, atol=1e-12)
    dc_part = coeffs[..., 0][..., None, None] * basis.filter(0, 0)
    np.testing.assert_allclose(errors, np.sqrt(((w - dc_part) ** 2).sum(axis=(2, 3))), atol=1e-12)


def test_plan_with_unknown_layers_is_rejected():
    model = build_preset('cnn2', scale=0.25, input_channels=1, classes=5, image_size=32)
    bogus = CompressionPlan('cnn2', 'uniform', {'conv9': select_spectrum(3, 2)})
    with pytest.raises(PlanMismatchError):
        convert_model(model, bogus)
    with pytest.raises(PlanMismatchError):
        compress_model(model, bogus)


def test_compress_model_slices_spectrum_bn_entries():
    model = build_preset('harmnet2', scale=0.25, input_channels=2, classes=5, image_size=32, dtype=np.float64)
    rng = make_rng(6)
    first = model.spec.spatial_layers()[0]
    assert first.spectrum_bn and first.kernel == 4
    N = first.in_channels
    model.params[f"{first.name}.bn_gamma"] = rng.standard_normal(N * 16)
    model.state[f"{first.name}.bn_running_mean"] = rng.standard_normal(N * 16)

    compressed, report = compress_model(model, plan(model.spec, Uniform(2, exempt_first=False)))
    keep = [0, 1, 4]
    for store, key in ((compressed.params, 'bn_gamma'), (compressed.state, 'bn_running_mean')):
        source = model.params if store is compressed.params else model.state
        expected = source[f"{first.name}.{key}"].reshape(N, 16)[:, keep].reshape(-1)
        np.testing.assert_array_equal(store[f"{first.name}.{key}"], expected)
    assert compressed.params[f"{first.name}.weight"].shape[2] == 3
    assert compressed.parameter_count() < model.parameter_count()
    assert report.retained[first.name] == 3
    assert compressed.forward(_inputs(model, 2)).shape == (2, 5)


def test_compress_model_converts_conventional_models_first():
    model = build_preset('cnn2', scale=0.25, input_channels=1, classes=5, image_size=32, dtype=np.float64)
    compressed, report = compress_model(model, plan(model.spec, Uniform(2)))
    kinds = {layer.name: layer.kind for layer in compressed.spec.layers}
    assert kinds['conv1'] == 'harm' and kinds['conv2'] == 'harm'
    assert compressed.params['conv1.weight'].shape[2] == 25
    assert compressed.params['conv2.weight'].shape[2] == 3
    assert set(report.errors) == {'conv1', 'conv2'}
