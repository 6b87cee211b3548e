"""
Block benchmark
Times a conventional convolution, the two-stage harmonic block and the
merged harmonic block over a catalog of layer shapes, next to the
multiply-add predictions of the cost model.
"""
import json
import logging
import statistics
import time
import tracemalloc
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from compression import layer_cost
from config import dtype_name, resolve_dtype
from dct_basis import make_basis
from errors import ConfigError, EquivalenceError, ManifestError
from harmonic_block import HarmonicBlockConfig, forward_merged, forward_twostage, init_params, synthesize_filters
from model_spec import LayerSpec, wrn_spec
from tensor_core import conv2d, make_rng

logger = logging.getLogger(__name__)

PATHS = ('conv', 'twostage', 'merged')
# max |difference| relative to the output scale, before any timing
TOLERANCES = {'f32': 1e-4, 'f64': 1e-10}


@dataclass(frozen=True)
class BenchCase:
    """One layer shape; A x B is the output feature resolution"""
    N: int
    M: int
    K: int
    A: int
    B: int
    stride: int = 1
    lam: Optional[int] = None
    batch: int = 1
    reps: int = 5
    warmup: int = 1
    name: str = ''

    def __post_init__(self):
        if self.reps < 3:
            raise ConfigError(f"bench case '{self.label}' needs reps >= 3, got {self.reps}")
        if min(self.N, self.M, self.K, self.A, self.B, self.stride, self.batch) < 1:
            raise ConfigError(f"bench case '{self.label}' has a non-positive dimension")
        if self.warmup < 0:
            raise ConfigError(f"warmup must be >= 0, got {self.warmup}")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        lam = 'full' if self.lam is None else f"l{self.lam}"
        return f"{self.N}x{self.M}-k{self.K}-{self.A}x{self.B}-s{self.stride}-{lam}"

    @property
    def padding(self) -> int:
        return (self.K - 1) // 2

    @property
    def input_extent(self) -> tuple:
        return self.A * self.stride, self.B * self.stride

    def block_config(self) -> HarmonicBlockConfig:
        return HarmonicBlockConfig.create(self.N, self.M, self.K, stride=self.stride,
                                          padding=self.padding, lam=self.lam)

    def layer_spec(self) -> LayerSpec:
        return LayerSpec('harm', name=self.label, in_channels=self.N, out_channels=self.M, kernel=self.K,
                         stride=self.stride, padding=self.padding, in_res=self.input_extent,
                         out_res=(self.A, self.B), lam=self.lam)

    def with_reps(self, reps: int) -> 'BenchCase':
        data = asdict(self)
        data['reps'] = reps
        return BenchCase(**data)


def wrn_catalog(depth: int = 16, width: int = 8, batch: int = 1, reps: int = 5,
                lam: Optional[int] = None) -> List[BenchCase]:
    """Distinct 3x3 layer shapes of a wide residual network"""
    seen = set()
    cases = []
    for layer in wrn_spec(depth, width).flat_layers():
        if layer.kind != 'conv' or not layer.is_spatial:
            continue
        key = (layer.in_channels, layer.out_channels, layer.kernel, layer.stride, layer.out_res)
        if key in seen:
            continue
        seen.add(key)
        A, B = layer.out_res
        cases.append(BenchCase(layer.in_channels, layer.out_channels, layer.kernel, A, B,
                               stride=layer.stride, lam=lam, batch=batch, reps=reps))
    return cases


def wrn_16_8_catalog(batch: int = 1, reps: int = 5) -> List[BenchCase]:
    return wrn_catalog(16, 8, batch=batch, reps=reps)


def load_catalog(path: Union[str, Path]) -> List[BenchCase]:
    """JSON catalog: a list of objects with BenchCase field names ('lambda' accepted for lam)"""
    try:
        entries = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: catalog is not valid JSON ({e})") from e
    if isinstance(entries, dict):
        entries = entries.get('cases', [])
    if not isinstance(entries, list) or not entries:
        raise ManifestError(f"{path}: catalog must be a non-empty list of cases")
    fields = set(BenchCase.__dataclass_fields__)
    cases = []
    for i, entry in enumerate(entries):
        entry = dict(entry)
        if 'lambda' in entry:
            entry['lam'] = entry.pop('lambda')
        unknown = set(entry) - fields
        if unknown:
            raise ManifestError(f"{path}: case {i} has unknown fields {sorted(unknown)}")
        try:
            cases.append(BenchCase(**entry))
        except TypeError as e:
            raise ManifestError(f"{path}: case {i} is incomplete ({e})") from e
    return cases


def _median_time(fn: Callable[[], np.ndarray], reps: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return statistics.median(times)


def _peak_bytes(fn: Callable[[], np.ndarray]) -> int:
    tracemalloc.start()
    try:
        fn()
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return peak


def _check_paths(case: BenchCase, outputs: Dict[str, np.ndarray], tol: float):
    reference = outputs['twostage']
    scale = max(1.0, float(np.max(np.abs(reference))))
    for path in ('conv', 'merged'):
        diff = float(np.max(np.abs(outputs[path] - reference))) / scale
        if not diff <= tol:
            raise EquivalenceError(
                f"bench case '{case.label}': {path} differs from twostage by {diff:.3g} (tolerance {tol:g})"
            )


def bench_case(case: BenchCase, workers: int = 1, dtype=np.float32, seed: int = 0,
               reps: Optional[int] = None) -> dict:
    """Verify the three paths agree, then time them and record their peak allocations"""
    dtype = resolve_dtype(dtype)
    reps = case.reps if reps is None else reps
    rng = make_rng(seed)
    cfg = case.block_config()
    basis = make_basis(case.K).astype(dtype)
    params = init_params(cfg, rng, dtype)
    H, W = case.input_extent
    x = rng.standard_normal((case.batch, case.N, H, W)).astype(dtype)
    filters = synthesize_filters(params, cfg, basis)
    bias = params.bias[None, :, None, None]

    paths: Dict[str, Callable[[], np.ndarray]] = {
        'conv': lambda: conv2d(x, filters, cfg.geom, method='gemm', workers=workers) + bias,
        'twostage': lambda: forward_twostage(x, cfg, params, basis, workers=workers),
        'merged': lambda: forward_merged(x, cfg, params, basis, method='gemm', workers=workers),
    }
    _check_paths(case, {name: fn() for name, fn in paths.items()}, TOLERANCES[dtype_name(dtype)])

    cost = layer_cost(case.layer_spec(), cfg.selection if case.K > 1 else None)
    row = {
        'case': case.label, 'N': case.N, 'M': case.M, 'K': case.K, 'A': case.A, 'B': case.B,
        'stride': case.stride, 'lambda': cfg.selection.lam, 'P': cfg.P, 'batch': case.batch,
        'workers': workers, 'dtype': dtype_name(dtype), 'reps': reps,
    }
    for name, fn in paths.items():
        macs = getattr(cost, f"macs_{name}") * case.batch
        seconds = _median_time(fn, reps, case.warmup)
        row[f"macs_{name}"] = macs
        row[f"time_{name}"] = seconds
        row[f"ns_per_mac_{name}"] = 1e9 * seconds / macs
        row[f"peak_{name}"] = _peak_bytes(fn)
    row['merged_over_twostage'] = row['time_merged'] / row['time_twostage']
    logger.info(f"⏱️ {case.label}: conv {row['time_conv'] * 1e3:.1f} ms, twostage "
                f"{row['time_twostage'] * 1e3:.1f} ms, merged {row['time_merged'] * 1e3:.1f} ms")
    return row


def run_bench(catalog: Sequence[BenchCase], reps: Optional[int] = None, workers: int = 1,
              dtype=np.float32, seed: int = 0) -> pd.DataFrame:
    """
    One row per case: median wall time, predicted multiply-adds, time per
    multiply-add and peak traced allocation for each of conv / twostage / merged.
    """
    if not catalog:
        raise ConfigError("bench catalog is empty")
    if reps is not None and reps < 3:
        raise ConfigError(f"reps must be >= 3, got {reps}")
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")
    rows = [bench_case(case, workers=workers, dtype=dtype, seed=seed + i, reps=reps)
            for i, case in enumerate(catalog)]
    logger.info(f"Benchmarked {len(rows)} cases")
    return pd.DataFrame(rows)


def mac_rank_agreement(report: pd.DataFrame, path: str = 'twostage') -> float:
    """Share of adjacent pairs, sorted by predicted MACs, whose measured time does not decrease"""
    if path not in PATHS:
        raise ConfigError(f"unknown path '{path}'")
    ordered = report.sort_values(f"macs_{path}", kind='mergesort')
    times = ordered[f"time_{path}"].to_numpy()
    if len(times) < 2:
        return 1.0
    return float(np.mean(np.diff(times) >= 0))


def summary_ratio(report: pd.DataFrame) -> float:
    """Merged over two-stage median time summed across the catalog"""
    return float(report['time_merged'].sum() / report['time_twostage'].sum())


def format_table(report: pd.DataFrame) -> str:
    columns = ['case', 'P', 'macs_twostage', 'macs_merged', 'time_conv', 'time_twostage',
               'time_merged', 'merged_over_twostage', 'peak_twostage', 'peak_merged']
    return report[columns].to_string(index=False, float_format=lambda v: f"{v:.4g}")
