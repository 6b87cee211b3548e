"""
DCT-II filter bank
Builds, orders, normalizes and truncates the 2-D DCT-II basis, and evaluates
the 1-D cosine / sine transforms behind the shifted-cosine identity.
"""
import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, List, NamedTuple, Optional, Tuple

import numpy as np

from errors import NonIntegerShiftError, SelectionError, ShapeError

logger = logging.getLogger(__name__)

NORM_MODES = ('orthonormal', 'l1')


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class DctBasis:
    """
    K*K separable cosine filters ordered row-major by (u, v), u outer.

    filters[u*K + v] == scales[u*K + v] * outer(cosines[u], cosines[v]);
    row_vectors[u] == sqrt(alpha_u / K) * cosines[u].
    """
    size: int
    norm_mode: str
    filters: np.ndarray
    row_vectors: np.ndarray
    cosines: np.ndarray
    scales: np.ndarray
    l1_norms: np.ndarray
    orthonormal_filters: np.ndarray

    @property
    def K(self) -> int:
        return self.size

    @property
    def dtype(self):
        return self.filters.dtype

    def index(self, u: int, v: int) -> int:
        return u * self.size + v

    def frequencies(self) -> List[Tuple[int, int]]:
        return [(u, v) for u in range(self.size) for v in range(self.size)]

    def filter(self, u: int, v: int) -> np.ndarray:
        return self.filters[self.index(u, v)]

    def gram(self) -> np.ndarray:
        flat = self.filters.reshape(self.size * self.size, -1)
        return flat @ flat.T

    def project(self, patches: np.ndarray) -> np.ndarray:
        """Orthonormal analysis coefficients of (..., K, K) patches -> (..., K*K)"""
        patches = np.asarray(patches)
        if patches.shape[-2:] != (self.size, self.size):
            raise ShapeError("patch extent does not match the basis size",
                             expected=('...', self.size, self.size), got=patches.shape)
        return np.tensordot(patches, self.orthonormal_filters, axes=([-2, -1], [1, 2]))

    def astype(self, dtype) -> 'DctBasis':
        dtype = np.dtype(dtype)
        if dtype == self.filters.dtype:
            return self
        return DctBasis(
            size=self.size,
            norm_mode=self.norm_mode,
            filters=_frozen(self.filters.astype(dtype)),
            row_vectors=_frozen(self.row_vectors.astype(dtype)),
            cosines=_frozen(self.cosines.astype(dtype)),
            scales=_frozen(self.scales.astype(dtype)),
            l1_norms=self.l1_norms,
            orthonormal_filters=_frozen(self.orthonormal_filters.astype(dtype)),
        )


def make_basis(K: int, norm_mode: str = 'orthonormal', dtype=np.float64) -> DctBasis:
    """
    Build the K x K DCT-II filter bank.

    Constructed in float64 and cast down afterwards when f32 is requested.

    Args:
        K: kernel size, >= 1
        norm_mode: 'orthonormal' or 'l1' (every filter rescaled to unit L1 norm)
        dtype: numpy dtype of the returned filters
    """
    if not isinstance(K, (int, np.integer)) or K < 1:
        raise SelectionError(f"basis size must be a positive integer, got {K}")
    if norm_mode not in NORM_MODES:
        raise SelectionError(f"unknown norm mode '{norm_mode}' (expected one of {', '.join(NORM_MODES)})")
    K = int(K)

    n = np.arange(K, dtype=np.float64)
    cosines = np.cos(np.pi * (n[None, :] + 0.5) * n[:, None] / K)
    alpha = np.where(n == 0, 1.0, 2.0)
    row_vectors = np.sqrt(alpha / K)[:, None] * cosines

    # sqrt(alpha_u * alpha_v) / K keeps the DC filter at exactly 1/K
    ortho_scales = (np.sqrt(np.outer(alpha, alpha)) / K).reshape(-1)
    outer = np.einsum('ux,vy->uvxy', cosines, cosines).reshape(K * K, K, K)
    orthonormal = ortho_scales[:, None, None] * outer
    l1_norms = np.abs(orthonormal).sum(axis=(1, 2))

    scales = ortho_scales if norm_mode == 'orthonormal' else ortho_scales / l1_norms
    filters = scales[:, None, None] * outer

    logger.debug(f"Built {norm_mode} DCT basis K={K} ({K * K} filters)")
    basis = DctBasis(
        size=K,
        norm_mode=norm_mode,
        filters=_frozen(filters),
        row_vectors=_frozen(row_vectors),
        cosines=_frozen(cosines),
        scales=_frozen(scales),
        l1_norms=_frozen(l1_norms),
        orthonormal_filters=_frozen(orthonormal),
    )
    return basis.astype(dtype)


def spectrum_size(K: int, lam: int) -> int:
    """Closed-form number of frequencies with u + v <= lam - 1"""
    if lam <= K:
        return lam * (lam + 1) // 2
    return K * K - (2 * K - 1 - lam) * (2 * K - lam) // 2


@dataclass(frozen=True)
class SpectrumSelection:
    """Retained (u, v) frequencies of a K x K bank, row-major ordered"""
    K: int
    indices: Tuple[Tuple[int, int], ...]
    lam: Optional[int] = None

    def __post_init__(self):
        if self.K < 1:
            raise SelectionError(f"selection size must be >= 1, got {self.K}")
        if not self.indices:
            raise SelectionError("a spectrum selection keeps at least one frequency")
        for u, v in self.indices:
            if not (0 <= u < self.K and 0 <= v < self.K):
                raise SelectionError(f"frequency ({u},{v}) outside a {self.K}x{self.K} basis")
        if list(self.indices) != sorted(set(self.indices)):
            raise SelectionError("selection indices must be unique and row-major ordered")

    @classmethod
    def from_indices(cls, K: int, indices: Iterable[Tuple[int, int]],
                     lam: Optional[int] = None) -> 'SpectrumSelection':
        ordered = tuple(sorted({(int(u), int(v)) for u, v in indices}))
        return cls(K=K, indices=ordered, lam=lam)

    @classmethod
    def full(cls, K: int) -> 'SpectrumSelection':
        return select_spectrum(K, 2 * K - 1)

    @property
    def count(self) -> int:
        return len(self.indices)

    @property
    def is_full(self) -> bool:
        return self.count == self.K * self.K

    @property
    def has_dc(self) -> bool:
        return (0, 0) in self.indices

    def flat_indices(self) -> np.ndarray:
        return np.array([u * self.K + v for u, v in self.indices], dtype=np.intp)

    def position(self, u: int, v: int) -> int:
        return self.indices.index((u, v))

    def issubset(self, other: 'SpectrumSelection') -> bool:
        return self.K == other.K and set(self.indices) <= set(other.indices)

    def intersect(self, other: 'SpectrumSelection') -> 'SpectrumSelection':
        if self.K != other.K:
            raise SelectionError(f"cannot intersect selections of size {self.K} and {other.K}")
        kept = set(self.indices) & set(other.indices)
        if not kept:
            raise SelectionError("selections share no frequency")
        lam = None if self.lam is None or other.lam is None else min(self.lam, other.lam)
        return SpectrumSelection.from_indices(self.K, kept, lam=lam)

    def without_dc(self) -> 'SpectrumSelection':
        kept = [ij for ij in self.indices if ij != (0, 0)]
        if not kept:
            raise SelectionError("removing DC would leave an empty selection")
        return SpectrumSelection.from_indices(self.K, kept)

    def to_dict(self) -> dict:
        return {'K': self.K, 'lambda': self.lam, 'indices': [list(ij) for ij in self.indices]}

    @classmethod
    def from_dict(cls, data: dict) -> 'SpectrumSelection':
        return cls.from_indices(data['K'], [tuple(ij) for ij in data['indices']], lam=data.get('lambda'))


def select_spectrum(K: int, lam: int) -> SpectrumSelection:
    """Triangular keep-set u + v <= lam - 1 for 1 <= lam <= 2K - 1"""
    if K < 1:
        raise SelectionError(f"basis size must be >= 1, got {K}")
    if not 1 <= lam <= 2 * K - 1:
        raise SelectionError(f"lambda={lam} out of range [1, {2 * K - 1}] for K={K}")
    indices = tuple((u, v) for u in range(K) for v in range(K) if u + v <= lam - 1)
    return SpectrumSelection(K=K, indices=indices, lam=lam)


# 1-D transforms and the shifted-cosine identity

def _check_frequency(X: np.ndarray, k: int) -> int:
    if X.ndim != 1 or X.size < 1:
        raise ShapeError("expected a non-empty 1-D signal", got=X.shape)
    if not 0 <= k < X.size:
        raise SelectionError(f"frequency k={k} out of range [0, {X.size - 1}]")
    return X.size


def dct1d(X, k: int) -> float:
    """Unnormalized F_k = sum_n X_n cos(pi/N (n + 1/2) k)"""
    X = np.asarray(X, dtype=np.float64)
    N = _check_frequency(X, k)
    n = np.arange(N)
    return float(np.sum(X * np.cos(np.pi / N * (n + 0.5) * k)))


def dst1d(X, k: int) -> float:
    """Unnormalized G_k = sum_n X_n sin(pi/N (n + 1/2) k)"""
    X = np.asarray(X, dtype=np.float64)
    N = _check_frequency(X, k)
    n = np.arange(N)
    return float(np.sum(X * np.sin(np.pi / N * (n + 0.5) * k)))


class ShiftDelta(NamedTuple):
    delta: Fraction
    is_integer: bool


def sine_shift_delta(N: int, k: int, z: int) -> ShiftDelta:
    """delta = N (1 + 4z) / (2k): the shift turning the sine row into a cosine row"""
    if N < 1:
        raise SelectionError(f"signal length must be >= 1, got {N}")
    if k < 1:
        raise SelectionError("k must be >= 1: DC has no sine counterpart")
    delta = Fraction(N * (1 + 4 * z), 2 * k)
    return ShiftDelta(delta=delta, is_integer=delta.denominator == 1)


def _integer_shift(N: int, k: int, z: int) -> int:
    shift = sine_shift_delta(N, k, z)
    if not shift.is_integer:
        raise NonIntegerShiftError(shift.delta)
    return int(shift.delta)


def verify_shift_equivalence(signal, N: int, k: int, z: int, origin: int = 0) -> float:
    """
    |dst1d(X[0:N], k) - dct1d(X[delta:delta+N], k)| on an explicitly extended signal.

    `origin` is the array position of sample 0, so negative shifts can be
    checked on a signal that extends to the left.
    """
    d = _integer_shift(N, k, z)
    signal = np.asarray(signal, dtype=np.float64)
    lo = origin + min(0, d)
    hi = origin + max(0, d) + N
    if lo < 0 or hi > signal.size:
        raise ShapeError(
            f"signal must cover sample indices [{min(0, d)}, {max(0, d) + N}) "
            f"relative to origin {origin}",
            expected=(hi - min(lo, 0),), got=signal.shape,
        )
    base = signal[origin:origin + N]
    shifted = signal[origin + d:origin + d + N]
    return abs(dst1d(base, k) - dct1d(shifted, k))


def shift_test_signal(N: int, k: int, z: int, rng: Optional[np.random.Generator] = None,
                      seed: int = 0) -> Tuple[np.ndarray, int]:
    """
    Random signal extended as X[j + N] = (-1)^k X[j] over the support the
    shift needs; the identity is exact for this extension.

    Returns:
        (signal, origin) where signal[origin] is sample 0
    """
    d = _integer_shift(N, k, z)
    rng = rng if rng is not None else np.random.default_rng(seed)
    base = rng.standard_normal(N)
    sign = -1.0 if k % 2 else 1.0
    lo, hi = min(0, d), max(0, d) + N
    j = np.arange(lo, hi)
    signal = base[j % N] * sign ** (j // N)
    return signal, -lo


def energy_compaction(patches, basis: DctBasis) -> np.ndarray:
    """Share of patch energy per anti-diagonal level u + v (length 2K - 1)"""
    coeffs = basis.project(patches)
    energy = (coeffs.reshape(-1, basis.size * basis.size) ** 2).sum(axis=0)
    levels = np.zeros(2 * basis.size - 1)
    for p, (u, v) in enumerate(basis.frequencies()):
        levels[u + v] += energy[p]
    total = levels.sum()
    return levels / total if total > 0 else levels
