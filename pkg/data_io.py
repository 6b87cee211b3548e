"""
Data ingestion and model files
Small NORB binary matrices, the synthetic shapes set, batch augmentation,
and the HARMNET1 container used for models and dataset dumps.
"""
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np
import pandas as pd

from config import dtype_name
from errors import (
    BadMagicError,
    ConfigError,
    ExtentMismatchError,
    ManifestError,
    ShapeError,
    TruncatedPayloadError,
)
from model_spec import ModelSpec

logger = logging.getLogger(__name__)

MAGIC = b'HARMNET1'
FORMAT_VERSION = 1
ALIGNMENT = 64
LE_DTYPES = {'f32': np.dtype('<f4'), 'f64': np.dtype('<f8')}
TENSOR_FIELDS = ('name', 'dtype', 'shape', 'offset', 'nbytes')

NORB_BYTE_MAGIC = 0x1E3D4C55
NORB_INT_MAGIC = 0x1E3D4C54
NORB_DTYPES = {NORB_BYTE_MAGIC: np.dtype('u1'), NORB_INT_MAGIC: np.dtype('<i4')}
NORB_FILES = {
    'training': 'smallnorb-5x46789x9x18x6x2x96x96-training-{}.mat',
    'testing': 'smallnorb-5x01235x9x18x6x2x96x96-testing-{}.mat',
}
NORB_INFO_FIELDS = ('instance', 'elevation', 'azimuth', 'lighting')

SHAPES = ('disk', 'square', 'triangle', 'cross', 'ring')


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    classes: int
    attributes: Dict[str, np.ndarray] = field(default_factory=dict)
    name: str = ''

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ShapeError("dataset images must be N x C x H x W", got=self.images.shape)
        n = self.images.shape[0]
        if self.labels.shape != (n,):
            raise ExtentMismatchError(f"{n} images but {self.labels.shape[0]} labels")
        for key, values in self.attributes.items():
            if len(values) != n:
                raise ExtentMismatchError(f"attribute '{key}' has {len(values)} entries for {n} samples")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ConfigError(f"labels must lie in [0, {self.classes})")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, idx) -> 'Dataset':
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.images[idx], self.labels[idx], self.classes,
                       {k: v[idx] for k, v in self.attributes.items()}, self.name)


# HARMNET1 container: magic, uint32 LE manifest length, JSON manifest,
# payload of little-endian tensors at 64-byte aligned offsets

def _align(offset: int) -> int:
    return (offset + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT


def write_container(path, kind: str, tensors: Dict[str, np.ndarray], meta: Optional[dict] = None):
    index, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        code = dtype_name(arr.dtype)
        data = np.ascontiguousarray(arr, dtype=LE_DTYPES[code]).tobytes()
        offset = _align(offset)
        index.append({'name': name, 'dtype': code, 'shape': list(arr.shape), 'offset': offset, 'nbytes': len(data)})
        blobs.append((offset, data))
        offset += len(data)

    manifest = {'format_version': FORMAT_VERSION, 'kind': kind, 'meta': meta or {}, 'tensors': index}
    encoded = json.dumps(manifest, sort_keys=True).encode('utf-8')
    header = MAGIC + struct.pack('<I', len(encoded)) + encoded
    payload_start = _align(len(header))

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(header)
        f.write(b'\0' * (payload_start - len(header)))
        position = 0
        for start, data in blobs:
            f.write(b'\0' * (start - position))
            f.write(data)
            position = start + len(data)
    logger.debug(f"Wrote {kind} container {path} ({len(index)} tensors)")


def _tensor_entries(manifest: dict, path) -> List[dict]:
    """Tensor index of a manifest; every entry needs well-typed TENSOR_FIELDS"""
    entries = manifest.get('tensors', [])
    if not isinstance(entries, list):
        raise ManifestError(f"{path}: 'tensors' must be a list")
    for position, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise ManifestError(f"{path}: tensor entry {position} is not an object")
        missing = [key for key in TENSOR_FIELDS if key not in entry]
        if missing:
            label = entry.get('name', position)
            raise ManifestError(f"{path}: tensor entry {label!r} lacks {', '.join(missing)}")
        shape = entry['shape']
        well_typed = (isinstance(entry['name'], str) and isinstance(entry['dtype'], str)
                      and isinstance(entry['offset'], int) and entry['offset'] >= 0
                      and isinstance(entry['nbytes'], int)
                      and isinstance(shape, list) and all(isinstance(d, int) and d >= 0 for d in shape))
        if not well_typed:
            raise ManifestError(f"{path}: tensor entry {entry['name']!r} has a malformed field")
    return entries


def read_container(path, kind: Optional[str] = None) -> Tuple[dict, Dict[str, np.ndarray]]:
    """Parse and validate a HARMNET1 file; returns (manifest, tensors)"""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 4:
        raise TruncatedPayloadError(str(path), len(MAGIC) + 4, len(raw))
    if raw[:len(MAGIC)] != MAGIC:
        raise BadMagicError(str(path), MAGIC.decode(), raw[:len(MAGIC)])
    (length,) = struct.unpack('<I', raw[8:12])
    if 12 + length > len(raw):
        raise TruncatedPayloadError(str(path), 12 + length, len(raw))
    try:
        manifest = json.loads(raw[12:12 + length].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ManifestError(f"{path}: unreadable manifest ({e})") from e
    if not isinstance(manifest, dict):
        raise ManifestError(f"{path}: manifest is not a JSON object")
    if manifest.get('format_version') != FORMAT_VERSION:
        raise ManifestError(f"{path}: unsupported format version {manifest.get('format_version')!r}")
    if kind is not None and manifest.get('kind') != kind:
        raise ManifestError(f"{path}: expected a {kind} container, found {manifest.get('kind')!r}")

    payload = raw[_align(12 + length):]
    tensors: Dict[str, np.ndarray] = {}
    end = 0
    for entry in sorted(_tensor_entries(manifest, path), key=lambda e: e['offset']):
        name, code, shape = entry['name'], entry['dtype'], tuple(entry['shape'])
        if code not in LE_DTYPES:
            raise ManifestError(f"{path}: tensor '{name}' has unsupported dtype {code!r}")
        dtype = LE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if entry['nbytes'] != nbytes:
            raise ManifestError(f"{path}: tensor '{name}' declares {entry['nbytes']} bytes, shape needs {nbytes}")
        if entry['offset'] < end:
            raise ManifestError(f"{path}: tensor '{name}' overlaps the previous tensor")
        if entry['offset'] + nbytes > len(payload):
            raise TruncatedPayloadError(str(path), entry['offset'] + nbytes, len(payload))
        arr = np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize, offset=entry['offset'])
        tensors[name] = arr.reshape(shape).astype(dtype.newbyteorder('='))
        end = entry['offset'] + nbytes
    return manifest, tensors


def save_model(model, path):
    """Write a model's spec, parameters and running state"""
    tensors = {f"params/{k}": v for k, v in model.params.items()}
    tensors.update({f"state/{k}": v for k, v in model.state.items()})
    write_container(path, 'model', tensors, {'spec': model.spec.to_dict(), 'dtype': dtype_name(model.dtype)})
    logger.info(f"💾 Saved model '{model.spec.name}' to {path}")


def load_model(path):
    from nn_train import Model

    manifest, tensors = read_container(path, kind='model')
    meta = manifest.get('meta', {})
    if 'spec' not in meta:
        raise ManifestError(f"{path}: model container has no spec")
    spec = ModelSpec.from_dict(meta['spec'])
    params = {k[len('params/'):]: v for k, v in tensors.items() if k.startswith('params/')}
    state = {k[len('state/'):]: v for k, v in tensors.items() if k.startswith('state/')}
    dtype = LE_DTYPES.get(meta.get('dtype', 'f32'), LE_DTYPES['f32'])
    return Model(spec, params, state, dtype.newbyteorder('='))


def save_dataset(dataset: Dataset, path):
    tensors = {'images': dataset.images, 'labels': dataset.labels.astype(np.float64)}
    tensors.update({f"attributes/{k}": np.asarray(v, dtype=np.float64) for k, v in dataset.attributes.items()})
    write_container(path, 'dataset', tensors, {'classes': dataset.classes, 'name': dataset.name})


def load_dataset(path) -> Dataset:
    manifest, tensors = read_container(path, kind='dataset')
    meta = manifest.get('meta', {})
    attributes = {k[len('attributes/'):]: v for k, v in tensors.items() if k.startswith('attributes/')}
    return Dataset(tensors['images'], tensors['labels'].astype(np.int64), int(meta['classes']),
                   attributes, meta.get('name', ''))


# small NORB

def read_norb_matrix(path, expected_magic: Optional[int] = None) -> np.ndarray:
    """
    Binary matrix: int32 magic, int32 ndim, max(3, ndim) int32 extents, data.
    Everything little-endian.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise TruncatedPayloadError(str(path), 8, len(raw))
    magic, ndim = struct.unpack('<ii', raw[:8])
    magic &= 0xFFFFFFFF
    if magic not in NORB_DTYPES or (expected_magic is not None and magic != expected_magic):
        expected = hex(expected_magic) if expected_magic is not None else ' or '.join(hex(m) for m in NORB_DTYPES)
        raise BadMagicError(str(path), expected, hex(magic))
    if not 1 <= ndim <= 8:
        raise ExtentMismatchError(f"{path}: implausible dimension count {ndim}")
    slots = max(3, ndim)
    header = 8 + 4 * slots
    if len(raw) < header:
        raise TruncatedPayloadError(str(path), header, len(raw))
    dims = struct.unpack(f'<{slots}i', raw[8:header])[:ndim]
    if any(d < 1 for d in dims):
        raise ExtentMismatchError(f"{path}: non-positive extent in {dims}")
    dtype = NORB_DTYPES[magic]
    count = int(np.prod(dims, dtype=np.int64))
    available = len(raw) - header
    if available < count * dtype.itemsize:
        raise TruncatedPayloadError(str(path), count * dtype.itemsize, available)
    return np.frombuffer(raw, dtype=dtype, count=count, offset=header).reshape(dims)


def load_small_norb(data_path, labels_path, info_path) -> Dataset:
    """N x 2 x 96 x 96 stereo images scaled to [0, 1], 5 classes, info fields as attributes"""
    images = read_norb_matrix(data_path, NORB_BYTE_MAGIC)
    labels = read_norb_matrix(labels_path, NORB_INT_MAGIC)
    info = read_norb_matrix(info_path, NORB_INT_MAGIC)
    if images.ndim != 4:
        raise ExtentMismatchError(f"{data_path}: expected N x 2 x H x W images, got {images.shape}")
    n = images.shape[0]
    if labels.shape != (n,):
        raise ExtentMismatchError(f"{labels_path}: {labels.shape} labels for {n} images")
    if info.ndim != 2 or info.shape[0] != n or info.shape[1] != len(NORB_INFO_FIELDS):
        raise ExtentMismatchError(f"{info_path}: info shape {info.shape} does not match {n} images")
    attributes = {name: info[:, i].astype(np.int64) for i, name in enumerate(NORB_INFO_FIELDS)}
    logger.info(f"Loaded small NORB {data_path}: {images.shape}")
    return Dataset((images.astype(np.float32) / np.float32(255)), labels.astype(np.int64), 5,
                   attributes, 'small-norb')


def load_small_norb_dir(directory, split: str = 'training') -> Dataset:
    if split not in NORB_FILES:
        raise ConfigError(f"unknown small NORB split '{split}'")
    directory = Path(directory)
    paths = [directory / NORB_FILES[split].format(part) for part in ('dat', 'cat', 'info')]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise ConfigError(f"small NORB files not found: {', '.join(missing)}")
    return load_small_norb(*paths)


# Synthetic shapes

def _shape_mask(kind: str, size: int, cx: float, cy: float, radius: float, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    r = np.hypot(dx, dy)
    if kind == 'disk':
        return r <= radius
    if kind == 'square':
        return np.maximum(np.abs(u), np.abs(v)) <= 0.75 * radius
    if kind == 'triangle':
        inside = np.ones((size, size), dtype=bool)
        for k in range(3):
            phi = angle + 2 * np.pi * k / 3
            inside &= dx * np.cos(phi) + dy * np.sin(phi) <= radius / 2
        return inside
    if kind == 'cross':
        arm = 0.3 * radius
        return ((np.abs(u) <= arm) & (np.abs(v) <= radius)) | ((np.abs(v) <= arm) & (np.abs(u) <= radius))
    if kind == 'ring':
        return (r <= radius) & (r >= 0.55 * radius)
    raise ConfigError(f"unknown shape '{kind}'")


def synth_shapes(classes: int = 5, per_class: int = 100, size: int = 32, channels: int = 1,
                 brightness: Tuple[float, float] = (-0.2, 0.2), seed: int = 0,
                 noise: float = 0.02) -> Dataset:
    """
    Balanced set of rendered shapes (disk, square, triangle, cross, ring) with
    random pose and scale. Each image gets an additive brightness offset,
    recorded in the 'brightness' attribute.
    """
    if size < 16:
        raise ConfigError(f"synthetic images need size >= 16, got {size}")
    if not 1 <= classes <= len(SHAPES):
        raise ConfigError(f"synthetic shapes support 1..{len(SHAPES)} classes, got {classes}")
    if per_class < 1 or channels < 1:
        raise ConfigError("per-class count and channels must be >= 1")
    lo, hi = brightness
    if lo > hi:
        raise ConfigError(f"brightness range must be ordered, got {brightness}")

    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.repeat(np.arange(classes), per_class))
    n = labels.size
    images = np.empty((n, channels, size, size), dtype=np.float32)
    offsets = rng.uniform(lo, hi, n)
    for i, label in enumerate(labels):
        radius = rng.uniform(0.22, 0.36) * size
        cx, cy = rng.uniform(radius + 1, size - radius - 1, 2)
        mask = _shape_mask(SHAPES[label], size, cx, cy, radius, rng.uniform(0, 2 * np.pi))
        contrast = rng.uniform(0.3, 0.45)
        base = 0.25 + contrast * mask
        for ch in range(channels):
            images[i, ch] = np.clip(base + offsets[i] + rng.normal(0.0, noise, (size, size)), 0.0, 1.0)
    logger.debug(f"Rendered {n} synthetic shapes ({size}x{size}, seed {seed})")
    return Dataset(images, labels.astype(np.int64), classes, {'brightness': offsets}, 'synth-shapes')


class AugmentParams(NamedTuple):
    offsets: np.ndarray
    flips: np.ndarray
    shifts: np.ndarray
    factors: np.ndarray


def augment(images: np.ndarray, pad_crop: int = 0, flip: bool = False, brightness: float = 0.0,
            contrast: float = 0.0, rng: Optional[np.random.Generator] = None, seed: Optional[int] = None,
            photometric_mask: Optional[np.ndarray] = None, return_params: bool = False):
    """
    Per-sample zero-pad + random crop, horizontal flip, and brightness / contrast jitter.

    Contrast scales around the image mean by a factor in [1 - contrast, 1 + contrast];
    brightness then adds an offset in [-brightness, brightness] and the result is
    clamped to [0, 1]. `photometric_mask` limits the jitter to selected samples.
    """
    if pad_crop < 0 or brightness < 0 or contrast < 0:
        raise ConfigError("augmentation magnitudes must be non-negative")
    rng = rng if rng is not None else np.random.default_rng(seed)
    B, C, H, W = images.shape
    out = np.array(images, copy=True)

    offsets = rng.integers(0, 2 * pad_crop + 1, size=(B, 2)) if pad_crop else np.full((B, 2), 0)
    flips = rng.random(B) < 0.5 if flip else np.zeros(B, dtype=bool)
    shifts = rng.uniform(-brightness, brightness, B) if brightness else np.zeros(B)
    factors = rng.uniform(1 - contrast, 1 + contrast, B) if contrast else np.ones(B)
    photometric = brightness > 0 or contrast > 0
    if photometric_mask is not None:
        shifts = np.where(photometric_mask, shifts, 0.0)
        factors = np.where(photometric_mask, factors, 1.0)

    if pad_crop:
        padded = np.pad(out, [(0, 0), (0, 0), (pad_crop, pad_crop), (pad_crop, pad_crop)])
        for i, (dy, dx) in enumerate(offsets):
            out[i] = padded[i, :, dy:dy + H, dx:dx + W]
    if flip:
        out[flips] = out[flips, :, :, ::-1]
    if photometric:
        selected = np.ones(B, dtype=bool) if photometric_mask is None else np.asarray(photometric_mask, dtype=bool)
        means = out.mean(axis=(1, 2, 3), keepdims=True)
        jittered = (out - means) * factors[:, None, None, None].astype(out.dtype) + means
        jittered = np.clip(jittered + shifts[:, None, None, None].astype(out.dtype), 0.0, 1.0)
        out[selected] = jittered[selected]

    params = AugmentParams(offsets, flips, shifts, factors)
    return (out, params) if return_params else out


def parse_data_source(source: str) -> Tuple[str, dict]:
    """'synth', 'synth:size=32,per_class=40', 'norb:<dir>' or a dataset container path"""
    kind, _, rest = source.partition(':')
    if kind == 'synth':
        options = {}
        for item in filter(None, rest.split(',')):
            key, _, value = item.partition('=')
            options[key.strip()] = value.strip()
        return 'synth', options
    if kind == 'norb':
        if not rest:
            raise ConfigError("norb data source needs a directory: norb:<dir>")
        return 'norb', {'dir': rest}
    return 'file', {'path': source}


def load_data(source: str, seed: int = 0) -> Tuple[Dataset, Optional[Dataset]]:
    """Resolve a data source string to (train, test)"""
    kind, options = parse_data_source(source)
    if kind == 'synth':
        ints = {'classes', 'per_class', 'size', 'channels', 'test_per_class', 'seed'}
        unknown = set(options) - ints - {'brightness', 'noise'}
        if unknown:
            raise ConfigError(f"unknown synth options: {', '.join(sorted(unknown))}")
        try:
            values = {k: int(v) if k in ints else float(v) for k, v in options.items()}
        except ValueError as e:
            raise ConfigError(f"bad synth option value: {e}") from e
        seed = values.pop('seed', seed)
        test_per_class = values.pop('test_per_class', None)
        b = values.pop('brightness', 0.2)
        values['brightness'] = (-b, b)
        train_set = synth_shapes(seed=seed, **values)
        test_values = dict(values, per_class=test_per_class or max(1, values.get('per_class', 100) // 2))
        return train_set, synth_shapes(seed=seed + 1, **test_values)
    if kind == 'norb':
        return load_small_norb_dir(options['dir'], 'training'), load_small_norb_dir(options['dir'], 'testing')
    if not Path(options['path']).exists():
        raise ConfigError(f"data source not found: {source}")
    return load_dataset(options['path']), None


def write_history_csv(history: pd.DataFrame, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    history.to_csv(path, index=False)
    logger.info(f"History written to {path}")
