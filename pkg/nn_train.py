"""
Desk-scale trainer
Models assembled from a ModelSpec, SGD with momentum / weight decay / step
schedule, evaluation, and the illumination-invariance protocol.
"""
import logging
from dataclasses import dataclass, replace
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from data_io import Dataset, augment
from errors import ConfigError, DivergenceError, EmptyDatasetError, ShapeError, UnsupportedLayerError
from layers import Layer, build_layer, softmax_cross_entropy
from model_spec import ModelSpec, preset_spec
from tensor_core import make_rng

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ['epoch', 'train_loss', 'train_acc', 'test_loss', 'test_acc']
LIGHTING_REGIMES = {0: 'standard', 1: 'standard', 2: 'dark', 3: 'bright', 4: 'dark', 5: 'bright'}
REGIMES = ('dark', 'standard', 'bright')


class Model:
    """A ModelSpec plus parameter and state stores keyed '<layer>.<name>'"""

    def __init__(self, spec: ModelSpec, params: Dict[str, np.ndarray],
                 state: Optional[Dict[str, np.ndarray]] = None, dtype=None):
        groups = [layer.name for layer in spec.layers if layer.kind == 'residual-group']
        if groups:
            raise UnsupportedLayerError(groups, "residual groups are accounting-only")
        spec.validate()
        if dtype is None:
            dtype = next(iter(params.values())).dtype if params else np.float32
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.layers: List[Layer] = [build_layer(layer, self.dtype) for layer in spec.layers]
        self.params = dict(params)
        self.state = dict(state or {})
        self._check_store(self.params, 'param_shapes')
        self._check_store(self.state, 'state_shapes')

    def _check_store(self, store: Dict[str, np.ndarray], shapes_of: str):
        expected = {}
        for layer in self.layers:
            for name, shape in getattr(layer, shapes_of)().items():
                expected[f"{layer.name}.{name}"] = shape
        missing = sorted(set(expected) - set(store))
        extra = sorted(set(store) - set(expected))
        if missing or extra:
            raise ShapeError(f"model '{self.spec.name}' store mismatch: missing {missing}, unexpected {extra}")
        for key, shape in expected.items():
            if store[key].shape != tuple(shape):
                raise ShapeError(f"parameter '{key}'", expected=shape, got=store[key].shape)

    @classmethod
    def initialize(cls, spec: ModelSpec, seed: Union[int, np.random.Generator] = 0, dtype=np.float32) -> 'Model':
        rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
        params, state = {}, {}
        for layer_spec in spec.layers:
            layer = build_layer(layer_spec, dtype)
            p, s = layer.init(rng)
            params.update({f"{layer.name}.{k}": v for k, v in p.items()})
            state.update({f"{layer.name}.{k}": v for k, v in s.items()})
        return cls(spec, params, state, dtype)

    def copy(self) -> 'Model':
        return Model(self.spec, {k: v.copy() for k, v in self.params.items()},
                     {k: v.copy() for k, v in self.state.items()}, self.dtype)

    def with_dropout(self, p: float) -> 'Model':
        layers = [replace(layer, p=p) if layer.kind == 'dropout' else layer for layer in self.spec.layers]
        spec = ModelSpec(self.spec.name, self.spec.input_channels, self.spec.input_res, self.spec.classes, layers)
        return Model(spec, self.params, self.state, self.dtype)

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def _local(self, store: Dict[str, np.ndarray], layer: Layer) -> Dict[str, np.ndarray]:
        prefix = f"{layer.name}."
        return {k[len(prefix):]: v for k, v in store.items() if k.startswith(prefix)}

    def _run(self, x: np.ndarray, train: bool, rng: Optional[np.random.Generator]):
        x = np.asarray(x, dtype=self.dtype)
        expected = (self.spec.input_channels, *self.spec.input_res)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeError(f"model '{self.spec.name}' input", expected=('B', *expected), got=x.shape)
        caches, updates = [], {}
        for layer in self.layers:
            x, cache, upd = layer.forward(x, self._local(self.params, layer), self._local(self.state, layer), train, rng)
            caches.append(cache)
            updates.update({f"{layer.name}.{k}": v for k, v in upd.items()})
        return x.reshape(x.shape[0], -1), caches, updates

    def forward(self, x: np.ndarray, train: bool = False, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Logits B x classes; never mutates the model"""
        return self._run(x, train, rng)[0]

    def loss_and_grads(self, x: np.ndarray, labels: np.ndarray, rng: Optional[np.random.Generator] = None):
        """
        Train-mode forward and backward pass.

        Returns:
            (loss, grads keyed like params, logits, state updates)
        """
        logits, caches, updates = self._run(x, True, rng)
        loss, dy = softmax_cross_entropy(logits, labels)
        dy = dy.reshape(dy.shape[0], -1, 1, 1)
        grads: Dict[str, np.ndarray] = {}
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            dy, g = layer.backward(dy, self._local(self.params, layer), self._local(self.state, layer), cache)
            grads.update({f"{layer.name}.{k}": v for k, v in g.items()})
        return loss, grads, logits, updates

    def decayed_keys(self) -> set:
        return {f"{layer.name}.{name}" for layer in self.layers for name in layer.decayed
                if f"{layer.name}.{name}" in self.params}


def build_preset(name: str, scale: float = 1.0, input_channels: int = 2, classes: int = 5,
                 seed: int = 0, dtype=np.float32, spec: Optional[ModelSpec] = None, **options) -> Model:
    """
    Initialized model for a named preset, or for `spec` when name is 'custom'.

    Weights are Gaussian with variance 2 / fan-in, biases zero.
    """
    if name == 'custom':
        if spec is None:
            raise ConfigError("the custom preset needs a model spec")
    else:
        spec = preset_spec(name, scale=scale, input_channels=input_channels, classes=classes, **options)
    model = Model.initialize(spec, seed, dtype)
    logger.info(f"Built '{spec.name}' with {model.parameter_count():,} parameters")
    return model


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    epochs: int = 30
    lr_decay: float = 0.1
    lr_steps: Tuple[int, ...] = ()
    dropout: Optional[float] = None
    seed: int = 0
    # augmentation; magnitudes are free parameters
    pad_crop: int = 0
    flip: bool = False
    brightness: float = 0.0
    contrast: float = 0.0
    augment_dark_only: bool = False
    dark_threshold: float = 0.3
    verbose: bool = True

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0 or self.lr_decay <= 0:
            raise ConfigError("learning rate, weight decay and decay factor must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch size and epochs must be >= 1")
        if self.dropout is not None and not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    def lr_at(self, epoch: int) -> float:
        """Step schedule: decay once for every step epoch already completed"""
        return self.lr * self.lr_decay ** sum(1 for step in self.lr_steps if epoch > step)

    @property
    def augments(self) -> bool:
        return bool(self.pad_crop or self.flip or self.brightness or self.contrast)


class SGD:
    """v = momentum * v + lr * (g + wd * w); w -= v. Decay only touches weight tensors."""

    def __init__(self, momentum: float, weight_decay: float, decayed: set):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.decayed = decayed
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float):
        for key, grad in grads.items():
            w = params[key]
            if self.weight_decay and key in self.decayed:
                grad = grad + self.weight_decay * w
            step = lr * grad
            if key in self.velocity:
                step = self.momentum * self.velocity[key] + step
            self.velocity[key] = step.astype(w.dtype, copy=False)
            params[key] = (w - self.velocity[key]).astype(w.dtype, copy=False)


class EvalResult(NamedTuple):
    accuracy: float
    loss: float
    confusion: np.ndarray
    predictions: np.ndarray


def evaluate(model: Model, dataset: Dataset, batch_size: int = 256) -> EvalResult:
    """Eval-mode accuracy, mean loss and a classes x classes confusion matrix (rows are true labels)"""
    if len(dataset) == 0:
        raise EmptyDatasetError(f"cannot evaluate on an empty dataset '{dataset.name}'")
    classes = model.spec.classes
    predictions = np.empty(len(dataset), dtype=np.int64)
    total_loss = 0.0
    for start in range(0, len(dataset), batch_size):
        stop = min(start + batch_size, len(dataset))
        logits = model.forward(dataset.images[start:stop])
        loss, _ = softmax_cross_entropy(logits, dataset.labels[start:stop])
        total_loss += loss * (stop - start)
        predictions[start:stop] = logits.argmax(axis=1)
    confusion = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(confusion, (dataset.labels.astype(np.int64), predictions), 1)
    accuracy = float(np.mean(predictions == dataset.labels))
    return EvalResult(accuracy, total_loss / len(dataset), confusion, predictions)


def train(model: Model, dataset: Dataset, cfg: TrainConfig,
          test_dataset: Optional[Dataset] = None) -> Tuple[pd.DataFrame, Model]:
    """
    Train a copy of `model`; the input model is left untouched.

    Returns:
        (history with one row per epoch, trained model)
    """
    if len(dataset) == 0:
        raise EmptyDatasetError(f"cannot train on an empty dataset '{dataset.name}'")
    if dataset.labels.max() >= model.spec.classes:
        raise ConfigError(f"dataset labels exceed the model's {model.spec.classes} classes")
    model = model.copy() if cfg.dropout is None else model.copy().with_dropout(cfg.dropout)
    rng = make_rng(cfg.seed)
    optimizer = SGD(cfg.momentum, cfg.weight_decay, model.decayed_keys())
    rows = []

    epochs = tqdm(range(1, cfg.epochs + 1), desc=f"train {model.spec.name}", disable=not cfg.verbose)
    for epoch in epochs:
        lr = cfg.lr_at(epoch)
        order = rng.permutation(len(dataset))
        seen, loss_sum, correct = 0, 0.0, 0
        for start in range(0, len(dataset), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            images, labels = dataset.images[idx], dataset.labels[idx]
            if cfg.augments:
                photometric = None
                if cfg.augment_dark_only:
                    photometric = images.mean(axis=(1, 2, 3)) < cfg.dark_threshold
                images = augment(images, pad_crop=cfg.pad_crop, flip=cfg.flip, brightness=cfg.brightness,
                                 contrast=cfg.contrast, rng=rng, photometric_mask=photometric)
            loss, grads, logits, updates = model.loss_and_grads(images, labels, rng)
            if not np.isfinite(loss):
                raise DivergenceError(epoch, loss)
            model.state.update(updates)
            optimizer.step(model.params, grads, lr)
            seen += len(idx)
            loss_sum += loss * len(idx)
            correct += int(np.sum(logits.argmax(axis=1) == labels))

        row = {'epoch': epoch, 'train_loss': loss_sum / seen, 'train_acc': correct / seen,
               'test_loss': np.nan, 'test_acc': np.nan}
        if test_dataset is not None:
            result = evaluate(model, test_dataset)
            row['test_loss'], row['test_acc'] = result.loss, result.accuracy
        rows.append(row)
        logger.info(f"epoch {epoch}: loss {row['train_loss']:.4f} acc {row['train_acc']:.3f} "
                    f"test_acc {row['test_acc']:.3f} lr {lr:g}")

    return pd.DataFrame(rows, columns=HISTORY_COLUMNS), model


def epochs_to_threshold(history: pd.DataFrame, threshold: float, column: str = 'test_acc') -> Optional[int]:
    """First epoch whose `column` reaches the threshold, None when it never does"""
    hits = history.loc[history[column] >= threshold, 'epoch']
    return int(hits.iloc[0]) if len(hits) else None


def regime_labels(dataset: Dataset, rule: str = 'brightness') -> np.ndarray:
    """
    dark / standard / bright per sample.

    'brightness' splits the synthetic brightness attribute into terciles;
    'lighting' maps NORB lighting conditions (bright 3,5; dark 2,4; standard 0,1).
    """
    if rule == 'brightness':
        if 'brightness' not in dataset.attributes:
            raise ConfigError("brightness split needs a 'brightness' attribute")
        b = dataset.attributes['brightness']
        low, high = np.quantile(b, [1 / 3, 2 / 3])
        return np.where(b < low, 'dark', np.where(b >= high, 'bright', 'standard'))
    if rule == 'lighting':
        if 'lighting' not in dataset.attributes:
            raise ConfigError("lighting split needs a 'lighting' attribute")
        return np.array([LIGHTING_REGIMES[int(v)] for v in dataset.attributes['lighting']])
    raise ConfigError(f"unknown split rule '{rule}' (expected brightness or lighting)")


VARIANTS: Dict[str, Tuple[str, dict]] = {
    'cnn': ('cnn2', {}),
    'harmonic': ('harmnet2', {}),
    'harmonic-nodc': ('harmnet2', {'drop_dc': True}),
}


def illumination_protocol(dataset: Dataset, cfg: TrainConfig, rule: str = 'brightness',
                          train_regime: str = 'dark', variants: Sequence[str] = tuple(VARIANTS),
                          scale: float = 0.25, test_dataset: Optional[Dataset] = None,
                          dtype=np.float32) -> pd.DataFrame:
    """
    Train each variant on one illumination regime and test on the others.

    Held-out samples come from `test_dataset` when given, otherwise from the
    remaining regimes of `dataset`.

    Returns:
        one row per (variant, test regime) plus an 'unseen' row pooling all
        held-out regimes
    """
    if train_regime not in REGIMES:
        raise ConfigError(f"unknown regime '{train_regime}'")
    train_regimes = regime_labels(dataset, rule)
    train_set = dataset.subset(np.flatnonzero(train_regimes == train_regime))
    held_source = test_dataset if test_dataset is not None else dataset
    held_regimes = regime_labels(held_source, rule)
    if len(train_set) == 0:
        raise EmptyDatasetError(f"regime '{train_regime}' has no training samples")

    held_out = {}
    for regime in REGIMES:
        if regime == train_regime:
            continue
        idx = np.flatnonzero(held_regimes == regime)
        if len(idx):
            held_out[regime] = held_source.subset(idx)
    if not held_out:
        raise EmptyDatasetError("no held-out regime has samples")
    unseen = held_source.subset(np.flatnonzero(held_regimes != train_regime))

    rows = []
    _, channels, height, _ = dataset.images.shape
    for variant in variants:
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant '{variant}' (expected one of {', '.join(VARIANTS)})")
        preset, options = VARIANTS[variant]
        model = build_preset(preset, scale=scale, input_channels=channels, classes=dataset.classes,
                             image_size=height, seed=cfg.seed, dtype=dtype, **options)
        _, trained = train(model, train_set, cfg)
        for regime, held in [*held_out.items(), ('unseen', unseen)]:
            result = evaluate(trained, held)
            rows.append({'variant': variant, 'train_regime': train_regime, 'test_regime': regime,
                         'test_error': 1.0 - result.accuracy, 'samples': len(held), 'seed': cfg.seed})
        logger.info(f"{variant}: unseen-regime error {rows[-1]['test_error']:.3f}")
    return pd.DataFrame(rows)
