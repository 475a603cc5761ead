"""
CTR Model Module (model.py)

Embedding layer feeding an MLP with a sigmoid output and log loss, written
out by hand in numpy: forward pass, exact backward pass (including the
gradient with respect to every looked-up embedding vector), plain SGD and
AUC / logloss evaluation.

Embeddings of all fields are concatenated into the MLP input. They live in an
EmbeddingStore, so SGD reads rows dequantized, applies the update in full
precision and writes them back through the store's quantize-on-write path.
Pruned fields have their table dropped and their slice of the first layer's
input columns held at zero.
"""

import copy
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.metrics import roc_auc_score

from dataset import Dataset, batches
from errors import ConfigurationError, DataIOError, FormatError, RowLookupError, ShapeError, UndefinedMetricError, ValidationError
from priority import count_batch_access
from quantizer import RoundingMode, ScalePolicy
from store import EmbeddingStore

# Configure logging
logger = logging.getLogger(__name__)
if not logger.handlers:
    handler = logging.StreamHandler()
    formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(module)s - %(message)s')
    handler.setFormatter(formatter)
    logger.addHandler(handler)
    logger.setLevel(os.environ.get("LOG_LEVEL", "INFO").upper())
    logger.propagate = False

EVAL_BATCH_SIZE = 4096


@dataclass
class ModelConfig:
    embedding_dim: int = 16
    hidden_dims: List[int] = field(default_factory=lambda: [256, 128])
    learning_rate: float = 0.01
    # None: every MLP layer uses 1/sqrt(fan_in); embeddings use 1/sqrt(embedding_dim)
    init_scale: Optional[float] = None
    seed: int = 0

    def validate(self) -> "ModelConfig":
        if self.embedding_dim < 1:
            raise ConfigurationError(f"embedding_dim must be >= 1, got {self.embedding_dim}")
        if any(h < 1 for h in self.hidden_dims):
            raise ConfigurationError(f"hidden_dims must all be >= 1, got {self.hidden_dims}")
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.init_scale is not None and self.init_scale < 0:
            raise ConfigurationError("init_scale must be non-negative")
        return self


@dataclass
class ForwardCache:
    field_values: Optional[np.ndarray]
    inputs: np.ndarray
    pre_activations: List[np.ndarray]
    activations: List[np.ndarray]
    logits: np.ndarray
    predictions: np.ndarray


@dataclass
class GradientBundle:
    field_values: Optional[np.ndarray]
    embedding: np.ndarray          # (batch, fields, dim): d mean-loss / d e_i per sample
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    output_delta: np.ndarray       # p - y per sample


@dataclass
class TrainLog:
    epochs: int = 0
    batches: int = 0
    epoch_losses: List[float] = field(default_factory=list)
    migrations: int = 0
    wall_time_s: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class ModelState:
    """MLP parameters plus the embedding store; `active` marks fields that were not pruned."""

    def __init__(self, config: ModelConfig, cardinalities: Sequence[int], store: EmbeddingStore,
                 weights: List[np.ndarray], biases: List[np.ndarray], active: Optional[np.ndarray] = None):
        self.config = config
        self.cardinalities = [int(c) for c in cardinalities]
        self.store = store
        self.weights = weights
        self.biases = biases
        self.active = np.ones(len(self.cardinalities), dtype=bool) if active is None else np.asarray(active, dtype=bool)
        expected_in = self.n_fields * config.embedding_dim
        if weights[0].shape[0] != expected_in:
            raise ShapeError(f"First layer expects {weights[0].shape[0]} inputs, model has {expected_in}")

    @classmethod
    def initialize(cls, config: ModelConfig, cardinalities: Sequence[int],
                   t8: float = 0.0, t16: float = 0.0,
                   policy: ScalePolicy = ScalePolicy.SYMMETRIC,
                   rounding: Optional[RoundingMode] = None,
                   alpha: float = 2.0, beta: float = 0.99, decay_untouched: bool = False) -> "ModelState":
        """t8 = t16 = 0 keeps every row at FP32."""
        config.validate()
        rng = np.random.default_rng(config.seed)
        sizes = [len(cardinalities) * config.embedding_dim] + list(config.hidden_dims) + [1]
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = config.init_scale if config.init_scale is not None else 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        store = EmbeddingStore.create(cardinalities, config.embedding_dim, t8, t16, policy, rounding,
                                      init_scale=config.init_scale, seed=config.seed + 1,
                                      alpha=alpha, beta=beta, decay_untouched=decay_untouched)
        return cls(config, cardinalities, store, weights, biases)

    def __repr__(self) -> str:
        return (f"ModelState(fields={self.n_fields}, active={int(self.active.sum())}, "
                f"dim={self.config.embedding_dim}, layers={[w.shape for w in self.weights]})")

    @property
    def n_fields(self) -> int:
        return len(self.cardinalities)

    @property
    def field_ids(self) -> List[int]:
        return list(range(self.n_fields))

    @property
    def active_fields(self) -> List[int]:
        return [int(i) for i in np.flatnonzero(self.active)]

    def copy(self) -> "ModelState":
        return copy.deepcopy(self)

    def input_slice(self, field_id: int) -> slice:
        dim = self.config.embedding_dim
        return slice(field_id * dim, (field_id + 1) * dim)

    # --- Interface used by feature scoring ---
    def lookup_embeddings(self, field_values: np.ndarray) -> np.ndarray:
        field_values = np.asarray(field_values)
        if field_values.ndim != 2 or field_values.shape[1] != self.n_fields:
            raise ShapeError(f"Expected (batch, {self.n_fields}) field values, got {field_values.shape}")
        for i, card in enumerate(self.cardinalities):
            column = field_values[:, i]
            if len(column) and (column.min() < 0 or column.max() >= card):
                raise RowLookupError(f"Field {i} index outside table bounds [0, {card})")
        return self.store.lookup_fields(field_values, self.field_ids)

    def table_rows(self, field_id: int) -> np.ndarray:
        """Every row of a field's table, dequantized; zeros for a pruned field."""
        if field_id not in self.store.tables:
            return np.zeros((self.cardinalities[field_id], self.config.embedding_dim))
        return self.store.table(field_id).lookup_rows(np.arange(self.cardinalities[field_id]))

    def sample_losses(self, embeddings: np.ndarray, labels: np.ndarray) -> np.ndarray:
        _, cache = forward_embeddings(self, embeddings)
        return _log_loss_from_logits(cache.logits, np.asarray(labels, dtype=np.float64))

    def sample_loss_gradients(self, embeddings: np.ndarray, labels: np.ndarray) -> np.ndarray:
        """Per-sample d loss(x) / d e_i(x), shape (batch, fields, dim)."""
        _, cache = forward_embeddings(self, embeddings)
        delta = cache.predictions - np.asarray(labels, dtype=np.float64)
        return _backprop(self, cache, delta).embedding


# --- Forward / backward ---
def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def _log_loss_from_logits(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    # -[y log p + (1 - y) log(1 - p)] with p = sigmoid(z), written stably
    return np.logaddexp(0.0, logits) - labels * logits


def forward_embeddings(state: ModelState, embeddings: np.ndarray,
                       field_values: Optional[np.ndarray] = None) -> Tuple[np.ndarray, ForwardCache]:
    embeddings = np.asarray(embeddings, dtype=np.float64)
    x = embeddings.reshape(embeddings.shape[0], -1)
    if x.shape[1] != state.weights[0].shape[0]:
        raise ShapeError(f"MLP expects {state.weights[0].shape[0]} inputs, got {x.shape[1]}")
    pre_activations, activations = [], [x]
    a = x
    for w, b in zip(state.weights[:-1], state.biases[:-1]):
        z = a @ w + b
        a = np.maximum(z, 0.0)
        pre_activations.append(z)
        activations.append(a)
    logits = (a @ state.weights[-1] + state.biases[-1])[:, 0]
    predictions = _sigmoid(logits)
    return predictions, ForwardCache(field_values, x, pre_activations, activations, logits, predictions)


def forward(state: ModelState, batch: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
    """Predictions in (0, 1) for a (batch, fields) index matrix, plus the activations backward needs."""
    batch = np.asarray(batch)
    return forward_embeddings(state, state.lookup_embeddings(batch), field_values=batch)


def _backprop(state: ModelState, cache: ForwardCache, delta: np.ndarray) -> GradientBundle:
    """Propagate d loss / d logit (`delta`, one per sample) back through the MLP."""
    n_hidden = len(state.weights) - 1
    grad_w: List[np.ndarray] = [np.empty(0)] * len(state.weights)
    grad_b: List[np.ndarray] = [np.empty(0)] * len(state.weights)

    d = delta[:, None]
    grad_w[-1] = cache.activations[-1].T @ d
    grad_b[-1] = d.sum(axis=0)
    upstream = d @ state.weights[-1].T
    for layer in range(n_hidden - 1, -1, -1):
        d = upstream * (cache.pre_activations[layer] > 0)
        grad_w[layer] = cache.activations[layer].T @ d
        grad_b[layer] = d.sum(axis=0)
        upstream = d @ state.weights[layer].T

    for field_id in np.flatnonzero(~state.active):
        grad_w[0][state.input_slice(field_id)] = 0.0
    embedding = upstream.reshape(upstream.shape[0], state.n_fields, state.config.embedding_dim)
    return GradientBundle(cache.field_values, embedding, grad_w, grad_b, delta)


def backward(state: ModelState, batch: Optional[np.ndarray], labels: np.ndarray,
             cache: ForwardCache) -> Tuple[GradientBundle, float]:
    """Exact gradients of the batch-mean log loss, and that loss."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != cache.predictions.shape:
        raise ShapeError(f"{len(labels)} labels for a batch of {len(cache.predictions)} predictions")
    n = len(labels)
    loss = float(_log_loss_from_logits(cache.logits, labels).mean())
    bundle = _backprop(state, cache, (cache.predictions - labels) / n)
    bundle.output_delta = cache.predictions - labels
    bundle.field_values = batch if batch is not None else cache.field_values
    return bundle, loss


def sgd_step(state: ModelState, grads: GradientBundle, learning_rate: float) -> ModelState:
    """w <- w - lr * g for the MLP; embedding rows go through the store's quantize-on-write path."""
    if learning_rate == 0:
        return state
    for w, gw in zip(state.weights, grads.weights):
        w -= learning_rate * gw
    for b, gb in zip(state.biases, grads.biases):
        b -= learning_rate * gb
    for field_id in np.flatnonzero(~state.active):
        state.weights[0][state.input_slice(field_id)] = 0.0
    if grads.field_values is not None:
        state.store.apply_gradients(grads.field_values, grads.embedding, learning_rate, state.field_ids)
    return state


# --- Metrics ---
def auc_score(labels: np.ndarray, scores: np.ndarray) -> float:
    """ROC AUC; tied scores count one half."""
    labels = np.asarray(labels)
    n_pos = int(np.count_nonzero(labels == 1))
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC is undefined when only one class is present")
    return float(roc_auc_score(labels, scores))


def predict_logits(state: ModelState, dataset: Dataset, batch_size: int = EVAL_BATCH_SIZE) -> np.ndarray:
    out = np.empty(len(dataset))
    for start in range(0, len(dataset), batch_size):
        _, cache = forward(state, dataset.field_values[start:start + batch_size])
        out[start:start + batch_size] = cache.logits
    return out


def evaluate(state: ModelState, dataset: Dataset) -> Dict[str, float]:
    if len(dataset) == 0:
        raise ValidationError("Cannot evaluate on an empty dataset")
    logits = predict_logits(state, dataset)
    labels = dataset.labels.astype(np.float64)
    logloss = float(_log_loss_from_logits(logits, labels).mean())
    try:
        auc = auc_score(labels, logits)
    except UndefinedMetricError as e:
        raise UndefinedMetricError(str(e), logloss=logloss) from e
    return {"auc": auc, "logloss": logloss}


# --- Training ---
def fit(state: ModelState, dataset: Dataset, epochs: int = 1, batch_size: int = 512, seed: int = 0,
        learning_rate: Optional[float] = None, track_priority: bool = False, retier_every: int = 100,
        on_batch: Optional[Callable[[int, float], None]] = None) -> TrainLog:
    """Mini-batch SGD. With `track_priority`, every batch updates row priorities and the
    store re-tiers every `retier_every` batches and once more at the end."""
    lr = state.config.learning_rate if learning_rate is None else learning_rate
    if retier_every < 1:
        raise ConfigurationError(f"retier_every must be >= 1, got {retier_every}")
    log = TrainLog()
    started = time.time()
    for epoch in range(epochs):
        losses = []
        for batch in batches(dataset, batch_size, seed + epoch):
            _, cache = forward(state, batch.field_values)
            grads, loss = backward(state, batch.field_values, batch.labels, cache)
            if track_priority:
                access = count_batch_access(batch.field_values, batch.labels, sorted(state.store.tables))
                state.store.tracker.update_batch(access)
            sgd_step(state, grads, lr)
            losses.append(loss * len(batch))
            log.batches += 1
            if track_priority and log.batches % retier_every == 0:
                log.migrations += state.store.retier_all()
            if on_batch is not None:
                on_batch(log.batches, loss)
        log.epochs += 1
        log.epoch_losses.append(float(np.sum(losses) / max(len(dataset), 1)))
        logger.info(f"Epoch {epoch + 1}/{epochs}: mean loss {log.epoch_losses[-1]:.5f}")
    if track_priority:
        log.migrations += state.store.retier_all()
    log.wall_time_s = time.time() - started
    return log


# --- Pruning surgery ---
def prune_fields(state: ModelState, field_ids: Sequence[int]) -> ModelState:
    """Drop the fields' tables and pin their first-layer input columns to zero."""
    for field_id in field_ids:
        if not state.active[field_id]:
            raise ValidationError(f"Field {field_id} is already pruned")
        state.active[field_id] = False
        if field_id in state.store.tables:
            state.store.drop_table(field_id)
        state.weights[0][state.input_slice(field_id)] = 0.0
    return state


# --- Checkpoints ---
def store_path_for(checkpoint_path: str) -> str:
    root, _ = os.path.splitext(checkpoint_path)
    return root + ".shrk"


def save_checkpoint(state: ModelState, path: str) -> str:
    """Write `<path>` (.npz: config header, field mask, MLP tensors) and its companion store file."""
    store_file = store_path_for(path)
    header = {
        "model_config": asdict(state.config),
        "cardinalities": state.cardinalities,
        "store_file": os.path.basename(store_file),
        "scale_policy": state.store.policy.value,
        "n_layers": len(state.weights),
    }
    arrays = {"header": np.array(json.dumps(header)), "active": state.active}
    for i, (w, b) in enumerate(zip(state.weights, state.biases)):
        arrays[f"weight_{i}"] = w
        arrays[f"bias_{i}"] = b
    try:
        with open(path, "wb") as f:
            np.savez(f, **arrays)
    except OSError as e:
        raise DataIOError(f"Could not write checkpoint '{path}': {e}") from e
    state.store.save(store_file)
    logger.info(f"Saved checkpoint {path} (store: {store_file})")
    return store_file


def load_checkpoint(path: str) -> ModelState:
    try:
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["header"]))
            active = data["active"].copy()
            weights = [data[f"weight_{i}"].copy() for i in range(header["n_layers"])]
            biases = [data[f"bias_{i}"].copy() for i in range(header["n_layers"])]
    except FileNotFoundError as e:
        raise DataIOError(f"Checkpoint '{path}' not found") from e
    except (KeyError, ValueError, OSError) as e:
        raise FormatError(f"Checkpoint '{path}' is malformed: {e}") from e

    config = ModelConfig(**header["model_config"])
    store = EmbeddingStore.load(os.path.join(os.path.dirname(path), header["store_file"]))
    store.policy = ScalePolicy(header.get("scale_policy", ScalePolicy.SYMMETRIC.value))
    for table in store.tables.values():
        table.policy = store.policy
    return ModelState(config, header["cardinalities"], store, weights, biases, active)
