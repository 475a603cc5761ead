"""
Feature Selection Module (selection.py)

Table-wise importance scores and the iterative prune loop.

The importance of field i is the loss increase expected when its embedding is
replaced by one drawn from the data distribution. `permutation_error_exact`
enumerates every alternative category, `permutation_error_shuffle` estimates
it by shuffling the field inside batches, and `taylor_scores` approximates it
for all fields at once with a first-order expansion around each looked-up
embedding:

    w_i = mean_x  dloss/de_i(x) . (E[e_i] - e_i(x))

That costs one pass to average the embeddings and one forward/backward pass,
regardless of the number of fields.
"""

import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Protocol, Sequence, Set, Tuple

import numpy as np
from scipy.stats import spearmanr

from dataset import Dataset, EmpiricalDistribution, empirical_distribution
from errors import ConfigurationError, OracleRefusalError, ValidationError
from model import ModelState, evaluate, fit, prune_fields

# Configure logging
logger = logging.getLogger(__name__)
if not logger.handlers:
    handler = logging.StreamHandler()
    formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(module)s - %(message)s')
    handler.setFormatter(formatter)
    logger.addHandler(handler)
    logger.setLevel(os.environ.get("LOG_LEVEL", "INFO").upper())
    logger.propagate = False

EXACT_ORACLE_MAX_CARDINALITY = 256
SCORING_BATCH_SIZE = 4096

STATUS_TARGET_REACHED = "TARGET_REACHED"
STATUS_METRIC_FLOOR = "METRIC_FLOOR"
STATUS_EXHAUSTED = "EXHAUSTED"


class ScorableModel(Protocol):
    """What scoring needs from a model: embedding lookup and per-sample loss / gradients."""
    cardinalities: List[int]

    @property
    def active_fields(self) -> List[int]: ...

    def lookup_embeddings(self, field_values: np.ndarray) -> np.ndarray: ...

    def table_rows(self, field_id: int) -> np.ndarray: ...

    def sample_losses(self, embeddings: np.ndarray, labels: np.ndarray) -> np.ndarray: ...

    def sample_loss_gradients(self, embeddings: np.ndarray, labels: np.ndarray) -> np.ndarray: ...


@dataclass
class PassCounter:
    """Counts full passes over the scoring data and the sample visits they cost."""
    expectation_passes: int = 0
    forward_passes: int = 0
    backward_passes: int = 0
    sample_visits: int = 0

    @property
    def total_passes(self) -> int:
        return self.expectation_passes + self.forward_passes + self.backward_passes

    def to_dict(self) -> Dict[str, int]:
        data = asdict(self)
        data["total_passes"] = self.total_passes
        return data


@dataclass
class FieldExpectation:
    """Mean looked-up embedding per field over a dataset, shape (fields, dim)."""
    means: np.ndarray

    def __getitem__(self, field_id: int) -> np.ndarray:
        return self.means[field_id]


@dataclass
class TableScoreList:
    scores: List[Tuple[int, float]]
    active_fields: Set[int]

    def as_dict(self) -> Dict[int, float]:
        return {f: s for f, s in self.scores}

    def score_of(self, field_id: int) -> float:
        return self.as_dict()[field_id]

    def ranked(self) -> List[Tuple[int, float]]:
        """Lowest score first; equal scores by lowest field index."""
        return sorted(self.scores, key=lambda item: (item[1], item[0]))

    def lowest(self, f: int) -> List[int]:
        return [field_id for field_id, _ in self.ranked()[:f]]

    def to_dict(self) -> Dict[str, Any]:
        return {"scores": {str(f): s for f, s in self.scores}, "ranked": [f for f, _ in self.ranked()]}


@dataclass
class PruneConfig:
    f: int = 1
    rate_c: float = 0.5
    # fraction of the baseline AUC the model must keep; 0.9985 allows a 0.15% drop
    t_accuracy: float = 0.9985
    support_fraction: float = 0.1
    finetune_epochs: int = 1
    batch_size: int = 512
    learning_rate: Optional[float] = None
    expectation_source: str = "test"
    seed: int = 0

    def validate(self, n_active: Optional[int] = None) -> "PruneConfig":
        if self.f < 1:
            raise ConfigurationError(f"f must be >= 1, got {self.f}")
        if not 0 < self.rate_c <= 1:
            raise ConfigurationError(f"rate_c must lie in (0, 1], got {self.rate_c}")
        if not 0 < self.t_accuracy <= 1:
            raise ConfigurationError(f"t_accuracy must lie in (0, 1], got {self.t_accuracy}")
        if not 0 < self.support_fraction <= 1:
            raise ConfigurationError(f"support_fraction must lie in (0, 1], got {self.support_fraction}")
        if self.finetune_epochs < 0:
            raise ConfigurationError("finetune_epochs must be non-negative")
        if self.expectation_source not in ("test", "train"):
            raise ConfigurationError(f"expectation_source must be 'test' or 'train', got '{self.expectation_source}'")
        if n_active is not None and n_active < 1:
            raise ConfigurationError("No active fields left to prune")
        return self


@dataclass
class PruneIteration:
    iteration: int
    scores: Dict[int, float]
    deleted_fields: List[int]
    auc: float
    logloss: float
    memory_ratio: float
    above_floor: bool

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["scores"] = {str(k): v for k, v in self.scores.items()}
        return data


@dataclass
class PruneResult:
    state: ModelState
    status: str
    baseline_auc: float
    baseline_logloss: float
    log: List[PruneIteration] = field(default_factory=list)

    @property
    def deleted_fields(self) -> List[int]:
        """Deletions that were kept (a floor-breaching iteration is rolled back)."""
        return [f for it in self.log if it.above_floor for f in it.deleted_fields]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "status": self.status,
            "baseline_auc": self.baseline_auc,
            "baseline_logloss": self.baseline_logloss,
            "deleted_fields": self.deleted_fields,
            "active_fields": self.state.active_fields,
            "iterations": [it.to_dict() for it in self.log],
        }


def _chunks(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield slice(start, min(start + batch_size, n))


# --- Taylor scores ---
def field_expectation(model: ScorableModel, dataset: Dataset, batch_size: int = SCORING_BATCH_SIZE,
                      counter: Optional[PassCounter] = None) -> FieldExpectation:
    """Sum of looked-up embeddings over the dataset divided by its size."""
    if len(dataset) == 0:
        raise ValidationError("Cannot compute embedding expectations over an empty dataset")
    total = None
    for rows in _chunks(len(dataset), batch_size):
        partial = model.lookup_embeddings(dataset.field_values[rows]).sum(axis=0)
        total = partial if total is None else total + partial
    if counter is not None:
        counter.expectation_passes += 1
        counter.sample_visits += len(dataset)
    return FieldExpectation(total / len(dataset))


def taylor_scores(model: ScorableModel, dataset: Dataset, batch_size: int = SCORING_BATCH_SIZE,
                  counter: Optional[PassCounter] = None) -> TableScoreList:
    if len(dataset) == 0:
        raise ValidationError("Cannot score fields on an empty dataset")
    expectation = field_expectation(model, dataset, batch_size, counter)
    active = model.active_fields

    totals = np.zeros(expectation.means.shape[0])
    for rows in _chunks(len(dataset), batch_size):
        embeddings = model.lookup_embeddings(dataset.field_values[rows])
        grads = model.sample_loss_gradients(embeddings, dataset.labels[rows])
        totals += np.einsum("bnd,bnd->n", grads, expectation.means[None, :, :] - embeddings)
    if counter is not None:
        counter.forward_passes += 1
        counter.backward_passes += 1
        counter.sample_visits += 2 * len(dataset)

    scores = [(int(f), float(totals[f] / len(dataset))) for f in active]
    logger.debug(f"Taylor scores: {scores}")
    return TableScoreList(scores, set(active))


# --- Permutation oracles ---
def permutation_error_exact(model: ScorableModel, dataset: Dataset, field_i: int,
                            distribution: Optional[EmpiricalDistribution] = None,
                            max_cardinality: int = EXACT_ORACLE_MAX_CARDINALITY) -> float:
    """mean_x [ sum_v' p(v') loss(x with e_i <- row v') - loss(x) ], by full enumeration."""
    if len(dataset) == 0:
        raise ValidationError("Cannot compute a permutation error on an empty dataset")
    cardinality = model.cardinalities[field_i]
    if cardinality > max_cardinality:
        raise OracleRefusalError(
            f"Field {field_i} has cardinality {cardinality} > {max_cardinality}; use the shuffle estimate")
    p = (distribution or empirical_distribution(dataset))[field_i]
    table = model.table_rows(field_i)

    total = 0.0
    for rows in _chunks(len(dataset), SCORING_BATCH_SIZE):
        embeddings = model.lookup_embeddings(dataset.field_values[rows])
        labels = dataset.labels[rows]
        base = model.sample_losses(embeddings, labels)
        substituted = np.zeros_like(base)
        for value in np.flatnonzero(p > 0):
            replaced = embeddings.copy()
            replaced[:, field_i] = table[value]
            substituted += p[value] * model.sample_losses(replaced, labels)
        total += float((substituted - base).sum())
    return total / len(dataset)


def permutation_error_shuffle_samples(model: ScorableModel, dataset: Dataset, field_i: int, T: int,
                                      seed: int, batch_size: int = SCORING_BATCH_SIZE) -> np.ndarray:
    """One estimate per shuffle round: mean loss change after permuting field i within each batch."""
    if T < 1:
        raise ConfigurationError(f"T must be >= 1, got {T}")
    if len(dataset) == 0:
        raise ValidationError("Cannot compute a permutation error on an empty dataset")
    rng = np.random.default_rng(seed)
    estimates = np.zeros(T)
    for rows in _chunks(len(dataset), batch_size):
        embeddings = model.lookup_embeddings(dataset.field_values[rows])
        labels = dataset.labels[rows]
        base = model.sample_losses(embeddings, labels)
        for t in range(T):
            shuffled = embeddings.copy()
            shuffled[:, field_i] = embeddings[rng.permutation(len(labels)), field_i]
            estimates[t] += float((model.sample_losses(shuffled, labels) - base).sum())
    return estimates / len(dataset)


def permutation_error_shuffle(model: ScorableModel, dataset: Dataset, field_i: int, T: int, seed: int,
                              batch_size: int = SCORING_BATCH_SIZE) -> float:
    return float(permutation_error_shuffle_samples(model, dataset, field_i, T, seed, batch_size).mean())


def spearman(a: Sequence[float], b: Sequence[float]) -> float:
    """Rank correlation; NaN when either side is constant."""
    if len(a) != len(b):
        raise ValidationError("Rank correlation needs two sequences of equal length")
    if len(a) < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return float("nan")
    return float(spearmanr(a, b).correlation)


# --- Prune loop ---
def memory_ratio(state: ModelState) -> float:
    """Embedding payload left, relative to the unpruned FP32 tables."""
    return state.store.memory_report().payload_ratio


def sample_support(train: Dataset, fraction: float, rng: np.random.Generator) -> Dataset:
    size = max(1, int(round(len(train) * fraction)))
    return train.subset(np.sort(rng.choice(len(train), size=size, replace=False)))


def prune_loop(state: ModelState, train: Dataset, test: Dataset, config: PruneConfig,
               counter: Optional[PassCounter] = None,
               on_iteration: Optional[Callable[[PruneIteration, ModelState], None]] = None) -> PruneResult:
    """Score, delete the f lowest tables, fine-tune on a support sample, evaluate; repeat.

    Stops once the memory ratio is at most rate_c, when fewer than f fields remain,
    or when AUC drops below t_accuracy * baseline. In the last case the breaching
    deletion is discarded and the returned model is the last one above the floor.
    """
    config.validate(len(state.active_fields))
    baseline = evaluate(state, test)
    floor = config.t_accuracy * baseline["auc"]
    scoring_data = test if config.expectation_source == "test" else train
    rng = np.random.default_rng(config.seed)
    logger.info(f"Prune loop: baseline AUC {baseline['auc']:.5f}, floor {floor:.5f}, "
                f"target memory ratio {config.rate_c}")

    current = state
    result = PruneResult(current, STATUS_TARGET_REACHED, baseline["auc"], baseline["logloss"])
    iteration = 0
    while True:
        ratio = memory_ratio(current)
        if ratio <= config.rate_c:
            result.status = STATUS_TARGET_REACHED
            break
        if config.f > len(current.active_fields):
            result.status = STATUS_EXHAUSTED
            break

        iteration += 1
        scores = taylor_scores(current, scoring_data, counter=counter)
        deleted = scores.lowest(config.f)
        candidate = prune_fields(current.copy(), deleted)
        if config.finetune_epochs:
            support = sample_support(train, config.support_fraction, rng)
            fit(candidate, support, epochs=config.finetune_epochs, batch_size=config.batch_size,
                seed=config.seed + iteration, learning_rate=config.learning_rate)
        metrics = evaluate(candidate, test)
        above = metrics["auc"] >= floor
        result.log.append(PruneIteration(iteration, scores.as_dict(), deleted, metrics["auc"],
                                         metrics["logloss"], memory_ratio(candidate), above))
        logger.info(f"Iteration {iteration}: deleted {deleted}, AUC {metrics['auc']:.5f}, "
                    f"memory ratio {result.log[-1].memory_ratio:.3f}")
        if not above:
            result.status = STATUS_METRIC_FLOOR
            logger.warning(f"AUC {metrics['auc']:.5f} fell below the floor {floor:.5f}; "
                           f"keeping the model from iteration {iteration - 1}")
            break
        current = candidate
        if on_iteration is not None:
            on_iteration(result.log[-1], current)

    result.state = current
    return result
