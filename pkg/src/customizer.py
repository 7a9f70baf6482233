"""
Customizer Module

Trains the edge small model from foundation model knowledge. The model is a
single tanh hidden layer followed by a linear projection into the unified
embedding space, trained by mini-batch gradient descent with analytic
gradients on one of three objectives:

- semantic: MSE alignment to FM embeddings plus confidence-weighted
  bidirectional contrastive alignment to pseudo text embeddings
- vanilla_kd: MSE alignment only
- hard_ft: cross-entropy over pool similarities against the pseudo class
"""

import csv
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.embeddings import Embedding, TextEmbeddingPool, normalize_rows, top_two
from src.error_handler import (
    CheckpointError,
    DimensionMismatchError,
    FileSystemError,
    InvalidConfigError,
    NonPositiveTemperatureError,
    TrainingDivergedError,
    ValidationError,
)
from src.fm_oracle import PseudoLabel, Sample, SyntheticWorld, query_with_embedding
from src.structured_logger import get_logger

logger = get_logger("edgefm.customizer")

DEFAULT_HIDDEN_DIM = 64
HOLDOUT_MODULUS = 5
HOLDOUT_REMAINDER = 4
GRADCHECK_FLOOR = 1e-5
PARAMETER_NAMES = ("w1", "b1", "w2", "b2")

_ARCH_LEN = struct.Struct("<H")
_DIMS = struct.Struct("<III")


class Variant(Enum):
    """Customization objective."""

    SEMANTIC = "semantic"
    VANILLA_KD = "vanilla_kd"
    HARD_FT = "hard_ft"

    @classmethod
    def parse(cls, value: Union[str, "Variant"]) -> "Variant":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            names = ", ".join(v.value for v in cls)
            raise InvalidConfigError(f"Unknown variant {value!r}; expected one of {names}") from None


@dataclass
class TrainConfig:
    """Customization hyperparameters."""

    lam: float = 0.5
    tau: float = 1.0
    alpha_vis: float = 1.0
    learning_rate: float = 0.05
    epochs: int = 40
    batch_size: int = 32
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise InvalidConfigError(f"lambda must be in [0, 1], got {self.lam}")
        if self.tau <= 0:
            raise NonPositiveTemperatureError(f"Temperature must be positive, got {self.tau}")
        if self.alpha_vis < 0:
            raise InvalidConfigError(f"alpha_vis must be non-negative, got {self.alpha_vis}")
        if self.learning_rate <= 0:
            raise InvalidConfigError(f"Learning rate must be positive, got {self.learning_rate}")
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidConfigError("epochs and batch_size must be at least 1")


@dataclass
class ModelGradient:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAMETER_NAMES}

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(g * g) for g in self.as_dict().values())))


@dataclass(eq=False)
class SmallModel:
    """
    Edge model: h = tanh(w1 x + b1), u = w2 h + b2, embed(x) = u / |u|.

    w1 is H x P, w2 is D x H.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    arch_id: str = "mlp"

    def __post_init__(self):
        for name in PARAMETER_NAMES:
            setattr(self, name, np.array(getattr(self, name), dtype=np.float64))
        hidden, inputs = self.w1.shape
        if self.b1.shape != (hidden,) or self.w2.shape[1] != hidden or self.b2.shape != (self.w2.shape[0],):
            raise DimensionMismatchError(
                "Inconsistent parameter shapes",
                details={name: getattr(self, name).shape for name in PARAMETER_NAMES},
            )

    @classmethod
    def initialize(
        cls,
        input_dim: int,
        hidden_dim: int,
        embed_dim: int,
        seed: int = 0,
        arch_id: str = "mlp",
    ) -> "SmallModel":
        rng = np.random.default_rng(seed)
        return cls(
            w1=rng.standard_normal((hidden_dim, input_dim)) / np.sqrt(input_dim),
            b1=np.zeros(hidden_dim),
            w2=rng.standard_normal((embed_dim, hidden_dim)) / np.sqrt(hidden_dim),
            b2=np.zeros(embed_dim),
            arch_id=arch_id,
        )

    @property
    def input_dim(self) -> int:
        return int(self.w1.shape[1])

    @property
    def hidden_dim(self) -> int:
        return int(self.w1.shape[0])

    @property
    def embed_dim(self) -> int:
        return int(self.w2.shape[0])

    def parameters(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAMETER_NAMES}

    def copy(self) -> "SmallModel":
        return SmallModel(*(p.copy() for p in self.parameters().values()), arch_id=self.arch_id)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.parameters().values())

    def forward(self, raws: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Batch forward pass returning (hidden, unnormalized, normalized) rows."""
        raws = np.atleast_2d(np.asarray(raws, dtype=np.float64))
        if raws.shape[1] != self.input_dim:
            raise DimensionMismatchError(
                f"Input width {raws.shape[1]} does not match model input {self.input_dim}"
            )
        hidden = np.tanh(raws @ self.w1.T + self.b1)
        projected = hidden @ self.w2.T + self.b2
        return hidden, projected, normalize_rows(projected)

    def embed_batch(self, raws: np.ndarray) -> np.ndarray:
        return self.forward(raws)[2]

    def apply_step(self, gradient: ModelGradient, learning_rate: float) -> None:
        for name in PARAMETER_NAMES:
            setattr(self, name, getattr(self, name) - learning_rate * getattr(gradient, name))


def embed(model: SmallModel, raw: np.ndarray) -> Embedding:
    """Unit-normalized embedding of one raw vector."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (model.input_dim,):
        raise DimensionMismatchError(
            f"Raw vector has shape {raw.shape}, model expects ({model.input_dim},)"
        )
    return Embedding(model.embed_batch(raw)[0])


def classify_batch(model: SmallModel, pool: TextEmbeddingPool, raws: np.ndarray) -> List[str]:
    best, _, _ = top_two(model.embed_batch(raws) @ pool.matrix.T)
    names = pool.class_names
    return [names[i] for i in best]


def pool_accuracy(model: SmallModel, pool: TextEmbeddingPool, samples: Sequence[Sample]) -> float:
    """Fraction of samples whose small-model pool match is their true class."""
    if not samples:
        return float("nan")
    predictions = classify_batch(model, pool, np.vstack([s.raw for s in samples]))
    return float(np.mean([p == s.true_class for p, s in zip(predictions, samples)]))


@dataclass(eq=False)
class DistillBatch:
    """
    Paired distillation data as aligned arrays.

    raw (n x P), fm (n x D) FM embeddings, text (n x D) pseudo text embeddings,
    weights (n) confidences, targets (n) pseudo class indices into
    ``class_matrix`` (the pool at batch construction, size x D).
    """

    raw: np.ndarray
    fm: np.ndarray
    text: np.ndarray
    weights: np.ndarray
    targets: np.ndarray
    class_matrix: np.ndarray
    sample_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        n = self.raw.shape[0]
        if n == 0:
            raise ValidationError("A distillation batch needs at least one sample")
        if not (self.fm.shape == self.text.shape and self.fm.shape[0] == n):
            raise DimensionMismatchError("FM and text embeddings must align with raw samples")
        if self.weights.shape != (n,) or self.targets.shape != (n,):
            raise DimensionMismatchError("Weights and targets need one entry per sample")
        if np.any(self.weights < 0) or np.any(self.weights > 1):
            raise ValidationError("Confidences must lie in [0, 1]")
        if self.class_matrix.shape[1] != self.fm.shape[1]:
            raise DimensionMismatchError("Class matrix width must equal the embedding dimension")
        if self.sample_ids.size == 0:
            self.sample_ids = np.arange(n, dtype=np.int64)

    def __len__(self) -> int:
        return int(self.raw.shape[0])

    def subset(self, index: np.ndarray) -> "DistillBatch":
        return DistillBatch(
            raw=self.raw[index],
            fm=self.fm[index],
            text=self.text[index],
            weights=self.weights[index],
            targets=self.targets[index],
            class_matrix=self.class_matrix,
            sample_ids=self.sample_ids[index],
        )

    @classmethod
    def from_knowledge(
        cls,
        samples: Sequence[Sample],
        knowledge: Sequence[Tuple[Embedding, PseudoLabel]],
        pool: TextEmbeddingPool,
    ) -> "DistillBatch":
        if len(samples) != len(knowledge):
            raise ValidationError("Every sample needs exactly one knowledge entry")
        return cls(
            raw=np.vstack([s.raw for s in samples]),
            fm=np.vstack([emb.values for emb, _ in knowledge]),
            text=np.vstack([label.text_embedding.values for _, label in knowledge]),
            weights=np.array([label.confidence for _, label in knowledge]),
            targets=np.array([pool.index_of(label.class_name) for _, label in knowledge], dtype=np.int64),
            class_matrix=pool.matrix,
            sample_ids=np.array([s.id for s in samples], dtype=np.int64),
        )


def query_knowledge(
    world: SyntheticWorld, pool: TextEmbeddingPool, samples: Sequence[Sample]
) -> List[Tuple[Embedding, PseudoLabel]]:
    return [query_with_embedding(world, pool, s.raw) for s in samples]


def _logsumexp(matrix: np.ndarray, axis: int) -> np.ndarray:
    peak = np.max(matrix, axis=axis, keepdims=True)
    return np.squeeze(peak, axis=axis) + np.log(np.sum(np.exp(matrix - peak), axis=axis))


def _softmax(matrix: np.ndarray, axis: int) -> np.ndarray:
    shifted = np.exp(matrix - np.max(matrix, axis=axis, keepdims=True))
    return shifted / np.sum(shifted, axis=axis, keepdims=True)


def _vis_terms(embeddings: np.ndarray, batch: DistillBatch) -> Tuple[float, np.ndarray]:
    n, d = embeddings.shape
    diff = embeddings - batch.fm
    return float(np.sum(diff * diff) / (n * d)), 2.0 * diff / (n * d)


def _text_terms(
    embeddings: np.ndarray, batch: DistillBatch, lam: float, tau: float
) -> Tuple[float, np.ndarray]:
    if tau <= 0:
        raise NonPositiveTemperatureError(f"Temperature must be positive, got {tau}")
    n = embeddings.shape[0]
    scores = embeddings @ batch.text.T / tau
    diagonal = np.diag(scores)
    sensor_to_text = _logsumexp(scores, axis=1) - diagonal
    text_to_sensor = _logsumexp(scores, axis=0) - diagonal
    w = batch.weights
    loss = float(np.mean(w * (lam * sensor_to_text + (1.0 - lam) * text_to_sensor)))

    eye = np.eye(n)
    grad_scores = (
        lam * w[:, None] * (_softmax(scores, axis=1) - eye)
        + (1.0 - lam) * w[None, :] * (_softmax(scores, axis=0) - eye)
    ) / n
    return loss, grad_scores @ batch.text / tau


def _hard_terms(embeddings: np.ndarray, batch: DistillBatch, tau: float) -> Tuple[float, np.ndarray]:
    if tau <= 0:
        raise NonPositiveTemperatureError(f"Temperature must be positive, got {tau}")
    n = embeddings.shape[0]
    logits = embeddings @ batch.class_matrix.T / tau
    rows = np.arange(n)
    loss = float(np.mean(_logsumexp(logits, axis=1) - logits[rows, batch.targets]))
    delta = _softmax(logits, axis=1)
    delta[rows, batch.targets] -= 1.0
    return loss, delta @ batch.class_matrix / (n * tau)


def loss_vis(batch: DistillBatch, model: SmallModel) -> float:
    """Mean squared difference between FM embeddings and model embeddings."""
    return _vis_terms(model.embed_batch(batch.raw), batch)[0]


def loss_text(batch: DistillBatch, model: SmallModel, lam: float = 0.5, tau: float = 1.0) -> float:
    """Confidence-weighted bidirectional contrastive loss over in-batch pairs."""
    return _text_terms(model.embed_batch(batch.raw), batch, lam, tau)[0]


def loss_total(batch: DistillBatch, model: SmallModel, cfg: TrainConfig) -> float:
    return cfg.alpha_vis * loss_vis(batch, model) + loss_text(batch, model, cfg.lam, cfg.tau)


def objective(
    batch: DistillBatch,
    model: SmallModel,
    cfg: TrainConfig,
    variant: Union[str, Variant] = Variant.SEMANTIC,
) -> float:
    """Training objective of ``variant`` evaluated on ``batch``."""
    return loss_and_grad(batch, model, cfg, variant)[0]


def loss_and_grad(
    batch: DistillBatch,
    model: SmallModel,
    cfg: TrainConfig,
    variant: Union[str, Variant] = Variant.SEMANTIC,
) -> Tuple[float, ModelGradient]:
    """Objective value and its exact gradient through the normalization and tanh layer."""
    variant = Variant.parse(variant)
    hidden, projected, embeddings = model.forward(batch.raw)

    if variant is Variant.SEMANTIC:
        vis, grad_vis = _vis_terms(embeddings, batch)
        text, grad_text = _text_terms(embeddings, batch, cfg.lam, cfg.tau)
        loss = cfg.alpha_vis * vis + text
        grad_embed = cfg.alpha_vis * grad_vis + grad_text
    elif variant is Variant.VANILLA_KD:
        loss, grad_embed = _vis_terms(embeddings, batch)
    else:
        loss, grad_embed = _hard_terms(embeddings, batch, cfg.tau)

    norms = np.linalg.norm(projected, axis=1, keepdims=True)
    radial = np.sum(embeddings * grad_embed, axis=1, keepdims=True)
    grad_projected = (grad_embed - embeddings * radial) / norms

    grad_hidden = (grad_projected @ model.w2) * (1.0 - hidden * hidden)
    gradient = ModelGradient(
        w1=grad_hidden.T @ batch.raw,
        b1=grad_hidden.sum(axis=0),
        w2=grad_projected.T @ hidden,
        b2=grad_projected.sum(axis=0),
    )
    return loss, gradient


def grad(
    batch: DistillBatch,
    model: SmallModel,
    cfg: TrainConfig,
    variant: Union[str, Variant] = Variant.SEMANTIC,
) -> ModelGradient:
    return loss_and_grad(batch, model, cfg, variant)[1]


def numerical_gradient(
    loss_fn: Callable[[SmallModel], float], model: SmallModel, h: float = 1e-5
) -> ModelGradient:
    """Central finite differences of ``loss_fn`` over every model parameter."""
    probe = model.copy()
    result = {}
    for name in PARAMETER_NAMES:
        param = getattr(probe, name)
        estimate = np.zeros_like(param)
        for index in np.ndindex(param.shape):
            original = param[index]
            param[index] = original + h
            upper = loss_fn(probe)
            param[index] = original - h
            lower = loss_fn(probe)
            param[index] = original
            estimate[index] = (upper - lower) / (2.0 * h)
        result[name] = estimate
    return ModelGradient(**result)


def gradient_check(
    batch: DistillBatch,
    model: SmallModel,
    cfg: TrainConfig,
    variant: Union[str, Variant] = Variant.SEMANTIC,
    h: float = 1e-5,
) -> float:
    """Largest per-coordinate relative error between analytic and numerical gradients."""
    analytic = grad(batch, model, cfg, variant).as_dict()
    numeric = numerical_gradient(lambda m: objective(batch, m, cfg, variant), model, h).as_dict()
    worst = 0.0
    for name in PARAMETER_NAMES:
        a, b = analytic[name], numeric[name]
        denom = np.maximum(GRADCHECK_FLOOR, np.abs(a) + np.abs(b))
        worst = max(worst, float(np.max(np.abs(a - b) / denom)))
    return worst


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    holdout_accuracy: float


@dataclass
class TrainingLog:
    variant: str
    records: List[EpochRecord] = field(default_factory=list)

    def append(self, epoch: int, loss: float, holdout_accuracy: float) -> None:
        self.records.append(EpochRecord(epoch, loss, holdout_accuracy))

    @property
    def final_accuracy(self) -> float:
        return self.records[-1].holdout_accuracy if self.records else float("nan")

    @property
    def losses(self) -> List[float]:
        return [r.loss for r in self.records]

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="", encoding="utf-8") as handle:
                writer = csv.writer(handle, lineterminator="\n")
                writer.writerow(["epoch", "loss", "holdout_accuracy"])
                for r in self.records:
                    writer.writerow([r.epoch, f"{r.loss:.10g}", f"{r.holdout_accuracy:.6f}"])
        except OSError as e:
            raise FileSystemError(f"Failed to write training log {path}: {e}") from e
        return path


def is_holdout(sample: Sample) -> bool:
    return sample.id % HOLDOUT_MODULUS == HOLDOUT_REMAINDER


def split_holdout(dataset: Sequence[Sample]) -> Tuple[List[Sample], List[Sample]]:
    train_set = [s for s in dataset if not is_holdout(s)]
    holdout = [s for s in dataset if is_holdout(s)]
    return train_set, holdout


def fit(
    model: SmallModel,
    batch: DistillBatch,
    cfg: TrainConfig,
    variant: Union[str, Variant] = Variant.SEMANTIC,
    evaluate: Optional[Callable[[SmallModel], float]] = None,
) -> TrainingLog:
    """In-place mini-batch descent on ``model``; one log record per epoch."""
    cfg.validate()
    variant = Variant.parse(variant)
    rng = np.random.default_rng(cfg.seed)
    log = TrainingLog(variant.value)
    n = len(batch)

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            _, gradient = loss_and_grad(batch.subset(order[start : start + cfg.batch_size]), model, cfg, variant)
            model.apply_step(gradient, cfg.learning_rate)
            if not model.is_finite():
                raise TrainingDivergedError(
                    f"Parameters became non-finite in epoch {epoch}",
                    details={"variant": variant.value, "learning_rate": cfg.learning_rate},
                )
        epoch_loss = objective(batch, model, cfg, variant)
        accuracy = evaluate(model) if evaluate is not None else float("nan")
        log.append(epoch, epoch_loss, accuracy)
        logger.debug(f"{variant.value} epoch {epoch}: loss={epoch_loss:.6f} holdout={accuracy:.4f}")
    return log


def train(
    world: SyntheticWorld,
    pool: TextEmbeddingPool,
    dataset: Sequence[Sample],
    cfg: Optional[TrainConfig] = None,
    variant: Union[str, Variant] = Variant.SEMANTIC,
    model: Optional[SmallModel] = None,
    arch_id: str = "mlp",
    hidden_dim: int = DEFAULT_HIDDEN_DIM,
    knowledge: Optional[Sequence[Tuple[Embedding, PseudoLabel]]] = None,
) -> Tuple[SmallModel, TrainingLog]:
    """
    Customize a small model on unlabeled ``dataset`` using FM knowledge.

    Samples with id % 5 == 4 are held out for the accuracy column of the log.
    ``knowledge`` may carry precomputed (FM embedding, pseudo label) pairs
    aligned with ``dataset``; otherwise the FM is queried here. A given
    ``model`` is trained in place and returned.
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    variant = Variant.parse(variant)
    if not dataset:
        raise InvalidConfigError("Cannot customize on an empty dataset")
    if knowledge is None:
        knowledge = query_knowledge(world, pool, dataset)
    elif len(knowledge) != len(dataset):
        raise ValidationError("Knowledge must align with the dataset")

    pairs = list(zip(dataset, knowledge))
    train_pairs = [p for p in pairs if not is_holdout(p[0])]
    holdout = [s for s in dataset if is_holdout(s)]
    if not train_pairs:
        logger.warning("Every sample falls in the held-out split; training on all of them")
        train_pairs = pairs

    batch = DistillBatch.from_knowledge([p[0] for p in train_pairs], [p[1] for p in train_pairs], pool)
    if model is None:
        model = SmallModel.initialize(world.input_dim, hidden_dim, world.embed_dim, seed=cfg.seed, arch_id=arch_id)
    elif model.input_dim != world.input_dim or model.embed_dim != world.embed_dim:
        raise DimensionMismatchError("Model dimensions do not match the world")

    log = fit(model, batch, cfg, variant, evaluate=lambda m: pool_accuracy(m, pool, holdout))
    logger.info(
        f"Customized {model.arch_id} ({variant.value}) on {len(batch)} samples: "
        f"final loss={log.records[-1].loss:.6f}, holdout accuracy={log.final_accuracy:.4f}"
    )
    return model, log


def checkpoint_bytes(model: SmallModel) -> bytes:
    """arch_id (u16 + UTF-8), P, H, D (u32), then w1, b1, w2, b2 as row-major f32 LE."""
    arch = model.arch_id.encode("utf-8")
    parts = [
        _ARCH_LEN.pack(len(arch)),
        arch,
        _DIMS.pack(model.input_dim, model.hidden_dim, model.embed_dim),
    ]
    parts.extend(getattr(model, name).astype("<f4").tobytes() for name in PARAMETER_NAMES)
    return b"".join(parts)


def model_from_checkpoint(data: bytes) -> SmallModel:
    try:
        (arch_len,) = _ARCH_LEN.unpack_from(data, 0)
        offset = _ARCH_LEN.size
        arch_id = data[offset : offset + arch_len].decode("utf-8")
        offset += arch_len
        p, h, d = _DIMS.unpack_from(data, offset)
        offset += _DIMS.size
    except (struct.error, UnicodeDecodeError) as e:
        raise CheckpointError(f"Malformed checkpoint header: {e}") from e

    shapes = {"w1": (h, p), "b1": (h,), "w2": (d, h), "b2": (d,)}
    expected = offset + 4 * sum(int(np.prod(s)) for s in shapes.values())
    if len(data) != expected:
        raise CheckpointError(f"Checkpoint holds {len(data)} bytes, expected {expected}")

    params = {}
    for name in PARAMETER_NAMES:
        count = int(np.prod(shapes[name]))
        params[name] = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shapes[name]).astype(np.float64)
        offset += 4 * count
    return SmallModel(**params, arch_id=arch_id)


def save_checkpoint(model: SmallModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(checkpoint_bytes(model))
    except OSError as e:
        raise FileSystemError(f"Failed to write checkpoint {path}: {e}") from e
    return path


def load_checkpoint(path: Union[str, Path]) -> SmallModel:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise FileSystemError(f"Failed to read checkpoint {path}: {e}") from e
    return model_from_checkpoint(data)
