"""
Synthetic Foundation Model Module

A deterministic stand-in for the cloud foundation model. A seeded world fixes
class prototypes in the unified embedding space, a frozen nonlinear mixing map
from raw sensor space into it (the FM sensor encoder), and one noiseless raw
input per class that encodes exactly onto its prototype. Text encoding is exact
for world classes, so the oracle doubles as ground truth.
"""

import hashlib
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from src.embeddings import (
    DEFAULT_EMBED_DIM,
    Embedding,
    PromptTemplate,
    TextEmbeddingPool,
    best_match,
    normalize,
    normalize_rows,
    pool_add,
    top_two,
)
from src.error_handler import (
    DimensionMismatchError,
    EmptyPoolError,
    InvalidConfigError,
    UnknownClassError,
    ValidationError,
)
from src.structured_logger import get_logger

logger = get_logger("edgefm.fm_oracle")

DEFAULT_INPUT_DIM = 256
MAX_PROTOTYPE_COSINE = 0.8
MAX_REJECTION_ATTEMPTS = 10000


@dataclass(frozen=True, eq=False)
class Sample:
    """One unlabeled sensor reading; ``true_class`` is only read by evaluation."""

    id: int
    raw: np.ndarray
    true_class: str

    def __post_init__(self):
        raw = np.array(self.raw, dtype=np.float64)
        if raw.ndim != 1 or not np.all(np.isfinite(raw)):
            raise ValidationError(f"Sample {self.id} raw vector must be finite and 1-D")
        raw.setflags(write=False)
        object.__setattr__(self, "raw", raw)


@dataclass(frozen=True, eq=False)
class PseudoLabel:
    """Pool entry closest to the FM embedding, with confidence max(0, cosine)."""

    class_name: str
    text_embedding: Embedding
    confidence: float


@dataclass(frozen=True, eq=False)
class SyntheticWorld:
    seed: int
    num_classes: int
    input_dim: int
    embed_dim: int
    noise_sigma: float
    fm_noise_sigma: float
    class_names: Tuple[str, ...]
    prototypes: np.ndarray
    base_inputs: np.ndarray
    linear_map: np.ndarray
    hidden_in: np.ndarray
    hidden_out: np.ndarray
    signal_scale: float = 1.0
    _class_index: Dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        for name in ("prototypes", "base_inputs", "linear_map", "hidden_in", "hidden_out"):
            getattr(self, name).setflags(write=False)
        object.__setattr__(
            self, "_class_index", {name: i for i, name in enumerate(self.class_names)}
        )

    def has_class(self, class_name: str) -> bool:
        return class_name in self._class_index

    def class_index(self, class_name: str) -> int:
        try:
            return self._class_index[class_name]
        except KeyError:
            raise UnknownClassError(
                f"Class {class_name!r} does not exist in the world",
                details={"class_name": class_name},
            ) from None

    def prototype(self, class_name: str) -> Embedding:
        return Embedding(self.prototypes[self.class_index(class_name)])

    def base_input(self, class_name: str) -> np.ndarray:
        return self.base_inputs[self.class_index(class_name)]

    def mixing_map(self, raw: np.ndarray) -> np.ndarray:
        """Frozen P->D map: linear part plus a single tanh hidden layer; accepts batches."""
        raw = np.asarray(raw, dtype=np.float64)
        return raw @ self.linear_map.T + np.tanh(raw @ self.hidden_in.T) @ self.hidden_out.T


def _default_class_names(num_classes: int) -> List[str]:
    return [f"class_{i:02d}" for i in range(num_classes)]


def _draw_prototypes(rng: np.random.Generator, num_classes: int, embed_dim: int) -> np.ndarray:
    """
    Class prototypes with pairwise cosine below MAX_PROTOTYPE_COSINE.

    When C <= D the prototypes form a randomly rotated regular simplex (pairwise
    cosine -1/(C-1)), the geometry contrastive text embeddings settle into.
    Larger class counts fall back to rejection-sampled random directions.
    """
    if num_classes <= embed_dim:
        frame, _ = np.linalg.qr(rng.standard_normal((embed_dim, num_classes)))
        return normalize_rows(frame.T - frame.T.mean(axis=0))

    prototypes = np.zeros((num_classes, embed_dim))
    for c in range(num_classes):
        for _ in range(MAX_REJECTION_ATTEMPTS):
            candidate = normalize(rng.standard_normal(embed_dim)).values
            if c == 0 or np.max(prototypes[:c] @ candidate) < MAX_PROTOTYPE_COSINE:
                prototypes[c] = candidate
                break
        else:
            raise InvalidConfigError(
                f"Could not place {num_classes} separable prototypes in {embed_dim} dimensions"
            )
    return prototypes


def world_create(
    seed: int,
    num_classes: int,
    input_dim: int = DEFAULT_INPUT_DIM,
    embed_dim: int = DEFAULT_EMBED_DIM,
    noise_sigma: float = 0.1,
    fm_noise_sigma: float = 0.0,
    class_names: Optional[Sequence[str]] = None,
    signal_scale: float = 1.0,
) -> SyntheticWorld:
    """
    Build a deterministic world.

    Prototypes keep every pairwise cosine below 0.8.
    Each class's base input solves [linear; hidden_in] x = [s * prototype; 0]
    in the minimum-norm sense, so the hidden layer is silent on it and the
    encoder maps it exactly onto the prototype direction.
    """
    if num_classes < 2:
        raise InvalidConfigError(f"A world needs at least 2 classes, got {num_classes}")
    if embed_dim <= 0 or input_dim < embed_dim:
        raise InvalidConfigError(
            f"Need input_dim >= embed_dim > 0, got P={input_dim}, D={embed_dim}"
        )
    if noise_sigma < 0 or fm_noise_sigma < 0:
        raise InvalidConfigError("Noise scales must be non-negative")
    if signal_scale <= 0:
        raise InvalidConfigError("Signal scale must be positive")
    names = list(class_names) if class_names is not None else _default_class_names(num_classes)
    if len(names) != num_classes or len(set(names)) != num_classes or not all(names):
        raise InvalidConfigError("Class names must be unique, non-empty and one per class")

    rng = np.random.default_rng(seed)
    prototypes = _draw_prototypes(rng, num_classes, embed_dim)

    hidden_width = min(embed_dim, input_dim - embed_dim)
    linear_map = rng.standard_normal((embed_dim, input_dim)) / np.sqrt(input_dim)
    hidden_in = 2.0 * rng.standard_normal((hidden_width, input_dim)) / np.sqrt(input_dim)
    hidden_out = 0.5 * rng.standard_normal((embed_dim, hidden_width)) / np.sqrt(max(hidden_width, 1))

    stacked = np.vstack([linear_map, hidden_in])
    targets = np.hstack([signal_scale * prototypes, np.zeros((num_classes, hidden_width))])
    base_inputs = targets @ np.linalg.pinv(stacked).T

    world = SyntheticWorld(
        seed=seed,
        num_classes=num_classes,
        input_dim=input_dim,
        embed_dim=embed_dim,
        noise_sigma=float(noise_sigma),
        fm_noise_sigma=float(fm_noise_sigma),
        class_names=tuple(names),
        prototypes=prototypes,
        base_inputs=base_inputs,
        linear_map=linear_map,
        hidden_in=hidden_in,
        hidden_out=hidden_out,
        signal_scale=float(signal_scale),
    )
    logger.info(
        f"Created world seed={seed} C={num_classes} P={input_dim} D={embed_dim} sigma={noise_sigma}"
    )
    return world


def sample_draw(
    world: SyntheticWorld,
    class_name: str,
    rng: np.random.Generator,
    sample_id: int = 0,
) -> Sample:
    """Draw base_input(class) + N(0, noise_sigma^2) in raw space."""
    base = world.base_input(class_name)
    noise = rng.standard_normal(world.input_dim) * world.noise_sigma
    return Sample(id=sample_id, raw=base + noise, true_class=class_name)


class SampleStream:
    """Sequentially numbered samples drawn uniformly from a set of classes."""

    def __init__(
        self,
        world: SyntheticWorld,
        classes: Optional[Sequence[str]] = None,
        seed: int = 0,
        start_id: int = 0,
    ):
        self.world = world
        self.classes = list(classes) if classes is not None else list(world.class_names)
        for name in self.classes:
            world.class_index(name)
        self.rng = np.random.default_rng([world.seed, seed])
        self.next_id = start_id

    def set_classes(self, classes: Sequence[str]) -> None:
        for name in classes:
            self.world.class_index(name)
        self.classes = list(classes)

    def draw(self, class_name: Optional[str] = None) -> Sample:
        if class_name is None:
            if not self.classes:
                raise ValidationError("Sample stream has no active classes")
            class_name = self.classes[int(self.rng.integers(len(self.classes)))]
        sample = sample_draw(self.world, class_name, self.rng, sample_id=self.next_id)
        self.next_id += 1
        return sample

    def take(self, count: int) -> List[Sample]:
        return [self.draw() for _ in range(count)]

    def __iter__(self) -> Iterator[Sample]:
        while True:
            yield self.draw()


def _fm_noise_rng(world: SyntheticWorld, raw: np.ndarray) -> np.random.Generator:
    digest = hashlib.sha256(np.ascontiguousarray(raw, dtype="<f8").tobytes()).digest()
    return np.random.default_rng([world.seed, int.from_bytes(digest[:8], "little")])


def fm_encode(
    world: SyntheticWorld,
    raw: np.ndarray,
    rng: Optional[np.random.Generator] = None,
) -> Embedding:
    """FM sensor encoder: normalize(mixing_map(raw) + N(0, fm_noise_sigma^2))."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (world.input_dim,):
        raise DimensionMismatchError(
            f"Raw vector has shape {raw.shape}, world expects ({world.input_dim},)"
        )
    mixed = world.mixing_map(raw)
    if world.fm_noise_sigma > 0:
        # without an explicit stream the noise is keyed by the input bytes, so replays agree
        noise_rng = rng if rng is not None else _fm_noise_rng(world, raw)
        mixed = mixed + noise_rng.standard_normal(world.embed_dim) * world.fm_noise_sigma
    return normalize(mixed)


def fm_encode_batch(world: SyntheticWorld, raws: np.ndarray) -> np.ndarray:
    """Row-wise ``fm_encode`` returning an (n x D) array of unit rows."""
    raws = np.atleast_2d(np.asarray(raws, dtype=np.float64))
    if raws.shape[1] != world.input_dim:
        raise DimensionMismatchError(
            f"Raw batch has width {raws.shape[1]}, world expects {world.input_dim}"
        )
    if world.fm_noise_sigma > 0:
        return np.vstack([fm_encode(world, row).values for row in raws])
    return normalize_rows(world.mixing_map(raws))


def fm_text_encode(world: SyntheticWorld, class_name: str, prompt: PromptTemplate) -> Embedding:
    """
    Text encoder: exact prototypes for world classes, otherwise a unit vector
    seeded by a hash of (world seed, prompt, name).
    """
    if world.has_class(class_name):
        return world.prototype(class_name)
    text = prompt.render(class_name)
    digest = hashlib.sha256(f"{world.seed}|{text}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:16], "little"))
    return normalize(rng.standard_normal(world.embed_dim))


def build_pool(
    world: SyntheticWorld,
    class_names: Sequence[str],
    prompt: Optional[PromptTemplate] = None,
    pool: Optional[TextEmbeddingPool] = None,
) -> TextEmbeddingPool:
    """Encode ``class_names`` with the text encoder and append them to ``pool``."""
    if pool is None:
        pool = TextEmbeddingPool.empty(world.embed_dim, prompt or PromptTemplate())
    for name in class_names:
        pool = pool_add(pool, name, fm_text_encode(world, name, pool.prompt))
    logger.info(f"Pool now holds {len(pool)} classes at version {pool.version}")
    return pool


def query_with_embedding(
    world: SyntheticWorld, pool: TextEmbeddingPool, raw: np.ndarray
) -> Tuple[Embedding, PseudoLabel]:
    """Knowledge query that also returns the FM embedding the label came from."""
    if len(pool) == 0:
        raise EmptyPoolError("Knowledge query needs a non-empty pool")
    embedding = fm_encode(world, raw)
    name, similarity, _ = best_match(pool, embedding)
    return embedding, PseudoLabel(name, pool.get(name), max(0.0, similarity))


def knowledge_query(world: SyntheticWorld, pool: TextEmbeddingPool, raw: np.ndarray) -> PseudoLabel:
    """Pseudo text embedding (argmax over the pool) and its clamped confidence."""
    return query_with_embedding(world, pool, raw)[1]


def fm_predict(world: SyntheticWorld, pool: TextEmbeddingPool, raw: np.ndarray) -> Tuple[str, float]:
    """Cloud-side open-set prediction: (class, raw cosine similarity)."""
    if len(pool) == 0:
        raise EmptyPoolError("FM prediction needs a non-empty pool")
    name, similarity, _ = best_match(pool, fm_encode(world, raw))
    return name, similarity


def fm_predict_batch(world: SyntheticWorld, pool: TextEmbeddingPool, raws: np.ndarray) -> List[str]:
    """Vectorized ``fm_predict`` class decisions."""
    if len(pool) == 0:
        raise EmptyPoolError("FM prediction needs a non-empty pool")
    best, _, _ = top_two(fm_encode_batch(world, raws) @ pool.matrix.T)
    names = pool.class_names
    return [names[i] for i in best]


def fm_accuracy(world: SyntheticWorld, pool: TextEmbeddingPool, samples: Sequence[Sample]) -> float:
    """Fraction of samples the FM labels with their true class."""
    if not samples:
        return float("nan")
    predictions = fm_predict_batch(world, pool, np.vstack([s.raw for s in samples]))
    return float(np.mean([p == s.true_class for p, s in zip(predictions, samples)]))
