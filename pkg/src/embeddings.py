"""
Embedding Core Module

Unit-normalized embeddings in the foundation model's unified space, cosine
similarity, prompt templates and the versioned text embedding pool shared by
the edge and the cloud.
"""

import struct
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from src.error_handler import (
    DimensionMismatchError,
    DuplicateClassError,
    EmptyPoolError,
    PromptTemplateError,
    TruncatedError,
    ValidationError,
    ZeroVectorError,
)
from src.structured_logger import get_logger

logger = get_logger("edgefm.embeddings")

DEFAULT_EMBED_DIM = 64
ZERO_NORM_EPS = 1e-12
CLASS_PLACEHOLDER = "{CLS}"

_POOL_HEADER = struct.Struct("<QII")
_NAME_LEN = struct.Struct("<H")


@dataclass(frozen=True, eq=False)
class Embedding:
    """Immutable dense vector; built through ``normalize`` it has unit L2 norm."""

    values: np.ndarray

    def __post_init__(self):
        array = np.array(self.values, dtype=np.float64)
        if array.ndim != 1 or array.size == 0:
            raise ValidationError(f"Embedding must be a non-empty 1-D vector, got shape {array.shape}")
        array.setflags(write=False)
        object.__setattr__(self, "values", array)

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    def __neg__(self) -> "Embedding":
        return Embedding(-self.values)

    def __len__(self) -> int:
        return self.dim

    def __repr__(self) -> str:
        head = ", ".join(f"{v:.4f}" for v in self.values[:4])
        suffix = ", ..." if self.dim > 4 else ""
        return f"Embedding(dim={self.dim}, [{head}{suffix}])"


def normalize(raw: Sequence[float]) -> Embedding:
    """Scale ``raw`` to unit L2 norm, preserving its direction."""
    array = np.asarray(raw, dtype=np.float64)
    if array.ndim != 1 or array.size == 0:
        raise ValidationError(f"Cannot normalize array of shape {array.shape}")
    norm = float(np.linalg.norm(array))
    if not np.isfinite(norm) or norm <= ZERO_NORM_EPS:
        raise ZeroVectorError(
            f"Cannot normalize vector with norm {norm:.3e}",
            details={"norm": norm},
        )
    return Embedding(array / norm)


def normalize_rows(matrix: np.ndarray) -> np.ndarray:
    """Row-wise normalization for batches of raw vectors."""
    matrix = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    if np.any(norms <= ZERO_NORM_EPS):
        raise ZeroVectorError("Cannot normalize a batch containing a zero vector")
    return matrix / norms


def cosine(a: Embedding, b: Embedding) -> float:
    """Cosine similarity of two unit embeddings (their dot product)."""
    if a.dim != b.dim:
        raise DimensionMismatchError(
            f"Cannot compare embeddings of dimension {a.dim} and {b.dim}",
            details={"left": a.dim, "right": b.dim},
        )
    return float(np.clip(np.dot(a.values, b.values), -1.0, 1.0))


@dataclass(frozen=True)
class PromptTemplate:
    """Natural-language prompt with exactly one ``{CLS}`` placeholder."""

    pattern: str = "a photo of a {CLS}."

    def __post_init__(self):
        count = self.pattern.count(CLASS_PLACEHOLDER)
        if count != 1:
            raise PromptTemplateError(
                f"Prompt template must contain exactly one {CLASS_PLACEHOLDER} placeholder, "
                f"found {count}: {self.pattern!r}"
            )

    def render(self, class_name: str) -> str:
        if not class_name:
            raise PromptTemplateError("Class name must be non-empty")
        return self.pattern.replace(CLASS_PLACEHOLDER, class_name)


@dataclass(frozen=True, eq=False)
class PoolEntry:
    class_name: str
    embedding: Embedding


@dataclass(frozen=True, eq=False)
class TextEmbeddingPool:
    """
    Ordered, versioned map from class name to text embedding.

    Pools are immutable snapshots: every mutation returns a new pool with the
    version incremented by one, so readers never observe a half-applied update.
    """

    dim: int
    prompt: PromptTemplate = field(default_factory=PromptTemplate)
    entries: Tuple[PoolEntry, ...] = ()
    version: int = 0
    _matrix: np.ndarray = field(init=False, repr=False)
    _index: dict = field(init=False, repr=False)

    def __post_init__(self):
        if self.dim <= 0:
            raise ValidationError(f"Pool dimension must be positive, got {self.dim}")
        if self.entries:
            matrix = np.vstack([entry.embedding.values for entry in self.entries])
        else:
            matrix = np.zeros((0, self.dim))
        matrix.setflags(write=False)
        object.__setattr__(self, "_matrix", matrix)
        object.__setattr__(
            self, "_index", {entry.class_name: i for i, entry in enumerate(self.entries)}
        )

    @classmethod
    def empty(cls, dim: int = DEFAULT_EMBED_DIM, prompt: Optional[PromptTemplate] = None) -> "TextEmbeddingPool":
        return cls(dim=dim, prompt=prompt or PromptTemplate())

    @property
    def matrix(self) -> np.ndarray:
        """Read-only (size x dim) matrix of pool embeddings in entry order."""
        return self._matrix

    @property
    def class_names(self) -> List[str]:
        return [entry.class_name for entry in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, class_name: object) -> bool:
        return class_name in self._index

    def __iter__(self) -> Iterator[PoolEntry]:
        return iter(self.entries)

    def index_of(self, class_name: str) -> int:
        try:
            return self._index[class_name]
        except KeyError:
            raise ValidationError(f"Class {class_name!r} is not in the pool") from None

    def get(self, class_name: str) -> Embedding:
        return self.entries[self.index_of(class_name)].embedding

    def add(self, class_name: str, embedding: Embedding) -> "TextEmbeddingPool":
        return pool_add(self, class_name, embedding)


def pool_add(pool: TextEmbeddingPool, class_name: str, embedding: Embedding) -> TextEmbeddingPool:
    """Return a new pool with ``class_name`` appended and the version bumped."""
    if not class_name:
        raise ValidationError("Class name must be non-empty")
    if class_name in pool:
        raise DuplicateClassError(
            f"Class {class_name!r} is already in the pool",
            details={"class_name": class_name, "version": pool.version},
        )
    if embedding.dim != pool.dim:
        raise DimensionMismatchError(
            f"Embedding dimension {embedding.dim} does not match pool dimension {pool.dim}",
            details={"class_name": class_name},
        )
    updated = TextEmbeddingPool(
        dim=pool.dim,
        prompt=pool.prompt,
        entries=pool.entries + (PoolEntry(class_name, embedding),),
        version=pool.version + 1,
    )
    logger.debug(f"Pool add {class_name!r} -> version {updated.version}")
    return updated


def best_match(pool: TextEmbeddingPool, query: Embedding) -> Tuple[str, float, float]:
    """
    Most similar pool entry to ``query``.

    Returns (class_name, similarity, runner_up_similarity). The runner-up is
    -1 for single-entry pools; ties go to the lowest entry index.
    """
    if len(pool) == 0:
        raise EmptyPoolError("Cannot match against an empty pool")
    if query.dim != pool.dim:
        raise DimensionMismatchError(
            f"Query dimension {query.dim} does not match pool dimension {pool.dim}"
        )
    sims = np.clip(pool.matrix @ query.values, -1.0, 1.0)
    best = int(np.argmax(sims))
    runner_up = float(np.max(np.delete(sims, best))) if len(pool) > 1 else -1.0
    return pool.entries[best].class_name, float(sims[best]), runner_up


def top_two(similarities: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Batched best/runner-up over a (n x size) similarity matrix.

    Returns (best index, best similarity, runner-up similarity) per row with
    the same tie and single-entry conventions as ``best_match``.
    """
    sims = np.clip(np.atleast_2d(similarities), -1.0, 1.0)
    rows = np.arange(sims.shape[0])
    best = np.argmax(sims, axis=1)
    sim1 = sims[rows, best]
    if sims.shape[1] == 1:
        return best, sim1, np.full(sims.shape[0], -1.0)
    masked = sims.copy()
    masked[rows, best] = -np.inf
    return best, sim1, masked.max(axis=1)


def serialize_pool(pool: TextEmbeddingPool) -> bytes:
    """Encode a pool as version u64, count u32, D u32, then (u16 name, D x f32) per entry."""
    parts = [_POOL_HEADER.pack(pool.version, len(pool), pool.dim)]
    for entry in pool.entries:
        name = entry.class_name.encode("utf-8")
        parts.append(_NAME_LEN.pack(len(name)))
        parts.append(name)
        parts.append(entry.embedding.values.astype("<f4").tobytes())
    return b"".join(parts)


def deserialize_pool(data: bytes, prompt: Optional[PromptTemplate] = None) -> TextEmbeddingPool:
    """Inverse of ``serialize_pool``; embeddings keep their float32 values."""
    if len(data) < _POOL_HEADER.size:
        raise TruncatedError("Pool payload shorter than its header")
    version, count, dim = _POOL_HEADER.unpack_from(data, 0)
    offset = _POOL_HEADER.size
    entries = []
    for _ in range(count):
        if offset + _NAME_LEN.size > len(data):
            raise TruncatedError("Pool payload truncated inside an entry name length")
        (name_len,) = _NAME_LEN.unpack_from(data, offset)
        offset += _NAME_LEN.size
        end = offset + name_len + 4 * dim
        if end > len(data):
            raise TruncatedError("Pool payload truncated inside an entry")
        name = data[offset : offset + name_len].decode("utf-8")
        offset += name_len
        values = np.frombuffer(data, dtype="<f4", count=dim, offset=offset).astype(np.float64)
        offset += 4 * dim
        entries.append(PoolEntry(name, Embedding(values)))
    if offset != len(data):
        raise ValidationError(f"Pool payload has {len(data) - offset} trailing bytes")
    return TextEmbeddingPool(
        dim=dim,
        prompt=prompt or PromptTemplate(),
        entries=tuple(entries),
        version=version,
    )
