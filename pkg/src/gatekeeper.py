"""
Gatekeeper Module

Edge-side margin computation, content-aware upload gating and the inference
router. The margin sim1 - sim2 is kept under the name ``unc`` but measures
certainty: a large margin routes to the edge and skips the upload.
"""

import csv
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from src.customizer import SmallModel, embed
from src.embeddings import TextEmbeddingPool, best_match, top_two
from src.error_handler import EmptyPoolError, FileSystemError, ValidationError
from src.structured_logger import get_logger

logger = get_logger("edgefm.gatekeeper")

DEFAULT_UPLOAD_THRESHOLD = 0.99


class RouteTarget(Enum):
    EDGE = "edge"
    CLOUD = "cloud"


@dataclass(frozen=True)
class UncertaintyScore:
    unc: float
    sim1: float
    sim2: float


@dataclass(frozen=True)
class RouterDecision:
    route: RouteTarget
    r: int
    unc: UncertaintyScore
    threshold_used: float
    edge_class: str

    @property
    def on_edge(self) -> bool:
        return self.r == 1


def uncertainty(model: SmallModel, pool: TextEmbeddingPool, raw: np.ndarray) -> UncertaintyScore:
    """Top-two pool cosines of the small-model embedding and their margin."""
    return uncertainty_with_class(model, pool, raw)[0]


def uncertainty_with_class(
    model: SmallModel, pool: TextEmbeddingPool, raw: np.ndarray
) -> Tuple[UncertaintyScore, str]:
    if len(pool) == 0:
        raise EmptyPoolError("Uncertainty needs a non-empty pool")
    name, sim1, sim2 = best_match(pool, embed(model, raw))
    return UncertaintyScore(unc=sim1 - sim2, sim1=sim1, sim2=sim2), name


def uncertainty_batch(
    model: SmallModel, pool: TextEmbeddingPool, raws: np.ndarray
) -> Tuple[np.ndarray, List[str]]:
    """Margins and edge answers for a stack of raw vectors."""
    if len(pool) == 0:
        raise EmptyPoolError("Uncertainty needs a non-empty pool")
    best, sim1, sim2 = top_two(model.embed_batch(raws) @ pool.matrix.T)
    names = pool.class_names
    return sim1 - sim2, [names[i] for i in best]


def should_upload(unc: UncertaintyScore, v_thre: float = DEFAULT_UPLOAD_THRESHOLD) -> bool:
    return unc.unc < v_thre


def decide(unc: UncertaintyScore, edge_class: str, thre: float) -> RouterDecision:
    if not 0.0 <= thre <= 1.0:
        raise ValidationError(f"Routing threshold must be in [0, 1], got {thre}")
    on_edge = unc.unc >= thre
    return RouterDecision(
        route=RouteTarget.EDGE if on_edge else RouteTarget.CLOUD,
        r=1 if on_edge else 0,
        unc=unc,
        threshold_used=thre,
        edge_class=edge_class,
    )


def route(model: SmallModel, pool: TextEmbeddingPool, raw: np.ndarray, thre: float) -> RouterDecision:
    """Edge when the margin reaches ``thre``; otherwise the caller offloads to the FM."""
    if not 0.0 <= thre <= 1.0:
        raise ValidationError(f"Routing threshold must be in [0, 1], got {thre}")
    score, name = uncertainty_with_class(model, pool, raw)
    return decide(score, name, thre)


def edge_fraction(margins: np.ndarray, thre: float) -> float:
    margins = np.asarray(margins, dtype=np.float64)
    return float(np.mean(margins >= thre)) if margins.size else 0.0


def upload_fraction(margins: np.ndarray, v_thre: float = DEFAULT_UPLOAD_THRESHOLD) -> float:
    margins = np.asarray(margins, dtype=np.float64)
    return float(np.mean(margins < v_thre)) if margins.size else 0.0


class UploadGate:
    """
    Customization upload filter.

    Until the edge holds a customized model every sample is uploaded.
    """

    def __init__(self, v_thre: float = DEFAULT_UPLOAD_THRESHOLD):
        self.v_thre = v_thre
        self.model_ready = False
        self.seen = 0
        self.uploaded = 0

    def mark_model_ready(self) -> None:
        self.model_ready = True

    def admit(self, score: Optional[UncertaintyScore]) -> bool:
        self.seen += 1
        upload = not self.model_ready or score is None or should_upload(score, self.v_thre)
        if upload:
            self.uploaded += 1
        return upload

    @property
    def fraction(self) -> float:
        return self.uploaded / self.seen if self.seen else 0.0


AUDIT_COLUMNS = ["time", "sample_id", "unc", "thre", "route", "predicted_class"]


class DecisionAuditLog:
    """Per-sample routing audit trail."""

    def __init__(self):
        self._rows: List[Tuple[float, int, float, float, str, str]] = []
        self._lock = threading.Lock()

    def record(self, time: float, sample_id: int, decision: RouterDecision, predicted_class: str) -> None:
        with self._lock:
            self._rows.append(
                (time, sample_id, decision.unc.unc, decision.threshold_used, decision.route.value, predicted_class)
            )

    def __len__(self) -> int:
        return len(self._rows)

    def rows(self) -> List[Tuple[float, int, float, float, str, str]]:
        with self._lock:
            return list(self._rows)

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="", encoding="utf-8") as handle:
                writer = csv.writer(handle, lineterminator="\n")
                writer.writerow(AUDIT_COLUMNS)
                for time, sample_id, unc, thre, target, predicted in self.rows():
                    writer.writerow([f"{time:.6f}", sample_id, f"{unc:.6f}", f"{thre:.2f}", target, predicted])
        except OSError as e:
            raise FileSystemError(f"Failed to write audit log {path}: {e}") from e
        logger.debug(f"Wrote {len(self)} routing decisions to {path}")
        return path
