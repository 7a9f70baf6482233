"""
Network Adaptation Module

Threshold-searching table construction from a calibration set, end-to-end
latency estimation, runtime threshold solving for latency or accuracy priority,
exponential bandwidth estimation from probes and bandwidth trace replay.
"""

import csv
import math
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Deque, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.customizer import SmallModel
from src.embeddings import TextEmbeddingPool
from src.error_handler import (
    EmptyCalibrationError,
    FileSystemError,
    InvalidConfigError,
    NonPositiveBandwidthError,
    NonPositiveMeasurementError,
    TraceFormatError,
    ValidationError,
)
from src.fm_oracle import Sample
from src.gatekeeper import uncertainty_batch
from src.model_select import DeviceProfile, Priority
from src.structured_logger import get_logger

logger = get_logger("edgefm.netadapt")

DEFAULT_GRID_STEP = 0.05
DEFAULT_SAMPLE_BITS = 3 * 224 * 224 * 8
DEFAULT_BETA = 0.5
NO_TABLE_THRESHOLD = 1.0
MBPS = 1e6


def threshold_grid(step: float = DEFAULT_GRID_STEP) -> List[float]:
    """Grid thresholds k * step strictly inside (0, 1)."""
    if not 0.0 < step <= 0.5:
        raise InvalidConfigError(f"Grid step must be in (0, 0.5], got {step}")
    grid = []
    k = 1
    while k * step < 1.0 - 1e-9:
        grid.append(round(k * step, 10))
        k += 1
    return grid


@dataclass(frozen=True)
class ThresholdRow:
    thre: float
    r: float
    acc: float
    t_edge: float
    t_cloud: float
    true_acc: float = float("nan")


@dataclass(frozen=True)
class LatencyModel:
    """Bits per offloaded sample and per-sample processing times in milliseconds."""

    dim_bits: float = DEFAULT_SAMPLE_BITS
    t_edge_ms: float = 20.0
    t_cloud_ms: float = 10.0

    def __post_init__(self):
        if self.dim_bits <= 0 or self.t_edge_ms <= 0 or self.t_cloud_ms <= 0:
            raise ValidationError("Latency model values must all be positive")


@dataclass(frozen=True)
class ThresholdTable:
    rows: Tuple[ThresholdRow, ...]
    grid_step: float = DEFAULT_GRID_STEP
    calibration_size: int = 0

    def __post_init__(self):
        if not self.rows:
            raise ValidationError("A threshold table needs at least one row")
        thresholds = [row.thre for row in self.rows]
        if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
            raise ValidationError("Table thresholds must be strictly increasing")

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def thresholds(self) -> List[float]:
        return [row.thre for row in self.rows]

    @property
    def grid_min(self) -> float:
        return self.rows[0].thre

    @property
    def grid_max(self) -> float:
        return self.rows[-1].thre

    def row_at(self, thre: float) -> ThresholdRow:
        for row in self.rows:
            if math.isclose(row.thre, thre, abs_tol=1e-9):
                return row
        raise ValidationError(f"Threshold {thre} is not on the table grid")

    def monotonicity(self) -> Tuple[bool, bool]:
        """(r non-increasing, acc non-decreasing) over the grid."""
        rs = [row.r for row in self.rows]
        accs = [row.acc for row in self.rows]
        r_ok = all(b <= a for a, b in zip(rs, rs[1:]))
        acc_ok = all(b >= a for a, b in zip(accs, accs[1:]))
        return r_ok, acc_ok

    def write_csv(
        self,
        path: Union[str, Path],
        bandwidth_bps: Optional[float] = None,
        latency: Optional[LatencyModel] = None,
    ) -> Path:
        """Write rows with a monotonicity stamp; adds estimated latency when a bandwidth is given."""
        path = Path(path)
        r_ok, acc_ok = self.monotonicity()
        with_estimate = bandwidth_bps is not None
        header = ["thre", "r", "acc", "true_acc", "t_edge_ms", "t_cloud_ms"]
        if with_estimate:
            header.append("estimated_latency_ms")
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="", encoding="utf-8") as handle:
                handle.write(f"# monotone_r={str(r_ok).lower()} monotone_acc={str(acc_ok).lower()}\n")
                handle.write(f"# grid_step={self.grid_step} calibration_size={self.calibration_size}\n")
                writer = csv.writer(handle, lineterminator="\n")
                writer.writerow(header)
                for row in self.rows:
                    values = [
                        f"{row.thre:.2f}",
                        f"{row.r:.6f}",
                        f"{row.acc:.6f}",
                        f"{row.true_acc:.6f}",
                        f"{row.t_edge:.6f}",
                        f"{row.t_cloud:.6f}",
                    ]
                    if with_estimate:
                        values.append(f"{estimate_latency(row, bandwidth_bps, latency or LatencyModel()):.6f}")
                    writer.writerow(values)
        except OSError as e:
            raise FileSystemError(f"Failed to write threshold table {path}: {e}") from e
        return path


def measure_latency(
    model: SmallModel,
    pool: TextEmbeddingPool,
    calibration: Sequence[Sample],
    cloud_predict: Callable[[np.ndarray], object],
    dim_bits: float = DEFAULT_SAMPLE_BITS,
) -> LatencyModel:
    """Wall-clock mean per-sample edge and cloud processing times over the calibration set."""
    if not calibration:
        raise EmptyCalibrationError("Latency measurement needs calibration samples")
    started = time.perf_counter()
    for sample in calibration:
        uncertainty_batch(model, pool, sample.raw)
    t_edge = (time.perf_counter() - started) * 1000.0 / len(calibration)
    started = time.perf_counter()
    for sample in calibration:
        cloud_predict(sample.raw)
    t_cloud = (time.perf_counter() - started) * 1000.0 / len(calibration)
    # timer resolution can round very fast passes to zero
    return LatencyModel(dim_bits=dim_bits, t_edge_ms=max(t_edge, 1e-6), t_cloud_ms=max(t_cloud, 1e-6))


def build_table(
    model: SmallModel,
    pool: TextEmbeddingPool,
    fm_predictions: Sequence[str],
    calibration: Sequence[Sample],
    grid_step: float = DEFAULT_GRID_STEP,
    latency: Optional[LatencyModel] = None,
    cloud_predict: Optional[Callable[[np.ndarray], object]] = None,
) -> ThresholdTable:
    """
    Tabulate edge fraction and FM-agreement accuracy per grid threshold.

    ``fm_predictions`` holds the cloud answer for each calibration sample and
    serves as ground truth for ``acc``; ``true_acc`` scores the same hybrid
    answers against the hidden true classes. Processing times come from
    ``latency`` when given, otherwise they are measured, which needs
    ``cloud_predict``.
    """
    if not calibration:
        raise EmptyCalibrationError("Cannot build a threshold table from an empty calibration set")
    if len(fm_predictions) != len(calibration):
        raise ValidationError("Need one FM prediction per calibration sample")
    grid = threshold_grid(grid_step)
    if latency is None:
        if cloud_predict is None:
            raise InvalidConfigError("Measuring latency needs a cloud prediction function")
        latency = measure_latency(model, pool, calibration, cloud_predict)

    margins, edge_answers = uncertainty_batch(model, pool, np.vstack([s.raw for s in calibration]))
    fm_answers = np.array(fm_predictions, dtype=object)
    truth = np.array([s.true_class for s in calibration], dtype=object)
    agrees = np.array(edge_answers, dtype=object) == fm_answers
    edge_correct = np.array(edge_answers, dtype=object) == truth
    cloud_correct = fm_answers == truth

    rows = []
    for thre in grid:
        on_edge = margins >= thre
        rows.append(
            ThresholdRow(
                thre=thre,
                r=float(np.mean(on_edge)),
                acc=float(np.mean(np.where(on_edge, agrees, True))),
                t_edge=latency.t_edge_ms,
                t_cloud=latency.t_cloud_ms,
                true_acc=float(np.mean(np.where(on_edge, edge_correct, cloud_correct))),
            )
        )
    table = ThresholdTable(rows=tuple(rows), grid_step=grid_step, calibration_size=len(calibration))
    r_ok, acc_ok = table.monotonicity()
    logger.info(
        f"Built threshold table: {len(table)} rows from {len(calibration)} samples, "
        f"r in [{rows[-1].r:.3f}, {rows[0].r:.3f}], monotone_r={r_ok}, monotone_acc={acc_ok}"
    )
    return table


def transmission_ms(dim_bits: float, bandwidth_bps: float) -> float:
    if bandwidth_bps <= 0:
        raise NonPositiveBandwidthError(f"Bandwidth must be positive, got {bandwidth_bps}")
    return dim_bits / bandwidth_bps * 1000.0


def estimate_latency(row: ThresholdRow, bandwidth_bps: float, latency: LatencyModel) -> float:
    """r * t_edge + (1 - r) * (t_trans + t_cloud) in milliseconds."""
    t_trans = transmission_ms(latency.dim_bits, bandwidth_bps)
    return row.r * row.t_edge + (1.0 - row.r) * (t_trans + row.t_cloud)


def solve_threshold(
    table: ThresholdTable,
    bandwidth_bps: float,
    latency: LatencyModel,
    profile: DeviceProfile,
) -> float:
    """
    Latency priority: largest threshold whose estimate meets the bound, else
    the grid minimum. Accuracy priority: smallest threshold within the
    degradation bound of the grid-maximum accuracy, else the grid maximum.
    """
    if bandwidth_bps <= 0:
        raise NonPositiveBandwidthError(f"Bandwidth must be positive, got {bandwidth_bps}")
    if profile.priority is Priority.LATENCY:
        for row in reversed(table.rows):
            if estimate_latency(row, bandwidth_bps, latency) <= profile.latency_bound_ms:
                return row.thre
        return table.grid_min

    best_acc = table.rows[-1].acc
    for row in table.rows:
        if best_acc - row.acc <= profile.accuracy_degradation_bound:
            return row.thre
    return table.grid_max


class BandwidthEstimator:
    """Exponential average of probed throughput: B <- beta * measured + (1 - beta) * B."""

    def __init__(self, beta: float = DEFAULT_BETA, history_size: int = 256):
        if not 0.0 < beta <= 1.0:
            raise InvalidConfigError(f"beta must be in (0, 1], got {beta}")
        self.beta = beta
        self.history: Deque[Tuple[float, float]] = deque(maxlen=history_size)
        self.estimate: Optional[float] = None

    def probe_update(self, timestamp: float, measured_bps: float) -> "BandwidthEstimator":
        if not measured_bps > 0:
            raise NonPositiveMeasurementError(f"Measured bandwidth must be positive, got {measured_bps}")
        self.history.append((timestamp, measured_bps))
        if self.estimate is None:
            self.estimate = float(measured_bps)
        else:
            self.estimate = self.beta * measured_bps + (1.0 - self.beta) * self.estimate
        return self

    @property
    def ready(self) -> bool:
        return self.estimate is not None


def probe_update(estimator: BandwidthEstimator, timestamp: float, measured_bps: float) -> BandwidthEstimator:
    return estimator.probe_update(timestamp, measured_bps)


class BandwidthTrace:
    """Piecewise-constant bandwidth over time; before the first point the first value holds."""

    def __init__(self, points: Sequence[Tuple[float, float]]):
        if not points:
            raise TraceFormatError("A bandwidth trace needs at least one point")
        times = [float(t) for t, _ in points]
        values = [float(b) for _, b in points]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise TraceFormatError("Trace timestamps must be strictly increasing")
        if any(not (v > 0 and math.isfinite(v)) for v in values):
            raise TraceFormatError("Trace bandwidths must be positive and finite")
        self.times = np.array(times)
        self.values = np.array(values)

    @classmethod
    def constant(cls, mbps: float) -> "BandwidthTrace":
        return cls([(0.0, mbps * MBPS)])

    @classmethod
    def step(cls, points_mbps: Sequence[Tuple[float, float]]) -> "BandwidthTrace":
        return cls([(t, mbps * MBPS) for t, mbps in points_mbps])

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "BandwidthTrace":
        """Read ``t_seconds,bandwidth_mbps`` lines; a header row and ``#`` comments are skipped."""
        path = Path(path)
        if not path.is_file():
            raise TraceFormatError(
                f"Bandwidth trace not found: {path}",
                recovery_suggestions=["Check the trace.path setting or the --trace option"],
            )
        points = []
        try:
            with open(path, newline="", encoding="utf-8") as handle:
                for lineno, record in enumerate(csv.reader(handle), start=1):
                    if not record or not record[0].strip() or record[0].lstrip().startswith("#"):
                        continue
                    if lineno == 1 and record[0].strip() == "t_seconds":
                        continue
                    if len(record) != 2:
                        raise TraceFormatError(f"{path}:{lineno}: expected 2 fields, got {len(record)}")
                    try:
                        points.append((float(record[0]), float(record[1]) * MBPS))
                    except ValueError:
                        raise TraceFormatError(f"{path}:{lineno}: non-numeric field") from None
        except OSError as e:
            raise TraceFormatError(f"Failed to read bandwidth trace {path}: {e}") from e
        return cls(points)

    def bandwidth_at(self, t: float) -> float:
        index = int(np.searchsorted(self.times, t, side="right")) - 1
        return float(self.values[max(index, 0)])

    def transmit_end(self, start: float, bits: float) -> float:
        """Time at which ``bits`` sent from ``start`` finish, integrating the trace."""
        if bits <= 0:
            return start
        index = max(int(np.searchsorted(self.times, start, side="right")) - 1, 0)
        now = start
        remaining = float(bits)
        while True:
            rate = self.values[index]
            segment_end = self.times[index + 1] if index + 1 < len(self.times) else math.inf
            capacity = rate * (segment_end - now)
            if remaining <= capacity:
                return now + remaining / rate
            remaining -= capacity
            now = segment_end
            index += 1


@dataclass(frozen=True)
class ThresholdDecision:
    t_seconds: float
    bandwidth_mbps: float
    thre: float
    estimated_latency_ms: float


DECISION_COLUMNS = ["t_seconds", "B_mbps", "thre", "estimated_latency_ms"]
DECISION_HISTORY = 100_000


@dataclass
class AdaptationController:
    """
    Publishes the routing threshold from bandwidth probes and the current table.

    ``thre`` is replaced by a single attribute assignment, so readers never
    see a partial update. Without a table the threshold stays at 1.0.
    """

    profile: DeviceProfile
    latency: LatencyModel = field(default_factory=LatencyModel)
    estimator: BandwidthEstimator = field(default_factory=BandwidthEstimator)
    table: Optional[ThresholdTable] = None
    thre: float = NO_TABLE_THRESHOLD
    history_size: int = DECISION_HISTORY
    decisions: Deque[ThresholdDecision] = field(init=False)

    def __post_init__(self):
        if self.history_size < 1:
            raise ValidationError("Decision history size must be at least 1")
        self.decisions = deque(maxlen=self.history_size)

    def set_table(self, table: ThresholdTable, now: Optional[float] = None) -> float:
        self.table = table
        if self.estimator.ready:
            self._publish(self.estimator.estimate, now)
        return self.thre

    def on_probe(self, timestamp: float, measured_bps: float) -> float:
        self.estimator.probe_update(timestamp, measured_bps)
        self._publish(self.estimator.estimate, timestamp)
        return self.thre

    def estimated_latency(self) -> float:
        if self.table is None or not self.estimator.ready:
            return float("nan")
        return estimate_latency(self.table.row_at(self.thre), self.estimator.estimate, self.latency)

    def _publish(self, bandwidth_bps: float, timestamp: Optional[float]) -> None:
        previous = self.thre
        if self.table is not None:
            self.thre = solve_threshold(self.table, bandwidth_bps, self.latency, self.profile)
        if timestamp is not None:
            self.decisions.append(
                ThresholdDecision(timestamp, bandwidth_bps / MBPS, self.thre, self.estimated_latency())
            )
        if self.thre != previous:
            logger.info(f"Threshold {previous:.2f} -> {self.thre:.2f} at B={bandwidth_bps / MBPS:.2f} Mbps")
        else:
            logger.debug(f"Threshold {self.thre:.2f} held at B={bandwidth_bps / MBPS:.2f} Mbps")

    def write_csv(self, path: Union[str, Path]) -> Path:
        return write_decisions_csv(path, self.decisions)


def write_decisions_csv(path: Union[str, Path], decisions: Iterable[ThresholdDecision]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(DECISION_COLUMNS)
            for d in decisions:
                writer.writerow(
                    [f"{d.t_seconds:.3f}", f"{d.bandwidth_mbps:.6f}", f"{d.thre:.2f}", f"{d.estimated_latency_ms:.6f}"]
                )
    except OSError as e:
        raise FileSystemError(f"Failed to write threshold decisions {path}: {e}") from e
    return path
