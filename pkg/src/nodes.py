"""
Edge and Cloud Nodes

Transport-independent node logic shared by the discrete-event simulator and
the live socket mode. Nodes exchange encoded frames; the cloud owns the
foundation model, the upload buffer and customization, while the edge owns
the small model, routing and threshold adaptation.
"""

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.customizer import (
    SmallModel,
    TrainConfig,
    TrainingLog,
    Variant,
    checkpoint_bytes,
    model_from_checkpoint,
    train,
)
from src.embeddings import TextEmbeddingPool
from src.error_handler import ProtocolError, ValidationError
from src.fm_oracle import (
    Sample,
    SyntheticWorld,
    build_pool,
    fm_predict,
    fm_predict_batch,
    query_with_embedding,
)
from src.gatekeeper import (
    DEFAULT_UPLOAD_THRESHOLD,
    RouteTarget,
    RouterDecision,
    UncertaintyScore,
    UploadGate,
    decide,
    uncertainty_with_class,
)
from src.model_select import DeviceProfile, DeviceProfiler, ModelPool, ModelSpec
from src.netadapt import (
    AdaptationController,
    BandwidthEstimator,
    LatencyModel,
    ThresholdTable,
    build_table,
)
from src.protocol import (
    Frame,
    InferResponse,
    MsgType,
    PseudoResponse,
    decode_infer_response,
    decode_model_update,
    decode_pool_update,
    decode_probe_ack,
    decode_pseudo,
    decode_sample,
    encode_infer_response,
    encode_model_update,
    encode_pool_update,
    encode_probe_ack,
    encode_pseudo,
)
from src.structured_logger import get_logger

logger = get_logger("edgefm.nodes")

UNKNOWN_CLASS = ""


@dataclass(frozen=True)
class CloudUpdate:
    """One customization round: the pushed model and table plus its training log."""

    model: SmallModel
    table: ThresholdTable
    log: TrainingLog
    upload_count: int

    def frames(self, pool: TextEmbeddingPool) -> List[Frame]:
        """POOL_UPDATE first so the table always meets a pool containing its classes."""
        return [
            Frame(MsgType.POOL_UPDATE, encode_pool_update(pool)),
            Frame(MsgType.MODEL_UPDATE, encode_model_update(self.model, self.table)),
        ]


class CloudNode:
    """
    Cloud side: knowledge and inference queries, upload buffering and
    periodic customization for one profiled edge device.

    ``label_of`` maps a sample id to its hidden class for evaluation columns;
    without it the FM answer stands in.
    """

    def __init__(
        self,
        world: SyntheticWorld,
        pool: TextEmbeddingPool,
        profile: DeviceProfile,
        model_pool: ModelPool,
        train_config: Optional[TrainConfig] = None,
        variant: Union[str, Variant] = Variant.SEMANTIC,
        min_upload: int = 100,
        calibration_size: int = 200,
        grid_step: float = 0.05,
        latency: Optional[LatencyModel] = None,
        label_of: Optional[Callable[[int], str]] = None,
    ):
        self.world = world
        self.pool = pool
        self.profiler = DeviceProfiler(model_pool)
        self.profiler.register(profile)
        self.profile = profile
        self.spec: ModelSpec = self.profiler.select_for(profile.device_id)
        self.train_config = train_config or TrainConfig()
        self.variant = Variant.parse(variant)
        self.min_upload = min_upload
        self.calibration_size = calibration_size
        self.grid_step = grid_step
        self.latency = latency or LatencyModel()
        self.label_of = label_of
        self.uploads: List[Sample] = []
        self.trained_upto = 0
        self.model: Optional[SmallModel] = None
        self.updates: List[CloudUpdate] = []

    def _as_sample(self, sample_id: int, raw: np.ndarray, fm_class: str) -> Sample:
        label = self.label_of(sample_id) if self.label_of is not None else fm_class
        return Sample(id=sample_id, raw=raw, true_class=label)

    def handle_frame(self, frame: Frame) -> Optional[Frame]:
        """Answer one edge frame; the reply frame, if any, is returned."""
        if frame.msg_type is MsgType.QUERY_KNOWLEDGE:
            sample_id, raw = decode_sample(frame.payload)
            embedding, label = query_with_embedding(self.world, self.pool, raw)
            self.uploads.append(self._as_sample(sample_id, raw, label.class_name))
            reply = PseudoResponse(sample_id, label.confidence, label.class_name, label.text_embedding)
            return Frame(MsgType.PSEUDO_RESPONSE, encode_pseudo(reply))
        if frame.msg_type is MsgType.INFER_REQUEST:
            sample_id, raw = decode_sample(frame.payload)
            name, similarity = fm_predict(self.world, self.pool, raw)
            return Frame(MsgType.INFER_RESPONSE, encode_infer_response(InferResponse(sample_id, similarity, name)))
        if frame.msg_type is MsgType.BW_PROBE:
            return Frame(MsgType.PROBE_ACK, encode_probe_ack(len(frame.payload)))
        raise ProtocolError(f"Cloud does not accept {frame.msg_type.name} frames")

    @property
    def pending_uploads(self) -> int:
        return len(self.uploads) - self.trained_upto

    def ready_for_update(self) -> bool:
        return self.pending_uploads >= self.min_upload

    def add_classes(self, class_names: Sequence[str]) -> Frame:
        """Extend the text embedding pool and return the POOL_UPDATE to push."""
        fresh = [name for name in class_names if name not in self.pool]
        if fresh:
            self.pool = build_pool(self.world, fresh, pool=self.pool)
        return Frame(MsgType.POOL_UPDATE, encode_pool_update(self.pool))

    def customize(self) -> CloudUpdate:
        """Retrain on every upload so far and tabulate the latest calibration window."""
        if not self.uploads:
            raise ValidationError("Customization needs uploaded samples")
        model, log = train(
            self.world,
            self.pool,
            self.uploads,
            self.train_config,
            self.variant,
            model=self.model.copy() if self.model is not None else None,
            arch_id=self.spec.arch_id,
            hidden_dim=self.spec.hidden_dim,
        )
        # the edge runs the float32 checkpoint, so tabulate exactly that model
        shipped = model_from_checkpoint(checkpoint_bytes(model))
        calibration = self.uploads[-self.calibration_size :]
        fm_answers = fm_predict_batch(self.world, self.pool, np.vstack([s.raw for s in calibration]))
        table = build_table(shipped, self.pool, fm_answers, calibration, self.grid_step, latency=self.latency)
        self.model = model
        self.trained_upto = len(self.uploads)
        update = CloudUpdate(shipped, table, log, len(self.uploads))
        self.updates.append(update)
        logger.info(
            f"Customization round {len(self.updates)}: {len(self.uploads)} uploads, "
            f"pool v{self.pool.version}, holdout accuracy {log.final_accuracy:.4f}"
        )
        return update


class EdgeNode:
    """
    Edge side: routing with the published threshold, upload gating and
    application of cloud updates between requests.
    """

    def __init__(
        self,
        pool: TextEmbeddingPool,
        profile: DeviceProfile,
        latency: Optional[LatencyModel] = None,
        beta: float = 0.5,
        v_thre: float = DEFAULT_UPLOAD_THRESHOLD,
        model: Optional[SmallModel] = None,
        table: Optional[ThresholdTable] = None,
    ):
        self.pool = pool
        self.profile = profile
        self.model = model
        self.controller = AdaptationController(
            profile=profile,
            latency=latency or LatencyModel(),
            estimator=BandwidthEstimator(beta),
        )
        self.gate = UploadGate(v_thre)
        if model is not None:
            self.gate.mark_model_ready()
        if table is not None:
            self.controller.set_table(table)
        self.model_version = 0

    @property
    def thre(self) -> float:
        return self.controller.thre

    def decide(self, raw: np.ndarray, thre: Optional[float] = None) -> Tuple[RouterDecision, bool]:
        """Routing decision and upload verdict for one sample."""
        thre = self.controller.thre if thre is None else thre
        if self.model is None:
            score = UncertaintyScore(math.nan, math.nan, math.nan)
            return decide(score, UNKNOWN_CLASS, thre), self.gate.admit(None)
        score, name = uncertainty_with_class(self.model, self.pool, raw)
        return decide(score, name, thre), self.gate.admit(score)

    def decide_fixed(self, raw: np.ndarray, target: RouteTarget) -> Tuple[RouterDecision, bool]:
        """Forced routing for the cloud-only and edge-only baselines."""
        if target is RouteTarget.CLOUD or self.model is None:
            decision, upload = self.decide(raw, thre=1.0)
            if decision.route is RouteTarget.EDGE:
                decision = RouterDecision(RouteTarget.CLOUD, 0, decision.unc, 1.0, decision.edge_class)
            return decision, upload
        score, name = uncertainty_with_class(self.model, self.pool, raw)
        return decide(score, name, 0.0), self.gate.admit(score)

    def on_probe(self, timestamp: float, measured_bps: float) -> float:
        return self.controller.on_probe(timestamp, measured_bps)

    def apply_frame(self, frame: Frame, now: Optional[float] = None):
        """Apply a cloud frame; responses are decoded and returned."""
        if frame.msg_type is MsgType.MODEL_UPDATE:
            model, table = decode_model_update(frame.payload)
            self.model = model
            self.model_version += 1
            self.gate.mark_model_ready()
            if table is not None:
                self.controller.set_table(table, now)
            logger.info(f"Edge applied model update {self.model_version} ({model.arch_id}), thre={self.thre:.2f}")
            return model
        if frame.msg_type is MsgType.POOL_UPDATE:
            pool = decode_pool_update(frame.payload, self.pool.prompt)
            if pool.version > self.pool.version:
                self.pool = pool
                logger.info(f"Edge pool now v{pool.version} with {len(pool)} classes")
            return pool
        if frame.msg_type is MsgType.INFER_RESPONSE:
            return decode_infer_response(frame.payload)
        if frame.msg_type is MsgType.PSEUDO_RESPONSE:
            return decode_pseudo(frame.payload)
        if frame.msg_type is MsgType.PROBE_ACK:
            return decode_probe_ack(frame.payload)
        raise ProtocolError(f"Edge does not accept {frame.msg_type.name} frames")
