"""
Live Socket Mode

Runs the cloud and edge nodes over a real TCP stream with the simulator's
frame codec. The cloud answers one edge connection at a time and pushes
POOL_UPDATE / MODEL_UPDATE frames after a reply once enough uploads have
accumulated; the edge applies pushed updates between requests.
"""

import socket
import time
from dataclasses import dataclass
from typing import Iterable, List, Optional, Tuple

from src.error_handler import InvalidConfigError, ProtocolError
from src.fm_oracle import Sample
from src.gatekeeper import DecisionAuditLog
from src.netadapt import MBPS
from src.nodes import CloudNode, EdgeNode
from src.protocol import MsgType, encode_probe, encode_sample, recv_frame, send_frame
from src.structured_logger import get_logger

logger = get_logger("edgefm.live")

DEFAULT_PROBE_BYTES = 64 * 1024


class CloudServer:
    """Serves edge connections sequentially; each connection is handled frame by frame."""

    def __init__(self, cloud: CloudNode, host: str = "127.0.0.1", port: int = 0):
        self.cloud = cloud
        self.host = host
        self.port = port
        self.frames_served = 0
        self.updates_pushed = 0

    def serve_connection(self, conn: socket.socket) -> None:
        """Handle frames until the peer closes the connection."""
        while True:
            frame = recv_frame(conn)
            if frame is None:
                break
            reply = self.cloud.handle_frame(frame)
            if reply is not None:
                send_frame(conn, reply.msg_type, reply.payload)
            self.frames_served += 1
            if frame.msg_type is MsgType.QUERY_KNOWLEDGE and self.cloud.ready_for_update():
                update = self.cloud.customize()
                for pushed in update.frames(self.cloud.pool):
                    send_frame(conn, pushed.msg_type, pushed.payload)
                self.updates_pushed += 1
                logger.info(f"Pushed update {self.updates_pushed} after {update.upload_count} uploads")

    def serve(self, max_connections: Optional[int] = 1) -> None:
        with socket.create_server((self.host, self.port)) as server:
            self.port = server.getsockname()[1]
            logger.info(f"Cloud listening on {self.host}:{self.port}")
            served = 0
            while max_connections is None or served < max_connections:
                conn, peer = server.accept()
                logger.info(f"Edge connected from {peer[0]}:{peer[1]}")
                with conn:
                    try:
                        self.serve_connection(conn)
                    except ProtocolError as e:
                        logger.warning(f"Dropping connection after protocol error: {e}")
                served += 1


@dataclass(frozen=True)
class LiveResult:
    sample_id: int
    route: str
    thre: float
    unc: float
    predicted: str
    true_class: str
    uploaded: bool
    latency_ms: float


class EdgeClient:
    """Edge side of a live connection."""

    def __init__(
        self,
        edge: EdgeNode,
        sock: socket.socket,
        probe_bytes: int = DEFAULT_PROBE_BYTES,
        audit: Optional[DecisionAuditLog] = None,
    ):
        if probe_bytes < 0:
            raise InvalidConfigError(f"probe_bytes must be non-negative, got {probe_bytes}")
        self.edge = edge
        self.sock = sock
        self.probe_bytes = probe_bytes
        self.audit = audit if audit is not None else DecisionAuditLog()
        self.started = time.monotonic()

    def _await(self, expected: MsgType):
        """Read frames until ``expected`` arrives, applying pushed updates on the way."""
        while True:
            frame = recv_frame(self.sock)
            if frame is None:
                raise ProtocolError(f"Cloud closed the connection while awaiting {expected.name}")
            result = self.edge.apply_frame(frame, self._now())
            if frame.msg_type is expected:
                return result

    def _now(self) -> float:
        return time.monotonic() - self.started

    def probe(self) -> Tuple[float, float]:
        """Time one BW_PROBE round trip; returns (measured bps, published thre)."""
        payload = encode_probe(self.probe_bytes)
        sent_at = time.perf_counter()
        size = send_frame(self.sock, MsgType.BW_PROBE, payload)
        self._await(MsgType.PROBE_ACK)
        elapsed = max(time.perf_counter() - sent_at, 1e-6)
        measured = size * 8.0 / elapsed
        thre = self.edge.on_probe(self._now(), measured)
        logger.debug(f"Probe measured {measured / MBPS:.2f} Mbps, thre={thre:.2f}")
        return measured, thre

    def infer(self, sample: Sample) -> LiveResult:
        started = time.perf_counter()
        decision, upload = self.edge.decide(sample.raw)
        if upload:
            send_frame(self.sock, MsgType.QUERY_KNOWLEDGE, encode_sample(sample.id, sample.raw))
            self._await(MsgType.PSEUDO_RESPONSE)
        if decision.on_edge:
            predicted = decision.edge_class
        else:
            send_frame(self.sock, MsgType.INFER_REQUEST, encode_sample(sample.id, sample.raw))
            predicted = self._await(MsgType.INFER_RESPONSE).class_name
        self.audit.record(self._now(), sample.id, decision, predicted)
        return LiveResult(
            sample_id=sample.id,
            route=decision.route.value,
            thre=decision.threshold_used,
            unc=decision.unc.unc,
            predicted=predicted,
            true_class=sample.true_class,
            uploaded=upload,
            latency_ms=(time.perf_counter() - started) * 1000.0,
        )

    def run(self, samples: Iterable[Sample], probe_every: int = 10) -> List[LiveResult]:
        if probe_every < 1:
            raise InvalidConfigError(f"probe_every must be at least 1, got {probe_every}")
        results = []
        for index, sample in enumerate(samples):
            if index % probe_every == 0:
                self.probe()
            results.append(self.infer(sample))
        return results


def connect_edge(
    edge: EdgeNode, host: str, port: int, probe_bytes: int = DEFAULT_PROBE_BYTES, timeout: float = 30.0
) -> EdgeClient:
    sock = socket.create_connection((host, port), timeout=timeout)
    return EdgeClient(edge, sock, probe_bytes=probe_bytes)


def summarize(results: List[LiveResult]) -> dict:
    if not results:
        return {"samples": 0}
    edge = sum(1 for r in results if r.route == "edge")
    return {
        "samples": len(results),
        "edge_fraction": edge / len(results),
        "upload_fraction": sum(r.uploaded for r in results) / len(results),
        "true_accuracy": sum(r.predicted == r.true_class for r in results) / len(results),
        "mean_latency_ms": sum(r.latency_ms for r in results) / len(results),
    }
