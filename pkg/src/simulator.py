"""
Edge-Cloud Discrete-Event Simulator

Runs an edge node and a cloud node over a bandwidth-trace-driven link in
virtual time with simpy: Poisson sample arrivals, routing, offloaded inference,
customization uploads, periodic model and pool updates, bandwidth probes and
environment-change schedules. Produces a MetricsReport that is byte-identical
for identical scenarios.
"""

import bisect
import csv
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import simpy

from src.customizer import TrainConfig, Variant
from src.embeddings import PromptTemplate
from src.error_handler import FileSystemError, InvariantViolationError, ScenarioError
from src.fm_oracle import Sample, SampleStream, build_pool, fm_predict, world_create
from src.gatekeeper import DEFAULT_UPLOAD_THRESHOLD, DecisionAuditLog, RouteTarget
from src.model_select import DeviceProfile, ModelPool, ModelSpec, reference_specs
from src.netadapt import MBPS, BandwidthTrace, LatencyModel, ThresholdDecision, write_decisions_csv
from src.nodes import CloudNode, EdgeNode
from src.protocol import HEADER_SIZE, SAMPLE_CARRYING, Frame, MsgType, encode_sample
from src.structured_logger import get_logger

logger = get_logger("edgefm.simulator")

DEFAULT_PROPAGATION_MS = 5.0
REPORT_COLUMNS = [
    "kind",
    "t",
    "sample_id",
    "route",
    "thre",
    "unc",
    "predicted",
    "true_class",
    "fm_class",
    "latency_ms",
    "queue_ms",
    "uploaded",
    "bandwidth_mbps",
    "detail",
]


class Policy(Enum):
    ADAPTIVE = "adaptive"
    CLOUD_ONLY = "cloud_only"
    EDGE_ONLY = "edge_only"
    FIXED = "fixed"

    @classmethod
    def parse(cls, value: Union[str, "Policy"]) -> "Policy":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            names = ", ".join(p.value for p in cls)
            raise ScenarioError(f"Unknown policy {value!r}; expected one of {names}") from None


@dataclass(frozen=True)
class ScheduleEntry:
    t_seconds: float
    classes: Tuple[str, ...]


@dataclass
class Scenario:
    """Everything one simulated run needs; validated before the run starts."""

    trace: BandwidthTrace
    profile: DeviceProfile
    world_seed: int = 7
    num_classes: int = 10
    input_dim: int = 256
    embed_dim: int = 64
    noise_sigma: float = 0.1
    fm_noise_sigma: float = 0.0
    class_names: Optional[List[str]] = None
    initial_classes: Optional[List[str]] = None
    distractor_classes: List[str] = field(default_factory=list)
    prompt: str = "a photo of a {CLS}."
    schedule: List[ScheduleEntry] = field(default_factory=list)
    arrival_rate: float = 2.0
    duration: float = 600.0
    update_interval: float = 200.0
    retrain_cost: float = 10.0
    min_upload: int = 100
    calibration_size: int = 200
    bootstrap_samples: int = 400
    policy: Policy = Policy.ADAPTIVE
    fixed_threshold: float = 0.5
    model_specs: List[ModelSpec] = field(default_factory=reference_specs)
    latency: LatencyModel = field(default_factory=LatencyModel)
    propagation_ms: float = DEFAULT_PROPAGATION_MS
    sample_bits: float = LatencyModel().dim_bits
    probe_interval: float = 1.0
    beta: float = 0.5
    v_thre: float = DEFAULT_UPLOAD_THRESHOLD
    grid_step: float = 0.05
    train_config: TrainConfig = field(default_factory=TrainConfig)
    variant: Variant = Variant.SEMANTIC
    edge_workers: int = 4
    cloud_workers: int = 4
    window_seconds: float = 50.0
    seed: int = 0

    def __post_init__(self):
        self.policy = Policy.parse(self.policy)
        self.variant = Variant.parse(self.variant)
        self.schedule = sorted(
            (
                entry if isinstance(entry, ScheduleEntry) else ScheduleEntry(float(entry[0]), tuple(entry[1]))
                for entry in self.schedule
            ),
            key=lambda entry: entry.t_seconds,
        )

    def world_classes(self) -> List[str]:
        if self.class_names is not None:
            return list(self.class_names)
        return [f"class_{i:02d}" for i in range(self.num_classes)]

    def starting_classes(self) -> List[str]:
        if self.initial_classes is not None:
            return list(self.initial_classes)
        scheduled = {name for entry in self.schedule for name in entry.classes}
        return [name for name in self.world_classes() if name not in scheduled]

    def validate(self) -> None:
        problems = []
        positives = {
            "arrival_rate": self.arrival_rate,
            "duration": self.duration,
            "update_interval": self.update_interval,
            "probe_interval": self.probe_interval,
            "sample_bits": self.sample_bits,
            "window_seconds": self.window_seconds,
        }
        problems.extend(f"{name} must be positive, got {value}" for name, value in positives.items() if not value > 0)
        if self.retrain_cost < 0 or self.propagation_ms < 0:
            problems.append("retrain_cost and propagation_ms must be non-negative")
        if self.min_upload < 1 or self.calibration_size < 1:
            problems.append("min_upload and calibration_size must be at least 1")
        if self.bootstrap_samples < 0:
            problems.append("bootstrap_samples must be non-negative")
        if self.edge_workers < 1 or self.cloud_workers < 1:
            problems.append("worker counts must be at least 1")
        if not 0.0 <= self.fixed_threshold <= 1.0:
            problems.append(f"fixed_threshold must be in [0, 1], got {self.fixed_threshold}")

        known = set(self.world_classes())
        starting = self.starting_classes()
        if not starting:
            problems.append("the environment must start with at least one class")
        for name in starting:
            if name not in known:
                problems.append(f"initial class {name!r} is not in the world")
        for entry in self.schedule:
            if not 0.0 <= entry.t_seconds <= self.duration:
                problems.append(f"schedule time {entry.t_seconds} lies outside [0, {self.duration}]")
            if not entry.classes:
                problems.append(f"schedule entry at {entry.t_seconds} adds no classes")
            for name in entry.classes:
                if name not in known:
                    problems.append(f"scheduled class {name!r} is not in the world")
                if name in starting:
                    problems.append(f"scheduled class {name!r} is already present at the start")
        for name in self.distractor_classes:
            if name in known:
                problems.append(f"distractor {name!r} collides with a world class")
        if problems:
            raise ScenarioError(
                f"Invalid scenario: {len(problems)} problem(s)",
                details={"problems": problems},
                user_message="Invalid scenario:\n  - " + "\n  - ".join(problems),
            )


@dataclass(frozen=True)
class Delivery:
    t_send: float
    t_start: float
    t_end: float
    t_arrive: float

    @property
    def queue_delay(self) -> float:
        return self.t_start - self.t_send


class LinkState:
    """
    One direction of the edge-cloud link.

    Frames leave in FIFO order; a frame starts transmitting when the previous
    one has finished, its bits drain at the trace bandwidth and it arrives one
    propagation delay after the last bit.
    """

    def __init__(
        self,
        trace: BandwidthTrace,
        propagation_ms: float = DEFAULT_PROPAGATION_MS,
        sample_bits: Optional[float] = None,
    ):
        self.trace = trace
        self.propagation_ms = propagation_ms
        self.sample_bits = sample_bits
        self.busy_until = 0.0
        self.frames_sent = 0
        self.bits_sent = 0.0

    def frame_bits(self, frame: Frame) -> float:
        if self.sample_bits is not None and frame.msg_type in SAMPLE_CARRYING:
            return HEADER_SIZE * 8 + self.sample_bits
        return len(frame) * 8.0

    def deliver(self, frame: Frame, t_send: float) -> Delivery:
        bits = self.frame_bits(frame)
        start = max(t_send, self.busy_until)
        end = self.trace.transmit_end(start, bits)
        self.busy_until = end
        self.frames_sent += 1
        self.bits_sent += bits
        return Delivery(t_send, start, end, end + self.propagation_ms / 1000.0)


def deliver(link: LinkState, frame: Frame, t_send: float) -> float:
    """Arrival time of ``frame`` handed to ``link`` at ``t_send``."""
    return link.deliver(frame, t_send).t_arrive


@dataclass
class SampleRecord:
    sample_id: int
    t_arrival: float
    true_class: str
    fm_class: str
    route: str = ""
    thre: float = math.nan
    unc: float = math.nan
    uploaded: bool = False
    status: str = "in_flight"
    predicted: str = ""
    latency_ms: float = math.nan
    queue_ms: float = 0.0


@dataclass(frozen=True)
class ControlEvent:
    t: float
    kind: str
    thre: float = math.nan
    bandwidth_mbps: float = math.nan
    detail: str = ""


def _fmt(value: float, digits: int = 6) -> str:
    return "" if value is None or (isinstance(value, float) and math.isnan(value)) else f"{value:.{digits}f}"


def _clean(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


@dataclass
class MetricsReport:
    policy: str
    duration: float
    propagation_ms: float
    window_seconds: float
    samples: List[SampleRecord]
    events: List[ControlEvent]
    emitted: int
    publications: List[Tuple[float, float]] = field(default_factory=list)
    audit: DecisionAuditLog = field(default_factory=DecisionAuditLog)
    threshold_decisions: List[ThresholdDecision] = field(default_factory=list)

    def _completed(self) -> List[SampleRecord]:
        return [s for s in self.samples if s.status == "done"]

    def counts(self) -> Dict[str, int]:
        decided = {"edge": 0, "cloud": 0, "in_flight": 0}
        for s in self.samples:
            if s.status != "done":
                decided["in_flight"] += 1
            else:
                decided[s.route] += 1
        return decided

    def windows(self) -> List[Dict[str, object]]:
        rows = []
        count = int(math.ceil(self.duration / self.window_seconds))
        for k in range(count):
            start, end = k * self.window_seconds, min((k + 1) * self.window_seconds, self.duration)
            routed = [s for s in self.samples if start <= s.t_arrival < end and s.route]
            done = [s for s in routed if s.status == "done"]
            rows.append(
                {
                    "start": start,
                    "end": end,
                    "samples": len(routed),
                    "edge_fraction": _clean(float(np.mean([s.route == "edge" for s in routed])) if routed else math.nan),
                    "true_accuracy": _clean(
                        float(np.mean([s.predicted == s.true_class for s in done])) if done else math.nan
                    ),
                }
            )
        return rows

    def summary(self) -> Dict[str, object]:
        counts = self.counts()
        done = self._completed()
        latencies = np.array([s.latency_ms for s in done]) if done else np.zeros(0)
        edge_latencies = np.array([s.latency_ms for s in done if s.route == "edge"])
        routed = counts["edge"] + counts["cloud"]
        return {
            "policy": self.policy,
            "duration_s": self.duration,
            "emitted": self.emitted,
            "edge": counts["edge"],
            "cloud": counts["cloud"],
            "in_flight": counts["in_flight"],
            "edge_fraction": _clean(counts["edge"] / routed if routed else math.nan),
            "upload_fraction": _clean(
                float(np.mean([s.uploaded for s in self.samples])) if self.samples else math.nan
            ),
            "true_accuracy": _clean(float(np.mean([s.predicted == s.true_class for s in done])) if done else math.nan),
            "fm_agreement": _clean(float(np.mean([s.predicted == s.fm_class for s in done])) if done else math.nan),
            "mean_latency_ms": _clean(float(latencies.mean()) if latencies.size else math.nan),
            "p95_latency_ms": _clean(float(np.percentile(latencies, 95)) if latencies.size else math.nan),
            "max_edge_latency_ms": _clean(float(edge_latencies.max()) if edge_latencies.size else math.nan),
            "thresholds_published": sorted({round(t, 10) for _, t in self.publications}),
            "model_updates": sum(1 for e in self.events if e.kind == "update"),
            "windows": self.windows(),
            "violations": self.verify(),
        }

    def threshold_at(self, t: float) -> float:
        """Threshold published most recently at or before ``t``."""
        times = [p[0] for p in self.publications]
        index = bisect.bisect_right(times, t) - 1
        return self.publications[index][1] if index >= 0 else math.nan

    def verify(self) -> List[str]:
        violations = []
        ids = [s.sample_id for s in self.samples]
        if len(ids) != self.emitted or len(set(ids)) != len(ids):
            violations.append(f"conservation: {self.emitted} emitted, {len(set(ids))} distinct records")
        counts = self.counts()
        if sum(counts.values()) != self.emitted:
            violations.append(f"conservation: outcome counts {counts} do not sum to {self.emitted}")
        floor = 2.0 * self.propagation_ms
        for s in self.samples:
            if s.status == "done" and s.route == "cloud" and s.latency_ms < floor - 1e-9:
                violations.append(f"latency: sample {s.sample_id} cloud latency {s.latency_ms:.6f} ms below {floor} ms")
            if s.route:
                on_edge = s.unc >= s.thre
                if on_edge != (s.route == "edge") and self.policy in (Policy.ADAPTIVE.value, Policy.FIXED.value):
                    violations.append(f"routing: sample {s.sample_id} route {s.route} disagrees with unc/thre")
                if self.policy == Policy.ADAPTIVE.value and self.publications:
                    published = self.threshold_at(s.t_arrival)
                    if not math.isclose(published, s.thre, abs_tol=1e-12):
                        violations.append(
                            f"offload: sample {s.sample_id} used thre {s.thre} but {published} was published"
                        )
        return violations

    def write(self, out_dir: Union[str, Path]) -> Tuple[Path, Path]:
        """Write ``report.csv`` (sample and control rows) and ``summary.json``."""
        out_dir = Path(out_dir)
        csv_path = out_dir / "report.csv"
        json_path = out_dir / "summary.json"
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            with open(csv_path, "w", newline="", encoding="utf-8") as handle:
                writer = csv.writer(handle, lineterminator="\n")
                writer.writerow(REPORT_COLUMNS)
                for s in sorted(self.samples, key=lambda r: r.sample_id):
                    writer.writerow(
                        [
                            "sample",
                            _fmt(s.t_arrival),
                            s.sample_id,
                            s.route or "undecided",
                            _fmt(s.thre, 2),
                            _fmt(s.unc),
                            s.predicted if s.status == "done" else "in_flight",
                            s.true_class,
                            s.fm_class,
                            _fmt(s.latency_ms),
                            _fmt(s.queue_ms),
                            int(s.uploaded),
                            "",
                            "",
                        ]
                    )
                for e in self.events:
                    writer.writerow(
                        [e.kind, _fmt(e.t), "", "", _fmt(e.thre, 2), "", "", "", "", "", "", "", _fmt(e.bandwidth_mbps), e.detail]
                    )
            with open(json_path, "w", encoding="utf-8") as handle:
                json.dump(self.summary(), handle, indent=2, sort_keys=True)
                handle.write("\n")
        except OSError as e:
            raise FileSystemError(f"Failed to write metrics report to {out_dir}: {e}") from e
        return csv_path, json_path

    def write_decision_logs(self, out_dir: Union[str, Path]) -> Tuple[Path, Path]:
        """Write the routing audit (``audit.csv``) and threshold decisions (``decisions.csv``)."""
        out_dir = Path(out_dir)
        audit_path = self.audit.write_csv(out_dir / "audit.csv")
        decisions_path = write_decisions_csv(out_dir / "decisions.csv", self.threshold_decisions)
        return audit_path, decisions_path


class EdgeCloudSimulation:
    """Builds both nodes for a scenario and drives them on a simpy clock."""

    def __init__(self, scenario: Scenario):
        scenario.validate()
        self.scenario = scenario
        self.world = world_create(
            seed=scenario.world_seed,
            num_classes=len(scenario.world_classes()),
            input_dim=scenario.input_dim,
            embed_dim=scenario.embed_dim,
            noise_sigma=scenario.noise_sigma,
            fm_noise_sigma=scenario.fm_noise_sigma,
            class_names=scenario.world_classes(),
        )
        starting = scenario.starting_classes()
        pool = build_pool(self.world, starting + list(scenario.distractor_classes), PromptTemplate(scenario.prompt))
        self.records: Dict[int, SampleRecord] = {}
        self.cloud = CloudNode(
            self.world,
            pool,
            scenario.profile,
            ModelPool(scenario.model_specs),
            train_config=scenario.train_config,
            variant=scenario.variant,
            min_upload=scenario.min_upload,
            calibration_size=scenario.calibration_size,
            grid_step=scenario.grid_step,
            latency=scenario.latency,
            label_of=lambda sample_id: self.records[sample_id].true_class,
        )
        self.edge = EdgeNode(pool, scenario.profile, scenario.latency, scenario.beta, scenario.v_thre)
        self.stream = SampleStream(self.world, starting, seed=scenario.seed)
        self.arrival_rng = np.random.default_rng([scenario.seed, 0xA11])

        self.env = simpy.Environment()
        self.uplink = LinkState(scenario.trace, scenario.propagation_ms, scenario.sample_bits)
        self.downlink = LinkState(scenario.trace, scenario.propagation_ms, scenario.sample_bits)
        self.edge_cpu = simpy.Resource(self.env, capacity=scenario.edge_workers)
        self.cloud_cpu = simpy.Resource(self.env, capacity=scenario.cloud_workers)
        self.events: List[ControlEvent] = []
        self.publications: List[Tuple[float, float]] = []
        self.audit = DecisionAuditLog()
        self.emitted = 0

    def _publish(self) -> None:
        thre = self.edge.thre
        if not self.publications or self.publications[-1][1] != thre:
            self.publications.append((self.env.now, thre))

    def _bootstrap(self) -> None:
        count = self.scenario.bootstrap_samples
        if count == 0 or self.scenario.policy is Policy.CLOUD_ONLY:
            return
        samples = [self.stream.draw() for _ in range(count)]
        for sample in samples:
            self.records[sample.id] = SampleRecord(sample.id, -1.0, sample.true_class, "")
            self.cloud.handle_frame(Frame(MsgType.QUERY_KNOWLEDGE, encode_sample(sample.id, sample.raw)))
        update = self.cloud.customize()
        for frame in update.frames(self.cloud.pool):
            self.edge.apply_frame(frame)
        for sample in samples:
            del self.records[sample.id]
        logger.info(f"Bootstrapped the edge model on {count} samples")

    def _route(self, raw: np.ndarray):
        policy = self.scenario.policy
        if policy is Policy.ADAPTIVE:
            return self.edge.decide(raw)
        if policy is Policy.FIXED:
            return self.edge.decide(raw, thre=self.scenario.fixed_threshold)
        if policy is Policy.EDGE_ONLY:
            return self.edge.decide_fixed(raw, RouteTarget.EDGE)
        decision, _ = self.edge.decide_fixed(raw, RouteTarget.CLOUD)
        return decision, False

    def _arrivals(self):
        rate = self.scenario.arrival_rate
        while True:
            yield self.env.timeout(float(self.arrival_rng.exponential(1.0 / rate)))
            sample = self.stream.draw()
            fm_class, _ = fm_predict(self.world, self.cloud.pool, sample.raw)
            self.records[sample.id] = SampleRecord(sample.id, self.env.now, sample.true_class, fm_class)
            self.emitted += 1
            self.env.process(self._serve(sample))

    def _serve(self, sample: Sample):
        record = self.records[sample.id]
        t0 = self.env.now
        decision, upload = self._route(sample.raw)
        record.route = decision.route.value
        record.thre = decision.threshold_used
        record.unc = decision.unc.unc
        record.uploaded = upload
        if upload:
            self.env.process(self._upload(sample))

        if decision.on_edge:
            with self.edge_cpu.request() as request:
                yield request
                yield self.env.timeout(self.scenario.latency.t_edge_ms / 1000.0)
            answer = decision.edge_class
        else:
            request_frame = Frame(MsgType.INFER_REQUEST, encode_sample(sample.id, sample.raw))
            up = self.uplink.deliver(request_frame, self.env.now)
            record.queue_ms = up.queue_delay * 1000.0
            yield self.env.timeout(up.t_arrive - self.env.now)
            with self.cloud_cpu.request() as request:
                yield request
                yield self.env.timeout(self.scenario.latency.t_cloud_ms / 1000.0)
                reply = self.cloud.handle_frame(request_frame)
            down = self.downlink.deliver(reply, self.env.now)
            yield self.env.timeout(down.t_arrive - self.env.now)
            answer = self.edge.apply_frame(reply, self.env.now).class_name

        record.predicted = answer
        record.latency_ms = (self.env.now - t0) * 1000.0
        record.status = "done"
        self.audit.record(t0, sample.id, decision, answer)

    def _upload(self, sample: Sample):
        frame = Frame(MsgType.QUERY_KNOWLEDGE, encode_sample(sample.id, sample.raw))
        up = self.uplink.deliver(frame, self.env.now)
        yield self.env.timeout(up.t_arrive - self.env.now)
        reply = self.cloud.handle_frame(frame)
        down = self.downlink.deliver(reply, self.env.now)
        yield self.env.timeout(down.t_arrive - self.env.now)
        self.edge.apply_frame(reply, self.env.now)

    def _probes(self):
        while True:
            bandwidth = self.scenario.trace.bandwidth_at(self.env.now)
            self.edge.on_probe(self.env.now, bandwidth)
            self._publish()
            self.events.append(ControlEvent(self.env.now, "probe", self.edge.thre, bandwidth / MBPS))
            yield self.env.timeout(self.scenario.probe_interval)

    def _push(self, frame: Frame):
        delivery = self.downlink.deliver(frame, self.env.now)
        yield self.env.timeout(delivery.t_arrive - self.env.now)
        self.edge.apply_frame(frame, self.env.now)
        self._publish()

    def _updates(self):
        while True:
            yield self.env.timeout(self.scenario.update_interval)
            if not self.cloud.ready_for_update():
                self.events.append(
                    ControlEvent(self.env.now, "update_skipped", detail=f"pending={self.cloud.pending_uploads}")
                )
                continue
            update = self.cloud.customize()
            yield self.env.timeout(self.scenario.retrain_cost)
            self.events.append(
                ControlEvent(
                    self.env.now,
                    "update",
                    detail=f"uploads={update.upload_count} holdout={update.log.final_accuracy:.4f}",
                )
            )
            for frame in update.frames(self.cloud.pool):
                self.env.process(self._push(frame))

    def _schedule(self):
        for entry in self.scenario.schedule:
            yield self.env.timeout(entry.t_seconds - self.env.now)
            self.stream.set_classes(self.stream.classes + list(entry.classes))
            frame = self.cloud.add_classes(entry.classes)
            self.events.append(ControlEvent(self.env.now, "classes", detail="+" + "+".join(entry.classes)))
            self.env.process(self._push(frame))

    def run(self) -> MetricsReport:
        self._bootstrap()
        self.env.process(self._probes())
        self.env.process(self._arrivals())
        if self.scenario.policy is not Policy.CLOUD_ONLY:
            self.env.process(self._updates())
        if self.scenario.schedule:
            self.env.process(self._schedule())
        self.env.run(until=self.scenario.duration)

        report = MetricsReport(
            policy=self.scenario.policy.value,
            duration=self.scenario.duration,
            propagation_ms=self.scenario.propagation_ms,
            window_seconds=self.scenario.window_seconds,
            samples=[self.records[k] for k in sorted(self.records)],
            events=self.events,
            emitted=self.emitted,
            publications=self.publications,
            audit=self.audit,
            threshold_decisions=list(self.edge.controller.decisions),
        )
        counts = report.counts()
        logger.info(
            f"Scenario finished: {self.emitted} samples, edge={counts['edge']}, "
            f"cloud={counts['cloud']}, in_flight={counts['in_flight']}, "
            f"{len(self.cloud.updates)} customization rounds"
        )
        return report


def run_scenario(scenario: Scenario, strict: bool = False) -> MetricsReport:
    """Run ``scenario``; with ``strict`` any invariant violation raises."""
    report = EdgeCloudSimulation(scenario).run()
    if strict:
        violations = report.verify()
        if violations:
            raise InvariantViolationError(
                f"{len(violations)} invariant violation(s) during the run", violations=violations
            )
    return report
