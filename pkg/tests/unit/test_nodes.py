"""
Unit tests for the edge and cloud nodes.
"""

import math

import numpy as np
import pytest

from src.customizer import TrainConfig, checkpoint_bytes
from src.error_handler import ProtocolError, ValidationError
from src.fm_oracle import SampleStream, build_pool
from src.gatekeeper import RouteTarget
from src.model_select import ModelPool, reference_specs
from src.netadapt import LatencyModel
from src.nodes import CloudNode, EdgeNode
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
    encode_pool_update,
    encode_probe,
    encode_sample,
)

LATENCY = LatencyModel(dim_bits=1e6, t_edge_ms=10.0, t_cloud_ms=5.0)


@pytest.fixture
def cloud(small_world, small_pool, profile):
    return CloudNode(
        small_world,
        small_pool,
        profile,
        ModelPool(reference_specs()),
        train_config=TrainConfig(epochs=3, batch_size=16),
        min_upload=10,
        calibration_size=20,
        latency=LATENCY,
    )


def upload(cloud, samples):
    for sample in samples:
        cloud.handle_frame(Frame(MsgType.QUERY_KNOWLEDGE, encode_sample(sample.id, sample.raw)))


@pytest.mark.unit
class TestCloudNode:
    """Test cloud request handling and customization rounds."""

    def test_selects_architecture_for_profile(self, cloud):
        assert cloud.spec.arch_id == "mobilenet_v2"

    def test_knowledge_query_buffers_upload(self, cloud, small_world):
        raw = small_world.base_input("class_01")
        reply = cloud.handle_frame(Frame(MsgType.QUERY_KNOWLEDGE, encode_sample(4, raw)))
        assert reply.msg_type is MsgType.PSEUDO_RESPONSE
        pseudo = decode_pseudo(reply.payload)
        assert pseudo.sample_id == 4
        assert pseudo.class_name == "class_01"
        assert pseudo.confidence == pytest.approx(1.0, abs=1e-6)
        assert cloud.pending_uploads == 1

    def test_inference_request(self, cloud, small_world):
        reply = cloud.handle_frame(Frame(MsgType.INFER_REQUEST, encode_sample(8, small_world.base_input("class_02"))))
        response = decode_infer_response(reply.payload)
        assert response.sample_id == 8
        assert response.class_name == "class_02"
        assert cloud.pending_uploads == 0

    def test_probe_ack_reports_size(self, cloud):
        reply = cloud.handle_frame(Frame(MsgType.BW_PROBE, encode_probe(1000)))
        assert reply.msg_type is MsgType.PROBE_ACK
        assert decode_probe_ack(reply.payload) == 1000

    def test_rejects_edge_bound_frames(self, cloud):
        with pytest.raises(ProtocolError):
            cloud.handle_frame(Frame(MsgType.PROBE_ACK))

    def test_upload_threshold(self, cloud, small_dataset):
        upload(cloud, small_dataset[:9])
        assert not cloud.ready_for_update()
        upload(cloud, small_dataset[9:10])
        assert cloud.ready_for_update()

    def test_customize_round(self, cloud, small_dataset):
        upload(cloud, small_dataset[:40])
        update = cloud.customize()
        assert update.upload_count == 40
        assert update.model.arch_id == "mobilenet_v2"
        assert update.model.hidden_dim == 64
        assert update.table.calibration_size == 20
        assert cloud.pending_uploads == 0
        assert len(update.log.records) == 3

    def test_shipped_model_is_float32_exact(self, cloud, small_dataset):
        upload(cloud, small_dataset[:20])
        update = cloud.customize()
        pool_frame, model_frame = update.frames(cloud.pool)
        assert pool_frame.msg_type is MsgType.POOL_UPDATE
        model, table = decode_model_update(model_frame.payload)
        assert checkpoint_bytes(model) == checkpoint_bytes(update.model)
        assert [r.r for r in table.rows] == [r.r for r in update.table.rows]

    def test_customize_needs_uploads(self, cloud):
        with pytest.raises(ValidationError):
            cloud.customize()

    def test_add_classes(self, cloud):
        before = cloud.pool.version
        frame = cloud.add_classes(["class_00", "unicorn"])
        pool = decode_pool_update(frame.payload)
        assert pool.version == before + 1
        assert "unicorn" in pool
        cloud.add_classes(["unicorn"])
        assert cloud.pool.version == before + 1

    def test_label_of_sets_true_class(self, small_world, small_pool, profile, small_dataset):
        labels = {s.id: s.true_class for s in small_dataset}
        node = CloudNode(small_world, small_pool, profile, ModelPool(reference_specs()), label_of=labels.get)
        upload(node, small_dataset[:5])
        assert [s.true_class for s in node.uploads] == [s.true_class for s in small_dataset[:5]]


@pytest.mark.unit
class TestEdgeNode:
    """Test edge routing and update application."""

    def test_without_model_everything_goes_to_cloud_and_uploads(self, small_pool, profile, small_dataset):
        edge = EdgeNode(small_pool, profile, LATENCY)
        decision, uploaded = edge.decide(small_dataset[0].raw)
        assert decision.route is RouteTarget.CLOUD
        assert math.isnan(decision.unc.unc)
        assert uploaded
        assert edge.thre == 1.0

    def test_routing_with_model(self, trained_model, small_world, small_pool, profile):
        edge = EdgeNode(small_pool, profile, LATENCY, model=trained_model)
        decision, uploaded = edge.decide(small_world.base_input("class_03"), thre=0.1)
        assert decision.on_edge
        assert decision.edge_class == "class_03"
        assert uploaded == (decision.unc.unc < 0.99)

    def test_fixed_routing(self, trained_model, small_world, small_pool, profile):
        edge = EdgeNode(small_pool, profile, LATENCY, model=trained_model)
        raw = small_world.base_input("class_00")
        assert edge.decide_fixed(raw, RouteTarget.CLOUD)[0].route is RouteTarget.CLOUD
        assert edge.decide_fixed(raw, RouteTarget.EDGE)[0].route is RouteTarget.EDGE
        bare = EdgeNode(small_pool, profile, LATENCY)
        assert bare.decide_fixed(raw, RouteTarget.EDGE)[0].route is RouteTarget.CLOUD

    def test_applies_cloud_update(self, cloud, small_pool, profile, small_dataset):
        upload(cloud, small_dataset[:30])
        update = cloud.customize()
        edge = EdgeNode(small_pool, profile, LATENCY)
        edge.on_probe(0.0, 55e6)
        for frame in update.frames(cloud.pool):
            edge.apply_frame(frame, now=1.0)
        assert edge.model_version == 1
        assert edge.gate.model_ready
        assert edge.thre in update.table.thresholds
        assert edge.controller.decisions[-1].t_seconds == 1.0

    def test_older_pool_ignored(self, small_world, small_pool, profile):
        grown = build_pool(small_world, ["unicorn"], pool=small_pool)
        edge = EdgeNode(grown, profile, LATENCY)
        edge.apply_frame(Frame(MsgType.POOL_UPDATE, encode_pool_update(small_pool)))
        assert edge.pool.version == grown.version

    def test_decodes_responses(self, cloud, small_world, small_pool, profile):
        edge = EdgeNode(small_pool, profile, LATENCY)
        raw = small_world.base_input("class_01")
        reply = cloud.handle_frame(Frame(MsgType.INFER_REQUEST, encode_sample(1, raw)))
        assert isinstance(edge.apply_frame(reply), InferResponse)
        reply = cloud.handle_frame(Frame(MsgType.QUERY_KNOWLEDGE, encode_sample(2, raw)))
        assert isinstance(edge.apply_frame(reply), PseudoResponse)
        assert edge.apply_frame(cloud.handle_frame(Frame(MsgType.BW_PROBE, encode_probe(8)))) == 8

    def test_rejects_cloud_bound_frames(self, small_pool, profile):
        with pytest.raises(ProtocolError):
            EdgeNode(small_pool, profile).apply_frame(Frame(MsgType.INFER_REQUEST, encode_sample(0, np.ones(2))))

    def test_upload_fraction_drops_after_training(self, trained_model, small_world, small_pool, profile):
        """An untrained edge uploads everything; a trained one filters confident samples."""
        samples = SampleStream(small_world, seed=21).take(100)
        bare = EdgeNode(small_pool, profile, LATENCY)
        trained = EdgeNode(small_pool, profile, LATENCY, model=trained_model, v_thre=0.5)
        for sample in samples:
            bare.decide(sample.raw)
            trained.decide(sample.raw)
        assert bare.gate.fraction == 1.0
        assert trained.gate.fraction < 1.0
