"""
Unit tests for the edge-cloud wire protocol.

Tests frame encoding against golden bytes, malformed-frame rejection in the
documented order, stream decoding, socket transport and payload codecs.
"""

import json
import socket

import numpy as np
import pytest

from src.embeddings import normalize
from src.error_handler import BadMagicError, OversizeError, ProtocolError, TruncatedError, UnknownTypeError
from src.netadapt import ThresholdRow, ThresholdTable
from src.protocol import (
    HEADER_SIZE,
    MAX_PAYLOAD_SIZE,
    Frame,
    FrameDecoder,
    InferResponse,
    MsgType,
    PseudoResponse,
    decode_frame,
    decode_infer_response,
    decode_model_update,
    decode_pool_update,
    decode_probe_ack,
    decode_pseudo,
    decode_sample,
    decode_table,
    encode_frame,
    encode_infer_response,
    encode_model_update,
    encode_pool_update,
    encode_probe,
    encode_probe_ack,
    encode_pseudo,
    encode_sample,
    encode_table,
    recv_frame,
    send_frame,
)


@pytest.fixture(scope="module")
def golden(test_data_dir):
    return json.loads((test_data_dir / "golden_frames.json").read_text())


@pytest.mark.unit
class TestGoldenFrames:
    """Encoded frames match fixed byte strings."""

    def test_empty_probe(self, golden):
        case = golden["probe_empty"]
        assert encode_frame(MsgType.BW_PROBE).hex() == case["hex"]

    def test_query_knowledge(self, golden):
        case = golden["query_knowledge"]
        payload = encode_sample(case["sample_id"], np.array(case["raw"]))
        assert encode_frame(case["msg_type"], payload).hex() == case["hex"]

    def test_infer_response(self, golden):
        case = golden["infer_response"]
        payload = encode_infer_response(InferResponse(case["sample_id"], case["similarity"], case["class_name"]))
        assert encode_frame(case["msg_type"], payload).hex() == case["hex"]

    def test_probe_ack(self, golden):
        case = golden["probe_ack"]
        assert encode_frame(case["msg_type"], encode_probe_ack(case["received_bytes"])).hex() == case["hex"]

    def test_decode_golden(self, golden):
        for case in golden.values():
            frame = decode_frame(bytes.fromhex(case["hex"]))
            assert frame.msg_type == case["msg_type"]
            assert len(frame) == len(case["hex"]) // 2


@pytest.mark.unit
class TestFrameValidation:
    """Malformed frames are rejected with the first failing check."""

    def test_header_layout(self):
        data = encode_frame(MsgType.INFER_REQUEST, b"abc")
        assert len(data) == HEADER_SIZE + 3 == 12
        assert data[:4] == b"EFM1"
        assert data[4] == 0x03
        assert data[5:9] == (3).to_bytes(4, "little")

    def test_short_header(self):
        with pytest.raises(TruncatedError):
            decode_frame(b"EFM1\x01")

    def test_bad_magic(self):
        with pytest.raises(BadMagicError):
            decode_frame(b"XXXX" + encode_frame(MsgType.BW_PROBE)[4:])

    def test_unknown_type(self):
        data = bytearray(encode_frame(MsgType.BW_PROBE))
        data[4] = 0x09
        with pytest.raises(UnknownTypeError):
            decode_frame(bytes(data))

    def test_bad_magic_checked_before_type(self):
        with pytest.raises(BadMagicError):
            decode_frame(b"XXXX\x09\x00\x00\x00\x00")

    def test_oversize_length(self):
        header = b"EFM1\x07" + (MAX_PAYLOAD_SIZE + 1).to_bytes(4, "little")
        with pytest.raises(OversizeError):
            decode_frame(header)

    def test_oversize_payload_not_encoded(self):
        with pytest.raises(OversizeError):
            encode_frame(MsgType.BW_PROBE, bytes(MAX_PAYLOAD_SIZE + 1))

    def test_truncated_payload(self):
        with pytest.raises(TruncatedError):
            decode_frame(encode_frame(MsgType.BW_PROBE, b"12345")[:-1])

    def test_trailing_bytes(self):
        with pytest.raises(ProtocolError):
            decode_frame(encode_frame(MsgType.BW_PROBE) + b"\x00")

    def test_unknown_type_not_encoded(self):
        with pytest.raises(UnknownTypeError):
            encode_frame(0x00)

    def test_frame_object(self):
        frame = Frame(MsgType.POOL_UPDATE, b"xy")
        assert decode_frame(frame.encode()) == frame
        assert len(frame) == HEADER_SIZE + 2


@pytest.mark.unit
class TestFrameDecoder:
    def test_byte_by_byte(self):
        """Frames split at arbitrary points reassemble in order."""
        stream = encode_frame(MsgType.BW_PROBE, b"a" * 10) + encode_frame(MsgType.PROBE_ACK) + encode_frame(
            MsgType.INFER_REQUEST, b"xyz"
        )
        decoder = FrameDecoder()
        frames = []
        for byte in stream:
            frames.extend(decoder.feed(bytes([byte])))
        assert [f.msg_type for f in frames] == [MsgType.BW_PROBE, MsgType.PROBE_ACK, MsgType.INFER_REQUEST]
        assert frames[0].payload == b"a" * 10
        assert decoder.pending == 0

    def test_partial_frame_pending(self):
        decoder = FrameDecoder()
        assert decoder.feed(encode_frame(MsgType.BW_PROBE, b"abcd")[:7]) == []
        assert decoder.pending == 7

    def test_bad_magic_in_stream(self):
        with pytest.raises(BadMagicError):
            FrameDecoder().feed(b"NOPE\x01\x00\x00\x00\x00")


@pytest.mark.unit
class TestSocketTransport:
    def test_send_and_receive(self):
        left, right = socket.socketpair()
        try:
            sent = send_frame(left, MsgType.INFER_REQUEST, encode_sample(5, np.ones(4)))
            assert sent == HEADER_SIZE + 12 + 16
            frame = recv_frame(right)
            assert frame.msg_type is MsgType.INFER_REQUEST
            assert decode_sample(frame.payload)[0] == 5
        finally:
            left.close()
            right.close()

    def test_clean_close_returns_none(self):
        left, right = socket.socketpair()
        left.close()
        try:
            assert recv_frame(right) is None
        finally:
            right.close()

    def test_close_mid_frame(self):
        left, right = socket.socketpair()
        try:
            left.sendall(encode_frame(MsgType.BW_PROBE, b"abcdef")[:11])
            left.close()
            with pytest.raises(ProtocolError):
                recv_frame(right)
        finally:
            right.close()


@pytest.mark.unit
class TestPayloadCodecs:
    """Payload codecs preserve float32 values and reject malformed input."""

    def test_sample(self):
        raw = np.array([0.5, -1.25, 3.0])
        sample_id, decoded = decode_sample(encode_sample(12, raw))
        assert sample_id == 12
        np.testing.assert_array_equal(decoded, raw)

    def test_sample_truncated(self):
        with pytest.raises(TruncatedError):
            decode_sample(encode_sample(1, np.ones(3))[:-2])

    def test_pseudo_response(self):
        response = PseudoResponse(9, 0.75, "dog", normalize([1.0, 0.0, 0.0]))
        decoded = decode_pseudo(encode_pseudo(response))
        assert (decoded.sample_id, decoded.confidence, decoded.class_name) == (9, 0.75, "dog")
        np.testing.assert_array_equal(decoded.text_embedding.values, [1.0, 0.0, 0.0])

    def test_pseudo_trailing(self):
        with pytest.raises(ProtocolError):
            decode_pseudo(encode_pseudo(PseudoResponse(1, 0.5, "a", normalize([1.0]))) + b"\x00")

    def test_infer_response_unicode(self):
        decoded = decode_infer_response(encode_infer_response(InferResponse(2, -0.25, "café")))
        assert decoded == InferResponse(2, -0.25, "café")

    def test_table(self):
        rows = (ThresholdRow(0.5, 0.75, 0.9, 1.5, 2.5), ThresholdRow(0.75, 0.5, 1.0, 1.5, 2.5))
        table = ThresholdTable(rows, grid_step=0.25, calibration_size=8)
        decoded, offset = decode_table(encode_table(table))
        assert offset == 16 + 2 * 40
        assert decoded.rows == rows
        assert decoded.calibration_size == 8

    def test_missing_table(self):
        assert decode_table(encode_table(None)) == (None, 16)

    def test_model_update(self, trained_model):
        from src.customizer import checkpoint_bytes

        table = ThresholdTable((ThresholdRow(0.5, 0.5, 1.0, 1.0, 1.0),), grid_step=0.5, calibration_size=1)
        model, decoded_table = decode_model_update(encode_model_update(trained_model, table))
        assert checkpoint_bytes(model) == checkpoint_bytes(trained_model)
        assert decoded_table.rows == table.rows
        _, empty = decode_model_update(encode_model_update(trained_model, None))
        assert empty is None

    def test_model_update_truncated(self, trained_model):
        with pytest.raises(TruncatedError):
            decode_model_update(encode_model_update(trained_model, None)[:-3])

    def test_pool_update(self, small_pool):
        decoded = decode_pool_update(encode_pool_update(small_pool))
        assert decoded.class_names == small_pool.class_names
        assert decoded.version == small_pool.version

    def test_probe(self):
        assert encode_probe(16) == bytes(16)
        assert decode_probe_ack(encode_probe_ack(70000)) == 70000
        assert decode_probe_ack(encode_probe_ack()) is None

    def test_probe_ack_malformed(self):
        with pytest.raises(TruncatedError):
            decode_probe_ack(b"\x01\x02")
