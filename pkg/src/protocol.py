"""
Edge-Cloud Wire Protocol

Frame layout (little-endian):
    [4 bytes - magic "EFM1"]
    [1 byte  - message type]
    [4 bytes - payload length]
    [N bytes - payload]

plus payload codecs for every message type.
"""

import socket
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import List, Optional, Tuple

import numpy as np

from src.customizer import SmallModel, checkpoint_bytes, model_from_checkpoint
from src.embeddings import Embedding, PromptTemplate, TextEmbeddingPool, deserialize_pool, serialize_pool
from src.error_handler import (
    BadMagicError,
    OversizeError,
    ProtocolError,
    TruncatedError,
    UnknownTypeError,
)
from src.netadapt import ThresholdRow, ThresholdTable

MAGIC = b"EFM1"
HEADER = struct.Struct("<4sBI")
HEADER_SIZE = HEADER.size
MAX_PAYLOAD_SIZE = 16 * 1024 * 1024  # 16 MiB

_SAMPLE_HEAD = struct.Struct("<QI")
_PSEUDO_HEAD = struct.Struct("<Qd")
_INFER_HEAD = struct.Struct("<Qd")
_NAME_LEN = struct.Struct("<H")
_U32 = struct.Struct("<I")
_TABLE_HEAD = struct.Struct("<dII")
_TABLE_ROW = struct.Struct("<5d")


class MsgType(IntEnum):
    QUERY_KNOWLEDGE = 0x01
    PSEUDO_RESPONSE = 0x02
    INFER_REQUEST = 0x03
    INFER_RESPONSE = 0x04
    MODEL_UPDATE = 0x05
    POOL_UPDATE = 0x06
    BW_PROBE = 0x07
    PROBE_ACK = 0x08


SAMPLE_CARRYING = frozenset({MsgType.QUERY_KNOWLEDGE, MsgType.INFER_REQUEST})


@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    payload: bytes = b""

    def encode(self) -> bytes:
        return encode_frame(self.msg_type, self.payload)

    def __len__(self) -> int:
        return HEADER_SIZE + len(self.payload)


def _msg_type(value: int) -> MsgType:
    try:
        return MsgType(value)
    except ValueError:
        raise UnknownTypeError(f"Unknown message type 0x{value:02x}", details={"msg_type": value}) from None


def encode_frame(msg_type: int, payload: bytes = b"") -> bytes:
    msg_type = _msg_type(int(msg_type))
    if len(payload) > MAX_PAYLOAD_SIZE:
        raise OversizeError(f"Payload too large: {len(payload)} bytes")
    return HEADER.pack(MAGIC, msg_type, len(payload)) + bytes(payload)


def _parse_header(data: bytes) -> Tuple[MsgType, int]:
    if len(data) < HEADER_SIZE:
        raise TruncatedError(f"Frame shorter than its {HEADER_SIZE}-byte header")
    magic, raw_type, length = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagicError(f"Bad frame magic {magic!r}")
    msg_type = _msg_type(raw_type)
    if length > MAX_PAYLOAD_SIZE:
        raise OversizeError(f"Payload too large: {length} bytes")
    return msg_type, length


def decode_frame(data: bytes) -> Frame:
    """Decode exactly one complete frame."""
    msg_type, length = _parse_header(data)
    end = HEADER_SIZE + length
    if len(data) < end:
        raise TruncatedError(f"Frame announces {length} payload bytes, {len(data) - HEADER_SIZE} present")
    if len(data) > end:
        raise ProtocolError(f"{len(data) - end} trailing bytes after frame")
    return Frame(msg_type, bytes(data[HEADER_SIZE:end]))


class FrameDecoder:
    """Incremental decoder for a byte stream carrying consecutive frames."""

    def __init__(self):
        self._buffer = bytearray()

    def feed(self, data: bytes) -> List[Frame]:
        self._buffer.extend(data)
        frames = []
        while len(self._buffer) >= HEADER_SIZE:
            _, length = _parse_header(bytes(self._buffer[:HEADER_SIZE]))
            end = HEADER_SIZE + length
            if len(self._buffer) < end:
                break
            frames.append(decode_frame(bytes(self._buffer[:end])))
            del self._buffer[:end]
        return frames

    @property
    def pending(self) -> int:
        return len(self._buffer)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ProtocolError("Connection closed mid-frame")
        buf.extend(chunk)
    return bytes(buf)


def send_frame(sock: socket.socket, msg_type: int, payload: bytes = b"") -> int:
    data = encode_frame(msg_type, payload)
    sock.sendall(data)
    return len(data)


def recv_frame(sock: socket.socket) -> Optional[Frame]:
    """Next frame from ``sock``; None on a clean close between frames."""
    first = sock.recv(HEADER_SIZE)
    if not first:
        return None
    header = first + _recv_exact(sock, HEADER_SIZE - len(first)) if len(first) < HEADER_SIZE else first
    msg_type, length = _parse_header(header)
    payload = _recv_exact(sock, length) if length else b""
    return Frame(msg_type, payload)


# payload codecs


def _pack_name(name: str) -> bytes:
    encoded = name.encode("utf-8")
    if len(encoded) > 0xFFFF:
        raise OversizeError(f"Class name of {len(encoded)} bytes does not fit a u16 length")
    return _NAME_LEN.pack(len(encoded)) + encoded


def _unpack_name(data: bytes, offset: int) -> Tuple[str, int]:
    if offset + _NAME_LEN.size > len(data):
        raise TruncatedError("Payload truncated inside a name length")
    (length,) = _NAME_LEN.unpack_from(data, offset)
    offset += _NAME_LEN.size
    if offset + length > len(data):
        raise TruncatedError("Payload truncated inside a name")
    return data[offset : offset + length].decode("utf-8"), offset + length


def _require(data: bytes, size: int, what: str) -> None:
    if len(data) < size:
        raise TruncatedError(f"{what} payload needs {size} bytes, got {len(data)}")


def _exact(data: bytes, offset: int, what: str) -> None:
    if offset != len(data):
        raise ProtocolError(f"{what} payload has {len(data) - offset} trailing bytes")


def encode_sample(sample_id: int, raw: np.ndarray) -> bytes:
    """QUERY_KNOWLEDGE / INFER_REQUEST: id u64, P u32, P x f32."""
    raw = np.asarray(raw)
    return _SAMPLE_HEAD.pack(sample_id, raw.shape[0]) + raw.astype("<f4").tobytes()


def decode_sample(data: bytes) -> Tuple[int, np.ndarray]:
    _require(data, _SAMPLE_HEAD.size, "Sample")
    sample_id, dim = _SAMPLE_HEAD.unpack_from(data, 0)
    end = _SAMPLE_HEAD.size + 4 * dim
    _require(data, end, "Sample")
    _exact(data, end, "Sample")
    raw = np.frombuffer(data, dtype="<f4", count=dim, offset=_SAMPLE_HEAD.size).astype(np.float64)
    return sample_id, raw


@dataclass(frozen=True)
class PseudoResponse:
    sample_id: int
    confidence: float
    class_name: str
    text_embedding: Embedding


def encode_pseudo(response: PseudoResponse) -> bytes:
    """PSEUDO_RESPONSE: id u64, confidence f64, name, D u32, D x f32."""
    values = response.text_embedding.values
    return b"".join(
        [
            _PSEUDO_HEAD.pack(response.sample_id, response.confidence),
            _pack_name(response.class_name),
            _U32.pack(values.shape[0]),
            values.astype("<f4").tobytes(),
        ]
    )


def decode_pseudo(data: bytes) -> PseudoResponse:
    _require(data, _PSEUDO_HEAD.size, "Pseudo response")
    sample_id, confidence = _PSEUDO_HEAD.unpack_from(data, 0)
    name, offset = _unpack_name(data, _PSEUDO_HEAD.size)
    _require(data, offset + _U32.size, "Pseudo response")
    (dim,) = _U32.unpack_from(data, offset)
    offset += _U32.size
    _require(data, offset + 4 * dim, "Pseudo response")
    values = np.frombuffer(data, dtype="<f4", count=dim, offset=offset).astype(np.float64)
    _exact(data, offset + 4 * dim, "Pseudo response")
    return PseudoResponse(sample_id, confidence, name, Embedding(values))


@dataclass(frozen=True)
class InferResponse:
    sample_id: int
    similarity: float
    class_name: str


def encode_infer_response(response: InferResponse) -> bytes:
    """INFER_RESPONSE: id u64, similarity f64, name."""
    return _INFER_HEAD.pack(response.sample_id, response.similarity) + _pack_name(response.class_name)


def decode_infer_response(data: bytes) -> InferResponse:
    _require(data, _INFER_HEAD.size, "Inference response")
    sample_id, similarity = _INFER_HEAD.unpack_from(data, 0)
    name, offset = _unpack_name(data, _INFER_HEAD.size)
    _exact(data, offset, "Inference response")
    return InferResponse(sample_id, similarity, name)


def encode_table(table: Optional[ThresholdTable]) -> bytes:
    if table is None:
        return _TABLE_HEAD.pack(0.0, 0, 0)
    parts = [_TABLE_HEAD.pack(table.grid_step, table.calibration_size, len(table))]
    parts.extend(_TABLE_ROW.pack(r.thre, r.r, r.acc, r.t_edge, r.t_cloud) for r in table.rows)
    return b"".join(parts)


def decode_table(data: bytes, offset: int = 0) -> Tuple[Optional[ThresholdTable], int]:
    _require(data, offset + _TABLE_HEAD.size, "Table")
    grid_step, calibration_size, count = _TABLE_HEAD.unpack_from(data, offset)
    offset += _TABLE_HEAD.size
    _require(data, offset + count * _TABLE_ROW.size, "Table")
    rows = []
    for _ in range(count):
        rows.append(ThresholdRow(*_TABLE_ROW.unpack_from(data, offset)))
        offset += _TABLE_ROW.size
    if not rows:
        return None, offset
    return ThresholdTable(tuple(rows), grid_step=grid_step, calibration_size=calibration_size), offset


def encode_model_update(model: SmallModel, table: Optional[ThresholdTable]) -> bytes:
    """MODEL_UPDATE: checkpoint length u32, checkpoint, then the threshold table."""
    checkpoint = checkpoint_bytes(model)
    return _U32.pack(len(checkpoint)) + checkpoint + encode_table(table)


def decode_model_update(data: bytes) -> Tuple[SmallModel, Optional[ThresholdTable]]:
    _require(data, _U32.size, "Model update")
    (length,) = _U32.unpack_from(data, 0)
    end = _U32.size + length
    _require(data, end, "Model update")
    model = model_from_checkpoint(data[_U32.size : end])
    table, offset = decode_table(data, end)
    _exact(data, offset, "Model update")
    return model, table


def encode_pool_update(pool: TextEmbeddingPool) -> bytes:
    return serialize_pool(pool)


def decode_pool_update(data: bytes, prompt: Optional[PromptTemplate] = None) -> TextEmbeddingPool:
    return deserialize_pool(data, prompt)


def encode_probe(padding_bytes: int) -> bytes:
    """BW_PROBE: zero padding of the requested size."""
    return bytes(padding_bytes)


def encode_probe_ack(received_bytes: Optional[int] = None) -> bytes:
    return b"" if received_bytes is None else _U32.pack(received_bytes)


def decode_probe_ack(data: bytes) -> Optional[int]:
    if not data:
        return None
    _require(data, _U32.size, "Probe ack")
    _exact(data, _U32.size, "Probe ack")
    return _U32.unpack_from(data, 0)[0]
