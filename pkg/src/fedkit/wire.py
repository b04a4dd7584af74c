"""Bit-exact binary message codec.

Frame layout: magic "FLX1" + u8 message type + u32 little-endian payload
length + payload. Messages that carry model weights end with a CRC32 of all
preceding payload bytes, so any corruption is caught before parsing. Floats
never pass through text: f32 tensors travel as raw little-endian bytes.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import CorruptionError, FramingError, ProtocolError
from .models import ModelWeights

MAGIC = b"FLX1"
HEADER_LEN = 9  # magic + type + payload length
DTYPE_F32 = 0


class MsgType(IntEnum):
    PING = 0x00
    HELLO = 0x01
    ROUND_START = 0x02
    ROUND_RESULT = 0x03
    EVAL_REPORT = 0x04
    ABORT = 0x05
    SHUTDOWN = 0x06


@dataclass
class Ping:
    pass


@dataclass
class Hello:
    client_id: int


@dataclass
class RoundStart:
    round_index: int
    num_clients: int
    local_epochs: int
    batch_size: int
    opt_kind: str
    lr: float
    weight_decay: float
    seed: int
    eval_metric: str
    augment: bool
    weights: ModelWeights


@dataclass
class RoundResult:
    client_id: int
    round_index: int
    num_samples: int
    train_loss: float
    weights: ModelWeights


@dataclass
class EvalReport:
    round_index: int
    metric: float
    loss: float


@dataclass
class Abort:
    round_index: int
    reason: str


@dataclass
class Shutdown:
    pass


_OPT_KINDS = ["sgd", "adagrad", "adam"]
_METRICS = ["jaccard", "accuracy"]


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    if len(b) > 0xFFFF:
        raise ProtocolError("string too long for wire format")
    return struct.pack("<H", len(b)) + b


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FramingError("truncated payload")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")

    def done(self):
        if self.pos != len(self.buf):
            raise FramingError(f"{len(self.buf) - self.pos} unparsed payload bytes")


def encode_weights(w: ModelWeights) -> bytes:
    """u32 count; per parameter: name, u8 dtype, u8 ndim, dims, raw LE f32 bytes."""
    parts = [_pack_str(w.architecture_id), struct.pack("<I", len(w.params))]
    for name, tensor in w.params:
        arr = np.ascontiguousarray(tensor, dtype="<f4")
        parts.append(_pack_str(name))
        parts.append(struct.pack("<BB", DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_weights(r: _Reader) -> ModelWeights:
    arch = r.string()
    (count,) = r.unpack("<I")
    params = []
    for _ in range(count):
        name = r.string()
        dtype, ndim = r.unpack("<BB")
        if dtype != DTYPE_F32:
            raise ProtocolError(f"unsupported tensor dtype code {dtype}")
        dims = r.unpack(f"<{ndim}I")
        size = 1
        for d in dims:
            size *= d
        raw = r.take(size * 4)
        arr = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
        params.append((name, arr))
    return ModelWeights(arch, params)


def _encode_payload(msg) -> tuple[int, bytes]:
    if isinstance(msg, Ping):
        return MsgType.PING, b""
    if isinstance(msg, Shutdown):
        return MsgType.SHUTDOWN, b""
    if isinstance(msg, Hello):
        return MsgType.HELLO, struct.pack("<I", msg.client_id)
    if isinstance(msg, EvalReport):
        return MsgType.EVAL_REPORT, struct.pack("<Idd", msg.round_index, msg.metric, msg.loss)
    if isinstance(msg, Abort):
        return MsgType.ABORT, struct.pack("<I", msg.round_index) + _pack_str(msg.reason)
    if isinstance(msg, RoundStart):
        body = struct.pack(
            "<IIIIBddQBB",
            msg.round_index,
            msg.num_clients,
            msg.local_epochs,
            msg.batch_size,
            _OPT_KINDS.index(msg.opt_kind),
            msg.lr,
            msg.weight_decay,
            msg.seed & (2**64 - 1),
            _METRICS.index(msg.eval_metric),
            1 if msg.augment else 0,
        ) + encode_weights(msg.weights)
        return MsgType.ROUND_START, body + struct.pack("<I", zlib.crc32(body))
    if isinstance(msg, RoundResult):
        body = struct.pack(
            "<IIId", msg.client_id, msg.round_index, msg.num_samples, msg.train_loss
        ) + encode_weights(msg.weights)
        return MsgType.ROUND_RESULT, body + struct.pack("<I", zlib.crc32(body))
    raise ProtocolError(f"cannot encode {type(msg).__name__}")


def encode_message(msg) -> bytes:
    mtype, payload = _encode_payload(msg)
    return MAGIC + struct.pack("<BI", mtype, len(payload)) + payload


def decode_message(frame: bytes):
    if len(frame) < HEADER_LEN:
        raise FramingError(f"frame of {len(frame)} bytes is shorter than the header")
    if frame[:4] != MAGIC:
        raise FramingError(f"bad magic {frame[:4]!r}")
    mtype, plen = struct.unpack("<BI", frame[4:9])
    payload = frame[9:]
    if len(payload) != plen:
        raise FramingError(f"declared payload {plen} bytes, got {len(payload)}")
    try:
        mtype = MsgType(mtype)
    except ValueError:
        raise ProtocolError(f"unknown message type 0x{mtype:02x}") from None

    if mtype in (MsgType.ROUND_START, MsgType.ROUND_RESULT):
        if plen < 4:
            raise FramingError("payload too short for checksum")
        body, (crc,) = payload[:-4], struct.unpack("<I", payload[-4:])
        if zlib.crc32(body) != crc:
            raise CorruptionError("payload CRC32 mismatch")
        payload = body

    r = _Reader(payload)
    if mtype == MsgType.PING:
        msg = Ping()
    elif mtype == MsgType.SHUTDOWN:
        msg = Shutdown()
    elif mtype == MsgType.HELLO:
        msg = Hello(*r.unpack("<I"))
    elif mtype == MsgType.EVAL_REPORT:
        msg = EvalReport(*r.unpack("<Idd"))
    elif mtype == MsgType.ABORT:
        (rnd,) = r.unpack("<I")
        msg = Abort(rnd, r.string())
    elif mtype == MsgType.ROUND_START:
        (rnd, nc, le, bs, opt, lr, wd, seed, metric, aug) = r.unpack("<IIIIBddQBB")
        if opt >= len(_OPT_KINDS) or metric >= len(_METRICS):
            raise ProtocolError("unknown optimizer or metric code")
        msg = RoundStart(
            rnd, nc, le, bs, _OPT_KINDS[opt], lr, wd, seed,
            _METRICS[metric], bool(aug), decode_weights(r),
        )
    else:  # ROUND_RESULT
        (cid, rnd, ns, loss) = r.unpack("<IIId")
        msg = RoundResult(cid, rnd, ns, loss, decode_weights(r))
    r.done()
    return msg


# ------------------------------------------------------------- weight files


_FILE_MAGIC = b"FLW1"


def save_weights_file(path, weights: ModelWeights):
    """Weights on disk: magic + weights blob + trailing CRC32."""
    body = encode_weights(weights)
    with open(path, "wb") as f:
        f.write(_FILE_MAGIC + body + struct.pack("<I", zlib.crc32(body)))


def load_weights_file(path) -> ModelWeights:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8 or raw[:4] != _FILE_MAGIC:
        raise FramingError(f"{path}: not a weights file")
    body, (crc,) = raw[4:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptionError(f"{path}: CRC32 mismatch")
    r = _Reader(body)
    w = decode_weights(r)
    r.done()
    return w
