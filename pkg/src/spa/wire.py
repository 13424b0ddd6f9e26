"""Wire protocol: length-prefixed binary frames between cloud and device.

Frame layout:

    payload length   u32 big-endian (payload only, excludes the type byte)
    message type     u8
    payload          type-specific, see below

Integers are big-endian; float arrays are big-endian float64 ('>f8').
Payload layouts:

    HELLO          u32 version | u8 wire_mode | 32 bytes digest (raw SHA-256)
    PROMPT         u32 count | count x u32 ids | u8 policy | u8 strategy
                   | u16 beam_width | u16 max_new_tokens
    BASE_HIDDENS   u32 step | u8 n_layers | u16 chunk | u16 d_model | floats
    GATE_DECISION  u32 step | u8 bit
    SIDE_OUTPUT    u32 step | u16 d_model | floats
    TOKEN          u32 step | u32 token_id
    EOS            (empty)
    ERROR          u16 code | u16 length | UTF-8 message

Payloads longer than 16 MiB are rejected with an OVERSIZE error before any
allocation happens.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from .errors import SpaError

PROTOCOL_VERSION = 1
MAX_PAYLOAD = 16 * 1024 * 1024
HEADER_LEN = 5  # u32 length + u8 type


class FrameError(SpaError):
    pass


class TruncatedFrameError(FrameError):
    pass


class OversizeFrameError(FrameError):
    pass


class BadFrameError(FrameError):
    pass


class MsgType(enum.IntEnum):
    HELLO = 1
    PROMPT = 2
    BASE_HIDDENS = 3
    GATE_DECISION = 4
    SIDE_OUTPUT = 5
    TOKEN = 6
    EOS = 7
    ERROR = 8


class ErrorCode(enum.IntEnum):
    DIGEST_MISMATCH = 1
    VERSION_MISMATCH = 2
    PROTOCOL_VIOLATION = 3
    OVERSIZE = 4
    BAD_FRAME = 5
    INTERNAL = 6


WIRE_MODES = ("final", "all_layers")
POLICIES = ("spa", "always_side", "device_only", "lst", "base_only")
STRATEGIES = ("greedy", "beam")


def _code(options: tuple[str, ...], value: str, what: str) -> int:
    try:
        return options.index(value)
    except ValueError:
        raise BadFrameError(f"unknown {what} {value!r}") from None


def _name(options: tuple[str, ...], code: int, what: str) -> str:
    if not 0 <= code < len(options):
        raise BadFrameError(f"unknown {what} code {code}")
    return options[code]


@dataclass(frozen=True)
class Hello:
    version: int
    wire_mode: str
    digest: str  # 64 hex chars


@dataclass(frozen=True)
class Prompt:
    token_ids: tuple[int, ...]
    policy: str
    strategy: str = "greedy"
    beam_width: int = 4
    max_new_tokens: int = 50


@dataclass(eq=False)
class BaseHiddens:
    step: int
    hiddens: np.ndarray  # (n_layers, chunk, d_model)

    def __eq__(self, other):
        return (
            isinstance(other, BaseHiddens)
            and self.step == other.step
            and self.hiddens.shape == other.hiddens.shape
            and np.array_equal(self.hiddens, other.hiddens)
        )


@dataclass(frozen=True)
class GateDecision:
    step: int
    use_side: int


@dataclass(eq=False)
class SideOutput:
    step: int
    vector: np.ndarray  # (d_model,)

    def __eq__(self, other):
        return (
            isinstance(other, SideOutput)
            and self.step == other.step
            and np.array_equal(self.vector, other.vector)
        )


@dataclass(frozen=True)
class Token:
    step: int
    token_id: int


@dataclass(frozen=True)
class Eos:
    pass


@dataclass(frozen=True)
class ErrorFrame:
    code: int
    message: str


WireMessage = Hello | Prompt | BaseHiddens | GateDecision | SideOutput | Token | Eos | ErrorFrame


def _encode_payload(msg: WireMessage) -> tuple[int, bytes]:
    if isinstance(msg, Hello):
        raw = bytes.fromhex(msg.digest)
        if len(raw) != 32:
            raise BadFrameError("digest must be 32 bytes of hex")
        return MsgType.HELLO, struct.pack(">IB", msg.version, _code(WIRE_MODES, msg.wire_mode, "wire mode")) + raw
    if isinstance(msg, Prompt):
        ids = msg.token_ids
        body = struct.pack(">I", len(ids)) + struct.pack(f">{len(ids)}I", *ids)
        body += struct.pack(
            ">BBHH",
            _code(POLICIES, msg.policy, "policy"),
            _code(STRATEGIES, msg.strategy, "strategy"),
            msg.beam_width,
            msg.max_new_tokens,
        )
        return MsgType.PROMPT, body
    if isinstance(msg, BaseHiddens):
        arr = np.asarray(msg.hiddens, dtype=np.float64)
        if arr.ndim != 3:
            raise BadFrameError(f"hiddens must be 3-D (layers, chunk, d), got {arr.shape}")
        if arr.size * 8 > MAX_PAYLOAD:
            raise OversizeFrameError(
                f"hidden block of {arr.size * 8} bytes exceeds {MAX_PAYLOAD}"
            )
        n_layers, chunk, d = arr.shape
        if n_layers > 0xFF or chunk > 0xFFFF or d > 0xFFFF:
            raise BadFrameError(f"hidden dimensions {arr.shape} exceed header field ranges")
        head = struct.pack(">IBHH", msg.step, n_layers, chunk, d)
        return MsgType.BASE_HIDDENS, head + arr.astype(">f8").tobytes()
    if isinstance(msg, GateDecision):
        return MsgType.GATE_DECISION, struct.pack(">IB", msg.step, 1 if msg.use_side else 0)
    if isinstance(msg, SideOutput):
        vec = np.asarray(msg.vector, dtype=np.float64).reshape(-1)
        return MsgType.SIDE_OUTPUT, struct.pack(">IH", msg.step, vec.size) + vec.astype(">f8").tobytes()
    if isinstance(msg, Token):
        return MsgType.TOKEN, struct.pack(">II", msg.step, msg.token_id)
    if isinstance(msg, Eos):
        return MsgType.EOS, b""
    if isinstance(msg, ErrorFrame):
        raw = msg.message.encode("utf-8")
        return MsgType.ERROR, struct.pack(">HH", msg.code, len(raw)) + raw
    raise BadFrameError(f"cannot encode object of type {type(msg).__name__}")


def encode_frame(msg: WireMessage) -> bytes:
    mtype, payload = _encode_payload(msg)
    if len(payload) > MAX_PAYLOAD:
        raise OversizeFrameError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    return struct.pack(">I", len(payload)) + bytes([mtype]) + payload


def _need(payload: bytes, count: int, what: str) -> None:
    if len(payload) < count:
        raise BadFrameError(f"{what}: payload truncated ({len(payload)} < {count} bytes)")


def decode_payload(mtype: int, payload: bytes) -> WireMessage:
    if mtype == MsgType.HELLO:
        _need(payload, 37, "HELLO")
        version, mode_code = struct.unpack_from(">IB", payload)
        if len(payload) != 37:
            raise BadFrameError("HELLO: wrong payload length")
        return Hello(version, _name(WIRE_MODES, mode_code, "wire mode"), payload[5:37].hex())
    if mtype == MsgType.PROMPT:
        _need(payload, 4, "PROMPT")
        (n,) = struct.unpack_from(">I", payload)
        _need(payload, 4 + 4 * n + 6, "PROMPT")
        ids = struct.unpack_from(f">{n}I", payload, 4)
        pol, strat, width, max_new = struct.unpack_from(">BBHH", payload, 4 + 4 * n)
        if len(payload) != 4 + 4 * n + 6:
            raise BadFrameError("PROMPT: wrong payload length")
        return Prompt(
            token_ids=ids,
            policy=_name(POLICIES, pol, "policy"),
            strategy=_name(STRATEGIES, strat, "strategy"),
            beam_width=width,
            max_new_tokens=max_new,
        )
    if mtype == MsgType.BASE_HIDDENS:
        _need(payload, 9, "BASE_HIDDENS")
        step, n_layers, chunk, d = struct.unpack_from(">IBHH", payload)
        count = n_layers * chunk * d
        if len(payload) != 9 + 8 * count:
            raise BadFrameError("BASE_HIDDENS: float block length mismatch")
        arr = np.frombuffer(payload, dtype=">f8", count=count, offset=9)
        return BaseHiddens(step, arr.astype(np.float64).reshape(n_layers, chunk, d))
    if mtype == MsgType.GATE_DECISION:
        if len(payload) != 5:
            raise BadFrameError("GATE_DECISION: wrong payload length")
        step, bit = struct.unpack(">IB", payload)
        return GateDecision(step, bit & 1)
    if mtype == MsgType.SIDE_OUTPUT:
        _need(payload, 6, "SIDE_OUTPUT")
        step, d = struct.unpack_from(">IH", payload)
        if len(payload) != 6 + 8 * d:
            raise BadFrameError("SIDE_OUTPUT: float block length mismatch")
        vec = np.frombuffer(payload, dtype=">f8", count=d, offset=6)
        return SideOutput(step, vec.astype(np.float64))
    if mtype == MsgType.TOKEN:
        if len(payload) != 8:
            raise BadFrameError("TOKEN: wrong payload length")
        step, tok = struct.unpack(">II", payload)
        return Token(step, tok)
    if mtype == MsgType.EOS:
        if payload:
            raise BadFrameError("EOS: payload must be empty")
        return Eos()
    if mtype == MsgType.ERROR:
        _need(payload, 4, "ERROR")
        code, ln = struct.unpack_from(">HH", payload)
        if len(payload) != 4 + ln:
            raise BadFrameError("ERROR: wrong payload length")
        return ErrorFrame(code, payload[4:].decode("utf-8", errors="replace"))
    raise BadFrameError(f"unknown message type {mtype}")


def decode_frame(buf: bytes) -> tuple[WireMessage, int]:
    """Decode one frame from the head of buf; returns (message, bytes consumed)."""
    if len(buf) < HEADER_LEN:
        raise TruncatedFrameError(f"frame header needs {HEADER_LEN} bytes, have {len(buf)}")
    (length,) = struct.unpack_from(">I", buf)
    if length > MAX_PAYLOAD:
        raise OversizeFrameError(f"declared payload of {length} bytes exceeds {MAX_PAYLOAD}")
    total = HEADER_LEN + length
    if len(buf) < total:
        raise TruncatedFrameError(f"frame needs {total} bytes, have {len(buf)}")
    return decode_payload(buf[4], buf[HEADER_LEN:total]), total
