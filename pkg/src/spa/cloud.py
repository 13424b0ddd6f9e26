"""Cloud endpoint: serves split-decoding sessions over any transport.

Session flow (device drives): HELLO handshake with a compatibility digest,
one PROMPT, then per consulted step a BASE_HIDDENS -> SIDE_OUTPUT round
trip; every emitted token is announced as GATE_DECISION then TOKEN, and the
session ends with EOS. Any violation produces an ERROR frame and closes
the session; step indices increase strictly across all frames the cloud
initiates.
"""

from __future__ import annotations

import socketserver
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .checkpoint import compat_digest, load_checkpoint
from .decoding import (
    CloudStepModel,
    DecodeConfig,
    StepCounter,
    TransmissionCounter,
    run_decode,
)
from .errors import SpaError
from .model import BaseParams, GateParams, ModelConfig, SpaModel
from .tokenizer import EOS as EOS_TOKEN
from .tokenizer import VOCAB_SIZE as BYTE_VOCAB
from .transport import SocketTransport, TransportClosed, TransportTimeout
from .wire import (
    PROTOCOL_VERSION,
    BaseHiddens,
    Eos,
    ErrorCode,
    ErrorFrame,
    FrameError,
    GateDecision,
    Hello,
    OversizeFrameError,
    Prompt,
    SideOutput,
    Token,
)


class SessionAborted(SpaError):
    pass


@dataclass
class SessionRecord:
    session_id: int
    policy: str | None = None
    prompt_len: int = 0
    emitted_tokens: list[int] = field(default_factory=list)
    emitted_trace: list[int] = field(default_factory=list)
    gate_log: list[int] = field(default_factory=list)
    base_hiddens_sent: int = 0
    counter: TransmissionCounter | None = None
    error: str | None = None


class CloudEndpoint:
    """Transport-agnostic session logic around a frozen base + gate."""

    def __init__(
        self,
        config: ModelConfig,
        base: BaseParams,
        gate: GateParams,
        digest: str,
        wire_mode: str = "final",
        frame_timeout: float = 10.0,
    ):
        self.config = config
        self.base = base
        self.gate = gate
        self.digest = digest
        self.wire_mode = wire_mode
        self.frame_timeout = frame_timeout
        self.eos_id = EOS_TOKEN if config.vocab_size == BYTE_VOCAB else None
        self.sessions: list[SessionRecord] = []
        self._lock = threading.Lock()
        self._session_counter = 0

    @classmethod
    def from_model(cls, model: SpaModel, wire_mode: str = "final", **kw) -> "CloudEndpoint":
        return cls(
            model.config,
            model.base,
            model.gate,
            compat_digest(model.config, model.base_digest()),
            wire_mode=wire_mode,
            **kw,
        )

    @classmethod
    def from_checkpoint(cls, path: str | Path, wire_mode: str = "final", **kw) -> "CloudEndpoint":
        loaded = load_checkpoint(path)
        base, gate = loaded.build_cloud_parts()
        return cls(loaded.config, base, gate, loaded.compat_digest, wire_mode=wire_mode, **kw)

    def _new_record(self) -> SessionRecord:
        with self._lock:
            self._session_counter += 1
            record = SessionRecord(session_id=self._session_counter)
            self.sessions.append(record)
        return record

    def _fail(self, transport, code: int, message: str) -> None:
        try:
            transport.send(ErrorFrame(code, message))
        except SpaError:
            pass

    def handle_session(self, transport) -> SessionRecord:
        record = self._new_record()
        try:
            self._run_session(transport, record)
        except SessionAborted as e:
            record.error = str(e)
        except OversizeFrameError as e:
            record.error = str(e)
            self._fail(transport, ErrorCode.OVERSIZE, str(e))
        except FrameError as e:
            record.error = str(e)
            self._fail(transport, ErrorCode.BAD_FRAME, str(e))
        except (TransportClosed, TransportTimeout) as e:
            record.error = str(e)
        except SpaError as e:
            record.error = str(e)
            self._fail(transport, ErrorCode.INTERNAL, str(e))
        finally:
            counter = TransmissionCounter(
                policy=record.policy or "base_only", n_layers=self.config.n_layers
            )
            counter.frames_sent = transport.frames_sent
            counter.frames_received = transport.frames_received
            counter.bytes_sent = transport.bytes_sent
            counter.bytes_received = transport.bytes_received
            counter.hidden_round_trips = record.base_hiddens_sent
            counter.tokens_generated = len(record.emitted_tokens)
            counter.gate_trace = list(record.emitted_trace)
            record.counter = counter
            try:
                transport.close()
            except SpaError:
                pass
        return record

    def _abort(self, transport, code: int, message: str) -> SessionRecord:
        self._fail(transport, code, message)
        raise SessionAborted(message)

    def _run_session(self, transport, record: SessionRecord) -> None:
        hello = transport.recv(self.frame_timeout)
        if not isinstance(hello, Hello):
            self._abort(
                transport, ErrorCode.PROTOCOL_VIOLATION, "session must start with HELLO"
            )
        if hello.version != PROTOCOL_VERSION:
            self._abort(
                transport,
                ErrorCode.VERSION_MISMATCH,
                f"protocol version {hello.version} unsupported (need {PROTOCOL_VERSION})",
            )
        if hello.digest != self.digest:
            self._abort(
                transport, ErrorCode.DIGEST_MISMATCH, "model compatibility digest mismatch"
            )
        transport.send(Hello(PROTOCOL_VERSION, self.wire_mode, self.digest))

        prompt = transport.recv(self.frame_timeout)
        if not isinstance(prompt, Prompt):
            self._abort(transport, ErrorCode.PROTOCOL_VIOLATION, "expected PROMPT after HELLO")
        if prompt.policy == "device_only":
            self._abort(
                transport,
                ErrorCode.PROTOCOL_VIOLATION,
                "device_only sessions run entirely on the device",
            )
        if not prompt.token_ids:
            self._abort(transport, ErrorCode.PROTOCOL_VIOLATION, "prompt must not be empty")
        if max(prompt.token_ids) >= self.config.vocab_size:
            self._abort(
                transport,
                ErrorCode.PROTOCOL_VIOLATION,
                f"prompt token {max(prompt.token_ids)} out of range "
                f"for vocab {self.config.vocab_size}",
            )
        record.policy = prompt.policy
        record.prompt_len = len(prompt.token_ids)
        dcfg = DecodeConfig(
            max_new_tokens=prompt.max_new_tokens,
            strategy=prompt.strategy,
            beam_width=prompt.beam_width,
            policy=prompt.policy,
            wire_mode=self.wire_mode,
        )
        steps = StepCounter()

        def wire_side_provider(step: int, payload) -> "np.ndarray":
            if self.wire_mode == "all_layers":
                arr = payload[:, None, :]
            else:
                arr = payload[None, None, :]
            transport.send(BaseHiddens(step, arr))
            record.base_hiddens_sent += 1
            reply = transport.recv(self.frame_timeout)
            if isinstance(reply, ErrorFrame):
                raise SessionAborted(f"device error {reply.code}: {reply.message}")
            if not isinstance(reply, SideOutput):
                self._abort(
                    transport,
                    ErrorCode.PROTOCOL_VIOLATION,
                    f"expected SIDE_OUTPUT for step {step}",
                )
            if reply.step != step:
                self._abort(
                    transport,
                    ErrorCode.PROTOCOL_VIOLATION,
                    f"SIDE_OUTPUT step {reply.step} does not match request {step}",
                )
            if reply.vector.shape != (self.config.d_model,):
                self._abort(
                    transport,
                    ErrorCode.PROTOCOL_VIOLATION,
                    f"SIDE_OUTPUT vector has shape {reply.vector.shape}",
                )
            return reply.vector

        step_model = CloudStepModel(
            self.config,
            self.base,
            self.gate,
            prompt.policy,
            self.wire_mode,
            wire_side_provider,
            steps,
        )

        def on_emit(used: int, tok: int) -> None:
            transport.send(GateDecision(steps.take(), used))
            transport.send(Token(steps.take(), tok))
            record.emitted_trace.append(used)
            record.emitted_tokens.append(tok)

        run_decode(
            step_model, prompt.token_ids, dcfg, self.config.vocab_size, self.eos_id, on_emit
        )
        record.gate_log = list(step_model.gate_log)
        transport.send(Eos())


class _SessionTCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class CloudServer:
    """TCP wrapper: one thread per connection, one session per connection."""

    def __init__(self, endpoint: CloudEndpoint, host: str = "127.0.0.1", port: int = 0):
        self.endpoint = endpoint
        outer = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                transport = SocketTransport(self.request)
                outer.endpoint.handle_session(transport)

        self._server = _SessionTCPServer((host, port), Handler)
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address

    @property
    def sessions(self) -> list[SessionRecord]:
        return self.endpoint.sessions

    def start(self) -> "CloudServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def shutdown(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread:
            self._thread.join(timeout=5)


def serve_cloud(
    checkpoint: str | Path,
    listen: tuple[str, int] = ("127.0.0.1", 0),
    wire_mode: str = "final",
    start: bool = True,
) -> CloudServer:
    endpoint = CloudEndpoint.from_checkpoint(checkpoint, wire_mode=wire_mode)
    server = CloudServer(endpoint, listen[0], listen[1])
    return server.start() if start else server
