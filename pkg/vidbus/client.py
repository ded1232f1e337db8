"""Client side of the broker API: publishers, subscribers and reconnecting streams."""

from __future__ import annotations

import itertools
import logging
import queue
import socket
import threading
import time
from concurrent.futures import Future
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Tuple

from .errors import (
    BrokerError,
    BrokerTimeoutError,
    BrokerUnavailableError,
    GaveUpError,
    InfeasibleBoundError,
    WireFormatError,
    error_from_code,
)
from .frames import Frame, QosBound, deserialize_frame, now_micros, serialize_frame
from .wire import (
    OPEN_END,
    AckBody,
    CameraInfo,
    ConnectRequest,
    Connection,
    ErrorBody,
    InfeasibleNotice,
    Message,
    MessageType,
    PublishResult,
    Role,
    SubscribeRequest,
    decode_camera_infos,
    decode_text,
    decode_u8,
    encode_u64,
    parse_address,
)

logger = logging.getLogger(__name__)

Tracer = Callable[[str, int, str], None]

REPLY_TYPES = frozenset(
    {
        MessageType.CONNECT_ACK,
        MessageType.PUBLISH_ACK,
        MessageType.CAMERA_INFO_RESP,
        MessageType.ACK,
        MessageType.ERROR,
    }
)

DEFAULT_PUBLISH_TIMEOUT_MS = 50.0
DEFAULT_CONTROL_TIMEOUT_MS = 1000.0
DEFAULT_BASE_LATENCY_MS = 100.0


@dataclass(frozen=True)
class TimeoutPolicy:
    subscribe_timeout_ms: float
    publish_timeout_ms: float = DEFAULT_PUBLISH_TIMEOUT_MS
    control_timeout_ms: float = DEFAULT_CONTROL_TIMEOUT_MS

    def __post_init__(self) -> None:
        if min(self.subscribe_timeout_ms, self.publish_timeout_ms, self.control_timeout_ms) <= 0:
            raise ValueError("All timeouts must be > 0.")

    @classmethod
    def for_stream(
        cls,
        fps: float,
        base_latency_ms: float = DEFAULT_BASE_LATENCY_MS,
        pipeline_ms: Optional[float] = None,
        publish_timeout_ms: float = DEFAULT_PUBLISH_TIMEOUT_MS,
    ) -> "TimeoutPolicy":
        """Subscribe waits three frame intervals plus the base network latency."""
        if fps <= 0:
            raise ValueError("fps must be > 0.")
        control = 2.0 * pipeline_ms if pipeline_ms else DEFAULT_CONTROL_TIMEOUT_MS
        return cls(
            subscribe_timeout_ms=3.0 * 1000.0 / fps + base_latency_ms,
            publish_timeout_ms=publish_timeout_ms,
            control_timeout_ms=control,
        )


def open_socket(address: str, timeout_s: float) -> socket.socket:
    host, port = parse_address(address)
    try:
        sock = socket.create_connection((host, port), timeout=timeout_s)
    except OSError as exc:
        raise BrokerUnavailableError(f"Cannot reach {address}: {exc}") from exc
    sock.settimeout(None)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return sock


class RpcPeer:
    """One connection with a reader thread; replies resolve per-request futures.

    Messages that are not replies to a pending request go to ``on_message``.
    """

    def __init__(
        self,
        address: str,
        *,
        timeout_s: float = 2.0,
        on_message: Optional[Callable[[Message], None]] = None,
        on_close: Optional[Callable[[], None]] = None,
        sock: Optional[socket.socket] = None,
    ):
        self.address = address
        self.timeout_s = timeout_s
        self.conn = Connection(sock if sock is not None else open_socket(address, timeout_s))
        self._on_message = on_message
        self._on_close = on_close
        self._pending: Dict[int, Future] = {}
        self._lock = threading.Lock()
        self._ids = itertools.count(1)
        self._alive = True
        self._reader = threading.Thread(
            target=self._read_loop, name=f"rpc-reader-{address}", daemon=True
        )
        self._reader.start()

    @property
    def alive(self) -> bool:
        return self._alive

    def next_request_id(self) -> int:
        with self._lock:
            return next(self._ids)

    def send(self, message_type: MessageType, body: bytes = b"", request_id: int = 0) -> None:
        try:
            self.conn.send(Message(message_type, request_id, body))
        except OSError as exc:
            raise BrokerUnavailableError(f"Send to {self.address} failed: {exc}") from exc

    def request(
        self,
        message_type: MessageType,
        body: bytes = b"",
        *,
        timeout_s: Optional[float] = None,
        request_id: Optional[int] = None,
    ) -> Message:
        rid = request_id if request_id is not None else self.next_request_id()
        future: Future = Future()
        with self._lock:
            if not self._alive:
                raise BrokerUnavailableError(f"Connection to {self.address} is closed.")
            self._pending[rid] = future
        try:
            self.send(message_type, body, rid)
            reply: Message = future.result(timeout=timeout_s if timeout_s is not None else self.timeout_s)
        except FutureTimeout as exc:
            raise BrokerTimeoutError(
                f"{message_type.name} to {self.address} timed out."
            ) from exc
        finally:
            with self._lock:
                self._pending.pop(rid, None)
        if reply.type is MessageType.ERROR:
            error = ErrorBody.decode(reply.body)
            raise error_from_code(error.code, error.message)
        return reply

    def _read_loop(self) -> None:
        try:
            while True:
                try:
                    message = self.conn.recv()
                except (OSError, WireFormatError) as exc:
                    if self._alive:
                        logger.debug("event=rpc_read_failed address=%s error=%s", self.address, exc)
                    break
                if message is None:
                    break
                future = None
                if message.type in REPLY_TYPES:
                    with self._lock:
                        future = self._pending.get(message.request_id)
                if future is not None:
                    future.set_result(message)
                elif self._on_message is not None:
                    try:
                        self._on_message(message)
                    except Exception:
                        logger.exception("event=rpc_handler_failed type=%s", message.type.name)
        finally:
            with self._lock:
                self._alive = False
                pending = list(self._pending.values())
                self._pending.clear()
            for future in pending:
                if not future.done():
                    future.set_exception(
                        BrokerUnavailableError(f"Connection to {self.address} closed.")
                    )
            self.conn.close()
            if self._on_close is not None:
                self._on_close()

    def close(self) -> None:
        self._alive = False
        self.conn.close()
        if threading.current_thread() is not self._reader:
            self._reader.join(timeout=2.0)


def connect_peer(
    address: str,
    role: Role,
    token: str = "",
    *,
    timeout_s: float = 2.0,
    on_message: Optional[Callable[[Message], None]] = None,
    on_close: Optional[Callable[[], None]] = None,
) -> Tuple[RpcPeer, str]:
    peer = RpcPeer(address, timeout_s=timeout_s, on_message=on_message, on_close=on_close)
    try:
        reply = peer.request(MessageType.CONNECT, ConnectRequest(role, token).encode())
    except BrokerError:
        peer.close()
        raise
    return peer, decode_text(reply.body)


class PublisherClient:
    """Pushes frames to a CamBroker; a missing PublishAck within the budget is a failure."""

    def __init__(
        self,
        address: str,
        token: str = "",
        *,
        policy: Optional[TimeoutPolicy] = None,
        tracer: Optional[Tracer] = None,
    ):
        self.policy = policy or TimeoutPolicy(subscribe_timeout_ms=1000.0)
        self.tracer = tracer
        self.peer, self.client_id = connect_peer(
            address, Role.PUBLISHER, token, timeout_s=max(1.0, self.policy.publish_timeout_ms / 1000)
        )

    def publish(self, frame: Frame) -> PublishResult:
        if self.tracer is not None:
            self.tracer(frame.camera_id, frame.ts, "publish")
        reply = self.peer.request(
            MessageType.PUBLISH,
            serialize_frame(frame),
            timeout_s=self.policy.publish_timeout_ms / 1000.0,
        )
        return PublishResult(decode_u8(reply.body))

    def close(self) -> None:
        self.peer.close()

    def __enter__(self) -> "PublisherClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


_END = object()


class SubscriptionStream:
    """Frames of one subscription in arrival order.

    ``receive`` returns ``None`` once the broker signals end-of-stream and
    raises :class:`InfeasibleBoundError` when the camera reports the bound
    cannot be met; the stream stays usable after that.
    """

    def __init__(self, client: "SubscriberClient", request_id: int, camera_id: str, timeout_s: float):
        self.client = client
        self.request_id = request_id
        self.camera_id = camera_id
        self.timeout_s = timeout_s
        self.subscription_id: Optional[int] = None
        self.last_ts: Optional[int] = None
        self.ended = False
        self.cancelled = False
        self.infeasible: Optional[InfeasibleBoundError] = None
        self.receipts: List[Tuple[int, int]] = []
        self._queue: "queue.Queue[object]" = queue.Queue()

    def _push(self, item: object) -> None:
        self._queue.put(item)

    def receive(self, timeout_s: Optional[float] = None) -> Optional[Frame]:
        if self.ended:
            return None
        wait = timeout_s if timeout_s is not None else self.timeout_s
        try:
            item = self._queue.get(timeout=wait)
        except queue.Empty as exc:
            raise BrokerTimeoutError(
                f"No frame from camera '{self.camera_id}' within {wait:.3f}s."
            ) from exc
        if item is _END:
            self.ended = True
            return None
        if isinstance(item, InfeasibleBoundError):
            self.infeasible = item
            raise item
        if isinstance(item, BaseException):
            raise item
        frame, received = item  # type: ignore[misc]
        self.last_ts = frame.ts
        self.receipts.append((frame.ts, received))
        return frame

    def __iter__(self) -> Iterator[Frame]:
        while True:
            frame = self.receive()
            if frame is None:
                return
            yield frame

    def cancel(self) -> None:
        self.client.unsubscribe(self)


class SubscriberClient:
    def __init__(
        self,
        address: str,
        token: str = "",
        *,
        policy: Optional[TimeoutPolicy] = None,
        tracer: Optional[Tracer] = None,
    ):
        self.address = address
        self.policy = policy or TimeoutPolicy.for_stream(fps=5.0)
        self.tracer = tracer
        self._streams: Dict[int, SubscriptionStream] = {}
        self._lock = threading.Lock()
        self.peer, self.client_id = connect_peer(
            address,
            Role.SUBSCRIBER,
            token,
            timeout_s=max(1.0, self.policy.control_timeout_ms / 1000.0),
            on_message=self._on_message,
            on_close=self._on_close,
        )

    def get_camera_info(self) -> List[CameraInfo]:
        reply = self.peer.request(MessageType.GET_CAMERA_INFO)
        return decode_camera_infos(reply.body)

    def subscribe(
        self,
        camera_id: str,
        bound: QosBound,
        begin: int = 0,
        end: int = OPEN_END,
    ) -> SubscriptionStream:
        rid = self.peer.next_request_id()
        stream = SubscriptionStream(
            self, rid, camera_id, timeout_s=self.policy.subscribe_timeout_ms / 1000.0
        )
        with self._lock:
            self._streams[rid] = stream
        try:
            reply = self.peer.request(
                MessageType.SUBSCRIBE,
                SubscribeRequest(camera_id, begin, end, bound).encode(),
                request_id=rid,
            )
        except BrokerError:
            with self._lock:
                self._streams.pop(rid, None)
            raise
        stream.subscription_id = AckBody.decode(reply.body).value
        return stream

    def unsubscribe(self, stream: SubscriptionStream) -> None:
        if stream.subscription_id is None:
            raise ValueError("Stream was never acknowledged.")
        self.peer.request(MessageType.UNSUBSCRIBE, encode_u64(stream.subscription_id))
        stream.cancelled = True
        stream.ended = True
        with self._lock:
            self._streams.pop(stream.request_id, None)

    def _on_message(self, message: Message) -> None:
        if message.type is MessageType.FRAME_DELIVERY:
            received = now_micros()
            with self._lock:
                stream = self._streams.get(message.request_id)
            if stream is None:
                return
            if not message.body:
                stream._push(_END)
                return
            frame = deserialize_frame(message.body)
            if self.tracer is not None:
                self.tracer(frame.camera_id, frame.ts, "subscribe")
            stream._push((frame, received))
        elif message.type is MessageType.INFEASIBLE_NOTICE:
            notice = InfeasibleNotice.decode(message.body)
            with self._lock:
                streams = [s for s in self._streams.values() if s.camera_id == notice.camera_id]
            for stream in streams:
                stream._push(InfeasibleBoundError(notice.best_accuracy, notice.camera_id))
        elif message.type is MessageType.ERROR:
            with self._lock:
                stream = self._streams.get(message.request_id)
            if stream is not None:
                error = ErrorBody.decode(message.body)
                stream._push(error_from_code(error.code, error.message))

    def _on_close(self) -> None:
        with self._lock:
            streams = list(self._streams.values())
        for stream in streams:
            stream._push(BrokerUnavailableError(f"Connection to {self.address} lost."))

    def close(self) -> None:
        self.peer.close()

    def __enter__(self) -> "SubscriberClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class ResilientSubscription:
    """A subscription that reconnects after broker failures.

    Up to ``retries`` reconnect attempts with a fixed backoff; each resumes at
    the last received timestamp + 1, so no frame is delivered twice.

    An infeasible notice ends the current loop with :class:`InfeasibleBoundError`.
    The subscription itself stays open: iterating again picks up the same stream
    at the next frame.
    """

    def __init__(
        self,
        address: str,
        camera_id: str,
        bound: QosBound,
        begin: int = 0,
        end: int = OPEN_END,
        *,
        retries: int = 3,
        backoff_s: float = 0.5,
        token: str = "",
        policy: Optional[TimeoutPolicy] = None,
    ):
        if retries < 0:
            raise ValueError("retries must be >= 0.")
        self.address = address
        self.camera_id = camera_id
        self.bound = bound
        self.begin = begin
        self.end = end
        self.retries = retries
        self.backoff_s = backoff_s
        self.token = token
        self.policy = policy
        self.last_ts: Optional[int] = None
        self.reconnects = 0
        self._client: Optional[SubscriberClient] = None
        self._stream: Optional[SubscriptionStream] = None

    def _resume_from(self) -> int:
        return self.begin if self.last_ts is None else self.last_ts + 1

    def _open(self) -> None:
        self._client = SubscriberClient(self.address, self.token, policy=self.policy)
        self._stream = self._client.subscribe(
            self.camera_id, self.bound, self._resume_from(), self.end
        )

    def _drop(self) -> None:
        if self._client is not None:
            self._client.close()
        self._client = None
        self._stream = None

    def _reconnect(self, cause: BaseException) -> None:
        self._drop()
        for attempt in range(1, self.retries + 1):
            time.sleep(self.backoff_s)
            logger.warning(
                "event=reconnect attempt=%d camera=%s resume_from=%d cause=%s",
                attempt,
                self.camera_id,
                self._resume_from(),
                cause,
            )
            try:
                self._open()
            except (BrokerUnavailableError, BrokerTimeoutError) as exc:
                cause = exc
                self._drop()
                continue
            self.reconnects += 1
            return
        raise GaveUpError(
            f"Gave up on camera '{self.camera_id}' after {self.retries} retries: {cause}"
        )

    def __iter__(self) -> Iterator[Frame]:
        if self._stream is None:
            try:
                self._open()
            except (BrokerUnavailableError, BrokerTimeoutError) as exc:
                self._reconnect(exc)
        while True:
            assert self._stream is not None
            try:
                frame = self._stream.receive()
            except (BrokerUnavailableError, BrokerTimeoutError) as exc:
                self._reconnect(exc)
                continue
            if frame is None:
                return
            if self.last_ts is not None and frame.ts <= self.last_ts:
                continue
            self.last_ts = frame.ts
            yield frame

    @property
    def stream(self) -> Optional[SubscriptionStream]:
        return self._stream

    def close(self) -> None:
        if self._client is not None and self._stream is not None and not self._stream.ended:
            try:
                self._client.unsubscribe(self._stream)
            except BrokerError:
                pass
        self._drop()
