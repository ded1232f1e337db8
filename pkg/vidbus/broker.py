"""EdgeBroker and CamBroker services.

The EdgeBroker keeps one replica log per registered camera and serves
subscribers from it. The CamBroker keeps the camera's raw log, runs the
latency controller and transfers processed frames upstream only while the
edge has at least one active subscription for the camera.
"""

from __future__ import annotations

import hmac
import itertools
import logging
import queue
import socketserver
import ssl
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Set, Tuple

from .client import RpcPeer, TimeoutPolicy, Tracer, connect_peer
from .controller import ControllerConfig, ControlOutcome, LatencyController
from .errors import (
    AuthFailedError,
    BadRequestError,
    BrokerError,
    BrokerUnavailableError,
    DuplicateCameraError,
    ErrorCode,
    FrameTooLargeError,
    KnobError,
    UnknownCameraError,
    UnknownSubscriptionError,
    VidbusError,
)
from .frames import Frame, QosBound, deserialize_frame, now_micros, serialize_frame
from .knobs import FrameDiffState
from .memlog import MAX_TS, AppendResult, LogConfig, MemLog, RecoveryReport, recover, recover_all
from .netsim import Channel, ChannelModel
from .profiles import LinearLatencyModel, ProfileTable
from .wire import (
    OPEN_END,
    AckBody,
    BackfillRequest,
    CameraInfo,
    ConnectRequest,
    Connection,
    ErrorBody,
    InfeasibleNotice,
    Message,
    MessageType,
    PublishResult,
    RegisterRequest,
    Role,
    SetTargetRequest,
    SubscribeRequest,
    decode_text,
    decode_u64,
    encode_camera_infos,
    encode_text,
    encode_u8,
    parse_address,
)

logger = logging.getLogger(__name__)

__all__ = ["CamBroker", "EdgeBroker", "Subscription", "SubscriptionState", "TimeoutPolicy"]

TRANSFER_ID_BASE = 1 << 63
BACKFILL_ID_BASE = 1 << 62
WAKE_INTERVAL_S = 0.25


def _error_message(request_id: int, exc: BrokerError) -> Message:
    return Message(MessageType.ERROR, request_id, ErrorBody(int(exc.code), str(exc)).encode())


def _token_ok(expected: str, presented: str) -> bool:
    if not expected:
        return True
    return hmac.compare_digest(expected.encode("utf-8"), presented.encode("utf-8"))


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: Tuple[str, int], owner: "_ServiceBase"):
        self.owner = owner
        super().__init__(address, _SessionHandler)


class _SessionHandler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        owner: _ServiceBase = self.server.owner  # type: ignore[attr-defined]
        sock = self.request
        if owner.ssl_context is not None:
            sock = owner.ssl_context.wrap_socket(sock, server_side=True)
        session = Session(Connection(sock), self.client_address)
        owner._session_opened(session)
        try:
            while True:
                try:
                    message = session.conn.recv()
                except (OSError, VidbusError):
                    break
                if message is None:
                    break
                try:
                    owner._dispatch(session, message)
                except BrokerError as exc:
                    session.reply(_error_message(message.request_id, exc))
                except VidbusError as exc:
                    session.reply(_error_message(message.request_id, BadRequestError(str(exc))))
                except OSError:
                    break
        finally:
            owner._session_closed(session)
            session.conn.close()


@dataclass(eq=False)
class Session:
    conn: Connection
    peer: Tuple[str, int]
    client_id: Optional[str] = None
    role: Optional[Role] = None
    camera_id: Optional[str] = None
    subscriptions: Set[int] = field(default_factory=set)

    def reply(self, message: Message) -> None:
        try:
            self.conn.send(message)
        except OSError:
            logger.debug("event=reply_failed peer=%s", self.peer)

    def require(self, role: Role) -> None:
        if self.client_id is None:
            raise BadRequestError("Connect first.")
        if self.role is not role:
            raise BadRequestError(f"Operation requires role {role.name}.")


class _ServiceBase:
    def __init__(self, listen: str, auth_token: str, ssl_context: Optional[ssl.SSLContext]):
        self.listen = listen
        self.auth_token = auth_token
        self.ssl_context = ssl_context
        self._server: Optional[_Server] = None
        self._thread: Optional[threading.Thread] = None
        self._sessions: Set[Session] = set()
        self._sessions_lock = threading.Lock()
        self._client_ids = itertools.count(1)

    @property
    def address(self) -> str:
        if self._server is None:
            return self.listen
        host, port = self._server.server_address[:2]
        return f"{host}:{port}"

    def _serve(self, name: str) -> None:
        self._server = _Server(parse_address(self.listen), self)
        self._thread = threading.Thread(
            target=self._server.serve_forever, name=name, kwargs={"poll_interval": 0.1}, daemon=True
        )
        self._thread.start()

    def _shutdown_server(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
        with self._sessions_lock:
            sessions = list(self._sessions)
        for session in sessions:
            session.conn.close()
        if self._thread is not None:
            self._thread.join(timeout=2.0)

    def _session_opened(self, session: Session) -> None:
        with self._sessions_lock:
            self._sessions.add(session)

    def _session_closed(self, session: Session) -> None:
        with self._sessions_lock:
            self._sessions.discard(session)

    def _connect(self, session: Session, message: Message, allowed: Tuple[Role, ...]) -> None:
        request = ConnectRequest.decode(message.body)
        if not _token_ok(self.auth_token, request.token):
            raise AuthFailedError("Bad credentials.")
        if request.role not in allowed:
            raise BadRequestError(f"Role {request.role.name} cannot connect here.")
        session.client_id = f"{request.role.name.lower()}-{next(self._client_ids)}"
        session.role = request.role
        session.reply(Message(MessageType.CONNECT_ACK, message.request_id, encode_text(session.client_id)))

    def _dispatch(self, session: Session, message: Message) -> None:  # pragma: no cover
        raise NotImplementedError


# -- edge -------------------------------------------------------------------------


class SubscriptionState(Enum):
    ACTIVE = "active"
    ENDED = "ended"
    CANCELLED = "cancelled"


@dataclass(eq=False)
class Backfill:
    """Frames the camera replays for one subscription, ended by ``None``."""

    id: int
    session: Session
    frames: "queue.Queue[Optional[Frame]]" = field(default_factory=queue.Queue)


@dataclass(eq=False)
class Subscription:
    id: int
    client_id: str
    camera_id: str
    begin: int
    end: int
    bound: QosBound
    request_id: int
    session: Session
    state: SubscriptionState = SubscriptionState.ACTIVE
    delivered: int = 0
    # replica frames are served from here on; earlier ones come from ``backfill``
    tail_from: int = 0
    backfill: Optional[Backfill] = None


@dataclass(eq=False)
class CameraChannel:
    camera_id: str
    replica: MemLog
    info: CameraInfo
    session: Optional[Session] = None
    subscriptions: Dict[int, Subscription] = field(default_factory=dict)
    transfer_id: Optional[int] = None
    target: Optional[QosBound] = None
    # first timestamp the running transfer streams into the replica
    stream_from: Optional[int] = None
    removed: bool = False

    def detach(self) -> None:
        self.transfer_id = None
        self.target = None
        self.stream_from = None

    @property
    def online(self) -> bool:
        return self.session is not None


class EdgeBroker:
    """Aggregation-side broker: registry, replica logs, subscriber sessions."""

    def __init__(
        self,
        listen: str = "127.0.0.1:0",
        log_config: Optional[LogConfig] = None,
        *,
        auth_token: str = "",
        tracer: Optional[Tracer] = None,
        ssl_context: Optional[ssl.SSLContext] = None,
    ):
        self._service = _EdgeService(self, listen, auth_token, ssl_context)
        self.log_config = log_config or LogConfig(capacity_bytes=256 * 1024 * 1024)
        self.tracer = tracer
        self._cameras: Dict[str, CameraChannel] = {}
        self._retired: List[MemLog] = []
        self._registry_lock = threading.RLock()
        self._sub_ids = itertools.count(1)
        self._transfer_ids = itertools.count(1)
        self._backfill_ids = itertools.count(1)
        self._backfills: Dict[int, Backfill] = {}
        self._workers: List[threading.Thread] = []
        self.recovery: Dict[str, RecoveryReport] = {}
        self.running = False

    @property
    def address(self) -> str:
        return self._service.address

    def start(self) -> "EdgeBroker":
        """Recover persisted replicas, then accept connections."""
        for camera_id, (replica, report) in recover_all(self.log_config).items():
            self.recovery[camera_id] = report
            self._cameras[camera_id] = CameraChannel(
                camera_id=camera_id,
                replica=replica,
                info=CameraInfo(camera_id, 1, 1, 0.0, online=False),
            )
        self._service._serve("edge-broker")
        self.running = True
        logger.info("event=edge_started address=%s recovered=%d", self.address, len(self.recovery))
        return self

    def stop(self, *, flush: bool = True) -> None:
        """Stop serving. ``flush=False`` leaves the active segments unpersisted."""
        if not self.running:
            return
        self.running = False
        with self._registry_lock:
            channels = list(self._cameras.values())
            for channel in channels:
                for sub in channel.subscriptions.values():
                    sub.state = SubscriptionState.CANCELLED
        self._service._shutdown_server()
        for worker in list(self._workers):
            worker.join(timeout=2.0)
        for replica in [c.replica for c in channels] + self._retired:
            if flush:
                replica.flush()
            replica.close()
        logger.info("event=edge_stopped")

    def __enter__(self) -> "EdgeBroker":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    # queries used by tests and the CLI

    def camera_infos(self) -> List[CameraInfo]:
        with self._registry_lock:
            return [
                CameraInfo(
                    c.camera_id, c.info.width, c.info.height, c.info.fps, online=c.online
                )
                for c in sorted(self._cameras.values(), key=lambda c: c.camera_id)
            ]

    def replica(self, camera_id: str) -> MemLog:
        with self._registry_lock:
            channel = self._cameras.get(camera_id)
        if channel is None:
            raise UnknownCameraError(f"Unknown camera '{camera_id}'.")
        return channel.replica

    def transfer_active(self, camera_id: str) -> bool:
        with self._registry_lock:
            channel = self._cameras.get(camera_id)
            return channel is not None and channel.transfer_id is not None

    def active_subscriptions(self, camera_id: str) -> int:
        with self._registry_lock:
            channel = self._cameras.get(camera_id)
            if channel is None:
                return 0
            return sum(1 for s in channel.subscriptions.values() if s.state is SubscriptionState.ACTIVE)

    # request handling

    def _dispatch(self, session: Session, message: Message) -> None:
        kind = message.type
        if kind is MessageType.CONNECT:
            self._service._connect(session, message, (Role.SUBSCRIBER, Role.CAMERA))
        elif kind is MessageType.GET_CAMERA_INFO:
            if session.client_id is None:
                raise BadRequestError("Connect first.")
            body = encode_camera_infos(self.camera_infos())
            session.reply(Message(MessageType.CAMERA_INFO_RESP, message.request_id, body))
        elif kind is MessageType.REGISTER:
            session.require(Role.CAMERA)
            self._register(session, message)
        elif kind is MessageType.UNREGISTER:
            session.require(Role.CAMERA)
            self._unregister(session, message)
        elif kind is MessageType.FRAME_DELIVERY:
            session.require(Role.CAMERA)
            self._receive_frame(session, message)
        elif kind is MessageType.INFEASIBLE_NOTICE:
            session.require(Role.CAMERA)
            self._forward_infeasible(message)
        elif kind is MessageType.SUBSCRIBE:
            session.require(Role.SUBSCRIBER)
            self._subscribe(session, message)
        elif kind is MessageType.UNSUBSCRIBE:
            session.require(Role.SUBSCRIBER)
            self._unsubscribe(session, message)
        elif kind is MessageType.ACK:
            return
        else:
            raise BadRequestError(f"Unexpected message {kind.name}.")

    def _register(self, session: Session, message: Message) -> None:
        request = RegisterRequest.decode(message.body)
        info = CameraInfo(request.camera_id, request.width, request.height, request.fps)
        with self._registry_lock:
            channel = self._cameras.get(request.camera_id)
            if channel is not None and channel.online and channel.session is not session:
                raise DuplicateCameraError(f"Camera '{request.camera_id}' is already registered.")
            if channel is None:
                channel = CameraChannel(
                    camera_id=request.camera_id,
                    replica=MemLog(self.log_config, request.camera_id),
                    info=info,
                )
                self._cameras[request.camera_id] = channel
            channel.info = info
            channel.session = session
            channel.detach()
            session.camera_id = request.camera_id
        session.reply(Message(MessageType.ACK, message.request_id, AckBody().encode()))
        logger.info(
            "event=camera_registered camera=%s endpoint=%s", request.camera_id, request.endpoint
        )
        self._update_upstream(channel)

    def _unregister(self, session: Session, message: Message) -> None:
        camera_id = decode_text(message.body)
        with self._registry_lock:
            channel = self._cameras.pop(camera_id, None)
            if channel is None:
                raise UnknownCameraError(f"Unknown camera '{camera_id}'.")
            channel.removed = True
            channel.session = None
            channel.detach()
            self._retired.append(channel.replica)
        session.camera_id = None
        session.reply(Message(MessageType.ACK, message.request_id, AckBody().encode()))
        logger.info("event=camera_unregistered camera=%s", camera_id)

    def _receive_frame(self, session: Session, message: Message) -> None:
        with self._registry_lock:
            backfill = self._backfills.get(message.request_id)
        if backfill is not None:
            if backfill.session is not session:
                raise BadRequestError(f"Backfill {message.request_id} belongs to another camera.")
            backfill.frames.put(deserialize_frame(message.body) if message.body else None)
            return
        if not message.body:
            return
        received = now_micros()
        frame = deserialize_frame(message.body)
        with self._registry_lock:
            channel = self._cameras.get(frame.camera_id)
        if channel is None or channel.session is not session:
            raise UnknownCameraError(f"Frame for unregistered camera '{frame.camera_id}'.")
        if self.tracer is not None:
            self.tracer(frame.camera_id, frame.ts, "edge_receive")
        try:
            result = channel.replica.append(frame)
        except FrameTooLargeError as exc:
            raise BrokerError(str(exc), ErrorCode.FRAME_TOO_LARGE) from exc
        if result is AppendResult.REJECTED_STALE:
            logger.debug("event=replica_stale camera=%s ts=%d", frame.camera_id, frame.ts)
        session.reply(
            Message(MessageType.ACK, message.request_id, AckBody(frame.ts, float(received)).encode())
        )

    def _forward_infeasible(self, message: Message) -> None:
        notice = InfeasibleNotice.decode(message.body)
        with self._registry_lock:
            channel = self._cameras.get(notice.camera_id)
            subs = [] if channel is None else list(channel.subscriptions.values())
        logger.warning(
            "event=infeasible_forwarded camera=%s best_acc=%.3f subscribers=%d",
            notice.camera_id,
            notice.best_accuracy,
            len(subs),
        )
        for sub in subs:
            if sub.state is SubscriptionState.ACTIVE:
                sub.session.reply(Message(MessageType.INFEASIBLE_NOTICE, sub.request_id, message.body))

    def _subscribe(self, session: Session, message: Message) -> None:
        request = SubscribeRequest.decode(message.body)
        if request.end != OPEN_END and request.begin > request.end:
            raise BadRequestError("Subscription begin must not exceed end.")
        with self._registry_lock:
            channel = self._cameras.get(request.camera_id)
            if channel is None:
                raise UnknownCameraError(f"Unknown camera '{request.camera_id}'.")
            sub = Subscription(
                id=next(self._sub_ids),
                client_id=session.client_id or "",
                camera_id=request.camera_id,
                begin=request.begin,
                end=request.end,
                bound=request.bound,
                request_id=message.request_id,
                session=session,
            )
            channel.subscriptions[sub.id] = sub
            session.subscriptions.add(sub.id)
        session.reply(Message(MessageType.ACK, message.request_id, AckBody(sub.id).encode()))
        self._update_upstream(channel)
        self._request_backfill(channel, sub)
        worker = threading.Thread(
            target=self._deliver, args=(channel, sub), name=f"deliver-{sub.id}", daemon=True
        )
        self._workers = [w for w in self._workers if w.is_alive()]
        self._workers.append(worker)
        worker.start()

    def _request_backfill(self, channel: CameraChannel, sub: Subscription) -> None:
        """Ask the camera to replay the part of ``sub`` that precedes the running transfer.

        Only frames from ``stream_from`` on reach the replica through the transfer, so a
        subscription beginning earlier would otherwise miss whatever the replica lacks.
        With the camera offline the replica is all there is.
        """
        with self._registry_lock:
            stream_from = channel.stream_from
            session = channel.session
            if stream_from is None or session is None or sub.begin >= stream_from:
                sub.tail_from = sub.begin
                return
            sub.tail_from = stream_from
            backfill = Backfill(BACKFILL_ID_BASE | next(self._backfill_ids), session)
            self._backfills[backfill.id] = backfill
            sub.backfill = backfill
        request = BackfillRequest(sub.begin, min(sub.end, stream_from - 1))
        logger.info(
            "event=backfill_requested camera=%s sub=%d begin=%d end=%d",
            channel.camera_id,
            sub.id,
            request.begin,
            request.end,
        )
        session.reply(Message(MessageType.BACKFILL, backfill.id, request.encode()))

    def _unsubscribe(self, session: Session, message: Message) -> None:
        sub_id = decode_u64(message.body)
        if sub_id not in session.subscriptions:
            raise UnknownSubscriptionError(f"Unknown subscription {sub_id}.")
        session.subscriptions.discard(sub_id)
        channel, sub = self._find_subscription(sub_id)
        # no delivery can slip in between the state change and the ack
        with session.conn.send_lock:
            if sub is not None and sub.state is SubscriptionState.ACTIVE:
                sub.state = SubscriptionState.CANCELLED
            session.conn.send_locked(
                Message(MessageType.ACK, message.request_id, AckBody(sub_id).encode())
            )
        if channel is not None:
            self._retire(channel, sub_id)

    def _find_subscription(
        self, sub_id: int
    ) -> Tuple[Optional[CameraChannel], Optional[Subscription]]:
        with self._registry_lock:
            for channel in self._cameras.values():
                sub = channel.subscriptions.get(sub_id)
                if sub is not None:
                    return channel, sub
        return None, None

    def _retire(self, channel: CameraChannel, sub_id: int) -> None:
        with self._registry_lock:
            channel.subscriptions.pop(sub_id, None)
        self._update_upstream(channel)

    def _update_upstream(self, channel: CameraChannel) -> None:
        """Start, retarget or stop the camera's transfer to match its subscriptions."""
        with self._registry_lock:
            if channel.removed or channel.session is None:
                return
            active = [
                s for s in channel.subscriptions.values() if s.state is SubscriptionState.ACTIVE
            ]
            session = channel.session
            if not active:
                if channel.transfer_id is None:
                    return
                request = SetTargetRequest(active=False)
                transfer_id = channel.transfer_id
                channel.detach()
                logger.info("event=upstream_stopped camera=%s", channel.camera_id)
            else:
                composite = QosBound(
                    latency_max_ms=min(s.bound.latency_max_ms for s in active),
                    accuracy_min=max(s.bound.accuracy_min for s in active),
                )
                if channel.transfer_id is not None and composite == channel.target:
                    return
                begin = min(s.begin for s in active)
                last = channel.replica.last_ts
                resume_from = begin if last is None else max(begin, last + 1)
                if channel.transfer_id is None:
                    channel.transfer_id = TRANSFER_ID_BASE | next(self._transfer_ids)
                    channel.stream_from = resume_from
                    logger.info(
                        "event=upstream_started camera=%s resume_from=%d latency_ms=%.1f acc=%.2f",
                        channel.camera_id,
                        resume_from,
                        composite.latency_max_ms,
                        composite.accuracy_min,
                    )
                channel.target = composite
                transfer_id = channel.transfer_id
                request = SetTargetRequest(True, composite, resume_from)
        session.reply(Message(MessageType.SET_TARGET, transfer_id, request.encode()))

    def _deliver(self, channel: CameraChannel, sub: Subscription) -> None:
        """Stream replica frames in [begin, end] to one subscriber, each at most once."""
        replica = channel.replica
        conn = sub.session.conn
        try:
            if sub.backfill is not None and not self._forward_backfill(channel, sub):
                return
            cursor = sub.tail_from
            while sub.state is SubscriptionState.ACTIVE:
                last = replica.last_ts
                if last is not None and cursor <= min(last, sub.end):
                    for frame in replica.get_range(cursor, min(last, sub.end)).frames:
                        if not self._forward(sub, frame):
                            return
                        cursor = frame.ts + 1
                    cursor = max(cursor, min(last, sub.end) + 1)
                finished = sub.end != OPEN_END and cursor > sub.end
                if finished or channel.removed:
                    with conn.send_lock:
                        if sub.state is SubscriptionState.ACTIVE:
                            conn.send_locked(Message(MessageType.FRAME_DELIVERY, sub.request_id, b""))
                            sub.state = SubscriptionState.ENDED
                    break
                if not self.running:
                    return
                replica.wait_for_append(last, timeout=WAKE_INTERVAL_S)
        except OSError:
            sub.state = SubscriptionState.CANCELLED
        finally:
            if sub.state is not SubscriptionState.ACTIVE and not channel.removed and self.running:
                self._retire(channel, sub.id)

    def _forward(self, sub: Subscription, frame: Frame) -> bool:
        conn = sub.session.conn
        with conn.send_lock:
            if sub.state is not SubscriptionState.ACTIVE:
                return False
            conn.send_locked(
                Message(MessageType.FRAME_DELIVERY, sub.request_id, serialize_frame(frame))
            )
        sub.delivered += 1
        if self.tracer is not None:
            self.tracer(frame.camera_id, frame.ts, "edge_send")
        return True

    def _forward_backfill(self, channel: CameraChannel, sub: Subscription) -> bool:
        """Relay the camera's replay of ``[begin, tail_from)``; False once ``sub`` stops."""
        backfill = sub.backfill
        assert backfill is not None
        next_ts = sub.begin
        try:
            while sub.state is SubscriptionState.ACTIVE and self.running:
                try:
                    frame = backfill.frames.get(timeout=WAKE_INTERVAL_S)
                except queue.Empty:
                    if channel.removed or channel.session is not backfill.session:
                        logger.warning(
                            "event=backfill_abandoned camera=%s sub=%d next_ts=%d",
                            channel.camera_id,
                            sub.id,
                            next_ts,
                        )
                        return True
                    continue
                if frame is None:
                    return True
                if not next_ts <= frame.ts < sub.tail_from:
                    continue
                if not self._forward(sub, frame):
                    return False
                next_ts = frame.ts + 1
            return False
        finally:
            with self._registry_lock:
                self._backfills.pop(backfill.id, None)

    def _session_closed(self, session: Session) -> None:
        channels: List[CameraChannel] = []
        with self._registry_lock:
            for sub_id in list(session.subscriptions):
                channel, sub = self._find_subscription(sub_id)
                if sub is not None and channel is not None:
                    sub.state = SubscriptionState.CANCELLED
                    channel.subscriptions.pop(sub_id, None)
                    channels.append(channel)
            if session.camera_id is not None:
                channel = self._cameras.get(session.camera_id)
                if channel is not None and channel.session is session:
                    channel.session = None
                    channel.detach()
                    logger.warning("event=camera_offline camera=%s", channel.camera_id)
        for channel in channels:
            self._update_upstream(channel)


class _EdgeService(_ServiceBase):
    def __init__(self, broker: EdgeBroker, listen: str, auth_token: str, ssl_context):
        super().__init__(listen, auth_token, ssl_context)
        self.broker = broker

    def _dispatch(self, session: Session, message: Message) -> None:
        self.broker._dispatch(session, message)

    def _session_closed(self, session: Session) -> None:
        super()._session_closed(session)
        self.broker._session_closed(session)


# -- camera -----------------------------------------------------------------------


@dataclass
class CamStats:
    published: int = 0
    rejected_stale: int = 0
    transferred: int = 0
    dropped: int = 0
    bytes_sent: int = 0
    acks: int = 0
    infeasible_notices: int = 0


class CamBroker:
    """Camera-side broker: raw log, controller and on-demand upstream transfer."""

    def __init__(
        self,
        camera_id: str,
        edge_address: str,
        profile: ProfileTable,
        model: LinearLatencyModel,
        *,
        width: int = 1920,
        height: int = 1080,
        fps: float = 5.0,
        listen: str = "127.0.0.1:0",
        log_config: Optional[LogConfig] = None,
        controller: Optional[ControllerConfig] = None,
        auth_token: str = "",
        edge_token: str = "",
        link: Optional[ChannelModel] = None,
        retries: int = 3,
        backoff_s: float = 0.5,
        policy: Optional[TimeoutPolicy] = None,
        tracer: Optional[Tracer] = None,
        ssl_context: Optional[ssl.SSLContext] = None,
    ):
        if retries < 0:
            raise ValueError("retries must be >= 0.")
        self.camera_id = camera_id
        self.edge_address = edge_address
        self.width = width
        self.height = height
        self.fps = fps
        self.log_config = log_config or LogConfig(capacity_bytes=256 * 1024 * 1024)
        self.edge_token = edge_token
        self.retries = retries
        self.backoff_s = backoff_s
        self.policy = policy or TimeoutPolicy.for_stream(fps)
        self.tracer = tracer
        self.controller = LatencyController(
            controller or ControllerConfig.from_gains(model, profile),
            profile,
            model,
            camera_id=camera_id,
        )
        self._ctrl_lock = threading.Lock()
        self._link = Channel(link) if link is not None else None
        self._link_origin = time.monotonic()
        self._service = _CamService(self, listen, auth_token, ssl_context)
        self.log: Optional[MemLog] = None
        self.recovery: Optional[RecoveryReport] = None
        self.stats = CamStats()
        self._peer: Optional[RpcPeer] = None
        self._edge_thread: Optional[threading.Thread] = None
        self._edge_lost = threading.Event()
        self._stopping = threading.Event()
        self.registered = threading.Event()
        self.gave_up = threading.Event()
        self._transfer_lock = threading.Lock()
        self._transfer: Optional[Tuple[int, threading.Event, threading.Thread]] = None
        # request id -> (ts, epoch, ready micros) of frames awaiting the edge reply
        self._inflight: Dict[int, Tuple[int, int, int]] = {}
        self._inflight_lock = threading.Lock()

    @property
    def address(self) -> str:
        return self._service.address

    def start(self) -> "CamBroker":
        if self.log_config.persist_dir is not None:
            self.log, self.recovery = recover(self.log_config, self.camera_id)
        else:
            self.log = MemLog(self.log_config, self.camera_id)
        self._service._serve(f"cam-broker-{self.camera_id}")
        self._edge_thread = threading.Thread(
            target=self._edge_loop, name=f"edge-link-{self.camera_id}", daemon=True
        )
        self._edge_thread.start()
        logger.info("event=cam_started camera=%s address=%s", self.camera_id, self.address)
        return self

    def stop(self, *, unregister: bool = True) -> None:
        self._stopping.set()
        self._stop_transfer()
        peer = self._peer
        if peer is not None and peer.alive and unregister:
            try:
                peer.request(MessageType.UNREGISTER, encode_text(self.camera_id), timeout_s=1.0)
            except BrokerError as exc:
                logger.warning("event=unregister_failed camera=%s error=%s", self.camera_id, exc)
        if peer is not None:
            peer.close()
        self._edge_lost.set()
        if self._edge_thread is not None:
            self._edge_thread.join(timeout=5.0)
        self._service._shutdown_server()
        if self.log is not None:
            self.log.close()
        logger.info("event=cam_stopped camera=%s", self.camera_id)

    def __enter__(self) -> "CamBroker":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def wait_registered(self, timeout_s: float = 5.0) -> bool:
        deadline = time.monotonic() + timeout_s
        while time.monotonic() < deadline:
            if self.registered.is_set():
                return True
            if self.gave_up.is_set():
                return False
            time.sleep(0.01)
        return self.registered.is_set()

    # publisher side

    def _dispatch(self, session: Session, message: Message) -> None:
        if message.type is MessageType.CONNECT:
            self._service._connect(session, message, (Role.PUBLISHER,))
        elif message.type is MessageType.PUBLISH:
            session.require(Role.PUBLISHER)
            session.reply(
                Message(
                    MessageType.PUBLISH_ACK,
                    message.request_id,
                    encode_u8(int(self.publish_local(deserialize_frame(message.body)))),
                )
            )
        else:
            raise BadRequestError(f"Unexpected message {message.type.name}.")

    def publish_local(self, frame: Frame) -> PublishResult:
        if frame.camera_id != self.camera_id:
            raise BadRequestError(
                f"Frame for camera '{frame.camera_id}' sent to '{self.camera_id}'."
            )
        assert self.log is not None
        try:
            result = self.log.append(frame)
        except FrameTooLargeError as exc:
            raise BrokerError(str(exc), ErrorCode.FRAME_TOO_LARGE) from exc
        if self.tracer is not None:
            self.tracer(frame.camera_id, frame.ts, "cam_append")
        if result is AppendResult.REJECTED_STALE:
            self.stats.rejected_stale += 1
            return PublishResult.REJECTED_STALE
        self.stats.published += 1
        return PublishResult.ACCEPTED

    # edge link

    def _edge_loop(self) -> None:
        while not self._stopping.is_set():
            if not self._connect_edge():
                self.gave_up.set()
                logger.error(
                    "event=edge_gave_up camera=%s retries=%d", self.camera_id, self.retries
                )
                return
            self._edge_lost.wait()
            self.registered.clear()
            self._stop_transfer()

    def _connect_edge(self) -> bool:
        for attempt in range(self.retries + 1):
            if self._stopping.is_set():
                return True
            if attempt:
                logger.warning("event=reconnect attempt=%d camera=%s", attempt, self.camera_id)
                time.sleep(self.backoff_s)
            self._edge_lost.clear()
            try:
                peer, _ = connect_peer(
                    self.edge_address,
                    Role.CAMERA,
                    self.edge_token,
                    timeout_s=max(1.0, self.policy.control_timeout_ms / 1000.0),
                    on_message=self._on_edge_message,
                    on_close=self._edge_lost.set,
                )
                self._peer = peer
                peer.request(
                    MessageType.REGISTER,
                    RegisterRequest(
                        self.camera_id, self.width, self.height, self.fps, self.address
                    ).encode(),
                )
            except BrokerError as exc:
                logger.warning("event=register_failed camera=%s error=%s", self.camera_id, exc)
                if self._peer is not None:
                    self._peer.close()
                    self._peer = None
                continue
            self.registered.set()
            return True
        return False

    def _on_edge_message(self, message: Message) -> None:
        if message.type is MessageType.SET_TARGET:
            self._set_target(message.request_id, SetTargetRequest.decode(message.body))
        elif message.type is MessageType.ACK:
            ack = AckBody.decode(message.body)
            self._on_frame_ack(message.request_id, ack.metric)
        elif message.type is MessageType.ERROR:
            self._on_frame_error(message.request_id, ErrorBody.decode(message.body))
        elif message.type is MessageType.BACKFILL:
            threading.Thread(
                target=self._run_backfill,
                args=(message.request_id, BackfillRequest.decode(message.body)),
                name=f"backfill-{self.camera_id}",
                daemon=True,
            ).start()

    def _set_target(self, transfer_id: int, request: SetTargetRequest) -> None:
        if not request.active or request.bound is None:
            self._stop_transfer()
            return
        with self._ctrl_lock:
            self.controller.set_target(request.bound)
        with self._transfer_lock:
            if self._transfer is not None and self._transfer[0] == transfer_id:
                return
        self._stop_transfer()
        stop = threading.Event()
        worker = threading.Thread(
            target=self._run_transfer,
            args=(transfer_id, request.resume_from, stop),
            name=f"transfer-{self.camera_id}",
            daemon=True,
        )
        with self._transfer_lock:
            self._transfer = (transfer_id, stop, worker)
        worker.start()

    def _stop_transfer(self) -> None:
        with self._transfer_lock:
            current = self._transfer
            self._transfer = None
        if current is None:
            return
        _, stop, worker = current
        stop.set()
        if worker is not threading.current_thread():
            worker.join(timeout=2.0)
        with self._inflight_lock:
            self._inflight.clear()

    def transfer_active(self) -> bool:
        with self._transfer_lock:
            return self._transfer is not None

    def _run_transfer(self, transfer_id: int, resume_from: int, stop: threading.Event) -> None:
        assert self.log is not None
        log = self.log
        cursor = resume_from
        diff_state = FrameDiffState()
        logger.debug(
            "event=transfer_running camera=%s transfer=%x resume_from=%d",
            self.camera_id,
            transfer_id,
            resume_from,
        )
        while not stop.is_set():
            last = log.last_ts
            if last is not None and cursor <= last:
                for frame in log.get_range(cursor, min(last, MAX_TS)).frames:
                    if stop.is_set():
                        return
                    cursor = frame.ts + 1
                    out, epoch = self._process(frame, diff_state)
                    if out is None:
                        self.stats.dropped += 1
                        continue
                    payload = serialize_frame(out)
                    ready = now_micros()
                    if self.tracer is not None:
                        self.tracer(frame.camera_id, frame.ts, "controller")
                    if self._link is not None:
                        now_ms = (time.monotonic() - self._link_origin) * 1000.0
                        time.sleep(self._link.transmit(len(payload), now_ms) / 1000.0)
                    peer = self._peer
                    if peer is None:
                        return
                    request_id = peer.next_request_id()
                    with self._inflight_lock:
                        self._inflight[request_id] = (frame.ts, epoch, ready)
                    try:
                        peer.send(MessageType.FRAME_DELIVERY, payload, request_id)
                    except BrokerUnavailableError:
                        return
                    self.stats.transferred += 1
                    self.stats.bytes_sent += len(payload)
                cursor = max(cursor, last + 1)
            log.wait_for_append(last, timeout=WAKE_INTERVAL_S)
            if self._stopping.is_set():
                return

    def _process(
        self, frame: Frame, diff_state: FrameDiffState
    ) -> Tuple[Optional[Frame], int]:
        with self._ctrl_lock:
            try:
                out = self.controller.process_frame(frame, diff_state)
            except KnobError as exc:
                # e.g. a setting larger than this camera's native resolution
                logger.warning(
                    "event=knob_skipped camera=%s ts=%d error=%s", self.camera_id, frame.ts, exc
                )
                out = frame
            return out, self.controller.epoch

    def _run_backfill(self, backfill_id: int, request: BackfillRequest) -> None:
        """Replay a log range with the current setting; an empty delivery closes it.

        Replayed frames bypass the latency loop: they are history, not the live stream.
        """
        assert self.log is not None
        peer = self._peer
        if peer is None:
            return
        diff_state = FrameDiffState()
        sent = 0
        try:
            last = self.log.last_ts
            if last is not None and request.begin <= last:
                for frame in self.log.get_range(request.begin, min(request.end, last)).frames:
                    if self._stopping.is_set():
                        return
                    out, _ = self._process(frame, diff_state)
                    if out is None:
                        continue
                    peer.send(MessageType.FRAME_DELIVERY, serialize_frame(out), backfill_id)
                    sent += 1
            peer.send(MessageType.FRAME_DELIVERY, b"", backfill_id)
        except BrokerUnavailableError as exc:
            logger.warning("event=backfill_failed camera=%s error=%s", self.camera_id, exc)
            return
        logger.info(
            "event=backfill_sent camera=%s begin=%d end=%d frames=%d",
            self.camera_id,
            request.begin,
            request.end,
            sent,
        )

    def _on_frame_error(self, request_id: int, error: ErrorBody) -> None:
        with self._inflight_lock:
            sent = self._inflight.pop(request_id, None)
        if sent is None:
            return
        logger.warning(
            "event=frame_refused camera=%s ts=%d code=%d error=%s",
            self.camera_id,
            sent[0],
            error.code,
            error.message,
        )

    def inflight(self) -> int:
        with self._inflight_lock:
            return len(self._inflight)

    def _on_frame_ack(self, request_id: int, edge_received_micros: float) -> None:
        with self._inflight_lock:
            sent = self._inflight.pop(request_id, None)
        if sent is None:
            return
        _, epoch, ready = sent
        latency_ms = max(0.0, (edge_received_micros - ready) / 1000.0)
        self.stats.acks += 1
        with self._ctrl_lock:
            was_infeasible = self.controller.infeasible
            if self.controller.observe_latency(latency_ms, epoch) is None:
                return
            decision = self.controller.control_step()
        if decision.outcome is ControlOutcome.INFEASIBLE and not was_infeasible:
            self.stats.infeasible_notices += 1
            peer = self._peer
            if peer is not None:
                try:
                    peer.send(
                        MessageType.INFEASIBLE_NOTICE,
                        InfeasibleNotice(self.camera_id, decision.best_accuracy or 0.0).encode(),
                    )
                except BrokerUnavailableError:
                    pass


class _CamService(_ServiceBase):
    def __init__(self, broker: CamBroker, listen: str, auth_token: str, ssl_context):
        super().__init__(listen, auth_token, ssl_context)
        self.broker = broker

    def _dispatch(self, session: Session, message: Message) -> None:
        self.broker._dispatch(session, message)

