"""Ground-station workload: periodic setpoints plus non-pipelined echo requests.

Setpoints go out every ``setpoint_period_ms`` no matter what the request
side is doing. Requests go strictly one at a time: the next one only after
the current one is answered, resent with the same token on every timeout
until ``max_resends`` is used up. Every packet that leaves or arrives is
logged with the injected clock's timestamp.
"""

import threading
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Protocol

from pydantic import BaseModel, ConfigDict, Field

from clockcore import Clock, Instant, Ticket, ms
from config import get_logger
from crtp import PacketKind, decode_crtp, encode_crtp, make_request, make_setpoint, next_token
from errors import CodecError, EndpointClosed, ResendBudgetExhausted, WouldBlock
from transport import NO_DEADLINE, ExpiryMode, TransportEndpoint

logger = get_logger("controller")

# long enough for any bounded workload, virtual or live
RUN_BOUND_US = 10**12


class Direction(str, Enum):
    OUT = "out"
    IN = "in"


@dataclass(frozen=True)
class PacketLogRecord:
    run_id: int
    token: Optional[int]
    kind: PacketKind
    direction: Direction
    timestamp: Instant


class WorkloadConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    setpoint_period_ms: float = Field(default=200, gt=0)
    request_count: int = Field(default=500, gt=0)
    request_timeout_ms: float = Field(default=50, gt=0)
    max_resends: int = Field(default=10, ge=0)
    inter_phase_gap_ms: Optional[float] = Field(default=None, gt=0)
    setup_requests: int = Field(default=0, ge=0)
    request_gap_ms: float = Field(default=0, ge=0)
    request_payload_size: int = Field(default=14, ge=1, le=30)
    setpoint_deadline_ms: Optional[int] = Field(default=50, ge=1, lt=NO_DEADLINE)
    request_deadline_ms: Optional[int] = Field(default=None, ge=1, lt=NO_DEADLINE)
    halt_after_ms: Optional[float] = Field(default=None, gt=0)
    roll: float = 0.0
    pitch: float = 0.0
    yawrate: float = 0.0
    thrust: int = Field(default=10000, ge=0, le=0xFFFF)


class Link(Protocol):
    on_receive: Optional[Callable[[bytes], None]]

    def send(self, payload: bytes, deadline_ms: Optional[int]) -> Instant: ...


class TransportLink:
    """Controller-side adapter: drains the endpoint as soon as it turns readable."""

    def __init__(self, endpoint: TransportEndpoint, sink=None, mode: ExpiryMode = ExpiryMode.DROP_EXPIRED):
        self.endpoint = endpoint
        self.sink = sink
        self.mode = mode
        self.on_receive: Optional[Callable[[bytes], None]] = None
        endpoint.on_readable = self._drain

    def send(self, payload: bytes, deadline_ms: Optional[int]) -> Instant:
        receipt = self.endpoint.send(payload, deadline_ms)
        if self.sink:
            self.sink.observe("transport_tx", payload, receipt.departure_ts)
        return receipt.departure_ts

    def _drain(self) -> None:
        while True:
            try:
                delivery = self.endpoint.recv(self.mode)
            except (WouldBlock, EndpointClosed):
                return
            if self.sink:
                self.sink.observe("transport_rx", delivery.payload, self.endpoint.clock.now())
            if self.on_receive:
                self.on_receive(delivery.payload)


class Controller:
    def __init__(self, link: Link, cfg: WorkloadConfig, clock: Clock, sink=None, run_id: int = 0):
        self.link = link
        self.cfg = cfg
        self.clock = clock
        self.sink = sink
        self.run_id = run_id
        self.log: list[PacketLogRecord] = []
        self.done = False
        self.halted = False
        self.error: Optional[ResendBudgetExhausted] = None
        self.exchanges_done = 0
        self._lock = threading.RLock()
        self._token = 0
        self._current: Optional[int] = None
        self._attempts = 0
        self._timeout: Optional[Ticket] = None
        self._setpoint_ticket: Optional[Ticket] = None
        self._phase_start: Instant = 0
        self._setpoints_sent = 0
        self._setpoint_payload = encode_crtp(make_setpoint(cfg.roll, cfg.pitch, cfg.yawrate, cfg.thrust))
        link.on_receive = self._on_receive

    def start(self) -> None:
        now = self.clock.now()
        if self.cfg.halt_after_ms is not None:
            self.clock.schedule(now + ms(self.cfg.halt_after_ms), self.halt)
        if self.cfg.setup_requests:
            self._issue_request()
        else:
            self._start_flight()

    def _start_flight(self) -> None:
        self._phase_start = self.clock.now()
        self._send_setpoint()
        if self._current is None:
            self._issue_request()

    def _record(self, token: Optional[int], kind: PacketKind, direction: Direction, at: Instant) -> None:
        self.log.append(PacketLogRecord(self.run_id, token, kind, direction, at))

    def _send_setpoint(self) -> None:
        with self._lock:
            if self.done:
                return
            now = self.clock.now()
            self._record(None, PacketKind.SETPOINT, Direction.OUT, now)
            self.link.send(self._setpoint_payload, self.cfg.setpoint_deadline_ms)
            self._setpoints_sent += 1
            # cadence is anchored to the phase start so it never drifts
            at = self._phase_start + self._setpoints_sent * ms(self.cfg.setpoint_period_ms)
            self._setpoint_ticket = self.clock.schedule(at, self._send_setpoint)

    def _issue_request(self) -> None:
        with self._lock:
            if self.done:
                return
            if self.exchanges_done >= self.cfg.request_count:
                self._finish()
                return
            self._current = self._token
            self._token = next_token(self._token)
            self._attempts = 0
            if self.sink:
                self.sink.begin(self._current, self.clock.now())
            self._transmit_request()

    def _transmit_request(self) -> None:
        now = self.clock.now()
        self._attempts += 1
        self._record(self._current, PacketKind.REQUEST, Direction.OUT, now)
        self.link.send(encode_crtp(make_request(self._current, self.cfg.request_payload_size)), self.cfg.request_deadline_ms)
        self._timeout = self.clock.schedule(now + ms(self.cfg.request_timeout_ms), self._on_timeout)

    def _on_timeout(self) -> None:
        with self._lock:
            if self.done or self._current is None:
                return
            if self._attempts > self.cfg.max_resends:
                self.error = ResendBudgetExhausted(self._current, self._attempts, self.log)
                logger.warning(f"Run {self.run_id}: {self.error.detail}, aborting workload")
                self._finish()
                return
            logger.debug(f"Run {self.run_id}: token {self._current} timed out, resending")
            self._transmit_request()

    def _on_receive(self, payload: bytes) -> None:
        with self._lock:
            now = self.clock.now()
            try:
                packet = decode_crtp(payload)
            except CodecError as e:
                logger.debug(f"Run {self.run_id}: undecodable response dropped: {e}")
                return
            token = packet.token
            if token is None:
                return
            self._record(token, PacketKind.RESPONSE, Direction.IN, now)
            if self.done or token != self._current:
                return
            if self.sink:
                self.sink.mark(token, "controller_recv", now)
            if self._timeout:
                self._timeout.cancel()
            self._current = None
            self.exchanges_done += 1
            if self.exchanges_done == self.cfg.setup_requests and self._setpoints_sent == 0:
                gap = ms(self.cfg.inter_phase_gap_ms or 0)
                self.clock.schedule(now + gap, self._start_flight)
                return
            self.clock.schedule(now + ms(self.cfg.request_gap_ms), self._issue_request)

    def halt(self) -> None:
        with self._lock:
            if not self.done:
                logger.info(f"Run {self.run_id}: controller halted at {self.clock.now()} us")
                self.halted = True
                self._finish()

    def _finish(self) -> None:
        self.done = True
        for ticket in (self._timeout, self._setpoint_ticket):
            if ticket:
                ticket.cancel()


def run_workload(link: Link, cfg: WorkloadConfig, clock: Clock, sink=None, run_id: int = 0) -> list[PacketLogRecord]:
    """Drive one workload to completion; ResendBudgetExhausted carries the partial log."""
    controller = Controller(link, cfg, clock, sink, run_id)
    controller.start()
    clock.wait_for(lambda: controller.done, RUN_BOUND_US)
    if controller.error:
        raise controller.error
    return controller.log
