"""Forwarding bridge between the transport endpoint and the serial link.

Two independent flows, uplink (transport -> serial) and downlink
(serial -> transport). Each owns a bounded FIFO; when it is full the new
arrival is dropped. One item per flow is in processing at a time, and
processing takes ``per_packet_processing_ms`` on the injected clock, so the
same code runs as steps of the virtual event loop or on the live timer
thread. CRTP bytes are only length-checked, never rewritten.
"""

import queue
import threading
from dataclasses import dataclass
from typing import Callable, Optional

from pydantic import BaseModel, ConfigDict, Field

from clockcore import Clock, ms
from config import get_logger
from crtp import MAX_ENCODED
from errors import EndpointClosed, StartupError, WouldBlock
from seriallink import FRAME_CRTP, SerialFrame
from transport import NO_DEADLINE, ExpiryMode, TransportEndpoint

logger = get_logger("bridge")


class BridgeConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    downstream_default_deadline_ms: Optional[int] = Field(default=100, ge=1, lt=NO_DEADLINE)
    queue_capacity: int = Field(default=64, ge=1)
    per_packet_processing_ms: float = Field(default=0.0, ge=0)
    drain_timeout_ms: float = Field(default=100, gt=0)
    expiry_mode: ExpiryMode = ExpiryMode.DROP_EXPIRED


@dataclass
class BridgeStats:
    uplink_entered: int = 0
    uplink_forwarded: int = 0
    uplink_dropped: int = 0
    uplink_decode_errors: int = 0
    downlink_entered: int = 0
    downlink_forwarded: int = 0
    downlink_dropped: int = 0
    downlink_decode_errors: int = 0
    dropped_on_stop: int = 0

    @property
    def dropped_queue_full(self) -> int:
        return self.uplink_dropped + self.downlink_dropped

    @property
    def decode_errors(self) -> int:
        return self.uplink_decode_errors + self.downlink_decode_errors

    def as_dict(self) -> dict[str, int]:
        out = dict(self.__dict__)
        out["dropped_queue_full"] = self.dropped_queue_full
        out["decode_errors"] = self.decode_errors
        return out


class _Flow:
    """One direction: bounded queue feeding a single in-processing slot."""

    def __init__(
        self,
        name: str,
        cfg: BridgeConfig,
        clock: Clock,
        can_emit: Callable[[], bool],
        emit: Callable[[bytes], None],
    ):
        self.name = name
        self.clock = clock
        self.can_emit = can_emit
        self.emit = emit
        self.queue: queue.Queue[bytes] = queue.Queue(maxsize=cfg.queue_capacity)
        self.processing_us = ms(cfg.per_packet_processing_ms)
        self.busy = False
        self.stopped = False
        self._lock = threading.Lock()

    @property
    def in_queue(self) -> int:
        return self.queue.qsize() + (1 if self.busy else 0)

    def offer(self, item: bytes) -> bool:
        try:
            self.queue.put_nowait(item)
        except queue.Full:
            return False
        self.pump()
        return True

    def pump(self) -> None:
        with self._lock:
            if self.busy or self.stopped or not self.can_emit():
                return
            try:
                item = self.queue.get_nowait()
            except queue.Empty:
                return
            self.busy = True
        self.clock.call_later(self.processing_us, lambda: self._finish(item))

    def _finish(self, item: bytes) -> None:
        with self._lock:
            self.busy = False
            if self.stopped:
                return
        self.emit(item)
        self.pump()

    def halt(self) -> int:
        """Stop forwarding; returns how many items never made it out."""
        with self._lock:
            self.stopped = True
            left = self.queue.qsize() + (1 if self.busy else 0)
            while not self.queue.empty():
                self.queue.get_nowait()
        return left


def _valid_crtp(data: bytes) -> bool:
    return 1 <= len(data) <= MAX_ENCODED


class BridgeHandle:
    def __init__(self, endpoint: TransportEndpoint, serial_port, cfg: BridgeConfig, clock: Clock, sink=None):
        self.endpoint = endpoint
        self.serial_port = serial_port
        self.cfg = cfg
        self.clock = clock
        self.sink = sink
        self.stats = BridgeStats()
        self.stopping = False
        self.final: Optional[BridgeStats] = None
        self._stats_lock = threading.Lock()
        self.uplink = _Flow("uplink", cfg, clock, serial_port.ready, self._to_serial)
        self.downlink = _Flow("downlink", cfg, clock, lambda: endpoint.is_open, self._to_transport)

    def _trace(self, stage: str, data: bytes) -> None:
        if self.sink:
            self.sink.observe(stage, data, self.clock.now())

    def _count(self, counter: str) -> None:
        with self._stats_lock:
            setattr(self.stats, counter, getattr(self.stats, counter) + 1)

    # uplink: transport -> serial

    def on_readable(self) -> None:
        while True:
            try:
                delivery = self.endpoint.recv(self.cfg.expiry_mode)
            except (WouldBlock, EndpointClosed):
                return
            self._admit(self.uplink, "uplink", "bridge_in", delivery.payload)

    def _to_serial(self, data: bytes) -> None:
        self._trace("serial_tx", data)
        self.serial_port.write_frame(SerialFrame(frame_type=FRAME_CRTP, payload=data))
        self._count("uplink_forwarded")

    # downlink: serial -> transport

    def on_frame(self, frame: SerialFrame) -> None:
        if frame.frame_type != FRAME_CRTP:
            self._count("downlink_entered")
            self._count("downlink_decode_errors")
            return
        self._admit(self.downlink, "downlink", "serial_rx", frame.payload)

    def _to_transport(self, data: bytes) -> None:
        self._trace("bridge_out", data)
        try:
            self.endpoint.send(data, self.cfg.downstream_default_deadline_ms)
        except EndpointClosed:
            logger.warning("Bridge: transport closed, response dropped")
            self._count("downlink_dropped")
            return
        self._count("downlink_forwarded")

    def _admit(self, flow: _Flow, direction: str, stage: str, data: bytes) -> None:
        self._count(f"{direction}_entered")
        if not _valid_crtp(data):
            self._count(f"{direction}_decode_errors")
            logger.debug(f"Bridge {direction}: {len(data)} byte packet is not CRTP, dropped")
            return
        if self.stopping:
            self._count("dropped_on_stop")
            return
        self._trace(stage, data)
        if not flow.offer(data):
            self._count(f"{direction}_dropped")
            logger.debug(f"Bridge {direction}: queue full, dropped newest packet")

    @property
    def idle(self) -> bool:
        return self.uplink.in_queue == 0 and self.downlink.in_queue == 0


def run_bridge(endpoint: TransportEndpoint, serial_port, cfg: BridgeConfig, clock: Clock, sink=None) -> BridgeHandle:
    if not endpoint.is_open:
        raise StartupError(f"transport endpoint {endpoint.name} is closed")
    if not serial_port.is_open:
        raise StartupError(f"serial port {serial_port.name} is closed")
    handle = BridgeHandle(endpoint, serial_port, cfg, clock, sink)
    endpoint.on_readable = handle.on_readable
    serial_port.on_frame = handle.on_frame
    serial_port.on_ready = handle.uplink.pump
    logger.info(
        f"Bridge started: {endpoint.name} <-> {serial_port.name}, "
        f"queue {cfg.queue_capacity}, processing {cfg.per_packet_processing_ms} ms"
    )
    return handle


def stop_bridge(handle: BridgeHandle) -> BridgeStats:
    """Drain both flows for up to ``drain_timeout_ms``, then stop; idempotent."""
    if handle.final is not None:
        return handle.final
    handle.stopping = True
    drained = handle.clock.wait_for(lambda: handle.idle, ms(handle.cfg.drain_timeout_ms))
    left = handle.uplink.halt() + handle.downlink.halt()
    if not drained:
        logger.warning(f"Bridge: drain timed out, {left} packets dropped on stop")
    with handle._stats_lock:
        handle.stats.dropped_on_stop += left
    handle.endpoint.on_readable = None
    handle.serial_port.on_frame = None
    handle.serial_port.on_ready = None
    handle.final = handle.stats
    logger.info(f"Bridge stopped: {handle.stats.as_dict()}")
    return handle.final
