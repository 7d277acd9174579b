"""Syslink-style serial framing and the UART leg between bridge and drone.

Wire layout: ``BC CF type len payload... c0 c1`` where (c0, c1) is the
Fletcher-8 checksum over ``type len payload``. The decoder resynchronises by
dropping one byte whenever a candidate frame fails its checksum.
"""

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from clockcore import Clock, Instant, ms
from config import get_logger
from errors import Oversize, StartupError

logger = get_logger("seriallink")

SYNC = b"\xBC\xCF"
FRAME_CRTP = 0x00
MAX_FRAME_PAYLOAD = 32
FRAME_OVERHEAD = 6


class SerialFrame(BaseModel):
    model_config = ConfigDict(frozen=True)

    frame_type: int = Field(default=FRAME_CRTP, ge=0, le=255)
    payload: bytes = b""


class WireConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    baud: int = Field(default=1_000_000, gt=0)
    per_byte_overhead_bits: int = Field(default=10, gt=0)
    extra_driver_latency_ms: float = Field(default=0.0, ge=0)
    driver_latency_tail_ms: float = Field(default=0.0, ge=0)
    device: str = "/dev/ttyAMA0"


class DecodeResult(NamedTuple):
    frames: list[SerialFrame]
    remainder: bytes
    errors_skipped: int


def fletcher8(data: bytes) -> tuple[int, int]:
    c0 = c1 = 0
    for b in data:
        c0 = (c0 + b) % 255
        c1 = (c1 + c0) % 255
    return c0, c1


def frame_encode(frame: SerialFrame) -> bytes:
    if len(frame.payload) > MAX_FRAME_PAYLOAD:
        raise Oversize(f"{len(frame.payload)} byte frame payload exceeds {MAX_FRAME_PAYLOAD}")
    body = bytes([frame.frame_type, len(frame.payload)]) + frame.payload
    return SYNC + body + bytes(fletcher8(body))


_OK, _PARTIAL, _BAD = range(3)


def _frame_at(buf: bytes, i: int) -> tuple[int, Optional[SerialFrame], int]:
    """Try to read one frame whose sync pair starts at ``i``."""
    if len(buf) - i < 4:
        return _PARTIAL, None, i
    length = buf[i + 3]
    if length > MAX_FRAME_PAYLOAD:
        return _BAD, None, i
    end = i + 4 + length + 2
    if end > len(buf):
        return _PARTIAL, None, i
    body = buf[i + 2 : i + 4 + length]
    if fletcher8(body) != (buf[end - 2], buf[end - 1]):
        return _BAD, None, i
    return _OK, SerialFrame(frame_type=buf[i + 2], payload=bytes(buf[i + 4 : i + 4 + length])), end


def _next_complete(buf: bytes, start: int) -> Optional[int]:
    j = buf.find(SYNC, start)
    while j >= 0:
        if _frame_at(buf, j)[0] == _OK:
            return j
        j = buf.find(SYNC, j + 1)
    return None


def frame_decode(buffer: bytes) -> DecodeResult:
    buf = bytes(buffer)
    n = len(buf)
    frames: list[SerialFrame] = []
    skipped = 0
    i = 0
    while i < n:
        j = buf.find(SYNC, i)
        if j < 0:
            # a trailing 0xBC may be the first half of the next sync pair
            keep = 1 if buf[-1] == SYNC[0] else 0
            skipped += n - keep - i
            i = n - keep
            break
        skipped += j - i
        i = j
        status, frame, end = _frame_at(buf, i)
        if status == _OK:
            frames.append(frame)
            i = end
        elif status == _BAD:
            skipped += 1
            i += 1
        else:
            # an incomplete candidate is noise if a complete frame follows it
            later = _next_complete(buf, i + 1)
            if later is None:
                break
            skipped += later - i
            i = later
    return DecodeResult(frames, buf[i:], skipped)


def serialization_time(cfg: WireConfig, frame_bytes: int) -> int:
    return math.ceil(frame_bytes * cfg.per_byte_overhead_bits * 1_000_000 / cfg.baud)


def transfer_time(cfg: WireConfig, frame_bytes: int) -> int:
    """Microseconds from first byte written to frame handed over on the far side."""
    return serialization_time(cfg, frame_bytes) + ms(cfg.extra_driver_latency_ms)


@dataclass
class FrameReader:
    """Stateful decoder for a byte stream arriving in arbitrary chunks."""

    remainder: bytes = b""
    errors_skipped: int = 0
    frames_decoded: int = 0

    def feed(self, data: bytes) -> list[SerialFrame]:
        result = frame_decode(self.remainder + data)
        self.remainder = result.remainder
        self.errors_skipped += result.errors_skipped
        self.frames_decoded += len(result.frames)
        return result.frames


class SerialWire:
    """One direction of the simulated UART: serialisation plus driver latency, in order."""

    def __init__(self, cfg: WireConfig, clock: Clock, seed: int = 0):
        self.cfg = cfg
        self.clock = clock
        self.deliver: Optional[Callable[[bytes], None]] = None
        self._rng = np.random.default_rng(seed)
        self._busy_until = 0
        self._last_delivery = 0
        self.bytes_written = 0

    def _driver_latency(self) -> int:
        latency = ms(self.cfg.extra_driver_latency_ms)
        if self.cfg.driver_latency_tail_ms:
            latency += ms(self._rng.exponential(self.cfg.driver_latency_tail_ms))
        return latency

    def write(self, data: bytes) -> Instant:
        now = self.clock.now()
        start = max(now, self._busy_until)
        self._busy_until = start + serialization_time(self.cfg, len(data))
        delivery = max(self._busy_until + self._driver_latency(), self._last_delivery)
        self._last_delivery = delivery
        self.bytes_written += len(data)
        self.clock.schedule(delivery, lambda: self.deliver and self.deliver(data))
        return delivery


@dataclass
class SimSerialPort:
    """One end of a simulated full-duplex serial link."""

    tx: SerialWire
    name: str = "serial"
    on_frame: Optional[Callable[[SerialFrame], None]] = None
    on_ready: Optional[Callable[[], None]] = None
    reader: FrameReader = field(default_factory=FrameReader)
    stalled: bool = False
    is_open: bool = True

    def ready(self) -> bool:
        return self.is_open and not self.stalled

    def write_frame(self, frame: SerialFrame) -> None:
        self.tx.write(frame_encode(frame))

    def receive_bytes(self, data: bytes) -> None:
        for frame in self.reader.feed(data):
            if self.on_frame:
                self.on_frame(frame)

    def stall(self) -> None:
        self.stalled = True

    def resume(self) -> None:
        self.stalled = False
        if self.on_ready:
            self.on_ready()

    def close(self) -> None:
        self.is_open = False


def sim_serial_pair(cfg: WireConfig, clock: Clock, seed: int = 0) -> tuple[SimSerialPort, SimSerialPort]:
    """(host end, device end) joined by two independent wires."""
    down = SerialWire(cfg, clock, seed)
    up = SerialWire(cfg, clock, seed + 1)
    host = SimSerialPort(tx=down, name="host")
    device = SimSerialPort(tx=up, name="device")
    down.deliver = device.receive_bytes
    up.deliver = host.receive_bytes
    return host, device


class PySerialPort:
    """Live serial device via pyserial with a reader thread, same port contract as SimSerialPort."""

    def __init__(self, device: str, baud: int):
        import serial

        try:
            self.ser = serial.Serial(device, baud, timeout=0.1)
        except serial.SerialException as e:
            raise StartupError(f"cannot open serial device {device}: {e}") from e
        self.name = device
        self.on_frame: Optional[Callable[[SerialFrame], None]] = None
        self.on_ready: Optional[Callable[[], None]] = None
        self.reader = FrameReader()
        self.is_open = True
        self._write_lock = threading.Lock()
        self._thread = threading.Thread(target=self._read_loop, name="serial-rx", daemon=True)
        self._thread.start()
        logger.info(f"Serial port {device} open at {baud} baud")

    def ready(self) -> bool:
        return self.is_open

    def write_frame(self, frame: SerialFrame) -> None:
        with self._write_lock:
            self.ser.write(frame_encode(frame))

    def _read_loop(self) -> None:
        while self.is_open:
            try:
                data = self.ser.read(64)
            except Exception as e:
                logger.error(f"Serial read on {self.name} failed: {e}")
                break
            if data:
                for frame in self.reader.feed(data):
                    if self.on_frame:
                        self.on_frame(frame)

    def close(self) -> None:
        self.is_open = False
        self._thread.join(timeout=1.0)
        self.ser.close()
