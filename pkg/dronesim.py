"""Simulated control chip at the far end of the serial link.

Setpoints update the command state and are never answered; echo requests
are answered after a fixed processing delay; a watchdog neutralises thrust
when setpoints stop arriving.
"""

from dataclasses import dataclass, field
from typing import Optional

from clockcore import Clock, Instant, Ticket, ms
from config import get_logger
from crtp import COMMANDER_PORT, SETPOINT_SIZE, decode_crtp, encode_crtp, make_response, parse_setpoint
from errors import CodecError
from seriallink import FRAME_CRTP, SerialFrame

logger = get_logger("dronesim")


@dataclass
class DroneState:
    last_setpoint: tuple[float, float, float, int] = (0.0, 0.0, 0.0, 0)
    last_setpoint_time: Optional[Instant] = None
    failsafe_engaged: bool = False
    processing_delay_us: int = 100
    watchdog_timeout_ms: float = 500
    setpoints: int = 0
    requests: int = 0
    responses: int = 0
    decode_errors: int = 0
    failsafe_engagements: list[Instant] = field(default_factory=list)

    @property
    def thrust(self) -> int:
        return 0 if self.failsafe_engaged else self.last_setpoint[3]


def handle_frame(state: DroneState, frame: SerialFrame, now: Instant) -> list[tuple[Instant, SerialFrame]]:
    if frame.frame_type != FRAME_CRTP:
        state.decode_errors += 1
        return []
    try:
        packet = decode_crtp(frame.payload)
    except CodecError:
        state.decode_errors += 1
        return []

    if packet.port == COMMANDER_PORT:
        if len(packet.payload) < SETPOINT_SIZE:
            state.decode_errors += 1
            return []
        state.last_setpoint = parse_setpoint(packet)
        state.last_setpoint_time = now
        state.failsafe_engaged = False
        state.setpoints += 1
        return []

    if packet.token is None:
        state.decode_errors += 1
        return []
    state.requests += 1
    state.responses += 1
    response = SerialFrame(frame_type=FRAME_CRTP, payload=encode_crtp(make_response(packet)))
    return [(now + state.processing_delay_us, response)]


def watchdog_tick(state: DroneState, now: Instant) -> DroneState:
    """Engage failsafe once ``now - last_setpoint_time >= watchdog_timeout``; the boundary instant counts."""
    if (
        not state.failsafe_engaged
        and state.last_setpoint_time is not None
        and now - state.last_setpoint_time >= ms(state.watchdog_timeout_ms)
    ):
        state.failsafe_engaged = True
        state.failsafe_engagements.append(now)
        logger.warning(f"Watchdog: no setpoint since {state.last_setpoint_time} us, failsafe engaged at {now} us")
    return state


class DroneSim:
    """Binds a DroneState to a serial port and the clock."""

    def __init__(self, state: DroneState, clock: Clock, port, sink=None):
        self.state = state
        self.clock = clock
        self.port = port
        self.sink = sink
        self._watchdog: Optional[Ticket] = None
        port.on_frame = self._on_frame

    def _on_frame(self, frame: SerialFrame) -> None:
        now = self.clock.now()
        if self.sink:
            self.sink.observe("drone_rx", frame.payload, now)
        before = self.state.setpoints
        for at, out in handle_frame(self.state, frame, now):
            self.clock.schedule(at, lambda out=out: self._emit(out))
        if self.state.setpoints != before:
            self._arm_watchdog()

    def _emit(self, frame: SerialFrame) -> None:
        if self.sink:
            self.sink.observe("drone_tx", frame.payload, self.clock.now())
        self.port.write_frame(frame)

    def _arm_watchdog(self) -> None:
        if self._watchdog:
            self._watchdog.cancel()
        at = self.state.last_setpoint_time + ms(self.state.watchdog_timeout_ms)
        self._watchdog = self.clock.schedule(at, lambda: watchdog_tick(self.state, self.clock.now()))

    def stop(self) -> None:
        if self._watchdog:
            self._watchdog.cancel()
            self._watchdog = None
