"""CRTP-style application framing for control and feedback messages.

Header byte: port in the high nibble, two reserved bits (always zero),
channel in the low two bits. Payload follows, at most 30 bytes.
"""

import struct
from enum import Enum
from typing import Annotated

from pydantic import BaseModel, ConfigDict, Field

from errors import EmptyInput, Oversize, ReservedBitsSet

MAX_PAYLOAD = 30
MAX_ENCODED = MAX_PAYLOAD + 1
RESERVED_MASK = 0x0C

COMMANDER_PORT = 3
# Requests and their responses ride the link echo port.
ECHO_PORT = 15

SETPOINT_FORMAT = "<fffH"
SETPOINT_SIZE = struct.calcsize(SETPOINT_FORMAT)

REQUEST_PAYLOAD_SIZE = 14


class PacketKind(str, Enum):
    SETPOINT = "Setpoint"
    REQUEST = "Request"
    RESPONSE = "Response"


class CrtpPacket(BaseModel):
    model_config = ConfigDict(frozen=True)

    port: int = Field(ge=0, le=15)
    channel: int = Field(ge=0, le=3)
    payload: Annotated[bytes, Field(max_length=MAX_PAYLOAD)] = b""

    @property
    def encoded_size(self) -> int:
        return 1 + len(self.payload)

    @property
    def token(self) -> int | None:
        """Correlation token of a request/response, None for setpoints."""
        if self.port == COMMANDER_PORT or not self.payload:
            return None
        return self.payload[0]


def encode_crtp(packet: CrtpPacket) -> bytes:
    return bytes([(packet.port << 4) | packet.channel]) + packet.payload


def decode_crtp(data: bytes) -> CrtpPacket:
    if not data:
        raise EmptyInput("CRTP packet needs at least a header byte")
    if len(data) > MAX_ENCODED:
        raise Oversize(f"CRTP packet of {len(data)} bytes exceeds {MAX_ENCODED}")
    header = data[0]
    if header & RESERVED_MASK:
        raise ReservedBitsSet(f"reserved header bits set in 0x{header:02X}")
    return CrtpPacket(port=header >> 4, channel=header & 0x03, payload=bytes(data[1:]))


def make_setpoint(roll: float, pitch: float, yawrate: float, thrust: int) -> CrtpPacket:
    if not 0 <= thrust <= 0xFFFF:
        raise ValueError(f"thrust {thrust} outside 0..65535")
    payload = struct.pack(SETPOINT_FORMAT, roll, pitch, yawrate, thrust)
    return CrtpPacket(port=COMMANDER_PORT, channel=0, payload=payload)


def parse_setpoint(packet: CrtpPacket) -> tuple[float, float, float, int]:
    return struct.unpack(SETPOINT_FORMAT, packet.payload[:SETPOINT_SIZE])


def make_request(token: int, size: int = REQUEST_PAYLOAD_SIZE) -> CrtpPacket:
    """Echo request carrying ``token`` in byte 0, padded to ``size`` bytes."""
    size = max(1, min(size, MAX_PAYLOAD))
    body = bytes((token + i) & 0xFF for i in range(1, size))
    return CrtpPacket(port=ECHO_PORT, channel=0, payload=bytes([token & 0xFF]) + body)


def make_response(request: CrtpPacket) -> CrtpPacket:
    return CrtpPacket(port=request.port, channel=request.channel, payload=request.payload)


def next_token(token: int) -> int:
    return (token + 1) & 0xFF


def kind_of(packet: CrtpPacket, inbound: bool = False) -> PacketKind:
    """Kind as seen from the controller: echo traffic is a request going out and a response coming in."""
    if packet.port == COMMANDER_PORT:
        return PacketKind.SETPOINT
    return PacketKind.RESPONSE if inbound else PacketKind.REQUEST
