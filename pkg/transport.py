"""Latency-aware, partially reliable, in-order datagram transport.

Three mechanisms make delivery latency predictable:

* pacing: every datagram leaves no earlier than ``wire_bits / bottleneck``
  after the previous one, so no queue builds up below us;
* adaptive hybrid ARQ: per send, ``select_redundancy`` picks reactive
  retransmission when the deadline leaves room for one more round trip and
  proactive copies otherwise, plus an XOR parity segment per coding group;
* deadline-aware delivery: the receiver releases data strictly in order but
  gives up on a hole once it can no longer be filled in time, and ``recv``
  treats expired payloads according to an ``ExpiryMode``.

The endpoint is sans-IO: bytes go out through an injected ``transmit``
callable, come in through ``on_datagram``, and every timer goes through the
injected clock. One sender and one receiver may use it concurrently.
"""

import math
import socket
import struct
import threading
from collections import deque
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Callable, Mapping, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from clockcore import WIRE_TS_MASK, Clock, Ticket, ms
from config import get_logger
from errors import (
    BadKind,
    BadVersion,
    CodecError,
    EmptyGroup,
    EndpointClosed,
    LengthMismatch,
    PayloadTooLarge,
    TooManyMissing,
    Truncated,
    WouldBlock,
)

logger = get_logger("transport")

SEGMENT_VERSION = 1
HEADER_FORMAT = ">BHHBBBIHH"
HEADER_SIZE = struct.calcsize(HEADER_FORMAT)
MAX_PAYLOAD = 1400
NO_DEADLINE = 0xFFFF
SEQ_MOD = 1 << 16
SEQ_HALF = 1 << 15

# Parity covers (length, send_ts, deadline) of every data segment ahead of its payload.
PARITY_PREFIX_FORMAT = ">HIH"
PARITY_PREFIX_SIZE = struct.calcsize(PARITY_PREFIX_FORMAT)
MAX_PARITY_PAYLOAD = MAX_PAYLOAD + PARITY_PREFIX_SIZE

FEEDBACK_FORMAT = ">HIIf"
FEEDBACK_WINDOW = 32


class SegmentKind(IntEnum):
    DATA = 0
    PARITY = 1
    FEEDBACK = 2


class ExpiryMode(str, Enum):
    DROP_EXPIRED = "DropExpired"
    DELIVER_ALL = "DeliverAll"
    MARK_EXPIRED = "MarkExpired"


def seq_add(seq: int, delta: int) -> int:
    return (seq + delta) % SEQ_MOD


def seq_distance(a: int, b: int) -> int:
    """Forward distance from a to b modulo 2^16."""
    return (b - a) % SEQ_MOD


def seq_lt(a: int, b: int) -> bool:
    """Serial-number comparison with a 2^15 window."""
    return 0 < seq_distance(a, b) < SEQ_HALF


class TransportConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    bottleneck_rate_bps: float = Field(default=10_000_000, gt=0)
    target_residual_loss: float = Field(default=1e-3, gt=0, lt=1)
    retransmission_timeout_ms: float = Field(default=50, gt=0)
    default_deadline_ms: Optional[int] = Field(default=None, ge=1, lt=NO_DEADLINE)
    coding_group_k: int = Field(default=4, ge=1, le=254)
    max_proactive_copies: int = Field(default=4, ge=1)
    loss_ewma_alpha: float = Field(default=0.1, gt=0, le=1)
    max_retransmissions: int = Field(default=10, ge=0)
    initial_rtt_ms: float = Field(default=10, gt=0)
    rtt_ewma_alpha: float = Field(default=0.125, gt=0, le=1)
    feedback_every_segments: int = Field(default=16, ge=1)
    feedback_interval_ms: float = Field(default=25, gt=0)


class TransportSegment(BaseModel):
    model_config = ConfigDict(frozen=True)

    version: int = Field(default=SEGMENT_VERSION, ge=0, le=15)
    kind: SegmentKind
    seq: int = Field(default=0, ge=0, lt=SEQ_MOD)
    group_id: int = Field(default=0, ge=0, lt=SEQ_MOD)
    group_index: int = Field(default=0, ge=0, le=254)
    k: int = Field(default=1, ge=1, le=255)
    n: int = Field(default=1, ge=1, le=255)
    send_ts_us: int = Field(default=0, ge=0, le=WIRE_TS_MASK)
    deadline_ms: Optional[int] = Field(default=None, ge=0, lt=NO_DEADLINE)
    payload: bytes = b""

    @model_validator(mode="after")
    def _check_group(self):
        if self.n < self.k or self.n - self.k > 1:
            raise ValueError(f"n={self.n} k={self.k}: only a single parity segment per group is supported")
        if self.group_index >= self.n:
            raise ValueError(f"group_index {self.group_index} outside group of {self.n}")
        if self.kind == SegmentKind.DATA and self.group_index >= self.k:
            raise ValueError(f"data segment with parity index {self.group_index}")
        if self.kind == SegmentKind.PARITY and self.group_index < self.k:
            raise ValueError(f"parity segment with data index {self.group_index}")
        return self


class FeedbackReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    cumulative_seq: int = Field(ge=0, lt=SEQ_MOD)
    ack_bitmap: int = Field(ge=0, le=0xFFFFFFFF)
    recv_rate_bps: int = Field(default=0, ge=0, le=0xFFFFFFFF)
    loss_estimate: float = Field(default=0.0, ge=0, le=1)

    def acknowledged(self) -> list[int]:
        """Sequence numbers this report acknowledges, newest first."""
        acked = [self.cumulative_seq]
        for i in range(FEEDBACK_WINDOW):
            if self.ack_bitmap >> i & 1:
                acked.append(seq_add(self.cumulative_seq, -1 - i))
        return acked

    @property
    def holes(self) -> int:
        return FEEDBACK_WINDOW - self.ack_bitmap.bit_count()


class RedundancyPlan(BaseModel):
    model_config = ConfigDict(frozen=True)

    proactive_copies: int = Field(ge=1)
    use_group_parity: bool
    allow_reactive_retx: bool
    predicted_residual_loss: float = Field(default=0.0, ge=0, le=1)


@dataclass(frozen=True)
class SendReceipt:
    seq: int
    departure_ts: int


@dataclass(frozen=True)
class Delivery:
    payload: bytes
    seq: int
    send_ts_us: int
    expired: bool = False
    recovered_via_parity: bool = False
    deadline_ms: Optional[int] = None


@dataclass
class TransportStats:
    segments_sent: int = 0
    proactive_copies: int = 0
    retransmissions: int = 0
    retransmissions_abandoned: int = 0
    parity_sent: int = 0
    feedback_sent: int = 0
    feedback_received: int = 0
    stale_reports: int = 0
    datagrams_received: int = 0
    decode_errors: int = 0
    duplicates: int = 0
    recovered_via_parity: int = 0
    delivered: int = 0
    expired: int = 0
    lost_residual: int = 0
    wire_bits_released: int = 0

    def as_dict(self) -> dict[str, int]:
        return dict(self.__dict__)


# --- wire codec -------------------------------------------------------------

def encode_segment(seg: TransportSegment) -> bytes:
    limit = MAX_PARITY_PAYLOAD if seg.kind == SegmentKind.PARITY else MAX_PAYLOAD
    if len(seg.payload) > limit:
        raise PayloadTooLarge(f"{len(seg.payload)} byte payload exceeds {limit}")
    deadline = NO_DEADLINE if seg.deadline_ms is None else seg.deadline_ms
    header = struct.pack(
        HEADER_FORMAT,
        (seg.version << 4) | int(seg.kind),
        seg.seq,
        seg.group_id,
        seg.group_index,
        seg.k,
        seg.n,
        seg.send_ts_us,
        deadline,
        len(seg.payload),
    )
    return header + seg.payload


def decode_segment(data: bytes) -> TransportSegment:
    if len(data) < HEADER_SIZE:
        raise Truncated(f"{len(data)} bytes is shorter than the {HEADER_SIZE} byte header")
    vk, seq, group_id, group_index, k, n, send_ts, deadline, length = struct.unpack(
        HEADER_FORMAT, data[:HEADER_SIZE]
    )
    version, kind = vk >> 4, vk & 0x0F
    if version != SEGMENT_VERSION:
        raise BadVersion(f"segment version {version}")
    if kind not in SegmentKind._value2member_map_:
        raise BadKind(f"segment kind {kind}")
    payload = bytes(data[HEADER_SIZE:])
    if len(payload) != length:
        raise LengthMismatch(f"header declares {length} payload bytes, {len(payload)} present")
    try:
        return TransportSegment(
            version=version,
            kind=SegmentKind(kind),
            seq=seq,
            group_id=group_id,
            group_index=group_index,
            k=k,
            n=n,
            send_ts_us=send_ts,
            deadline_ms=None if deadline == NO_DEADLINE else deadline,
            payload=payload,
        )
    except ValidationError as e:
        raise CodecError(f"invalid segment header: {e.errors()[0]['msg']}") from e


def encode_feedback(report: FeedbackReport) -> bytes:
    return struct.pack(
        FEEDBACK_FORMAT, report.cumulative_seq, report.ack_bitmap, report.recv_rate_bps, report.loss_estimate
    )


def decode_feedback(data: bytes) -> FeedbackReport:
    if len(data) != struct.calcsize(FEEDBACK_FORMAT):
        raise LengthMismatch(f"feedback payload of {len(data)} bytes")
    cumulative, bitmap, rate, loss = struct.unpack(FEEDBACK_FORMAT, data)
    return FeedbackReport(
        cumulative_seq=cumulative, ack_bitmap=bitmap, recv_rate_bps=rate, loss_estimate=min(1.0, max(0.0, loss))
    )


# --- erasure code -----------------------------------------------------------

def build_parity(group_payloads: list[bytes]) -> bytes:
    """Byte-wise XOR of the payloads, each zero-padded to the longest."""
    if not group_payloads:
        raise EmptyGroup("parity needs at least one payload")
    width = max(len(p) for p in group_payloads)
    acc = np.zeros(width, dtype=np.uint8)
    for payload in group_payloads:
        acc[: len(payload)] ^= np.frombuffer(payload, dtype=np.uint8)
    return acc.tobytes()


def recover_from_parity(
    present: Mapping[int, bytes],
    parity: bytes,
    k: int,
    missing_index: Optional[int] = None,
    length: Optional[int] = None,
) -> bytes:
    """Rebuild the one data payload of a group that never arrived.

    ``present`` maps group index to payload for the k-1 segments that did
    arrive. The XOR result has the parity's width; ``length`` trims it back
    to the original payload size.
    """
    missing = [i for i in range(k) if i not in present]
    if len(missing) >= 2:
        raise TooManyMissing(f"{len(missing)} of {k} data segments missing, single parity recovers one")
    if not missing:
        raise ValueError("nothing to recover: every data segment is present")
    if missing_index is not None and missing_index != missing[0]:
        raise ValueError(f"index {missing_index} is present, missing index is {missing[0]}")
    recovered = build_parity([parity, *present.values()])[: len(parity)]
    return recovered if length is None else recovered[:length]


def protect(seg: TransportSegment) -> bytes:
    deadline = NO_DEADLINE if seg.deadline_ms is None else seg.deadline_ms
    return struct.pack(PARITY_PREFIX_FORMAT, len(seg.payload), seg.send_ts_us, deadline) + seg.payload


def unprotect(blob: bytes) -> tuple[bytes, int, Optional[int]]:
    length, send_ts, deadline = struct.unpack(PARITY_PREFIX_FORMAT, blob[:PARITY_PREFIX_SIZE])
    payload = blob[PARITY_PREFIX_SIZE : PARITY_PREFIX_SIZE + length]
    return payload, send_ts, None if deadline == NO_DEADLINE else deadline


# --- adaptation -------------------------------------------------------------

def predicted_residual_loss(loss: float, copies: int) -> float:
    """Probability that all ``copies`` independent transmissions are lost."""
    return loss ** copies


def _meets(residual: float, target: float) -> bool:
    return residual <= target or math.isclose(residual, target, rel_tol=1e-9)


def select_redundancy(
    loss_estimate: float,
    cfg: TransportConfig,
    rtt_estimate_ms: float,
    deadline_ms: Optional[int],
) -> RedundancyPlan:
    if not 0 <= loss_estimate < 1:
        raise ValueError(f"loss estimate {loss_estimate} outside [0, 1)")
    reactive = deadline_ms is None or rtt_estimate_ms + cfg.retransmission_timeout_ms <= deadline_ms
    if reactive:
        return RedundancyPlan(
            proactive_copies=1,
            use_group_parity=loss_estimate > 0,
            allow_reactive_retx=True,
            predicted_residual_loss=predicted_residual_loss(loss_estimate, 1 + cfg.max_retransmissions),
        )
    copies = 1
    while copies < cfg.max_proactive_copies and not _meets(
        predicted_residual_loss(loss_estimate, copies), cfg.target_residual_loss
    ):
        copies += 1
    return RedundancyPlan(
        proactive_copies=copies,
        use_group_parity=False,
        allow_reactive_retx=False,
        predicted_residual_loss=predicted_residual_loss(loss_estimate, copies),
    )


def pacing_gap(cfg: TransportConfig, wire_size_bits: int) -> int:
    """Microseconds a release of ``wire_size_bits`` occupies the bottleneck."""
    return math.ceil(wire_size_bits * 1_000_000 / cfg.bottleneck_rate_bps)


# --- endpoint ---------------------------------------------------------------

_DEFAULT = object()


@dataclass
class _Outstanding:
    encoded: bytes
    first_sent: int
    last_sent: int
    deadline_ms: Optional[int]
    retransmissions: int = 0
    ticket: Optional[Ticket] = None


@dataclass
class _Arrival:
    seq: int
    payload: bytes
    send_ts_us: int
    deadline_ms: Optional[int]
    recovered: bool = False


@dataclass
class _Group:
    base_seq: int
    k: int
    blobs: dict[int, bytes] = field(default_factory=dict)
    parity: Optional[bytes] = None
    done: bool = False


class TransportEndpoint:
    def __init__(self, cfg: TransportConfig, clock: Clock, transmit: Callable[[bytes], None], name: str = "endpoint"):
        self.cfg = cfg
        self.clock = clock
        self.name = name
        self._transmit = transmit
        self._lock = threading.RLock()
        self.is_open = True
        self.on_readable: Optional[Callable[[], None]] = None
        self.stats = TransportStats()
        self._rto_us = ms(cfg.retransmission_timeout_ms)

        # sender side
        self._next_seq = 0
        self._next_free = 0
        self._group_id = 0
        self._group_index = 0
        self._group_base = 0
        self._group_parity = False
        self._group_blobs: list[bytes] = []
        self._unacked: dict[int, _Outstanding] = {}
        self._last_report_seq: Optional[int] = None
        self.loss_estimate = 0.0
        self.rtt_estimate_ms = cfg.initial_rtt_ms

        # receiver side
        self._next_expected = 0
        self._buffer: dict[int, _Arrival] = {}
        self._ready: deque[_Arrival] = deque()
        self._groups: dict[int, _Group] = {}
        self._highest: Optional[int] = None
        self._highest_abs = -1
        self._recent: set[int] = set()
        self._since_feedback = 0
        self._bytes_since_feedback = 0
        self._feedback_window_start = clock.now()
        self._feedback_ticket: Optional[Ticket] = None
        self._gap_ticket: Optional[Ticket] = None

    # -- send path -----------------------------------------------------------

    def send(self, payload: bytes, deadline_ms=_DEFAULT) -> SendReceipt:
        with self._lock:
            if not self.is_open:
                raise EndpointClosed(f"{self.name} is closed")
            if len(payload) > MAX_PAYLOAD:
                raise PayloadTooLarge(f"{len(payload)} byte payload exceeds {MAX_PAYLOAD}")
            deadline = self.cfg.default_deadline_ms if deadline_ms is _DEFAULT else deadline_ms
            plan = select_redundancy(self.loss_estimate, self.cfg, self.rtt_estimate_ms, deadline)

            k = self.cfg.coding_group_k
            if self._group_index == 0:
                self._group_base = self._next_seq
                self._group_parity = plan.use_group_parity
                self._group_blobs = []
            seq = self._next_seq
            self._next_seq = seq_add(seq, 1)
            seg = TransportSegment(
                kind=SegmentKind.DATA,
                seq=seq,
                group_id=self._group_id,
                group_index=self._group_index,
                k=k,
                n=k + (1 if self._group_parity else 0),
                send_ts_us=self.clock.wire_timestamp(),
                deadline_ms=deadline,
                payload=bytes(payload),
            )
            encoded = encode_segment(seg)
            departure = self._release(encoded)
            for _ in range(plan.proactive_copies - 1):
                self._release(encoded)
                self.stats.proactive_copies += 1
            self.stats.segments_sent += 1

            if plan.allow_reactive_retx:
                out = _Outstanding(encoded, departure, departure, deadline)
                out.ticket = self.clock.schedule(departure + self._rto_us, lambda: self._retransmit_due(seq))
                self._unacked[seq] = out

            self._group_blobs.append(protect(seg))
            self._group_index += 1
            if self._group_index == k:
                if self._group_parity:
                    self._emit_parity(k)
                self._group_id = seq_add(self._group_id, 1)
                self._group_index = 0
            return SendReceipt(seq=seq, departure_ts=departure)

    def _release(self, encoded: bytes) -> int:
        """Pace one datagram onto the wire; returns its departure instant."""
        now = self.clock.now()
        at = max(now, self._next_free)
        bits = len(encoded) * 8
        self._next_free = at + pacing_gap(self.cfg, bits)
        self.stats.wire_bits_released += bits
        if at == now:
            self._transmit(encoded)
        else:
            self.clock.schedule(at, lambda: self._emit(encoded))
        return at

    def _emit(self, encoded: bytes) -> None:
        if self.is_open:
            self._transmit(encoded)

    def _emit_parity(self, k: int) -> None:
        parity = TransportSegment(
            kind=SegmentKind.PARITY,
            seq=self._group_base,
            group_id=self._group_id,
            group_index=k,
            k=k,
            n=k + 1,
            send_ts_us=self.clock.wire_timestamp(),
            payload=build_parity(self._group_blobs),
        )
        self._release(encode_segment(parity))
        self.stats.parity_sent += 1

    def _retransmit_due(self, seq: int) -> None:
        with self._lock:
            out = self._unacked.get(seq)
            if out is None or not self.is_open:
                return
            now = self.clock.now()
            if not self._retransmit_if_overdue(seq, out, now):
                return
            out.ticket = self.clock.schedule(max(now, out.last_sent) + self._rto_us, lambda: self._retransmit_due(seq))

    def _retransmit_if_overdue(self, seq: int, out: _Outstanding, now: int) -> bool:
        """Reactive ARQ step; False once the segment is given up."""
        if out.deadline_ms is not None and now - out.first_sent > ms(out.deadline_ms):
            del self._unacked[seq]
            return False
        if now - out.last_sent < self._rto_us:
            return True
        if out.retransmissions >= self.cfg.max_retransmissions:
            del self._unacked[seq]
            self.stats.retransmissions_abandoned += 1
            logger.debug(f"{self.name}: seq {seq} abandoned after {out.retransmissions} retransmissions")
            return False
        out.last_sent = self._release(out.encoded)
        out.retransmissions += 1
        self.stats.retransmissions += 1
        return True

    def on_feedback(self, report: FeedbackReport) -> None:
        with self._lock:
            if not self.is_open:
                raise EndpointClosed(f"{self.name} is closed")
            self._apply_feedback(report)

    def _apply_feedback(self, report: FeedbackReport) -> None:
        if self._last_report_seq is not None and seq_lt(report.cumulative_seq, self._last_report_seq):
            self.stats.stale_reports += 1
            return
        self._last_report_seq = report.cumulative_seq
        alpha = self.cfg.loss_ewma_alpha
        self.loss_estimate = (1 - alpha) * self.loss_estimate + alpha * report.holes / FEEDBACK_WINDOW

        now = self.clock.now()
        for seq in report.acknowledged():
            out = self._unacked.pop(seq, None)
            if out is None:
                continue
            if out.ticket:
                out.ticket.cancel()
            if out.retransmissions == 0:
                beta = self.cfg.rtt_ewma_alpha
                self.rtt_estimate_ms = (1 - beta) * self.rtt_estimate_ms + beta * (now - out.first_sent) / 1000

        for seq, out in list(self._unacked.items()):
            before = out.last_sent
            if self._retransmit_if_overdue(seq, out, now) and out.last_sent != before:
                if out.ticket:
                    out.ticket.cancel()
                out.ticket = self.clock.schedule(out.last_sent + self._rto_us, lambda s=seq: self._retransmit_due(s))

    # -- receive path --------------------------------------------------------

    def on_datagram(self, data: bytes) -> None:
        try:
            seg = decode_segment(data)
        except CodecError as e:
            self.stats.decode_errors += 1
            logger.debug(f"{self.name}: dropped undecodable datagram: {e}")
            return
        notify = False
        with self._lock:
            if not self.is_open:
                return
            self.stats.datagrams_received += 1
            if seg.kind == SegmentKind.FEEDBACK:
                self.stats.feedback_received += 1
                try:
                    self._apply_feedback(decode_feedback(seg.payload))
                except CodecError as e:
                    self.stats.decode_errors += 1
                    logger.debug(f"{self.name}: bad feedback payload: {e}")
                return
            if seg.kind == SegmentKind.PARITY:
                self._on_parity(seg)
            else:
                self._bytes_since_feedback += len(data)
                self._on_data(seg)
            notify = self._release_in_order()
        if notify and self.on_readable:
            self.on_readable()

    def _on_data(self, seg: TransportSegment) -> None:
        self._note_received(seg.seq)
        if seq_lt(seg.seq, self._next_expected) or seg.seq in self._buffer:
            self.stats.duplicates += 1
            return
        self._buffer[seg.seq] = _Arrival(seg.seq, seg.payload, seg.send_ts_us, seg.deadline_ms)
        group = self._groups.setdefault(seg.group_id, _Group(seq_add(seg.seq, -seg.group_index), seg.k))
        group.blobs[seg.group_index] = protect(seg)
        self._try_recover(group)

    def _on_parity(self, seg: TransportSegment) -> None:
        group = self._groups.setdefault(seg.group_id, _Group(seg.seq, seg.k))
        group.parity = seg.payload
        self._try_recover(group)

    def _try_recover(self, group: _Group) -> None:
        if group.done or group.parity is None:
            return
        missing = [i for i in range(group.k) if i not in group.blobs]
        if len(missing) != 1:
            group.done = not missing
            return
        index = missing[0]
        seq = seq_add(group.base_seq, index)
        group.done = True
        if seq_lt(seq, self._next_expected) or seq in self._buffer:
            return
        blob = recover_from_parity(group.blobs, group.parity, group.k)
        payload, send_ts, deadline = unprotect(blob)
        self._buffer[seq] = _Arrival(seq, payload, send_ts, deadline, recovered=True)
        group.blobs[index] = blob
        self.stats.recovered_via_parity += 1
        self._note_received(seq)

    def _note_received(self, seq: int) -> None:
        if self._highest is None:
            self._highest, self._highest_abs = seq, seq
        elif seq_lt(self._highest, seq):
            self._highest_abs += seq_distance(self._highest, seq)
            self._highest = seq
        self._recent.add(seq)
        if len(self._recent) > 4 * FEEDBACK_WINDOW:
            self._recent = {s for s in self._recent if seq_distance(s, self._highest) <= 2 * FEEDBACK_WINDOW}
        self._since_feedback += 1
        if self._since_feedback >= self.cfg.feedback_every_segments:
            self._send_feedback()
        elif self._feedback_ticket is None:
            self._feedback_ticket = self.clock.call_later(ms(self.cfg.feedback_interval_ms), self._feedback_due)

    def _age_us(self, send_ts_us: int) -> int:
        return (self.clock.wire_timestamp() - send_ts_us) & WIRE_TS_MASK

    def _next_buffered(self) -> _Arrival:
        return min(self._buffer.values(), key=lambda a: seq_distance(self._next_expected, a.seq))

    def _hole_abandonable(self, later: _Arrival) -> bool:
        age = self._age_us(later.send_ts_us)
        # nothing the sender may still retransmit can arrive after this horizon
        if age > self._rto_us * (self.cfg.max_retransmissions + 1):
            return True
        if later.deadline_ms is None:
            return False
        if age > ms(later.deadline_ms):
            return True
        group = self._group_of(self._next_expected)
        if group is not None and group.parity is not None:
            missing = sum(1 for i in range(group.k) if i not in group.blobs)
            return missing >= 2 and age + self._rto_us > ms(later.deadline_ms)
        return False

    def _group_of(self, seq: int) -> Optional[_Group]:
        for group in self._groups.values():
            if seq_distance(group.base_seq, seq) < group.k:
                return group
        return None

    def _release_in_order(self) -> bool:
        released = False
        while True:
            arrival = self._buffer.pop(self._next_expected, None)
            if arrival is not None:
                self._ready.append(arrival)
                self._next_expected = seq_add(self._next_expected, 1)
                released = True
                continue
            if not self._buffer:
                break
            if self._hole_abandonable(self._next_buffered()):
                logger.debug(f"{self.name}: gave up on seq {self._next_expected}")
                self.stats.lost_residual += 1
                self._next_expected = seq_add(self._next_expected, 1)
                continue
            break
        self._prune_groups()
        self._arm_gap_timer()
        return released

    def _arm_gap_timer(self) -> None:
        if self._gap_ticket:
            self._gap_ticket.cancel()
            self._gap_ticket = None
        if not self._buffer:
            return
        later = self._next_buffered()
        age = self._age_us(later.send_ts_us)
        horizon = self._rto_us * (self.cfg.max_retransmissions + 1)
        if later.deadline_ms is not None:
            horizon = min(horizon, ms(later.deadline_ms))
        self._gap_ticket = self.clock.call_later(max(0, horizon - age) + 1, self._gap_due)

    def _gap_due(self) -> None:
        with self._lock:
            self._gap_ticket = None
            if not self.is_open:
                return
            notify = self._release_in_order()
        if notify and self.on_readable:
            self.on_readable()

    def _prune_groups(self) -> None:
        if len(self._groups) <= 64:
            return
        for gid, group in list(self._groups.items()):
            end = seq_add(group.base_seq, group.k)
            if seq_lt(end, self._next_expected) and seq_distance(end, self._next_expected) > 8 * group.k:
                del self._groups[gid]

    def _feedback_due(self) -> None:
        with self._lock:
            self._feedback_ticket = None
            if self.is_open and self._since_feedback:
                self._send_feedback()

    def _send_feedback(self) -> None:
        if self._feedback_ticket:
            self._feedback_ticket.cancel()
            self._feedback_ticket = None
        bitmap = 0
        for i in range(FEEDBACK_WINDOW):
            # sequence numbers before the stream started count as received
            if self._highest_abs - 1 - i < 0 or seq_add(self._highest, -1 - i) in self._recent:
                bitmap |= 1 << i
        now = self.clock.now()
        elapsed = max(1, now - self._feedback_window_start)
        report = FeedbackReport(
            cumulative_seq=self._highest,
            ack_bitmap=bitmap,
            recv_rate_bps=min(0xFFFFFFFF, self._bytes_since_feedback * 8 * 1_000_000 // elapsed),
            loss_estimate=(FEEDBACK_WINDOW - bitmap.bit_count()) / FEEDBACK_WINDOW,
        )
        seg = TransportSegment(
            kind=SegmentKind.FEEDBACK,
            send_ts_us=self.clock.wire_timestamp(),
            payload=encode_feedback(report),
        )
        self._release(encode_segment(seg))
        self.stats.feedback_sent += 1
        self._since_feedback = 0
        self._bytes_since_feedback = 0
        self._feedback_window_start = now

    def _take(self, mode: ExpiryMode) -> Optional[Delivery]:
        with self._lock:
            if not self.is_open:
                raise EndpointClosed(f"{self.name} is closed")
            while self._ready:
                arrival = self._ready.popleft()
                expired = arrival.deadline_ms is not None and self._age_us(arrival.send_ts_us) > ms(
                    arrival.deadline_ms
                )
                if mode == ExpiryMode.DELIVER_ALL:
                    expired = False
                if expired:
                    self.stats.expired += 1
                    if mode == ExpiryMode.DROP_EXPIRED:
                        continue
                else:
                    self.stats.delivered += 1
                return Delivery(
                    payload=arrival.payload,
                    seq=arrival.seq,
                    send_ts_us=arrival.send_ts_us,
                    expired=expired,
                    recovered_via_parity=arrival.recovered,
                    deadline_ms=arrival.deadline_ms,
                )
        return None

    def recv(
        self,
        mode: ExpiryMode = ExpiryMode.DROP_EXPIRED,
        block: bool = False,
        timeout_ms: float = 1000.0,
    ) -> Delivery:
        """Next in-order delivery; raises WouldBlock when nothing is deliverable.

        A blocking recv waits on the endpoint's clock for up to ``timeout_ms``;
        on a VirtualClock that fires the pending events in between.
        """
        give_up = self.clock.now() + ms(timeout_ms)
        while True:
            delivery = self._take(mode)
            if delivery is not None:
                return delivery
            if not block:
                raise WouldBlock(f"{self.name}: no deliverable data")
            remaining = give_up - self.clock.now()
            if remaining <= 0 or not self.clock.wait_for(lambda: bool(self._ready) or not self.is_open, remaining):
                raise WouldBlock(f"{self.name}: recv timed out")

    @property
    def pending(self) -> int:
        """Data segments received but not yet surfaced by recv."""
        with self._lock:
            return len(self._buffer) + len(self._ready)

    @property
    def unacked(self) -> int:
        with self._lock:
            return len(self._unacked)

    def close(self) -> None:
        with self._lock:
            if not self.is_open:
                return
            self.is_open = False
            for out in self._unacked.values():
                if out.ticket:
                    out.ticket.cancel()
            for ticket in (self._feedback_ticket, self._gap_ticket):
                if ticket:
                    ticket.cancel()
        logger.debug(f"{self.name}: closed, stats={self.stats.as_dict()}")


class DatagramLink:
    """Live-mode carrier: one segment per UDP datagram, reader thread feeding an endpoint."""

    def __init__(self, local: tuple[str, int], remote: tuple[str, int]):
        self.remote = remote
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.sock.bind(local)
        self.sock.settimeout(0.2)
        self.running = False
        self._thread: Optional[threading.Thread] = None

    def transmit(self, data: bytes) -> None:
        try:
            self.sock.sendto(data, self.remote)
        except OSError as e:
            logger.warning(f"Datagram to {self.remote} not sent: {e}")

    def attach(self, endpoint: TransportEndpoint) -> None:
        self.running = True
        self._thread = threading.Thread(target=self._receive_loop, args=(endpoint,), name="datagram-rx", daemon=True)
        self._thread.start()

    def _receive_loop(self, endpoint: TransportEndpoint) -> None:
        while self.running:
            try:
                data, _ = self.sock.recvfrom(HEADER_SIZE + MAX_PARITY_PAYLOAD)
            except TimeoutError:
                continue
            except OSError:
                break
            endpoint.on_datagram(data)

    def close(self) -> None:
        self.running = False
        if self._thread:
            self._thread.join(timeout=1.0)
        self.sock.close()
