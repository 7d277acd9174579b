"""Time sources injected into every component.

Desk runs use ``VirtualClock``: a deterministic event queue in integer
microseconds where ties fire in schedule order. Live runs use ``LiveClock``,
which keeps the same ``schedule()`` contract on a monotonic timer thread.
"""

import heapq
import itertools
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol

from config import get_logger
from errors import EmptyQueue, PastInstant

logger = get_logger("clockcore")

# Microseconds since run start.
Instant = int

WIRE_TS_MASK = 0xFFFFFFFF

Event = Callable[[], object]


@dataclass(eq=False)
class Ticket:
    at: Instant
    event: Event
    cancelled: bool = field(default=False)

    def cancel(self) -> None:
        self.cancelled = True


class Clock(Protocol):
    def now(self) -> Instant: ...

    def wire_timestamp(self) -> int: ...

    def schedule(self, at: Instant, event: Event) -> Ticket: ...

    def call_later(self, delay_us: int, event: Event) -> Ticket: ...

    def wait_for(self, predicate: Callable[[], bool], timeout_us: int) -> bool: ...


def ms(value: float) -> int:
    """Milliseconds to integer microseconds, rounded to the nearest microsecond."""
    return int(round(value * 1000))


class VirtualClock:
    def __init__(self, start: Instant = 0):
        self._now = start
        self._queue: list[tuple[Instant, int, Ticket]] = []
        self._order = itertools.count()

    def now(self) -> Instant:
        return self._now

    def wire_timestamp(self) -> int:
        return self._now & WIRE_TS_MASK

    @property
    def pending(self) -> int:
        return sum(1 for _, _, ticket in self._queue if not ticket.cancelled)

    def schedule(self, at: Instant, event: Event) -> Ticket:
        if at < self._now:
            raise PastInstant(f"cannot schedule at {at} us, clock is at {self._now} us")
        ticket = Ticket(at, event)
        heapq.heappush(self._queue, (at, next(self._order), ticket))
        return ticket

    def call_later(self, delay_us: int, event: Event) -> Ticket:
        return self.schedule(self._now + max(0, delay_us), event)

    def _discard_cancelled(self) -> None:
        while self._queue and self._queue[0][2].cancelled:
            heapq.heappop(self._queue)

    def peek(self) -> Instant | None:
        self._discard_cancelled()
        return self._queue[0][0] if self._queue else None

    def advance(self) -> tuple[Instant, list[Ticket]]:
        """Jump to the earliest scheduled instant and pop everything due then.

        Events scheduled at that same instant while the batch runs belong to
        the next advance.
        """
        self._discard_cancelled()
        if not self._queue:
            raise EmptyQueue(f"no events pending at {self._now} us")
        at = self._queue[0][0]
        self._now = at
        fired = []
        while self._queue and self._queue[0][0] == at:
            _, _, ticket = heapq.heappop(self._queue)
            if not ticket.cancelled:
                fired.append(ticket)
        return at, fired

    def step(self) -> Instant:
        now, fired = self.advance()
        for ticket in fired:
            # an earlier event of the batch may have cancelled this one
            if not ticket.cancelled:
                ticket.event()
        return now

    def run(self, until: Instant | None = None, stop: Callable[[], bool] | None = None) -> Instant:
        """Fire events in order until the queue drains, ``until`` is reached or ``stop()`` holds."""
        while True:
            if stop is not None and stop():
                break
            next_at = self.peek()
            if next_at is None:
                if until is not None and until > self._now:
                    self._now = until
                break
            if until is not None and next_at > until:
                self._now = max(self._now, until)
                break
            self.step()
        return self._now

    def wait_for(self, predicate: Callable[[], bool], timeout_us: int) -> bool:
        self.run(until=self._now + timeout_us, stop=predicate)
        return predicate()


class LiveClock:
    """Monotonic wall time with a timer thread honouring the schedule() contract."""

    def __init__(self):
        self._origin = time.monotonic_ns()
        self._queue: list[tuple[Instant, int, Ticket]] = []
        self._order = itertools.count()
        self._cond = threading.Condition()
        self._running = False
        self._thread: threading.Thread | None = None

    def now(self) -> Instant:
        return (time.monotonic_ns() - self._origin) // 1000

    def wire_timestamp(self) -> int:
        # epoch based so that NTP-synchronised peers can compare send timestamps
        return (time.time_ns() // 1000) & WIRE_TS_MASK

    def start(self) -> None:
        with self._cond:
            if self._running:
                return
            self._running = True
        self._thread = threading.Thread(target=self._loop, name="live-clock", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        with self._cond:
            self._running = False
            self._cond.notify_all()
        if self._thread:
            self._thread.join(timeout=1.0)

    def schedule(self, at: Instant, event: Event) -> Ticket:
        # late timers fire immediately; real time cannot be held still
        ticket = Ticket(at, event)
        with self._cond:
            heapq.heappush(self._queue, (at, next(self._order), ticket))
            self._cond.notify()
        return ticket

    def call_later(self, delay_us: int, event: Event) -> Ticket:
        return self.schedule(self.now() + max(0, delay_us), event)

    def wait_for(self, predicate: Callable[[], bool], timeout_us: int) -> bool:
        deadline = self.now() + timeout_us
        while not predicate():
            if self.now() >= deadline:
                return False
            time.sleep(0.001)
        return True

    def _loop(self) -> None:
        while True:
            with self._cond:
                while self._running and not self._queue:
                    self._cond.wait()
                if not self._running:
                    return
                at, _, ticket = self._queue[0]
                delay = at - self.now()
                if delay > 0:
                    self._cond.wait(delay / 1e6)
                    continue
                heapq.heappop(self._queue)
            if ticket.cancelled:
                continue
            try:
                ticket.event()
            except Exception as e:
                logger.error(f"Timer event failed: {e}")
