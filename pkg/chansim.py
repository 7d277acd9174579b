"""Seeded datagram channel: fixed delay, bounded jitter, i.i.d. loss, reordering.

Stands in for the Wi-Fi/IP leg in desk runs. All randomness comes from one
generator consumed in push order, so a (seed, push/poll sequence) pair fully
determines what comes out.
"""

import heapq
import itertools
from dataclasses import dataclass
from enum import Enum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from clockcore import Instant, ms
from config import get_logger

logger = get_logger("chansim")


class JitterModel(str, Enum):
    UNIFORM = "uniform"
    NORMAL = "normal"


class ChannelConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    one_way_delay_ms: float = Field(default=3.25, ge=0)
    jitter_ms: float = Field(default=0.5, ge=0)
    jitter_model: JitterModel = JitterModel.UNIFORM
    loss_prob: float = Field(default=0.0, ge=0, le=1)
    reorder_prob: float = Field(default=0.0, ge=0, lt=1)
    seed: int = Field(default=0, ge=0, lt=1 << 64)

    @model_validator(mode="after")
    def _delay_covers_jitter(self):
        if self.one_way_delay_ms - self.jitter_ms < 0:
            raise ValueError(f"one_way_delay_ms {self.one_way_delay_ms} smaller than jitter_ms {self.jitter_ms}")
        return self


@dataclass(frozen=True)
class ScheduledDatagram:
    payload: bytes
    delivery_time: Instant
    enqueued_at: Instant


@dataclass
class ChannelStats:
    pushed: int = 0
    delivered: int = 0
    dropped: int = 0


class Channel:
    def __init__(self, cfg: ChannelConfig, name: str = "channel"):
        self.cfg = cfg
        self.name = name
        self.stats = ChannelStats()
        self._rng = np.random.default_rng(cfg.seed)
        self._queue: list[tuple[Instant, int, ScheduledDatagram]] = []
        self._order = itertools.count()
        self._delay_us = ms(cfg.one_way_delay_ms)
        self._jitter_us = ms(cfg.jitter_ms)

    @property
    def pending(self) -> int:
        return len(self._queue)

    def _jitter_sample(self) -> float:
        jitter = self._jitter_us
        if jitter == 0:
            return 0.0
        if self.cfg.jitter_model == JitterModel.UNIFORM:
            return self._rng.uniform(-jitter, jitter)
        # normal with std = jitter, truncated below at -jitter so no datagram beats delay - jitter
        while True:
            sample = self._rng.normal(0.0, jitter)
            if sample >= -jitter:
                return sample

    def push(self, datagram: bytes, now: Instant) -> Instant | None:
        """Schedule ``datagram``; returns its delivery time, or None if the channel lost it."""
        self.stats.pushed += 1
        if self.cfg.loss_prob and self._rng.random() < self.cfg.loss_prob:
            self.stats.dropped += 1
            return None
        offset = self._delay_us + self._jitter_sample()
        if self.cfg.reorder_prob and self._rng.random() < self.cfg.reorder_prob:
            offset += self._rng.uniform(0, self._jitter_us)
        delivery = now + max(0, int(round(offset)))
        heapq.heappush(self._queue, (delivery, next(self._order), ScheduledDatagram(bytes(datagram), delivery, now)))
        return delivery

    def poll(self, now: Instant) -> list[ScheduledDatagram]:
        due = []
        while self._queue and self._queue[0][0] <= now:
            due.append(heapq.heappop(self._queue)[2])
        self.stats.delivered += len(due)
        return due
