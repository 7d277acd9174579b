import itertools
import random
import unittest

import numpy as np

from chansim import Channel, ChannelConfig
from clockcore import VirtualClock, ms
from errors import (
    BadKind,
    BadVersion,
    EmptyGroup,
    EndpointClosed,
    LengthMismatch,
    PayloadTooLarge,
    TooManyMissing,
    Truncated,
    WouldBlock,
)
from transport import (
    HEADER_SIZE,
    PARITY_PREFIX_SIZE,
    ExpiryMode,
    FeedbackReport,
    SegmentKind,
    TransportConfig,
    TransportEndpoint,
    TransportSegment,
    build_parity,
    decode_feedback,
    decode_segment,
    encode_feedback,
    encode_segment,
    pacing_gap,
    predicted_residual_loss,
    protect,
    recover_from_parity,
    select_redundancy,
    seq_add,
    seq_lt,
    unprotect,
)


class Wire:
    """Captures every datagram an endpoint puts on the wire."""

    def __init__(self):
        self.frames = []

    def __call__(self, data: bytes) -> None:
        self.frames.append(data)

    def segments(self, kind=None):
        out = [decode_segment(f) for f in self.frames]
        return [s for s in out if kind is None or s.kind == kind]


def drain(endpoint, mode=ExpiryMode.DROP_EXPIRED):
    out = []
    while True:
        try:
            out.append(endpoint.recv(mode))
        except WouldBlock:
            return out


class TestSegmentCodec(unittest.TestCase):
    def test_header_layout(self):
        seg = TransportSegment(kind=SegmentKind.DATA, seq=1, k=4, n=5)
        expected = bytes([0x10, 0x00, 0x01, 0x00, 0x00, 0x00, 0x04, 0x05, 0, 0, 0, 0, 0xFF, 0xFF, 0x00, 0x00])
        self.assertEqual(HEADER_SIZE, 16)
        self.assertEqual(encode_segment(seg), expected)
        self.assertEqual(decode_segment(expected), seg)

    def test_payload_limit(self):
        with self.assertRaises(PayloadTooLarge):
            encode_segment(TransportSegment(kind=SegmentKind.DATA, payload=bytes(1401)))

    def test_decode_errors(self):
        good = encode_segment(TransportSegment(kind=SegmentKind.DATA, seq=3, payload=b"abc"))
        with self.assertRaises(Truncated):
            decode_segment(good[:10])
        with self.assertRaises(BadVersion):
            decode_segment(bytes([0x20]) + good[1:])
        with self.assertRaises(BadKind):
            decode_segment(bytes([0x13]) + good[1:])
        with self.assertRaises(LengthMismatch):
            decode_segment(good + b"x")

    def test_group_invariants(self):
        with self.assertRaises(ValueError):
            TransportSegment(kind=SegmentKind.DATA, k=4, n=6)
        with self.assertRaises(ValueError):
            TransportSegment(kind=SegmentKind.DATA, group_index=4, k=4, n=5)
        with self.assertRaises(ValueError):
            TransportSegment(kind=SegmentKind.PARITY, group_index=1, k=4, n=5)

    def test_random_segments_survive_the_codec(self):
        rng = random.Random(3)
        for _ in range(10_000):
            k = rng.randint(1, 8)
            parity = rng.random() < 0.2
            seg = TransportSegment(
                kind=SegmentKind.PARITY if parity else SegmentKind.DATA,
                seq=rng.randrange(1 << 16),
                group_id=rng.randrange(1 << 16),
                group_index=k if parity else rng.randrange(k),
                k=k,
                n=k + 1 if parity else k + rng.randint(0, 1),
                send_ts_us=rng.randrange(1 << 32),
                deadline_ms=rng.choice([None, rng.randrange(0xFFFF)]),
                payload=rng.randbytes(rng.randrange(64)),
            )
            self.assertEqual(decode_segment(encode_segment(seg)), seg)

    def test_feedback_codec(self):
        report = FeedbackReport(cumulative_seq=40, ack_bitmap=0xFFFF00FF, recv_rate_bps=12345, loss_estimate=0.25)
        self.assertEqual(decode_feedback(encode_feedback(report)), report)
        self.assertEqual(report.holes, 8)
        self.assertEqual(report.acknowledged()[:2], [40, 39])

    def test_sequence_arithmetic_wraps(self):
        self.assertEqual(seq_add(0xFFFF, 1), 0)
        self.assertTrue(seq_lt(0xFFFF, 0))
        self.assertFalse(seq_lt(0, 0x8000))


class TestParity(unittest.TestCase):
    def test_xor_examples(self):
        self.assertEqual(build_parity([b"\x0f", b"\xf0"]), b"\xff")
        self.assertEqual(build_parity([b"\xab"]), b"\xab")
        self.assertEqual(build_parity([b"\x01\x02", b"\x01"]), b"\x00\x02")
        with self.assertRaises(EmptyGroup):
            build_parity([])

    def test_recover_example(self):
        self.assertEqual(recover_from_parity({0: b"\x0f"}, b"\xff", k=2, missing_index=1), b"\xf0")

    def test_two_missing(self):
        with self.assertRaises(TooManyMissing):
            recover_from_parity({0: b"a"}, b"b", k=3)

    def test_every_single_drop_recovers_exactly(self):
        rng = random.Random(17)
        failures = 0
        for k in (2, 3, 4, 8):
            for _ in range(50):
                segments = [
                    TransportSegment(
                        kind=SegmentKind.DATA,
                        seq=i,
                        group_index=i,
                        k=k,
                        n=k + 1,
                        send_ts_us=rng.randrange(1 << 32),
                        deadline_ms=rng.choice([None, 50, 100]),
                        payload=rng.randbytes(rng.randint(0, 40)),
                    )
                    for i in range(k)
                ]
                blobs = [protect(s) for s in segments]
                parity = build_parity(blobs)
                for drop in range(k):
                    present = {i: b for i, b in enumerate(blobs) if i != drop}
                    payload, ts, deadline = unprotect(recover_from_parity(present, parity, k, drop))
                    original = segments[drop]
                    if (payload, ts, deadline) != (original.payload, original.send_ts_us, original.deadline_ms):
                        failures += 1
        self.assertEqual(failures, 0)


class TestRedundancy(unittest.TestCase):
    def setUp(self):
        self.cfg = TransportConfig(target_residual_loss=1e-3, max_proactive_copies=4)

    def test_lossless_plan(self):
        plan = select_redundancy(0.0, self.cfg, 10, None)
        self.assertEqual(plan.proactive_copies, 1)
        self.assertFalse(plan.use_group_parity)
        self.assertTrue(plan.allow_reactive_retx)

    def test_tight_deadline_sizes_copies(self):
        plan = select_redundancy(0.1, self.cfg, 10, 20)
        self.assertFalse(plan.allow_reactive_retx)
        self.assertEqual(plan.proactive_copies, 3)

    def test_copies_capped(self):
        cfg = TransportConfig(target_residual_loss=1e-6, max_proactive_copies=4)
        plan = select_redundancy(0.5, cfg, 10, 20)
        self.assertEqual(plan.proactive_copies, 4)
        self.assertAlmostEqual(plan.predicted_residual_loss, 0.0625)

    def test_reactive_when_deadline_leaves_room(self):
        plan = select_redundancy(0.1, self.cfg, 10, 60)
        self.assertTrue(plan.allow_reactive_retx)
        self.assertTrue(plan.use_group_parity)
        self.assertEqual(plan.proactive_copies, 1)

    def test_loss_estimate_range(self):
        with self.assertRaises(ValueError):
            select_redundancy(1.0, self.cfg, 10, None)

    def test_residual_matches_enumeration(self):
        for p in (0.05, 0.1, 0.2, 0.5):
            for copies in range(1, 5):
                # sum over every loss pattern of the copies; only all-lost fails
                oracle = 0.0
                for pattern in itertools.product((True, False), repeat=copies):
                    prob = np.prod([p if lost else 1 - p for lost in pattern])
                    if all(pattern):
                        oracle += prob
                self.assertAlmostEqual(predicted_residual_loss(p, copies), oracle, places=12)

    def test_group_delivery_with_parity_matches_enumeration(self):
        rng = random.Random(5)
        for k in range(1, 5):
            payloads = [rng.randbytes(rng.randrange(1, 9)) for _ in range(k)]
            parity = build_parity(payloads)
            for copies in range(1, 5):
                for p in (0.05, 0.1, 0.2):
                    q = predicted_residual_loss(p, copies)
                    delivered = 0.0
                    # pattern[i]: every copy of segment i lost; index k is the parity segment
                    for pattern in itertools.product((True, False), repeat=k + 1):
                        lost = [i for i in range(k) if pattern[i]]
                        present = {i: payloads[i] for i in range(k) if not pattern[i]}
                        if not lost:
                            ok = True
                        elif pattern[k]:
                            ok = False
                        else:
                            try:
                                rebuilt = recover_from_parity(present, parity, k, length=len(payloads[lost[0]]))
                                ok = rebuilt == payloads[lost[0]]
                            except TooManyMissing:
                                ok = False
                        if ok:
                            delivered += np.prod([q if gone else 1 - q for gone in pattern])
                    at_most_one_loss = (1 - q) ** (k + 1) + (k + 1) * q * (1 - q) ** k
                    self.assertAlmostEqual(delivered, at_most_one_loss, places=12, msg=f"k={k} copies={copies} p={p}")

    def test_monte_carlo_delivery_meets_target(self):
        rng = np.random.default_rng(2024)
        p = 0.1
        plan = select_redundancy(p, self.cfg, 10, None)
        attempts = 1 + self.cfg.max_retransmissions if plan.allow_reactive_retx else plan.proactive_copies
        lost = rng.random((100_000, attempts)) < p
        delivered = 1 - lost.all(axis=1).mean()
        self.assertGreaterEqual(delivered, 0.999)

    def test_pacing_gap(self):
        cfg = TransportConfig(bottleneck_rate_bps=1_000_000)
        self.assertEqual(pacing_gap(cfg, 1000), ms(1))
        self.assertEqual(pacing_gap(cfg, 0), 0)
        self.assertEqual(pacing_gap(cfg, 12000), ms(12))


class TestEndpoint(unittest.TestCase):
    def setUp(self):
        self.clock = VirtualClock()
        self.wire = Wire()
        self.cfg = TransportConfig(bottleneck_rate_bps=1_000_000)
        self.sender = TransportEndpoint(self.cfg, self.clock, self.wire, name="tx")
        self.receiver = TransportEndpoint(self.cfg, self.clock, lambda d: None, name="rx")

    def test_first_send_departs_immediately(self):
        receipt = self.sender.send(b"x")
        self.assertEqual(receipt.seq, 0)
        self.assertEqual(receipt.departure_ts, 0)
        self.assertEqual(len(self.wire.frames), 1)

    def test_pacing_spaces_departures(self):
        first = self.sender.send(bytes(125))
        second = self.sender.send(bytes(125))
        self.assertGreaterEqual(second.departure_ts - first.departure_ts, ms(1))

    def test_long_run_rate_stays_under_bottleneck(self):
        cfg = TransportConfig(bottleneck_rate_bps=2_000_000)
        endpoint = TransportEndpoint(cfg, self.clock, lambda d: None)
        rng = random.Random(5)
        sizes = [rng.randint(1, 1400) for _ in range(10_000)]
        departures = [endpoint.send(bytes(n)).departure_ts for n in sizes]
        bits = [(n + HEADER_SIZE) * 8 for n in sizes]
        for i in range(0, len(sizes) - 100, 37):
            elapsed = departures[i + 99] - departures[i]
            rate = sum(bits[i : i + 99]) * 1_000_000 / elapsed
            self.assertLessEqual(rate, cfg.bottleneck_rate_bps * 1.01)

    def test_group_parity_is_fifth_segment(self):
        self.sender.loss_estimate = 0.1
        payloads = [b"\x01\x02\x03", b"\x10", b"\xaa\xbb", b"\x0f\x0f\x0f\x0f"]
        for payload in payloads:
            self.sender.send(payload)
        self.clock.run(until=ms(20))
        segments = self.wire.segments()
        self.assertEqual(segments[4].kind, SegmentKind.PARITY)
        self.assertEqual(segments[4].seq, 0)
        xor = build_parity(payloads)
        self.assertEqual(segments[4].payload[PARITY_PREFIX_SIZE:][: len(xor)], xor)

    def test_in_order_delivery(self):
        for i in range(5):
            self.sender.send(bytes([i]))
        self.clock.run(until=ms(10))
        for frame in reversed(self.wire.frames):
            self.receiver.on_datagram(frame)
        got = drain(self.receiver)
        self.assertEqual([d.payload for d in got], [bytes([i]) for i in range(5)])
        self.assertTrue(all(not d.expired for d in got))

    def test_parity_recovers_lost_segment(self):
        self.sender.loss_estimate = 0.1
        for i in range(8):
            self.sender.send(bytes([i]) * (i + 1))
        self.clock.run(until=ms(10))
        for frame in self.wire.frames:
            seg = decode_segment(frame)
            if seg.kind == SegmentKind.DATA and seg.seq == 5:
                continue
            self.receiver.on_datagram(frame)
        got = drain(self.receiver)
        self.assertEqual([d.seq for d in got], list(range(8)))
        self.assertTrue(got[5].recovered_via_parity)
        self.assertEqual(got[5].payload, bytes([5]) * 6)
        self.assertEqual(self.receiver.stats.recovered_via_parity, 1)

    def test_expiry_modes(self):
        for mode, surfaced in (
            (ExpiryMode.DROP_EXPIRED, False),
            (ExpiryMode.MARK_EXPIRED, True),
            (ExpiryMode.DELIVER_ALL, True),
        ):
            clock = VirtualClock()
            wire = Wire()
            sender = TransportEndpoint(self.cfg, clock, wire)
            receiver = TransportEndpoint(self.cfg, clock, lambda d: None)
            sender.send(b"late", deadline_ms=10)
            clock.schedule(ms(15), lambda: receiver.on_datagram(wire.frames[0]))
            clock.run(until=ms(15))
            got = drain(receiver, mode)
            self.assertEqual(bool(got), surfaced)
            if got:
                self.assertEqual(got[0].expired, mode == ExpiryMode.MARK_EXPIRED)

    def test_hole_abandoned_after_deadline(self):
        self.sender.send(b"a", deadline_ms=20)
        self.sender.send(b"b", deadline_ms=20)
        self.clock.run(until=ms(2))
        self.receiver.on_datagram(self.wire.frames[1])
        with self.assertRaises(WouldBlock):
            self.receiver.recv()
        self.clock.run(until=ms(25))
        got = drain(self.receiver, ExpiryMode.MARK_EXPIRED)
        self.assertEqual([d.seq for d in got], [1])
        self.assertTrue(got[0].expired)
        self.assertEqual(self.receiver.stats.lost_residual, 1)

    def test_unacked_segment_retransmitted_with_same_seq(self):
        self.sender.send(b"keep")
        self.clock.run(until=ms(51))
        seqs = [s.seq for s in self.wire.segments(SegmentKind.DATA)]
        self.assertEqual(seqs, [0, 0])
        self.assertEqual(self.sender.stats.retransmissions, 1)

    def test_feedback_updates_loss_estimate(self):
        self.sender.on_feedback(FeedbackReport(cumulative_seq=40, ack_bitmap=0xFFFFFFFF))
        self.assertEqual(self.sender.loss_estimate, 0.0)
        self.sender.on_feedback(FeedbackReport(cumulative_seq=41, ack_bitmap=0x00FFFFFF))
        self.assertAlmostEqual(self.sender.loss_estimate, 0.025)

    def test_feedback_acknowledges_and_stale_reports_counted(self):
        self.sender.send(b"a")
        self.sender.on_feedback(FeedbackReport(cumulative_seq=0, ack_bitmap=0xFFFFFFFF))
        self.assertEqual(self.sender.unacked, 0)
        self.sender.on_feedback(FeedbackReport(cumulative_seq=5, ack_bitmap=0xFFFFFFFF))
        self.sender.on_feedback(FeedbackReport(cumulative_seq=3, ack_bitmap=0xFFFFFFFF))
        self.assertEqual(self.sender.stats.stale_reports, 1)

    def test_blocking_recv_waits_on_the_clock(self):
        self.sender.send(b"soon")
        self.clock.schedule(ms(7), lambda: self.receiver.on_datagram(self.wire.frames[0]))
        got = self.receiver.recv(block=True, timeout_ms=20)
        self.assertEqual(got.payload, b"soon")
        self.assertEqual(self.clock.now(), ms(7))

        with self.assertRaises(WouldBlock):
            self.receiver.recv(block=True, timeout_ms=5)
        self.assertEqual(self.clock.now(), ms(12))

    def test_closed_endpoint(self):
        self.sender.close()
        with self.assertRaises(EndpointClosed):
            self.sender.send(b"x")
        with self.assertRaises(EndpointClosed):
            self.sender.recv()
        with self.assertRaises(PayloadTooLarge):
            TransportEndpoint(self.cfg, self.clock, self.wire).send(bytes(1401))


class TestLossyLink(unittest.TestCase):
    """Two endpoints joined by lossy simulated channels in both directions."""

    def build(self, loss, seed):
        clock = VirtualClock()
        cfg = TransportConfig()
        ch_up = Channel(ChannelConfig(one_way_delay_ms=3.25, jitter_ms=0.5, loss_prob=loss, seed=seed))
        ch_down = Channel(ChannelConfig(one_way_delay_ms=3.25, jitter_ms=0.5, loss_prob=loss, seed=seed + 1))

        def carry(channel, target):
            def transmit(data):
                at = channel.push(data, clock.now())
                if at is not None:
                    clock.schedule(at, lambda: [target().on_datagram(d.payload) for d in channel.poll(clock.now())])

            return transmit

        ends = {}
        ends["tx"] = TransportEndpoint(cfg, clock, carry(ch_up, lambda: ends["rx"]), name="tx")
        ends["rx"] = TransportEndpoint(cfg, clock, carry(ch_down, lambda: ends["tx"]), name="rx")
        return clock, ends["tx"], ends["rx"]

    def test_no_deadline_delivery_and_conservation(self):
        # two runs per loss rate, each short of the 16-bit sequence wrap
        count = 50_000
        for loss, seed in itertools.product((0.05, 0.1, 0.2), (21, 31)):
            with self.subTest(loss=loss, seed=seed):
                clock, sender, receiver = self.build(loss=loss, seed=seed)
                delivered = []
                receiver.on_readable = lambda: delivered.extend(drain(receiver))
                for i in range(count):
                    clock.schedule(ms(i), lambda i=i: sender.send(i.to_bytes(4, "big")))
                clock.run()

                seqs = [d.seq for d in delivered]
                self.assertTrue(all(seq_lt(a, b) for a, b in zip(seqs, seqs[1:])))
                self.assertGreaterEqual(len(delivered) / count, 0.999)
                stats = receiver.stats
                self.assertEqual(
                    sender.stats.segments_sent, stats.delivered + stats.expired + stats.lost_residual + receiver.pending
                )

    def test_drop_expired_never_surfaces_expired(self):
        clock, sender, receiver = self.build(loss=0.2, seed=8)
        delivered = []
        receiver.on_readable = lambda: delivered.extend(drain(receiver, ExpiryMode.DROP_EXPIRED))
        for i in range(500):
            clock.schedule(ms(2 * i), lambda i=i: sender.send(bytes([i % 256]), deadline_ms=5))
        clock.run()
        self.assertTrue(delivered)
        self.assertFalse(any(d.expired for d in delivered))


if __name__ == '__main__':
    unittest.main()
