import itertools
import math
import tempfile
import unittest
from pathlib import Path

from controller import Direction, PacketLogRecord
from crtp import PacketKind, encode_crtp, make_request, make_setpoint
from errors import ArtifactError, EmptyInput, MissingTimestamp, SchemaMismatch
from tracelab import (
    CDF_HEADER,
    INTERVALS,
    STATS_HEADER,
    TraceRecord,
    TraceSink,
    boxstats,
    cdf,
    export_csv,
    ipt,
    ipt_by_series,
    ipt_histogram,
    read_cdf,
    read_packet_log,
    read_traces,
    rtt,
    stage_decompose,
    stage_stats,
    write_packet_log,
    write_traces,
)

MS = 1000


def out(token, at, kind=PacketKind.REQUEST, run_id=0):
    return PacketLogRecord(run_id, token, kind, Direction.OUT, at)


def back(token, at, run_id=0):
    return PacketLogRecord(run_id, token, PacketKind.RESPONSE, Direction.IN, at)


def sample_trace():
    stamps = [0, 3200, 3400, 3900, 4000, 4100, 4600, 4800, None, 8000]
    return TraceRecord(0, 0, 1, *stamps)


def type7(values, p):
    ordered = sorted(values)
    h = (len(ordered) - 1) * p
    lo = math.floor(h)
    hi = min(lo + 1, len(ordered) - 1)
    return ordered[lo] + (h - lo) * (ordered[hi] - ordered[lo])


class TestIpt(unittest.TestCase):
    def test_gaps_between_outgoing(self):
        log = [out(0, 0), out(1, 8 * MS), back(1, 9 * MS), out(2, 208 * MS)]
        self.assertEqual(ipt(log), [8 * MS, 200 * MS])

    def test_single_record(self):
        self.assertEqual(ipt([out(0, 0)]), [])

    def test_same_instant(self):
        self.assertEqual(ipt([out(0, 0), out(None, 0, PacketKind.SETPOINT)]), [0])

    def test_runs_are_separate(self):
        log = [out(0, 0, run_id=0), out(1, 5 * MS, run_id=0), out(0, 0, run_id=1), out(1, 7 * MS, run_id=1)]
        self.assertEqual(ipt(log), [5 * MS, 7 * MS])

    def test_series_split(self):
        log = [
            out(None, 0, PacketKind.SETPOINT),
            out(0, 0),
            out(1, 9 * MS),
            out(2, 18 * MS),
            out(None, 200 * MS, PacketKind.SETPOINT),
        ]
        series = ipt_by_series(log)
        self.assertEqual(series["setpoint"], [200 * MS])
        self.assertEqual(series["request"], [9 * MS, 9 * MS])

    def test_histogram_bins_the_cadence(self):
        counts = ipt_histogram([200 * MS, 200 * MS, 9 * MS])
        self.assertEqual(sum(counts), 3)
        self.assertEqual(counts[7], 2)


class TestRtt(unittest.TestCase):
    def test_single_exchange(self):
        self.assertEqual(rtt([out(0, 0), back(0, 9 * MS)]), [9 * MS])

    def test_resend_measured_from_first_send(self):
        self.assertEqual(rtt([out(0, 0), out(0, 50 * MS), back(0, 58 * MS)]), [58 * MS])

    def test_unanswered_request_absent(self):
        log = [out(0, 0), out(1, 100 * MS), back(1, 104 * MS)]
        self.assertEqual(rtt(log), [4 * MS])

    def test_duplicate_response_ignored(self):
        log = [out(0, 0), back(0, 5 * MS), back(0, 55 * MS), out(1, 60 * MS), back(1, 66 * MS)]
        self.assertEqual(rtt(log), [5 * MS, 6 * MS])

    def test_one_sample_per_answered_token(self):
        log = []
        for token in range(40):
            log.append(out(token, token * 100 * MS))
            if token % 3:
                log.append(back(token, token * 100 * MS + 7 * MS))
        answered = {r.token for r in log if r.direction == Direction.IN}
        self.assertEqual(len(rtt(log)), len(answered))


class TestCdf(unittest.TestCase):
    def test_definition(self):
        series = cdf([1, 2, 2, 4])
        self.assertEqual(series.values, (1, 2, 4))
        self.assertEqual(series.fractions, (0.25, 0.75, 1.0))

    def test_single_and_equal(self):
        self.assertEqual(cdf([5]).fractions, (1.0,))
        self.assertEqual(cdf([3, 3, 3]).values, (3,))
        self.assertEqual(cdf([3, 3, 3]).fractions, (1.0,))

    def test_monotone_and_complete(self):
        series = cdf([9, 1, 7, 7, 3, 12, 1])
        self.assertEqual(list(series.values), sorted(series.values))
        self.assertTrue(all(a < b for a, b in zip(series.fractions, series.fractions[1:])))
        self.assertEqual(series.fractions[-1], 1.0)

    def test_empty(self):
        with self.assertRaises(EmptyInput):
            cdf([])


class TestStageDecompose(unittest.TestCase):
    def test_example_trace(self):
        parts = stage_decompose(sample_trace())
        self.assertEqual(parts["end_to_end"], 8000)
        self.assertEqual(parts["bridge_residence"], 1400)
        self.assertEqual(parts["serial_roundtrip"], 700)
        self.assertEqual(parts["drone_processing"], 100)
        self.assertEqual(parts["transport_roundtrip"], 6600)
        self.assertEqual(parts["packet_handling"], 700)
        self.assertEqual(parts["end_to_end"], parts["transport_roundtrip"] + parts["bridge_residence"])

    def test_all_equal(self):
        trace = TraceRecord(0, 0, 0, *([500] * 10))
        self.assertEqual(set(stage_decompose(trace).values()), {0})

    def test_missing_stage(self):
        trace = sample_trace()
        trace.bridge_out = None
        with self.assertRaises(MissingTimestamp) as ctx:
            stage_decompose(trace, ["bridge_residence"])
        self.assertEqual(ctx.exception.stage, "bridge_out")

    def test_subset(self):
        self.assertEqual(stage_decompose(sample_trace(), ["drone_processing"]), {"drone_processing": 100})


class TestBoxStats(unittest.TestCase):
    def test_symmetric(self):
        stats = boxstats([1, 2, 3, 4, 5])
        self.assertEqual((stats.q1, stats.median, stats.q3), (2, 3, 4))
        self.assertEqual(stats.outliers, 0)

    def test_single_value(self):
        stats = boxstats([7])
        self.assertEqual(
            {stats.min, stats.q1, stats.median, stats.q3, stats.max, stats.whisker_low, stats.whisker_high}, {7}
        )

    def test_outlier_outside_whisker(self):
        stats = boxstats([1, 1, 1, 100])
        self.assertEqual(stats.whisker_high, 1)
        self.assertEqual(stats.outliers, 1)
        self.assertEqual(stats.max, 100)

    def test_quartiles_match_sorted_index_oracle(self):
        for n in range(1, 7):
            for values in itertools.product(range(1, 5), repeat=n):
                stats = boxstats(values)
                for got, p in ((stats.q1, 0.25), (stats.median, 0.5), (stats.q3, 0.75)):
                    self.assertAlmostEqual(got, type7(values, p), msg=f"{values} p={p}")

    def test_live_flags_cross_host_interval(self):
        traces = [sample_trace(), sample_trace()]
        by_name = {s.name: s for s in stage_stats(traces, live=True)}
        self.assertTrue(by_name["transport_roundtrip"].approximate)
        self.assertFalse(by_name["bridge_residence"].approximate)
        self.assertFalse(any(s.approximate for s in stage_stats(traces)))
        self.assertEqual(set(by_name), set(INTERVALS))


class TestTraceSink(unittest.TestCase):
    def test_first_occurrence_wins(self):
        sink = TraceSink(run_id=2)
        request = encode_crtp(make_request(5))
        sink.begin(5, 0)
        sink.observe("bridge_in", request, 100)
        sink.observe("bridge_in", request, 900)
        sink.observe("bridge_in", encode_crtp(make_setpoint(0, 0, 0, 100)), 50)
        (record,) = sink.records
        self.assertEqual(record.bridge_in, 100)
        self.assertEqual(record.run_id, 2)

    def test_reused_token_starts_fresh_record(self):
        sink = TraceSink()
        sink.begin(0, 0)
        sink.mark(0, "controller_recv", 10)
        sink.begin(0, 5000)
        sink.mark(0, "controller_recv", 5010)
        self.assertEqual([(r.exchange, r.controller_recv) for r in sink.records], [(0, 10), (1, 5010)])

    def test_unknown_token_and_garbage_ignored(self):
        sink = TraceSink()
        sink.observe("bridge_in", encode_crtp(make_request(3)), 10)
        sink.observe("bridge_in", b"\x0C", 10)
        self.assertEqual(sink.records, [])


class TestArtifacts(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_cdf_of_one_sample(self):
        path = export_csv(cdf([1]), self.dir / "cdf.csv")
        self.assertEqual(path.read_text(), "value,fraction\n1,1.0\n")
        self.assertEqual(read_cdf(path).values, (1,))

    def test_empty_stats_is_header_only(self):
        path = export_csv([], self.dir / "stats.csv")
        self.assertEqual(path.read_text(), ",".join(STATS_HEADER) + "\n")

    def test_stats_row_layout(self):
        path = export_csv(stage_stats([sample_trace()], live=True), self.dir / "stats.csv")
        lines = path.read_text().splitlines()
        self.assertEqual(len(lines), 1 + len(INTERVALS))
        row = next(line for line in lines if line.startswith("transport_roundtrip,"))
        self.assertTrue(row.endswith(",1"))

    def test_same_input_same_bytes(self):
        a = export_csv(cdf([4, 1, 1, 9]), self.dir / "a.csv")
        b = export_csv(cdf([4, 1, 1, 9]), self.dir / "b.csv")
        self.assertEqual(a.read_bytes(), b.read_bytes())

    def test_packet_log_and_traces_reload(self):
        log = [out(None, 0, PacketKind.SETPOINT), out(0, 0), back(0, 9 * MS)]
        self.assertEqual(read_packet_log(write_packet_log(log, self.dir / "log.csv")), log)
        traces = [sample_trace()]
        self.assertEqual(read_traces(write_traces(traces, self.dir / "trace.csv")), traces)

    def test_wrong_header(self):
        path = self.dir / "log.csv"
        path.write_text(",".join(CDF_HEADER) + "\n1,1.0\n")
        with self.assertRaises(SchemaMismatch) as ctx:
            read_packet_log(path)
        self.assertEqual(ctx.exception.row, 1)

    def test_bad_row_reports_line(self):
        path = self.dir / "log.csv"
        path.write_text("run_id,token,kind,direction,timestamp_us\n0,1,Request,out,0\n0,1,Bogus,in,5\n")
        with self.assertRaises(ArtifactError) as ctx:
            read_packet_log(path)
        self.assertEqual(ctx.exception.row, 3)

    def test_missing_file(self):
        with self.assertRaises(ArtifactError):
            read_traces(self.dir / "absent.csv")


if __name__ == '__main__':
    unittest.main()
