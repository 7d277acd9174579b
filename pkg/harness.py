"""Scenario orchestration: config files, testbed wiring, runs, analysis, comparison.

A desk run wires controller, transport, channel, bridge, serial link and
drone under one VirtualClock and writes three artifacts:

    packet_log.csv   every packet the controller sent or received
    trace.csv        per-exchange stage timestamps
    summary.json     RTT/IPT statistics and component counters

``analyze`` turns those into CDF and stage statistics CSVs; ``compare``
stacks the CDFs of several artifact directories into one long table.
"""

import json
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from bridge import BridgeConfig, BridgeHandle, run_bridge, stop_bridge
from chansim import Channel, ChannelConfig
from clockcore import Clock, Instant, LiveClock, VirtualClock, ms
from config import get_logger
from controller import RUN_BOUND_US, Controller, PacketLogRecord, TransportLink, WorkloadConfig
from dronesim import DroneSim, DroneState
from errors import ArtifactError, ConfigError, UsageError
from seriallink import PySerialPort, SerialFrame, WireConfig, sim_serial_pair
from tracelab import (
    IPT_BINS_MS,
    CdfSeries,
    TraceRecord,
    TraceSink,
    cdf,
    export_csv,
    ipt,
    ipt_by_series,
    ipt_histogram,
    percentiles,
    read_cdf,
    read_packet_log,
    read_traces,
    rtt,
    stage_stats,
    write_packet_log,
    write_rows,
    write_traces,
)
from transport import DatagramLink, TransportConfig, TransportEndpoint

logger = get_logger("harness")

PACKET_LOG = "packet_log.csv"
TRACE = "trace.csv"
SUMMARY = "summary.json"
RTT_CDF = "rtt_cdf.csv"
IPT_CDF = "ipt_cdf.csv"
STAGE_STATS = "stage_stats.csv"
COMPARE_HEADER = ["scenario", "metric", "value", "fraction"]


class LinkPath(str, Enum):
    PRRT = "prrt"
    RADIO = "radio"


class DroneConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    processing_delay_us: int = Field(default=100, ge=0)
    watchdog_timeout_ms: float = Field(default=500, gt=0)


class LiveConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    local_host: str = "0.0.0.0"
    local_port: int = Field(default=5100, ge=1, le=65535)
    remote_host: str = "127.0.0.1"
    remote_port: int = Field(default=5101, ge=1, le=65535)


class ScenarioConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = Field(min_length=1)
    path: LinkPath = LinkPath.PRRT
    seed: int = Field(default=1, ge=0)
    runs: int = Field(default=1, ge=1)
    channel: ChannelConfig = ChannelConfig()
    wire: WireConfig = WireConfig()
    bridge: BridgeConfig = BridgeConfig()
    transport: TransportConfig = TransportConfig()
    workload: WorkloadConfig = WorkloadConfig()
    drone: DroneConfig = DroneConfig()
    live: LiveConfig = LiveConfig()


# --- scenario files -----------------------------------------------------------


def _nest(flat: dict[str, Optional[str]], source: str) -> dict:
    tree: dict = {}
    for key, value in flat.items():
        if value is None or value.strip().lower() in ("", "none"):
            value = None
        node = tree
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{source}: {key} nests under a plain value", [key])
        if isinstance(node.get(leaf), dict):
            raise ConfigError(f"{source}: {key} is a section, not a value", [key])
        node[leaf] = value
    return tree


def parse_scenario(data: dict, source: str = "<scenario>") -> ScenarioConfig:
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as e:
        paths = [".".join(str(p) for p in err["loc"]) for err in e.errors()]
        details = "; ".join(f"{p}: {err['msg']}" for p, err in zip(paths, e.errors()))
        raise ConfigError(f"{source}: {details}", paths) from e


def load_scenario(path) -> ScenarioConfig:
    """Read a flat ``section.key=value`` scenario file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"scenario file {path} not found", [str(path)])
    return parse_scenario(_nest(dotenv_values(path), str(path)), str(path))


# --- testbed ------------------------------------------------------------------


def derive_seed(seed: int, *stream: int) -> int:
    """Independent generator seed per random consumer."""
    return int(np.random.SeedSequence([seed, *stream]).generate_state(1)[0])


def _carry(clock: Clock, channel: Channel, deliver: Callable[[bytes], None]) -> Callable[[bytes], None]:
    def transmit(data: bytes) -> None:
        at = channel.push(data, clock.now())
        if at is not None:
            clock.schedule(at, lambda: [deliver(d.payload) for d in channel.poll(clock.now())])

    return transmit


class RadioPort:
    """Drone side of the radio path, shaped like a serial port for DroneSim."""

    name = "radio"

    def __init__(self):
        self.is_open = True
        self.on_frame: Optional[Callable[[SerialFrame], None]] = None
        self.transmit: Optional[Callable[[bytes], None]] = None

    def ready(self) -> bool:
        return self.is_open

    def deliver(self, data: bytes) -> None:
        if self.on_frame:
            self.on_frame(SerialFrame(payload=data))

    def write_frame(self, frame: SerialFrame) -> None:
        self.transmit(frame.payload)


class RadioLink:
    """Direct controller-drone path: CRTP bytes over a channel, no transport, bridge or UART."""

    def __init__(self, cfg: ChannelConfig, clock: Clock, seed: int):
        self.clock = clock
        self.on_receive: Optional[Callable[[bytes], None]] = None
        self.uplink = Channel(cfg.model_copy(update={"seed": derive_seed(seed, 1)}), "radio-up")
        self.downlink = Channel(cfg.model_copy(update={"seed": derive_seed(seed, 2)}), "radio-down")
        self.drone_port = RadioPort()
        self._send = _carry(clock, self.uplink, self.drone_port.deliver)
        self.drone_port.transmit = _carry(clock, self.downlink, self._to_controller)

    def send(self, payload: bytes, deadline_ms: Optional[int] = None) -> Instant:
        self._send(payload)
        return self.clock.now()

    def _to_controller(self, data: bytes) -> None:
        if self.on_receive:
            self.on_receive(data)


@dataclass
class Testbed:
    cfg: ScenarioConfig
    run_id: int
    clock: VirtualClock
    sink: TraceSink
    controller: Controller
    drone: DroneSim
    channels: dict[str, Channel] = field(default_factory=dict)
    endpoints: dict[str, TransportEndpoint] = field(default_factory=dict)
    serial_ports: dict = field(default_factory=dict)
    bridge: Optional[BridgeHandle] = None


def build_testbed(cfg: ScenarioConfig, run_id: int = 0) -> Testbed:
    clock = VirtualClock()
    seed = cfg.seed + run_id
    sink = TraceSink(run_id)
    drone_state = DroneState(
        processing_delay_us=cfg.drone.processing_delay_us,
        watchdog_timeout_ms=cfg.drone.watchdog_timeout_ms,
    )

    if cfg.path == LinkPath.RADIO:
        radio = RadioLink(cfg.channel, clock, seed)
        drone = DroneSim(drone_state, clock, radio.drone_port, sink)
        controller = Controller(radio, cfg.workload, clock, sink, run_id)
        return Testbed(
            cfg, run_id, clock, sink, controller, drone,
            channels={"uplink": radio.uplink, "downlink": radio.downlink},
        )

    up = Channel(cfg.channel.model_copy(update={"seed": derive_seed(seed, 1)}), "uplink")
    down = Channel(cfg.channel.model_copy(update={"seed": derive_seed(seed, 2)}), "downlink")
    ground = TransportEndpoint(cfg.transport, clock, lambda d: to_bridge(d), name="controller")
    relay = TransportEndpoint(cfg.transport, clock, lambda d: to_ground(d), name="bridge")
    to_bridge = _carry(clock, up, relay.on_datagram)
    to_ground = _carry(clock, down, ground.on_datagram)

    host, device = sim_serial_pair(cfg.wire, clock, seed=derive_seed(seed, 3))
    drone = DroneSim(drone_state, clock, device, sink)
    handle = run_bridge(relay, host, cfg.bridge, clock, sink)
    controller = Controller(TransportLink(ground, sink), cfg.workload, clock, sink, run_id)
    return Testbed(
        cfg, run_id, clock, sink, controller, drone,
        channels={"uplink": up, "downlink": down},
        endpoints={"controller": ground, "bridge": relay},
        serial_ports={"host": host, "device": device},
        bridge=handle,
    )


def _run_once(bed: Testbed) -> dict:
    """Drive one testbed to the end of its workload and collect its counters."""
    bed.controller.start()
    bed.clock.wait_for(lambda: bed.controller.done, RUN_BOUND_US)
    if bed.controller.halted:
        # keep the drone alive long enough for its watchdog to act
        bed.clock.run(until=bed.clock.now() + ms(bed.cfg.drone.watchdog_timeout_ms) + ms(100))
    bed.drone.stop()

    summary = {
        "run_id": bed.run_id,
        "exchanges": bed.controller.exchanges_done,
        "aborted": bed.controller.error is not None,
        "halted": bed.controller.halted,
        "end_us": bed.clock.now(),
        "failsafe_engagements_us": list(bed.drone.state.failsafe_engagements),
        "drone": {
            "setpoints": bed.drone.state.setpoints,
            "requests": bed.drone.state.requests,
            "responses": bed.drone.state.responses,
            "decode_errors": bed.drone.state.decode_errors,
            "last_setpoint_us": bed.drone.state.last_setpoint_time,
        },
        "channel": {name: dict(ch.stats.__dict__) for name, ch in bed.channels.items()},
    }
    if bed.bridge is not None:
        summary["bridge"] = stop_bridge(bed.bridge).as_dict()
        summary["serial"] = {
            name: {"errors_skipped": port.reader.errors_skipped, "frames_decoded": port.reader.frames_decoded}
            for name, port in bed.serial_ports.items()
        }
    for endpoint in bed.endpoints.values():
        endpoint.close()
    if bed.endpoints:
        summary["transport"] = {name: ep.stats.as_dict() for name, ep in bed.endpoints.items()}
    samples = rtt(bed.controller.log)
    summary["rtt_median_us"] = float(np.median(samples)) if samples else None
    return summary


def summarize(
    cfg: ScenarioConfig,
    log: Sequence[PacketLogRecord],
    traces: Sequence[TraceRecord],
    runs: list[dict],
    mode: str = "desk",
) -> dict:
    series = ipt_by_series(log)
    all_ipt = ipt(log)
    stats = stage_stats(traces, live=mode == "live")
    return {
        "scenario": cfg.name,
        "path": cfg.path.value,
        "mode": mode,
        "seed": cfg.seed,
        "runs": len(runs),
        "rtt_us": percentiles(rtt(log)),
        "ipt_us": {
            "all": percentiles(all_ipt),
            "setpoint": percentiles(series["setpoint"]),
            "request": percentiles(series["request"]),
        },
        "ipt_histogram_ms": {
            "edges": [str(edge) for edge in IPT_BINS_MS],
            "all": ipt_histogram(all_ipt),
            "setpoint": ipt_histogram(series["setpoint"]),
            "request": ipt_histogram(series["request"]),
        },
        "stage_median_us": {s.name: s.median for s in stats},
        "per_run": runs,
    }


def _write_json(data: dict, path: Path) -> Path:
    try:
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise ArtifactError(f"cannot write: {e}", path=str(path)) from e
    return path


def _prepare(out_dir) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ArtifactError(f"cannot create artifact directory: {e}", path=str(out)) from e
    return out


def run_scenario(cfg: ScenarioConfig, out_dir) -> Path:
    out = _prepare(out_dir)
    started = time.monotonic()
    log: list[PacketLogRecord] = []
    traces: list[TraceRecord] = []
    runs = []
    for run_id in range(cfg.runs):
        bed = build_testbed(cfg, run_id)
        runs.append(_run_once(bed))
        if bed.controller.error:
            logger.warning(f"Scenario {cfg.name} run {run_id}: {bed.controller.error.detail}")
        log.extend(bed.controller.log)
        traces.extend(bed.sink.records)

    write_packet_log(log, out / PACKET_LOG)
    write_traces(traces, out / TRACE)
    summary = summarize(cfg, log, traces, runs)
    _write_json(summary, out / SUMMARY)
    logger.info(
        f"Scenario {cfg.name} finished: {cfg.runs} run(s), median RTT "
        f"{summary['rtt_us'].get('median', float('nan')) / 1000:.2f} ms, "
        f"{time.monotonic() - started:.2f} s wall time -> {out}"
    )
    return out


# --- analysis -----------------------------------------------------------------


def _series(samples: list[int]) -> CdfSeries:
    return cdf(samples) if samples else CdfSeries((), ())


def analyze(artifacts_dir) -> dict[str, Path]:
    """Write rtt_cdf.csv, ipt_cdf.csv and stage_stats.csv next to the run artifacts."""
    root = Path(artifacts_dir)
    if not root.is_dir():
        raise ArtifactError("artifact directory not found", path=str(root))
    log = read_packet_log(root / PACKET_LOG)
    traces = read_traces(root / TRACE)
    mode = "desk"
    summary_path = root / SUMMARY
    if summary_path.is_file():
        try:
            mode = json.loads(summary_path.read_text(encoding="utf-8")).get("mode", "desk")
        except json.JSONDecodeError as e:
            raise ArtifactError(f"malformed summary: {e}", path=str(summary_path), row=e.lineno) from e

    written = {
        "rtt": export_csv(_series(rtt(log)), root / RTT_CDF),
        "ipt": export_csv(_series(ipt(log)), root / IPT_CDF),
        "stages": export_csv(stage_stats(traces, live=mode == "live"), root / STAGE_STATS),
    }
    logger.info(f"Analysis of {root} written: {', '.join(p.name for p in written.values())}")
    return written


def _label(root: Path) -> str:
    summary_path = root / SUMMARY
    if summary_path.is_file():
        try:
            return json.loads(summary_path.read_text(encoding="utf-8")).get("scenario") or root.name
        except json.JSONDecodeError:
            pass
    return root.name


def compare(dirs: Sequence, out_path) -> Path:
    if len(dirs) < 2:
        raise UsageError("compare needs at least two artifact directories")
    rows = []
    for d in dirs:
        root = Path(d)
        if not (root / RTT_CDF).is_file() or not (root / IPT_CDF).is_file():
            analyze(root)
        label = _label(root)
        for metric, name in (("rtt", RTT_CDF), ("ipt", IPT_CDF)):
            series = read_cdf(root / name)
            rows.extend((label, metric, v, f) for v, f in zip(series.values, series.fractions))

    out = Path(out_path)
    if out.parent != Path("."):
        _prepare(out.parent)
    write_rows(out, COMPARE_HEADER, rows)
    logger.info(f"Comparison of {len(dirs)} scenarios written to {out}")
    return out


# --- live mode ----------------------------------------------------------------


def run_live(cfg: ScenarioConfig, role: str, out_dir, stop: Optional[Callable[[], bool]] = None) -> Optional[Path]:
    """Real sockets and a real serial device; ``role`` is controller or bridge."""
    clock = LiveClock()
    clock.start()
    link = DatagramLink((cfg.live.local_host, cfg.live.local_port), (cfg.live.remote_host, cfg.live.remote_port))
    endpoint = TransportEndpoint(cfg.transport, clock, link.transmit, name=role)
    link.attach(endpoint)
    try:
        if role == "bridge":
            port = PySerialPort(cfg.wire.device, cfg.wire.baud)
            handle = run_bridge(endpoint, port, cfg.bridge, clock)
            try:
                while not (stop and stop()):
                    time.sleep(0.1)
            except KeyboardInterrupt:
                logger.info("Bridge interrupted, stopping")
            stop_bridge(handle)
            port.close()
            return None

        sink = TraceSink()
        controller = Controller(TransportLink(endpoint, sink), cfg.workload, clock, sink)
        controller.start()
        try:
            clock.wait_for(lambda: controller.done or bool(stop and stop()), RUN_BOUND_US)
        except KeyboardInterrupt:
            logger.info("Controller interrupted, writing partial artifacts")
            controller.halt()
        out = _prepare(out_dir)
        write_packet_log(controller.log, out / PACKET_LOG)
        write_traces(sink.records, out / TRACE)
        runs = [
            {
                "run_id": 0,
                "exchanges": controller.exchanges_done,
                "aborted": controller.error is not None,
                "halted": controller.halted,
                "transport": {role: endpoint.stats.as_dict()},
            }
        ]
        _write_json(summarize(cfg, controller.log, sink.records, runs, mode="live"), out / SUMMARY)
        return out
    finally:
        endpoint.close()
        link.close()
        clock.stop()

