"""Long-running virtual-sensor server.

One listener socket serves two client kinds: WebSocket (an HTTP ``GET``
upgrade, RFC 6455 text frames) and raw TCP (newline-delimited JSON); both
carry the records defined in :mod:`resotrack.framing`.  The first client
to issue a command becomes the control connection; everyone else is a
read-only telemetry subscriber.

A single control thread owns the plant and tracker.  Commands queue up
and apply between 300-sample blocks, so mode transitions land exactly on
frame boundaries.  Frame emission is paced against absolute deadlines
(t0 + k * block_period), which keeps the long-run rate exact regardless
of per-block scheduling jitter.  Subscriber queues are bounded: when one
falls behind, its oldest *frames* are dropped (sequence gaps make the
loss observable) while calibration and other event records are always
retained.
"""

from __future__ import annotations

import base64
import dataclasses
import hashlib
import itertools
import json
import os
import queue
import socket
import threading
import time
from dataclasses import dataclass

import numpy as np

from . import calib, dsp, framing, tracker
from .config import EmiConfig, PlantConfig, StimulusProgram, StimulusSegment
from .constants import (
    BLOCK_SAMPLES,
    CONSOLE_BLOCK_PAUSE_S,
    CONSOLE_BURST_RATE,
    MEDIAN_WINDOW,
    MEDIAN_WINDOW_SMOOTH,
    POINT_RATE_BENCH,
    POINT_RATE_CONSOLE,
    SCHEMA_VERSION,
)
from .errors import ConfigError, ResotrackError
from .framing import TelemetryFrame
from .plant import Plant

__all__ = ["ServiceConfig", "Service", "serve", "persist_run", "RunRecord", "PROFILES"]

_WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"
_MAX_LINE = 1 << 20          # per-record cap on the wire
_DETECT_TIMEOUT_S = 0.3      # silence window before a client counts as raw
_RAW_BUFFER_MAX = 1 << 22    # newest retained tracking samples per run

COMMANDS = (
    "start_scan", "start_track", "stop", "set_pid", "relock",
    "set_smooth", "set_stimulus", "set_emi", "snapshot",
)


@dataclass(frozen=True)
class Profile:
    name: str
    point_rate: float            # delivered tracking points per second
    block_period_s: float        # wall time per 300-sample frame


PROFILES = {
    "bench": Profile("bench", POINT_RATE_BENCH,
                     BLOCK_SAMPLES / POINT_RATE_BENCH),
    "console": Profile("console", POINT_RATE_CONSOLE,
                       BLOCK_SAMPLES / CONSOLE_BURST_RATE + CONSOLE_BLOCK_PAUSE_S),
}


@dataclass(frozen=True)
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 0                 # 0 = ephemeral, read Service.port after start
    profile: str = "bench"
    runs_dir: str = "runs"
    queue_frames: int = 64        # droppable frames buffered per subscriber
    seed: int | None = None       # overrides the plant config seed when set
    sndbuf: int | None = None     # per-client SO_SNDBUF cap (None = OS default)

    def validate(self) -> None:
        if self.profile not in PROFILES:
            raise ConfigError(
                f"unknown profile {self.profile!r}; choose from {sorted(PROFILES)}"
            )
        if self.queue_frames < 1:
            raise ConfigError("queue_frames must be >= 1")


@dataclass
class RunRecord:
    """Everything needed to persist one tracking run."""

    plant_config: PlantConfig
    profile: str
    point_rate: float
    seed: int
    tracker_params: dict
    calibration: calib.CalibrationResult | None
    samples: list[tracker.TrackerSample]
    filter_window: int


# ---------------------------------------------------------------------------
# client plumbing


class _Client:
    _ids = itertools.count(1)

    def __init__(self, sock: socket.socket, kind: str):
        self.sock = sock
        self.kind = kind                      # "raw" | "ws"
        self.id = next(self._ids)
        self.dead = False
        self._cond = threading.Condition()
        self._out: list[tuple[bool, bytes]] = []   # (droppable, payload)
        self._dropped = 0

    def send(self, payload: bytes, *, droppable: bool, max_frames: int) -> None:
        with self._cond:
            if self.dead:
                return
            if droppable:
                n_droppable = sum(1 for d, _ in self._out if d)
                if n_droppable >= max_frames:
                    for i, (d, _) in enumerate(self._out):
                        if d:
                            del self._out[i]
                            self._dropped += 1
                            break
            self._out.append((droppable, payload))
            self._cond.notify()

    def pop(self, timeout: float):
        with self._cond:
            if not self._out and not self.dead:
                self._cond.wait(timeout)
            if self._out:
                return self._out.pop(0)[1]
            return None

    def close(self) -> None:
        with self._cond:
            self.dead = True
            self._cond.notify_all()
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self.sock.close()
        except OSError:
            pass


def _ws_accept_value(key: str) -> str:
    digest = hashlib.sha1((key + _WS_GUID).encode()).digest()
    return base64.b64encode(digest).decode()


def _ws_wrap(payload: bytes, opcode: int = 0x1) -> bytes:
    b0 = 0x80 | opcode
    n = len(payload)
    if n < 126:
        header = bytes([b0, n])
    elif n < 1 << 16:
        header = bytes([b0, 126]) + n.to_bytes(2, "big")
    else:
        header = bytes([b0, 127]) + n.to_bytes(8, "big")
    return header + payload


def _ws_unmask(payload: bytes, key: bytes) -> bytes:
    out = np.frombuffer(payload, dtype=np.uint8) ^ np.frombuffer(
        (key * (len(payload) // 4 + 1))[: len(payload)], dtype=np.uint8
    )
    return out.tobytes()


# ---------------------------------------------------------------------------
# service


class Service:
    """Socket server wrapping one plant + tracker session.

    ``start()`` binds and returns immediately; ``stop()`` shuts everything
    down.  Usable as a context manager.
    """

    def __init__(self, plant_config: PlantConfig, service_config: ServiceConfig):
        service_config.validate()
        if service_config.seed is not None:
            plant_config = dataclasses.replace(
                plant_config, seed=service_config.seed
            )
        plant_config.validate()
        self.plant_config = plant_config
        self.service_config = service_config
        self.profile = PROFILES[service_config.profile]

        self._plant = Plant(plant_config)
        self._mode = "idle"
        self._seq = 0
        self._block_index = 0
        self._t0 = 0.0
        self._calibration: calib.CalibrationResult | None = None
        self._tracker_config: tracker.TrackerConfig | None = None
        self._tracker_state: tracker.TrackerState | None = None
        self._pending_pid: dict = {}
        self._filter_window = MEDIAN_WINDOW
        self._stream_median = dsp.StreamingMedian(MEDIAN_WINDOW)
        self._scan_blocks: list[np.ndarray] = []
        self._run_samples: list[tracker.TrackerSample] = []
        self._last_locked = True
        self._last_run: RunRecord | None = None

        self._clients: list[_Client] = []
        self._clients_lock = threading.Lock()
        self._control: _Client | None = None
        self._cmd_q: queue.Queue = queue.Queue()
        self._persist_q: queue.Queue = queue.Queue()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._listener: socket.socket | None = None

    # -- lifecycle -------------------------------------------------------

    @property
    def port(self) -> int:
        if self._listener is None:
            raise RuntimeError("service not started")
        return self._listener.getsockname()[1]

    def start(self) -> "Service":
        cfg = self.service_config
        self._listener = socket.create_server(
            (cfg.host, cfg.port), reuse_port=False
        )
        self._listener.settimeout(0.2)
        for target, name in (
            (self._accept_loop, "accept"),
            (self._control_loop, "control"),
            (self._persist_loop, "persist"),
        ):
            t = threading.Thread(target=target, name=f"resotrack-{name}", daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        with self._clients_lock:
            clients = list(self._clients)
        for c in clients:
            c.close()
        for t in self._threads:
            t.join(timeout=2.0)

    def __enter__(self) -> "Service":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    # -- accept / per-client IO ------------------------------------------

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                sock, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            threading.Thread(
                target=self._client_setup, args=(sock,), daemon=True
            ).start()

    def _client_setup(self, sock: socket.socket) -> None:
        try:
            if self.service_config.sndbuf is not None:
                sock.setsockopt(
                    socket.SOL_SOCKET, socket.SO_SNDBUF,
                    self.service_config.sndbuf,
                )
            sock.settimeout(_DETECT_TIMEOUT_S)
            try:
                head = sock.recv(4, socket.MSG_PEEK)
            except socket.timeout:
                head = b""
            leftover = b""
            if head[:4] == b"GET ":
                sock.settimeout(2.0)
                leftover = self._ws_handshake(sock)
                kind = "ws"
            else:
                kind = "raw"
            sock.settimeout(None)
        except (OSError, ValueError):
            try:
                sock.close()
            except OSError:
                pass
            return
        client = _Client(sock, kind)
        with self._clients_lock:
            self._clients.append(client)
        threading.Thread(
            target=self._writer_loop, args=(client,), daemon=True
        ).start()
        threading.Thread(
            target=self._reader_loop, args=(client, leftover), daemon=True
        ).start()
        self._send_to(
            client,
            framing.encode_record(
                {
                    "event": "hello",
                    "profile": self.profile.name,
                    "point_rate": self.profile.point_rate,
                    "mode": self._mode,
                }
            ),
            droppable=False,
        )

    def _ws_handshake(self, sock: socket.socket) -> bytes:
        buf = b""
        while b"\r\n\r\n" not in buf:
            chunk = sock.recv(4096)
            if not chunk or len(buf) > 1 << 14:
                raise ValueError("incomplete websocket handshake")
            buf += chunk
        head, _, leftover = buf.partition(b"\r\n\r\n")
        headers = {}
        for line in head.decode("latin-1").split("\r\n")[1:]:
            name, _, value = line.partition(":")
            headers[name.strip().lower()] = value.strip()
        key = headers.get("sec-websocket-key")
        if not key or "websocket" not in headers.get("upgrade", "").lower():
            sock.sendall(b"HTTP/1.1 400 Bad Request\r\n\r\n")
            raise ValueError("not a websocket upgrade")
        sock.sendall(
            (
                "HTTP/1.1 101 Switching Protocols\r\n"
                "Upgrade: websocket\r\n"
                "Connection: Upgrade\r\n"
                f"Sec-WebSocket-Accept: {_ws_accept_value(key)}\r\n\r\n"
            ).encode()
        )
        return leftover

    def _writer_loop(self, client: _Client) -> None:
        while not client.dead and not self._stop.is_set():
            payload = client.pop(timeout=0.2)
            if payload is None:
                continue
            try:
                if client.kind == "ws":
                    client.sock.sendall(_ws_wrap(payload))
                else:
                    client.sock.sendall(payload + b"\n")
            except OSError:
                break
        self._drop_client(client)

    def _reader_loop(self, client: _Client, leftover: bytes) -> None:
        try:
            if client.kind == "ws":
                self._read_ws(client, leftover)
            else:
                self._read_raw(client)
        except OSError:
            pass
        finally:
            self._drop_client(client)

    def _read_raw(self, client: _Client) -> None:
        buf = bytearray()
        while not client.dead:
            chunk = client.sock.recv(4096)
            if not chunk:
                return
            buf.extend(chunk)
            if len(buf) > _MAX_LINE:
                return
            while True:
                nl = buf.find(b"\n")
                if nl < 0:
                    break
                line = bytes(buf[:nl])
                del buf[: nl + 1]
                if line.strip():
                    self._handle_command_line(client, line)

    def _read_ws(self, client: _Client, leftover: bytes) -> None:
        buf = bytearray(leftover)
        fragments: list[bytes] = []

        def need(n: int) -> bool:
            while len(buf) < n:
                chunk = client.sock.recv(4096)
                if not chunk:
                    return False
                buf.extend(chunk)
                if len(buf) > _MAX_LINE * 2:
                    return False
            return True

        while not client.dead:
            if not need(2):
                return
            b0, b1 = buf[0], buf[1]
            fin, opcode = b0 >> 7, b0 & 0x0F
            masked, length = b1 >> 7, b1 & 0x7F
            pos = 2
            if length == 126:
                if not need(pos + 2):
                    return
                length = int.from_bytes(buf[pos : pos + 2], "big")
                pos += 2
            elif length == 127:
                if not need(pos + 8):
                    return
                length = int.from_bytes(buf[pos : pos + 8], "big")
                pos += 8
            if length > _MAX_LINE:
                return
            key = b""
            if masked:
                if not need(pos + 4):
                    return
                key = bytes(buf[pos : pos + 4])
                pos += 4
            if not need(pos + length):
                return
            payload = bytes(buf[pos : pos + length])
            del buf[: pos + length]
            if masked and length:
                payload = _ws_unmask(payload, key)
            if opcode == 0x8:                     # close -> echo and drop
                try:
                    client.sock.sendall(_ws_wrap(payload[:2], opcode=0x8))
                except OSError:
                    pass
                return
            if opcode == 0x9:                     # ping -> pong
                try:
                    client.sock.sendall(_ws_wrap(payload, opcode=0xA))
                except OSError:
                    pass
                continue
            if opcode == 0xA:                     # pong
                continue
            if opcode in (0x0, 0x1, 0x2):
                fragments.append(payload)
                if not fin:
                    continue
                message = b"".join(fragments)
                fragments = []
                for line in message.split(b"\n"):
                    if line.strip():
                        self._handle_command_line(client, line)

    def _drop_client(self, client: _Client) -> None:
        client.close()
        with self._clients_lock:
            if client in self._clients:
                self._clients.remove(client)
            if self._control is client:
                self._control = None

    # -- command intake ---------------------------------------------------

    def _handle_command_line(self, client: _Client, line: bytes) -> None:
        try:
            obj = json.loads(line)
            if not isinstance(obj, dict) or "cmd" not in obj:
                raise ValueError("command must be an object with a 'cmd' field")
        except (ValueError, UnicodeDecodeError) as exc:
            self._reply(client, None, ok=False, error=f"malformed command: {exc}")
            return
        with self._clients_lock:
            if self._control is None:
                self._control = client
            elif self._control is not client:
                self._reply(
                    client, obj.get("id"), ok=False,
                    error="control connection already active",
                )
                return
        self._cmd_q.put((client, obj))

    def _reply(self, client: _Client, req_id, *, ok: bool, **extra) -> None:
        record = {"id": req_id, "ok": ok, **extra}
        self._send_to(client, framing.encode_record(record), droppable=False)

    def _send_to(self, client: _Client, record: bytes, *, droppable: bool) -> None:
        client.send(
            record.rstrip(b"\n"),
            droppable=droppable,
            max_frames=self.service_config.queue_frames,
        )

    def _broadcast(self, record: bytes, *, droppable: bool) -> None:
        with self._clients_lock:
            clients = list(self._clients)
        for c in clients:
            self._send_to(c, record, droppable=droppable)

    # -- control loop -----------------------------------------------------

    def _control_loop(self) -> None:
        while not self._stop.is_set():
            try:
                item = self._cmd_q.get(timeout=0.05 if self._mode == "idle" else 0.0)
            except queue.Empty:
                item = None
            while item is not None:
                client, obj = item
                self._apply_command(client, obj)
                try:
                    item = self._cmd_q.get_nowait()
                except queue.Empty:
                    item = None
            if self._stop.is_set():
                return
            if self._mode == "scan":
                self._emit_scan_block()
            elif self._mode == "track":
                self._emit_track_block()

    def _apply_command(self, client: _Client, obj: dict) -> None:
        cmd = obj.get("cmd")
        req_id = obj.get("id")
        if cmd not in COMMANDS:
            self._reply(client, req_id, ok=False, error=f"unknown command {cmd!r}")
            return
        try:
            getattr(self, f"_cmd_{cmd}")(client, req_id, obj)
        except ResotrackError as exc:
            self._reply(client, req_id, ok=False, error=str(exc))
        except Exception as exc:  # session must survive any command fault
            self._reply(client, req_id, ok=False, error=f"internal error: {exc!r}")

    # -- individual commands ---------------------------------------------

    def _cmd_start_scan(self, client, req_id, obj) -> None:
        if self._mode != "idle":
            self._reply(client, req_id, ok=False,
                        error=f"busy: mode is {self._mode}; send stop first")
            return
        kwargs = {}
        for name in ("n_points", "averaging"):
            if obj.get(name) is not None:
                kwargs[name] = int(obj[name])
        for name in ("v_start", "v_stop"):
            if obj.get(name) is not None:
                kwargs[name] = float(obj[name])
        trace = calib.scan(self._plant, **kwargs)
        pairs = np.column_stack([trace.v_dac, trace.v_adc])
        self._scan_blocks = [
            pairs[i : i + BLOCK_SAMPLES]
            for i in range(0, pairs.shape[0], BLOCK_SAMPLES)
        ]
        self._mode = "scan"
        self._seq = 0
        self._block_index = 0
        self._t0 = time.monotonic()
        self._reply(client, req_id, ok=True, mode="scan", n_points=trace.points)
        self._broadcast(
            framing.encode_record({"event": "mode", "mode": "scan"}),
            droppable=False,
        )

    def _cmd_start_track(self, client, req_id, obj) -> None:
        if self._mode != "idle":
            self._reply(client, req_id, ok=False,
                        error=f"busy: mode is {self._mode}; send stop first")
            return
        if self._calibration is None or obj.get("recalibrate"):
            self._run_calibration()
        cal = self._calibration
        params = dict(self._pending_pid)
        params.update(
            {k: obj[k] for k in ("k_i", "k_fraction", "k_p", "k_d") if k in obj}
        )
        self._tracker_config = self._build_tracker_config(cal, params)
        self._tracker_state = tracker.TrackerState(v_center=cal.v0)
        self._run_samples = []
        self._stream_median = dsp.StreamingMedian(self._filter_window)
        self._last_locked = True
        self._mode = "track"
        self._seq = 0
        self._block_index = 0
        self._t0 = time.monotonic()
        self._reply(
            client, req_id, ok=True, mode="track",
            k_i=self._tracker_config.k_i, a_m=self._tracker_config.a_m,
        )
        self._broadcast(
            framing.encode_record({"event": "mode", "mode": "track"}),
            droppable=False,
        )

    def _build_tracker_config(self, cal, params: dict) -> tracker.TrackerConfig:
        if "k_i" in params and params.get("k_i") is not None:
            k_i = float(params["k_i"])
        else:
            k_i = cal.k_gain * float(params.get("k_fraction", 1.0))
        return tracker.TrackerConfig(
            k_i=k_i,
            a_m=cal.a_m,
            k_p=float(params.get("k_p", 0.0)),
            k_d=float(params.get("k_d", 0.0)),
            point_rate=self.profile.point_rate,
        )

    def _run_calibration(self) -> None:
        result, _ = calib.calibrate(self._plant)
        self._calibration = result
        self._broadcast(
            framing.encode_record(framing.calibration_event(result)),
            droppable=False,
        )

    def _cmd_stop(self, client, req_id, obj) -> None:
        was = self._mode
        if was == "track" and self._run_samples:
            self._last_run = RunRecord(
                plant_config=self.plant_config,
                profile=self.profile.name,
                point_rate=self.profile.point_rate,
                seed=self.plant_config.seed,
                tracker_params={
                    "k_i": self._tracker_config.k_i,
                    "k_p": self._tracker_config.k_p,
                    "k_d": self._tracker_config.k_d,
                    "a_m": self._tracker_config.a_m,
                },
                calibration=self._calibration,
                samples=self._run_samples,
                filter_window=self._filter_window,
            )
        self._mode = "idle"
        self._scan_blocks = []
        self._run_samples = []
        if was != "idle":
            self._broadcast(
                framing.encode_record({"event": "mode", "mode": "idle"}),
                droppable=False,
            )
        if obj.get("persist"):
            if self._last_run is None:
                self._reply(client, req_id, ok=False, error="no run to persist")
                return
            self._persist_q.put((client, req_id, self._last_run))
            return  # reply comes from the persistence worker
        self._reply(client, req_id, ok=True, stopped=was)

    def _cmd_set_pid(self, client, req_id, obj) -> None:
        params = {
            k: obj[k] for k in ("k_i", "k_fraction", "k_p", "k_d") if k in obj
        }
        if not params:
            self._reply(client, req_id, ok=False, error="set_pid needs parameters")
            return
        if self._mode == "track":
            self._tracker_config = self._build_tracker_config(
                self._calibration, params
            )
            self._reply(client, req_id, ok=True, k_i=self._tracker_config.k_i)
        else:
            if "k_fraction" in params and self._calibration is None:
                self._reply(client, req_id, ok=False,
                            error="k_fraction needs a calibration first")
                return
            self._pending_pid.update(params)
            self._reply(client, req_id, ok=True, pending=True)

    def _cmd_relock(self, client, req_id, obj) -> None:
        if self._mode == "scan":
            self._reply(client, req_id, ok=False, error="busy: scan in progress")
            return
        tracking = self._mode == "track"
        result, state = tracker.relock(self._plant)
        self._calibration = result
        self._broadcast(
            framing.encode_record(framing.calibration_event(result)),
            droppable=False,
        )
        if tracking:
            self._tracker_state = state
            self._tracker_config = dataclasses.replace(
                self._tracker_config, a_m=result.a_m
            )
        self._reply(client, req_id, ok=True, v0=result.v0, a_m=result.a_m,
                    k_gain=result.k_gain)

    def _cmd_set_smooth(self, client, req_id, obj) -> None:
        on = bool(obj.get("on"))
        self._filter_window = MEDIAN_WINDOW_SMOOTH if on else MEDIAN_WINDOW
        self._stream_median = dsp.StreamingMedian(self._filter_window)
        self._reply(client, req_id, ok=True, filter_window=self._filter_window)

    def _cmd_set_stimulus(self, client, req_id, obj) -> None:
        prog = obj.get("program")
        if not isinstance(prog, dict):
            self._reply(client, req_id, ok=False, error="set_stimulus needs a program")
            return
        segments = tuple(
            StimulusSegment(
                kind=s["kind"],
                start=float(s["start"]),
                duration=float(s["duration"]),
                magnitude=float(s["magnitude"]),
                period=float(s.get("period", 0.0)),
            )
            for s in prog.get("segments", ())
        )
        program = StimulusProgram(
            segments=segments, domain=prog.get("domain", "permittivity")
        )
        program.validate()
        self._swap_plant_section(stimulus=program)
        self._reply(client, req_id, ok=True, segments=len(segments))

    def _cmd_set_emi(self, client, req_id, obj) -> None:
        emi = EmiConfig(
            enabled=bool(obj.get("enabled")),
            amplitude=float(obj.get("amplitude", 0.0)),
            frequency=float(obj.get("frequency", 0.0)),
            phase=float(obj.get("phase", 0.0)),
        )
        emi.validate()
        self._swap_plant_section(emi=emi)
        self._reply(client, req_id, ok=True, enabled=emi.enabled)

    def _swap_plant_section(self, **sections) -> None:
        # stimulus/emi swaps keep the RNG stream and time index intact; the
        # tuning-coefficient cache only depends on the untouched vco section
        new_cfg = dataclasses.replace(self._plant.config, **sections)
        new_cfg.validate()
        self._plant.config = new_cfg
        self.plant_config = new_cfg

    def _cmd_snapshot(self, client, req_id, obj) -> None:
        cal = self._calibration
        state = self._tracker_state
        self._reply(
            client, req_id, ok=True,
            mode=self._mode,
            seq=self._seq,
            profile=self.profile.name,
            point_rate=self.profile.point_rate,
            seed=self.plant_config.seed,
            filter_window=self._filter_window,
            emi_enabled=self._plant.config.emi.enabled,
            v_center=None if state is None else state.v_center,
            locked=None if state is None else state.locked,
            iteration=None if state is None else state.iteration,
            calibration=None if cal is None else {
                "v0": cal.v0, "a_m": cal.a_m, "k_gain": cal.k_gain,
                "q_est": cal.q_est, "delta_t_est": cal.delta_t_est,
            },
        )

    # -- block emission ---------------------------------------------------

    def _pace(self) -> None:
        self._block_index += 1
        deadline = self._t0 + self._block_index * self.profile.block_period_s
        wait = deadline - time.monotonic()
        if wait > 0:
            self._stop.wait(wait)

    def _emit_scan_block(self) -> None:
        if not self._scan_blocks:
            self._mode = "idle"
            self._broadcast(
                framing.encode_record({"event": "scan_done", "complete": True}),
                droppable=False,
            )
            return
        block = self._scan_blocks.pop(0)
        frame = TelemetryFrame(
            seq=self._seq,
            mode="scan",
            samples=block,
            marker=block.shape[0] == BLOCK_SAMPLES,
        )
        self._pace()
        self._broadcast(framing.frame_encode(frame), droppable=True)
        self._seq += 1

    def _emit_track_block(self) -> None:
        state = self._tracker_state
        start = state.iteration
        v, err, locked, sat = tracker.run_arrays(
            BLOCK_SAMPLES, state, self._tracker_config, self._plant
        )
        filtered = self._stream_median.push_many(v)
        for i in range(BLOCK_SAMPLES):
            self._run_samples.append(
                tracker.TrackerSample(
                    start + i, float(v[i]), float(err[i]),
                    bool(locked[i]), bool(sat[i]),
                )
            )
        if len(self._run_samples) > _RAW_BUFFER_MAX:
            del self._run_samples[: len(self._run_samples) - _RAW_BUFFER_MAX]
        frame = TelemetryFrame(
            seq=self._seq,
            mode="track",
            samples=v,
            marker=True,
            filtered=filtered,
            filter_window=self._filter_window,
            locked=bool(locked[-1]),
        )
        self._pace()
        self._broadcast(framing.frame_encode(frame), droppable=True)
        self._seq += 1
        if self._last_locked and not bool(locked.all()):
            first_bad = start + int(np.argmin(locked))
            self._broadcast(
                framing.encode_record(
                    {"event": "lock_lost", "iteration": first_bad}
                ),
                droppable=False,
            )
        self._last_locked = bool(locked[-1])

    # -- persistence ------------------------------------------------------

    def _persist_loop(self) -> None:
        while not self._stop.is_set():
            try:
                client, req_id, record = self._persist_q.get(timeout=0.2)
            except queue.Empty:
                continue
            try:
                run_dir = persist_run(record, self.service_config.runs_dir)
            except OSError as exc:
                self._reply(client, req_id, ok=False,
                            error=f"storage failure: {exc}")
                continue
            self._reply(client, req_id, ok=True, run_dir=run_dir)


# ---------------------------------------------------------------------------
# persistence


def _run_dir_name(base: str, seed: int) -> str:
    stamp = time.strftime("%Y%m%dT%H%M%S", time.gmtime())
    name = f"{stamp}-seed{seed}"
    path = os.path.join(base, name)
    suffix = 1
    while os.path.exists(path):
        suffix += 1
        path = os.path.join(base, f"{name}-{suffix}")
    return path


def persist_run(record: RunRecord, runs_dir: str) -> str:
    """Write one run directory; returns its path.

    Layout: ``config.json``, ``calibration.csv``, ``raw.csv``,
    ``filtered.csv`` (centered median of the raw stream), ``report.csv``.
    """
    if not record.samples:
        raise ConfigError("run record holds no samples")
    path = _run_dir_name(runs_dir, record.seed)
    os.makedirs(path, exist_ok=True)

    with open(os.path.join(path, "config.json"), "w") as fh:
        json.dump(
            {
                "schema": SCHEMA_VERSION,
                "profile": record.profile,
                "point_rate": record.point_rate,
                "seed": record.seed,
                "tracker": record.tracker_params,
                "filter_window": record.filter_window,
                "plant": dataclasses.asdict(record.plant_config),
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")

    if record.calibration is not None:
        calib.calibration_to_csv(
            record.calibration, os.path.join(path, "calibration.csv")
        )

    meta = {"seed": record.seed, "profile": record.profile}
    tracker.run_log_to_csv(record.samples, os.path.join(path, "raw.csv"), meta=meta)

    v = np.array([s.v_out for s in record.samples])
    window = min(record.filter_window, v.shape[0] - (1 - v.shape[0] % 2))
    window = max(1, window if window % 2 else window - 1)
    filtered = dsp.median_filter(v, window)
    with open(os.path.join(path, "filtered.csv"), "w", newline="") as fh:
        fh.write(f"# schema={SCHEMA_VERSION}\n")
        fh.write(f"# window={window}\n")
        fh.write("iteration,v_filtered\n")
        for s, f in zip(record.samples, filtered):
            fh.write(f"{s.iteration},{float(f)!r}\n")

    raw_stats = dsp.series_stats(v)
    rows = [("raw_" + k, getattr(raw_stats, k))
            for k in ("mean", "std", "snr_db", "skewness", "excess_kurtosis")]
    if v.shape[0] >= 2:
        f_stats = dsp.series_stats(filtered)
        rows += [("filtered_snr_db", f_stats.snr_db)]
        if np.isfinite(f_stats.snr_db) and np.isfinite(raw_stats.snr_db):
            rows += [("median_gain_db", f_stats.snr_db - raw_stats.snr_db)]
    rows += [("n", raw_stats.n), ("filter_window", window)]
    with open(os.path.join(path, "report.csv"), "w", newline="") as fh:
        fh.write(f"# schema={SCHEMA_VERSION}\n")
        fh.write("key,value\n")
        for key, value in rows:
            fh.write(f"{key},{value!r}\n")
    return path


def serve(plant_config: PlantConfig, service_config: ServiceConfig) -> Service:
    """Construct and start a service; caller owns ``stop()``."""
    return Service(plant_config, service_config).start()
