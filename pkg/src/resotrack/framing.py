"""Telemetry wire format: newline-delimited JSON records.

Three record shapes share the stream:

* frames   — ``{"seq", "mode", "samples", ...}``; full 300-sample blocks
  carry the alignment marker field ``"marker": "0000"``.
* events   — ``{"event": ..., ...}`` (calibration results, mode changes).
* replies  — ``{"id": ..., "ok": ...}`` answering control commands.

Scan frames hold ``[v_dac, v_adc]`` pairs; track frames hold ``v_out``
volts plus the median-filtered stream and its window.  The decoder never
raises on wire garbage: a bad line drops frames until the next marker
frame, and every anomaly (desync, resync, sequence gap) surfaces as a
:class:`DecodeEvent` so data loss is observable rather than silent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .constants import BLOCK_MARKER, BLOCK_SAMPLES
from .errors import ProtocolError

__all__ = [
    "TelemetryFrame",
    "DecodeEvent",
    "frame_encode",
    "frame_decode",
    "encode_record",
    "calibration_event",
    "StreamDecoder",
]

MODES = ("scan", "track")


@dataclass(frozen=True)
class TelemetryFrame:
    """One telemetry block; ``marker`` is set on full 300-sample blocks."""

    seq: int
    mode: str
    samples: np.ndarray          # track: (n,) v_out; scan: (n, 2) v_dac/v_adc
    marker: bool = False
    filtered: np.ndarray | None = None   # track only, same length as samples
    filter_window: int | None = None
    locked: bool | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ProtocolError(f"unknown frame mode {self.mode!r}")
        if self.seq < 0:
            raise ProtocolError("frame seq must be >= 0")
        n = self.samples.shape[0]
        if not 0 < n <= BLOCK_SAMPLES:
            raise ProtocolError(
                f"frame must carry 1..{BLOCK_SAMPLES} samples, got {n}"
            )
        want = 2 if self.mode == "scan" else 1
        if self.samples.ndim != want:
            raise ProtocolError(
                f"{self.mode} frame samples must be {want}-D, got shape"
                f" {self.samples.shape}"
            )
        if self.filtered is not None and self.filtered.shape != (n,):
            raise ProtocolError("filtered stream length must match samples")

    def __eq__(self, other):
        if not isinstance(other, TelemetryFrame):
            return NotImplemented
        if (self.seq, self.mode, self.marker, self.filter_window, self.locked) != (
            other.seq, other.mode, other.marker, other.filter_window, other.locked
        ):
            return False
        if not np.array_equal(self.samples, other.samples):
            return False
        if (self.filtered is None) != (other.filtered is None):
            return False
        return self.filtered is None or np.array_equal(self.filtered, other.filtered)


@dataclass(frozen=True)
class DecodeEvent:
    """Decoder-side notice: kind in {desync, resync, dropped, gap}."""

    kind: str
    detail: str = ""
    lost: int = 0


def frame_encode(frame: TelemetryFrame) -> bytes:
    """One JSON line; floats serialize via repr so they round-trip exactly."""
    obj: dict = {"seq": frame.seq, "mode": frame.mode}
    if frame.marker:
        obj["marker"] = BLOCK_MARKER
    obj["samples"] = frame.samples.tolist()
    if frame.filtered is not None:
        obj["filtered"] = frame.filtered.tolist()
        obj["filter_window"] = frame.filter_window
    if frame.locked is not None:
        obj["locked"] = frame.locked
    return (json.dumps(obj, separators=(",", ":")) + "\n").encode()


def _parse_frame(obj: dict) -> TelemetryFrame:
    try:
        seq = int(obj["seq"])
        mode = obj["mode"]
        samples = np.asarray(obj["samples"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"malformed frame: {exc}") from exc
    marker = obj.get("marker")
    if marker is not None and marker != BLOCK_MARKER:
        raise ProtocolError(f"bad marker {marker!r}")
    if marker == BLOCK_MARKER and samples.shape[0] != BLOCK_SAMPLES:
        raise ProtocolError("marker on a non-full block")
    filtered = obj.get("filtered")
    if filtered is not None:
        filtered = np.asarray(filtered, dtype=np.float64)
    window = obj.get("filter_window")
    return TelemetryFrame(
        seq=seq,
        mode=mode,
        samples=samples,
        marker=marker == BLOCK_MARKER,
        filtered=filtered,
        filter_window=None if window is None else int(window),
        locked=obj.get("locked"),
    )


def frame_decode(data: bytes) -> TelemetryFrame:
    """Inverse of :func:`frame_encode`; raises ProtocolError on any damage."""
    try:
        obj = json.loads(data)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"undecodable frame: {exc}") from exc
    if not isinstance(obj, dict):
        raise ProtocolError("frame is not an object")
    return _parse_frame(obj)


def encode_record(obj: dict) -> bytes:
    """Event/reply records ride the same line protocol as frames."""
    return (json.dumps(obj, separators=(",", ":")) + "\n").encode()


def calibration_event(result) -> dict:
    """Wire form of a calibration result (relock announcements)."""
    return {
        "event": "calibration",
        "v0": float(result.v0),
        "a_m": float(result.a_m),
        "k_gain": float(result.k_gain),
        "q_est": float(result.q_est),
        "delta_t_est": float(result.delta_t_est),
    }


class StreamDecoder:
    """Incremental line decoder with marker-based resynchronization.

    Feed arbitrary byte chunks; get back an ordered list of
    :class:`TelemetryFrame`, pass-through event/reply dicts, and
    :class:`DecodeEvent` notices.  After a corrupt line the decoder drops
    frames until the next full-block (marker) frame, so a partially
    transferred block can never be mistaken for aligned data.  Event and
    reply records are never dropped.
    """

    def __init__(self):
        self._buf = bytearray()
        self._synced = True
        self._last: tuple[str, int] | None = None  # (mode, seq)

    @property
    def synced(self) -> bool:
        return self._synced

    def feed(self, data: bytes) -> list:
        self._buf.extend(data)
        out: list = []
        while True:
            nl = self._buf.find(b"\n")
            if nl < 0:
                break
            line = bytes(self._buf[:nl])
            del self._buf[: nl + 1]
            if not line.strip():
                continue
            self._decode_line(line, out)
        return out

    def _decode_line(self, line: bytes, out: list) -> None:
        try:
            obj = json.loads(line)
            if not isinstance(obj, dict):
                raise ProtocolError("record is not an object")
        except (UnicodeDecodeError, json.JSONDecodeError, ProtocolError) as exc:
            if self._synced:
                self._synced = False
                out.append(DecodeEvent("desync", detail=str(exc)))
            return
        if "event" in obj or ("id" in obj and "seq" not in obj):
            out.append(obj)  # events and replies bypass frame sync
            return
        try:
            frame = _parse_frame(obj)
        except ProtocolError as exc:
            if self._synced:
                self._synced = False
                out.append(DecodeEvent("desync", detail=str(exc)))
            return
        if not self._synced:
            if not frame.marker:
                out.append(DecodeEvent("dropped", detail=f"seq {frame.seq}"))
                return
            self._synced = True
            out.append(DecodeEvent("resync", detail=f"seq {frame.seq}"))
        self._note_seq(frame, out)
        out.append(frame)

    def _note_seq(self, frame: TelemetryFrame, out: list) -> None:
        if self._last is not None:
            mode, seq = self._last
            if frame.mode == mode and frame.seq != seq + 1:
                out.append(
                    DecodeEvent(
                        "gap",
                        detail=f"seq {seq} -> {frame.seq}",
                        lost=frame.seq - seq - 1,
                    )
                )
        self._last = (frame.mode, frame.seq)
