"""Plant configuration: dataclasses, validation, profiles, and JSON I/O.

A plant config document is JSON with optional sections
``resonator / vco / detector / quantizer / stimulus / emi`` plus top-level
``seed`` and ``sample_rate_hz``; every field falls back to the defaults in
:mod:`resotrack.constants`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace, asdict
from typing import Sequence

import numpy as np

from . import constants as C
from .errors import ConfigError

_SEGMENT_KINDS = ("hold", "step", "ramp", "pulse_train", "sine")
_PERIODIC_KINDS = ("pulse_train", "sine")
_DOMAINS = ("permittivity", "frequency")


@dataclass(frozen=True)
class ResonatorConfig:
    f_r0: float = C.F_R0_HZ
    q_factor: float = C.Q_IDEAL
    delta_t: float = C.DELTA_T
    baseline: float = C.BASELINE
    sensitivity: float = C.SENSITIVITY_HZ_PER_EPS  # Hz per unit permittivity
    area: float = C.AREA_M2

    def validate(self):
        if not (self.f_r0 > 0):
            raise ConfigError(f"f_r0 must be positive, got {self.f_r0}")
        if not (self.q_factor > 0):
            raise ConfigError(f"q_factor must be positive, got {self.q_factor}")
        if not (self.area > 0):
            raise ConfigError(f"area must be positive, got {self.area}")
        if not (0.0 < self.delta_t <= self.baseline <= 1.0):
            raise ConfigError(
                f"need 0 < delta_t <= baseline <= 1, got delta_t={self.delta_t} "
                f"baseline={self.baseline}"
            )


@dataclass(frozen=True)
class VcoConfig:
    tuning: tuple = C.TUNING_COEFFS      # polynomial volts -> Hz, low order first
    v_range: tuple = C.VCO_RANGE_V
    jitter_std: float = 0.0              # Hz, per-sample frequency jitter

    def validate(self):
        if len(self.tuning) < 1 or len(self.tuning) > 4:
            raise ConfigError("tuning polynomial degree must be <= 3")
        v_lo, v_hi = self.v_range
        if not (v_lo < v_hi):
            raise ConfigError(f"v_range must satisfy v_min < v_max, got {self.v_range}")
        if self.jitter_std < 0:
            raise ConfigError("jitter_std must be >= 0")
        # monotonicity is checked numerically: strictly increasing on a dense grid
        grid = np.linspace(v_lo, v_hi, 1025)
        f = np.polyval(self.tuning[::-1], grid)
        if not np.all(np.diff(f) > 0):
            raise ConfigError("tuning curve must be strictly increasing on v_range")


@dataclass(frozen=True)
class DetectorConfig:
    gain: float = C.DETECTOR_GAIN        # volts per unit transmittance
    offset: float = 0.0
    noise_std: float = 0.0               # volts, Gaussian, at the ADC input
    nonlinearity: float = 0.0            # volts per unit^2 transmittance

    def validate(self, full_scale: float):
        if not (self.gain > 0):
            raise ConfigError(f"detector gain must be positive, got {self.gain}")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        # noiseless output must stay inside the ADC range over T in [0, 1]
        t = np.linspace(0.0, 1.0, 257)
        v = self.gain * t + self.offset + self.nonlinearity * t * t
        if v.min() < 0.0 or v.max() > full_scale:
            raise ConfigError(
                "detector output leaves the ADC range for transmittance in [0, 1]: "
                f"[{v.min():.4f}, {v.max():.4f}] V vs full scale {full_scale} V"
            )


@dataclass(frozen=True)
class QuantizerConfig:
    bits: int = C.ADC_BITS
    full_scale: float = C.FULL_SCALE_V

    @property
    def lsb(self) -> float:
        return self.full_scale / (1 << self.bits)

    def validate(self):
        if not (1 <= int(self.bits) <= 24):
            raise ConfigError(f"bits must be in [1, 24], got {self.bits}")
        if not (self.full_scale > 0):
            raise ConfigError("full_scale must be positive")


@dataclass(frozen=True)
class StimulusSegment:
    kind: str
    start: float          # seconds
    duration: float       # seconds
    magnitude: float      # permittivity units or Hz, per program domain
    period: float = 0.0   # seconds, for pulse_train / sine

    def validate(self):
        if self.kind not in _SEGMENT_KINDS:
            raise ConfigError(f"unknown segment kind {self.kind!r}")
        if self.start < 0:
            raise ConfigError("segment start must be >= 0")
        if not (self.duration > 0):
            raise ConfigError("segment duration must be positive")
        if self.kind in _PERIODIC_KINDS and not (self.period > 0):
            raise ConfigError(f"{self.kind} segment needs a positive period")

    @property
    def end(self) -> float:
        return self.start + self.duration


@dataclass(frozen=True)
class StimulusProgram:
    """Piecewise drive program; gaps between segments hold the last value."""

    segments: tuple = ()
    domain: str = "permittivity"

    def validate(self):
        if self.domain not in _DOMAINS:
            raise ConfigError(f"unknown stimulus domain {self.domain!r}")
        prev_end = -math.inf
        for seg in self.segments:
            seg.validate()
            if seg.start < prev_end:
                raise ConfigError(
                    f"segments overlap or are out of order near t={seg.start}"
                )
            prev_end = seg.end

    # -- evaluation ------------------------------------------------------
    def _end_value(self, seg: StimulusSegment, prev: float) -> float:
        # value held after the segment: its limit from the left at seg.end
        if seg.kind in ("hold", "step", "ramp"):
            return seg.magnitude
        if seg.kind == "sine":
            return seg.magnitude * math.sin(2.0 * math.pi * seg.duration / seg.period)
        frac = math.fmod(seg.duration, seg.period)
        return seg.magnitude if 0.0 < frac <= seg.period / 2.0 else 0.0

    def values(self, t: np.ndarray) -> np.ndarray:
        """Program value at each time (seconds); 0 before the first segment."""
        t = np.asarray(t, dtype=np.float64)
        out = np.zeros_like(t)
        prev = 0.0
        for seg in self.segments:
            after = t >= seg.start
            out[after] = self._end_value(seg, prev)  # later segments overwrite
            inside = after & (t < seg.end)
            if np.any(inside):
                tt = t[inside] - seg.start
                if seg.kind in ("hold", "step"):
                    out[inside] = seg.magnitude
                elif seg.kind == "ramp":
                    out[inside] = prev + (seg.magnitude - prev) * tt / seg.duration
                elif seg.kind == "sine":
                    out[inside] = seg.magnitude * np.sin(
                        2.0 * np.pi * tt / seg.period
                    )
                else:  # pulse_train
                    frac = np.mod(tt, seg.period)
                    out[inside] = np.where(
                        frac < seg.period / 2.0, seg.magnitude, 0.0
                    )
            prev = self._end_value(seg, prev)
        return out

    def value(self, t: float) -> float:
        return float(self.values(np.array([t]))[0])


@dataclass(frozen=True)
class EmiConfig:
    enabled: bool = False
    amplitude: float = 0.0   # volts added at the ADC input
    frequency: float = 0.0   # Hz of the interference as seen in the sampled stream
    phase: float = 0.0       # radians

    def validate(self):
        if self.amplitude < 0:
            raise ConfigError("EMI amplitude must be >= 0")


@dataclass(frozen=True)
class PlantConfig:
    resonator: ResonatorConfig = field(default_factory=ResonatorConfig)
    vco: VcoConfig = field(default_factory=VcoConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    stimulus: StimulusProgram = field(default_factory=StimulusProgram)
    emi: EmiConfig = field(default_factory=EmiConfig)
    seed: int = 0
    sample_rate_hz: float = C.SAMPLE_RATE_HZ   # wall-clock per ADC conversion

    def validate(self) -> "PlantConfig":
        self.resonator.validate()
        self.vco.validate()
        self.quantizer.validate()
        self.detector.validate(self.quantizer.full_scale)
        self.stimulus.validate()
        self.emi.validate()
        if not (self.sample_rate_hz > 0):
            raise ConfigError("sample_rate_hz must be positive")
        return self

    # -- profiles --------------------------------------------------------
    @classmethod
    def ideal(cls, **overrides) -> "PlantConfig":
        """Simulated-resonator profile: Q = 103.2, noiseless, 12-bit."""
        return cls(**overrides)

    @classmethod
    def hardware(cls, **overrides) -> "PlantConfig":
        """On-board profile: the broad measured dip (Q = 18.5)."""
        cfg = cls(resonator=ResonatorConfig(q_factor=C.Q_HARDWARE))
        return replace(cfg, **overrides)

    @classmethod
    def analytic(cls, **overrides) -> "PlantConfig":
        """Quantization-free, noiseless profile for linear-theory checks.

        24-bit codes make DAC/ADC staircases negligible against every
        tolerance used here, so the loop behaves like the continuous model.
        """
        cfg = cls(quantizer=QuantizerConfig(bits=C.ADC_BITS_ANALYTIC))
        return replace(cfg, **overrides)

    def with_thermal_snr(self, snr_db: float = C.THERMAL_SNR_DB) -> "PlantConfig":
        """Set detector noise so a still stream at the dip measures ``snr_db``."""
        t_dip = self.resonator.baseline - self.resonator.delta_t
        mean_v = (
            self.detector.gain * t_dip
            + self.detector.offset
            + self.detector.nonlinearity * t_dip * t_dip
        )
        std = C.thermal_noise_std(snr_db, mean_v, self.quantizer.lsb)
        return replace(self, detector=replace(self.detector, noise_std=std))

    # -- serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d["vco"]["tuning"] = list(self.vco.tuning)
        d["vco"]["v_range"] = list(self.vco.v_range)
        d["stimulus"]["segments"] = [asdict(s) for s in self.stimulus.segments]
        return d

    def dump_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _build(cls, data: dict, section: str, **extra):
    allowed = set(cls.__dataclass_fields__)
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown field(s) in {section!r}: {sorted(unknown)}")
    return cls(**{**data, **extra})


def config_from_dict(doc: dict) -> PlantConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    allowed = {
        "resonator", "vco", "detector", "quantizer", "stimulus", "emi",
        "seed", "sample_rate_hz",
    }
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")

    def section(name):
        value = doc.get(name, {})
        if not isinstance(value, dict):
            raise ConfigError(f"section {name!r} must be an object")
        return dict(value)

    vco_raw = section("vco")
    if "tuning" in vco_raw:
        vco_raw["tuning"] = tuple(vco_raw["tuning"])
    if "v_range" in vco_raw:
        vco_raw["v_range"] = tuple(vco_raw["v_range"])

    stim_raw = section("stimulus")
    segments = []
    for i, seg in enumerate(stim_raw.pop("segments", [])):
        if not isinstance(seg, dict):
            raise ConfigError(f"stimulus segment {i} must be an object")
        segments.append(_build(StimulusSegment, seg, f"stimulus.segments[{i}]"))
    stim_raw["segments"] = tuple(segments)

    cfg = PlantConfig(
        resonator=_build(ResonatorConfig, section("resonator"), "resonator"),
        vco=_build(VcoConfig, vco_raw, "vco"),
        detector=_build(DetectorConfig, section("detector"), "detector"),
        quantizer=_build(QuantizerConfig, section("quantizer"), "quantizer"),
        stimulus=_build(StimulusProgram, stim_raw, "stimulus"),
        emi=_build(EmiConfig, section("emi"), "emi"),
        seed=int(doc.get("seed", 0)),
        sample_rate_hz=float(doc.get("sample_rate_hz", C.SAMPLE_RATE_HZ)),
    )
    return cfg.validate()


def load_config(path) -> PlantConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(doc)
