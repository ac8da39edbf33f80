"""Synthetic B-scan generation with known ground-truth depth.

Config file grammar (one statement per line, ``#`` comments)::

    <key> = <value>
    flaw <kind> axial=<mm> rotary=<deg> length=<mm> width=<deg> depth=<mm> [pits=<n>]

``kind`` is one of ``debris``, ``crevice``, ``fbbpf``. ``axial``/``rotary``
give the primitive centre; ``length``/``width`` its full axial/rotary extent.
Recognised keys are the :class:`SynthConfig` field names (``seed`` is an
alias for ``rng_seed``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Iterator

import numpy as np

from .errors import ConfigError
from .scan import FlawKind, FlawRegion, ScanHeader, ScanVolume, write_scan_rows

#: truth region borders include every cell at least this deep
REGION_BORDER_DEPTH_MM = 0.01


@dataclass(frozen=True)
class FlawSpec:
    kind: FlawKind
    axial_mm: float
    rotary_deg: float
    length_mm: float
    width_deg: float
    depth_mm: float
    pits: int = 6

    def __post_init__(self):
        object.__setattr__(self, "kind", FlawKind(self.kind))
        if self.kind is FlawKind.UNKNOWN:
            raise ConfigError("flaw kind must be debris, crevice or fbbpf")
        if not (self.length_mm > 0 and self.width_deg > 0):
            raise ConfigError(f"flaw extent must be positive, got {self.length_mm} x {self.width_deg}")
        if not (self.depth_mm >= 0 and math.isfinite(self.depth_mm)):
            raise ConfigError(f"flaw depth must be finite and >= 0, got {self.depth_mm}")
        if self.pits < 1:
            raise ConfigError("crevice clusters need at least one pit")

    @property
    def bounds(self):
        return (
            self.axial_mm - self.length_mm / 2,
            self.axial_mm + self.length_mm / 2,
            self.rotary_deg - self.width_deg / 2,
            self.rotary_deg + self.width_deg / 2,
        )


@dataclass(frozen=True)
class SynthConfig:
    axial_count: int = 50
    rotary_count: int = 600
    samples_per_wave: int = 1000
    sample_period_ns: float = 10.0
    velocity_mm_per_us: float = 1.48
    axial_pitch_mm: float = 0.2
    rotary_pitch_deg: float = 0.1
    axial_origin_mm: float = 0.0
    rotary_origin_deg: float = 0.0
    flaws: tuple = ()
    chatter_amplitude_ns: float = 60.0
    chatter_period_deg: float = 24.0
    noise_sigma: float = 5.0
    pulse_width_ns: float = 40.0
    base_tof_ns: float = 4000.0
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "flaws", tuple(self.flaws))
        if self.noise_sigma < 0 or self.chatter_amplitude_ns < 0:
            raise ConfigError("noise_sigma and chatter_amplitude_ns must be >= 0")
        if self.chatter_period_deg <= 0 or self.pulse_width_ns <= 0:
            raise ConfigError("chatter_period_deg and pulse_width_ns must be > 0")
        if not 0 <= self.rng_seed < 2**64:
            raise ConfigError("rng_seed must be an unsigned 64-bit integer")

    @property
    def header(self) -> ScanHeader:
        try:
            return ScanHeader(
                axial_pitch_mm=self.axial_pitch_mm,
                rotary_pitch_deg=self.rotary_pitch_deg,
                samples_per_wave=self.samples_per_wave,
                sample_period_ns=self.sample_period_ns,
                velocity_mm_per_us=self.velocity_mm_per_us,
                axial_count=self.axial_count,
                rotary_count=self.rotary_count,
                axial_origin_mm=self.axial_origin_mm,
                rotary_origin_deg=self.rotary_origin_deg,
            ).validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def depth_to_tof_ns(self, depth_mm):
        return 2000.0 * np.asarray(depth_mm) / self.velocity_mm_per_us

    def chatter_ns(self, rotary_deg):
        if self.chatter_amplitude_ns == 0:
            return np.zeros_like(np.asarray(rotary_deg, dtype=float))
        return self.chatter_amplitude_ns * np.sin(2 * np.pi * np.asarray(rotary_deg) / self.chatter_period_deg)

    def check_window(self, max_depth_mm: float) -> None:
        late = self.base_tof_ns + float(self.depth_to_tof_ns(max_depth_mm)) + self.chatter_amplitude_ns
        late += 3 * self.pulse_width_ns
        early = self.base_tof_ns - self.chatter_amplitude_ns - 3 * self.pulse_width_ns
        window = (self.samples_per_wave - 1) * self.sample_period_ns
        if late > window or early < 0:
            raise ConfigError(
                f"echo span [{early:.1f}, {late:.1f}] ns does not fit the sampled window [0, {window:.1f}] ns"
            )


# --------------------------------------------------------------------------
# depth profiles


def _cosine_taper(u):
    """1 at u=0 falling smoothly to 0 at |u|=1, zero beyond."""
    u = np.abs(u)
    return np.where(u < 1.0, 0.5 * (1.0 + np.cos(np.pi * np.minimum(u, 1.0))), 0.0)


def ellipse_profile(x, theta, axial_c, rotary_c, length, width, peak):
    r = np.hypot((x - axial_c) / (length / 2), (theta - rotary_c) / (width / 2))
    return peak * _cosine_taper(r)


def elongated_profile(x, theta, axial_c, rotary_c, length, width, peak):
    """Flat-bottomed axial gouge with cosine-tapered ends and sides."""
    taper = min(2.0, length / 4)
    flat_half = length / 2 - taper
    ax = np.maximum(np.abs(x - axial_c) - flat_half, 0.0) / taper
    return peak * _cosine_taper(ax) * _cosine_taper((theta - rotary_c) / (width / 2))


def crevice_pits(spec: FlawSpec, seed: int, index: int) -> list[tuple]:
    """Deterministic pit layout of a crevice cluster: (axial_c, rotary_c, length, width, depth)."""
    rng = np.random.default_rng([seed, 1, index])
    pits = []
    for k in range(spec.pits):
        pl = min(rng.uniform(0.6, 1.2), spec.length_mm)
        pw = min(rng.uniform(0.6, 1.2), spec.width_deg)
        ac = rng.uniform(spec.axial_mm - (spec.length_mm - pl) / 2, spec.axial_mm + (spec.length_mm - pl) / 2)
        rc = rng.uniform(spec.rotary_deg - (spec.width_deg - pw) / 2, spec.rotary_deg + (spec.width_deg - pw) / 2)
        depth = spec.depth_mm if k == 0 else spec.depth_mm * rng.uniform(0.4, 1.0)
        if k == 0:
            # the deepest pit sits on the nominal centre so the peak is reached
            ac, rc = spec.axial_mm, spec.rotary_deg
        pits.append((ac, rc, pl, pw, depth))
    return pits


def primitive_depth(spec: FlawSpec, x, theta, seed: int = 0, index: int = 0):
    """Depth (mm) of a single primitive evaluated on broadcastable coordinates."""
    if spec.kind is FlawKind.DEBRIS:
        return ellipse_profile(x, theta, spec.axial_mm, spec.rotary_deg, spec.length_mm, spec.width_deg, spec.depth_mm)
    if spec.kind is FlawKind.FBBPF:
        return elongated_profile(x, theta, spec.axial_mm, spec.rotary_deg, spec.length_mm, spec.width_deg, spec.depth_mm)
    out = np.zeros(np.broadcast_shapes(np.shape(x), np.shape(theta)))
    for ac, rc, pl, pw, d in crevice_pits(spec, seed, index):
        out = np.maximum(out, ellipse_profile(x, theta, ac, rc, pl, pw, d))
    return out


def _check_inside(spec: FlawSpec, header: ScanHeader, index: int):
    a0, a1, r0, r1 = spec.bounds
    ax_hi = header.axial_origin_mm + (header.axial_count - 1) * header.axial_pitch_mm
    rot_hi = header.rotary_origin_deg + (header.rotary_count - 1) * header.rotary_pitch_deg
    eps = 1e-9
    if a0 < header.axial_origin_mm - eps or a1 > ax_hi + eps or r0 < header.rotary_origin_deg - eps or r1 > rot_hi + eps:
        raise ConfigError(
            f"flaw {index} ({spec.kind.value}) footprint [{a0:g},{a1:g}]mm x [{r0:g},{r1:g}]deg "
            f"lies outside the grid [{header.axial_origin_mm:g},{ax_hi:g}]mm x "
            f"[{header.rotary_origin_deg:g},{rot_hi:g}]deg"
        )


def build_depth_field(config: SynthConfig) -> np.ndarray:
    """Ground-truth depth grid (axial_count, rotary_count) in mm; 0 is healthy."""
    header = config.header
    x = header.axial_mm(np.arange(header.axial_count))[:, None]
    theta = header.rotary_deg(np.arange(header.rotary_count))[None, :]
    depth = np.zeros((header.axial_count, header.rotary_count))
    for k, spec in enumerate(config.flaws):
        _check_inside(spec, header, k)
        depth = np.maximum(depth, primitive_depth(spec, x, theta, config.rng_seed, k))
    return depth


def truth_regions(config: SynthConfig, field: np.ndarray | None = None) -> list[FlawRegion]:
    """One bounding box per primitive covering its cells >= 0.01 mm deep."""
    header = config.header
    x = header.axial_mm(np.arange(header.axial_count))[:, None]
    theta = header.rotary_deg(np.arange(header.rotary_count))[None, :]
    regions = []
    for k, spec in enumerate(config.flaws):
        d = primitive_depth(spec, x, theta, config.rng_seed, k)
        ii, jj = np.nonzero(d >= REGION_BORDER_DEPTH_MM)
        if ii.size == 0:
            continue
        regions.append(
            FlawRegion(
                axial_start_mm=float(header.axial_mm(ii.min())),
                axial_end_mm=float(header.axial_mm(ii.max() + 1)),
                rotary_start_deg=float(header.rotary_deg(jj.min())),
                rotary_end_deg=float(header.rotary_deg(jj.max() + 1)),
                max_depth_mm=float(d.max()),
                kind=spec.kind,
            )
        )
    return regions


# --------------------------------------------------------------------------
# waveform synthesis


def tof_grid_ns(field: np.ndarray, config: SynthConfig) -> np.ndarray:
    """Noise-free echo arrival time per cell."""
    header = config.header
    chatter = config.chatter_ns(header.rotary_deg(np.arange(header.rotary_count)))
    return config.base_tof_ns + config.depth_to_tof_ns(field) + chatter[None, :]


def iter_synth_rows(field: np.ndarray, config: SynthConfig) -> Iterator[np.ndarray]:
    """Yield uint8 waveform rows one axial index at a time."""
    header = config.header
    field = np.asarray(field, dtype=float)
    if field.shape != (header.axial_count, header.rotary_count):
        raise ConfigError(f"depth field shape {field.shape} does not match grid")
    if not np.all(np.isfinite(field)) or field.min(initial=0.0) < 0:
        raise ConfigError("depth field must be finite and >= 0")
    config.check_window(float(field.max(initial=0.0)))
    rng = np.random.default_rng(config.rng_seed)
    t = (np.arange(header.samples_per_wave) * header.sample_period_ns).astype(np.float32)
    chatter = config.chatter_ns(header.rotary_deg(np.arange(header.rotary_count)))
    inv_w = np.float32(1.0 / config.pulse_width_ns)
    for i in range(header.axial_count):
        tof = (config.base_tof_ns + config.depth_to_tof_ns(field[i]) + chatter).astype(np.float32)
        u = (t[None, :] - tof[:, None]) * inv_w
        wave = np.exp(np.float32(-0.5) * u * u)
        wave *= np.float32(255.0)
        if config.noise_sigma > 0:
            noise = rng.standard_normal(wave.shape, dtype=np.float32)
            noise *= np.float32(config.noise_sigma)
            wave += noise
        np.rint(wave, out=wave)
        np.clip(wave, 0, 255, out=wave)
        yield wave.astype(np.uint8)


def synthesize_scan(field: np.ndarray, config: SynthConfig) -> ScanVolume:
    header = config.header
    waves = np.empty((header.axial_count, header.rotary_count, header.samples_per_wave), dtype=np.uint8)
    for i, row in enumerate(iter_synth_rows(field, config)):
        waves[i] = row
    waves.flags.writeable = False
    return ScanVolume(header, waves)


def write_synth_scan(config: SynthConfig, path, field: np.ndarray | None = None) -> int:
    """Stream a synthetic scan straight to disk without materialising it."""
    if field is None:
        field = build_depth_field(config)
    with open(path, "wb") as fh:
        return write_scan_rows(config.header, iter_synth_rows(field, config), fh)


# --------------------------------------------------------------------------
# config files

_INT_KEYS = {"axial_count", "rotary_count", "samples_per_wave", "rng_seed"}
_FLAW_KEYS = {"axial": "axial_mm", "rotary": "rotary_deg", "length": "length_mm", "width": "width_deg", "depth": "depth_mm", "pits": "pits"}


def parse_synth_config(text: str) -> SynthConfig:
    known = {f.name for f in fields(SynthConfig)} - {"flaws"}
    values: dict = {}
    flaws = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            if line.startswith("flaw ") or line == "flaw":
                parts = line.split()
                if len(parts) < 2:
                    raise ValueError("flaw line needs a kind")
                kw = {}
                for item in parts[2:]:
                    key, sep, val = item.partition("=")
                    if not sep or key not in _FLAW_KEYS:
                        raise ValueError(f"bad flaw attribute {item!r}")
                    kw[_FLAW_KEYS[key]] = int(val) if key == "pits" else float(val)
                missing = set(_FLAW_KEYS.values()) - {"pits"} - set(kw)
                if missing:
                    raise ValueError(f"flaw line missing {sorted(missing)}")
                flaws.append(FlawSpec(kind=parts[1], **kw))
                continue
            key, sep, val = (s.strip() for s in line.partition("="))
            if not sep:
                raise ValueError(f"expected 'key = value', got {line!r}")
            if key == "seed":
                key = "rng_seed"
            if key not in known:
                raise ValueError(f"unknown key {key!r}")
            values[key] = int(val) if key in _INT_KEYS else float(val)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"config line {lineno}: {exc}") from None
    config = SynthConfig(flaws=tuple(flaws), **values)
    config.header  # validates geometry
    return config


def load_synth_config(path) -> SynthConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_synth_config(fh.read())


def format_synth_config(config: SynthConfig) -> str:
    lines = []
    for f in fields(SynthConfig):
        if f.name == "flaws":
            continue
        lines.append(f"{f.name} = {getattr(config, f.name)!r}")
    for s in config.flaws:
        lines.append(
            f"flaw {s.kind.value} axial={s.axial_mm!r} rotary={s.rotary_deg!r} length={s.length_mm!r} "
            f"width={s.width_deg!r} depth={s.depth_mm!r} pits={s.pits}"
        )
    return "\n".join(lines) + "\n"
