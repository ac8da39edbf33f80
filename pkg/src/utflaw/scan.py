"""Scan data model, the `.utb` binary format and the `.truth` sidecar.

Binary layout (little-endian, no padding)::

    offset size  field
    0      4     magic            b"UTB1"
    4      2     version          uint16 (currently 1)
    6      8     axial_pitch_mm   float64
    14     8     rotary_pitch_deg float64
    22     4     samples_per_wave uint32
    26     8     sample_period_ns float64
    34     8     velocity_mm_per_us float64
    42     4     axial_count      uint32
    46     4     rotary_count     uint32
    50     8     axial_origin_mm  float64
    58     8     rotary_origin_deg float64
    66     ...   payload: axial_count * rotary_count * samples_per_wave uint8,
                 row-major [axial][rotary][sample]

Sidecar: one region per line,
``kind axial_start axial_end rotary_start rotary_end max_depth``; ``#``
starts a comment.
"""

from __future__ import annotations

import io
import math
import os
import struct
from dataclasses import dataclass
from enum import Enum
from typing import BinaryIO, Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import HeaderError, ScanFormatError, ScanIOError, SidecarParseError, TruncatedScanError

MAGIC = b"UTB1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHddIddIIdd")
HEADER_SIZE = _HEADER.size

NOMINAL_AXIAL_PITCH_MM = 0.2
NOMINAL_ROTARY_PITCH_DEG = 0.1


@dataclass(frozen=True)
class ScanHeader:
    axial_pitch_mm: float = NOMINAL_AXIAL_PITCH_MM
    rotary_pitch_deg: float = NOMINAL_ROTARY_PITCH_DEG
    samples_per_wave: int = 1000
    sample_period_ns: float = 10.0
    velocity_mm_per_us: float = 1.48
    axial_count: int = 1
    rotary_count: int = 1
    axial_origin_mm: float = 0.0
    rotary_origin_deg: float = 0.0
    magic: bytes = MAGIC
    version: int = FORMAT_VERSION

    def validate(self) -> "ScanHeader":
        if self.magic != MAGIC:
            raise HeaderError("magic", f"expected {MAGIC!r}, got {self.magic!r}")
        if self.version != FORMAT_VERSION:
            raise HeaderError("version", f"unsupported version {self.version}")
        for name in ("samples_per_wave", "axial_count", "rotary_count"):
            value = getattr(self, name)
            if int(value) != value or not 1 <= value <= 0xFFFFFFFF:
                raise HeaderError(name, f"must be an integer in [1, 2**32), got {value}")
        for name in ("axial_pitch_mm", "rotary_pitch_deg", "sample_period_ns", "velocity_mm_per_us"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise HeaderError(name, f"must be finite and > 0, got {value}")
        if not math.isfinite(self.axial_origin_mm):
            raise HeaderError("axial_origin_mm", "must be finite")
        if not (math.isfinite(self.rotary_origin_deg) and 0.0 <= self.rotary_origin_deg < 360.0):
            raise HeaderError("rotary_origin_deg", f"must lie in [0, 360), got {self.rotary_origin_deg}")
        span = self.rotary_count * self.rotary_pitch_deg
        if span > 360.0 + 1e-9:
            raise HeaderError("rotary_count", f"rotary span {span:g} deg exceeds 360")
        if self.rotary_origin_deg + span > 360.0 + 1e-9:
            # wrap across 0 deg is not representable; split the scan instead
            raise HeaderError("rotary_origin_deg", "rotary range wraps past 360 deg")
        return self

    @property
    def row_bytes(self) -> int:
        return self.rotary_count * self.samples_per_wave

    @property
    def payload_bytes(self) -> int:
        return self.axial_count * self.row_bytes

    def axial_mm(self, i):
        return self.axial_origin_mm + np.asarray(i) * self.axial_pitch_mm

    def rotary_deg(self, j):
        return self.rotary_origin_deg + np.asarray(j) * self.rotary_pitch_deg

    def pack(self) -> bytes:
        return _HEADER.pack(
            self.magic,
            self.version,
            self.axial_pitch_mm,
            self.rotary_pitch_deg,
            self.samples_per_wave,
            self.sample_period_ns,
            self.velocity_mm_per_us,
            self.axial_count,
            self.rotary_count,
            self.axial_origin_mm,
            self.rotary_origin_deg,
        )

    @classmethod
    def unpack(cls, raw: bytes) -> "ScanHeader":
        if len(raw) < HEADER_SIZE:
            raise TruncatedScanError(HEADER_SIZE, len(raw), 0)
        if raw[:4] != MAGIC:
            raise ScanFormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
        (magic, version, ap, rp, spw, period, vel, na, nr, ao, ro) = _HEADER.unpack(raw[:HEADER_SIZE])
        return cls(
            axial_pitch_mm=ap,
            rotary_pitch_deg=rp,
            samples_per_wave=spw,
            sample_period_ns=period,
            velocity_mm_per_us=vel,
            axial_count=na,
            rotary_count=nr,
            axial_origin_mm=ao,
            rotary_origin_deg=ro,
            magic=magic,
            version=version,
        ).validate()


class ScanVolume:
    """An immutable B-scan: header plus a (axial, rotary, samples) uint8 grid."""

    __slots__ = ("header", "waves")

    def __init__(self, header: ScanHeader, waves: np.ndarray):
        header.validate()
        waves = np.asarray(waves)
        expected = (header.axial_count, header.rotary_count, header.samples_per_wave)
        if waves.dtype != np.uint8:
            raise ScanFormatError(f"waveforms must be uint8, got {waves.dtype}")
        if waves.shape != expected:
            raise ScanFormatError(f"waveform grid shape {waves.shape} != header {expected}")
        if waves.flags.writeable:
            waves = waves.copy()
            waves.flags.writeable = False
        object.__setattr__(self, "header", header)
        object.__setattr__(self, "waves", waves)

    def __setattr__(self, name, value):
        raise AttributeError("ScanVolume is immutable")

    def __eq__(self, other):
        if not isinstance(other, ScanVolume):
            return NotImplemented
        return self.header == other.header and np.array_equal(self.waves, other.waves)

    def __repr__(self):
        h = self.header
        return f"ScanVolume({h.axial_count}x{h.rotary_count}x{h.samples_per_wave})"

    def rows(self) -> Iterator[np.ndarray]:
        return iter(self.waves)

    def position(self, i, j):
        return self.header.axial_mm(i), self.header.rotary_deg(j)


class BufferCounter:
    """Tracks live and peak bytes of raw waveform buffers held by readers."""

    def __init__(self):
        self.current = 0
        self.peak = 0
        self.allocations = 0

    def acquire(self, nbytes):
        self.current += nbytes
        self.allocations += 1
        self.peak = max(self.peak, self.current)

    def release(self, nbytes):
        self.current -= nbytes


def write_header(header: ScanHeader, sink: BinaryIO) -> int:
    raw = header.validate().pack()
    _write_all(sink, raw, 0)
    return len(raw)


def _write_all(sink, data, already):
    try:
        n = sink.write(data)
    except OSError as exc:
        raise ScanIOError(already, exc) from exc
    if n is not None and n != len(data):
        raise ScanIOError(already + n, "short write")
    return len(data)


def write_scan_rows(header: ScanHeader, rows: Iterable[np.ndarray], sink: BinaryIO) -> int:
    """Write a header and then rows produced lazily; returns total bytes."""
    written = write_header(header, sink)
    shape = (header.rotary_count, header.samples_per_wave)
    count = 0
    for row in rows:
        row = np.ascontiguousarray(row, dtype=np.uint8)
        if row.shape != shape:
            raise ScanFormatError(f"row {count} has shape {row.shape}, expected {shape}")
        written += _write_all(sink, row.tobytes(), written)
        count += 1
    if count != header.axial_count:
        raise ScanFormatError(f"wrote {count} rows, header declares {header.axial_count}")
    return written


def write_scan(volume: ScanVolume, destination) -> int:
    """Serialize ``volume`` to a path or binary sink. Returns the byte count."""
    if isinstance(destination, (str, os.PathLike)):
        with open(destination, "wb") as fh:
            return write_scan_rows(volume.header, volume.rows(), fh)
    return write_scan_rows(volume.header, volume.rows(), destination)


def _read_exact(source, buffer: memoryview) -> int:
    got = 0
    while got < len(buffer):
        n = source.readinto(buffer[got:])
        if not n:
            break
        got += n
    return got


def read_scan_streaming(
    source,
    consumer: Callable[[int, np.ndarray], None],
    counter: BufferCounter | None = None,
) -> ScanHeader:
    """Parse the header, then hand each axial row to ``consumer(i, row)``.

    ``row`` is a read-only (rotary_count, samples_per_wave) view into a
    single reused buffer; consumers must copy anything they keep.
    """
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return read_scan_streaming(fh, consumer, counter)
    if not hasattr(source, "readinto"):
        source = io.BufferedReader(source)  # type: ignore[arg-type]
    raw = source.read(HEADER_SIZE)
    if len(raw) >= 4 and raw[:4] != MAGIC:
        raise ScanFormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    header = ScanHeader.unpack(raw)
    nbytes = header.row_bytes
    buf = bytearray(nbytes)
    if counter is not None:
        counter.acquire(nbytes)
    try:
        view = memoryview(buf)
        row = np.frombuffer(buf, dtype=np.uint8).reshape(header.rotary_count, header.samples_per_wave)
        for i in range(header.axial_count):
            got = _read_exact(source, view)
            if got < nbytes:
                raise TruncatedScanError(header.payload_bytes, i * nbytes + got, i)
            ro = row.view()
            ro.flags.writeable = False
            consumer(i, ro)
    finally:
        if counter is not None:
            counter.release(nbytes)
    return header


def iter_scan_rows(source, counter: BufferCounter | None = None):
    """Generator variant: yields the header first, then ``(i, row)`` pairs.

    Rows share one buffer just as in :func:`read_scan_streaming`.
    """
    close = False
    if isinstance(source, (str, os.PathLike)):
        source = open(source, "rb")
        close = True
    try:
        raw = source.read(HEADER_SIZE)
        if len(raw) >= 4 and raw[:4] != MAGIC:
            raise ScanFormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
        header = ScanHeader.unpack(raw)
        yield header
        nbytes = header.row_bytes
        buf = bytearray(nbytes)
        if counter is not None:
            counter.acquire(nbytes)
        try:
            view = memoryview(buf)
            row = np.frombuffer(buf, dtype=np.uint8).reshape(header.rotary_count, header.samples_per_wave)
            for i in range(header.axial_count):
                got = _read_exact(source, view)
                if got < nbytes:
                    raise TruncatedScanError(header.payload_bytes, i * nbytes + got, i)
                yield i, row
        finally:
            if counter is not None:
                counter.release(nbytes)
    finally:
        if close:
            source.close()


def read_scan(source) -> ScanVolume:
    """Whole-file reader (loads the full payload in one read)."""
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return read_scan(fh)
    raw = source.read(HEADER_SIZE)
    if len(raw) >= 4 and raw[:4] != MAGIC:
        raise ScanFormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    header = ScanHeader.unpack(raw)
    payload = source.read(header.payload_bytes)
    if len(payload) < header.payload_bytes:
        raise TruncatedScanError(header.payload_bytes, len(payload), len(payload) // header.row_bytes)
    waves = np.frombuffer(payload, dtype=np.uint8).reshape(
        header.axial_count, header.rotary_count, header.samples_per_wave
    )
    return ScanVolume(header, waves)


def read_scan_header(path) -> ScanHeader:
    with open(path, "rb") as fh:
        return ScanHeader.unpack(fh.read(HEADER_SIZE))


# --------------------------------------------------------------------------
# ground truth


class FlawKind(str, Enum):
    DEBRIS = "debris"
    CREVICE = "crevice"
    FBBPF = "fbbpf"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class FlawRegion:
    axial_start_mm: float
    axial_end_mm: float
    rotary_start_deg: float
    rotary_end_deg: float
    max_depth_mm: float
    kind: FlawKind = FlawKind.UNKNOWN

    def __post_init__(self):
        object.__setattr__(self, "kind", FlawKind(self.kind))
        vals = (self.axial_start_mm, self.axial_end_mm, self.rotary_start_deg, self.rotary_end_deg, self.max_depth_mm)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("flaw region values must be finite")
        if not self.axial_start_mm < self.axial_end_mm:
            raise ValueError(f"axial start {self.axial_start_mm} must be < end {self.axial_end_mm}")
        if not self.rotary_start_deg < self.rotary_end_deg:
            raise ValueError(f"rotary start {self.rotary_start_deg} must be < end {self.rotary_end_deg}")
        if self.max_depth_mm < 0:
            raise ValueError(f"max depth must be >= 0, got {self.max_depth_mm}")

    def intersects(self, axial_lo, axial_hi, rotary_lo, rotary_hi) -> bool:
        """Closed-interval rectangle intersection."""
        return (
            axial_lo <= self.axial_end_mm
            and self.axial_start_mm <= axial_hi
            and rotary_lo <= self.rotary_end_deg
            and self.rotary_start_deg <= rotary_hi
        )


def parse_truth_sidecar(text: str) -> list[FlawRegion]:
    regions = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 6:
            raise SidecarParseError(lineno, f"expected 6 fields, got {len(parts)}")
        try:
            kind = FlawKind(parts[0])
        except ValueError:
            raise SidecarParseError(lineno, f"unknown flaw kind {parts[0]!r}") from None
        try:
            nums = [float(p) for p in parts[1:]]
        except ValueError as exc:
            raise SidecarParseError(lineno, str(exc)) from None
        try:
            regions.append(FlawRegion(*nums[:4], max_depth_mm=nums[4], kind=kind))
        except ValueError as exc:
            raise SidecarParseError(lineno, str(exc)) from None
    return regions


def read_truth_sidecar(source) -> list[FlawRegion]:
    """Parse a `.truth` sidecar from a path, text stream or string contents."""
    if isinstance(source, os.PathLike) or (isinstance(source, str) and os.path.exists(source) and "\n" not in source):
        with open(source, encoding="utf-8") as fh:
            return parse_truth_sidecar(fh.read())
    if hasattr(source, "read"):
        return parse_truth_sidecar(source.read())
    return parse_truth_sidecar(source)


def format_truth_sidecar(regions: Sequence[FlawRegion]) -> str:
    lines = ["# kind axial_start_mm axial_end_mm rotary_start_deg rotary_end_deg max_depth_mm"]
    for r in regions:
        lines.append(
            f"{r.kind.value} {r.axial_start_mm:.4f} {r.axial_end_mm:.4f} "
            f"{r.rotary_start_deg:.4f} {r.rotary_end_deg:.4f} {r.max_depth_mm:.4f}"
        )
    return "\n".join(lines) + "\n"


def write_truth_sidecar(regions: Sequence[FlawRegion], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_truth_sidecar(regions))
