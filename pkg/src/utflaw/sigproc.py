"""Peak timing, TOF-to-depth measurement, truncation and bundling."""

from __future__ import annotations

import logging
import math
import os
import struct
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .errors import IncompatibleInputError, MeasurementError, ScanFormatError
from .pnm import encode_pgm
from .scan import NOMINAL_AXIAL_PITCH_MM, NOMINAL_ROTARY_PITCH_DEG, ScanHeader, ScanVolume

logger = logging.getLogger(__name__)

WINDOW = 100
BUNDLE_AXIAL = 5
BUNDLE_ROTARY = 20
BUNDLE_SHAPE = (WINDOW, BUNDLE_ROTARY, BUNDLE_AXIAL)


@dataclass(frozen=True)
class PeakEstimate:
    index: int
    refined_tof_ns: float
    amplitude: float
    valid: bool = True


def detect_peaks(waves, sample_period_ns: float):
    """Vectorised peak detection over the last axis.

    Returns ``(index, refined_tof_ns, amplitude, valid)`` arrays shaped like
    ``waves.shape[:-1]``. Ties resolve to the earliest sample; refinement is
    3-point parabolic except at the array edges.
    """
    w = np.asarray(waves)
    n = w.shape[-1]
    if n == 0:
        raise ValueError("empty waveform")
    idx = np.argmax(w, axis=-1)
    peak = np.take_along_axis(w, idx[..., None], axis=-1)[..., 0].astype(np.float64)
    valid = peak > 0
    interior = (idx > 0) & (idx < n - 1)
    lo = np.take_along_axis(w, np.clip(idx - 1, 0, n - 1)[..., None], axis=-1)[..., 0].astype(np.float64)
    hi = np.take_along_axis(w, np.clip(idx + 1, 0, n - 1)[..., None], axis=-1)[..., 0].astype(np.float64)
    denom = lo - 2.0 * peak + hi
    ok = interior & (denom != 0)
    safe = np.where(ok, denom, 1.0)
    delta = np.where(ok, 0.5 * (lo - hi) / safe, 0.0)
    amplitude = np.where(ok, peak - 0.25 * (lo - hi) * delta, peak)
    refined = (idx + delta) * sample_period_ns
    idx = np.where(valid, idx, 0)
    refined = np.where(valid, refined, 0.0)
    amplitude = np.where(valid, amplitude, 0.0)
    return idx, refined, amplitude, valid


def detect_peak(wave, sample_period_ns: float = 10.0) -> PeakEstimate:
    wave = np.asarray(wave)
    if wave.ndim != 1 or wave.size == 0:
        raise ValueError("detect_peak expects a non-empty 1-D waveform")
    idx, tof, amp, valid = detect_peaks(wave, sample_period_ns)
    return PeakEstimate(int(idx), float(tof), float(amp), bool(valid))


def tof_to_depth_mm(delta_tof_ns, velocity_mm_per_us: float):
    """Pulse-echo conversion: half the round-trip delay times velocity."""
    return 0.5 * np.asarray(delta_tof_ns) * velocity_mm_per_us / 1000.0


def depth_to_tof_ns(depth_mm, velocity_mm_per_us: float):
    return 2000.0 * np.asarray(depth_mm) / velocity_mm_per_us


def _require_valid(*peaks):
    for p in peaks:
        if not p.valid:
            raise MeasurementError("cannot measure depth from a waveform without an echo")


def depth_single_ref(target: PeakEstimate, reference: PeakEstimate, header: ScanHeader) -> float:
    """Signed depth of ``target`` below ``reference`` (negative = shallower)."""
    _require_valid(target, reference)
    return float(tof_to_depth_mm(target.refined_tof_ns - reference.refined_tof_ns, header.velocity_mm_per_us))


def depth_two_ref(
    target: PeakEstimate,
    ref_before: PeakEstimate,
    ref_after: PeakEstimate,
    a: float,
    b: float,
    t: float,
    header: ScanHeader,
) -> float:
    """Depth against a reference TOF interpolated linearly between positions a < t < b.

    The positions may be along either scan axis; only their ratios matter.
    """
    _require_valid(target, ref_before, ref_after)
    if not a < t < b:
        raise MeasurementError(f"target position {t} must lie strictly between {a} and {b}")
    frac = (t - a) / (b - a)
    ref = ref_before.refined_tof_ns + frac * (ref_after.refined_tof_ns - ref_before.refined_tof_ns)
    return float(tof_to_depth_mm(target.refined_tof_ns - ref, header.velocity_mm_per_us))


def healthy_reference_tof(tof_ns, valid=None, exclude_rows=None, quantile: float = 0.1):
    """Per-rotary-position healthy surface TOF from a (axial, rotary) TOF map.

    Flaws only delay the echo and chatter depends on rotary position alone,
    so a low quantile down each rotary column tracks the undamaged surface.
    ``exclude_rows`` is an optional boolean mask of cells to ignore (e.g.
    suspected flaws). Contamination can only raise the estimate, so the
    lower of the masked and unmasked quantiles is returned; columns with
    nothing left after masking use the unmasked value.
    """
    tof = np.asarray(tof_ns, dtype=float)
    mask = np.ones(tof.shape, bool) if valid is None else np.asarray(valid, bool)

    def column_quantile(usable):
        # linear-interpolated quantile of each column's usable cells (NaN if none)
        data = np.sort(np.where(usable, tof, np.inf), axis=0)
        n = usable.sum(axis=0)
        pos = np.maximum(n - 1, 0) * quantile
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, np.maximum(n - 1, 0))
        cols = np.arange(tof.shape[1])
        if not tof.shape[0]:
            return np.full(tof.shape[1], np.nan)
        a, b = data[lo, cols], data[hi, cols]
        with np.errstate(invalid="ignore"):
            out = a + (b - a) * (pos - lo)
        return np.where(n > 0, out, np.nan)

    ref = column_quantile(mask)
    if exclude_rows is not None:
        ref = np.fmin(ref, column_quantile(mask & ~np.asarray(exclude_rows, bool)))
    return ref


def measure_depth_map(tof_ns, header: ScanHeader, valid=None, reference=None):
    """Signed per-waveform depth (mm) relative to ``reference`` (defaults to the healthy baseline)."""
    if reference is None:
        reference = healthy_reference_tof(tof_ns, valid)
    depth = tof_to_depth_mm(np.asarray(tof_ns) - np.asarray(reference)[None, :], header.velocity_mm_per_us)
    if valid is not None:
        depth = np.where(valid, depth, np.nan)
    return depth


# --------------------------------------------------------------------------
# truncation


def truncate_wave(wave, peak: PeakEstimate | None = None, anchor: int | None = None, width: int = WINDOW):
    """Fixed-width window starting ``width // 2`` samples before ``anchor``.

    With no anchor, the window centres on ``peak``. Out-of-range samples are
    zero-filled.
    """
    if anchor is None:
        if peak is None or not peak.valid:
            raise MeasurementError("truncation needs an anchor or a valid peak")
        anchor = peak.index
    return truncate_rows(np.asarray(wave)[None, :], anchor, width)[0]


def truncate_rows(waves, anchor: int, width: int = WINDOW) -> np.ndarray:
    """Vectorised truncation of waveforms along the last axis."""
    waves = np.asarray(waves)
    n = waves.shape[-1]
    start = int(anchor) - width // 2
    stop = start + width
    if start >= 0 and stop <= n:
        return waves[..., start:stop]
    out = np.zeros(waves.shape[:-1] + (width,), dtype=waves.dtype)
    s0, s1 = max(start, 0), min(stop, n)
    if s1 > s0:
        out[..., s0 - start : s1 - start] = waves[..., s0:s1]
    return out


def first_row_anchor(row, sample_period_ns: float = 1.0) -> int:
    """Median peak index over one axial row (integer, truncated toward zero)."""
    idx, _, _, valid = detect_peaks(row, sample_period_ns)
    if not np.any(valid):
        raise MeasurementError("anchor row has no echoes")
    return int(np.median(idx[valid]))


# --------------------------------------------------------------------------
# bundling


@dataclass(frozen=True)
class BundleTensor:
    """One (time, rotary, axial-channel) classifier input at 1 mm / 2 deg."""

    raw: np.ndarray  # uint8 counts, shape BUNDLE_SHAPE
    grid_coords: tuple

    @property
    def values(self) -> np.ndarray:
        return self.raw.astype(np.float64) / 255.0

    def footprint(self, header: ScanHeader):
        return bundle_footprint(header, *self.grid_coords)


def check_bundle_pitches(header: ScanHeader) -> None:
    if not (
        math.isclose(header.axial_pitch_mm, NOMINAL_AXIAL_PITCH_MM, rel_tol=1e-9)
        and math.isclose(header.rotary_pitch_deg, NOMINAL_ROTARY_PITCH_DEG, rel_tol=1e-9)
    ):
        raise IncompatibleInputError(
            f"bundling needs {NOMINAL_AXIAL_PITCH_MM} mm / {NOMINAL_ROTARY_PITCH_DEG} deg pitches, "
            f"scan has {header.axial_pitch_mm} mm / {header.rotary_pitch_deg} deg"
        )


def bundle_grid_shape(header: ScanHeader) -> tuple:
    return header.axial_count // BUNDLE_AXIAL, header.rotary_count // BUNDLE_ROTARY


def dropped_waveforms(header: ScanHeader) -> int:
    na, nr = bundle_grid_shape(header)
    return header.axial_count * header.rotary_count - na * BUNDLE_AXIAL * nr * BUNDLE_ROTARY


def bundle_footprint(header: ScanHeader, bi, bj):
    """Half-open footprint ``(axial_lo, axial_hi, rotary_lo, rotary_hi)`` of bundle (bi, bj)."""
    a0 = header.axial_origin_mm + BUNDLE_AXIAL * np.asarray(bi) * header.axial_pitch_mm
    r0 = header.rotary_origin_deg + BUNDLE_ROTARY * np.asarray(bj) * header.rotary_pitch_deg
    return (
        a0,
        a0 + BUNDLE_AXIAL * header.axial_pitch_mm,
        r0,
        r0 + BUNDLE_ROTARY * header.rotary_pitch_deg,
    )


def bundle_index(header: ScanHeader, axial_mm, rotary_deg):
    """Inverse of :func:`bundle_footprint` for interior coordinates."""
    bi = np.floor((np.asarray(axial_mm) - header.axial_origin_mm) / (BUNDLE_AXIAL * header.axial_pitch_mm) + 1e-9)
    bj = np.floor((np.asarray(rotary_deg) - header.rotary_origin_deg) / (BUNDLE_ROTARY * header.rotary_pitch_deg) + 1e-9)
    return bi.astype(int), bj.astype(int)


class BundleAssembler:
    """Incremental row consumer: measures peaks and emits one bundle row per 5 axial rows.

    Keeps the per-waveform TOF map (a few bytes per waveform) and at most
    ``BUNDLE_AXIAL`` truncated rows; raw rows are never retained.
    """

    def __init__(self, header: ScanHeader, anchor: int | None = None, width: int = WINDOW):
        check_bundle_pitches(header)
        self.header = header
        self.width = width
        self.anchor = anchor
        self.n_bundle_rows, self.n_bundle_cols = bundle_grid_shape(header)
        self.tof_ns = np.zeros((header.axial_count, header.rotary_count))
        self.valid = np.zeros((header.axial_count, header.rotary_count), bool)
        self._acc = np.zeros((BUNDLE_AXIAL, header.rotary_count, width), dtype=np.uint8)
        self._next = 0
        self.dropped = dropped_waveforms(header)
        if self.dropped:
            logger.warning("dropping %d waveforms outside whole bundles", self.dropped)

    def push(self, i: int, row: np.ndarray):
        """Consume axial row ``i``; returns ``(bi, raw)`` when a bundle row completes, else None.

        ``raw`` has shape ``(n_bundle_cols,) + BUNDLE_SHAPE`` (uint8).
        """
        if i != self._next:
            raise ScanFormatError(f"rows must arrive in order: expected {self._next}, got {i}")
        self._next += 1
        h = self.header
        idx, tof, _, valid = detect_peaks(row, h.sample_period_ns)
        self.tof_ns[i] = tof
        self.valid[i] = valid
        if self.anchor is None:
            self.anchor = int(np.median(idx[valid])) if valid.any() else h.samples_per_wave // 2
        bi, c = divmod(i, BUNDLE_AXIAL)
        if bi >= self.n_bundle_rows:
            return None
        self._acc[c] = truncate_rows(row, self.anchor, self.width)
        if c < BUNDLE_AXIAL - 1 or self.n_bundle_cols == 0:
            return None
        nc = self.n_bundle_cols
        block = self._acc[:, : nc * BUNDLE_ROTARY, :].reshape(BUNDLE_AXIAL, nc, BUNDLE_ROTARY, self.width)
        return bi, np.ascontiguousarray(block.transpose(1, 3, 2, 0))


def iter_bundle_rows(volume: ScanVolume, anchor: int | None = None) -> Iterator[tuple]:
    asm = BundleAssembler(volume.header, anchor)
    for i, row in enumerate(volume.rows()):
        out = asm.push(i, row)
        if out is not None:
            yield out


def bundle(volume: ScanVolume, anchor: int | None = None) -> list[BundleTensor]:
    """Tile a scan into non-overlapping 5 x 20 bundles (partial edges dropped)."""
    out = []
    for bi, raw in iter_bundle_rows(volume, anchor):
        for bj in range(raw.shape[0]):
            out.append(BundleTensor(raw[bj], (bi, bj)))
    return out


def bundle_array(volume: ScanVolume, anchor: int | None = None):
    """Bundles as one uint8 array ``(n,) + BUNDLE_SHAPE`` plus (n, 2) grid coordinates."""
    chunks, coords = [], []
    for bi, raw in iter_bundle_rows(volume, anchor):
        chunks.append(raw)
        coords.extend((bi, bj) for bj in range(raw.shape[0]))
    if not chunks:
        return np.zeros((0,) + BUNDLE_SHAPE, np.uint8), np.zeros((0, 2), int)
    return np.concatenate(chunks), np.asarray(coords, dtype=int)


# --------------------------------------------------------------------------
# rendering and bundle streams


def render_grayscale(data) -> bytes:
    """PGM with one column per waveform and one row per time sample.

    Accepts a (time, waveform) window or a (time, rotary, channel) bundle;
    bundle channels are laid side by side.
    """
    if isinstance(data, BundleTensor):
        data = data.values
    arr = np.asarray(data, dtype=float)
    if arr.ndim == 3:
        arr = arr.transpose(0, 2, 1).reshape(arr.shape[0], -1)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D window or 3-D bundle, got shape {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() > 1):
        raise ValueError("grayscale input must lie in [0, 1]")
    return encode_pgm(np.rint(arr * 255.0).astype(np.uint8))


_BS_MAGIC = b"UTBS"
_BS_HEADER = struct.Struct("<4sHiHHHI")
_BS_RECORD = struct.Struct("<II")
_UNKNOWN_COUNT = 0xFFFFFFFF


def write_bundle_stream(sink, bundles: Iterable[BundleTensor], anchor: int = -1) -> int:
    """Write bundles to ``sink`` (path or binary file). Returns the record count.

    Layout: ``"UTBS"``, u16 version=1, i32 anchor, u16 window, u16 rotary,
    u16 channels, u32 count (``0xFFFFFFFF`` if the sink is not seekable);
    then per bundle u32 bi, u32 bj and window*rotary*channels uint8 values
    in (time, rotary, channel) C order.
    """
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "wb") as fh:
            return write_bundle_stream(fh, bundles, anchor)
    start = sink.tell() if sink.seekable() else None
    sink.write(_BS_HEADER.pack(_BS_MAGIC, 1, anchor, *BUNDLE_SHAPE, _UNKNOWN_COUNT))
    count = 0
    for b in bundles:
        raw = np.ascontiguousarray(b.raw, dtype=np.uint8)
        if raw.shape != BUNDLE_SHAPE:
            raise ValueError(f"bundle shape {raw.shape} != {BUNDLE_SHAPE}")
        sink.write(_BS_RECORD.pack(*b.grid_coords))
        sink.write(raw.tobytes())
        count += 1
    if start is not None:
        end = sink.tell()
        sink.seek(start)
        sink.write(_BS_HEADER.pack(_BS_MAGIC, 1, anchor, *BUNDLE_SHAPE, count))
        sink.seek(end)
    return count


def read_bundle_stream(source) -> tuple[int, list[BundleTensor]]:
    """Returns ``(anchor, bundles)``."""
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return read_bundle_stream(fh)
    head = source.read(_BS_HEADER.size)
    if len(head) < _BS_HEADER.size or head[:4] != _BS_MAGIC:
        raise ScanFormatError("not a bundle stream")
    _, version, anchor, t, r, c, count = _BS_HEADER.unpack(head)
    if version != 1 or (t, r, c) != BUNDLE_SHAPE:
        raise ScanFormatError(f"unsupported bundle stream version {version} / shape {(t, r, c)}")
    size = t * r * c
    out = []
    while True:
        rec = source.read(_BS_RECORD.size)
        if not rec:
            break
        payload = source.read(size)
        if len(rec) < _BS_RECORD.size or len(payload) < size:
            raise ScanFormatError("truncated bundle record")
        coords = _BS_RECORD.unpack(rec)
        out.append(BundleTensor(np.frombuffer(payload, np.uint8).reshape(BUNDLE_SHAPE), coords))
    if count != _UNKNOWN_COUNT and count != len(out):
        raise ScanFormatError(f"bundle stream declares {count} records, found {len(out)}")
    return anchor, out


class BundleExtractor(TransformerMixin, BaseEstimator):
    """Scan -> bundle-array transformer with an estimator-style interface.

    ``fit`` fixes the truncation anchor (median peak index of the first
    axial row unless ``anchor`` is given); ``transform`` returns the float
    array ``(n, 100, 20, 5)`` in [0, 1] and records ``grid_coords_``.
    """

    def __init__(self, anchor=None):
        self.anchor = anchor

    def fit(self, volume: ScanVolume, y=None):
        check_bundle_pitches(volume.header)
        if self.anchor is None:
            self.anchor_ = first_row_anchor(volume.waves[0], volume.header.sample_period_ns)
        else:
            self.anchor_ = int(self.anchor)
        return self

    def transform(self, volume: ScanVolume) -> np.ndarray:
        if not hasattr(self, "anchor_"):
            raise NotFittedError("BundleExtractor is not fitted; call fit first")
        raw, coords = bundle_array(volume, self.anchor_)
        self.grid_coords_ = coords
        self.dropped_waveforms_ = dropped_waveforms(volume.header)
        return raw.astype(np.float64) / 255.0

