"""Depth re-measurement filter for CNN-positive bundles."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator

from .errors import ConfigError, IncompatibleInputError
from .scan import ScanHeader, ScanVolume
from .sigproc import BUNDLE_AXIAL, BUNDLE_ROTARY, bundle_grid_shape, detect_peaks, healthy_reference_tof, tof_to_depth_mm

logger = logging.getLogger(__name__)

POLICIES = ("in_bundle_channel_mean", "neighbor_healthy_row")
DEFAULT_POLICY = "neighbor_healthy_row"
# absorbs float round-off in the TOF -> depth round trip
_EPS_MM = 1e-9


@dataclass(frozen=True)
class PostProcConfig:
    """``threshold_mm`` in (0, 0.1]; ``ref_policy`` picks the healthy reference.

    ``in_bundle_channel_mean``: each axial channel's mean TOF over its 20
    waveforms. ``neighbor_healthy_row``: per rotary position, a low
    ``quantile`` of the TOFs of rows outside CNN-positive bundles.
    """

    threshold_mm: float = 0.09
    ref_policy: str = DEFAULT_POLICY
    quantile: float = 0.1

    def __post_init__(self):
        if not (0 < self.threshold_mm <= 0.1):
            raise ConfigError(f"threshold_mm must lie in (0, 0.1], got {self.threshold_mm}")
        if self.ref_policy not in POLICIES:
            raise ConfigError(f"ref_policy must be one of {POLICIES}, got {self.ref_policy!r}")
        if not 0 <= self.quantile <= 1:
            raise ConfigError("quantile must lie in [0, 1]")


@dataclass(frozen=True)
class DepthReportRow:
    grid_coords: tuple
    decision: str  # retained | rejected | retained_invalid | negative
    max_depth_mm: float


@dataclass
class PostProcResult:
    detections: list  # same order as the input; rejected positives demoted to class 0
    report: list

    @property
    def retained(self):
        return [d for d in self.detections if d.cls == 1]


def _tof_source(source):
    """Normalise a ScanVolume / ScanInspection / (tof, valid, header) triple."""
    if isinstance(source, ScanVolume):
        _, tof, _, valid = detect_peaks(source.waves, source.header.sample_period_ns)
        return tof, valid, source.header
    if hasattr(source, "tof_ns"):
        return source.tof_ns, source.valid, source.header
    tof, valid, header = source
    return np.asarray(tof), np.asarray(valid, bool), header


def bundle_depth_estimates(tof, valid, header: ScanHeader, positives, config: PostProcConfig):
    """Max per-waveform estimated depth for each positive bundle; NaN-aware.

    Returns ``(max_depths, has_invalid)`` arrays aligned with ``positives``.
    """
    v = header.velocity_mm_per_us
    nbr, nbc = bundle_grid_shape(header)
    if not positives:
        return np.full(0, np.nan), np.zeros(0, bool)

    def blocks(a):
        return a[: nbr * BUNDLE_AXIAL, : nbc * BUNDLE_ROTARY].reshape(nbr, BUNDLE_AXIAL, nbc, BUNDLE_ROTARY)

    t = blocks(np.where(valid, tof, np.nan))
    with np.errstate(all="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN slices give NaN
        if config.ref_policy == "in_bundle_channel_mean":
            ref = np.nanmean(t, axis=3, keepdims=True)
        else:
            suspect = np.zeros(tof.shape, bool)
            for bi, bj in positives:
                suspect[bi * BUNDLE_AXIAL : (bi + 1) * BUNDLE_AXIAL, bj * BUNDLE_ROTARY : (bj + 1) * BUNDLE_ROTARY] = True
            reference = healthy_reference_tof(tof, valid, exclude_rows=suspect, quantile=config.quantile)
            ref = reference[: nbc * BUNDLE_ROTARY].reshape(1, 1, nbc, BUNDLE_ROTARY)
        grid_depth = np.nanmax(tof_to_depth_mm(np.abs(t - ref), v), axis=(1, 3))
    grid_invalid = ~blocks(np.asarray(valid, bool)).all(axis=(1, 3))
    bi, bj = np.asarray(positives, dtype=int).T
    return grid_depth[bi, bj], grid_invalid[bi, bj]


def filter_detections(detections, source, config: PostProcConfig | None = None) -> PostProcResult:
    """Keep a positive bundle iff some waveform's estimated depth reaches the threshold.

    Negatives pass through untouched. Bundles with missing echoes are kept
    (false negatives cost more than false positives).
    """
    config = config or PostProcConfig()
    tof, valid, header = _tof_source(source)
    if tof.shape != (header.axial_count, header.rotary_count):
        raise IncompatibleInputError("TOF map does not match the scan grid")
    nbr, nbc = bundle_grid_shape(header)
    positives = []
    for d in detections:
        bi, bj = d.grid_coords
        if not (0 <= bi < nbr and 0 <= bj < nbc):
            raise IncompatibleInputError(f"detection {d.grid_coords} lies outside the {nbr}x{nbc} bundle grid")
        if d.cls == 1:
            positives.append((bi, bj))
    depths, invalid = bundle_depth_estimates(tof, valid, header, positives, config)
    by_coords = {c: (depths[k], invalid[k]) for k, c in enumerate(positives)}
    out, report = [], []
    for d in detections:
        if d.cls != 1:
            out.append(d)
            report.append(DepthReportRow(tuple(d.grid_coords), "negative", math.nan))
            continue
        depth, bad = by_coords[tuple(d.grid_coords)]
        if bad:
            logger.warning("bundle %s has waveforms without an echo; retained", d.grid_coords)
            decision = "retained_invalid"
        elif depth >= config.threshold_mm - _EPS_MM:
            decision = "retained"
        else:
            decision = "rejected"
        report.append(DepthReportRow(tuple(d.grid_coords), decision, float(depth)))
        out.append(d if decision != "rejected" else replace(d, cls=0))
    return PostProcResult(out, report)


def format_depth_report(report, include_negatives=False) -> str:
    lines = ["# bundle_axial bundle_rotary decision max_estimated_depth_mm"]
    for r in report:
        if r.decision == "negative" and not include_negatives:
            continue
        depth = "nan" if math.isnan(r.max_depth_mm) else f"{r.max_depth_mm:.4f}"
        lines.append(f"{r.grid_coords[0]} {r.grid_coords[1]} {r.decision} {depth}")
    return "\n".join(lines) + "\n"


class DepthPostProcessor(BaseEstimator):
    """Estimator-style wrapper around :func:`filter_detections`."""

    def __init__(self, threshold_mm=0.09, ref_policy=DEFAULT_POLICY, quantile=0.1):
        self.threshold_mm = threshold_mm
        self.ref_policy = ref_policy
        self.quantile = quantile

    def config(self) -> PostProcConfig:
        return PostProcConfig(self.threshold_mm, self.ref_policy, self.quantile)

    def filter(self, detections, source) -> PostProcResult:
        return filter_detections(detections, source, self.config())
