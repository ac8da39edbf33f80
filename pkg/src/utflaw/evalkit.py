"""Confusion matrices, accuracy/sensitivity/specificity, per-flaw hits and overlays."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ShapeError
from .pnm import encode_ppm
from .scan import FlawRegion, ScanHeader
from .sigproc import BUNDLE_AXIAL, BUNDLE_ROTARY, bundle_footprint

QUALIFYING_DEPTH_MM = 0.1


@dataclass(frozen=True)
class ConfusionMatrix:
    tn: int
    fp: int
    fn: int
    tp: int

    def __post_init__(self):
        if min(self.tn, self.fp, self.fn, self.tp) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tn + self.fp + self.fn + self.tp

    def __add__(self, other):
        return ConfusionMatrix(self.tn + other.tn, self.fp + other.fp, self.fn + other.fn, self.tp + other.tp)


class Metrics(NamedTuple):
    """``None`` marks a metric whose denominator is zero."""

    accuracy: float | None
    sensitivity: float | None
    specificity: float | None


def confusion(pred, truth) -> ConfusionMatrix:
    pred = np.asarray(pred).astype(int)
    truth = np.asarray(truth).astype(int)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction length {pred.shape} != truth length {truth.shape}")
    return ConfusionMatrix(
        tn=int(np.sum((pred == 0) & (truth == 0))),
        fp=int(np.sum((pred == 1) & (truth == 0))),
        fn=int(np.sum((pred == 0) & (truth == 1))),
        tp=int(np.sum((pred == 1) & (truth == 1))),
    )


def _ratio(num, den):
    return num / den if den else None


def metrics(cm: ConfusionMatrix) -> Metrics:
    return Metrics(
        accuracy=_ratio(cm.tp + cm.tn, cm.total),
        sensitivity=_ratio(cm.tp, cm.tp + cm.fn),
        specificity=_ratio(cm.tn, cm.tn + cm.fp),
    )


def format_metrics(m: Metrics) -> str:
    def pct(v):
        return "undefined" if v is None else f"{100 * v:.2f}%"

    return f"accuracy={pct(m.accuracy)} sensitivity={pct(m.sensitivity)} specificity={pct(m.specificity)}"


# --------------------------------------------------------------------------
# per-flaw evaluation


@dataclass
class RegionResult:
    region: FlawRegion
    qualifying: bool
    hitting: list = field(default_factory=list)

    @property
    def hit(self) -> bool:
        return bool(self.hitting)


@dataclass
class FlawHitReport:
    regions: list
    false_positives: list
    absorbed: list
    total_detections: int

    @property
    def qualifying(self):
        return [r for r in self.regions if r.qualifying]

    @property
    def hits(self) -> int:
        return sum(r.hit for r in self.qualifying)

    @property
    def hit_rate(self) -> float | None:
        q = len(self.qualifying)
        return self.hits / q if q else None

    @property
    def overlapping(self) -> list:
        """Retained detections touching at least one qualifying region."""
        seen = []
        for r in self.qualifying:
            for c in r.hitting:
                if c not in seen:
                    seen.append(c)
        return seen


def _det_coords(d):
    return tuple(d.grid_coords) if hasattr(d, "grid_coords") else tuple(d)


def _footprint(header, coords):
    return tuple(float(v) for v in bundle_footprint(header, *coords))


def flaw_hits(detections, regions: Sequence[FlawRegion], header: ScanHeader) -> FlawHitReport:
    """Match retained positive detections to ground-truth regions.

    Overlap uses closed intervals. Regions shallower than 0.1 mm are not
    required to be hit but absorb overlapping detections so those are not
    open-field false positives.
    """
    positives = [_det_coords(d) for d in detections if getattr(d, "cls", 1) == 1]
    results = [RegionResult(r, r.max_depth_mm >= QUALIFYING_DEPTH_MM) for r in regions]
    fps, absorbed = [], []
    for coords in positives:
        a0, a1, r0, r1 = _footprint(header, coords)
        touched_q, touched_sub = False, False
        for res in results:
            if res.region.intersects(a0, a1, r0, r1):
                if res.qualifying:
                    res.hitting.append(coords)
                    touched_q = True
                else:
                    touched_sub = True
        if not touched_q:
            (absorbed if touched_sub else fps).append(coords)
    return FlawHitReport(results, fps, absorbed, len(positives))


def format_flaw_hit_report(report: FlawHitReport) -> str:
    lines = ["# region kind axial_start axial_end rotary_start rotary_end max_depth qualifying hit n_hits"]
    for k, r in enumerate(report.regions):
        g = r.region
        lines.append(
            f"region {k} {g.kind.value} {g.axial_start_mm:.4f} {g.axial_end_mm:.4f} {g.rotary_start_deg:.4f} "
            f"{g.rotary_end_deg:.4f} {g.max_depth_mm:.4f} {int(r.qualifying)} {int(r.hit)} {len(r.hitting)}"
        )
    for c in report.false_positives:
        lines.append(f"fp {c[0]} {c[1]}")
    for c in report.absorbed:
        lines.append(f"absorbed {c[0]} {c[1]}")
    rate = report.hit_rate
    lines.append(
        f"summary qualifying={len(report.qualifying)} hits={report.hits} "
        f"hit_rate={'undefined' if rate is None else f'{rate:.4f}'} "
        f"open_field_fp={len(report.false_positives)} absorbed={len(report.absorbed)} "
        f"retained={report.total_detections}"
    )
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# overlay


def bundle_center_pixel(bi, bj):
    """(row, col) of the cell holding a bundle footprint's centre; rows are rotary, cols axial."""
    return BUNDLE_ROTARY * bj + BUNDLE_ROTARY // 2, BUNDLE_AXIAL * bi + BUNDLE_AXIAL // 2


def overlay_render(depth_map, header: ScanHeader, detections=(), truth=(), depth_scale_mm=0.3) -> bytes:
    """PPM map: rows = rotary index, cols = axial index.

    Background is measured depth as grayscale (``depth_scale_mm`` maps to
    white), truth regions are outlined red and retained positive
    detections are blue plus-shaped markers at bundle centres.
    """
    depth = np.asarray(depth_map, dtype=float)
    if depth.shape != (header.axial_count, header.rotary_count):
        raise ShapeError(f"depth map {depth.shape} does not match scan grid")
    gray = np.clip(np.nan_to_num(depth, nan=0.0) / depth_scale_mm, 0.0, 1.0)
    gray = np.rint(gray * 255).astype(np.uint8).T
    img = np.repeat(gray[:, :, None], 3, axis=2)
    nr, na = gray.shape
    red, blue = np.array([255, 0, 0], np.uint8), np.array([0, 0, 255], np.uint8)
    for reg in truth:
        c0 = int(math.floor((reg.axial_start_mm - header.axial_origin_mm) / header.axial_pitch_mm + 1e-6))
        c1 = int(math.ceil((reg.axial_end_mm - header.axial_origin_mm) / header.axial_pitch_mm - 1e-6)) - 1
        r0 = int(math.floor((reg.rotary_start_deg - header.rotary_origin_deg) / header.rotary_pitch_deg + 1e-6))
        r1 = int(math.ceil((reg.rotary_end_deg - header.rotary_origin_deg) / header.rotary_pitch_deg - 1e-6)) - 1
        c0, c1 = max(c0, 0), min(c1, na - 1)
        r0, r1 = max(r0, 0), min(r1, nr - 1)
        if c0 > c1 or r0 > r1:
            continue
        img[r0, c0 : c1 + 1] = red
        img[r1, c0 : c1 + 1] = red
        img[r0 : r1 + 1, c0] = red
        img[r0 : r1 + 1, c1] = red
    for d in detections:
        if getattr(d, "cls", 1) != 1:
            continue
        row, col = bundle_center_pixel(*_det_coords(d))
        for dr, dc in ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1), (-2, 0), (2, 0)):
            rr, cc = row + dr, col + dc
            if 0 <= rr < nr and 0 <= cc < na:
                img[rr, cc] = blue
    return encode_ppm(img)
