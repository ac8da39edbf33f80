"""Balanced train / cross-validation dataset construction from labelled scans.

Dataset file layout (little-endian)::

    b"UTDS" u16 version=1 u32 n_train u32 n_cv f64 positive_fraction
    f64 sub_threshold_share u64 seed 3 x u16 bundle shape
    then n_train + n_cv records (train first):
    u8 label, u8 category, u32 scan_id, u32 bundle_axial, u32 bundle_rotary,
    prod(shape) uint8 values in (time, rotary, channel) C order
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Sequence

import numpy as np

from .errors import ConfigError, DatasetShortfallError, IncompatibleInputError
from .scan import FlawRegion, ScanHeader, ScanVolume, iter_scan_rows, read_scan_header
from .synth import SynthConfig, build_depth_field, iter_synth_rows
from .sigproc import BUNDLE_AXIAL, BUNDLE_ROTARY, BUNDLE_SHAPE, BundleAssembler, BundleTensor, bundle_footprint, bundle_grid_shape, check_bundle_pitches

QUALIFYING_DEPTH_MM = 0.1


class Category(IntEnum):
    FLAW_FREE = 0
    SUB_THRESHOLD = 1
    QUALIFYING = 2


@dataclass(frozen=True)
class LabeledBundle:
    tensor: BundleTensor
    label: int
    category: Category
    provenance: tuple  # (scan_id, bundle_axial, bundle_rotary)

    def __post_init__(self):
        if self.label != int(self.category is Category.QUALIFYING):
            raise ValueError("label must be 1 exactly for qualifying flaws")


def categorize(max_depth_mm) -> np.ndarray:
    d = np.asarray(max_depth_mm, dtype=float)
    return np.where(d >= QUALIFYING_DEPTH_MM, Category.QUALIFYING, np.where(d > 0, Category.SUB_THRESHOLD, Category.FLAW_FREE))


def footprint_max_depth(depth_field, header: ScanHeader) -> np.ndarray:
    """Max truth depth inside every whole bundle, shape (bundle rows, bundle cols)."""
    field = np.asarray(depth_field, dtype=float)
    if field.shape != (header.axial_count, header.rotary_count):
        raise IncompatibleInputError(f"depth field {field.shape} does not match scan grid")
    nbr, nbc = bundle_grid_shape(header)
    block = field[: nbr * BUNDLE_AXIAL, : nbc * BUNDLE_ROTARY].reshape(nbr, BUNDLE_AXIAL, nbc, BUNDLE_ROTARY)
    return block.max(axis=(1, 3))


def _region_max_depth(regions, header, bi, bj):
    a0, a1, r0, r1 = (float(v) for v in bundle_footprint(header, bi, bj))
    best = 0.0
    for r in regions:
        # half-open footprint vs region interior
        if r.axial_start_mm < a1 and a0 < r.axial_end_mm and r.rotary_start_deg < r1 and r0 < r.rotary_end_deg:
            best = max(best, r.max_depth_mm)
    return best


def label_bundle(bundle: BundleTensor, regions: Sequence[FlawRegion], depth_field, header: ScanHeader, scan_id=0) -> LabeledBundle:
    """Label from the max truth depth in the bundle footprint (>= 0.1 mm qualifies).

    Without a depth field, the deepest intersecting region's ``max_depth_mm``
    is used, which over-labels bundles that only graze a region's edge.
    """
    bi, bj = bundle.grid_coords
    nbr, nbc = bundle_grid_shape(header)
    if not (0 <= bi < nbr and 0 <= bj < nbc):
        raise IncompatibleInputError(f"bundle {bundle.grid_coords} outside the {nbr}x{nbc} grid")
    if depth_field is not None:
        depth = float(footprint_max_depth(depth_field, header)[bi, bj])
    else:
        depth = _region_max_depth(regions, header, bi, bj)
    cat = Category(int(categorize(depth)))
    return LabeledBundle(bundle, int(cat is Category.QUALIFYING), cat, (scan_id, bi, bj))


@dataclass
class ScanSource:
    """A scan with its truth depth field.

    ``scan`` is a ScanVolume, a `.utb` path, or a SynthConfig whose rows are
    regenerated on demand (deterministic, so nothing is kept in memory).
    """

    scan_id: int
    scan: object
    depth_field: np.ndarray
    regions: tuple = ()

    @property
    def header(self) -> ScanHeader:
        if isinstance(self.scan, (ScanVolume, SynthConfig)):
            return self.scan.header
        return read_scan_header(self.scan)


@dataclass
class Dataset:
    X: np.ndarray  # uint8 (n, 100, 20, 5)
    y: np.ndarray
    category: np.ndarray
    provenance: np.ndarray  # (n, 3) scan_id, bi, bj

    def __len__(self):
        return int(self.y.shape[0])

    def class_counts(self):
        return int(np.sum(self.y == 0)), int(np.sum(self.y == 1))


def split_counts(n, positive_fraction, sub_threshold_share):
    """(flaw_free, sub_threshold, qualifying) counts for a partition of size n."""
    pos = int(round(n * positive_fraction))
    neg = n - pos
    sub = int(round(neg * sub_threshold_share))
    return neg - sub, sub, pos


def _emit_rows(scan):
    if isinstance(scan, ScanVolume):
        return scan.header, enumerate(scan.rows())
    if isinstance(scan, SynthConfig):
        return scan.header, enumerate(iter_synth_rows(build_depth_field(scan), scan))
    gen = iter_scan_rows(scan)
    return next(gen), gen


def extract_bundles(scan, wanted) -> dict:
    """Raw uint8 tensors for the requested bundle coordinates, streamed row by row."""
    header, rows = _emit_rows(scan)
    check_bundle_pitches(header)
    wanted = set(map(tuple, wanted))
    by_row: dict = {}
    for bi, bj in wanted:
        by_row.setdefault(bi, []).append(bj)
    asm = BundleAssembler(header)
    out = {}
    last = max(by_row) if by_row else -1
    for i, row in rows:
        res = asm.push(i, row)
        if res is not None:
            bi, raw = res
            for bj in by_row.get(bi, ()):
                out[(bi, bj)] = raw[bj].copy()
            if bi >= last:
                break
    if hasattr(rows, "close"):
        rows.close()
    return out


def build_dataset(
    sources: Sequence[ScanSource],
    n_train: int,
    n_cv: int,
    positive_fraction: float = 0.25,
    sub_threshold_share: float = 0.2,
    seed: int = 0,
):
    """Sample disjoint, internally balanced train and CV sets without replacement."""
    if n_train < 1 or n_cv < 0:
        raise ConfigError("n_train must be >= 1 and n_cv >= 0")
    if not 0 < positive_fraction < 1 or not 0 <= sub_threshold_share <= 1:
        raise ConfigError("positive_fraction must be in (0, 1) and sub_threshold_share in [0, 1]")
    ids = [s.scan_id for s in sources]
    if len(set(ids)) != len(ids):
        raise ConfigError("scan ids must be unique")
    pools = {c: [] for c in Category}
    for src in sorted(sources, key=lambda s: s.scan_id):
        header = src.header
        check_bundle_pitches(header)
        cats = categorize(footprint_max_depth(src.depth_field, header))
        for c in Category:
            bi, bj = np.nonzero(cats == c)
            pools[c].extend((src.scan_id, int(a), int(b)) for a, b in zip(bi, bj))
    need_tr = split_counts(n_train, positive_fraction, sub_threshold_share)
    need_cv = split_counts(n_cv, positive_fraction, sub_threshold_share) if n_cv else (0, 0, 0)
    if need_tr[2] + need_cv[2] > len(pools[Category.QUALIFYING]):
        raise DatasetShortfallError("flaw (label 1)", need_tr[2] + need_cv[2], len(pools[Category.QUALIFYING]))
    rng = np.random.default_rng(seed)
    picks_tr, picks_cv = [], []
    for c in Category:
        need = need_tr[c] + need_cv[c]
        pool = pools[c]
        if need > len(pool):
            raise DatasetShortfallError(c.name.lower(), need, len(pool))
        chosen = rng.permutation(len(pool))[:need]
        picks_tr += [(pool[k], c) for k in chosen[: need_tr[c]]]
        picks_cv += [(pool[k], c) for k in chosen[need_tr[c] :]]
    wanted: dict = {}
    for (sid, bi, bj), _ in picks_tr + picks_cv:
        wanted.setdefault(sid, set()).add((bi, bj))
    tensors = {}
    for src in sources:
        if src.scan_id in wanted:
            for coords, raw in extract_bundles(src.scan, wanted[src.scan_id]).items():
                tensors[(src.scan_id,) + coords] = raw

    def assemble(picks):
        order = rng.permutation(len(picks))
        picks = [picks[k] for k in order]
        X = np.zeros((len(picks),) + BUNDLE_SHAPE, np.uint8)
        for k, (prov, _) in enumerate(picks):
            X[k] = tensors[prov]
        cat = np.array([int(c) for _, c in picks], dtype=np.uint8)
        prov = np.array([p for p, _ in picks], dtype=np.int64).reshape(-1, 3)
        return Dataset(X, (cat == Category.QUALIFYING).astype(np.int64), cat, prov)

    return assemble(picks_tr), assemble(picks_cv)


# --------------------------------------------------------------------------
# serialization

_MAGIC = b"UTDS"
_HEAD = struct.Struct("<4sHIIddQ3H")
_REC = struct.Struct("<BBIII")


def dump_datasets(train: Dataset, cv: Dataset, positive_fraction, sub_threshold_share, seed) -> bytes:
    parts = [_HEAD.pack(_MAGIC, 1, len(train), len(cv), positive_fraction, sub_threshold_share, seed, *BUNDLE_SHAPE)]
    for ds in (train, cv):
        for k in range(len(ds)):
            sid, bi, bj = (int(v) for v in ds.provenance[k])
            parts.append(_REC.pack(int(ds.y[k]), int(ds.category[k]), sid, bi, bj))
            parts.append(np.ascontiguousarray(ds.X[k], dtype=np.uint8).tobytes())
    return b"".join(parts)


def save_datasets(path, train, cv, positive_fraction=0.25, sub_threshold_share=0.2, seed=0) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_datasets(train, cv, positive_fraction, sub_threshold_share, seed))


def load_datasets(path):
    """Returns ``(train, cv, meta)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEAD.size or data[:4] != _MAGIC:
        raise ConfigError(f"{path}: not a dataset file")
    _, version, n_tr, n_cv, pf, share, seed, t, r, c = _HEAD.unpack_from(data, 0)
    if version != 1 or (t, r, c) != BUNDLE_SHAPE:
        raise ConfigError(f"{path}: unsupported dataset version {version} or shape {(t, r, c)}")
    size = t * r * c
    rec = _REC.size + size
    n = n_tr + n_cv
    if len(data) != _HEAD.size + n * rec:
        raise ConfigError(f"{path}: expected {n} records, file size disagrees")
    body = np.frombuffer(data, dtype=np.uint8, offset=_HEAD.size).reshape(n, rec)
    meta = np.frombuffer(body[:, : _REC.size].tobytes(), dtype=np.dtype([("y", "u1"), ("c", "u1"), ("s", "<u4"), ("bi", "<u4"), ("bj", "<u4")]))
    X = body[:, _REC.size :].reshape((n,) + BUNDLE_SHAPE).copy()
    prov = np.stack([meta["s"], meta["bi"], meta["bj"]], axis=1).astype(np.int64)

    def part(sl):
        return Dataset(X[sl], meta["y"][sl].astype(np.int64), meta["c"][sl].copy(), prov[sl])

    info = {"positive_fraction": pf, "sub_threshold_share": share, "seed": seed}
    return part(slice(0, n_tr)), part(slice(n_tr, n)), info
