"""Randomised synthetic scan suites for desk-scale experiments."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .scan import FlawKind
from .synth import FlawSpec, SynthConfig

# (length_mm, width_deg) ranges per kind
_SIZES = {
    FlawKind.DEBRIS: ((2.5, 4.0), (1.0, 4.0)),
    FlawKind.CREVICE: ((4.0, 8.0), (4.0, 8.0)),
    FlawKind.FBBPF: ((15.0, 26.0), (3.0, 6.0)),
}


def _place(rng, kind, depth, config, taken, margin=1.0, keep_out_mm=2.0, tries=500):
    (l0, l1), (w0, w1) = _SIZES[kind]
    ax_hi = config.axial_origin_mm + (config.axial_count - 1) * config.axial_pitch_mm
    rot_hi = config.rotary_origin_deg + (config.rotary_count - 1) * config.rotary_pitch_deg
    for _ in range(tries):
        length, width = rng.uniform(l0, l1), rng.uniform(w0, w1)
        lo_a = config.axial_origin_mm + keep_out_mm + length / 2
        hi_a = ax_hi - length / 2
        lo_r = config.rotary_origin_deg + width / 2
        hi_r = rot_hi - width / 2
        if hi_a <= lo_a or hi_r <= lo_r:
            continue
        ac = round(rng.uniform(lo_a, hi_a), 3)
        rc = round(rng.uniform(lo_r, hi_r), 3)
        box = (ac - length / 2 - margin, ac + length / 2 + margin, rc - width / 2 - margin, rc + width / 2 + margin)
        if any(box[0] < b[1] and b[0] < box[1] and box[2] < b[3] and b[2] < box[3] for b in taken):
            continue
        taken.append(box)
        pits = int(rng.integers(4, 9)) if kind is FlawKind.CREVICE else 6
        return FlawSpec(kind, ac, rc, round(length, 3), round(width, 3), round(depth, 4), pits)
    return None


def random_scan_config(
    seed,
    axial_count=200,
    rotary_count=1200,
    n_debris=8,
    n_crevice=3,
    n_fbbpf=3,
    n_shallow=5,
    qualifying_depth=(0.12, 0.30),
    shallow_depth=(0.03, 0.085),
    **overrides,
) -> SynthConfig:
    """A scan with qualifying flaws of every kind plus shallow (sub-threshold) ones.

    Flaws keep clear of each other and of the first 2 mm of axial travel,
    which supplies the truncation anchor.
    """
    rng = np.random.default_rng([seed, 7])
    base = SynthConfig(axial_count=axial_count, rotary_count=rotary_count, rng_seed=int(seed), **overrides)
    taken: list = []
    flaws = []
    plan = [FlawKind.FBBPF] * n_fbbpf + [FlawKind.CREVICE] * n_crevice + [FlawKind.DEBRIS] * n_debris
    for kind in plan:
        spec = _place(rng, kind, rng.uniform(*qualifying_depth), base, taken)
        if spec is not None:
            flaws.append(spec)
    for _ in range(n_shallow):
        kind = FlawKind.DEBRIS if rng.random() < 0.6 else FlawKind.CREVICE
        spec = _place(rng, kind, rng.uniform(*shallow_depth), base, taken)
        if spec is not None:
            flaws.append(spec)
    return replace(base, flaws=tuple(flaws))


def desk_suite(n_train=20, n_test=6, seed=2021, noise_free=False, **kwargs):
    """Training and held-out test configs; ``noise_free`` zeroes noise and chatter."""
    extra = {"noise_sigma": 0.0, "chatter_amplitude_ns": 0.0} if noise_free else {}
    train = [random_scan_config(seed * 1000 + k, **kwargs, **extra) for k in range(n_train)]
    test = [random_scan_config(seed * 1000 + 500 + k, **kwargs, **extra) for k in range(n_test)]
    return train, test
