import numpy as np
import pytest

from utflaw.nn import Conv2D, Dense, Dropout, Flatten, ReLU
from utflaw.scan import ScanHeader, ScanVolume


def small_header(axial=3, rotary=4, samples=16, **kw):
    return ScanHeader(axial_count=axial, rotary_count=rotary, samples_per_wave=samples, **kw)


def random_volume(rng, axial=None, rotary=None, samples=None):
    a = int(axial or rng.integers(1, 6))
    r = int(rotary or rng.integers(1, 8))
    s = int(samples or rng.integers(1, 40))
    header = small_header(
        a, r, s,
        axial_pitch_mm=float(rng.uniform(0.01, 2)),
        rotary_pitch_deg=float(rng.uniform(0.01, 1)),
        axial_origin_mm=float(rng.uniform(-100, 100)),
        rotary_origin_deg=float(rng.uniform(0, 300)),
    )
    return ScanVolume(header, rng.integers(0, 256, size=(a, r, s), dtype=np.uint8))


def _away_from_kink(rng, shape):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.05, 1.0, size=shape)


LAYER_CASES = ["conv2d", "dense", "relu", "dropout", "flatten"]


def random_instance(kind, rng):
    n = int(rng.integers(1, 4))
    if kind == "conv2d":
        kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        h, w = int(rng.integers(kh, kh + 5)), int(rng.integers(kw, kw + 5))
        layer = Conv2D(int(rng.integers(1, 4)), (kh, kw), (int(rng.integers(1, 3)), int(rng.integers(1, 3))))
        shape = (h, w, int(rng.integers(1, 4)))
    elif kind == "dense":
        layer, shape = Dense(int(rng.integers(1, 6))), (int(rng.integers(1, 8)),)
    elif kind == "relu":
        layer, shape = ReLU(), tuple(int(v) for v in rng.integers(1, 5, size=int(rng.integers(1, 4))))
    elif kind == "dropout":
        layer, shape = Dropout(float(rng.uniform(0, 0.9))), (int(rng.integers(1, 10)),)
    else:
        layer, shape = Flatten(), tuple(int(v) for v in rng.integers(1, 4, size=3))
    layer.build(shape, rng, np.float64)
    for p in layer.params.values():
        p[...] = rng.normal(size=p.shape)
    x = _away_from_kink(rng, (n,) + shape)
    upstream = rng.normal(size=(n,) + layer.output_shape)
    return layer, x, upstream


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria register a verdict line here; printed at session end
_CRITERIA: dict = {}


@pytest.fixture
def criterion():
    def record(number, title, passed, detail):
        _CRITERIA[number] = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
        print(_CRITERIA[number])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
