import numpy as np
import pytest

from spp import Rng
from spp.rng import splitmix64

# Published splitmix64 outputs for seed 0 (same constants as Java's
# SplittableRandom); an implementation that matches these and the xoshiro
# hand trace below reproduces the pinned stream everywhere.
SPLITMIX_SEED0 = [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]

# First 16 raw outputs for seed 42, frozen from the verified implementation.
GOLDEN_U64_SEED42 = [
    0x15780B2E0C2EC716,
    0x6104D9866D113A7E,
    0xAE17533239E499A1,
    0xECB8AD4703B360A1,
    0xFDE6DC7FE2EC5E64,
    0xC50DA53101795238,
    0xB82154855A65DDB2,
    0xD99A2743EBE60087,
    0xC2E96E726E97647E,
    0x9556615F775FBC3D,
    0xAEB53B340C103971,
    0x4A69DB9873AF8965,
    0xCD0FEDA93006C6B6,
    0x52480865A4B42742,
    0xB60DEC3BF2D887CD,
    0xE0B55A68B96677FA,
]

GOLDEN_DOUBLES_SEED42 = [
    0.08386297105988216,
    0.3789802506626686,
    0.6800434110281394,
    0.9246929453253876,
    0.9918039142821028,
    0.7697394604342425,
    0.7192585778779156,
    0.8500084439109727,
    0.7613743810057634,
    0.5833493097373993,
    0.6824528696125193,
    0.29067776176424165,
    0.8010242975288078,
    0.3214116333153503,
    0.7111499449118543,
    0.8777672296213497,
]


def test_splitmix64_published_vectors():
    state = 0
    outs = []
    for _ in range(3):
        state, value = splitmix64(state)
        outs.append(value)
    assert outs == SPLITMIX_SEED0


def test_xoshiro_hand_trace_from_known_state():
    # With state (1, 2, 3, 4): output1 = rotl(2*5, 7) * 9 = 1280 * 9 = 11520.
    # The update then gives s = (7, 0, 262146, 6 * 2**45), so output2 = 0.
    r = Rng(0)
    r._s = [1, 2, 3, 4]
    assert r.next_u64() == 11520
    assert r._s == [7, 0, 262146, 6 * 2**45]
    assert r.next_u64() == 0


def test_golden_stream_seed42():
    r = Rng(42)
    assert [r.next_u64() for _ in range(16)] == GOLDEN_U64_SEED42
    r = Rng(42)
    assert [r.next_double() for _ in range(16)] == GOLDEN_DOUBLES_SEED42


def test_same_seed_same_stream_distinct_seeds_differ():
    a = [Rng(9).next_u64() for _ in range(8)]
    b = [Rng(9).next_u64() for _ in range(8)]
    c = [Rng(10).next_u64() for _ in range(8)]
    assert a == b
    assert a != c


def test_bulk_doubles_equals_scalar_stream():
    scalar = Rng(3)
    bulk = Rng(3)
    want = np.array([scalar.next_double() for _ in range(100)])
    got = bulk.doubles(100)
    assert np.array_equal(got, want)


def test_doubles_in_unit_interval_with_53_bit_grid():
    r = Rng(1)
    xs = r.doubles(1000)
    assert (xs >= 0.0).all() and (xs < 1.0).all()
    # Every value sits on the 2**-53 lattice.
    scaled = xs * 2.0**53
    assert np.array_equal(scaled, np.floor(scaled))


def test_uniform_bounds_and_mean():
    r = Rng(17)
    m = r.uniform(-2.0, 3.0, 100, 50)
    assert (m >= -2.0).all() and (m < 3.0).all()
    assert abs(m.mean() - 0.5) < 0.05


def test_uniform_row_major_draw_order():
    a = Rng(23).uniform(0.0, 1.0, 2, 3)
    b = Rng(23).doubles(6).reshape(2, 3)
    assert np.array_equal(a, b)


def test_uniform_stays_below_hi_even_for_tiny_intervals():
    lo = 1.0
    hi = np.nextafter(lo, 2.0)
    r = Rng(5)
    vals = r.uniform(lo, hi, 10, 10)
    assert (vals >= lo).all() and (vals < hi).all()


def test_uniform_rejects_bad_interval():
    r = Rng(0)
    with pytest.raises(ValueError):
        r.uniform(1.0, 1.0, 2, 2)
    with pytest.raises(ValueError):
        r.uniform(2.0, 1.0, 2, 2)
