import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from windtunnel._validation import ConfigError
from windtunnel.schedule import BatchRamp, ScheduleSpec, batch_size_at, cosine_loop_lr, cosine_lr, lr_at, wsd_lr

WSD = ScheduleSpec("wsd", eta=0.01, W=100, T=5000, S=9000, half_life=1000)
COS = ScheduleSpec("cosine", eta=0.01, W=100, T=4000, S=6000)
LOOP = ScheduleSpec("cosine_loop", eta=0.01, W=0, T=4000, S=9000)


def test_wsd_examples():
    assert wsd_lr(WSD, 50) == 0.005
    assert wsd_lr(WSD, 100) == 0.01
    assert wsd_lr(WSD, 3000) == 0.01
    assert wsd_lr(WSD, 5000) == 0.01
    assert wsd_lr(WSD, 6000) == pytest.approx(0.005, rel=1e-15)
    assert wsd_lr(WSD, 7000) == pytest.approx(0.0025, rel=1e-15)


def test_wsd_default_half_life_is_tenth_of_T():
    assert ScheduleSpec("wsd", 0.01, 10, 2000, 3000).half_life == 200


def test_wsd_continuity():
    eps = 1e-9
    # limits from the closed form on each side
    left_W = (WSD.W - eps) / WSD.W * WSD.eta
    right_T = 0.5 ** (eps / WSD.half_life) * WSD.eta
    assert left_W == pytest.approx(wsd_lr(WSD, WSD.W), rel=1e-9)
    assert right_T == pytest.approx(wsd_lr(WSD, WSD.T), rel=1e-9)


def test_cosine_examples():
    spec = ScheduleSpec("cosine", eta=1.0, W=0, T=1000, S=2000)
    assert cosine_lr(spec, 500) == pytest.approx(0.55, rel=1e-15)
    assert cosine_lr(spec, 1) == pytest.approx(1.0, rel=1e-5)
    assert cosine_lr(spec, 1000) == pytest.approx(0.1, rel=1e-15)
    assert cosine_lr(spec, 1500) == 0.1


def test_cosine_loop_examples():
    spec = ScheduleSpec("cosine_loop", eta=1.0, W=0, T=1000, S=2000)
    assert cosine_loop_lr(spec, 500) == pytest.approx(0.55, rel=1e-15)
    assert cosine_loop_lr(spec, 1000) == pytest.approx(0.1, rel=1e-15)
    assert cosine_loop_lr(spec, 2000) == pytest.approx(1.0, rel=1e-15)


@pytest.mark.parametrize("spec,fn", [(WSD, wsd_lr), (COS, cosine_lr), (LOOP, cosine_loop_lr)])
def test_range_errors(spec, fn):
    for s in (0, spec.S + 1):
        with pytest.raises(ValueError):
            fn(spec, s)


def test_kind_mismatch():
    with pytest.raises(ValueError):
        wsd_lr(COS, 10)


@pytest.mark.parametrize("kw", [dict(W=10, T=5, S=20), dict(eta=0.0), dict(half_life=-1.0), dict(kind="linear")])
def test_invalid_specs(kw):
    base = dict(kind="wsd", eta=0.01, W=1, T=10, S=20)
    base.update(kw)
    with pytest.raises(ConfigError):
        ScheduleSpec(**base)


@settings(max_examples=200, deadline=None)
@given(st.sampled_from([WSD, COS, LOOP]), st.data())
def test_lr_within_bounds_and_pure(spec, data):
    s = data.draw(st.integers(1, spec.S))
    v = lr_at(spec, s)
    assert 0 < v <= spec.eta
    assert lr_at(spec, s) == v


def test_wsd_total_lr_exceeds_cosine():
    S = 10_000
    wsd = ScheduleSpec("wsd", 1.0, 0, int(0.9 * S), S, half_life=0.1 * S / 4)
    cos = ScheduleSpec("cosine", 1.0, 0, S, S)
    assert math.fsum(wsd_lr(wsd, s) for s in range(1, S + 1)) >= math.fsum(cosine_lr(cos, s) for s in range(1, S + 1))


def test_batch_ramp():
    ramp = BatchRamp([(1, 2_000_000), (500, 4_000_000)])
    assert batch_size_at(ramp, 499) == 2_000_000
    assert batch_size_at(ramp, 500) == 4_000_000
    assert batch_size_at(BatchRamp.constant(7), 10 ** 6) == 7
    with pytest.raises(ValueError):
        batch_size_at(ramp, 0)


@pytest.mark.parametrize("segs", [[], [(1, 5), (1, 6)], [(5, 1), (2, 1)], [(1, 0)]])
def test_batch_ramp_invalid(segs):
    with pytest.raises(ConfigError):
        BatchRamp(segs)
