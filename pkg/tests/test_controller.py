import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dynprec.arith import PrecisionMode
from dynprec.controller import (ControllerConfig, ControllerState, Decision, apply_rule, decide,
                                percentile_threshold, record_and_update, run_stream)

HALF, BASE = PrecisionMode.HALF, PrecisionMode.BASE
counts = st.lists(st.integers(0, 300), min_size=1, max_size=400)
configs = st.builds(ControllerConfig,
                    target_ratio=st.sampled_from([0.25, 0.5, 0.75]),
                    delta=st.integers(0, 5), window=st.integers(1, 64),
                    update_period=st.integers(1, 16), initial_threshold=st.integers(0, 300))


def test_strict_comparison_at_threshold():
    s = ControllerState(threshold=10)
    assert decide(s, 9).mode is HALF
    assert decide(s, 10).mode is BASE


@given(counts, configs)
def test_decide_is_pure(stream, cfg):
    s = ControllerState.initial(cfg)
    run_stream(stream[: len(stream) // 2] or [0], cfg, s)
    before = (s.threshold, s.h, tuple(s.window), s.frames_since_update, s.frames)
    for c in stream:
        decide(s, c)
    assert before == (s.threshold, s.h, tuple(s.window), s.frames_since_update, s.frames)


@given(counts, configs)
def test_threshold_moves_only_at_updates_by_delta(stream, cfg):
    res = run_stream(stream, cfg)
    th = res.thresholds
    for t in range(1, len(th)):
        step = th[t] - th[t - 1]
        if t % cfg.update_period:
            assert step == 0
        else:
            assert step in (0, cfg.delta, -cfg.delta) or th[t] == 0


@given(counts)
def test_h_bookkeeping_at_half_target(stream):
    cfg = ControllerConfig(window=16, update_period=4, initial_threshold=50)
    s = ControllerState.initial(cfg)
    modes = []
    for c in stream:
        d = decide(s, c)
        modes.append(d.mode)
        record_and_update(s, d, cfg)
        n_half = sum(m is HALF for m in modes)
        assert s.h == n_half - (len(modes) - n_half)
        recent = modes[-16:]
        assert s.h_local == sum(1 if m is HALF else -1 for m in recent)


@given(st.integers(-50, 50), st.integers(-50, 50), st.integers(0, 100), st.integers(0, 5))
def test_sign_rule(h, hl, th, delta):
    new = apply_rule(th, h, hl, delta)
    if h > 0 and hl > 0:
        assert new == max(th - delta, 0)
    elif h < 0 and hl < 0:
        assert new == th + delta
    else:
        assert new == th


@pytest.mark.parametrize("r, steps", [(0.5, (1, -1)), (0.25, (3, -1)), (0.75, (1, -3)), (0.3, (7, -3))])
def test_generalized_increments(r, steps):
    assert ControllerConfig(target_ratio=r).increments() == steps


@given(st.sampled_from([0.0, 1.0]), counts)
def test_degenerate_targets_pin_the_policy(r, stream):
    res = run_stream(stream, ControllerConfig(target_ratio=r, initial_threshold=50))
    assert res.achieved_ratio == r
    assert np.all(res.thresholds == (math.inf if r else 0.0))


def test_zero_delta_freezes_threshold():
    res = run_stream(range(500), ControllerConfig(delta=0, initial_threshold=123, update_period=1))
    assert set(res.thresholds) == {123}


@pytest.mark.parametrize("target", [0.25, 0.5, 0.75])
def test_converges_on_stationary_stream(target):
    rng = np.random.default_rng(0)
    stream = rng.integers(0, 400, size=60_000)
    res = run_stream(stream, ControllerConfig(target_ratio=target, initial_threshold=200))
    assert abs(res.achieved_ratio - target) < 0.02


def test_record_returns_same_state_and_counts():
    cfg = ControllerConfig()
    s = ControllerState.initial(cfg)
    assert record_and_update(s, Decision(HALF, 0, 0), cfg) is s
    assert (s.frames, s.half_frames, s.ratio) == (1, 1, 1.0)
    assert isinstance(s.copy().window, deque) and s.copy() is not s


def test_config_validation():
    for bad in (dict(target_ratio=1.5), dict(delta=-1), dict(delta=0.5), dict(window=0),
                dict(update_period=0), dict(initial_threshold=-1)):
        with pytest.raises(ValueError):
            ControllerConfig(**bad)
    with pytest.raises(ValueError):
        run_stream([], ControllerConfig())
    with pytest.raises(ValueError):
        decide(ControllerState(1), -1)


def test_percentile_threshold_is_an_observed_count():
    assert percentile_threshold([5, 1, 9, 3], 50) == 3
    assert percentile_threshold(range(101), 30) == 30
