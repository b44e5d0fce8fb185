import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from rlpipe.curriculum import CurriculumState, initial_tolerances, promotions_to_floor, record_episode
from rlpipe.dynamics import FINAL_TOLERANCES, Tolerances


def test_initial_tolerances():
    assert initial_tolerances((-2, 2)) == pytest.approx((1.6, 0.8 * math.pi))
    assert initial_tolerances((-1, 1)) == pytest.approx((0.8, 0.8 * math.pi))


def test_promotion_after_96_of_100():
    state = CurriculumState()
    for k in range(100):
        state = record_episode(state, k >= 4)
    assert state.current == pytest.approx((1.28, 0.8 * math.pi * 0.8))
    assert len(state.window) == 0 and state.promotions == 1


def test_no_promotion_at_94_window_kept():
    state = CurriculumState()
    for k in range(100):
        state.record(k >= 6)
    assert state.current == initial_tolerances()
    assert len(state.window) == 100


def test_record_episode_is_pure():
    state = CurriculumState()
    record_episode(state, True)
    assert len(state.window) == 0


def test_at_floor_is_fixed():
    state = CurriculumState(current=FINAL_TOLERANCES)
    for _ in range(300):
        assert not state.record(True)
    assert state.current == FINAL_TOLERANCES


def test_sixteen_promotions_to_floor():
    assert promotions_to_floor() == math.ceil(math.log(0.05 / 1.6) / math.log(0.8)) == 16
    state = CurriculumState()
    while state.current.eps_p > FINAL_TOLERANCES.eps_p:
        for _ in range(100):
            state.record(True)
    assert state.promotions == 16


@given(st.lists(st.booleans(), min_size=0, max_size=3000), st.integers(0, 99))
def test_monotone_and_threshold_property(outcomes, offset):
    state = CurriculumState()
    window = []
    prev = state.current
    for ok in outcomes:
        window.append(ok)
        window = window[-100:]
        promoted = state.record(ok)
        if promoted:
            assert len(window) == 100 and sum(window) >= 95
            window = []
        assert state.current.eps_p <= prev.eps_p and state.current.eps_theta <= prev.eps_theta
        assert state.current.eps_p >= FINAL_TOLERANCES.eps_p
        prev = state.current


def test_roundtrip():
    state = CurriculumState()
    for k in range(150):
        state.record(k % 3 != 0)
    back = CurriculumState.from_dict(state.to_dict())
    assert back.to_dict() == state.to_dict()
    assert isinstance(back.current, Tolerances)
