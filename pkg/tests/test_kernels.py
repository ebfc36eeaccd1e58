import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loadbattery import _kernels
from loadbattery.model import BatterySpec, LoadClass
from loadbattery.signals import random_member
from loadbattery.simulate import PolicyKind, SimConfig, run

needs_numba = pytest.mark.skipif(not _kernels._HAVE_NUMBA, reason="numba not installed")
RULES = [_kernels.FILL_SEQUENTIAL, _kernels.FILL_LEVEL, _kernels.FILL_PROPORTIONAL]


@st.composite
def fill_problems(draw):
    n = draw(st.integers(1, 12))
    pmin = np.array(draw(st.lists(st.floats(0, 2), min_size=n, max_size=n)))
    room = np.array(draw(st.lists(st.floats(0, 2), min_size=n, max_size=n)))
    key = np.array(draw(st.lists(st.sampled_from([0.0, 0.1, 0.25, 0.5, 1.0]) | st.floats(-1, 1),
                                 min_size=n, max_size=n)))
    target = draw(st.floats(-1, 30))
    return pmin, pmin + room, key, target


@settings(max_examples=300, deadline=None)
@given(fill_problems(), st.sampled_from(RULES))
def test_water_fill_meets_clamped_target(problem, rule):
    pmin, pmax, key, target = problem
    p, total = _kernels.water_fill(pmin, pmax, key, target, rule, 0.1, backend="numpy")
    assert np.all(p >= pmin - 1e-12) and np.all(p <= pmax + 1e-12)
    want = min(max(target, pmin.sum()), pmax.sum())
    assert p.sum() == pytest.approx(want, abs=1e-9)
    assert total == pytest.approx(want, abs=1e-9)


@settings(max_examples=300, deadline=None)
@given(fill_problems())
def test_sequential_fill_respects_priority(problem):
    pmin, pmax, key, target = problem
    p, _ = _kernels.water_fill(pmin, pmax, key, target, _kernels.FILL_SEQUENTIAL, backend="numpy")
    extra = p - pmin
    room = pmax - pmin
    for i in range(p.size):
        for j in range(p.size):
            served_first = key[i] > key[j] or (key[i] == key[j] and i < j)
            if served_first and extra[j] > 1e-12:
                assert extra[i] >= room[i] - 1e-12


@settings(max_examples=300, deadline=None)
@given(fill_problems())
def test_level_fill_equalizes_end_keys(problem):
    pmin, pmax, key, target = problem
    dt = 0.1
    p, _ = _kernels.water_fill(pmin, pmax, key, target, _kernels.FILL_LEVEL, dt, backend="numpy")
    end = key - p * dt
    free = pmax - pmin > 1e-9  # loads without headroom sit at both bounds
    inner = free & (p > pmin + 1e-9) & (p < pmax - 1e-9)
    if inner.any():
        level = end[inner][0]
        assert np.allclose(end[inner], level, atol=1e-9)
        assert np.all(end[free & (p >= pmax - 1e-9)] >= level - 1e-9)
        assert np.all(end[free & (p <= pmin + 1e-9)] <= level + 1e-9)


@needs_numba
@settings(max_examples=200, deadline=None)
@given(fill_problems(), st.sampled_from(RULES))
def test_water_fill_backends_agree(problem, rule):
    pmin, pmax, key, target = problem
    a, ta = _kernels.water_fill(pmin, pmax, key, target, rule, 0.1, backend="numpy")
    b, tb = _kernels.water_fill(pmin, pmax, key, target, rule, 0.1, backend="numba")
    assert np.allclose(a, b, rtol=0, atol=1e-10)
    assert ta == pytest.approx(tb, abs=1e-10)


@needs_numba
@pytest.mark.parametrize("policy", list(PolicyKind))
def test_run_backends_agree(policy):
    lc = LoadClass(1.0, 1.0, 2.0)
    cfg = SimConfig(lc, lam=20, dt=0.005, policy=policy)
    traj = random_member(BatterySpec(0.25, 0.5, 0.5), 2, 1.0, 0.005)
    a = run(cfg, traj, backend="numpy")
    b = run(cfg, traj, backend="numba")
    assert np.allclose(a.w_achieved, b.w_achieved, rtol=0, atol=1e-9)
    assert np.allclose(a.x_avg, b.x_avg, rtol=0, atol=1e-9)
    assert np.array_equal(a.infeasible, b.infeasible)
    assert a.deadline_failures == b.deadline_failures


@needs_numba
def test_projection_backends_agree():
    w = np.random.default_rng(0).normal(0, 1, 500)
    a = _kernels.project_samples(w, 0.01, 0.25, 1.0, 0.7, 0.0, 1e-12, backend="numpy")
    b = _kernels.project_samples(w, 0.01, 0.25, 1.0, 0.7, 0.0, 1e-12, backend="numba")
    assert np.array_equal(a, b)


def test_env_flag_selects_numpy():
    env = dict(os.environ, LOADBATTERY_DISABLE_NUMBA="1")
    out = subprocess.run(
        [sys.executable, "-c", "from loadbattery import _kernels; print(_kernels.USE_NUMBA)"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "False"


def test_default_rule_is_sequential():
    p, total = _kernels.water_fill(np.zeros(2), np.ones(2), np.array([1.0, 0.0]), 1.0, backend="numpy")
    assert list(p) == [1.0, 0.0] and total == 1.0
