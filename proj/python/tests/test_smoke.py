import numpy as np
import pytest

import trajaux


def straight(B=2, S=12, D=6):
    t = np.arange(S, dtype=float)[None, :, None]
    direction = np.linspace(1.0, 2.0, D)[None, None, :]
    return np.repeat(t * direction, B, axis=0), np.array([[0, S]] * B)


def curved(B=3, S=16, D=6, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(B, S, D)), np.array([[1, S - 1]] * B)


def test_straight_line_is_zero():
    h, spans = straight()
    with trajaux.open("stp", 6) as s:
        value, grads, _ = s.eval_with_grad(h, spans)
    assert abs(value) < 1e-12
    assert grads["hidden"].shape == h.shape


def test_gradient_matches_finite_difference():
    h, spans = curved()
    s = trajaux.open("jfr", 6)
    value, grads, _ = s.eval_with_grad(h, spans)
    idx = (1, 5, 2)
    step = 1e-6
    hp = h.copy()
    hp[idx] += step
    hm = h.copy()
    hm[idx] -= step
    fd = (s.eval_with_grad(hp, spans)[0] - s.eval_with_grad(hm, spans)[0]) / (2 * step)
    assert fd == pytest.approx(grads["hidden"][idx], rel=1e-5, abs=1e-9)


def test_bank_and_ema():
    h, spans = curved()
    local = trajaux.open("local_jfr", 6)
    assert "fallback" in local.eval_with_grad(h, spans)[2]
    local.bank_insert(h, spans)
    assert "fallback" not in local.eval_with_grad(h, spans)[2]

    byol = trajaux.open("byol", 6, seed=1)
    v0 = byol.eval_with_grad(h, spans, seed=2)[0]
    for _ in range(5):
        byol.eval_with_grad(h, spans, seed=2)
        byol.step(0.05)
        byol.ema_tick()
    assert byol.eval_with_grad(h, spans, seed=2)[0] < v0


def test_diagnose_returns_report():
    h, spans = curved(S=30)
    s = trajaux.open("mstb_jfr", 6)
    rep = s.diagnose(h, spans, seed=3)
    assert "anisotropy" in rep
    assert "curvature" in rep


def test_errors_map_to_exceptions():
    with pytest.raises(trajaux.ConfigError):
        trajaux.open("nope", 6)
    with pytest.raises(trajaux.ConfigError):
        trajaux.open("jfr", 6, {"bogus": 1})
    s = trajaux.open("jfr", 6)
    h, spans = curved(D=5)
    with pytest.raises(trajaux.ShapeError):
        s.eval_with_grad(h, spans)
