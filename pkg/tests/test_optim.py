"""Momentum SGD: hand oracles, array/tensor agreement, server updater."""

import numpy as np
import pytest

from minigraph import tensor as tmod
from minigraph.errors import ArgumentError
from minigraph.optim import SGDConfig, make_sgd_updater, sgd_arrays, sgd_step


def run_tensor_step(w0, g0, v0, cfg):
    w = tmod.from_host(np.shape(w0), "float32", np.atleast_1d(w0))
    g = tmod.from_host(np.shape(g0), "float32", np.atleast_1d(g0))
    v = tmod.from_host(np.shape(v0), "float32", np.atleast_1d(v0))
    tmp = tmod.zeros(np.shape(w0) or (1,))
    sgd_step(w, g, v, tmp, cfg)
    return (np.asarray(tmod.to_host(w), np.float32),
            np.asarray(tmod.to_host(v), np.float32))


def test_plain_sgd_example():
    cfg = SGDConfig(eta=0.1, momentum=0.0, weight_decay=0.0)
    w, _v = run_tensor_step([1.0], [0.5], [0.0], cfg)
    np.testing.assert_allclose(w, [0.95], rtol=1e-6)


def test_zero_gradient_decays_velocity_only():
    cfg = SGDConfig(eta=0.1, momentum=0.5, weight_decay=0.0)
    w, v = run_tensor_step([2.0], [0.0], [0.8], cfg)
    np.testing.assert_allclose(v, [0.4], rtol=1e-6)
    np.testing.assert_allclose(w, [2.4], rtol=1e-6)


def test_two_steps_match_scalar_recursion_oracle():
    eta, mom, wd = 0.05, 0.9, 1e-4
    cfg = SGDConfig(eta=eta, momentum=mom, weight_decay=wd)
    w, v = 1.5, 0.0
    grads = [0.3, -0.7]
    for g in grads:
        v = mom * v - eta * (g + wd * w)
        w = w + v
    wt = tmod.from_host((1,), "float64", [1.5])
    gt = tmod.zeros((1,), "float64")
    vt = tmod.zeros((1,), "float64")
    tmp = tmod.zeros((1,), "float64")
    for g in grads:
        tmod.load_host(gt, [g])
        sgd_step(wt, gt, vt, tmp, cfg)
    np.testing.assert_allclose(tmod.to_host(wt), [w], rtol=1e-12)
    np.testing.assert_allclose(tmod.to_host(vt), [v], rtol=1e-12)


def test_arrays_and_tensors_agree_bitwise():
    rs = np.random.RandomState(0)
    cfg = SGDConfig(eta=0.05, momentum=0.9, weight_decay=1e-4)
    w0 = rs.randn(17).astype(np.float32)
    v0 = rs.randn(17).astype(np.float32)
    wa, va = w0.copy(), v0.copy()
    wt = tmod.from_host((17,), "float32", w0)
    vt = tmod.from_host((17,), "float32", v0)
    gt = tmod.zeros((17,))
    tmp = tmod.zeros((17,))
    for step in range(10):
        g = rs.randn(17).astype(np.float32)
        sgd_arrays(wa, g, va, cfg)
        tmod.load_host(gt, g)
        sgd_step(wt, gt, vt, tmp, cfg)
    assert np.array_equal(wa, np.asarray(tmod.to_host(wt), np.float32))
    assert np.array_equal(va, np.asarray(tmod.to_host(vt), np.float32))


def test_config_validation():
    with pytest.raises(ArgumentError):
        SGDConfig(eta=0.0)
    with pytest.raises(ArgumentError):
        SGDConfig(eta=0.1, momentum=1.0)
    with pytest.raises(ArgumentError):
        SGDConfig(eta=0.1, weight_decay=-1e-3)


def test_sgd_step_shape_mismatch():
    cfg = SGDConfig(eta=0.1)
    w = tmod.zeros((3,))
    with pytest.raises(ArgumentError):
        sgd_step(w, tmod.zeros((4,)), tmod.zeros((3,)), tmod.zeros((3,)), cfg)


def test_updater_scaling_restores_local_gradient():
    # Workers push shard gradients scaled up by the worker count; the
    # updater's division restores the local update bitwise.
    cfg = SGDConfig(eta=0.05, momentum=0.9, weight_decay=1e-4)
    rs = np.random.RandomState(1)
    w_ref = rs.randn(9).astype(np.float32)
    v_ref = np.zeros(9, np.float32)
    w_srv = w_ref.copy()
    upd = make_sgd_updater(cfg, scale=4)
    for step in range(5):
        g = rs.randn(9).astype(np.float32)
        sgd_arrays(w_ref, g, v_ref, cfg)
        upd(0, w_srv, g * np.float32(4.0))
    assert np.array_equal(w_ref, w_srv)
