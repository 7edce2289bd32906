import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from asafl.models import (Direction, ModelArch, ParamVector, adjust_complexity, backward, build_family,
                          deserialize_params, forward, init_params, loss_and_grad, param_count,
                          predict_proba, project_params, serialize_params, utility)
from oracles import finite_difference_grad, reference_mlp_loss


@pytest.fixture
def family():
    return build_family(20, 4, [[16], [32], [64]])


def test_param_counts(family):
    # 16*20+16+4*16+4 = 404; 32*20+32+4*32+4 = 804; 64*20+64+4*64+4 = 1604
    assert [family.param_count(r) for r in range(3)] == [404, 804, 1604]
    assert param_count(ModelArch(0, (20, 4))) == 84


def test_identical_widths_share_maps():
    fam = build_family(5, 3, [[4], [4], [4]])
    assert all(np.array_equal(fam.coord_maps[0], m) for m in fam.coord_maps)


@pytest.mark.parametrize("hidden", [[[16], [8], [32]], [[4], [4, 4], [8]], [[4], [4]]])
def test_family_rejects_bad_nesting(hidden):
    with pytest.raises(ValueError):
        build_family(5, 3, hidden)


def test_coord_maps_nested(family):
    for r in range(2):
        assert set(family.coord_maps[r]) < set(family.coord_maps[r + 1])
    assert np.array_equal(family.coord_maps[2], np.arange(1604))


def test_submodel_equals_masked_full(family):
    # zeroing the exclusive coordinates of the full model reproduces each rung's logits
    w = init_params(family, 1).astype(float)
    X = np.random.default_rng(0).normal(size=(7, 20))
    y = np.arange(7) % 4
    for r in range(3):
        masked = np.zeros_like(w)
        masked[family.coord_maps[r]] = w[family.coord_maps[r]]
        small, _ = forward(family.archs[r], w[family.coord_maps[r]], X, y)
        full, _ = forward(family.archs[2], masked, X, y)
        assert np.allclose(small, full, atol=1e-12)


def test_zero_params_uniform_loss(family):
    X = np.random.default_rng(0).normal(size=(8, 20))
    _, loss = forward(family.archs[0], np.zeros(404), X, np.arange(8) % 4)
    assert abs(loss - math.log(4)) < 1e-6


def test_confident_logit_loss_near_zero():
    arch = ModelArch(0, (1, 2))
    _, loss = forward(arch, np.array([0.0, 0.0, 50.0, 0.0]), np.array([[1.0]]), np.array([0]))
    assert loss < 1e-12


def test_loss_matches_reference(family):
    rng = np.random.default_rng(3)
    w = init_params(family, 3).astype(float)
    X = rng.normal(size=(5, 20))
    y = rng.integers(0, 4, 5)
    for r in range(3):
        params = w[family.coord_maps[r]]
        ref = reference_mlp_loss(family.archs[r].layer_widths, params, X, y)
        assert abs(forward(family.archs[r], params, X, y)[1] - ref) <= 1e-10


def test_two_hidden_layers_match_reference():
    fam = build_family(6, 3, [[4, 3], [5, 4], [8, 6]])
    rng = np.random.default_rng(2)
    w = rng.normal(size=fam.param_count(1))
    X, y = rng.normal(size=(4, 6)), rng.integers(0, 3, 4)
    ref = reference_mlp_loss(fam.archs[1].layer_widths, w, X, y)
    assert abs(forward(fam.archs[1], w, X, y)[1] - ref) <= 1e-10


def relative_error(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def test_gradient_finite_differences(family):
    rng = np.random.default_rng(0)
    X, y = rng.normal(size=(6, 20)), rng.integers(0, 4, 6)
    for r in range(3):
        arch = family.archs[r]
        w = rng.normal(0, 0.3, family.param_count(r))
        g = backward(arch, w, X, y)
        for j in rng.choice(len(w), 10, replace=False):
            e = np.zeros_like(w)
            e[j] = 1e-5
            fd = (forward(arch, w + e, X, y)[1] - forward(arch, w - e, X, y)[1]) / 2e-5
            assert relative_error(g[j], fd) <= 1e-4


def test_full_gradient_small_net():
    arch = ModelArch(0, (3, 4, 2))
    rng = np.random.default_rng(7)
    w = rng.normal(size=param_count(arch))
    X, y = rng.normal(size=(5, 3)), rng.integers(0, 2, 5)
    fd = finite_difference_grad(lambda v: forward(arch, v, X, y)[1], w)
    assert np.allclose(loss_and_grad(arch, w, X, y)[1], fd, rtol=1e-4, atol=1e-8)


def test_symmetric_data_gives_symmetric_gradient():
    # two classes, one per sample, mirror-image inputs: the weight gradient is mirror-symmetric
    arch = ModelArch(0, (2, 2))
    X = np.array([[1.0, 0.0], [0.0, 1.0]])
    g = backward(arch, np.zeros(6), X, np.array([0, 1]))
    assert np.allclose(g[4:], 0.0)
    assert np.allclose(g[:4], g[:4][::-1])
    assert g[0] == g[3] != 0


def test_predict_proba_rows_sum_to_one(family):
    p = predict_proba(family.archs[1], init_params(family, 0)[family.coord_maps[1]],
                      np.random.default_rng(0).normal(size=(9, 20)))
    assert np.allclose(p.sum(axis=1), 1.0)


def test_shape_errors(family):
    with pytest.raises(ValueError):
        forward(family.archs[0], np.zeros(10), np.zeros((1, 20)), [0])
    with pytest.raises(ValueError):
        forward(family.archs[0], np.zeros(404), np.zeros((1, 19)), [0])


def test_utility_examples(family):
    assert utility(family, 2, 1.0, 1.0, 0.5, 0.5) == pytest.approx(1.0)
    assert utility(family, 0, 0.3, 0.42, 1.0, 0.0) == 0.42
    # rung-2 demand is 1.0, device score 0.5: efficiency one half
    assert utility(family, 2, 0.5, 0.8) == pytest.approx(1.02, abs=1e-12)


def test_adjust_complexity():
    assert adjust_complexity(0, Direction.DOWN) == 0
    assert adjust_complexity(1, Direction.UP) == 2
    assert adjust_complexity(2, Direction.UP) == 2
    assert adjust_complexity(1, Direction.HOLD) == 1


def test_project_identity_and_grow(family):
    local = np.arange(404, dtype=float)
    assert np.array_equal(project_params(family, 0, 0, local), local)
    grown = project_params(family, 0, 2, local, np.full(1604, 7.0))
    assert np.array_equal(grown[family.coord_maps[0]], local)
    mask = np.ones(1604, bool)
    mask[family.coord_maps[0]] = False
    assert np.all(grown[mask] == 7.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2), st.integers(0, 2), st.integers(0, 1000))
def test_project_down_up_keeps_shared(a, b, seed):
    fam = build_family(4, 3, [[2], [3], [5]])
    rng = np.random.default_rng(seed)
    local = rng.normal(size=fam.param_count(a))
    g = rng.normal(size=fam.param_count(2))
    there = project_params(fam, a, b, local, g)
    back = project_params(fam, b, a, there, g)
    shared = min(a, b)
    pos = np.searchsorted(fam.coord_maps[a], fam.coord_maps[shared])
    assert np.array_equal(back[pos], local[pos])


def test_serialize_roundtrip(family):
    w = init_params(family, 4)
    blob = serialize_params(ParamVector(w, 2)) + serialize_params(ParamVector(w[:3], 0))
    first, off = deserialize_params(blob)
    second, end = deserialize_params(blob, off)
    assert first.rung == 2 and np.array_equal(first.values, w)
    assert second.rung == 0 and end == len(blob)
    with pytest.raises(ValueError):
        deserialize_params(blob[:-1], off)


def test_init_deterministic_float32(family):
    a, b = init_params(family, 5), init_params(family, 5)
    assert a.dtype == np.float32 and a.tobytes() == b.tobytes()
