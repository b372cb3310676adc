import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import linear_sum_assignment

from oracles import brute_force_assignment

from gsmap.errors import InvalidCostError
from gsmap.gaussian import ClassId, GaussianMap, MapElement
from gsmap.losses import LossWeights, focal_background_loss, focal_cls_cost, instance_loss, instance_loss_grad, soft_iou
from gsmap.matching import (
    CROSS_CLASS_COST,
    component_sums,
    cost_matrix,
    hungarian_assign,
    instance_cost,
    map_loss,
    map_loss_grad,
    match_map,
)
from gsmap.raster import RasterGrid, render_element
from gsmap.scene import Scene, make_gt_element
from gsmap.vector import Polyline, best_point_ordering, vector_loss

GRID = RasterGrid(60, 30, -15.0, 15.0, -7.5, 7.5)
N = 8


def gt(class_id, pts):
    closed = class_id == ClassId.PED_CROSSING
    return make_gt_element(class_id, Polyline(pts, closed), GRID, n_points=N)


@pytest.fixture(scope="module")
def scene():
    return Scene(GRID, (
        gt(ClassId.DIVIDER, [[-12, -5], [0, -4], [12, -5]]),
        gt(ClassId.BOUNDARY, [[-12, 5], [12, 6]]),
        gt(ClassId.PED_CROSSING, [[-3, -2], [3, -2], [3, 2], [-3, 2]]),
        gt(ClassId.DIVIDER, [[-12, 0], [12, 1]]),
    ))


def element_on(g, shift=(0.0, 0.0), scores=None):
    pts = g.points(N) + np.asarray(shift)
    params = np.column_stack([pts, np.full(N, 0.9), np.full(N, 0.3), np.zeros(N)])
    return MapElement(params, g.class_id, g.closed, scores)


# ---- hungarian ----

def test_hungarian_examples():
    r = hungarian_assign([[1, 2], [2, 1]])
    assert r.assignment == (0, 1) and r.total_cost == 2
    r = hungarian_assign([[5], [1], [9]])
    assert r.assignment == (None, 0, None) and r.matched == 1


def test_hungarian_random_6x6_integers(rng):
    for _ in range(10):
        c = rng.integers(0, 50, (6, 6)).astype(float)
        assert hungarian_assign(c).total_cost == brute_force_assignment(c)


def test_hungarian_empty_and_invalid():
    assert hungarian_assign(np.zeros((0, 3))).assignment == ()
    assert hungarian_assign(np.zeros((2, 0))).assignment == (None, None)
    with pytest.raises(InvalidCostError):
        hungarian_assign([[1.0, np.nan]])
    with pytest.raises(InvalidCostError):
        hungarian_assign([[np.inf]])
    with pytest.raises(InvalidCostError):
        hungarian_assign([1.0, 2.0])


cost_mats = st.tuples(st.integers(1, 7), st.integers(1, 7)).flatmap(
    lambda s: arrays(np.float64, s, elements=st.floats(-100, 100, allow_nan=False))
)


@pytest.mark.invariant
@given(cost_mats)
def test_hungarian_equals_exhaustive_minimum(c):
    r = hungarian_assign(c)
    assert r.matched == min(c.shape)
    assert len({g for g in r.assignment if g is not None}) == r.matched
    assert r.total_cost == pytest.approx(brute_force_assignment(c), abs=1e-9)


@given(cost_mats)
def test_hungarian_agrees_with_scipy(c):
    rows, cols = linear_sum_assignment(c)
    assert hungarian_assign(c).total_cost == pytest.approx(c[rows, cols].sum(), abs=1e-9)


@pytest.mark.invariant
@given(cost_mats, st.floats(1e-3, 1e3))
def test_hungarian_scale_invariant(c, k):
    a, b = hungarian_assign(c), hungarian_assign(c * k)
    assert b.total_cost == pytest.approx(k * a.total_cost, rel=1e-9, abs=1e-9)
    # ties allow several argmins, so check the scaled argmin is optimal for the original costs
    assert sum(c[p, g] for p, g in b.pairs()) == pytest.approx(a.total_cost, abs=1e-9)


# ---- instance cost ----

def test_instance_cost_is_sum_of_terms(scene, rng):
    g = scene[0]
    params = np.column_stack([g.points(N) + rng.normal(0, 0.4, (N, 2)), rng.uniform(0.3, 1.2, (N, 2)),
                              rng.uniform(-1, 1, N)])
    e = MapElement(params, ClassId.DIVIDER, scores=[0.2, 0.6, 0.2])
    order = best_point_ordering(e, g.points(N), False)
    want = (focal_cls_cost(e.scores, g.class_id) + vector_loss(e, g.points(N), order) / N
            + 1 - soft_iou(render_element(e, GRID), g.mask))
    assert instance_cost(e, g, GRID) == pytest.approx(want, rel=1e-15)


def test_instance_cost_prefers_confident_class(scene):
    g = scene[1]
    right = element_on(g, scores=[0.05, 0.05, 0.9])
    wrong = element_on(g, scores=[0.05, 0.9, 0.05])
    assert instance_cost(right, g, GRID) < instance_cost(wrong, g, GRID)


def test_instance_cost_on_gt_is_small(scene):
    for g in scene:
        e = element_on(g)
        c = instance_cost(e, g, GRID)
        assert focal_cls_cost(e.scores, g.class_id) == 0.0
        assert c == pytest.approx(1 - soft_iou(render_element(e, GRID), g.mask), abs=1e-12)


# ---- match_map ----

def test_match_map_identity(scene):
    pred = GaussianMap(tuple(element_on(g) for g in scene))
    r = match_map(pred, scene)
    assert r.assignment == (0, 1, 2, 3)
    assert all(vector_loss(pred[p], scene[g].points(N), r.point_orderings[p]) == 0 for p, g in r.pairs())


def test_match_map_cross_class_never_matched(scene):
    cost = cost_matrix(GaussianMap((element_on(scene[2]),)), scene)
    assert cost[0, 0] == CROSS_CLASS_COST and cost[0, 2] < CROSS_CLASS_COST
    lone = GaussianMap((element_on(scene[1], shift=(0, 10)),))
    r = match_map(lone, Scene(GRID, (scene[0],)))
    assert r.assignment == (None,)


@pytest.mark.invariant
@pytest.mark.parametrize("perm", list(itertools.permutations(range(4)))[::5])
def test_match_map_permutation_invariant(scene, perm):
    elems = [element_on(g, shift=(0.3 * k, -0.2)) for k, g in enumerate(scene)]
    base = match_map(GaussianMap(tuple(elems)), scene)
    shuffled = match_map(GaussianMap(tuple(elems[i] for i in perm)), scene)
    assert {(perm[p], g) for p, g in shuffled.pairs()} == set(base.pairs())
    assert shuffled.total_cost == pytest.approx(base.total_cost, rel=1e-12)


def test_match_map_three_pred_two_gt_mixed_classes(scene, rng):
    sub = Scene(GRID, (scene[0], scene[3]))
    preds = GaussianMap((
        element_on(scene[3], shift=(0.4, 0.1)),
        element_on(scene[1]),
        element_on(scene[0], shift=(-0.6, 0.3)),
    ))
    cost = cost_matrix(preds, sub)
    legal = []
    for perm in itertools.permutations(range(3), 2):
        if all(cost[p, g] < CROSS_CLASS_COST for g, p in enumerate(perm)):
            legal.append((sum(cost[p, g] for g, p in enumerate(perm)), perm))
    best_cost, best = min(legal)
    r = match_map(preds, sub)
    assert r.total_cost == pytest.approx(best_cost, rel=1e-12)
    assert {(p, g) for g, p in enumerate(best)} == set(r.pairs())


# ---- map loss ----

def test_map_loss_adds_background_terms(scene):
    extra = element_on(scene[0], shift=(0, 9), scores=[0.1, 0.3, 0.1])
    pred = GaussianMap(tuple(element_on(g) for g in scene) + (extra,))
    out = map_loss(pred, scene)
    assert out.match.assignment[-1] is None
    assert out.per_element[-1] == pytest.approx(focal_background_loss(extra.scores))
    sums = component_sums(out.per_element)
    matched = sum(x.total for x in out.per_element[:-1])
    assert out.total == pytest.approx(matched + focal_background_loss(extra.scores), rel=1e-14)
    assert sums.total == pytest.approx(out.total, rel=1e-14)
    assert sums.total == pytest.approx(sums.cls + sums.vector + 10.0 * sums.raster, rel=1e-12)


def test_map_loss_locality(scene):
    pred = GaussianMap(tuple(element_on(g, shift=(0.2, 0.1)) for g in scene))
    full = map_loss(pred, scene)
    reduced = map_loss(GaussianMap(pred.elements[:3]), Scene(GRID, scene.elements[:3]))
    for a, b in zip(full.per_element[:3], reduced.per_element):
        assert a.total == pytest.approx(b.total, rel=1e-14)


def test_map_loss_vector_part_vanishes_on_gt(scene):
    pred = GaussianMap(tuple(element_on(g) for g in scene))
    out = map_loss(pred, scene, w=LossWeights(lambda_r=0))
    assert out.total == 0.0


@pytest.mark.invariant
def test_map_gradient_equals_instance_gradient_with_frozen_match(scene):
    pred = GaussianMap(tuple(element_on(g, shift=(0.25, -0.15)) for g in scene))
    match = match_map(pred, scene)
    _, grads = map_loss_grad(pred, scene, match=match)
    for p, g in match.pairs():
        _, want = instance_loss_grad(pred[p], scene[g], GRID, None, match.point_orderings[p])
        np.testing.assert_array_equal(grads[p], want)


@pytest.mark.invariant
def test_assignment_held_fixed_within_step(scene):
    # a frozen match keeps pairing even after elements move far enough to swap
    a, b = scene[0], scene[3]
    sub = Scene(GRID, (a, b))
    pred = GaussianMap((element_on(a), element_on(b)))
    match = match_map(pred, sub)
    swapped = GaussianMap((element_on(b), element_on(a)))
    frozen = map_loss(swapped, sub, match=match)
    fresh = map_loss(swapped, sub)
    assert frozen.match.assignment == (0, 1)
    assert fresh.match.assignment == (1, 0)
    assert frozen.total > fresh.total
    want = instance_loss(swapped[0], a, GRID, None, match.point_orderings[0]).total
    assert frozen.per_element[0].total == pytest.approx(want)
