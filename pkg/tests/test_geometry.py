import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mmhomog import _accel
from mmhomog.errors import DegenerateConfigurationError, PointAtInfinityError, SingularHomographyError
from mmhomog.geometry import (
    CornerSet,
    FourPointOffsets,
    Homography,
    apply_homography,
    apply_homography_points,
    compose,
    corner_points,
    dlt_solve,
    dlt_solve_batch,
    dlt_solve_torch,
    invert,
    mace,
)
from mmhomog.gradcheck import central_difference

from conftest import random_homography


def test_apply_identity():
    assert apply_homography(Homography.identity(), (7, 3)) == (7.0, 3.0)


def test_apply_translation():
    assert apply_homography(Homography.translation(5, 3), (0, 0)) == (5.0, 3.0)


def test_apply_perspective_by_hand():
    h = Homography(np.array([[1, 0, 0], [0, 1, 0], [0.001, 0, 1]]))
    x, y = apply_homography(h, (100, 50))
    assert x == pytest.approx(100 / 1.1, abs=1e-12)
    assert y == pytest.approx(50 / 1.1, abs=1e-12)
    assert (round(x, 3), round(y, 3)) == (90.909, 45.455)


def test_point_at_infinity():
    h = Homography(np.array([[1, 0, 0], [0, 1, 0], [0.01, 0, 1]]))
    with pytest.raises(PointAtInfinityError):
        apply_homography(h, (-100, 0))


def test_constructor_normalises_and_rejects_singular():
    h = Homography(2 * np.eye(3))
    assert h.m[2, 2] == 1.0 and np.array_equal(h.m, np.eye(3))
    with pytest.raises(SingularHomographyError):
        Homography(np.array([[1, 2, 0], [2, 4, 0], [0, 0, 1]]))
    with pytest.raises(SingularHomographyError):
        Homography(np.full((3, 3), np.nan))


def test_list_round_trip(rng):
    h = Homography(random_homography(rng))
    assert np.array_equal(Homography.from_list(h.to_list()).m, h.m)


def test_corner_order():
    np.testing.assert_array_equal(CornerSet(128, 64).points, [[0, 0], [127, 0], [0, 63], [127, 63]])


def test_offsets_validation():
    with pytest.raises(ValueError):
        FourPointOffsets(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        FourPointOffsets(np.array([[np.inf, 0]] * 4))


def test_dlt_zero_offsets_is_identity():
    h = dlt_solve(CornerSet(128, 128), FourPointOffsets())
    np.testing.assert_allclose(h.m, np.eye(3), atol=1e-12)


def test_dlt_uniform_shift_is_translation():
    h = dlt_solve(CornerSet(128, 128), np.full((4, 2), [5.0, 3.0]))
    np.testing.assert_allclose(h.m, [[1, 0, 5], [0, 1, 3], [0, 0, 1]], atol=1e-12)
    assert h.m[2, 2] == 1.0


def test_dlt_recovers_generating_homography(rng):
    corners = CornerSet(128, 128)
    for _ in range(50):
        true = random_homography(rng)
        # oracle: push the corners through the known matrix
        dst = corners.points @ true[:, :2].T + true[:, 2]
        dst = dst[:, :2] / dst[:, 2:]
        h = dlt_solve(corners, dst - corners.points)
        np.testing.assert_allclose(h.m, true / true[2, 2], atol=1e-6)
        np.testing.assert_allclose(apply_homography_points(h, corners.points), dst, atol=1e-9)


def test_dlt_degenerate_collinear():
    corners = CornerSet(128, 128)
    # send TL, TR and BR onto one line
    dst = np.array([[0.0, 0.0], [64.0, 64.0], [0.0, 127.0], [127.0, 127.0]])
    with pytest.raises(DegenerateConfigurationError):
        dlt_solve(corners, dst - corners.points)


def test_dlt_batch_flags_degenerate_rows():
    c = corner_points(128, 128)
    offs = np.zeros((2, 4, 2))
    offs[1] = -c  # every corner onto the origin
    h, ok = dlt_solve_batch(c, offs)
    assert ok.tolist() == [True, False]
    np.testing.assert_allclose(h[0], np.eye(3), atol=1e-12)
    assert np.isnan(h[1]).all()


def test_invert_examples(rng):
    np.testing.assert_array_equal(invert(Homography.identity()).m, np.eye(3))
    np.testing.assert_allclose(invert(Homography.translation(5, 3)).m, Homography.translation(-5, -3).m, atol=1e-15)
    for _ in range(20):
        h = Homography(random_homography(rng))
        np.testing.assert_allclose(compose(h, invert(h)).m, np.eye(3), atol=1e-9)
        np.testing.assert_allclose(compose(invert(h), h).m, np.eye(3), atol=1e-9)


def test_compose_examples(rng):
    h = Homography(random_homography(rng))
    np.testing.assert_array_equal(compose(Homography.identity(), h).m, h.m)
    np.testing.assert_array_equal(compose(Homography.translation(1, 0), Homography.translation(0, 1)).m,
                                  Homography.translation(1, 1).m)


def test_compose_pointwise(rng):
    h1, h2 = Homography(random_homography(rng)), Homography(random_homography(rng))
    pts = rng.uniform(0, 128, (100, 2))
    c = compose(h1, h2)
    for p in pts:
        np.testing.assert_allclose(apply_homography(c, p), apply_homography(h1, apply_homography(h2, p)), atol=1e-9)


def test_group_laws(rng):
    a, b, c = (Homography(random_homography(rng)) for _ in range(3))
    np.testing.assert_allclose(compose(compose(a, b), c).m, compose(a, compose(b, c)).m, atol=1e-9)
    np.testing.assert_allclose(invert(compose(a, b)).m, compose(invert(b), invert(a)).m, atol=1e-9)


def test_mace_examples(rng):
    corners = CornerSet(128, 128)
    truth = [Homography(random_homography(rng)) for _ in range(10)]
    assert mace(truth, truth, corners) == 0.0
    shifted = [compose(Homography.translation(3, 4), h) for h in truth]
    assert mace(truth, shifted, corners) == pytest.approx(5.0, abs=1e-9)
    with pytest.raises(ValueError):
        mace([], [], corners)
    with pytest.raises(ValueError):
        mace(truth, truth[:3], corners)


def test_mace_permutation_invariant(rng):
    corners = CornerSet(128, 128)
    truth = [Homography(random_homography(rng)) for _ in range(10)]
    pred = [Homography(random_homography(rng)) for _ in range(10)]
    perm = rng.permutation(10)
    assert mace(truth, pred, corners) == pytest.approx(
        mace([truth[i] for i in perm], [pred[i] for i in perm], corners), rel=1e-14
    )


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-32, 32), min_size=8, max_size=8))
def test_dlt_round_trip_property(vals):
    corners = CornerSet(128, 128)
    offs = np.array(vals).reshape(4, 2)
    try:
        h = dlt_solve(corners, offs)
    except DegenerateConfigurationError:
        return
    np.testing.assert_allclose(apply_homography_points(h, corners.points), corners.points + offs, atol=1e-6)


@pytest.mark.parametrize("use_numba", [True, False])
def test_kernel_backends_agree(rng, use_numba):
    if use_numba and not _accel.HAVE_NUMBA:
        pytest.skip("numba unavailable")
    c = np.broadcast_to(corner_points(128, 128), (200, 4, 2))
    offs = rng.uniform(-32, 32, (200, 4, 2))
    h_nb, cond_nb = _accel.dlt_batch(c, c + offs, use_numba=use_numba)
    h_np, cond_np = _accel.dlt_batch(c, c + offs, use_numba=False)
    np.testing.assert_allclose(h_nb, h_np, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(cond_nb, cond_np, rtol=1e-6)
    p_nb, w_nb = _accel.project(h_nb, c, use_numba=use_numba)
    p_np, w_np = _accel.project(h_np, c, use_numba=False)
    np.testing.assert_allclose(p_nb, p_np, atol=1e-9)


def test_torch_dlt_matches_numpy(rng):
    c = corner_points(128, 128)
    offs = rng.uniform(-32, 32, (16, 4, 2))
    ht = dlt_solve_torch(torch.from_numpy(c), torch.from_numpy(offs)).numpy()
    hn, ok = dlt_solve_batch(c, offs)
    assert ok.all()
    np.testing.assert_allclose(ht, hn, atol=1e-10)


def test_torch_dlt_reports_bad_batch_index():
    c = torch.from_numpy(corner_points(64, 64))
    offs = torch.zeros(3, 4, 2, dtype=torch.float64)
    offs[2] = -c
    with pytest.raises(DegenerateConfigurationError) as exc:
        dlt_solve_torch(c, offs)
    assert exc.value.batch_index == 2


def test_dlt_gradient_matches_finite_differences(rng):
    c = torch.from_numpy(corner_points(128, 128))
    for _ in range(5):
        o = torch.from_numpy(rng.uniform(-32, 32, (1, 4, 2)))
        fn = lambda t: dlt_solve_torch(c, t)[0]
        auto = torch.autograd.functional.jacobian(fn, o)
        fd = central_difference(fn, o, 1e-5)
        assert float((auto - fd).norm() / fd.norm()) < 1e-4
