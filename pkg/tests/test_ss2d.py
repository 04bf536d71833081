import numpy as np
import pytest

from vmseg import tensor as T
from vmseg.gradcheck import check_gradients
from vmseg.scan import ScanParams, selective_scan
from vmseg.ss2d import (expand_routes, merge_routes, route_orders, scan_expand, scan_merge, ss2d,
                        ss2d_forward)
from vmseg.tensor import DimensionError, Tensor

from conftest import leaf


def test_route_table_on_2x2():
    perms = [tuple(o.permutation) for o in route_orders(2, 2)]
    assert perms == [(0, 1, 2, 3), (0, 2, 1, 3), (3, 1, 2, 0), (3, 2, 1, 0)]


def test_route_table_on_2x3():
    perms = [tuple(o.permutation) for o in route_orders(2, 3)]
    assert perms[0] == (0, 1, 2, 3, 4, 5)
    assert perms[1] == (0, 3, 1, 4, 2, 5)
    assert perms[2] == perms[1][::-1] and perms[3] == perms[0][::-1]


def test_single_pixel_grid():
    seqs = scan_expand(np.arange(3.0).reshape(3, 1, 1))
    assert all(s.shape == (1, 3) for s in seqs)
    assert all(np.array_equal(s.data, seqs[0].data) for s in seqs)


@pytest.mark.parametrize("h,w", [(1, 1), (2, 2), (3, 5), (4, 1)])
def test_inverse_reconstructs(h, w, rng):
    fm = rng.normal(size=(2, h, w))
    flat = fm.reshape(2, -1).T
    for o, seq in zip(route_orders(h, w), scan_expand(fm)):
        assert np.array_equal(seq.data, flat[o.permutation])
        assert np.array_equal(seq.data[o.inverse], flat)


def test_merge_of_expand_is_four_times(rng):
    fm = rng.normal(size=(3, 4, 5))
    out = scan_merge(scan_expand(fm), route_orders(4, 5), 4, 5)
    assert np.allclose(out.data, 4 * fm)


def test_merge_additive_identity(rng):
    fm = rng.normal(size=(2, 3, 3))
    seqs = scan_expand(fm)
    zeros = [Tensor(np.zeros_like(s.data)) for s in seqs]
    out = scan_merge([seqs[2]] + zeros[1:], [route_orders(3, 3)[2]] + list(route_orders(3, 3)[1:]),
                     3, 3)
    assert np.allclose(out.data, fm)


def test_merge_matches_pixel_accumulation(rng):
    C, h, w = 2, 3, 4
    fm = rng.normal(size=(C, h, w))
    Ws = rng.normal(size=(4, C, C))
    outs = [s @ Tensor(Ws[r]) for r, s in enumerate(scan_expand(fm))]
    got = scan_merge(outs, route_orders(h, w), h, w).data
    ref = np.zeros((C, h, w))
    for r, o in enumerate(route_orders(h, w)):
        for t, pos in enumerate(o.permutation):
            i, j = divmod(int(pos), w)
            ref[:, i, j] += outs[r].data[t]
    assert np.allclose(got, ref)


def test_merge_validates():
    seqs = scan_expand(np.zeros((1, 2, 2)))
    with pytest.raises(DimensionError):
        scan_merge(seqs, route_orders(2, 2), 3, 2)
    with pytest.raises(DimensionError):
        scan_merge(seqs[:3], route_orders(2, 2), 2, 2)


def test_channels_last_paths_agree(rng):
    x = rng.normal(size=(2, 3, 4, 5))
    stacked = expand_routes(Tensor(x)).data
    seqs = scan_expand(x.transpose(0, 3, 1, 2))
    for r in range(4):
        assert np.array_equal(stacked[:, r], seqs[r].data)
    assert np.allclose(merge_routes(Tensor(stacked), 3, 4).data, 4 * x)


def test_zero_input_zero_output(rng):
    p = ScanParams.init(3, 4, rng, routes=4)
    assert not ss2d_forward(np.zeros((3, 4, 4)), p).data.any()


@pytest.mark.parametrize("h,w,C", [(1, 1, 1), (2, 3, 4), (5, 2, 3)])
def test_output_shape(h, w, C, rng):
    p = ScanParams.init(C, 2, rng, routes=4)
    assert ss2d_forward(rng.normal(size=(2, C, h, w)), p).shape == (2, C, h, w)


def naive_ss2d(fm, p, mode="exact"):
    """Materialize the four sequences and run each route separately."""
    C, h, w = fm.shape
    total = np.zeros((h * w, C))
    for r, o in enumerate(route_orders(h, w)):
        seq = fm.reshape(C, -1).T[o.permutation]
        sel = lambda t: t.data[r]  # noqa: E731  (every tensor has a leading route axis)
        A = -np.exp(sel(p.a_log))
        z = seq @ sel(p.dt_down)
        if p.dt_up is not None:
            z = z @ sel(p.dt_up)
        delta = np.log1p(np.exp(z + sel(p.dt_bias)))
        y = selective_scan(Tensor(seq), Tensor(delta), Tensor(A), Tensor(seq @ sel(p.w_B)),
                           Tensor(seq @ sel(p.w_C)), Tensor(sel(p.D)), mode=mode).data
        total[o.permutation] += y
    return total.T.reshape(C, h, w)


@pytest.mark.parametrize("mode", ["exact", "simplified"])
def test_matches_naive_reference_3x3(mode, rng):
    with T.default_dtype(np.float64):
        p = ScanParams.init(1, 3, rng, routes=4, dtype=np.float64)
        for t in p.tensors().values():
            t.data = t.data + rng.normal(0, 0.3, t.shape)
        fm = rng.normal(size=(1, 3, 3))
        assert np.allclose(ss2d_forward(fm, p, mode).data, naive_ss2d(fm, p, mode), atol=1e-12)


def test_routes_are_independent(rng):
    with T.default_dtype(np.float64):
        p = ScanParams.init(2, 3, rng, routes=4, dtype=np.float64)
        fm = rng.normal(size=(2, 3, 4))
        base = ss2d_forward(fm, p).data
        p.w_C.data[1] += 1.0
        assert not np.allclose(ss2d_forward(fm, p).data, base)


def test_rotation_symmetry_with_shared_routes(rng):
    """With one parameter set for every route, the route set of the transposed
    grid is the route set of the original, so SS2D commutes with transposition."""
    with T.default_dtype(np.float64):
        p = ScanParams.init(2, 3, rng, dtype=np.float64)
        fm = rng.normal(size=(2, 3, 4))
        a = ss2d_forward(fm, p).data
        b = ss2d_forward(fm.transpose(0, 2, 1), p).data
        assert np.allclose(a, b.transpose(0, 2, 1), atol=1e-12)


def test_half_turn_symmetry_with_shared_routes(rng):
    with T.default_dtype(np.float64):
        p = ScanParams.init(2, 3, rng, dtype=np.float64)
        fm = rng.normal(size=(2, 3, 4))
        a = ss2d_forward(fm, p).data
        b = ss2d_forward(fm[:, ::-1, ::-1], p).data
        assert np.allclose(a, b[:, ::-1, ::-1], atol=1e-12)


def test_width_mismatch(rng):
    p = ScanParams.init(3, 2, rng, routes=4)
    with pytest.raises(DimensionError):
        ss2d(Tensor(np.zeros((1, 2, 2, 4))), p)


def test_ss2d_gradient(rng, f64):
    p = ScanParams.init(3, 2, rng, routes=4, dt_rank=2, dtype=np.float64)
    for t in p.tensors().values():
        t.data = t.data + rng.normal(0, 0.3, t.shape)
    fm = leaf(rng, 1, 3, 2, 3)
    leaves = [fm] + list(p.tensors().values())
    assert check_gradients(lambda: ss2d_forward(fm, p), leaves) < 1e-6
