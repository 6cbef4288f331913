import logging
from itertools import permutations

import numpy as np
import pytest

from lde.decouple import (DdmParams, channel_similarity, ddm_forward, fuse_domain, msls_forward, msls_masks,
                          msls_refine, project_ur)
from lde.numcore import RunningStats, Rng, Tensor, finite_diff_check, parameter


def make_ddm(C, rng, r=2, zero_attention=False):
    h = max(1, C // r)
    fc2_w = np.zeros((C, h)) if zero_attention else rng.normal((C, h))
    fc2_b = np.zeros(C) if zero_attention else rng.normal(C)
    return DdmParams(parameter(np.ones(C // 2)), parameter(np.zeros(C // 2)), parameter(np.ones(C // 2)),
                     parameter(np.zeros(C // 2)), parameter(rng.normal((h, C))), parameter(rng.normal(h)),
                     parameter(fc2_w), parameter(fc2_b), RunningStats())


def test_ddm_reconstructs_normalized_map():
    r = Rng(0)
    F = Tensor(4 * r.normal((3, 6, 4, 4)) + 2)
    Fp, Fm, a, Fn = ddm_forward(F, make_ddm(6, r), "train")
    assert np.abs(Fp.data + Fm.data - Fn.data).max() < 1e-6
    assert a.shape == (3, 6) and np.all((a.data > 0) & (a.data < 1))


def test_ddm_half_attention_splits_symmetrically():
    r = Rng(1)
    Fp, Fm, a, Fn = ddm_forward(Tensor(r.normal((2, 4, 3, 3))), make_ddm(4, r, zero_attention=True), "train")
    assert np.all(a.data == 0.5)
    np.testing.assert_allclose(Fp.data, 0.5 * Fn.data)
    np.testing.assert_array_equal(Fp.data, Fm.data)


def test_ddm_constant_channels_vanish_in_instance_norm_half():
    F = Rng(2).normal((2, 4, 3, 3))
    F[:, :2] = np.array([3.0, -1.0])[None, :, None, None]
    _, _, _, Fn = ddm_forward(Tensor(F), make_ddm(4, Rng(2)), "train")
    assert np.allclose(Fn.data[:, :2], 0.0)


def test_ddm_rejects_bad_inputs():
    p = make_ddm(4, Rng(3))
    with pytest.raises(ValueError, match="even"):
        ddm_forward(Tensor(np.zeros((2, 3, 2, 2))), p)
    with pytest.raises(ValueError, match="N >= 2"):
        ddm_forward(Tensor(np.zeros((1, 4, 2, 2))), p, "train")


def test_project_ur_examples():
    r = Rng(4)
    F4 = Tensor(r.normal((2, 6, 2, 2)))
    assert project_ur(F4, 4, None, None, (2, 2)) is F4
    const = np.array([1.5, -2.0, 0.25])
    x = Tensor(np.broadcast_to(const[None, :, None, None], (1, 3, 4, 4)).copy())
    out = project_ur(x, 2, Tensor(np.eye(3).reshape(3, 3, 1, 1)), Tensor(np.zeros(3)), (2, 2))
    np.testing.assert_allclose(out.data, np.broadcast_to(const[None, :, None, None], (1, 3, 2, 2)))
    ones = project_ur(Tensor(np.ones((1, 2, 8, 8))), 1, Tensor(np.eye(2).reshape(2, 2, 1, 1)), Tensor(np.zeros(2)),
                      (4, 4))
    assert np.array_equal(ones.data, np.ones((1, 2, 4, 4)))


def test_project_ur_commutes_pool_and_projection():
    r = Rng(5)
    x, w, b = r.normal((2, 3, 8, 8)), r.normal((5, 3, 1, 1)), r.normal(5)
    got = project_ur(Tensor(x), 1, Tensor(w), Tensor(b), (2, 2)).data
    full = np.einsum("oc,nchw->nohw", w[:, :, 0, 0], x) + b[None, :, None, None]
    ref = full.reshape(2, 5, 2, 4, 2, 4).mean(axis=(3, 5))
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_project_ur_refuses_upsampling():
    with pytest.raises(ValueError, match="upsampling"):
        project_ur(Tensor(np.zeros((1, 2, 2, 2))), 1, Tensor(np.zeros((2, 2, 1, 1))), None, (4, 4))


def test_channel_similarity_examples():
    A = np.zeros((1, 2, 2, 2))
    A[0, 0, 0, 0] = A[0, 1, 1, 1] = 1.0
    np.testing.assert_allclose(channel_similarity(Tensor(A), Tensor(A)).data[0], np.eye(2), atol=1e-9)
    r = Rng(6)
    A, B = r.normal((1, 3, 2, 2)), r.normal((1, 3, 2, 2))
    B[0, 2] = A[0, 0]
    assert channel_similarity(Tensor(A), Tensor(B)).data[0, 0, 2] == pytest.approx(1.0)
    a = np.array([1.0, 0.0]).reshape(1, 1, 1, 2)
    b = np.array([0.0, 1.0]).reshape(1, 1, 1, 2)
    assert channel_similarity(Tensor(a), Tensor(b)).data.item() == 0.0


def test_msls_masks_examples():
    Q = np.array([[1.0, 0.2], [0.2, 1.0]])
    lift, supp = msls_masks(Q, [Q, Q, Q])
    assert lift.all() and not supp.any()
    M = np.array([[0.5, 0.1], [0.3, 0.9]])
    lift, supp = msls_masks(Q, [M, M, M])
    np.testing.assert_array_equal(lift, [[1, 1], [0, 1]])
    np.testing.assert_array_equal(supp, 1 - lift)
    lift, _ = msls_masks(Q - 5, [Q, M, Q])
    assert not lift.any()


def test_msls_masks_requires_three_matching_matrices():
    with pytest.raises(ValueError):
        msls_masks(np.eye(2), [np.eye(2)] * 2)
    with pytest.raises(ValueError):
        msls_masks(np.eye(2), [np.eye(2), np.eye(2), np.eye(3)])


def test_msls_refine_examples():
    r = Rng(7)
    F = Tensor(r.normal((2, 3, 2, 2)))
    Q = channel_similarity(F, F)
    full = np.ones((3, 3), dtype=np.int8)
    assert np.array_equal(msls_refine(F, Q, full, Tensor(np.array(0.0))).data, F.data)
    np.testing.assert_allclose(msls_refine(F, Q, np.eye(3, dtype=np.int8), Tensor(np.array(1.0))).data, 2 * F.data)
    F2 = Tensor(r.normal((1, 2, 2, 2)))
    out = msls_refine(F2, Tensor(np.ones((1, 2, 2))), np.ones((2, 2), dtype=np.int8), Tensor(np.array(1.0))).data
    np.testing.assert_allclose(out, F2.data + F2.data.mean(axis=1, keepdims=True))


def test_msls_refine_dead_row_falls_back_to_self(caplog):
    F = Tensor(Rng(8).normal((1, 2, 2, 2)))
    lift = np.array([[0, 0], [1, 1]], dtype=np.int8)
    with caplog.at_level(logging.WARNING, logger="lde.decouple"):
        out = msls_refine(F, channel_similarity(F, F), lift, Tensor(np.array(1.0))).data
    assert "fully suppressed" in caplog.text
    np.testing.assert_allclose(out[0, 0], 2 * F.data[0, 0])


def test_fuse_domain_examples():
    zeros = [Tensor(np.zeros((1, 2, 2, 2))) for _ in range(4)]
    assert not fuse_domain(zeros).data.any()
    maps = [Tensor(np.full((1, 2, 2, 2), float(v))) for v in (1, 2, 3, 4)]
    assert np.all(fuse_domain(maps).data == 10.0)
    r = Rng(9)
    rand = [Tensor(r.normal((1, 2, 2, 2))) for _ in range(4)]
    ref = fuse_domain(rand).data
    for perm in permutations(range(4)):
        np.testing.assert_allclose(fuse_domain([rand[i] for i in perm]).data, ref, atol=1e-15)
    with pytest.raises(ValueError):
        fuse_domain(rand[:3])


def test_ddm_msls_chain_gradient():
    """2 samples, C=4, 4x4 maps through DDM, projection and MSLS."""
    r = Rng(10)
    C = 4
    p = make_ddm(C, r)
    for t in (p.in_beta, p.bn_beta):
        t.data = 0.3 * r.normal(t.shape)
    F = parameter(r.normal((2, C, 4, 4)))
    ws = [parameter(r.normal((C, C, 1, 1))) for _ in range(3)]
    betas = [parameter(np.array(0.5 + 0.1 * i)) for i in range(4)]
    weights = Tensor(r.normal((2, C, 2, 2)))

    def f():
        p.bn_stats = RunningStats()
        _, Fm, _, _ = ddm_forward(F, p, "train")
        ur = [project_ur(Fm, i + 1, ws[i], None, (2, 2)) for i in range(3)]
        ur.append(project_ur(Fm[:, :, ::2, ::2], 4, None, None, (2, 2)))
        fused, _ = msls_forward(ur, betas)
        return (fused * weights).sum()

    params = [F, *ws, *betas, p.in_gamma, p.in_beta, p.bn_gamma, p.bn_beta, p.fc1_w, p.fc1_b, p.fc2_w, p.fc2_b]
    rep = finite_diff_check(f, params, h=1e-6, tol=1e-5)
    assert rep.passed, rep.per_param
