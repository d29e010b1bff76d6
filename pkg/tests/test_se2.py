import math

import numpy as np
import pytest

from deskvla.se2 import AlignmentError, Pose2, align_clips, align_points, compose, inverse, stitch_chain, wrap_angle


def test_examples():
    b = Pose2(1.0, -2.0, 0.3)
    assert compose(Pose2.identity(), b).as_array().tolist() == b.as_array().tolist()
    assert np.allclose(inverse(Pose2(3, 4, 0)).apply(np.array([3.0, 4.0])), [0, 0], atol=1e-15)
    r = Pose2(0, 0, math.pi / 2)
    assert np.allclose(compose(r, r).apply(np.array([1.0, 0.0])), [-1, 0], atol=1e-15)


def test_heading_wrapped():
    assert Pose2(0, 0, 3 * math.pi).heading == pytest.approx(math.pi)
    assert -math.pi < wrap_angle(-math.pi) <= math.pi
    assert Pose2(0, 0, math.pi / 2).compose(Pose2(0, 0, math.pi)).heading == pytest.approx(-math.pi / 2)


def test_matrix_matches_apply():
    p = Pose2(0.5, 2.0, -1.1)
    pts = np.random.default_rng(0).normal(size=(5, 2))
    hom = np.column_stack([pts, np.ones(5)]) @ p.matrix().T
    assert np.allclose(hom[:, :2], p.apply(pts), atol=1e-14)
    assert np.allclose(Pose2.from_matrix(p.matrix()).as_array(), p.as_array())


def test_alignment_identity_and_errors():
    pts = np.random.default_rng(1).normal(size=(6, 2))
    al = align_points(pts, pts)
    assert np.allclose(al.transform.as_array(), 0, atol=1e-12)
    with pytest.raises(AlignmentError, match="at least 2"):
        align_points(pts[:1], pts[:1])
    with pytest.raises(AlignmentError, match="unobservable"):
        align_points(np.ones((4, 2)), np.ones((4, 2)))


def test_alignment_equivariance():
    rng = np.random.default_rng(2)
    src = rng.normal(size=(10, 2)) * 5
    t = Pose2(1.0, 2.0, 0.7)
    dst = t.apply(src) + rng.normal(size=(10, 2)) * 0.01
    g = Pose2(-3.0, 4.0, 2.0)
    a = align_points(src, dst).transform
    b = align_points(g.apply(src), g.apply(dst)).transform
    rel = g.inverse().compose(b).compose(g)
    assert np.allclose(rel.as_array(), a.as_array(), atol=1e-10)


def test_trim_drops_outlier():
    rng = np.random.default_rng(3)
    src = rng.normal(size=(10, 2)) * 5
    t = Pose2(1.0, -1.0, 0.4)
    dst = t.apply(src)
    dst[0] += 3.0
    al = align_points(src, dst, trim=0.1)
    assert np.allclose(al.transform.as_array(), t.as_array(), atol=1e-9)
    assert al.inliers == 9


def test_single_clip_and_join_error():
    clip = np.random.default_rng(4).normal(size=(8, 2))
    assert np.array_equal(stitch_chain([clip], []).points, clip)
    with pytest.raises(AlignmentError, match="join 1"):
        stitch_chain([clip, clip, np.zeros((8, 2))], [4, 4])


def test_align_clips_direction():
    path = np.column_stack([np.arange(10.0), np.sin(np.arange(10.0))])
    pose = Pose2(2.0, 1.0, 0.5)
    tail = path[6:]
    head = pose.inverse().apply(path[6:])
    assert np.allclose(align_clips(tail, head).transform.as_array(), pose.as_array(), atol=1e-12)
