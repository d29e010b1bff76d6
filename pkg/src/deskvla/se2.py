"""Planar rigid motions, closed-form 2D alignment and clip-chain stitching."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def wrap_angle(theta):
    """Wrap to (-pi, pi]; values already in range are returned untouched."""
    theta = np.asarray(theta, dtype=float)
    inside = (theta > -math.pi) & (theta <= math.pi)
    out = np.where(inside, theta, math.pi - np.mod(math.pi - theta, 2 * math.pi))
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class Pose2:
    """SE(2) element: rotation by ``heading`` then translation by (x, y)."""

    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "heading", wrap_angle(float(self.heading)))

    @classmethod
    def identity(cls) -> "Pose2":
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, a) -> "Pose2":
        return cls(float(a[0]), float(a[1]), float(a[2]))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose2":
        return cls(float(m[0, 2]), float(m[1, 2]), math.atan2(m[1, 0], m[0, 0]))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading])

    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.heading), math.sin(self.heading)
        return np.array([[c, -s, self.x], [s, c, self.y], [0.0, 0.0, 1.0]])

    def compose(self, other: "Pose2") -> "Pose2":
        """``self ∘ other``: apply ``other`` first."""
        c, s = math.cos(self.heading), math.sin(self.heading)
        return Pose2(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.heading + other.heading,
        )

    __matmul__ = compose

    def inverse(self) -> "Pose2":
        c, s = math.cos(self.heading), math.sin(self.heading)
        return Pose2(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.heading)

    def apply(self, pts) -> np.ndarray:
        """Transform a point (2,) or points (N, 2)."""
        pts = np.asarray(pts, dtype=float)
        c, s = math.cos(self.heading), math.sin(self.heading)
        x, y = pts[..., 0], pts[..., 1]
        return np.stack([c * x - s * y + self.x, s * x + c * y + self.y], axis=-1)

    def rotate(self, vecs) -> np.ndarray:
        """Rotate free vectors (velocities, accelerations) without translating."""
        vecs = np.asarray(vecs, dtype=float)
        c, s = math.cos(self.heading), math.sin(self.heading)
        x, y = vecs[..., 0], vecs[..., 1]
        return np.stack([c * x - s * y, s * x + c * y], axis=-1)


def compose(a: Pose2, b: Pose2) -> Pose2:
    return a.compose(b)


def inverse(a: Pose2) -> Pose2:
    return a.inverse()


def apply(a: Pose2, pts) -> np.ndarray:
    return a.apply(pts)


def relative_transform(p_i: Pose2, p_j: Pose2) -> Pose2:
    """T_{j->i} = P_i ∘ P_j^{-1}."""
    return p_i.compose(p_j.inverse())


class AlignmentError(ValueError):
    pass


@dataclass
class Alignment:
    transform: Pose2
    residuals: np.ndarray
    mean_residual: float
    inliers: int


def align_points(source, target, inlier_threshold: float = 0.05, trim: float = 0.0) -> Alignment:
    """Rigid T minimising sum ||T(source_k) - target_k||^2 (closed-form 2D Procrustes).

    ``trim`` > 0 refits after dropping that fraction of worst residuals.
    """
    src = np.asarray(source, dtype=float)
    dst = np.asarray(target, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise AlignmentError(f"point sets must both be (N, 2); got {src.shape} and {dst.shape}")
    if len(src) < 2:
        raise AlignmentError(f"need at least 2 point pairs, got {len(src)}")
    keep = np.arange(len(src))
    t = _fit(src, dst)
    if trim > 0:
        res = np.linalg.norm(t.apply(src) - dst, axis=1)
        n_keep = max(2, int(round(len(src) * (1 - trim))))
        keep = np.sort(np.argsort(res, kind="stable")[:n_keep])
        t = _fit(src[keep], dst[keep])
    res = np.linalg.norm(t.apply(src) - dst, axis=1)
    return Alignment(t, res, float(res[keep].mean()), int((res <= inlier_threshold).sum()))


def _fit(src: np.ndarray, dst: np.ndarray) -> Pose2:
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - cs, dst - cd
    spread = float((a * a).sum())
    scale = max(float(np.abs(src).max()), 1.0)
    if spread <= (1e-12 * scale) ** 2:
        raise AlignmentError("degenerate alignment: source points coincide, rotation unobservable")
    sxx = float((a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1]).sum())
    sxy = float((a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]).sum())
    theta = math.atan2(sxy, sxx)
    c, s = math.cos(theta), math.sin(theta)
    tx = cd[0] - (c * cs[0] - s * cs[1])
    ty = cd[1] - (s * cs[0] + c * cs[1])
    return Pose2(tx, ty, theta)


def align_clips(tail_j, head_next, **kw) -> Alignment:
    """T_{(j+1)->j}: maps clip j+1's frame into clip j's frame."""
    return align_points(head_next, tail_j, **kw)


@dataclass
class StitchResult:
    points: np.ndarray
    poses: list[Pose2]
    joins: list[Alignment]
    clip_index: np.ndarray

    def residual_report(self) -> list[dict]:
        return [
            {"join": k, "mean_residual": j.mean_residual, "max_residual": float(j.residuals.max()), "inliers": j.inliers}
            for k, j in enumerate(self.joins)
        ]


def stitch_chain(clips, overlaps, **kw) -> StitchResult:
    """Express every clip's local trajectory in clip 0's frame.

    ``overlaps[k]`` is the number of waypoints shared by the tail of clip k
    and the head of clip k+1. The stitched trajectory keeps clip 0 entirely
    and appends the non-overlapping remainder of each later clip.
    """
    clips = [np.asarray(c, dtype=float) for c in clips]
    if len(overlaps) != len(clips) - 1:
        raise ValueError(f"need {len(clips) - 1} overlap counts, got {len(overlaps)}")
    poses = [Pose2.identity()]
    joins: list[Alignment] = []
    pieces = [clips[0]]
    owner = [np.zeros(len(clips[0]), dtype=int)]
    for k, n in enumerate(overlaps):
        if n > len(clips[k]) or n > len(clips[k + 1]):
            raise AlignmentError(f"join {k}: overlap {n} exceeds clip length")
        try:
            al = align_clips(clips[k][len(clips[k]) - n :], clips[k + 1][:n], **kw)
        except AlignmentError as exc:
            raise AlignmentError(f"join {k}: {exc}") from exc
        joins.append(al)
        pose = poses[-1].compose(al.transform)
        poses.append(pose)
        pieces.append(pose.apply(clips[k + 1][n:]))
        owner.append(np.full(len(clips[k + 1]) - n, k + 1))
    return StitchResult(np.concatenate(pieces), poses, joins, np.concatenate(owner))
