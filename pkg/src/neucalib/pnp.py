"""Differentiable pose estimation from 2D-3D correspondences.

EPnP (single-beta case) provides a closed-form initialization from four
control points; k unrolled Gauss-Newton steps on a 6-D local SE(3)
parametrization then minimize the pixel reprojection error. The EPnP
init is treated as a gradient constant: differentiating through the
eigen-decomposition is ill-conditioned near eigenvalue crossings, while
the unrolled refinement carries exact gradients of the finite procedure
to the 2-D targets (and through them to the matching weights).

Every quantity inside the refinement loop lives on the tape: the
per-point Jacobian rows, the damped normal equations, the 6x6 solve, and
the Rodrigues update, so reverse mode sees the true derivative of each
step rather than a fixed-point approximation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import SolveError
from .geometry import CameraIntrinsics, RigidPose, project_to_so3

MIN_CORRESPONDENCES = 6
GN_DAMPING = 1e-6
MIN_DEPTH = 1e-6
DEGENERATE_SPREAD = 1e-8  # relative floor on the smallest principal extent

_GENERATORS = (
    np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]]),
    np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]),
    np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]),
)


@dataclass
class PnPProblem:
    """Known 3-D points, observed/predicted 2-D targets, and intrinsics.

    ``targets`` may be a tape tensor (the trainable path) or a plain array.
    """

    points: np.ndarray  # N x 3
    targets: Tensor | np.ndarray  # N x 2
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not isinstance(self.targets, Tensor):
            self.targets = ad.constant(np.asarray(self.targets, dtype=np.float64))
        if self.targets.shape != (self.points.shape[0], 2):
            raise SolveError(
                f"targets shape {self.targets.shape} does not match {self.points.shape[0]} points")
        if self.points.shape[0] < MIN_CORRESPONDENCES:
            raise SolveError(
                f"need at least {MIN_CORRESPONDENCES} correspondences, got {self.points.shape[0]}")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def target_values(self) -> np.ndarray:
        return self.targets.value


@dataclass(frozen=True)
class PoseEstimate:
    pose: RigidPose
    residual_px: float  # RMS reprojection error
    iterations: int


@dataclass
class RefinedPose:
    """Pose after unrolled refinement, with both tape and numpy views."""

    rotation: Tensor  # 3x3, tape-connected to the targets
    translation: Tensor  # 3x1
    residual: Tensor  # 1x1 RMS reprojection error
    estimate: PoseEstimate  # detached summary with re-orthonormalized pose
    objectives: list[float]  # sum of squared residuals per iteration incl. final


# --- EPnP initialization --------------------------------------------------

def control_points(points: np.ndarray) -> np.ndarray:
    """Centroid plus the three principal directions scaled to the cloud extent."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    centroid = points.mean(axis=0)
    centered = points - centroid
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    spread = svals / np.sqrt(points.shape[0])
    if spread[2] < DEGENERATE_SPREAD * max(spread[0], 1e-300):
        raise SolveError("degenerate point spread: points are (near) coplanar or collinear")
    return np.vstack([centroid] + [centroid + spread[j] * vt[j] for j in range(3)])


def barycentric_coordinates(points: np.ndarray, ctrl: np.ndarray) -> np.ndarray:
    """Per-point weights alpha with sum 1 and sum_j alpha_ij ctrl_j = p_i."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    hom = np.vstack([ctrl.T, np.ones(4)])  # 4x4
    rhs = np.vstack([points.T, np.ones(points.shape[0])])
    return np.linalg.solve(hom, rhs).T


def epnp_init(problem: PnPProblem) -> RigidPose:
    """Closed-form pose from the smallest eigenvector of the EPnP system.

    Single-beta case: the camera-frame control points are the null-space
    direction scaled to preserve inter-control-point distances, with the
    sign fixed by requiring positive median depth.
    """
    k = problem.intrinsics
    targets = problem.target_values()
    ctrl_w = control_points(problem.points)
    alphas = barycentric_coordinates(problem.points, ctrl_w)

    xn = (targets[:, 0] - k.cx) / k.fx
    yn = (targets[:, 1] - k.cy) / k.fy
    n = problem.n
    m = np.zeros((2 * n, 12))
    for j in range(4):
        m[0::2, 3 * j] = alphas[:, j]
        m[0::2, 3 * j + 2] = -alphas[:, j] * xn
        m[1::2, 3 * j + 1] = alphas[:, j]
        m[1::2, 3 * j + 2] = -alphas[:, j] * yn

    _, eigvecs = np.linalg.eigh(m.T @ m)
    v = eigvecs[:, 0].reshape(4, 3)

    num = den = 0.0
    for a in range(4):
        for b in range(a + 1, 4):
            d_cam = np.linalg.norm(v[a] - v[b])
            d_world = np.linalg.norm(ctrl_w[a] - ctrl_w[b])
            num += d_cam * d_world
            den += d_cam * d_cam
    if den <= 0:
        raise SolveError("EPnP null vector collapsed to a point")
    ctrl_c = (num / den) * v
    cam = alphas @ ctrl_c
    if np.median(cam[:, 2]) < 0:
        cam = -cam
    rot, trans = _absolute_orientation(problem.points, cam)
    return RigidPose(rot, trans)


def _absolute_orientation(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form rigid fit dst ~= R src + t (Horn/Kabsch, no scale)."""
    sc, dc = src.mean(axis=0), dst.mean(axis=0)
    h = (src - sc).T @ (dst - dc)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return rot, dc - rot @ sc


# --- unrolled Gauss-Newton refinement --------------------------------------

def _rodrigues(w: Tensor) -> Tensor:
    """exp([w]x) on the tape; series branch keeps it smooth through zero."""
    theta2 = ad.matmul(ad.transpose(w), w)  # 1x1
    if theta2.value[0, 0] > 1e-8:
        theta = ad.sqrt(theta2)
        s = ad.div(ad.sin(theta), theta)
        c = ad.div(ad.shift(ad.negate(ad.cos(theta)), 1.0), theta2)
    else:
        theta4 = ad.mul(theta2, theta2)
        s = ad.add(ad.shift(ad.scale(theta2, -1.0 / 6.0), 1.0),
                   ad.scale(theta4, 1.0 / 120.0))
        c = ad.add(ad.shift(ad.scale(theta2, -1.0 / 24.0), 0.5),
                   ad.scale(theta4, 1.0 / 720.0))
    skew = None
    for axis in range(3):
        term = ad.scalar_mul(ad.gather_rows(w, [axis]), ad.constant(_GENERATORS[axis]))
        skew = term if skew is None else ad.add(skew, term)
    return ad.add(ad.add(ad.constant(np.eye(3)), ad.scalar_mul(s, skew)),
                  ad.scalar_mul(c, ad.matmul(skew, skew)))


def _residual_rows(rot: Tensor, trans: Tensor, pts_t: Tensor, ones_n: Tensor,
                   k: CameraIntrinsics, tu: Tensor, tv: Tensor):
    """Camera points and pixel residuals for the current pose, all on tape."""
    q = ad.add(ad.matmul(rot, pts_t), ad.matmul(trans, ones_n))  # 3xN
    x, y, z = (ad.gather_rows(q, [i]) for i in range(3))
    if np.any(z.value <= MIN_DEPTH):
        raise SolveError("point depth collapsed during refinement")
    u = ad.shift(ad.scale(ad.div(x, z), k.fx), k.cx)
    v = ad.shift(ad.scale(ad.div(y, z), k.fy), k.cy)
    return x, y, z, ad.sub(u, tu), ad.sub(v, tv)


def gauss_newton_refine(problem: PnPProblem, init: RigidPose,
                        k_iters: int = 5) -> RefinedPose:
    """k unrolled damped Gauss-Newton steps minimizing reprojection error.

    The local parametrization is an axis-angle increment plus a translation
    increment, composed on the left; every linear solve and pose update is
    recorded so gradients reach the targets.
    """
    if k_iters < 1:
        raise SolveError("k_iters must be at least 1")
    k = problem.intrinsics
    n = problem.n
    pts_t = ad.constant(problem.points.T)
    ones_n = ad.constant(np.ones((1, n)))
    zeros_col = ad.constant(np.zeros((n, 1)))
    tu = ad.transpose(ad.gather_cols(problem.targets, [0]))  # 1xN
    tv = ad.transpose(ad.gather_cols(problem.targets, [1]))
    damping = ad.constant(GN_DAMPING * np.eye(6))

    rot = ad.constant(init.rotation)
    trans = ad.constant(init.translation.reshape(3, 1))
    objectives: list[float] = []

    for _ in range(k_iters):
        x, y, z, ru, rv = _residual_rows(rot, trans, pts_t, ones_n, k, tu, tv)
        objectives.append(float((ru.value ** 2).sum() + (rv.value ** 2).sum()))

        inv_z = ad.div(ones_n, z)
        qx, qy, qz = ad.transpose(x), ad.transpose(y), ad.transpose(z)
        a1 = ad.transpose(ad.scale(inv_z, k.fx))  # N x 1 entries fx / z
        a3 = ad.transpose(ad.scale(ad.div(x, ad.mul(z, z)), -k.fx))
        b2 = ad.transpose(ad.scale(inv_z, k.fy))
        b3 = ad.transpose(ad.scale(ad.div(y, ad.mul(z, z)), -k.fy))

        # rows of the Jacobian: [(q x a)^T, a^T] with a = (a1, 0, a3)
        u_mat = ad.hstack([
            ad.mul(qy, a3),
            ad.sub(ad.mul(qz, a1), ad.mul(qx, a3)),
            ad.negate(ad.mul(qy, a1)),
            a1, zeros_col, a3,
        ])
        v_mat = ad.hstack([
            ad.sub(ad.mul(qy, b3), ad.mul(qz, b2)),
            ad.negate(ad.mul(qx, b3)),
            ad.mul(qx, b2),
            zeros_col, b2, b3,
        ])

        h = ad.add(ad.add(ad.matmul(ad.transpose(u_mat), u_mat),
                          ad.matmul(ad.transpose(v_mat), v_mat)), damping)
        g = ad.add(ad.matmul(ad.transpose(u_mat), ad.transpose(ru)),
                   ad.matmul(ad.transpose(v_mat), ad.transpose(rv)))
        delta = ad.negate(ad.solve(h, g))  # 6 x 1
        if not np.all(np.isfinite(delta.value)):
            raise SolveError("non-finite Gauss-Newton update")

        rot_delta = _rodrigues(ad.gather_rows(delta, [0, 1, 2]))
        rot = ad.matmul(rot_delta, rot)
        trans = ad.add(ad.matmul(rot_delta, trans), ad.gather_rows(delta, [3, 4, 5]))

    _, _, _, ru, rv = _residual_rows(rot, trans, pts_t, ones_n, k, tu, tv)
    objectives.append(float((ru.value ** 2).sum() + (rv.value ** 2).sum()))
    residual = ad.sqrt(ad.scale(ad.add(ad.reduce(ad.mul(ru, ru)),
                                       ad.reduce(ad.mul(rv, rv))), 1.0 / n))
    estimate = PoseEstimate(
        pose=RigidPose(project_to_so3(rot.value), trans.value[:, 0]),
        residual_px=residual.item(), iterations=k_iters)
    return RefinedPose(rot, trans, residual, estimate, objectives)


def solve_pose(problem: PnPProblem, k_iters: int = 5,
               init: RigidPose | None = None) -> RefinedPose:
    """EPnP initialization (gradient-constant) plus unrolled refinement."""
    if init is None:
        init = epnp_init(problem)
    return gauss_newton_refine(problem, init, k_iters)


def pose_loss(refined: RefinedPose, gt: RigidPose, delta: float = 1.0) -> Tensor:
    """Huber penalty on R_gt^T R_hat - I plus Huber on t_gt - t_hat."""
    rot_err = ad.sub(ad.matmul(ad.constant(gt.rotation.T), refined.rotation),
                     ad.constant(np.eye(3)))
    trans_err = ad.sub(ad.constant(gt.translation.reshape(3, 1)), refined.translation)
    return ad.add(ad.huber(rot_err, delta), ad.huber(trans_err, delta))
