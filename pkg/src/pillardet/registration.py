"""Point-to-point ICP registration between two roadside LiDARs.

The initial transform (e.g. surveyed with RTK GPS) is part of the
parameters; registration refines it by alternating nearest-neighbor
correspondence search and closed-form rigid estimation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PointCloud, RigidTransform


class DegenerateGeometryError(ValueError):
    """Fewer than 3 pairs, or a rank-deficient correspondence set."""


class NoOverlapError(RuntimeError):
    """No correspondences within range; carries the last transform."""

    def __init__(self, message, last_transform: RigidTransform):
        super().__init__(message)
        self.last_transform = last_transform


@dataclass(frozen=True)
class IcpParams:
    max_iterations: int = 50
    correspondence_max_dist: float = 2.0
    convergence_eps: float = 1e-6
    initial: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.correspondence_max_dist <= 0:
            raise ValueError("correspondence_max_dist must be positive")


@dataclass(frozen=True)
class RegistrationResult:
    transform: RigidTransform
    rmse: float
    iterations: int
    correspondence_count: int
    rmse_history: tuple = ()


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """One centroid per occupied voxel; grid origin fixed at (0, 0, 0)."""
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    n = len(cloud)
    if n == 0:
        return PointCloud.empty(cloud.timestamp)
    cells = np.floor(cloud.xyz / voxel_size).astype(np.int64)
    # row-major order over unique cells keeps the output deterministic
    _, inverse, counts = np.unique(cells, axis=0, return_inverse=True,
                                   return_counts=True)
    k = counts.shape[0]
    sums = np.zeros((k, 3))
    np.add.at(sums, inverse, cloud.xyz)
    isum = np.zeros(k)
    np.add.at(isum, inverse, cloud.intensity)
    centroids = sums / counts[:, None]
    return PointCloud(centroids, np.clip(isum / counts, 0.0, 1.0),
                      cloud.timestamp)


def estimate_rigid(source: np.ndarray, target: np.ndarray) -> RigidTransform:
    """Least-squares rigid fit of paired points via SVD of the
    cross-covariance, with the usual determinant (reflection) fix."""
    source = np.asarray(source, dtype=float).reshape(-1, 3)
    target = np.asarray(target, dtype=float).reshape(-1, 3)
    if source.shape != target.shape or source.shape[0] < 3:
        raise DegenerateGeometryError("need >= 3 correspondence pairs")
    cs = source.mean(axis=0)
    ct = target.mean(axis=0)
    h = (source - cs).T @ (target - ct)
    u, sv, vt = np.linalg.svd(h)
    # rank < 2 means the pairs are collinear (or coincident)
    if np.sum(sv > 1e-12 * max(sv[0], 1e-300)) < 2:
        raise DegenerateGeometryError("rank-deficient correspondence set")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    diag = np.diag([1.0, 1.0, d])
    r = vt.T @ diag @ u.T
    t = ct - r @ cs
    return RigidTransform(r, t)


# above this source size, a strided-subsample pass runs first and seeds
# the full-resolution iterations, which then only have to polish
_COARSE_THRESHOLD = 4000
_COARSE_SIZE = 2000


def icp_point_to_point(source: PointCloud, target: PointCloud,
                       params: IcpParams | None = None) -> RegistrationResult:
    """Classic point-to-point ICP mapping `source` into `target`'s frame."""
    params = params or IcpParams()
    if len(source) == 0 or len(target) == 0:
        raise ValueError("both clouds must be non-empty")
    if len(source) > _COARSE_THRESHOLD:
        step = max(1, len(source) // _COARSE_SIZE)
        coarse = PointCloud(source.xyz[::step], source.intensity[::step],
                            source.timestamp)
        try:
            seed = icp_point_to_point(coarse, target, params).transform
        except NoOverlapError:
            seed = params.initial
        params = IcpParams(params.max_iterations,
                           params.correspondence_max_dist,
                           params.convergence_eps, seed)
    tree = cKDTree(target.xyz)
    transform = params.initial
    src = source.xyz
    history = []
    prev_rmse = None
    iterations = 0
    n_pairs = 0
    for iterations in range(1, params.max_iterations + 1):
        moved = src @ transform.rotation.T + transform.translation
        dist, idx = tree.query(moved, workers=-1,
                               distance_upper_bound=params.correspondence_max_dist)
        valid = np.isfinite(dist)
        n_pairs = int(valid.sum())
        if n_pairs < 3:
            raise NoOverlapError(
                f"only {n_pairs} correspondences within "
                f"{params.correspondence_max_dist} m", transform)
        pairs_src = src[valid]
        pairs_tgt = target.xyz[idx[valid]]
        transform = estimate_rigid(pairs_src, pairs_tgt)
        res = pairs_src @ transform.rotation.T + transform.translation - pairs_tgt
        rmse = float(np.sqrt(np.mean(np.sum(res * res, axis=1))))
        history.append(rmse)
        if prev_rmse is not None and abs(prev_rmse - rmse) < params.convergence_eps:
            break
        prev_rmse = rmse
    return RegistrationResult(transform, history[-1], iterations, n_pairs,
                              tuple(history))
