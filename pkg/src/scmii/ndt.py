"""Normal Distributions Transform map building and 6-DoF scan matching.

The reference cloud is binned into cubic cells; each cell with enough
points becomes a Gaussian. A scan is scored by summing, per point, the
unnormalized Gaussian of the cell it lands in, and the pose maximizing that
score is found by damped Newton iterations on (tx, ty, tz, roll, pitch, yaw)
with the analytic gradient and Hessian.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import least_squares

from .geometry import Pose6DoF, RigidTransform, euler_rotation, from_pose
from .pointcloud import PointCloud, voxel_downsample

log = logging.getLogger(__name__)

EIG_RATIO = 1e-3
EIG_FLOOR = 1e-6

_KEY_BITS = 21
_KEY_OFF = 1 << (_KEY_BITS - 1)


class NdtError(RuntimeError):
    pass


@dataclass(frozen=True)
class NdtCell:
    mean: np.ndarray
    covariance: np.ndarray
    inv_covariance: np.ndarray
    count: int


@dataclass(frozen=True, eq=False)
class NdtMap:
    """Cell Gaussians stored as parallel arrays sorted by packed cell key."""

    cell_size: float
    origin: np.ndarray
    keys: np.ndarray        # (M,) int64, ascending
    indices: np.ndarray     # (M, 3) int64
    means: np.ndarray       # (M, 3)
    covariances: np.ndarray  # (M, 3, 3)
    inv_covariances: np.ndarray  # (M, 3, 3)
    counts: np.ndarray      # (M,)

    def __len__(self) -> int:
        return len(self.keys)

    def cell(self, index) -> NdtCell | None:
        key = _pack(np.asarray(index, dtype=np.int64).reshape(1, 3))[0]
        pos = np.searchsorted(self.keys, key)
        if pos >= len(self.keys) or self.keys[pos] != key:
            return None
        return NdtCell(self.means[pos], self.covariances[pos], self.inv_covariances[pos], int(self.counts[pos]))

    def cells(self) -> dict[tuple[int, int, int], NdtCell]:
        return {
            tuple(int(v) for v in self.indices[i]): NdtCell(
                self.means[i], self.covariances[i], self.inv_covariances[i], int(self.counts[i])
            )
            for i in range(len(self))
        }

    def cell_index(self, pts: np.ndarray) -> np.ndarray:
        return np.floor((pts - self.origin) / self.cell_size).astype(np.int64)

    def lookup(self, pts: np.ndarray) -> np.ndarray:
        """Row into the cell arrays for each point, -1 where the cell is empty."""
        return self.lookup_index(self.cell_index(pts))

    def lookup_index(self, idx: np.ndarray) -> np.ndarray:
        in_range = np.all(np.abs(idx) < _KEY_OFF, axis=1)
        keys = _pack(np.where(in_range[:, None], idx, 0))
        pos = np.searchsorted(self.keys, keys)
        pos_c = np.minimum(pos, max(len(self.keys) - 1, 0))
        found = in_range & (pos < len(self.keys))
        if len(self.keys):
            found &= self.keys[pos_c] == keys
        return np.where(found, pos_c, -1)


@dataclass(frozen=True)
class AlignOptions:
    max_iterations: int = 50
    step_threshold: float = 1e-4
    damping: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 0.1
    max_translation_step: float = 0.5
    max_rotation_step: float = 0.2

    def __post_init__(self):
        vals = (self.max_iterations, self.step_threshold, self.damping, self.damping_up,
                self.damping_down, self.max_translation_step, self.max_rotation_step)
        if any(v <= 0 for v in vals):
            raise ValueError("all alignment options must be positive")


@dataclass(frozen=True)
class AlignStats:
    iterations: int
    score: float
    converged: bool


def _pack(idx: np.ndarray) -> np.ndarray:
    u = idx + _KEY_OFF
    return (u[:, 0] << (2 * _KEY_BITS)) | (u[:, 1] << _KEY_BITS) | u[:, 2]


def regularize_covariance(cov: np.ndarray) -> np.ndarray:
    """Clamp eigenvalues to ``max(1e-3 * lambda_max, 1e-6)``; works on (..., 3, 3)."""
    w, v = np.linalg.eigh(cov)
    floor = np.maximum(EIG_RATIO * w[..., -1:], EIG_FLOOR)
    w = np.maximum(w, floor)
    out = (v * w[..., None, :]) @ np.swapaxes(v, -1, -2)
    return (out + np.swapaxes(out, -1, -2)) / 2


def build_ndt_map(reference: PointCloud, cell_size: float = 2.0, min_points: int = 5,
                  origin=(0.0, 0.0, 0.0)) -> NdtMap:
    if cell_size <= 0:
        raise ValueError("cell_size must be positive")
    if len(reference) == 0:
        raise NdtError("cannot build an NDT map from an empty cloud")
    min_points = max(int(min_points), 2)
    origin = np.asarray(origin, dtype=np.float64)
    pts = reference.points
    idx = np.floor((pts - origin) / cell_size).astype(np.int64)
    keys = _pack(idx)
    uniq, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
    keep = counts >= min_points

    order = np.argsort(inverse, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    sorted_pts = pts[order]
    sums = np.add.reduceat(sorted_pts, starts, axis=0)
    means = sums / counts[:, None]
    centered = sorted_pts - means[inverse[order]]
    outer = np.einsum("ni,nj->nij", centered, centered)
    scatter = np.add.reduceat(outer, starts, axis=0)

    counts_k = counts[keep]
    means_k = means[keep]
    cov = scatter[keep] / (counts_k - 1)[:, None, None]
    cov = regularize_covariance(cov)
    inv = np.linalg.inv(cov)
    inv = (inv + np.swapaxes(inv, -1, -2)) / 2
    first = starts[keep]
    return NdtMap(
        cell_size=float(cell_size),
        origin=origin,
        keys=uniq[keep],
        indices=idx[order][first],
        means=means_k,
        covariances=cov,
        inv_covariances=inv,
        counts=counts_k,
    )


def _rotation_derivatives(roll: float, pitch: float, yaw: float):
    """First and second partials of Rz(yaw) Ry(pitch) Rx(roll) w.r.t. (roll, pitch, yaw)."""
    def parts(a, axis):
        c, s = np.cos(a), np.sin(a)
        if axis == 0:
            r = np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
            d1 = np.array([[0, 0, 0], [0, -s, -c], [0, c, -s]])
            d2 = np.array([[0, 0, 0], [0, -c, s], [0, -s, -c]])
        elif axis == 1:
            r = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
            d1 = np.array([[-s, 0, c], [0, 0, 0], [-c, 0, -s]])
            d2 = np.array([[-c, 0, -s], [0, 0, 0], [s, 0, -c]])
        else:
            r = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
            d1 = np.array([[-s, -c, 0], [c, -s, 0], [0, 0, 0]])
            d2 = np.array([[-c, s, 0], [-s, -c, 0], [0, 0, 0]])
        return r.astype(float), d1.astype(float), d2.astype(float)

    rx, dx, ddx = parts(roll, 0)
    ry, dy, ddy = parts(pitch, 1)
    rz, dz, ddz = parts(yaw, 2)
    first = np.stack([rz @ ry @ dx, rz @ dy @ rx, dz @ ry @ rx])
    second = np.empty((3, 3, 3, 3))
    second[0, 0] = rz @ ry @ ddx
    second[1, 1] = rz @ ddy @ rx
    second[2, 2] = ddz @ ry @ rx
    second[0, 1] = second[1, 0] = rz @ dy @ dx
    second[0, 2] = second[2, 0] = dz @ ry @ dx
    second[1, 2] = second[2, 1] = dz @ dy @ rx
    return first, second


def _transform(points: np.ndarray, pose: Pose6DoF) -> np.ndarray:
    r = euler_rotation(pose.roll, pose.pitch, pose.yaw)
    return points @ r.T + np.array([pose.tx, pose.ty, pose.tz])


_NEIGHBOURS = np.array(
    [(dx, dy, dz) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)], dtype=np.int64
)


def halo_weight(u: np.ndarray):
    """Per-axis cell weight and its first/second derivatives w.r.t. ``u``.

    ``u`` is the offset from a cell center in cell units. The weight is exactly
    1 inside the cell (|u| <= 0.5) and falls to 0 at |u| = 1.5 along a
    smoothstep, so the summed score is C1 in the pose.
    """
    a = np.abs(u)
    t = np.clip(a - 0.5, 0.0, 1.0)
    ramp = (a > 0.5) & (a < 1.5)
    w = 1.0 - t * t * (3.0 - 2.0 * t)
    dw = np.where(ramp, -6.0 * t * (1.0 - t) * np.sign(u), 0.0)
    ddw = np.where(ramp, -(6.0 - 12.0 * t), 0.0)
    return w, dw, ddw


_NEIGHBOUR_KEYS = (_NEIGHBOURS[:, 0] << (2 * _KEY_BITS)) + (_NEIGHBOURS[:, 1] << _KEY_BITS) + _NEIGHBOURS[:, 2]


def _pairs(ndt: NdtMap, moved: np.ndarray):
    """All (point, cell row) pairs within the 27-cell neighbourhood of each point."""
    base = ndt.cell_index(moved)
    # Keep one cell of slack so offset keys never carry between packed fields.
    ok = np.all(np.abs(base) < _KEY_OFF - 1, axis=1)
    keys = (_pack(base[ok])[:, None] + _NEIGHBOUR_KEYS[None, :]).ravel()
    if len(ndt.keys) == 0 or len(keys) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    pos = np.minimum(np.searchsorted(ndt.keys, keys), len(ndt.keys) - 1)
    hit = np.flatnonzero(ndt.keys[pos] == keys)
    pid = np.flatnonzero(ok)[hit // len(_NEIGHBOURS)]
    return pid, pos[hit]


def ndt_score(ndt: NdtMap, scan: PointCloud, pose: Pose6DoF) -> float:
    """Sum over scan points of the Gaussian of the cell each point lands in.

    Each point also picks up the Gaussians of its 26 neighbouring cells, each
    scaled by a separable taper that is 1 at the shared face and 0 one cell
    further out. This keeps the score continuous when points cross cell faces.
    """
    score, _, _, _ = _evaluate(ndt, scan.points, pose, derivatives=False)
    return score


def ndt_score_derivatives(ndt: NdtMap, scan: PointCloud, pose: Pose6DoF):
    """(score, gradient (6,), Hessian (6, 6), number of contributing point/cell pairs)."""
    return _evaluate(ndt, scan.points, pose, derivatives=True)


def _evaluate(ndt: NdtMap, points: np.ndarray, pose: Pose6DoF, derivatives: bool):
    moved = _transform(points, pose)
    pid, rows = _pairs(ndt, moved)
    n_pairs = len(pid)
    if n_pairs == 0:
        return 0.0, np.zeros(6), np.zeros((6, 6)), 0
    y = moved[pid]
    cs = ndt.cell_size
    u = (y - ndt.origin) / cs - (ndt.indices[rows] + 0.5)
    w, dw, ddw = halo_weight(u)
    weight = w[:, 0] * w[:, 1] * w[:, 2]
    live = weight > 0
    if not np.all(live):
        pid, rows, y, u, w, dw, ddw, weight = (
            v[live] for v in (pid, rows, y, u, w, dw, ddw, weight)
        )
        if len(pid) == 0:
            return 0.0, np.zeros(6), np.zeros((6, 6)), 0
    d = y - ndt.means[rows]
    a = ndt.inv_covariances[rows]
    ad = np.einsum("nij,nj->ni", a, d)
    e = np.exp(-0.5 * np.einsum("ni,ni->n", d, ad))
    score = float(np.sum(weight * e))
    if not derivatives:
        return score, None, None, len(pid)

    # Derivatives of each pair term w.r.t. the transformed point y:
    #   first:  v = e * grad(taper) - weight * e * A d
    #   second: K = e * hess(taper) - weight * e * A
    #               - e * (A d grad(taper)^T + grad(taper) (A d)^T) + weight * e * (A d)(A d)^T
    cs2 = cs * cs
    gw = np.stack([dw[:, 0] * w[:, 1] * w[:, 2],
                   w[:, 0] * dw[:, 1] * w[:, 2],
                   w[:, 0] * w[:, 1] * dw[:, 2]], axis=1) / cs
    we = weight * e
    v = e[:, None] * gw - we[:, None] * ad
    k = we[:, None, None] * (ad[:, :, None] * ad[:, None, :] - a)
    cross = e[:, None, None] * ad[:, :, None] * gw[:, None, :]
    k -= cross + np.swapaxes(cross, 1, 2)
    hdiag = np.stack([ddw[:, 0] * w[:, 1] * w[:, 2],
                      w[:, 0] * ddw[:, 1] * w[:, 2],
                      w[:, 0] * w[:, 1] * ddw[:, 2]], axis=1) * (e / cs2)[:, None]
    k[:, 0, 0] += hdiag[:, 0]
    k[:, 1, 1] += hdiag[:, 1]
    k[:, 2, 2] += hdiag[:, 2]
    for i, j, l in ((0, 1, 2), (0, 2, 1), (1, 2, 0)):
        off = dw[:, i] * dw[:, j] * w[:, l] * e / cs2
        k[:, i, j] += off
        k[:, j, i] += off

    # Sum pair terms per scan point, then apply the point Jacobian once per point.
    npts = len(points)
    v_pt = np.stack([np.bincount(pid, v[:, i], npts) for i in range(3)], axis=1)
    k_pt = np.empty((npts, 3, 3))
    for i in range(3):
        for j in range(i, 3):
            k_pt[:, i, j] = np.bincount(pid, k[:, i, j], npts)
            k_pt[:, j, i] = k_pt[:, i, j]
    used = np.flatnonzero(np.bincount(pid, minlength=npts))
    x, v_pt, k_pt = points[used], v_pt[used], k_pt[used]

    d1, d2 = _rotation_derivatives(pose.roll, pose.pitch, pose.yaw)
    # Point Jacobian (N, 3, 6): identity for translation, dR/dangle @ x for rotation.
    jac = np.zeros((len(x), 3, 6))
    jac[:, 0, 0] = jac[:, 1, 1] = jac[:, 2, 2] = 1.0
    for r in range(3):
        jac[:, :, 3 + r] = x @ d1[r].T
    grad = v_pt.reshape(-1) @ jac.reshape(-1, 6)
    kj = np.matmul(k_pt, jac)
    hess = jac.reshape(-1, 6).T @ kj.reshape(-1, 6)
    hess[3:, 3:] += np.einsum("abij,ij->ab", d2, v_pt.T @ x)  # v . d2(R x)
    return score, grad, hess, len(pid)


def _damped_step(hess: np.ndarray, grad: np.ndarray, lam: float) -> np.ndarray:
    """Ascent step solving ``(|-H| + lam * diag|-H|) step = g``.

    Negative curvature directions of ``-H`` are flipped so the system is
    always positive definite; damping is relative to the diagonal scale.
    """
    w, v = np.linalg.eigh(-hess)
    w = np.abs(w)
    w = np.maximum(w, max(float(w.max()), 1.0) * 1e-9)
    m = (v * w) @ v.T
    m[np.diag_indices(6)] *= 1.0 + lam
    return np.linalg.solve(m, grad)


def _clamp_step(step: np.ndarray, opts: AlignOptions) -> np.ndarray:
    t_max = np.max(np.abs(step[:3]))
    r_max = np.max(np.abs(step[3:]))
    scale = 1.0
    if t_max > opts.max_translation_step:
        scale = min(scale, opts.max_translation_step / t_max)
    if r_max > opts.max_rotation_step:
        scale = min(scale, opts.max_rotation_step / r_max)
    return step * scale


def ndt_align(ndt: NdtMap, scan: PointCloud, initial: Pose6DoF,
              opts: AlignOptions | None = None) -> tuple[Pose6DoF, AlignStats]:
    """Maximize ``ndt_score`` over the pose with Levenberg-damped Newton steps."""
    opts = opts or AlignOptions()
    if len(ndt) == 0:
        raise NdtError("NDT map has no cells")
    if len(scan) == 0:
        raise NdtError("cannot align an empty scan")
    points = scan.points
    params = initial.as_array()
    pose = initial
    score, grad, hess, n_hit = _evaluate(ndt, points, pose, derivatives=True)
    if n_hit == 0 or not (np.isfinite(score) and np.all(np.isfinite(grad))):
        raise NdtError("no overlap; provide a better initial guess")

    lam = opts.damping
    converged = False
    it = 0
    while it < opts.max_iterations:
        it += 1
        step = _damped_step(hess, grad, lam)
        step = _clamp_step(step, opts)
        cand = Pose6DoF.from_array(params + step)
        c_score, _, _, c_hit = _evaluate(ndt, points, cand, derivatives=False)
        if c_hit > 0 and np.isfinite(c_score) and c_score >= score:
            params, pose = params + step, cand
            score, grad, hess, _ = _evaluate(ndt, points, pose, derivatives=True)
            lam = max(lam * opts.damping_down, 1e-9)
            if np.max(np.abs(step)) < opts.step_threshold:
                converged = True
                break
        else:
            lam *= opts.damping_up
            if lam > 1e8:
                # No ascent direction left at any damping: a (local) maximum.
                converged = np.max(np.abs(step)) < opts.step_threshold
                break
    log.debug("ndt_align: %d iterations, score %.3f, converged=%s", it, score, converged)
    return pose, AlignStats(iterations=it, score=score, converged=converged)


def fit_ground_plane(cloud: PointCloud, seed: int = 0, iterations: int = 200,
                     inlier_tol: float = 0.05, max_tilt: float = np.radians(30.0),
                     sample: int = 4000) -> tuple[np.ndarray, float] | None:
    """RANSAC ground plane ``n . p + h = 0`` in the cloud's frame.

    ``n`` is the unit upward normal and ``h`` the sensor height above the
    plane. Only planes tilted less than ``max_tilt`` from the local z axis are
    considered; returns ``None`` when no plane collects 20% of the points.
    """
    pts = cloud.points
    if len(pts) < 3:
        return None
    rng = np.random.default_rng(seed)
    if len(pts) > sample:
        pts = pts[rng.choice(len(pts), sample, replace=False)]
    best, best_count = None, 0
    cos_tilt = np.cos(max_tilt)
    for _ in range(iterations):
        a, b, c = pts[rng.choice(len(pts), 3, replace=False)]
        n = np.cross(b - a, c - a)
        norm = np.linalg.norm(n)
        if norm < 1e-9:
            continue
        n /= norm
        if n[2] < 0:
            n = -n
        if n[2] < cos_tilt:
            continue
        count = int(np.sum(np.abs((pts - a) @ n) < inlier_tol))
        if count > best_count:
            best, best_count = (n, a), count
    if best is None or best_count < 0.2 * len(pts):
        return None
    n, a = best
    inliers = pts[np.abs((pts - a) @ n) < inlier_tol]
    centroid = inliers.mean(axis=0)
    _, _, vt = np.linalg.svd(inliers - centroid, full_matrices=False)
    n = vt[-1] if vt[-1][2] > 0 else -vt[-1]
    return n, float(-n @ centroid)


def level_guess(guess: Pose6DoF, ref_plane, other_plane) -> Pose6DoF:
    """Replace the guess's z, roll and pitch with the values that make both ground planes coincide.

    x, y and yaw are kept; those are what the scan matcher has to find.
    """
    n_ref, h_ref = ref_plane
    n_oth, h_oth = other_plane

    def residual(rp):
        return euler_rotation(rp[0], rp[1], guess.yaw) @ n_oth - n_ref

    sol = least_squares(residual, [guess.roll, guess.pitch], xtol=1e-14, ftol=1e-14, gtol=1e-14)
    roll, pitch = (float(v) for v in sol.x)
    tz = (h_oth - h_ref - n_ref[0] * guess.tx - n_ref[1] * guess.ty) / n_ref[2]
    return Pose6DoF(guess.tx, guess.ty, float(tz), roll, pitch, guess.yaw)


def calibrate(reference_cloud: PointCloud, other_clouds: Sequence[PointCloud],
              initial_guesses: Sequence[Pose6DoF], cell_size: float = 2.0,
              opts: AlignOptions | None = None, min_points: int = 5,
              scan_voxel: float | None = 0.35, level: bool = True) -> list[RigidTransform]:
    """Transforms mapping each non-reference sensor's local frame into the reference frame.

    With ``level`` set, each guess first gets its z/roll/pitch from ground
    plane fits of both clouds (thin ground cells otherwise give no score
    signal a few decimetres off the plane). Scans are thinned with a
    ``scan_voxel`` voxel-grid filter before alignment (``None`` aligns every
    point); the map always uses the full reference cloud.
    """
    if len(other_clouds) != len(initial_guesses):
        raise ValueError(
            f"need one initial guess per non-reference cloud ({len(other_clouds)} clouds, "
            f"{len(initial_guesses)} guesses)"
        )
    if not other_clouds:
        return []
    ndt = build_ndt_map(reference_cloud, cell_size, min_points)
    ref_plane = fit_ground_plane(reference_cloud) if level else None
    out = []
    for i, (cloud, guess) in enumerate(zip(other_clouds, initial_guesses), start=1):
        if ref_plane is not None:
            plane = fit_ground_plane(cloud, seed=i)
            if plane is not None:
                guess = level_guess(guess, ref_plane, plane)
            else:
                log.info("sensor %d: no ground plane found, using the guess as given", i)
        try:
            scan = voxel_downsample(cloud, scan_voxel) if scan_voxel else cloud
            pose, stats = ndt_align(ndt, scan, guess, opts)
        except NdtError as e:
            raise NdtError(f"sensor {i}: {e}") from e
        if not stats.converged:
            log.warning("sensor %d: NDT did not converge in %d iterations", i, stats.iterations)
        out.append(from_pose(pose))
    return out
