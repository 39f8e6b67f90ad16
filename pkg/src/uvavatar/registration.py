"""Pose/shape fitting to 2D joints and robust non-rigid registration to scans."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .body_model import BodyTemplate, Mesh, skin, skin_with_jacobian
from .bvh import build_bvh, closest_points, refit_bvh
from .camera import Camera

__all__ = [
    "Camera",
    "FitResult",
    "GaussianPrior",
    "Registration",
    "RegistrationConfig",
    "Scan",
    "fit_objective",
    "fit_pose_shape",
    "geman_mcclure",
    "hand_foot_vertices",
    "mahalanobis",
    "point_to_surface",
    "project",
    "register",
    "registration_energy",
]


@dataclass(frozen=True, eq=False)
class Scan:
    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 1:
            raise ValueError("scan points must be a non-empty (P, 3) array")
        if not np.isfinite(pts).all():
            raise ValueError("scan contains non-finite coordinates")
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64)
            if nrm.shape != pts.shape:
                raise ValueError("scan normals must match the point array")
            object.__setattr__(self, "normals", nrm)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True, eq=False)
class GaussianPrior:
    mean: np.ndarray
    precision: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).ravel()
        prec = np.asarray(self.precision, dtype=np.float64)
        if prec.shape != (len(mean), len(mean)):
            raise ValueError("precision must be (d, d) for a length-d mean")
        if np.abs(prec - prec.T).max(initial=0.0) > 1e-9:
            raise ValueError("precision must be symmetric")
        if len(mean) and np.linalg.eigvalsh(prec).min() < -1e-9:
            raise ValueError("precision must be positive semi-definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "precision", prec)

    @classmethod
    def isotropic(cls, dim: int, mean=None) -> "GaussianPrior":
        return cls(np.zeros(dim) if mean is None else mean, np.eye(dim))

    @property
    def dim(self) -> int:
        return len(self.mean)

    def sqrt_precision(self) -> np.ndarray:
        """L with L @ L.T == precision, so ||L.T (x - mean)||^2 is the Mahalanobis distance."""
        w, v = np.linalg.eigh(self.precision)
        return v * np.sqrt(np.clip(w, 0.0, None))


def project(camera: Camera, points):
    """Pinhole projection; returns (pixels, valid) with points at or behind the center invalid."""
    return camera.project(points)


def _project_jacobian(camera: Camera, points):
    pc = camera.to_camera(points)
    z = pc[:, 2]
    inv = 1.0 / z
    r = camera.rotation
    ju = camera.fx * inv[:, None] * (r[0][None] - (pc[:, 0] * inv)[:, None] * r[2][None])
    jv = camera.fy * inv[:, None] * (r[1][None] - (pc[:, 1] * inv)[:, None] * r[2][None])
    return np.stack([ju, jv], axis=1)  # (P, 2, 3)


def mahalanobis(x, prior: GaussianPrior) -> float:
    d = np.asarray(x, dtype=np.float64).ravel() - prior.mean
    if d.shape != prior.mean.shape:
        raise ValueError(f"expected a vector of length {prior.dim}, got {d.size}")
    return float(d @ prior.precision @ d)


def geman_mcclure(r, sigma: float):
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    # written as 1 / (1 + (sigma/r)^2) so huge residuals cannot overflow
    a = np.abs(np.asarray(r, dtype=np.float64))
    small = a <= sigma
    with np.errstate(divide="ignore"):
        q = np.where(small, a / sigma, sigma / np.where(small, 1.0, a))
    q2 = q * q
    out = np.where(small, q2 / (q2 + 1.0), 1.0 / (1.0 + q2))
    return out if out.ndim else float(out)


def point_to_surface(points, mesh: Mesh, accel=None):
    """Exact distance from each point to the mesh surface: (distance, closest point, face)."""
    if len(mesh.faces) == 0:
        raise ValueError("cannot measure distance to an empty mesh")
    accel = build_bvh(mesh.vertices, mesh.faces) if accel is None else accel
    dist, closest, face, _ = closest_points(accel, points)
    return dist, closest, face


def hand_foot_vertices(template: BodyTemplate) -> np.ndarray:
    """Vertices whose dominant skinning joint is a hand or a foot."""
    ids = [template.joint_index(n) for n in ("l_hand", "r_hand", "l_foot", "r_foot") if n in template.joint_names]
    if not ids:
        return np.zeros(0, dtype=np.int64)
    return np.nonzero(np.isin(template.skin_weights.argmax(1), ids))[0]


# ---------------------------------------------------------------------------
# joint reprojection fit


@dataclass(frozen=True, eq=False)
class FitResult:
    pose: np.ndarray
    shape: np.ndarray
    rmse: float  # reprojection RMSE over used detections, pixels
    energy: float
    iterations: int
    converged: bool
    degenerate_cameras: bool


def _default_priors(template, pose_prior, shape_prior):
    pose_prior = pose_prior or GaussianPrior.isotropic(3 * template.num_joints)
    shape_prior = shape_prior or GaussianPrior.isotropic(template.num_shapes)
    if pose_prior.dim != 3 * template.num_joints or shape_prior.dim != template.num_shapes:
        raise ValueError("prior dimensions do not match the template")
    return pose_prior, shape_prior


def _check_detections(joints2d, cameras, k):
    if len(joints2d) != len(cameras):
        raise ValueError(f"{len(joints2d)} detection sets for {len(cameras)} cameras")
    out = []
    for i, det in enumerate(joints2d):
        det = np.asarray(det, dtype=np.float64)
        if det.shape != (k, 3):
            raise ValueError(f"camera {i}: detections must be ({k}, 3) rows of (x, y, confidence)")
        if (det[:, 2] < 0).any() or not np.isfinite(det).all():
            raise ValueError(f"camera {i}: confidences must be finite and non-negative")
        out.append(det)
    return out


def _fit_residuals(x, template, dets, cameras, lp, ls, pose_prior, shape_prior, lpose, lshape, with_jac=True):
    k, s = template.num_joints, template.num_shapes
    pose, shape = x[: 3 * k], x[3 * k:]
    _, pj, _, dj = skin_with_jacobian(template, pose, shape, vertex_ids=np.zeros(0, dtype=np.int64))
    res, jac = [], []
    for det, cam in zip(dets, cameras):
        use = det[:, 2] > 0
        if not use.any():
            continue
        px, valid = cam.project(pj[use])
        w = np.sqrt(det[use, 2]) * valid
        res.append((w[:, None] * (px - det[use, :2])).ravel())
        if with_jac:
            jp = _project_jacobian(cam, pj[use])
            jac.append((w[:, None, None] * np.einsum("pab,pbn->pan", jp, dj[use])).reshape(-1, 3 * k + s))
    res.append(np.sqrt(lpose) * lp.T @ (pose - pose_prior.mean))
    res.append(np.sqrt(lshape) * ls.T @ (shape - shape_prior.mean))
    if with_jac:
        jac.append(np.hstack([np.sqrt(lpose) * lp.T, np.zeros((3 * k, s))]))
        jac.append(np.hstack([np.zeros((s, 3 * k)), np.sqrt(lshape) * ls.T]))
        return np.concatenate(res), np.vstack(jac)
    return np.concatenate(res), None


def fit_objective(x, template, joints2d, cameras, pose_prior=None, shape_prior=None, lambda_pose=1.0, lambda_shape=1.0):
    """Reprojection energy and its analytic gradient at parameters ``x = [pose, shape]``."""
    pose_prior, shape_prior = _default_priors(template, pose_prior, shape_prior)
    dets = _check_detections(joints2d, cameras, template.num_joints)
    r, j = _fit_residuals(
        np.asarray(x, dtype=np.float64), template, dets, cameras,
        pose_prior.sqrt_precision(), shape_prior.sqrt_precision(), pose_prior, shape_prior, lambda_pose, lambda_shape,
    )
    return float(r @ r), 2.0 * j.T @ r


def _levenberg_marquardt(fun, x0, max_iter, tol, mu0=1e-3):
    """Minimize ||r(x)||^2; ``fun(x, jac)`` returns (r, J). Returns (x, energy, iterations, converged)."""
    x = x0.copy()
    r, jac = fun(x, True)
    energy = r @ r
    scale = max(energy, 1e-300)  # decreases are judged against the starting energy
    mu = mu0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        jtj = jac.T @ jac
        g = jac.T @ r
        if np.abs(g).max(initial=0.0) < 1e-14:
            converged = True
            break
        improved = False
        for _ in range(30):
            a = jtj + mu * (np.diag(np.diag(jtj)) + 1e-9 * np.eye(len(x)))
            try:
                step = -np.linalg.solve(a, g)
            except np.linalg.LinAlgError:
                mu *= 10
                continue
            cand = x + step
            rc, _ = fun(cand, False)
            ec = rc @ rc
            if np.isfinite(ec) and ec < energy:
                improved = True
                rel = (energy - ec) / scale
                x, energy = cand, ec
                r, jac = fun(x, True)
                mu = max(mu / 3, 1e-12)
                break
            mu *= 10
        if not improved or rel < tol or np.abs(step).max() < 1e-14:
            converged = True
            break
    return x, energy, it, converged


def fit_pose_shape(
    joints2d,
    cameras,
    template: BodyTemplate,
    pose_prior: GaussianPrior | None = None,
    shape_prior: GaussianPrior | None = None,
    lambda_pose: float = 1.0,
    lambda_shape: float = 1.0,
    max_iter: int = 200,
    tol: float = 1e-13,
) -> FitResult:
    """Damped Gauss-Newton fit of pose and shape to multi-view 2D joints.

    Each detection row is (x, y, confidence); residuals are weighted by sqrt(confidence) and
    zero-confidence rows are excluded. Starts from the prior means.
    """
    k = template.num_joints
    pose_prior, shape_prior = _default_priors(template, pose_prior, shape_prior)
    if len(cameras) < 1:
        raise ValueError("at least one camera is required")
    dets = _check_detections(joints2d, cameras, k)
    lp, ls = pose_prior.sqrt_precision(), shape_prior.sqrt_precision()
    x0 = np.concatenate([pose_prior.mean, shape_prior.mean])
    axes = np.array([c.rotation[2] for c in cameras])
    degenerate = bool(np.abs(axes @ axes.T).min() > 1 - 1e-12)

    n_obs = sum(int((d[:, 2] > 0).sum()) for d in dets)
    if n_obs == 0:
        return FitResult(pose_prior.mean.copy(), shape_prior.mean.copy(), 0.0, 0.0, 0, True, degenerate)

    def fun(x, jac):
        return _fit_residuals(x, template, dets, cameras, lp, ls, pose_prior, shape_prior, lambda_pose, lambda_shape, jac)

    x, energy, iters, converged = _levenberg_marquardt(fun, x0, max_iter, tol)
    if not converged:
        warnings.warn("pose/shape fit did not converge; returning the best parameters found", RuntimeWarning, stacklevel=2)
    pose, shape = x[: 3 * k], x[3 * k:]
    pj = skin_with_jacobian(template, pose, shape, vertex_ids=np.zeros(0, dtype=np.int64))[1]
    sq, cnt = 0.0, 0
    for det, cam in zip(dets, cameras):
        use = det[:, 2] > 0
        px, _ = cam.project(pj[use])
        sq += float(((px - det[use, :2]) ** 2).sum())
        cnt += int(use.sum())
    return FitResult(pose, shape, float(np.sqrt(sq / max(cnt, 1))), float(energy), iters, converged, degenerate)


# ---------------------------------------------------------------------------
# non-rigid registration


@dataclass(frozen=True)
class RegistrationConfig:
    lambda_pose: float = 1.0
    lambda_shape: float = 1.0
    pose_prior: GaussianPrior | None = None
    shape_prior: GaussianPrior | None = None
    coupling_weights: np.ndarray | None = None  # per vertex; default 1 with hands/feet raised
    extremity_weight: float = 10.0
    sigma: float = 0.05
    outer_iterations: int = 30
    tol: float = 1e-8
    lm_iterations: int = 5
    max_rejections: int = 8
    tangential_weight: float = 0.1  # share of point-to-point in the linearized data term

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("Geman-McClure sigma must be positive")
        if min(self.lambda_pose, self.lambda_shape, self.extremity_weight) < 0:
            raise ValueError("weights must be non-negative")
        if self.coupling_weights is not None and (np.asarray(self.coupling_weights) < 0).any():
            raise ValueError("coupling weights must be non-negative")

    def weights_for(self, template: BodyTemplate) -> np.ndarray:
        if self.coupling_weights is not None:
            w = np.asarray(self.coupling_weights, dtype=np.float64)
            if w.shape != (template.num_vertices,):
                raise ValueError("coupling_weights must have one entry per vertex")
            return w
        w = np.ones(template.num_vertices)
        w[hand_foot_vertices(template)] = self.extremity_weight
        return w


@dataclass(frozen=True, eq=False)
class Registration:
    pose: np.ndarray
    shape: np.ndarray
    vertices: np.ndarray  # free vertices A
    energy: dict
    trace: list
    iterations: int
    converged: bool
    support: np.ndarray = field(repr=False, default=None)  # summed correspondence weight per vertex

    def offsets_posed(self, template: BodyTemplate) -> np.ndarray:
        """A minus the posed model, in posed space."""
        return self.vertices - skin(template, self.pose, self.shape).vertices


def _energy_terms(a, pose, shape, scan_pts, template, weights, cfg, pose_prior, shape_prior, accel=None):
    faces = template.faces
    accel = build_bvh(a, faces) if accel is None else refit_bvh(accel, a, faces)
    dist, closest, face, bary = closest_points(accel, scan_pts)
    model = skin(template, pose, shape).vertices
    data = float(geman_mcclure(dist, cfg.sigma).sum())
    coupling = float((weights * ((a - model) ** 2).sum(1)).sum())
    ep = cfg.lambda_pose * mahalanobis(pose, pose_prior)
    es = cfg.lambda_shape * mahalanobis(shape, shape_prior)
    terms = {"data": data, "coupling": coupling, "pose_prior": ep, "shape_prior": es, "total": data + coupling + ep + es}
    return terms, (dist, closest, face, bary), model


def registration_energy(vertices, pose, shape, scan: Scan, template: BodyTemplate, config: RegistrationConfig | None = None):
    """Exact registration energy and its gradient with respect to (A, pose, shape).

    The data-term gradient uses the closest-point correspondence (valid wherever the nearest
    surface point is unique).
    """
    cfg = config or RegistrationConfig()
    pose_prior, shape_prior = _default_priors(template, cfg.pose_prior, cfg.shape_prior)
    weights = cfg.weights_for(template)
    a = np.asarray(vertices, dtype=np.float64)
    terms, (dist, closest, face, bary), _ = _energy_terms(a, pose, shape, scan.points, template, weights, cfg, pose_prior, shape_prior)
    s2 = cfg.sigma ** 2
    coef = -2.0 * s2 / (dist ** 2 + s2) ** 2
    diff = scan.points - closest
    grad_a = np.zeros_like(a)
    corners = template.faces[face]
    for kk in range(3):
        np.add.at(grad_a, corners[:, kk], (coef * bary[:, kk])[:, None] * diff)
    model, _, dverts, _ = skin_with_jacobian(template, pose, shape)
    resid = a - model
    grad_a += 2.0 * weights[:, None] * resid
    grad_params = -2.0 * np.einsum("v,vc,vcn->n", weights, resid, dverts)
    k = template.num_joints
    grad_params[: 3 * k] += 2.0 * cfg.lambda_pose * pose_prior.precision @ (np.asarray(pose) - pose_prior.mean)
    grad_params[3 * k:] += 2.0 * cfg.lambda_shape * shape_prior.precision @ (np.asarray(shape) - shape_prior.mean)
    return terms["total"], grad_a, grad_params


def _solve_free_vertices(template, a_cur, scan_pts, corr, psi, weights, model, prox, tangential):
    """Vertex step: reweighted point-to-plane (plus a fraction of point-to-point) data term,
    quadratic coupling to the model and a proximal pull toward the current vertices."""
    n = template.num_vertices
    dist, closest, face, bary = corr
    corners = template.faces[face]
    tri = a_cur[corners]
    nrm = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    nrm /= np.maximum(np.linalg.norm(nrm, axis=1, keepdims=True), 1e-300)
    metric = psi[:, None, None] * (nrm[:, :, None] * nrm[:, None, :] + tangential * np.eye(3)[None])  # (P, 3, 3)
    rows, cols, vals = [], [], []
    for i in range(3):
        for j in range(3):
            blk = (bary[:, i] * bary[:, j])[:, None, None] * metric
            r = 3 * corners[:, i, None, None] + np.arange(3)[None, :, None]
            c = 3 * corners[:, j, None, None] + np.arange(3)[None, None, :]
            rows.append(np.broadcast_to(r, blk.shape).ravel())
            cols.append(np.broadcast_to(c, blk.shape).ravel())
            vals.append(blk.ravel())
    diag = np.repeat(weights + prox, 3)
    lhs = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(3 * n, 3 * n))
    lhs = (lhs + sp.diags(diag)).tocsc()
    rhs = np.zeros((n, 3))
    mx = np.einsum("pab,pb->pa", metric, scan_pts)
    for i in range(3):
        np.add.at(rhs, corners[:, i], bary[:, i, None] * mx)
    rhs += weights[:, None] * model + prox * a_cur
    return splu(lhs).solve(rhs.ravel()).reshape(n, 3)


def _fit_params_to_vertices(a, pose, shape, template, weights, cfg, pose_prior, shape_prior, iterations):
    k = template.num_joints
    sw = np.sqrt(weights)
    lp, ls = pose_prior.sqrt_precision(), shape_prior.sqrt_precision()
    s = template.num_shapes

    def fun(x, jac):
        ps, sh = x[: 3 * k], x[3 * k:]
        prior_r = [np.sqrt(cfg.lambda_pose) * lp.T @ (ps - pose_prior.mean), np.sqrt(cfg.lambda_shape) * ls.T @ (sh - shape_prior.mean)]
        if not jac:
            model = skin(template, ps, sh).vertices
            return np.concatenate([(sw[:, None] * (a - model)).ravel()] + prior_r), None
        model, _, dv, _ = skin_with_jacobian(template, ps, sh)
        r = np.concatenate([(sw[:, None] * (a - model)).ravel()] + prior_r)
        j = np.vstack([
            (-sw[:, None, None] * dv).reshape(-1, 3 * k + s),
            np.hstack([np.sqrt(cfg.lambda_pose) * lp.T, np.zeros((3 * k, s))]),
            np.hstack([np.zeros((s, 3 * k)), np.sqrt(cfg.lambda_shape) * ls.T]),
        ])
        return r, j

    x, _, _, _ = _levenberg_marquardt(fun, np.concatenate([pose, shape]), iterations, 1e-12)
    return x[: 3 * k], x[3 * k:]


def register(
    scan: Scan,
    template: BodyTemplate,
    pose=None,
    shape=None,
    config: RegistrationConfig | None = None,
    init_vertices=None,
) -> Registration:
    """Robust non-rigid registration of the template to a scan.

    Majorize-minimize: each outer iteration refreshes closest-point correspondences, solves the
    reweighted linear system for the free vertices, then refits pose and shape to them. Steps
    that raise the exact energy are rejected and retried with a stronger proximal damping.
    """
    cfg = config or RegistrationConfig()
    if len(scan) < 10:
        raise ValueError("scan needs at least 10 points")
    k, s = template.num_joints, template.num_shapes
    pose_prior, shape_prior = _default_priors(template, cfg.pose_prior, cfg.shape_prior)
    pose = pose_prior.mean.copy() if pose is None else np.asarray(pose, dtype=np.float64).ravel().copy()
    shape = shape_prior.mean.copy() if shape is None else np.asarray(shape, dtype=np.float64).ravel().copy()
    if pose.shape != (3 * k,) or shape.shape != (s,):
        raise ValueError("initial pose/shape do not match the template")
    weights = cfg.weights_for(template)
    pts = scan.points
    a = skin(template, pose, shape).vertices if init_vertices is None else np.array(init_vertices, dtype=np.float64)

    accel = build_bvh(a, template.faces)
    terms, corr, model = _energy_terms(a, pose, shape, pts, template, weights, cfg, pose_prior, shape_prior, accel)
    trace = [terms["total"]]
    prox = 0.0
    converged = False
    it = 0
    s2 = cfg.sigma ** 2
    for it in range(1, cfg.outer_iterations + 1):
        psi = s2 / (corr[0] ** 2 + s2) ** 2
        accepted = False
        for _ in range(cfg.max_rejections + 1):
            a_new = _solve_free_vertices(template, a, pts, corr, psi, weights, model, prox, cfg.tangential_weight)
            pose_new, shape_new = _fit_params_to_vertices(a_new, pose, shape, template, weights, cfg, pose_prior, shape_prior, cfg.lm_iterations)
            new_terms, new_corr, new_model = _energy_terms(a_new, pose_new, shape_new, pts, template, weights, cfg, pose_prior, shape_prior, accel)
            if not np.isfinite(new_terms["total"]):
                raise FloatingPointError(f"registration diverged at iteration {it}; energy trace {trace}")
            if new_terms["total"] <= terms["total"]:
                accepted = True
                break
            prox = max(prox * 10.0, 1e-2 * float(np.median(psi)))
        if not accepted:
            converged = True
            break
        rel = (terms["total"] - new_terms["total"]) / max(terms["total"], 1e-300)
        a, pose, shape, terms, corr, model = a_new, pose_new, shape_new, new_terms, new_corr, new_model
        trace.append(terms["total"])
        prox *= 0.1
        if prox < 1e-12:
            prox = 0.0
        if rel < cfg.tol:
            converged = True
            break

    _, _, face, bary = corr
    support = np.zeros(template.num_vertices)
    np.add.at(support, template.faces[face].ravel(), bary.ravel())
    return Registration(pose, shape, a, terms, trace, it, converged, support)

