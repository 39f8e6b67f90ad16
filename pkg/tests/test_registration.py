import numpy as np
import pytest

from uvavatar.body_model import posed_joints, skin
from uvavatar.bvh import build_bvh, cast_rays, closest_points, closest_points_brute, refit_bvh
from uvavatar.camera import Camera
from uvavatar.registration import (
    GaussianPrior,
    RegistrationConfig,
    Scan,
    fit_pose_shape,
    geman_mcclure,
    hand_foot_vertices,
    mahalanobis,
    project,
    register,
    registration_energy,
)
from uvavatar.synth import camera_ring, synth_scan

from conftest import humanoid


def ray_brute(tris, o, d):
    """Nearest hit by testing every triangle (Moller-Trumbore)."""
    best_t, best_f = np.inf, -1
    for f, (a, b, c) in enumerate(tris):
        e1, e2 = b - a, c - a
        p = np.cross(d, e2)
        det = e1 @ p
        if abs(det) < 1e-15:
            continue
        s = o - a
        u = s @ p / det
        q = np.cross(s, e1)
        v = d @ q / det
        t = e2 @ q / det
        if u >= 0 and v >= 0 and u + v <= 1 and 1e-9 < t < best_t:
            best_t, best_f = t, f
    return best_t, best_f


class TestProjection:
    def test_principal_point(self):
        cam = Camera.look_at((0, 0, 5.0), (0, 0, 0), focal=100, width=65, height=65)
        uv, ok = project(cam, np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 6.0]]))
        assert np.allclose(uv[0], [32, 32], atol=1e-12)
        assert ok.tolist() == [True, False]

    def test_pinhole_formula(self, rng):
        cam = Camera.from_axis_angle(300, 280, 10, 20, rng.normal(size=3), rng.normal(size=3) + [0, 0, 8])
        pts = rng.normal(size=(20, 3))
        pc = pts @ cam.rotation.T + cam.translation
        uv, _ = project(cam, pts)
        assert np.allclose(uv[:, 0], 300 * pc[:, 0] / pc[:, 2] + 10, atol=1e-9)
        assert np.allclose(uv[:, 1], 280 * pc[:, 1] / pc[:, 2] + 20, atol=1e-9)

    def test_dict_round_trip(self, rng):
        cam = Camera.from_axis_angle(300, 280, 10, 20, rng.normal(size=3), rng.normal(size=3))
        back = Camera.from_dict(cam.to_dict())
        assert np.allclose(back.rotation, cam.rotation, atol=1e-12)


class TestPriors:
    def test_mahalanobis_spectral(self, rng):
        a = rng.normal(size=(6, 6))
        prec = a @ a.T + np.eye(6)
        prior = GaussianPrior(rng.normal(size=6), prec)
        x = rng.normal(size=6)
        w, v = np.linalg.eigh(prec)
        expect = float(((v.T @ (x - prior.mean)) ** 2 * w).sum())
        assert mahalanobis(x, prior) == pytest.approx(expect, rel=1e-12)
        assert mahalanobis(prior.mean, prior) == 0.0
        sq = prior.sqrt_precision()
        assert np.allclose(sq @ sq.T, prec, atol=1e-9)

    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError, match="symmetric"):
            GaussianPrior(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_rejects_indefinite(self):
        with pytest.raises(ValueError, match="semi-definite"):
            GaussianPrior(np.zeros(2), np.diag([1.0, -1.0]))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            mahalanobis(np.zeros(3), GaussianPrior.isotropic(2))


class TestKernel:
    def test_values(self):
        assert geman_mcclure(0.0, 0.1) == 0.0
        assert geman_mcclure(0.1, 0.1) == 0.5
        assert geman_mcclure(-0.1, 0.1) == 0.5

    def test_matches_closed_form(self, rng):
        r = rng.normal(size=100)
        assert np.allclose(geman_mcclure(r, 0.3), r**2 / (r**2 + 0.09), atol=1e-15)

    def test_bounded_and_monotone(self):
        r = np.linspace(0, 1e6, 2001)
        rho = geman_mcclure(r, 1.0)
        assert (rho < 1).all() or rho[-1] == 1.0
        assert (np.diff(rho) >= 0).all()

    def test_sigma_positive(self):
        with pytest.raises(ValueError):
            geman_mcclure(1.0, 0.0)


class TestBvh:
    def test_closest_matches_brute_force(self, rng):
        tpl, _ = humanoid()
        v = skin(tpl, rng.normal(scale=0.2, size=3 * tpl.num_joints)).vertices
        pts = v[rng.integers(0, len(v), 1000)] + rng.normal(scale=0.05, size=(1000, 3))
        d, _, _, _ = closest_points(build_bvh(v, tpl.faces), pts)
        db, _, _, _ = closest_points_brute(v, tpl.faces, pts)
        assert np.abs(d - db).max() < 1e-12

    def test_closest_point_lies_on_face(self, rng):
        tpl, _ = humanoid()
        pts = rng.normal(scale=0.5, size=(200, 3)) + [0, 0.9, 0]
        d, cp, face, bary = closest_points(build_bvh(tpl.vertices, tpl.faces), pts)
        assert (bary >= -1e-12).all() and np.allclose(bary.sum(1), 1)
        tri = tpl.vertices[tpl.faces[face]]
        assert np.allclose(np.einsum("pk,pkc->pc", bary, tri), cp, atol=1e-12)
        assert np.allclose(np.linalg.norm(pts - cp, axis=1), d, atol=1e-12)

    def test_refit_equals_rebuild(self, rng):
        tpl, _ = humanoid()
        bvh = build_bvh(tpl.vertices, tpl.faces)
        moved = skin(tpl, rng.normal(scale=0.3, size=3 * tpl.num_joints)).vertices
        pts = rng.normal(scale=0.5, size=(300, 3)) + [0, 0.9, 0]
        a = closest_points(refit_bvh(bvh, moved, tpl.faces), pts)[0]
        b = closest_points(build_bvh(moved, tpl.faces), pts)[0]
        assert np.abs(a - b).max() < 1e-12

    def test_rays_match_brute_force(self, rng):
        tpl, _ = humanoid()
        bvh = build_bvh(tpl.vertices, tpl.faces)
        tris = tpl.vertices[tpl.faces]
        origin = np.array([0.3, 1.0, 3.0])
        targets = tpl.vertices[rng.integers(0, tpl.num_vertices, 30)] + rng.normal(scale=0.05, size=(30, 3))
        dirs = targets - origin
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        t, f, _ = cast_rays(bvh, origin, dirs)
        for i in range(30):
            tb, fb = ray_brute(tris, origin, dirs[i])
            assert (t[i] == np.inf and tb == np.inf) or abs(t[i] - tb) < 1e-9

    def test_empty_mesh(self):
        with pytest.raises(ValueError):
            build_bvh(np.zeros((3, 3)), np.zeros((0, 3), np.int64))


class TestJointFit:
    def test_zero_confidence_returns_prior_mean(self, rng):
        tpl, _ = humanoid()
        k, s = tpl.num_joints, tpl.num_shapes
        cams = camera_ring(3)
        dets = [np.zeros((k, 3)) for _ in cams]
        pp = GaussianPrior(rng.normal(scale=0.1, size=3 * k), np.eye(3 * k))
        sp = GaussianPrior(rng.normal(size=s), np.eye(s))
        fit = fit_pose_shape(dets, cams, tpl, pp, sp)
        assert np.array_equal(fit.pose, pp.mean) and np.array_equal(fit.shape, sp.mean)

    def test_detection_count_must_match(self):
        tpl, _ = humanoid()
        with pytest.raises(ValueError, match="detection sets"):
            fit_pose_shape([np.zeros((tpl.num_joints, 3))], camera_ring(2), tpl)

    def test_coincident_cameras_flagged(self, rng):
        tpl, _ = humanoid()
        cam = camera_ring(1)[0]
        pj = posed_joints(tpl, rng.normal(scale=0.1, size=3 * tpl.num_joints))
        det = np.column_stack([cam.project(pj)[0], np.ones(len(pj))])
        fit = fit_pose_shape([det, det], [cam, cam], tpl)
        assert fit.degenerate_cameras

    def test_prior_pulls_single_view(self, rng):
        tpl, _ = humanoid()
        pose = rng.normal(scale=0.2, size=3 * tpl.num_joints)
        cams = camera_ring(1)
        pj = posed_joints(tpl, pose)
        det = np.column_stack([cams[0].project(pj)[0], np.ones(len(pj))])
        weak = fit_pose_shape([det], cams, tpl, lambda_pose=1e-6, lambda_shape=1e-6)
        strong = fit_pose_shape([det], cams, tpl, lambda_pose=1e3, lambda_shape=1e3)
        assert np.linalg.norm(strong.pose) < np.linalg.norm(weak.pose)
        assert weak.rmse < strong.rmse


class TestRegistration:
    def test_extremity_weights(self):
        tpl, _ = humanoid()
        ids = hand_foot_vertices(tpl)
        assert len(ids) > 0
        w = RegistrationConfig().weights_for(tpl)
        assert (w[ids] == 10.0).all() and np.sum(w == 1.0) == tpl.num_vertices - len(ids)

    def test_model_scan_stays_put(self, rng):
        tpl, _ = humanoid()
        pose = rng.normal(scale=0.15, size=3 * tpl.num_joints)
        shape = rng.normal(scale=0.5, size=tpl.num_shapes)
        scan = synth_scan(tpl, pose, shape, n_points=3000, seed=3)
        cfg = RegistrationConfig(lambda_pose=0.0, lambda_shape=0.0, outer_iterations=10)
        reg = register(scan, tpl, pose, shape, cfg)
        model = skin(tpl, pose, shape).vertices
        assert np.abs(reg.vertices - model).max() < 1e-5
        assert all(b <= a for a, b in zip(reg.trace, reg.trace[1:]))

    def test_too_few_points(self):
        tpl, _ = humanoid()
        with pytest.raises(ValueError):
            register(Scan(np.zeros((5, 3))), tpl)

    def test_scan_rejects_nan(self):
        with pytest.raises(ValueError, match="non-finite"):
            Scan(np.array([[0.0, np.nan, 0.0]]))

    def test_energy_gradient(self, rng):
        tpl, _ = humanoid()
        k, s = tpl.num_joints, tpl.num_shapes
        pose = rng.normal(scale=0.1, size=3 * k)
        shape = rng.normal(scale=0.3, size=s)
        scan = synth_scan(tpl, pose, shape, n_points=800, noise=0.002, seed=4)
        cfg = RegistrationConfig(lambda_pose=0.5, lambda_shape=0.5)
        h = 1e-7
        rest = tpl.vertices
        for _ in range(20):
            # smooth meshes and directions keep every closest point away from a switch
            p0 = pose + rng.normal(scale=0.02, size=3 * k)
            b0 = shape + rng.normal(scale=0.05, size=s)
            a = skin(tpl, p0 + rng.normal(scale=0.02, size=3 * k), b0).vertices
            da = np.sin(rest @ rng.normal(scale=3.0, size=(3, 3)) + rng.uniform(0, 6, 3))
            dp = rng.normal(size=3 * k + s)
            _, ga, gp = registration_energy(a, p0, b0, scan, tpl, cfg)
            e = lambda t: registration_energy(a + t * da, p0 + t * dp[:3 * k], b0 + t * dp[3 * k:], scan, tpl, cfg)[0]
            num = (e(h) - e(-h)) / (2 * h)
            ana = (ga * da).sum() + gp @ dp
            assert abs(num - ana) <= 1e-4 * max(abs(ana), 1e-8)
