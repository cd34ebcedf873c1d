import numpy as np
import pytest

from meshsplat import gauss, meshrig
from meshsplat.errors import DegenerateFaceError, RigError
from meshsplat.meshrig import Pose, RiggedMesh


def two_joint_mesh():
    """Two joints at the origin: joint 0 root identity, joint 1 its child."""
    vertices = np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.5, 0.5, 1.0]])
    faces = np.array([[0, 1, 2]])
    skin = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
    return RiggedMesh(vertices, faces, skin, np.array([-1, 0]),
                      np.zeros((2, 3)))


class TestRodrigues:
    def test_zero_rotation(self):
        np.testing.assert_array_equal(meshrig.rodrigues([0.0, 0.0, 0.0]), np.eye(3))

    def test_quarter_turn_about_z(self):
        R = meshrig.rodrigues([0.0, 0.0, np.pi / 2])
        np.testing.assert_allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-12)

    def test_quaternion_path_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            v = rng.normal(size=3) * rng.uniform(0, np.pi)
            theta = np.linalg.norm(v)
            if theta < 1e-9:
                continue
            axis = v / theta
            q = np.concatenate([[np.cos(theta / 2)], np.sin(theta / 2) * axis])
            np.testing.assert_allclose(meshrig.rodrigues(v),
                                       gauss.quat_to_matrix(q), atol=1e-9)

    def test_batched(self):
        rng = np.random.default_rng(1)
        v = rng.normal(size=(7, 3))
        R = meshrig.rodrigues(v)
        for i in range(7):
            np.testing.assert_allclose(R[i], meshrig.rodrigues(v[i]), atol=1e-12)


class TestPoseMesh:
    def test_rest_pose_identity(self):
        mesh = two_joint_mesh()
        posed = meshrig.pose_mesh(mesh, Pose.rest(2))
        np.testing.assert_array_equal(posed, mesh.vertices)

    def test_single_chain_rodrigues_oracle(self):
        # one joint at origin rotated 90 deg about z moves (1,0,0) -> (0,1,0)
        mesh = RiggedMesh(np.array([[1.0, 0.0, 0.0]]), np.zeros((0, 3), dtype=int),
                          np.array([[1.0]]), np.array([-1]), np.zeros((1, 3)))
        pose = Pose(np.zeros(3), np.array([[0.0, 0.0, np.pi / 2]]))
        posed = meshrig.pose_mesh(mesh, pose)
        np.testing.assert_allclose(posed[0], [0, 1, 0], atol=1e-12)

    def test_hand_blended_transform_oracle(self):
        # weights (0.5, 0.5) between identity joint and 90deg-rotated joint
        mesh = two_joint_mesh()
        mesh.skin_weights[0] = [0.5, 0.5]
        pose = Pose(np.zeros(3), np.array([[0.0, 0.0, 0.0], [0.0, 0.0, np.pi / 2]]))
        posed = meshrig.pose_mesh(mesh, pose)
        np.testing.assert_allclose(posed[0], [0.5, 0.5, 0.0], atol=1e-12)

    def test_rotation_about_offset_joint(self):
        # joint at (0,1,0) rotating 90 deg about z: rotation about the joint
        mesh = RiggedMesh(np.array([[1.0, 1.0, 0.0]]), np.zeros((0, 3), dtype=int),
                          np.array([[0.0, 1.0]]), np.array([-1, 0]),
                          np.array([[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))
        pose = Pose(np.zeros(3), np.array([[0, 0, 0], [0.0, 0.0, np.pi / 2]]))
        posed = meshrig.pose_mesh(mesh, pose)
        np.testing.assert_allclose(posed[0], [0.0, 2.0, 0.0], atol=1e-12)

    def test_root_translation_applied_last(self):
        mesh = two_joint_mesh()
        pose = Pose(np.array([1.0, 2.0, 3.0]), np.zeros((2, 3)))
        posed = meshrig.pose_mesh(mesh, pose)
        np.testing.assert_allclose(posed, mesh.vertices + [1, 2, 3], atol=1e-12)

    def test_joint_count_mismatch(self):
        mesh = two_joint_mesh()
        with pytest.raises(RigError):
            meshrig.pose_mesh(mesh, Pose.rest(3))


class TestTriangleFrames:
    def test_unit_right_triangle(self):
        fr = meshrig.triangle_frames([0, 0, 0], [1, 0, 0], [0, 1, 0])
        np.testing.assert_allclose(fr.M[0], [1 / 3, 1 / 3, 0], atol=1e-15)
        np.testing.assert_allclose(fr.w[0], 1.0, atol=1e-15)
        np.testing.assert_allclose(fr.R[0][:, 0], [1, 0, 0], atol=1e-15)
        np.testing.assert_allclose(fr.R[0][:, 1], [0, 0, 1], atol=1e-15)
        np.testing.assert_allclose(fr.R[0][:, 2], [0, -1, 0], atol=1e-15)
        assert np.linalg.det(fr.R[0]) == pytest.approx(1.0, abs=1e-12)

    def test_similarity_equivariance(self):
        rng = np.random.default_rng(2)
        v = rng.normal(size=(3, 3))
        fr1 = meshrig.triangle_frames(*v)
        fr2 = meshrig.triangle_frames(*(2.0 * v))
        np.testing.assert_allclose(fr2.R, fr1.R, atol=1e-12)
        np.testing.assert_allclose(fr2.M, 2 * fr1.M, atol=1e-12)
        np.testing.assert_allclose(fr2.w, 2 * fr1.w, atol=1e-12)

    def test_rigid_motion_equivariance_oracle(self):
        # 1000 random trials at 1e-9
        rng = np.random.default_rng(3)
        for _ in range(1000):
            v = rng.normal(size=(3, 3))
            Q = gauss.quat_to_matrix(rng.normal(size=4))
            t = rng.normal(size=3)
            fr = meshrig.triangle_frames(*v)
            fr2 = meshrig.triangle_frames(*(v @ Q.T + t))
            np.testing.assert_allclose(fr2.R[0], Q @ fr.R[0], atol=1e-9)
            np.testing.assert_allclose(fr2.M[0], Q @ fr.M[0] + t, atol=1e-9)
            np.testing.assert_allclose(fr2.w[0], fr.w[0], atol=1e-9)

    def test_degenerate_raises(self):
        with pytest.raises(DegenerateFaceError):
            meshrig.triangle_frames([0, 0, 0], [1, 0, 0], [2, 0, 0])


class TestBindToGlobal:
    def unit_frame(self):
        return meshrig.triangle_frames([0, 0, 0], [1, 0, 0], [0, 1, 0])

    def test_local_origin_initialization(self):
        fr = self.unit_frame()
        mu, r, s, qf = meshrig.bind_to_global(
            np.zeros((1, 3)), np.array([[1.0, 0, 0, 0]]), np.ones((1, 3)),
            fr, np.array([0]))
        np.testing.assert_allclose(mu[0], [1 / 3, 1 / 3, 0], atol=1e-12)
        np.testing.assert_allclose(s[0], [1, 1, 1], atol=1e-15)
        np.testing.assert_allclose(gauss.quat_to_matrix(r[0]), fr.R[0], atol=1e-12)

    def test_pure_scaling_frame(self):
        fr = meshrig.TriangleFrames(R=np.eye(3)[None], M=np.zeros((1, 3)),
                                    w=np.array([2.0]))
        mu, r, s, _ = meshrig.bind_to_global(
            np.array([[1.0, 0, 0]]), np.array([[1.0, 0, 0, 0]]),
            np.array([[0.5, 1.0, 2.0]]), fr, np.array([0]))
        np.testing.assert_allclose(mu[0], [2, 0, 0], atol=1e-15)
        np.testing.assert_allclose(s[0], [1, 2, 4], atol=1e-15)

    def test_world_covariance_conjugation_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            v = rng.normal(size=(3, 3))
            fr = meshrig.triangle_frames(*v)
            q = rng.normal(size=(1, 4))
            s = np.exp(rng.normal(size=(1, 3)) * 0.3)
            mu, r_star, s_star, _ = meshrig.bind_to_global(
                rng.normal(size=(1, 3)), q, s, fr, np.array([0]))
            world_cov = gauss.build_covariance(r_star, s_star)
            local_cov = gauss.build_covariance(q, s)
            expected = fr.w[0] ** 2 * fr.R[0] @ local_cov[0] @ fr.R[0].T
            np.testing.assert_allclose(world_cov[0], expected, atol=1e-9)

    def test_bind_commutes_with_rigid_motion(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            v = rng.normal(size=(3, 3))
            Q = gauss.quat_to_matrix(rng.normal(size=4))
            t = rng.normal(size=3)
            mu_l = rng.normal(size=(1, 3))
            fr1 = meshrig.triangle_frames(*v)
            fr2 = meshrig.triangle_frames(*(v @ Q.T + t))
            mu1, _, _, _ = meshrig.bind_to_global(
                mu_l, np.array([[1.0, 0, 0, 0]]), np.ones((1, 3)), fr1, np.array([0]))
            mu2, _, _, _ = meshrig.bind_to_global(
                mu_l, np.array([[1.0, 0, 0, 0]]), np.ones((1, 3)), fr2, np.array([0]))
            np.testing.assert_allclose(mu2[0], Q @ mu1[0] + t, atol=1e-9)

    def test_backward_fd(self):
        rng = np.random.default_rng(6)
        fr = meshrig.triangle_frames(*rng.normal(size=(3, 3)))
        pf = np.array([0])
        mu_l = rng.normal(size=(1, 3))
        q_raw = rng.normal(size=(1, 4))
        s_l = np.exp(rng.normal(size=(1, 3)) * 0.2)
        w_mu = rng.normal(size=(1, 3))
        w_r = rng.normal(size=(1, 4))
        w_s = rng.normal(size=(1, 3))

        def loss(mu, q, s):
            ms, rs, ss, _ = meshrig.bind_to_global(mu, q, s, fr, pf)
            return np.sum(w_mu * ms) + np.sum(w_r * rs) + np.sum(w_s * ss)

        _, _, _, qf = meshrig.bind_to_global(mu_l, q_raw, s_l, fr, pf)
        g_mu, g_q, g_s = meshrig.bind_to_global_backward(
            mu_l, q_raw, s_l, fr, pf, qf, w_mu, w_r, w_s)
        h = 1e-6
        for arr, grad in [(mu_l, g_mu), (q_raw, g_q), (s_l, g_s)]:
            num = np.zeros_like(arr)
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                ap = arr.copy(); ap[idx] += h
                am = arr.copy(); am[idx] -= h
                args = [mu_l, q_raw, s_l]
                args_p = [ap if a is arr else a for a in args]
                args_m = [am if a is arr else a for a in args]
                num[idx] = (loss(*args_p) - loss(*args_m)) / (2 * h)
            np.testing.assert_allclose(grad, num, rtol=1e-5, atol=1e-8)


class TestRigIO:
    def test_round_trip(self, tmp_path):
        mesh = two_joint_mesh()
        path = tmp_path / "rig.json"
        meshrig.save_rig(mesh, path)
        loaded = meshrig.load_rig(path)
        np.testing.assert_array_equal(loaded.vertices, mesh.vertices)
        np.testing.assert_array_equal(loaded.faces, mesh.faces)
        np.testing.assert_array_equal(loaded.skin_weights, mesh.skin_weights)

    def test_weight_sum_violation_names_vertex(self, tmp_path):
        mesh = two_joint_mesh()
        mesh.skin_weights[2] = [0.5, 0.4]
        path = tmp_path / "rig.json"
        meshrig.save_rig(mesh, path)
        with pytest.raises(RigError, match="vertex 2"):
            meshrig.load_rig(path)

    def test_missing_key(self, tmp_path):
        path = tmp_path / "rig.json"
        path.write_text('{"vertices": []}')
        with pytest.raises(RigError, match="missing"):
            meshrig.load_rig(path)

    def test_bad_hierarchy(self, tmp_path):
        mesh = two_joint_mesh()
        mesh.joint_parents = np.array([-1, 5])
        path = tmp_path / "rig.json"
        meshrig.save_rig(mesh, path)
        with pytest.raises(RigError, match="topologically"):
            meshrig.load_rig(path)
