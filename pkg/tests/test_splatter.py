import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splatdeblur import autodiff as ad
from splatdeblur import splatter
from splatdeblur.liegroup import Pose, ScrewAxis, se3_exp
from splatdeblur.splatter import Camera, GaussianCloud, covariance, project, quat_to_rotmat, render

from gradcheck import check

LOGIT = lambda a: np.log(a / (1 - a))


def camera(size=16, f=20.0, pose=None):
    c = (size - 1) / 2
    return Camera(pose or Pose.identity(), f, f, c, c, size, size)


def cloud(G, rng, depth=3.0, spread=0.6, sh=1):
    return GaussianCloud(
        means=np.column_stack([rng.uniform(-spread, spread, (G, 2)), rng.uniform(depth - 0.5, depth + 0.5, G)]),
        log_scales=np.log(rng.uniform(0.08, 0.2, (G, 3))),
        quats=rng.normal(size=(G, 4)),
        opacity_logits=rng.uniform(-1, 2, G),
        colors=rng.normal(0, 0.5, (G, sh, 3)),
    )


def single(mean, scale, logit, rgb):
    return GaussianCloud([mean], [np.log(scale)] * 3, [1, 0, 0, 0], [logit], splatter.rgb_to_sh(np.array([[rgb]])))


def test_covariance_examples():
    assert np.array_equal(covariance([1, 1, 1], [1, 0, 0, 0]), np.eye(3))
    assert np.array_equal(covariance([2, 1, 1], [1, 0, 0, 0]), np.diag([4.0, 1, 1]))


@given(st.lists(st.floats(0.01, 3), min_size=3, max_size=3),
       st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 0.1))
def test_covariance_is_psd(s, q):
    S = covariance(s, q)
    assert np.max(np.abs(S - S.T)) < 1e-12
    assert np.min(np.linalg.eigvalsh(S)) >= -1e-12
    # eigenvalues are the squared scales
    assert np.allclose(np.sort(np.linalg.eigvalsh(S)), np.sort(np.square(s)), rtol=1e-9, atol=1e-12)


def test_tensor_covariance_matches_reference():
    rng = np.random.default_rng(0)
    ls, q = rng.normal(size=(6, 3)) * 0.3, rng.normal(size=(6, 4))
    got = splatter.world_covariances(ad.Tensor(ls), ad.Tensor(q)).data
    for i in range(6):
        assert np.allclose(got[i], covariance(np.exp(ls[i]), q[i]), atol=1e-14)


def test_quaternion_rotation_is_orthonormal():
    R = quat_to_rotmat([0.3, -0.2, 0.9, 0.1])
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-14) and np.isclose(np.linalg.det(R), 1.0)


def test_project_examples():
    cam = Camera(Pose.identity(), 100.0, 100.0, 32.0, 32.0, 64, 64)
    uv, S2, z = project([0, 0, 1.0], np.eye(3), cam)
    assert np.array_equal(uv, [32.0, 32.0]) and z == 1.0
    sigma, depth = 0.05, 2.5
    _, S2, _ = project([0, 0, depth], sigma ** 2 * np.eye(3), cam)
    assert np.allclose(S2, (sigma * 100 / depth) ** 2 * np.eye(2), rtol=1e-14)
    assert project([0, 0, 0.005], np.eye(3), cam) is None


def test_project_matches_numerical_jacobian():
    rng = np.random.default_rng(1)
    pose = se3_exp(ScrewAxis(np.array([0.0, 0.6, 0.8]), rng.normal(size=3) * 0.1, 0.2))
    cam = Camera(pose, 80.0, 70.0, 31.5, 30.5, 64, 64)
    for _ in range(10):
        mu = rng.normal(size=3) * 0.3 + [0, 0, 3]
        Sigma = covariance(rng.uniform(0.05, 0.3, 3), rng.normal(size=4))
        uv, S2, _ = project(mu, Sigma, cam)

        def pix(p):
            return project(p, np.eye(3), cam)[0]

        J = np.column_stack([(pix(mu + e) - pix(mu - e)) / 2e-6 for e in np.eye(3) * 1e-6])
        assert np.allclose(S2, J @ Sigma @ J.T, atol=1e-6 * max(1.0, np.abs(S2).max()))


def test_empty_and_culled_clouds_are_black():
    cam = camera()
    empty = GaussianCloud(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 1, 3)))
    assert np.array_equal(render(empty, cam).data, np.zeros((16, 16, 3)))
    behind = single([0, 0, -1.0], 0.1, 2.0, [1, 1, 1])
    assert np.array_equal(render(behind, cam).data, np.zeros((16, 16, 3)))


def test_single_gaussian_centre_value():
    cam = Camera(Pose.identity(), 20.0, 20.0, 8.0, 8.0, 17, 17)
    img = render(single([0, 0, 2.0], 0.1, 1.5, [1, 1, 1]), cam).data
    a = 1 / (1 + np.exp(-1.5))
    assert np.allclose(img[8, 8], a, rtol=1e-14)


def test_two_gaussian_blend():
    cam = Camera(Pose.identity(), 20.0, 20.0, 8.0, 8.0, 17, 17)
    front = single([0, 0, 2.0], 0.1, 0.0, [1, 0, 0])      # alpha 0.5
    back = single([0, 0, 3.0], 0.1, 60.0, [0, 0, 1])      # alpha 1 in double precision
    both = GaussianCloud(*(np.concatenate([getattr(back, k), getattr(front, k)]) for k in splatter.CLOUD_KEYS))
    img = render(both, cam).data
    assert np.allclose(img[8, 8], [0.5, 0.0, 0.5], atol=1e-15)


def test_transmittance_telescopes():
    rng = np.random.default_rng(2)
    c = cloud(80, rng)
    c.colors = splatter.rgb_to_sh(np.ones((80, 1, 3)))
    aux = {}
    img = render(c, camera(24), aux=aux).data
    assert np.max(np.abs(img[..., 0] + aux["transmittance"] - 1.0)) < 1e-10


def test_input_order_does_not_matter():
    rng = np.random.default_rng(3)
    c = cloud(60, rng)
    perm = rng.permutation(60)
    shuffled = GaussianCloud(*(getattr(c, k)[perm] for k in splatter.CLOUD_KEYS))
    assert np.array_equal(render(c, camera()).data, render(shuffled, camera()).data)


def test_integer_shift_equivariance():
    rng = np.random.default_rng(4)
    c = cloud(50, rng)
    base = camera(20)
    img = render(c, base).data
    for dx, dy in ((1, 0), (0, 2), (-3, 1)):
        cam = Camera(base.pose, base.fx, base.fy, base.cx + dx, base.cy + dy, 20, 20)
        sh = render(c, cam).data
        ys, xs = slice(max(dy, 0), 20 + min(dy, 0)), slice(max(dx, 0), 20 + min(dx, 0))
        yo, xo = slice(max(-dy, 0), 20 + min(-dy, 0)), slice(max(-dx, 0), 20 + min(-dx, 0))
        assert sh[ys, xs].tobytes() == img[yo, xo].tobytes()


@pytest.mark.parametrize("sh", [1, 4])
def test_gradients_wrt_cloud_and_pose(sh):
    rng = np.random.default_rng(5 + sh)
    c = cloud(30, rng, sh=sh)
    params = {k: ad.Tensor(getattr(c, k), requires_grad=True) for k in splatter.CLOUD_KEYS}
    pose = se3_exp(ScrewAxis(np.array([0.0, 0.0, 1.0]), np.array([0.05, 0.0, 0.0]), 0.05))
    R = ad.Tensor(pose.R, requires_grad=True)
    t = ad.Tensor(pose.t, requires_grad=True)
    cam = camera(16)
    build = lambda: render(params, cam, R, t)
    assert check(build, list(params.values()) + [R, t], rng=rng, max_entries=40) < 1e-4


def test_cloud_file_round_trip(tmp_path):
    for sh in (1, 4):
        c = cloud(7, np.random.default_rng(sh), sh=sh)
        c.save(tmp_path / "c.cloud")
        back = GaussianCloud.load(tmp_path / "c.cloud")
        assert back.sh_degree == (0 if sh == 1 else 1)
        for k in splatter.CLOUD_KEYS:
            assert getattr(back, k).tobytes() == getattr(c, k).tobytes()
    (tmp_path / "bad.cloud").write_text("nonsense\n")
    with pytest.raises(ValueError):
        GaussianCloud.load(tmp_path / "bad.cloud")


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera(Pose.identity(), 0.0, 1.0, 0, 0, 4, 4)


def test_sh_round_trip():
    rgb = np.array([0.1, 0.5, 0.9])
    assert np.allclose(splatter.sh_to_rgb(splatter.rgb_to_sh(rgb)), rgb, atol=1e-15)
