import numpy as np
import pytest

import oracles
from triplane_grasp.gaussians import SH_C0, GaussianSet, GaussianSplat
from triplane_grasp.geometry import CameraModel, RigidTransform, Rotation
from triplane_grasp.renderer import Image, project_gaussian, render, render_naive


def camera(size=64, f=80.0):
    return CameraModel.look_at((0.0, -1.2, 0.4), (0, 0, 0), fx=f, width=size, height=size)


def random_set(m, seed, degree=0, spread=0.25):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(m, 4))
    return GaussianSet(rng.uniform(-spread, spread, (m, 3)), rng.uniform(0.05, 0.95, m),
                       rng.uniform(0.005, 0.05, (m, 3)), q / np.linalg.norm(q, axis=1, keepdims=True),
                       rng.normal(scale=0.8, size=(m, (degree + 1) ** 2, 3)), degree)


def cam_dict(cam):
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy, "width": cam.width, "height": cam.height,
            "R": cam.extrinsic.rotation.as_matrix(), "t": cam.extrinsic.translation}


def test_tile_matches_naive_500_splats():
    gs = random_set(500, 0, degree=1)
    cam = camera()
    a = render(gs, cam, background=(0.2, 0.3, 0.4))
    b = render_naive(gs, cam, background=(0.2, 0.3, 0.4))
    assert np.max(np.abs(a.pixels - b.pixels)) <= 1e-5
    assert a.diagnostics["visible"] > 400


def test_naive_matches_scalar_oracle():
    gs = random_set(25, 1, degree=0)
    cam = camera(size=20, f=25.0)
    colors = np.clip(gs.sh[:, 0, :] * SH_C0 + 0.5, 0, 1)  # degree 0: direction independent
    want = oracles.render_scalar(gs.positions, gs.opacities, gs.scales, gs.rotations, colors, cam_dict(cam),
                                 background=(0.1, 0.1, 0.1))
    got = render_naive(gs, cam, background=(0.1, 0.1, 0.1)).pixels
    assert np.max(np.abs(got - want)) <= 1e-12
    assert np.max(np.abs(render(gs, cam, background=(0.1, 0.1, 0.1), tile=8).pixels - want)) <= 1e-12


def test_permutation_invariance_is_exact():
    gs = random_set(200, 2, degree=1)
    cam = camera()
    base = render(gs, cam).pixels
    for seed in range(3):
        perm = np.random.default_rng(seed).permutation(len(gs))
        assert np.array_equal(render(gs.permuted(perm), cam).pixels, base)


def test_permutation_invariance_with_depth_ties():
    rng = np.random.default_rng(3)
    gs = random_set(30, 3)
    pos = gs.positions.copy()
    pos[:, 1] = 0.0  # equal depth for a camera looking down +y
    gs = GaussianSet(pos, gs.opacities, gs.scales, gs.rotations, gs.sh, 0)
    cam = CameraModel.look_at((0.0, -1.0, 0.0), (0, 0, 0), fx=60, width=32, height=32)
    base = render(gs, cam).pixels
    assert np.array_equal(render(gs.permuted(rng.permutation(30)), cam).pixels, base)


def test_on_axis_projection_closed_form():
    cam = CameraModel(70.0, 90.0, 31.0, 27.0, 64, 64)
    sigma, z = 0.02, 1.5
    splat = GaussianSplat(np.array([0, 0, z]), 0.5, np.full(3, sigma), Rotation.identity(), np.zeros((1, 3)))
    pg = project_gaussian(splat, cam)
    assert np.allclose(pg.mean2d, [31.0, 27.0], atol=1e-12)
    want = np.diag([(70 * sigma / z) ** 2 + 0.3, (90 * sigma / z) ** 2 + 0.3])
    assert np.max(np.abs(pg.cov2d - want)) <= 1e-9
    assert pg.depth == z


def test_behind_camera_is_culled():
    cam = CameraModel(70.0, 70.0, 31.0, 31.0, 64, 64)
    splat = GaussianSplat(np.array([0, 0, -1.0]), 0.5, np.full(3, 0.01), Rotation.identity(), np.zeros((1, 3)))
    assert project_gaussian(splat, cam) is None
    near = GaussianSplat(np.array([0, 0, 0.005]), 0.5, np.full(3, 0.01), Rotation.identity(), np.zeros((1, 3)))
    assert project_gaussian(near, cam) is None


def test_projection_matches_finite_difference_jacobian():
    rng = np.random.default_rng(4)
    for _ in range(10):
        cam = CameraModel(rng.uniform(40, 120), rng.uniform(40, 120), 32.0, 32.0, 64, 64,
                          RigidTransform(Rotation.random(rng), rng.normal(size=3) * 0.1 + [0, 0, 2.0]))
        q = rng.normal(size=4)
        splat = GaussianSplat(rng.normal(size=3) * 0.2, 0.5, rng.uniform(0.01, 0.1, 3), Rotation(q),
                              np.zeros((1, 3)))
        pg = project_gaussian(splat, cam)
        R, t = cam.extrinsic.rotation.as_matrix(), cam.extrinsic.translation

        def proj(p):
            pc = R @ p + t
            return np.array([cam.fx * pc[0] / pc[2] + cam.cx, cam.fy * pc[1] / pc[2] + cam.cy])

        h = 1e-6
        J = np.stack([(proj(splat.position + h * e) - proj(splat.position - h * e)) / (2 * h)
                      for e in np.eye(3)], axis=1)  # d pixel / d world
        rot = splat.rotation.as_matrix()
        sigma = rot @ np.diag(splat.scale ** 2) @ rot.T
        want = J @ sigma @ J.T + 0.3 * np.eye(2)
        assert np.max(np.abs(pg.cov2d - want) / np.abs(want).max()) <= 1e-5


def test_empty_set_gives_background():
    cam = camera(16)
    empty = GaussianSet.from_splats([], sh_degree=1)
    for fn in (render, render_naive):
        img = fn(empty, cam, background=(0.25, 0.5, 0.75))
        assert np.array_equal(img.pixels, np.broadcast_to([0.25, 0.5, 0.75], (16, 16, 3)))


def test_single_splat_peak_and_monotone_decay():
    cam = CameraModel(60.0, 60.0, 20.0, 20.0, 41, 41)
    sh = np.zeros((1, 3))
    sh[0] = 0.5 / SH_C0
    splat = GaussianSplat(np.array([0, 0, 1.0]), 0.999, np.full(3, 0.05), Rotation.identity(), sh)
    img = render(GaussianSet.from_splats([splat]), cam).pixels[..., 0]
    assert np.unravel_index(np.argmax(img), img.shape) == (20, 20)
    row = img[20, 20:]
    assert np.all(np.diff(row) <= 0)


def test_resolution_doubling_consistency():
    gs = random_set(150, 5, spread=0.15)
    cam = camera(32, 40.0)
    lo = render(gs, cam).pixels
    hi = render(gs, cam.scaled(2.0)).pixels
    down = hi.reshape(32, 2, 32, 2, 3).mean(axis=(1, 3))
    assert np.mean(np.abs(down - lo)) <= 0.02


def test_image_validation_and_png(tmp_path):
    with pytest.raises(ValueError):
        Image(np.full((2, 2, 3), 1.5))
    with pytest.raises(ValueError):
        Image(np.zeros((2, 2)))
    img = render(random_set(50, 6), camera(24))
    img.save_png(tmp_path / "a.png", with_alpha=True)
    back = Image.load_png(tmp_path / "a.png")
    assert np.array_equal(back.pixels, img.to_uint8() / 255.0)
