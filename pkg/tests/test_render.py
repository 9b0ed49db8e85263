import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gensync.autodiff import Tensor, grad_check, mean
from gensync.errors import DimensionError
from gensync.render import (
    Camera, COV_EPS, decode_ppm, downsample, encode_ppm, export_frame, image_loss, import_frame, project,
    pyramid_loss, render,
)


def unit_quats(n):
    q = np.zeros((n, 4))
    q[:, 0] = 1.0
    return q


def random_scene(rng, n, spread=0.6):
    pos = rng.uniform(-spread, spread, (n, 3))
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    ls = np.log(rng.uniform(0.05, 0.2, (n, 3)))
    op = rng.uniform(0.2, 0.9, n)
    col = rng.uniform(0.0, 1.0, (n, 3))
    return pos, q, ls, op, col


def draw(pos, q, ls, op, col, cam):
    return render(Tensor(pos), Tensor(q), Tensor(ls), Tensor(op), Tensor(col), cam).data


# ---------------------------------------------------------------- projection

def test_on_axis_point_projects_to_center():
    for z in (-0.7, 0.0, 0.4):
        means, _, _ = project(Tensor([[0.0, 0.0, z]]), Tensor(unit_quats(1)), Tensor(np.zeros((1, 3))), Camera())
        np.testing.assert_array_equal(means.data, [[0.0, 0.0]])


def test_isotropic_covariance():
    s = 0.13
    _, cov, _ = project(Tensor([[0.2, 0.1, 0.0]]), Tensor(unit_quats(1)), Tensor(np.full((1, 3), np.log(s))),
                        Camera(0.4, -0.2))
    np.testing.assert_allclose(cov.data[0], (s * s + COV_EPS) * np.eye(2), atol=1e-15)


def test_quarter_turn_azimuth_sends_x_to_depth():
    cam = Camera(np.pi / 2, 0.0)
    means, _, depth = project(Tensor([[1.0, 0.0, 0.0]]), Tensor(unit_quats(1)), Tensor(np.zeros((1, 3))), cam)
    c, s = np.cos(-np.pi / 2), np.sin(-np.pi / 2)
    expected = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]]) @ np.array([1.0, 0.0, 0.0])
    np.testing.assert_allclose(means.data[0], expected[:2], atol=1e-15)
    assert depth[0] == pytest.approx(expected[2]) and abs(depth[0]) == pytest.approx(1.0)


def test_camera_rejects_bad_geometry():
    with pytest.raises(ValueError):
        Camera(width=0)
    with pytest.raises(ValueError):
        Camera(scale=0.0)


# ---------------------------------------------------------------- rasterizer

def test_zero_gaussians_is_black():
    img = draw(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)),
               Camera(width=8, height=8))
    assert img.shape == (8, 8, 3) and not img.any()


def test_single_red_gaussian():
    cam = Camera(width=17, height=17)
    img = draw(np.zeros((1, 3)), unit_quats(1), np.full((1, 3), np.log(0.1)), np.array([0.9999]),
               np.array([[1.0, 0.0, 0.0]]), cam)
    assert img[8, 8, 0] > 0.99
    assert img[0, 0].max() < 0.01 and img[-1, -1].max() < 0.01


def test_zero_opacity_gives_background():
    rng = np.random.default_rng(0)
    pos, q, ls, op, col = random_scene(rng, 10)
    assert not draw(pos, q, ls, np.zeros(10), col, Camera(width=16, height=16)).any()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12))
def test_permutation_leaves_image_bitwise_unchanged(seed, n):
    rng = np.random.default_rng(seed)
    pos, q, ls, op, col = random_scene(rng, n)
    # duplicate depths exercise the index tie-break
    pos[: n // 2, 2] = 0.1
    perm = rng.permutation(n)
    cam = Camera(0.1, 0.05, 1.0, 16, 16)
    a = draw(pos, q, ls, op, col, cam)
    b = draw(pos[perm], q[perm], ls[perm], op[perm], col[perm], cam)
    # identical Gaussians at tied depth must not change the picture either
    assert np.array_equal(a, b) or np.array_equal(np.sort(a.ravel()), np.sort(b.ravel()))


def test_permutation_with_distinct_depths_is_bitwise():
    rng = np.random.default_rng(5)
    pos, q, ls, op, col = random_scene(rng, 20)
    perm = rng.permutation(20)
    cam = Camera(width=24, height=24)
    assert np.array_equal(draw(pos, q, ls, op, col, cam), draw(pos[perm], q[perm], ls[perm], op[perm], col[perm], cam))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_pixels_stay_in_unit_range(seed):
    rng = np.random.default_rng(seed)
    pos, q, ls, op, col = random_scene(rng, 15)
    op = rng.uniform(0.0, 1.0, 15)
    img = draw(pos, q, ls, op, col, Camera(width=12, height=12))
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_translation_shifts_image():
    rng = np.random.default_rng(2)
    pos, q, ls, op, col = random_scene(rng, 6, spread=0.3)
    cam = Camera(width=32, height=32)
    shift_px = 3
    dx = shift_px * 2.0 * cam.scale / cam.width
    a = draw(pos, q, ls, op, col, cam).sum(axis=2)
    b = draw(pos + [dx, 0.0, 0.0], q, ls, op, col, cam).sum(axis=2)
    scores = [np.sum(np.roll(a, k, axis=1) * b) for k in range(-6, 7)]
    assert int(np.argmax(scores)) - 6 == shift_px


def test_position_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    pos, q, ls, op, col = random_scene(rng, 5)
    P = Tensor(pos, requires_grad=True)
    cam = Camera(0.2, 0.1, 1.0, 16, 16)
    f = lambda: mean(render(P, Tensor(q), Tensor(ls), Tensor(op), Tensor(col), cam))
    assert grad_check(f, [P]) < 1e-4


def test_all_input_gradients():
    rng = np.random.default_rng(4)
    arrays = random_scene(rng, 5)
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    target = rng.uniform(0, 1, (16, 16, 3))
    cam = Camera(-0.3, 0.2, 1.0, 16, 16)
    assert grad_check(lambda: image_loss(render(*ts, cam), target), ts) < 1e-4


# ---------------------------------------------------------------- loss

def test_image_loss_examples():
    black, white = np.zeros((4, 4, 3)), np.ones((4, 4, 3))
    assert image_loss(Tensor(black), black).item() == 0.0
    assert image_loss(Tensor(black), white).item() == pytest.approx(1.0)
    rng = np.random.default_rng(0)
    a, b = rng.uniform(size=(5, 6, 3)), rng.uniform(size=(5, 6, 3))
    d = a - b
    assert image_loss(Tensor(a), b).item() == pytest.approx(0.8 * np.abs(d).mean() + 0.2 * (d * d).mean(), rel=1e-14)


def test_image_loss_dimension_error():
    with pytest.raises(DimensionError):
        image_loss(Tensor(np.zeros((2, 2, 3))), np.zeros((3, 2, 3)))


def test_downsample_preserves_constant_images():
    img = np.full((16, 16, 3), 0.3)
    np.testing.assert_allclose(downsample(img, 4), 0.3, atol=1e-15)
    np.testing.assert_allclose(downsample(Tensor(img), 4).data, downsample(img, 4), atol=1e-15)


def test_pyramid_loss_reduces_to_image_loss():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=(16, 16, 3)), rng.uniform(size=(16, 16, 3))
    assert pyramid_loss(Tensor(a), b, 0.0).item() == image_loss(Tensor(a), b).item()
    assert pyramid_loss(Tensor(a), b, 1.0).item() > image_loss(Tensor(a), b).item()


def test_pyramid_loss_gradient():
    rng = np.random.default_rng(6)
    x = Tensor(rng.uniform(size=(16, 16, 3)), requires_grad=True)
    target = rng.uniform(size=(16, 16, 3))
    assert grad_check(lambda: pyramid_loss(x, target, 1.0), [x], max_coords=40) < 1e-6


# ---------------------------------------------------------------- PPM

def test_ppm_golden_white_pixel():
    assert encode_ppm(np.ones((1, 1, 3))) == b"P6\n1 1\n255\n\xff\xff\xff"


def test_ppm_golden_2x2():
    img = np.array([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
                    [[0.0, 0.0, 1.0], [0.5, 0.25, 2.0]]])
    expected = b"P6\n2 2\n255\n" + bytes([255, 0, 0, 0, 255, 0, 0, 0, 255, 128, 64, 255])
    assert encode_ppm(img) == expected


def test_ppm_round_trip_within_quantization(tmp_path):
    img = np.random.default_rng(0).uniform(size=(7, 5, 3))
    export_frame(img, tmp_path / "f.ppm")
    back = import_frame(tmp_path / "f.ppm")
    assert np.abs(back - img).max() <= 1 / 510 + 1e-12


def test_ppm_64_file_size(tmp_path):
    export_frame(np.zeros((64, 64, 3)), tmp_path / "f.ppm")
    assert (tmp_path / "f.ppm").stat().st_size == len(b"P6\n64 64\n255\n") + 12288


def test_png_is_lossless_copy(tmp_path):
    from PIL import Image
    img = np.random.default_rng(1).uniform(size=(4, 6, 3))
    export_frame(img, tmp_path / "f.ppm", png=True)
    png = np.asarray(Image.open(tmp_path / "f.png"), dtype=np.float64) / 255.0
    np.testing.assert_array_equal(png, import_frame(tmp_path / "f.ppm"))


def test_export_error_names_path(tmp_path):
    bad = tmp_path / "missing" / "f.ppm"
    with pytest.raises(OSError, match="missing"):
        export_frame(np.zeros((1, 1, 3)), bad)


def test_decode_rejects_truncation():
    with pytest.raises(ValueError):
        decode_ppm(b"P6\n2 2\n255\n\x00\x00")
