import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvp3d.pointcloud import PointCloud, gen_scene
from mvp3d.renderer import (
    VIEW_ORDER,
    background,
    dump_views,
    read_ppm,
    render_all,
    render_view,
    standard_cameras,
    write_ppm,
)

from oracles import CAMERA_TABLE, brute_render, random_cloud

CAMS = {c.id: c for c in standard_cameras()}


def cloud(points, colors=None):
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if colors is None:
        colors = np.full(points.shape, 0.5)
    return PointCloud(points, colors)


class TestCameras:
    def test_order(self):
        assert [c.id for c in standard_cameras()] == list(VIEW_ORDER)

    @pytest.mark.parametrize("name", VIEW_ORDER)
    def test_convention_table(self, name):
        cam = CAMS[name]
        center, vdir, u, v = CAMERA_TABLE[name]
        assert cam.center == center and cam.view_dir == vdir
        assert cam.u_axis == u and cam.v_axis == v

    @pytest.mark.parametrize("name", VIEW_ORDER)
    def test_orthonormal_frame(self, name):
        cam = CAMS[name]
        u, v, d = (np.asarray(a, float) for a in (cam.u_axis, cam.v_axis, cam.view_dir))
        frame = np.stack([u, v, d])
        np.testing.assert_allclose(frame @ frame.T, np.eye(3), atol=1e-12)
        assert abs(abs(np.dot(np.cross(u, v), d)) - 1.0) < 1e-12
        np.testing.assert_array_equal(np.asarray(cam.center), -d)


class TestRenderView:
    def test_empty_cloud(self):
        img = render_view(cloud(np.zeros((0, 3))), CAMS["front"], 4, 4)
        np.testing.assert_array_equal(img, background(4, 4))
        assert (img[..., 3] == 1.0).all()

    def test_single_point_front(self):
        img = render_view(cloud([[0, 0, 0]], [[1, 0, 0]]), CAMS["front"], 4, 4)
        px = img[2, 2]
        np.testing.assert_array_equal(px[:3], [1, 0, 0])
        assert px[3] == 0.5
        np.testing.assert_array_equal(px[4:7], [0, 0, 0])
        np.testing.assert_array_equal(px[7:10], [0, 0, 0.5])
        rest = np.ones((4, 4), bool)
        rest[2, 2] = False
        np.testing.assert_array_equal(img[rest], background(4, 4)[rest])

    def test_zbuffer_keeps_nearest(self):
        # front camera looks along +y: d = (y + 1) / 2
        pts = [[0.1, 0.4, 0.1], [0.1, -0.4, 0.1]]  # d = 0.7, 0.3
        img = render_view(cloud(pts, [[1, 0, 0], [0, 0, 1]]), CAMS["front"], 4, 4)
        assert img[2, 2, 3] == pytest.approx(0.3)
        np.testing.assert_array_equal(img[2, 2, :3], [0, 0, 1])

    def test_tie_goes_to_lower_index(self):
        pts = [[0.1, 0.0, 0.1], [0.2, 0.0, 0.2]]
        img = render_view(cloud(pts, [[1, 0, 0], [0, 1, 0]]), CAMS["front"], 4, 4)
        np.testing.assert_array_equal(img[2, 2, :3], [1, 0, 0])

    def test_clamping(self):
        img = render_view(cloud([[0.95, 0, 0], [1.0, 0, 1.0], [-1.0, 0, -1.0]]),
                          CAMS["front"], 4, 4)
        assert img[2, 3, 3] < 1.0
        assert img[3, 3, 3] < 1.0
        assert img[0, 0, 3] < 1.0

    def test_out_of_range_point_still_rendered(self):
        img = render_view(cloud([[1.3, 0, 0]]), CAMS["front"], 4, 4)
        assert (img[..., 3] < 1).sum() == 1

    def test_invalid_size(self):
        with pytest.raises(ValueError):
            render_view(cloud([[0, 0, 0]]), CAMS["top"], 0, 4)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(0, 400), W=st.integers(1, 12),
       H=st.integers(1, 12), view=st.sampled_from(VIEW_ORDER))
def test_matches_brute_force_oracle(seed, n, W, H, view):
    rng = np.random.default_rng(seed)
    pts, cols = random_cloud(rng, n)
    img = render_view(PointCloud(pts, cols), CAMS[view], W, H)
    ref = brute_render(pts, cols, view, W, H)
    np.testing.assert_allclose(img, ref, atol=1e-12, rtol=0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(0, 300))
def test_view_invariants(seed, n):
    # strictly inside the cube so no foreground point sits at depth 1
    rng = np.random.default_rng(seed)
    pts, cols = rng.uniform(-0.99, 0.99, (n, 3)), rng.uniform(0, 1, (n, 3))
    views = render_all(PointCloud(pts, cols), 16, 16)
    assert views.shape == (5, 16, 16, 10)
    for img in views:
        fg = img[..., 3] < 1.0
        assert fg.sum() <= n
        np.testing.assert_array_equal(img[fg, 9], img[fg, 3])
        assert (img[..., :3] >= 0).all() and (img[..., :3] <= 1).all()
        assert (img[..., 3] >= 0).all() and (img[..., 3] <= 1).all()
        assert (np.abs(img[fg, 4:7]) <= 1).all()
        np.testing.assert_array_equal(img[~fg], np.broadcast_to(background(1, 1)[0, 0], img[~fg].shape))


def test_render_all_composition_and_determinism():
    c, _ = gen_scene(4)
    views = render_all(c, 16, 16)
    again = render_all(c, 16, 16)
    assert views.tobytes() == again.tobytes()
    for i, cam in enumerate(standard_cameras()):
        np.testing.assert_array_equal(views[i], render_view(c, cam, 16, 16))


def test_front_back_mirror():
    # uniform-color cube surface, symmetrized under x -> -x and y -> -y; random
    # samples avoid points sitting exactly on pixel boundaries
    rng = np.random.default_rng(0)
    a = rng.uniform(-0.47, 0.47, (3000, 2))
    s = rng.choice([-0.47, 0.47], 3000)
    axis = rng.integers(0, 3, 3000)
    pts = np.empty((3000, 3))
    for k in range(3):
        rest = [j for j in range(3) if j != k]
        sel = axis == k
        pts[sel, k] = s[sel]
        pts[np.ix_(sel, rest)] = a[sel]
    pts = np.concatenate([pts, pts * [-1, 1, 1], pts * [1, -1, 1], pts * [-1, -1, 1]])
    views = render_all(cloud(pts), 20, 20)
    front, back = views[1], views[2]
    np.testing.assert_array_equal(front[..., 3], back[..., 3][:, ::-1])


def test_ppm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    rgb = rng.integers(0, 256, (5, 7, 3)) / 255.0
    write_ppm(tmp_path / "x.ppm", rgb)
    np.testing.assert_allclose(read_ppm(tmp_path / "x.ppm"), rgb, atol=1e-12)
    raw = (tmp_path / "x.ppm").read_bytes()
    assert raw.startswith(b"P6\n7 5\n255\n")
    # top row of the file is the v-max row
    assert raw[len(b"P6\n7 5\n255\n"):][:3] == bytes(np.round(rgb[-1, 0] * 255).astype(np.uint8))


def test_dump_views_names(tmp_path):
    c, _ = gen_scene(1)
    files = dump_views(render_all(c, 8, 8), tmp_path, "s1")
    names = {f.name for f in files}
    assert len(files) == 20
    for v in VIEW_ORDER:
        for tag in ("rgb", "xyz", "cam"):
            assert f"s1_{v}_{tag}.ppm" in names
        assert f"s1_{v}_depth.pgm" in names
    assert (tmp_path / "s1_top_depth.pgm").read_bytes().startswith(b"P5\n8 8\n65535\n")
