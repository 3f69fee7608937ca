import numpy as np
import pytest
from hypothesis import given, strategies as st

from poseforest.depthcore import (CameraIntrinsics, DepthFormatError, DepthImage, SplitTest,
                                  back_project, evaluate_split, feature_response,
                                  feature_responses, project, read_dph, write_dph)

from oracles import naive_response

CAM = CameraIntrinsics(100.0, 100.0, 4.0, 3.0)


def test_back_project_principal_point():
    img = DepthImage(np.full((7, 9), 2000, np.uint16))
    p = back_project((4, 3), img, CAM)
    assert (p.x, p.y, p.z) == (0.0, 0.0, 2.0)


def test_back_project_one_focal_right():
    cam = CameraIntrinsics(2.0, 2.0, 1.0, 1.0)
    img = DepthImage(np.full((3, 4), 1000, np.uint16))
    p = back_project((3, 1), img, cam)
    assert np.allclose(p.as_array(), [1.0, 0.0, 1.0])


def test_back_project_background_is_error():
    with pytest.raises(ValueError):
        back_project((0, 0), DepthImage.blank(4, 4), CAM)


def test_response_on_plane_is_zero():
    img = DepthImage(np.full((20, 20), 1500, np.uint16))
    assert feature_response(img, (10, 10), SplitTest((1.0, -2.0), (-3.0, 0.5), 0)) == 0


def test_identical_probes_give_zero(rng):
    img = DepthImage(rng.integers(500, 3000, (10, 10)).astype(np.uint16))
    assert feature_response(img, (5, 5), SplitTest((4.0, 1.0), (4.0, 1.0), 0)) == 0


def test_background_minus_foreground():
    d = np.full((3, 3), 10000, np.uint16)
    d[1, 1] = 1500
    img = DepthImage(d)
    # u reaches (2, 1) which is background, v stays on (1, 1)
    test = SplitTest((1.5, 0.0), (0.0, 0.0), 0)
    assert feature_response(img, (1, 1), test) == 8500


def test_off_image_probe_reads_background():
    img = DepthImage(np.full((3, 3), 1000, np.uint16))
    assert feature_response(img, (0, 0), SplitTest((-5.0, 0.0), (0.0, 0.0), 0)) == 9000


def test_branch_convention():
    img = DepthImage(np.full((3, 3), 1000, np.uint16))
    assert evaluate_split(img, (1, 1), SplitTest((0, 0), (0, 0), 1)) == "left"
    assert evaluate_split(img, (1, 1), SplitTest((0, 0), (0, 0), 0)) == "right"


@given(st.integers(0, 2**32 - 1))
def test_vectorised_matches_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    d = rng.integers(400, 4000, (8, 11)).astype(np.uint16)
    d[rng.random(d.shape) < 0.3] = 10000
    img = DepthImage(d)
    xs, ys = img.foreground_pixels()
    if len(xs) == 0:
        return
    tests = rng.uniform(-8, 8, (5, 4))
    for t in range(5):
        got = feature_responses(img, xs, ys, tests[t])
        for s in range(len(xs)):
            assert got[s] == naive_response(d, 10000, xs[s], ys[s], tests[t])


@given(st.integers(1000, 4000), st.integers(1000, 4000),
       st.sampled_from([(10.0, -5.0), (20.0, 0.0), (45.0, 0.0), (0.0, -50.0), (-15.0, 18.0)]))
def test_plane_translation_invariance(z1, z2, offset):
    # a 0.6 m square plate facing the camera; its image shrinks like 1/z and
    # so do the probe offsets, so the probes see the same plate points
    def scene(z_mm):
        half = 100.0 * 0.3 / (z_mm / 1000.0)  # focal 100 px
        y, x = np.mgrid[0:201, 0:201]
        inside = (np.abs(x - 100) <= half) & (np.abs(y - 100) <= half)
        return DepthImage(np.where(inside, z_mm, 10000).astype(np.uint16))

    test = SplitTest(offset, (0.0, 0.0), 0)
    r1 = feature_response(scene(z1), (100, 100), test)
    r2 = feature_response(scene(z2), (100, 100), test)
    assert (r1 == 0) == (r2 == 0)
    assert r1 - (10000 - z1) * (r1 != 0) == r2 - (10000 - z2) * (r2 != 0) == 0


def test_project_inverts_back_project(rng):
    cam = CameraIntrinsics(140.0, 141.0, 79.5, 59.5)
    d = rng.integers(800, 4000, (120, 160)).astype(np.uint16)
    img = DepthImage(d)
    for _ in range(50):
        q = (int(rng.integers(160)), int(rng.integers(120)))
        p = back_project(q, img, cam)
        assert np.allclose(project(p.as_array(), cam)[0], q, atol=1e-9)


def test_dph_round_trip(tmp_path, rng):
    img = DepthImage(rng.integers(0, 10001, (5, 7)).astype(np.uint16), 10000)
    write_dph(tmp_path / "a.dph", img)
    back = read_dph(tmp_path / "a.dph")
    assert back.background_depth == 10000
    assert np.array_equal(back.depths, img.depths)


def test_dph_rejects_garbage(tmp_path):
    (tmp_path / "bad.dph").write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(DepthFormatError):
        read_dph(tmp_path / "bad.dph")
    img = DepthImage(np.ones((4, 4), np.uint16))
    write_dph(tmp_path / "t.dph", img)
    data = (tmp_path / "t.dph").read_bytes()
    (tmp_path / "t.dph").write_bytes(data[:-3])
    with pytest.raises(DepthFormatError):
        read_dph(tmp_path / "t.dph")
