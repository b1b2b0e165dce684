import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from planview.geometry import (CameraIntrinsics, FrameError, PlanPose, box_corners, focal_from_fov,
                               from_frame, in_fov, local_to_global_yaw, plan_location,
                               project_to_camera, to_frame, world_to_camera, wrap_angle)

# 320/tan(30 deg) = 320*sqrt(3) and 960*sqrt(3), evaluated with mpmath at 30 digits
F640 = 554.256258422040733
F1920 = 1662.76877526612220


def test_focal_from_fov_examples():
    assert focal_from_fov(640, 60) == pytest.approx(F640, abs=1e-9)
    assert focal_from_fov(2, 90) == pytest.approx(1.0, rel=1e-12)
    assert focal_from_fov(1920, 60) == pytest.approx(F1920, abs=1e-9)


@pytest.mark.parametrize("w,fov", [(0, 60), (-5, 60), (640, 0), (640, 180), (640, -1)])
def test_focal_from_fov_domain(w, fov):
    with pytest.raises(ValueError):
        focal_from_fov(w, fov)


def test_intrinsics_invariant():
    intr = CameraIntrinsics.from_fov(1280, 720, 75.0)
    expected = 640 / math.tan(math.radians(37.5))
    assert abs(intr.focal_length_px - expected) / expected < 1e-9


def test_local_to_global_examples():
    assert local_to_global_yaw(math.pi / 4, 0, F640) == pytest.approx(math.pi / 4, abs=1e-12)
    out = local_to_global_yaw(math.pi / 6, 320, F640)
    # result may wrap to just below 2*pi
    assert min(out, 2 * math.pi - out) < 1e-6
    assert local_to_global_yaw(0.0, F640, F640) == pytest.approx(2 * math.pi - math.pi / 4, abs=1e-9)


def test_local_to_global_periodic():
    rng = np.random.default_rng(3)
    for a, x in rng.uniform([-7, -900], [7, 900], size=(200, 2)):
        y1 = local_to_global_yaw(a, x, F1920)
        y2 = local_to_global_yaw(a + 2 * math.pi, x, F1920)
        d = abs(y1 - y2)
        assert min(d, 2 * math.pi - d) < 1e-12
        assert 0.0 <= y1 < 2 * math.pi


def test_plan_location_examples():
    assert plan_location(10, 0, 123.0) == (0.0, 10)
    x, y = plan_location(5, 77.0, 77.0)
    assert (x, y) == (5.0, 5)
    x, y = plan_location(20, -277.1281, F640)
    assert x == pytest.approx(-10.0, abs=1e-4) and y == 20


def test_plan_location_domain():
    with pytest.raises(ValueError):
        plan_location(0.0, 1.0, 100.0)
    with pytest.raises(ValueError):
        plan_location(1.0, 1.0, 0.0)


def _as_set(pts):
    return {(round(float(x), 9) + 0.0, round(float(y), 9) + 0.0) for x, y in pts}


def test_box_corners_examples():
    c = box_corners(PlanPose(0, 0, 0), 4, 2)
    np.testing.assert_allclose(c, [(1, 2), (1, -2), (-1, -2), (-1, 2)], atol=1e-12)
    c90 = box_corners(PlanPose(0, 0, math.pi / 2), 4, 2)
    assert _as_set(c90) == _as_set([(-2, 1), (2, 1), (2, -1), (-2, -1)])
    np.testing.assert_allclose(box_corners(PlanPose(3, 4, 0), 4, 2), c + (3, 4), atol=1e-12)


def test_box_corners_rejects_bad_dims():
    with pytest.raises(ValueError):
        box_corners(PlanPose(0, 0, 0), 0, 2)


@given(st.floats(-100, 100), st.floats(-100, 100), st.floats(0, 2 * math.pi),
       st.floats(0.1, 20), st.floats(0.1, 20))
def test_box_corners_is_rectangle(x, y, yaw, l, w):
    c = box_corners(PlanPose(x, y, yaw), l, w)
    sides = [np.linalg.norm(c[(k + 1) % 4] - c[k]) for k in range(4)]
    assert sides[0] == pytest.approx(sides[2], rel=1e-9)
    assert sides[1] == pytest.approx(sides[3], rel=1e-9)
    assert np.linalg.norm(c[2] - c[0]) == pytest.approx(np.linalg.norm(c[3] - c[1]), rel=1e-9)
    # shoelace area
    area = 0.5 * abs(sum(c[k, 0] * c[(k + 1) % 4, 1] - c[(k + 1) % 4, 0] * c[k, 1] for k in range(4)))
    assert area == pytest.approx(l * w, rel=1e-9)


def test_to_frame_examples():
    cam = PlanPose(0, 10, 0, "camera")
    out = to_frame(cam, PlanPose(0, 0, 0, "world"), "north_up")
    assert (out.x_m, out.y_m, out.yaw_rad) == pytest.approx((0, 10, 0), abs=1e-12)
    out = to_frame(cam, PlanPose(0, 0, math.pi / 2, "world"), "north_up")
    assert (out.x_m, out.y_m, out.yaw_rad) == pytest.approx((-10, 0, math.pi / 2), abs=1e-9)
    assert out.frame == "north_up"
    t = to_frame(PlanPose(1.5, 7.25, 2.0, "camera"), PlanPose(4, 5, 1.0, "world"), "travel")
    assert (t.x_m, t.y_m, t.yaw_rad, t.frame) == (1.5, 7.25, 2.0, "travel")


def test_to_frame_errors():
    with pytest.raises(FrameError):
        to_frame(PlanPose(0, 1, 0, "world"), PlanPose(0, 0, 0, "world"), "travel")
    with pytest.raises(FrameError):
        to_frame(PlanPose(0, 1, 0, "camera"), PlanPose(0, 0, 0, "camera"), "travel")
    with pytest.raises(FrameError):
        to_frame(PlanPose(0, 1, 0, "camera"), PlanPose(0, 0, 0, "world"), "sideways")


@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(0, 6.28), st.floats(-6, 6))
def test_frame_round_trip_and_distance(x, y, yaw, ego_yaw):
    ego = PlanPose(12.0, -3.0, wrap_angle(ego_yaw), "world")
    cam = PlanPose(x, y, yaw, "camera")
    for target in ("travel", "north_up"):
        out = to_frame(cam, ego, target)
        back = from_frame(out, ego)
        assert back.x_m == pytest.approx(x, abs=1e-9) and back.y_m == pytest.approx(y, abs=1e-9)
        d = abs(wrap_angle(back.yaw_rad) - wrap_angle(yaw))
        assert min(d, 2 * math.pi - d) < 1e-9
    nu = to_frame(cam, ego, "north_up")
    assert math.hypot(nu.x_m, nu.y_m) == pytest.approx(math.hypot(x, y), rel=1e-12, abs=1e-12)


def test_project_dead_ahead():
    intr = CameraIntrinsics.from_fov()
    ego = PlanPose(3.0, 4.0, 0.0, "world")
    det, est = project_to_camera(PlanPose(3.0, 14.0, 0.0, "world"), (4.5, 1.9, 1.5), ego, intr)
    assert est.depth_m == pytest.approx(10.0, abs=1e-12)
    assert det.x_center_offset == pytest.approx(0.0, abs=1e-9)
    assert est.local_yaw_rad == pytest.approx(0.0, abs=1e-12)
    assert det.u_min < det.u_max and det.v_min < det.v_max


def test_project_fov_edge_inclusive():
    # at 90 degrees the ray through (5, 5) is exactly the image edge
    intr = CameraIntrinsics.from_fov(1920, 1080, 90.0)
    ego = PlanPose(0, 0, 0, "world")
    out = project_to_camera(PlanPose(5, 5, 0, "world"), (4, 2, 1.5), ego, intr)
    assert out is not None
    det, est = out
    assert det.x_center_offset == pytest.approx(intr.focal_length_px, rel=1e-12)
    assert est.depth_m == pytest.approx(5.0)
    # the same point is outside a 60 degree view
    assert project_to_camera(PlanPose(5, 5, 0, "world"), (4, 2, 1.5), ego,
                             CameraIntrinsics.from_fov()) is None


def test_project_behind_is_empty():
    intr = CameraIntrinsics.from_fov()
    assert project_to_camera(PlanPose(0, -5, 0, "world"), (4, 2, 1.5), PlanPose(0, 0, 0, "world"),
                             intr) is None
    assert not in_fov(0.0, 0.0, intr)


def test_project_rejects_bad_dims():
    with pytest.raises(ValueError):
        project_to_camera(PlanPose(0, 5, 0, "world"), (4, 0, 1.5), PlanPose(0, 0, 0, "world"),
                          CameraIntrinsics.from_fov())


def test_detection_box_is_clamped():
    intr = CameraIntrinsics.from_fov()
    # a truck-sized box close by and off to the side overflows the image
    det, _ = project_to_camera(PlanPose(1.0, 2.5, 0.3, "world"), (12, 3, 4), PlanPose(0, 0, 0, "world"),
                               intr)
    assert 0 <= det.u_min < det.u_max <= intr.image_width_px
    assert 0 <= det.v_min < det.v_max <= intr.image_height_px


@settings(max_examples=300)
@given(st.floats(2, 64), st.floats(-0.99, 0.99), st.floats(0, 6.28), st.floats(-500, 500),
       st.floats(-500, 500), st.floats(0, 6.28))
def test_round_trip_property(depth, frac, yaw, ex, ey, eyaw):
    intr = CameraIntrinsics.from_fov()
    ego = PlanPose(ex, ey, eyaw, "world")
    half = intr.image_width_px / 2 / intr.focal_length_px
    X, Y = frac * half * depth, depth
    (fx, fy), (rx, ry) = (-math.sin(eyaw), math.cos(eyaw)), (math.cos(eyaw), math.sin(eyaw))
    obj = PlanPose(ex + X * rx + Y * fx, ey + X * ry + Y * fy, wrap_angle(yaw + eyaw), "world")
    det, est = project_to_camera(obj, (4.5, 1.9, 1.5), ego, intr)
    cam = world_to_camera(obj, ego)
    x, y = plan_location(est.depth_m, det.x_center_offset, intr.focal_length_px)
    assert x == pytest.approx(cam.x_m, abs=1e-9) and y == pytest.approx(cam.y_m, abs=1e-9)
    g = local_to_global_yaw(est.local_yaw_rad, det.x_center_offset, intr.focal_length_px)
    d = abs(g - cam.yaw_rad)
    assert min(d, 2 * math.pi - d) < 1e-9


def test_wrap_angle_range():
    for a in (-1e-18, -2 * math.pi, 2 * math.pi, 7.0, -7.0, 0.0):
        assert 0.0 <= wrap_angle(a) < 2 * math.pi
