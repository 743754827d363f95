import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cosect.mesh import is_closed
from cosect.scene import Intrinsics, Pose, backproject_all, load_sequence
from cosect.synthcam import (
    Box,
    Plane,
    SceneObject,
    ScriptedScene,
    ShapeUnion,
    Sphere,
    Trajectory,
    analytic_sdf,
    box_slide_scene,
    gt_mesh,
    look_at,
    render_frame,
    render_sequence,
    scene_from_dict,
)

from oracles import box_sdf, rotation, sphere_sdf

INTR = Intrinsics(120, 120, 39.5, 29.5, 80, 60)


def still(shape, oid=1, pose=None):
    return SceneObject(oid, shape, Trajectory.constant(pose or Pose.identity()))


def test_analytic_examples():
    assert analytic_sdf(Sphere(1.0), [0, 0, 0]) == -1
    assert analytic_sdf(Sphere(1.0), [2, 0, 0]) == 1
    # corner distance formula: |(1,1,0)|
    assert analytic_sdf(Box((1, 1, 1)), [2, 2, 0]) == pytest.approx(np.sqrt(2))
    assert analytic_sdf(Plane((0, 0, 1), 0.5), [3, 3, 2]) == pytest.approx(1.5)
    u = ShapeUnion((Sphere(1.0), Box((0.5, 0.5, 0.5))))
    assert analytic_sdf(u, [3, 0, 0]) == pytest.approx(2.0)


@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3),
       st.lists(st.floats(0.05, 2), min_size=3, max_size=3))
def test_box_sdf_matches_oracle(x, half):
    assert analytic_sdf(Box(tuple(half)), x) == pytest.approx(box_sdf(x, half), abs=1e-12)


def test_shape_validation():
    with pytest.raises(ValueError):
        Sphere(0.0)
    with pytest.raises(ValueError):
        Box((1, 0, 1))
    with pytest.raises(ValueError):
        Plane((0, 0, 2))


def test_render_empty_scene():
    kf = render_frame(ScriptedScene([], Trajectory.constant(Pose.identity()), INTR, 1), 0)
    assert not kf.depth.any()


def test_render_plane_depth_on_axis():
    plane = still(Plane((0, 0, -1), -2.0))  # z = 2, normal toward camera
    kf = render_frame(ScriptedScene([plane], Trajectory.constant(Pose.identity()), INTR, 1), 0)
    intr = Intrinsics(120, 120, 40, 30, 81, 61)
    kf2 = render_frame(ScriptedScene([plane], Trajectory.constant(Pose.identity()), intr, 1), 0)
    assert kf2.depth[30, 40] == pytest.approx(2.0, abs=1e-3)
    assert np.allclose(kf.depth, 2.0, atol=1e-3)


def test_render_sphere_depth():
    intr = Intrinsics(120, 120, 40, 30, 81, 61)
    sphere = still(Sphere(0.5), pose=Pose(np.eye(3), [0, 0, 2]))
    kf = render_frame(ScriptedScene([sphere], Trajectory.constant(Pose.identity()), intr, 1), 0)
    # ray-sphere intersection on the axis: 2 - 0.5
    assert kf.depth[30, 40] == pytest.approx(1.5, abs=1e-3)
    assert kf.object_mask[30, 40] == 1 and kf.object_mask[0, 0] == 0


def test_rendered_depth_lies_on_scene_surface():
    scene = ScriptedScene(
        [still(Plane((0, 0, 1), 0.0), 0), still(Box((0.2, 0.1, 0.15)), 2, Pose(rotation([0, 0, 1], 0.4), [0.1, 0, 0.15]))],
        Trajectory.constant(look_at((0.8, -1.2, 0.9), (0, 0, 0.1))), INTR, 1)
    kf = render_frame(scene, 0)
    valid = kf.depth > 0
    world = kf.camera_pose.apply(backproject_all(kf.depth, INTR)[valid])
    d = scene.posed_sdf(world, 0)
    assert np.abs(d.min(axis=0)).max() < 1e-3
    ids = np.array([o.id for o in scene.objects])
    assert np.array_equal(ids[np.argmin(d, axis=0)], kf.object_mask[valid])


def test_render_is_deterministic():
    scene = box_slide_scene(frame_count=3, width=64, height=48)
    scene.noise_std = 0.002
    a, b = render_frame(scene, 1), render_frame(scene, 1)
    assert np.array_equal(a.depth, b.depth) and np.array_equal(a.object_mask, b.object_mask)


def test_soft_association_band():
    scene = ScriptedScene([still(Sphere(0.5), pose=Pose(np.eye(3), [0, 0, 2]))],
                          Trajectory.constant(Pose.identity()), INTR, 1, soft_assoc=True)
    kf = render_frame(scene, 0)
    hit = kf.depth > 0
    assert kf.assoc[hit].min() == pytest.approx(0.5) and kf.assoc[hit].max() == 1.0
    assert kf.assoc[30, 40] == 1.0


def test_trajectory_interpolation():
    a = Pose(np.eye(3), [0, 0, 0])
    b = Pose(rotation([0, 0, 1], np.pi / 2), [1, 2, 0])
    tr = Trajectory([0, 10], [a, b])
    mid = tr(5)
    assert np.allclose(mid.t, [0.5, 1, 0])
    assert np.allclose(mid.R, rotation([0, 0, 1], np.pi / 4), atol=1e-12)
    assert np.allclose(tr(-3).t, a.t) and np.allclose(tr(30).t, b.t)


def test_gt_sphere_area():
    m = gt_mesh(Sphere(1.0), 128)
    assert abs(m.area() - 4 * np.pi) / (4 * np.pi) < 0.02
    assert is_closed(m)


def test_gt_box_volume_and_level_set():
    half = (0.15, 0.1, 0.1)
    m = gt_mesh(Box(half), 128)
    assert abs(m.signed_volume() - 8 * np.prod(half)) / (8 * np.prod(half)) < 0.02
    h = 0.3 * 1.2 / 128
    assert np.abs(box_sdf(m.vertices, half)).max() < h
    assert is_closed(m)


def test_gt_vertices_on_sphere():
    m = gt_mesh(Sphere(0.4), 64)
    h = 0.8 * 1.2 / 64
    assert np.abs(sphere_sdf(m.vertices, 0.4)).max() < h


def test_scene_from_dict():
    cfg = {
        "frame_count": 4,
        "intrinsics": {"fx": 100, "fy": 100, "cx": 31.5, "cy": 23.5, "width": 64, "height": 48},
        "render": {"noise_std": 0.001, "soft_assoc": True, "seed": 3},
        "background": {"lo": [-1, -1, -1], "side": 2, "resolution": 32},
        "camera": {"keys": [{"t": 0, "position": [0, -1, 1], "look_at": [0, 0, 0]},
                            {"t": 3, "position": [0.5, -1, 1], "look_at": [0, 0, 0]}]},
        "objects": [
            {"id": 0, "shape": {"kind": "plane", "normal": [0, 0, 2], "offset": 0}},
            {"id": 1, "shape": {"kind": "sphere", "radius": 0.2},
             "keys": [{"t": 0, "translation": [0, 0, 0.2]},
                      {"t": 3, "translation": [0.3, 0, 0.2], "rotation": [0.7071068, 0, 0, 0.7071068]}]},
        ],
    }
    scene = scene_from_dict(cfg)
    assert scene.frame_count == 4 and scene.soft_assoc and scene.background_box[2] == 32
    assert np.allclose(scene.object(1).trajectory(3).t, [0.3, 0, 0.2])
    assert np.allclose(scene.object(1).trajectory(3).R, rotation([0, 0, 1], np.pi / 2), atol=1e-6)
    assert np.allclose(scene.camera(0).t, [0, -1, 1])


def test_render_sequence_layout(tmp_path):
    scene = box_slide_scene(frame_count=20, width=80, height=60, background_resolution=32)
    render_sequence(scene, tmp_path)
    assert (tmp_path / "gt" / "obj1.ply").exists()
    kfs, models = load_sequence(tmp_path, keyframe_stride=10)
    assert [k.timestep for k in kfs] == [0, 10]
    assert [m.id for m in models] == [0, 1]
    assert models[0].spec.dims == (32, 32, 32)
    assert models[1].spec.dims == (64, 64, 64)
