import json

import numpy as np
import pytest

from hyperpose.data import (PoseListError, PoseSample, SyntheticScene, augment, color_jitter, load_pose_list,
                            make_overfit_set, project, quadrant, render, resize_smaller_edge, transform,
                            write_dataset, write_pose_list)
from hyperpose.geometry import Pose, angular_error_deg, quat_from_axis_angle

IDENT = [1.0, 0.0, 0.0, 0.0]


def one_blob(center, radius=0.2):
    return SyntheticScene(0, np.array([center], dtype=float), np.array([[1.0, 0.5, 0.25]]), np.array([radius]))


def test_pose_list_with_header(tmp_path):
    (tmp_path / "list.txt").write_text(
        "Visual Landmark Dataset V1\nImageFile, Camera Position [X Y Z W P Q R]\n\n"
        "seq1/frame00001.png 1.0 2.0 3.0 1 0 0 0\n"
        "seq1/frame00002.png -1.5 0 0.25 0.7071067811865476 0 0.7071067811865476 0\n"
    )
    samples = load_pose_list(tmp_path, "list.txt")
    assert [s.ref for s in samples] == ["seq1/frame00001.png", "seq1/frame00002.png"]
    assert np.allclose(samples[0].pose.x, [1, 2, 3])
    assert np.allclose(samples[1].pose.q, [0.7071067811865476, 0, 0.7071067811865476, 0])
    assert samples[0].root == tmp_path


def test_pose_list_without_header_and_blank_lines(tmp_path):
    (tmp_path / "l.txt").write_text("a.png 0 0 0 1 0 0 0\n\nb.png 1 1 1 1 0 0 0\n")
    assert len(load_pose_list(tmp_path, "l.txt")) == 2


def test_empty_pose_list(tmp_path):
    (tmp_path / "l.txt").write_text("")
    assert load_pose_list(tmp_path, "l.txt") == []


def test_non_unit_quaternion_rejected_with_line_number(tmp_path):
    (tmp_path / "l.txt").write_text("a.png 0 0 0 1 0 0 0\nb.png 0 0 0 0.9 0 0 0\n")
    with pytest.raises(PoseListError) as err:
        load_pose_list(tmp_path, "l.txt")
    assert err.value.line_no == 2
    assert "l.txt:2" in str(err.value)


def test_malformed_record_rejected(tmp_path):
    (tmp_path / "l.txt").write_text("a.png 0 0 0 1 0 0 0\nb.png 0 0 0 1 0 0\n")
    with pytest.raises(PoseListError, match=":2:"):
        load_pose_list(tmp_path, "l.txt")


def test_pose_list_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    samples = []
    for i in range(5):
        q = rng.normal(size=4)
        samples.append(PoseSample(f"img{i}.png", Pose(rng.normal(size=3), q / np.linalg.norm(q))))
    write_pose_list(samples, tmp_path / "l.txt")
    back = load_pose_list(tmp_path, "l.txt")
    for a, b in zip(samples, back):
        assert a.ref == b.ref
        assert np.abs(a.pose.x - b.pose.x).max() < 1e-9
        assert np.abs(a.pose.q - b.pose.q).max() < 1e-9


def test_resize_smaller_edge():
    img = np.random.default_rng(0).random((3, 480, 640)).astype(np.float32)
    out = resize_smaller_edge(img, 256)
    assert out.shape == (3, 256, 341)


def test_augment_eval_and_train_shapes():
    img = np.random.default_rng(0).random((3, 480, 640)).astype(np.float32)
    assert augment(img, training=False).shape == (3, 224, 224)
    out = augment(img, training=True, rng=np.random.default_rng(1))
    assert out.shape == (3, 224, 224)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_augment_is_seeded():
    img = np.random.default_rng(0).random((3, 300, 400)).astype(np.float32)
    a = augment(img, True, np.random.default_rng(5))
    b = augment(img, True, np.random.default_rng(5))
    assert np.array_equal(a, b)


def test_augment_rejects_small_images():
    with pytest.raises(ValueError):
        augment(np.zeros((3, 100, 100), dtype=np.float32), training=False)


def test_unit_jitter_factors_are_identity():
    img = np.random.default_rng(0).random((3, 300, 300)).astype(np.float32)
    plain = transform(img, 256, 224, (10, 12))
    assert np.array_equal(transform(img, 256, 224, (10, 12), (1.0, 1.0, 1.0)), plain)
    assert np.allclose(color_jitter(plain, 1.0, 1.0, 1.0), plain, atol=1e-6)


def test_blob_on_axis_lands_on_principal_point():
    scene = one_blob([0.0, 0.0, 3.0])
    uv, _, depth = project(scene, Pose([0, 0, 0], IDENT), 33)
    assert np.allclose(uv[0], [16.0, 16.0]) and depth[0] == 3.0
    img = render(scene, Pose([0, 0, 0], IDENT), 33)
    lum = img.sum(axis=0)
    assert np.unravel_index(np.argmax(lum), lum.shape) == (16, 16)


def test_blob_behind_camera_is_not_drawn():
    scene = one_blob([0.0, 0.0, -3.0])
    assert render(scene, Pose([0, 0, 0], IDENT), 32).max() == 0.0


def test_sideways_motion_moves_blob_opposite_way():
    scene = one_blob([0.0, 0.0, 4.0])
    uv0, _, _ = project(scene, Pose([0, 0, 0], IDENT), 32)
    uv1, _, _ = project(scene, Pose([0.5, 0, 0], IDENT), 32)
    assert uv1[0, 0] < uv0[0, 0]
    assert uv1[0, 1] == pytest.approx(uv0[0, 1])


def test_render_is_deterministic_and_bounded():
    scene = SyntheticScene.generate(42)
    pose = Pose([0.1, -0.2, 0.05], quat_from_axis_angle([0, 1, 0], 0.2))
    a, b = render(scene, pose, 32), render(scene, pose, 32)
    assert a.shape == (3, 32, 32) and a.dtype == np.float32
    assert np.array_equal(a, b)
    assert 0.0 <= a.min() and a.max() <= 1.0


def test_render_changes_smoothly_with_pose():
    scene = SyntheticScene.generate(42)
    base = Pose([0.0, 0.0, 0.0], IDENT)
    img0 = render(scene, base, 32)
    diffs = []
    for step in (1e-3, 2e-3, 4e-3):
        img = render(scene, Pose([step, 0, 0], IDENT), 32)
        diffs.append(np.abs(img - img0).max())
    assert 0 < diffs[0] < diffs[2]
    assert diffs[2] / 4e-3 < 50.0


def test_scene_generation_is_seeded_and_serialisable():
    a, b = SyntheticScene.generate(7), SyntheticScene.generate(7)
    assert np.array_equal(a.centers, b.centers)
    back = SyntheticScene.from_dict(json.loads(a.dumps()))
    assert np.array_equal(back.centers, a.centers) and back.extent == a.extent
    assert np.all(a.centers[:, 2] >= a.extent)


def test_overfit_set_poses_and_determinism():
    train, full = make_overfit_set(3, 20, size=16)
    again, _ = make_overfit_set(3, 20, size=16)
    assert len(train) == 20 and len(full) == 40
    assert all(np.array_equal(a.image, b.image) for a, b in zip(train, again))
    scene = SyntheticScene.generate(3)
    for s in train:
        assert np.abs(s.pose.x[:2]).max() <= scene.extent / 2
        assert np.isclose(np.linalg.norm(s.pose.q), 1.0) and s.pose.q[0] >= 0
        assert angular_error_deg(s.pose.q, IDENT) < 25.0
    held = full[20:]
    assert all(a.ref != b.ref for a, b in zip(train, held))


def test_overfit_set_covers_all_quadrants():
    train, _ = make_overfit_set(42, 200, size=8)
    assert {quadrant(s.pose.x) for s in train} == {0, 1, 2, 3}


def test_quadrant_labels():
    assert [quadrant(p) for p in ([1, 1], [-1, 1], [1, -1], [-1, -1], [0, 0])] == [0, 1, 2, 3, 0]


def test_write_dataset_round_trip(tmp_path):
    scene = SyntheticScene.generate(5)
    train, _ = make_overfit_set(5, 6, scene, size=16)
    list_path = write_dataset(train, tmp_path, "train.txt", scene)
    back = load_pose_list(tmp_path, list_path.name)
    assert len(back) == 6
    for a, b in zip(train, back):
        assert np.abs(a.pose.x - b.pose.x).max() < 1e-9
        assert np.abs(b.load_image() - a.image).max() <= 0.5 / 255 + 1e-6
    assert (tmp_path / "scene.json").exists()


def test_missing_image_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        PoseSample("gone.png", Pose([0, 0, 0], IDENT), root=tmp_path).load_image()
