import csv
import json

import numpy as np
import pytest
import torch
from scipy.ndimage import binary_dilation

from hcpercept.config import ConfigError
from hcpercept.objectives import SegTarget
from hcpercept.scenegen.generator import (BAG, HAT, JOINT_PART, JOINTS, SceneError, SceneSpec, generate_scene,
                                          identity_style)
from hcpercept.scenegen.loaders import (DataError, DatasetManifest, load_dataset, parse_manifest, read_manifest)
from hcpercept.scenegen.samples import (FULL_SIZES, TOY_SIZES, MultiTaskSample, boxes_to_xyxy, keypoints_to_pixels,
                                        normalize_keypoints, resize_policy, synthetic_dataset, xyxy_to_boxes)
from hcpercept.scenegen.writers import TASK_FORMAT, write_synthetic


def test_scene_determinism():
    spec = SceneSpec(seed=0)
    a, b = generate_scene(spec, 5), generate_scene(spec, 5)
    assert a.image.tobytes() == b.image.tobytes()
    assert np.array_equal(a.class_map, b.class_map)
    for fa, fb in zip(a.figures, b.figures):
        assert np.array_equal(fa.keypoints, fb.keypoints) and np.array_equal(fa.box, fb.box)
    assert generate_scene(SceneSpec(seed=1), 5).image.tobytes() != a.image.tobytes()


def test_single_figure_scene():
    s = generate_scene(SceneSpec(figures=(1, 1)), 0)
    assert len(s.figures) == 1 and s.figures[0].keypoints.shape == (len(JOINTS), 3)


def test_canvas_too_small():
    with pytest.raises(SceneError):
        generate_scene(SceneSpec(canvas=(20, 20)), 0)


@pytest.mark.parametrize("index", range(25))
def test_geometric_consistency(index):
    scene = generate_scene(SceneSpec(canvas=(96, 96), figures=(1, 3), seed=0), index)
    H, W = scene.class_map.shape
    # part labels partition exactly the figure pixels
    assert np.array_equal(scene.class_map > 0, scene.instances > 0)
    for fig in scene.figures:
        own = scene.instances == fig.mask_id
        cx, cy, h, w = fig.box
        for name, (x, y, v) in zip(JOINTS, fig.keypoints):
            if not v:
                continue
            # each joint lies inside its figure's box
            assert (cx - w / 2) * W - 1 <= x <= (cx + w / 2) * W + 1
            assert (cy - h / 2) * H - 1 <= y <= (cy + h / 2) * H + 1
            part = binary_dilation(own & (scene.class_map == JOINT_PART[name]), iterations=2)
            assert part[int(round(y)), int(round(x))], (index, name)


@pytest.mark.parametrize("identity", range(12))
def test_attributes_match_rendering(identity):
    style = identity_style(0, identity)
    scene = generate_scene(SceneSpec(figures=(1, 1), seed=0), identity, [identity])
    px = np.round(scene.image * 255).reshape(-1, 3)
    has = lambda color: bool((np.abs(px - np.round(color * 255)) < 0.5).all(1).any())
    assert has(HAT) == style.hat
    assert has(BAG) == style.bag
    assert ((scene.class_map == 5).any()) == (style.hat or style.bag)
    assert np.array_equal(scene.figures[0].attributes, style.attributes)


def test_parsing_presence_matches_pixel_counts():
    for s in synthetic_dataset("seg", 6):
        cm = torch.as_tensor(s.gt["class_map"])[None]
        gt = SegTarget.from_class_map(cm, 6)
        counts = np.bincount(s.gt["class_map"].reshape(-1), minlength=6)
        assert gt.presence[0].numpy().tolist() == (counts > 0).astype(float).tolist()


def test_synthetic_dataset_shapes():
    for tt in ("reid", "par", "seg", "pose"):
        data = synthetic_dataset(tt, 4)
        assert len(data) == 4
        assert all(s.image.shape[:2] == tuple(TOY_SIZES[tt]) for s in data)
    det = synthetic_dataset("peddet", 3)
    assert all(s.image.shape[0] % 16 == 0 and s.image.shape[1] % 16 == 0 for s in det)
    for s in det:
        b = s.gt["boxes"]
        assert ((b > 0) & (b <= 1)).all() and (b[:, 2:] > 0).all()


# ---------------------------------------------------------------- coordinate conventions

def test_keypoint_normalization_round_trip():
    k = np.array([[0.0, 0.0, 1], [47.0, 63.0, 1]])
    n = normalize_keypoints(k, (64, 48))
    assert n[0, 0] == 0.5 / 48 and n[1, 1] == 63.5 / 64
    np.testing.assert_allclose(keypoints_to_pixels(n, (64, 48)), k)
    b = np.array([[3.0, 4.0, 20.0, 30.0]])
    np.testing.assert_allclose(boxes_to_xyxy(xyxy_to_boxes(b, (40, 50)), (40, 50)), b)


# ---------------------------------------------------------------- resize policy

def _sample(tt, hw, gt):
    return MultiTaskSample(np.random.default_rng(0).random((*hw, 3)).astype(np.float32), tt, gt, "d")


def test_resize_seg_nearest():
    cm = np.zeros((100, 60), np.int64)
    cm[:50] = 3
    cm[50:, :30] = 7
    out = resize_policy(_sample("seg", (100, 60), {"class_map": cm}), FULL_SIZES)
    assert out.image.shape == (480, 480, 3) and out.gt["class_map"].shape == (480, 480)
    assert set(np.unique(out.gt["class_map"]).tolist()) == {0, 3, 7}


@pytest.mark.parametrize("tt,hw", [("pose", (256, 192)), ("par", (256, 192)), ("reid", (256, 128))])
def test_resize_topdown(tt, hw):
    out = resize_policy(_sample(tt, (100, 70), {}), FULL_SIZES)
    assert out.image.shape[:2] == hw and out.valid_hw == hw


def test_resize_detection_cap_and_pad():
    boxes = xyxy_to_boxes(np.array([[10.0, 100.0, 210.0, 1500.0], [300.0, 7.0, 499.0, 60.0]]), (2000, 500))
    s = _sample("peddet", (2000, 500), {"boxes": boxes})
    out = resize_policy(s, FULL_SIZES)
    assert out.valid_hw == (1333, 333)
    assert out.image.shape[:2] == (1344, 336)
    assert not out.image[1333:].any() and not out.image[:, 333:].any()
    t = out.meta["transform"]
    orig = boxes_to_xyxy(boxes, (2000, 500))
    resized = boxes_to_xyxy(out.gt["boxes"], out.valid_hw)
    np.testing.assert_allclose(resized, t.boxes_forward(orig), atol=1e-9)
    assert np.abs(t.boxes_inverse(resized) - orig).max() <= 1.0


def test_resize_detection_never_enlarges():
    out = resize_policy(_sample("peddet", (50, 40), {"boxes": np.array([[0.5, 0.5, 0.2, 0.2]])}), FULL_SIZES)
    assert out.valid_hw == (50, 40) and out.image.shape[:2] == (64, 48)


# ---------------------------------------------------------------- manifests

def test_manifest_validation(tmp_path):
    ok = {"dataset_id": "a", "task_type": "pose", "root": "x", "format": "keypoint-annotation-file", "batch_size": 4}
    assert parse_manifest({"datasets": [ok]})[0].task_id == "a"
    for bad in ({**ok, "format": "mask-directory"}, {**ok, "batch_size": 0}, {**ok, "task_type": "caption"},
                {**ok, "colour": 1}):
        with pytest.raises(ConfigError):
            parse_manifest({"datasets": [bad]})
    with pytest.raises(ConfigError):
        parse_manifest({"datasets": [ok, ok]})
    p = tmp_path / "m.yaml"
    p.write_text("datasets:\n  - {dataset_id: a, task_type: reid, root: r, format: identity-directory}\n")
    assert read_manifest(p)[0].format == "identity-directory"


# ---------------------------------------------------------------- loaders

def _write(tmp_path, tt, n=3):
    root = tmp_path / tt
    write_synthetic(tt, root, n, seed=0)
    return root, DatasetManifest(tt, tt, str(root), TASK_FORMAT[tt])


@pytest.mark.parametrize("tt", ["pose", "seg", "reid", "par", "peddet"])
def test_three_image_fixture(tmp_path, tt):
    root, m = _write(tmp_path, tt)
    res = load_dataset(m, TOY_SIZES)
    expect = 3
    if tt == "pose":
        # one top-down sample per person annotation
        expect = len(json.loads((root / "annotations.json").read_text())["annotations"])
    assert len(res.samples) == expect and res.skipped == 0
    for s in res.samples:
        assert s.task_type == tt
        if tt != "peddet":
            assert s.image.shape[:2] == tuple(TOY_SIZES[tt])
    if tt == "seg":
        assert res.slots == 6 and all(s.gt["class_map"].max() < 6 for s in res.samples)
    if tt == "pose":
        assert res.slots == len(JOINTS)
        assert all(((s.gt["keypoints"][:, :2] >= 0) & (s.gt["keypoints"][:, :2] <= 1)).all() for s in res.samples)


@pytest.mark.parametrize("tt", ["pose", "seg", "reid", "par", "peddet"])
def test_written_data_reloads_exactly(tmp_path, tt):
    _, m = _write(tmp_path, tt, 4)
    loaded = load_dataset(m, TOY_SIZES).samples
    ref = synthetic_dataset(tt, 4, seed=0)
    if tt == "reid":
        loaded.sort(key=lambda s: s.source.split("/")[1])
        ref.sort(key=lambda s: int(s.source.split(":")[1]))
    assert len(loaded) == len(ref)
    for a, b in zip(loaded, ref):
        assert np.array_equal(a.image, b.image)
        for k in b.gt:
            np.testing.assert_allclose(np.asarray(a.gt[k], np.float64), np.asarray(b.gt[k], np.float64), atol=1e-9)


def test_missing_label_skipped_keypoints(tmp_path):
    root, m = _write(tmp_path, "pose")
    p = root / "annotations.json"
    doc = json.loads(p.read_text())
    ann = doc["annotations"][0]
    ann["keypoints"] = [0] * len(ann["keypoints"])
    ann["num_keypoints"] = 0
    p.write_text(json.dumps(doc))
    res = load_dataset(m, TOY_SIZES)
    assert res.skipped == 1 and len(res.samples) == len(doc["annotations"]) - 1


def test_missing_label_skipped_boxes(tmp_path):
    root, m = _write(tmp_path, "peddet")
    p = root / "annotations.json"
    doc = json.loads(p.read_text())
    first = doc["images"][0]["id"]
    doc["annotations"] = [a for a in doc["annotations"] if a["image_id"] != first]
    p.write_text(json.dumps(doc))
    res = load_dataset(m, TOY_SIZES)
    assert res.skipped == 1 and len(res.samples) == 2


def test_missing_label_skipped_masks(tmp_path):
    root, m = _write(tmp_path, "seg")
    sorted((root / "masks").iterdir())[0].unlink()
    res = load_dataset(m, TOY_SIZES)
    assert res.skipped == 1 and len(res.samples) == 2


def test_missing_label_skipped_identity(tmp_path):
    root, m = _write(tmp_path, "reid")
    from hcpercept.scenegen.writers import save_png
    save_png(root / "loose.png", np.zeros((8, 8, 3)))
    res = load_dataset(m, TOY_SIZES)
    assert res.skipped == 1 and len(res.samples) == 3


def test_missing_label_skipped_attributes(tmp_path):
    root, m = _write(tmp_path, "par")
    p = root / "attributes.csv"
    rows = list(csv.reader(p.open()))
    rows[2][3] = ""
    with p.open("w", newline="") as f:
        csv.writer(f, lineterminator="\n").writerows(rows)
    res = load_dataset(m, TOY_SIZES)
    assert res.skipped == 1 and len(res.samples) == 2


def test_malformed_keypoint_record_names_file_and_index(tmp_path):
    root, m = _write(tmp_path, "pose")
    p = root / "annotations.json"
    doc = json.loads(p.read_text())
    doc["annotations"][1]["bbox"] = [1, 2, "wide"]
    p.write_text(json.dumps(doc))
    with pytest.raises(DataError) as e:
        load_dataset(m, TOY_SIZES)
    assert e.value.index == 1 and "annotations.json" in str(e.value) and "record 1" in str(e.value)


def test_malformed_attribute_value(tmp_path):
    root, m = _write(tmp_path, "par")
    p = root / "attributes.csv"
    rows = list(csv.reader(p.open()))
    rows[3][1] = "yes"
    with p.open("w", newline="") as f:
        csv.writer(f, lineterminator="\n").writerows(rows)
    with pytest.raises(DataError) as e:
        load_dataset(m, TOY_SIZES)
    assert e.value.index == 2 and "attributes.csv" in e.value.path


def test_corrupt_json_and_mask_shape(tmp_path):
    root, m = _write(tmp_path, "peddet")
    (root / "annotations.json").write_text("{not json")
    with pytest.raises(DataError, match="invalid JSON"):
        load_dataset(m, TOY_SIZES)
    root, m = _write(tmp_path, "seg")
    from hcpercept.scenegen.writers import save_png
    save_png(sorted((root / "masks").iterdir())[0], np.zeros((5, 5), np.uint8))
    with pytest.raises(DataError, match="does not match"):
        load_dataset(m, TOY_SIZES)


def test_attribute_table_with_35_columns(tmp_path):
    root = tmp_path / "par35"
    from hcpercept.scenegen.writers import save_png
    names = [f"attr{i}" for i in range(35)]
    rows = [["image", *names]]
    rng = np.random.default_rng(0)
    for i in range(3):
        save_png(root / "images" / f"{i}.png", rng.random((40, 20, 3)))
        rows.append([f"{i}.png", *map(str, rng.integers(0, 2, 35))])
    with (root / "attributes.csv").open("w", newline="") as f:
        csv.writer(f, lineterminator="\n").writerows(rows)
    res = load_dataset(DatasetManifest("p", "par", str(root), "attribute-table"), TOY_SIZES)
    assert res.slots == 35 and len(res.samples) == 3 and res.samples[0].gt["attributes"].shape == (35,)


def test_generated_files_are_byte_identical(tmp_path):
    a = write_synthetic("seg", tmp_path / "a", 3, seed=2)
    b = write_synthetic("seg", tmp_path / "b", 3, seed=2)
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()
