import json
import struct
from collections import Counter

import numpy as np
import pytest

from tadkd import geometry as geo
from tadkd import synth_data as sd
from tadkd.synth_data import SceneConfig, generate_scene


@pytest.fixture(scope="module")
def thousand():
    return [generate_scene(s) for s in range(1000)]


def test_config_validation():
    with pytest.raises(ValueError):
        SceneConfig(object_scale=(10, 64))
    with pytest.raises(ValueError):
        SceneConfig(objects_per_image=(3, 2))
    with pytest.raises(ValueError):
        SceneConfig(object_scale=(0, 10))
    cfg = SceneConfig(image_size=32, object_scale=(6, 12))
    assert SceneConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_determinism():
    a, b = generate_scene(123), generate_scene(123)
    assert a == b
    assert a.image.tobytes() == b.image.tobytes()


def test_distinct_seeds_distinct_images():
    digests = {generate_scene(s).image.tobytes() for s in range(100)}
    assert len(digests) == 100


def test_single_object_config():
    cfg = SceneConfig(objects_per_image=(1, 1))
    for s in range(20):
        scene = generate_scene(s, cfg)
        assert len(scene.gt_boxes) == 1 == len(scene.gt_labels)


def test_scene_invariants(thousand):
    for scene in thousand:
        assert scene.image.shape == (3, 64, 64)
        assert scene.image.min() >= 0.0 and scene.image.max() <= 1.0
        b = scene.gt_boxes
        assert len(b) == len(scene.gt_labels) and 1 <= len(b) <= 4
        assert np.all(b[:, 0] >= 0) and np.all(b[:, 1] >= 0)
        assert np.all(b[:, 2] <= 64) and np.all(b[:, 3] <= 64)
        assert np.all(b[:, 2] > b[:, 0]) and np.all(b[:, 3] > b[:, 1])
        ious = geo.iou_matrix(b, b)
        np.fill_diagonal(ious, 0)
        assert ious.max() <= 0.3
        assert set(scene.gt_labels.tolist()) <= {1, 2, 3}


def test_class_balance(thousand):
    counts = Counter(int(l) for s in thousand for l in s.gt_labels)
    total = sum(counts.values())
    assert total >= 1000
    for c in (1, 2, 3):
        assert abs(counts[c] / total - 1 / 3) <= 0.2 / 3


def test_boxes_are_tight():
    # pixels outside the box equal the background; the box border rows/cols are touched
    cfg = SceneConfig(objects_per_image=(1, 1), noise_std=0.0)
    scene = generate_scene(5, cfg)
    x0, y0, x1, y1 = scene.gt_boxes[0].astype(int)
    assert scene.gt_boxes[0].tolist() == [x0, y0, x1, y1]
    assert x1 - x0 >= 8 and y1 - y0 >= 8


def test_split_seeds_disjoint():
    tr, va, te = (set(sd.split_seeds(7, s, 100)) for s in ("train", "val", "test"))
    assert not (tr & va or tr & te or va & te)
    assert sd.split_seeds(7, "train", 3) == sd.split_seeds(7, "train", 3)


def test_generation_failure():
    # an object is almost as large as the image and there must be four of them
    cfg = SceneConfig(image_size=16, objects_per_image=(4, 4), object_scale=(14, 15))
    with pytest.raises(sd.GenerationError):
        generate_scene(0, cfg)


# ------------------------------------------------------------------------ I/O
def test_round_trip(tmp_path):
    scenes = [generate_scene(s) for s in range(10)]
    sd.write_dataset(scenes, tmp_path / "d")
    back = sd.read_dataset(tmp_path / "d")
    assert back == scenes
    assert all(a.image.tobytes() == b.image.tobytes() for a, b in zip(back, scenes))
    assert sd.dataset_config(tmp_path / "d") == SceneConfig()


def test_image_header_layout(tmp_path):
    sd.write_dataset([generate_scene(1)], tmp_path)
    raw = (tmp_path / "000000.bin").read_bytes()
    magic, version, c, h, w = struct.unpack_from("<5I", raw)
    assert (magic, version, c, h, w) == (sd.IMAGE_MAGIC, sd.IMAGE_VERSION, 3, 64, 64)
    assert len(raw) == 20 + 8 * 3 * 64 * 64


def test_missing_index(tmp_path):
    with pytest.raises(sd.DatasetError):
        sd.read_dataset(tmp_path)


def test_entry_count_mismatch(tmp_path):
    sd.write_dataset([generate_scene(s) for s in range(3)], tmp_path)
    (tmp_path / "000002.bin").unlink()
    with pytest.raises(sd.CorruptFileError):
        sd.read_dataset(tmp_path)


def test_declared_size_mismatch(tmp_path):
    sd.write_dataset([generate_scene(s) for s in range(2)], tmp_path)
    idx = json.loads((tmp_path / "index.json").read_text())
    idx["size"] = 5
    (tmp_path / "index.json").write_text(json.dumps(idx))
    with pytest.raises(sd.CorruptFileError):
        sd.read_dataset(tmp_path)


def test_version_mismatch(tmp_path):
    sd.write_dataset([generate_scene(0)], tmp_path)
    idx = json.loads((tmp_path / "index.json").read_text())
    idx["version"] = 99
    (tmp_path / "index.json").write_text(json.dumps(idx))
    with pytest.raises(sd.VersionMismatchError):
        sd.read_dataset(tmp_path)


def test_corrupt_image_names_entry(tmp_path):
    sd.write_dataset([generate_scene(s) for s in range(2)], tmp_path)
    path = tmp_path / "000001.bin"
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(sd.CorruptFileError, match="000001.bin"):
        sd.read_dataset(tmp_path)


def test_bad_magic(tmp_path):
    sd.write_dataset([generate_scene(0)], tmp_path)
    path = tmp_path / "000000.bin"
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(sd.CorruptFileError, match="magic"):
        sd.read_dataset(tmp_path)
