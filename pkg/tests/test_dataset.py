import json
import math
import shutil

import numpy as np
import pytest

from affectstream.dataset import (
    ClipRecord,
    DatasetError,
    FrameAnnotation,
    SplitSpec,
    chi_square_distance,
    denormalize_label,
    label_histogram,
    load_dataset,
    make_split,
    normalize_label,
)
from affectstream.synthetic import (
    generate_signal_clips,
    generate_synthetic_dataset,
    landmarks_of,
    mouth_curvature_measure,
    face_params,
)
from oracles import pearson


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    return generate_synthetic_dataset(3, (8, 12), seed=7, out=root)


def _copy(src_index, tmp_path):
    dst = tmp_path / "copy"
    shutil.copytree(src_index.root, dst)
    return dst


def test_normalize_examples():
    assert normalize_label(-10) == 0.0
    assert normalize_label(10) == 1.0
    assert normalize_label(0) == 0.5
    with pytest.raises(ValueError):
        normalize_label(11)


def test_normalize_roundtrip_exact():
    for level in range(-10, 11):
        assert denormalize_label(normalize_label(level)) == level


def test_load_preserves_counts(small_dataset):
    idx = load_dataset(small_dataset.root)
    assert len(idx) == 3
    assert [len(c) for c in idx.clips] == [len(c) for c in small_dataset.clips]
    assert all(len(c) >= 8 for c in idx.clips)


def test_count_mismatch_names_clip(small_dataset, tmp_path):
    root = _copy(small_dataset, tmp_path)
    ann = root / "clip_0001" / "annotations.json"
    raw = json.loads(ann.read_text())
    del raw["frames"][str(len(raw["frames"]) - 1)]
    ann.write_text(json.dumps(raw))
    with pytest.raises(DatasetError, match="clip_0001"):
        load_dataset(root)
    idx = load_dataset(root, skip_invalid=True)
    assert len(idx) == 2 and "clip_0001" in idx.errors


@pytest.mark.parametrize("mutate, match", [
    (lambda f: f.update(valence=11), "outside"),
    (lambda f: f.update(arousal=-11), "outside"),
    (lambda f: f.update(landmarks=f["landmarks"][:67]), "68 landmarks"),
    (lambda f: f.update(valence=2.5), "integer"),
])
def test_annotation_errors(small_dataset, tmp_path, mutate, match):
    root = _copy(small_dataset, tmp_path)
    ann = root / "clip_0000" / "annotations.json"
    raw = json.loads(ann.read_text())
    mutate(raw["frames"]["3"])
    ann.write_text(json.dumps(raw))
    with pytest.raises(DatasetError, match=match):
        load_dataset(root)


def test_missing_annotation_file(small_dataset, tmp_path):
    root = _copy(small_dataset, tmp_path)
    (root / "clip_0002" / "annotations.json").unlink()
    with pytest.raises(DatasetError, match="missing annotations"):
        load_dataset(root)


def _fake_clip(cid, labels):
    lm = np.zeros((68, 2))
    anns = [FrameAnnotation(int(v), int(a), lm) for v, a in labels]
    return ClipRecord(cid, [None] * len(anns), anns)


def test_split_sizes_paper_scale():
    rng = np.random.default_rng(0)
    clips = [_fake_clip(f"c{i:03d}", rng.integers(-10, 11, size=(int(rng.integers(10, 30)), 2)))
             for i in range(600)]
    spec = make_split(clips, 1 / 6, seed=3, max_passes=2)
    assert len(spec.train_ids) == 500 and len(spec.test_ids) == 100
    assert set(spec.train_ids).isdisjoint(spec.test_ids)
    assert set(spec.train_ids) | set(spec.test_ids) == {c.clip_id for c in clips}


def test_split_identical_clips_zero_distance():
    labels = [(1, 2), (3, -4), (0, 0)]
    spec = make_split([_fake_clip("a", labels), _fake_clip("b", labels)], 0.5, seed=0)
    assert spec.histogram_distance == 0.0


def test_split_deterministic_and_monotone():
    rng = np.random.default_rng(1)
    clips = [_fake_clip(f"c{i:02d}", rng.integers(-10, 11, size=(15, 2))) for i in range(60)]
    a = make_split(clips, 0.25, seed=11)
    b = make_split(clips, 0.25, seed=11)
    assert a == b and a.to_json() == b.to_json()
    assert all(x2 <= x1 for x1, x2 in zip(a.history, a.history[1:]))
    assert a.histogram_distance <= a.history[0]
    # reported distance matches a recomputation from the final membership
    by_id = {c.clip_id: c for c in clips}
    tr = sum(label_histogram(by_id[i].labels()) for i in a.train_ids)
    te = sum(label_histogram(by_id[i].labels()) for i in a.test_ids)
    assert chi_square_distance(tr, te) == pytest.approx(a.histogram_distance, abs=1e-12)
    assert SplitSpec.from_json(a.to_json()) == a


def test_split_errors():
    with pytest.raises(ValueError):
        make_split([_fake_clip("a", [(0, 0), (1, 1)])], 0.5, 0)
    with pytest.raises(ValueError):
        make_split([_fake_clip("a", [(0, 0)]), _fake_clip("b", [(0, 0)])], 1.0, 0)


def test_generator_roundtrip(tmp_path):
    idx = generate_synthetic_dataset(2, (8, 10), seed=5, out=tmp_path / "a")
    # regenerate and compare with the generator's own records before disk
    from affectstream import synthetic
    rng = np.random.default_rng(np.random.SeedSequence(5).spawn(2)[1])
    n = int(rng.integers(8, 11))
    v = synthetic.random_walk(rng, n, int(rng.integers(-10, 11)))
    a = synthetic.random_walk(rng, n, int(rng.integers(-10, 11)))
    frames, anns = synthetic.synthesize_clip(rng, v, a)
    loaded = idx["clip_0001"]
    np.testing.assert_array_equal(loaded.labels(), np.stack([v, a], axis=1))
    np.testing.assert_array_equal(loaded.landmarks(), np.stack([x.landmarks for x in anns]))
    np.testing.assert_array_equal(loaded.read_frame(0), frames[0])


def test_generator_deterministic(tmp_path):
    generate_synthetic_dataset(4, (8, 12), seed=9, out=tmp_path / "a")
    generate_synthetic_dataset(4, (8, 12), seed=9, out=tmp_path / "b")
    for k in range(4):
        cid = f"clip_{k:04d}"
        assert (tmp_path / "a" / cid / "annotations.json").read_bytes() == \
            (tmp_path / "b" / cid / "annotations.json").read_bytes()


def test_generator_fixed_valence_max_curvature(tmp_path):
    idx = generate_synthetic_dataset(1, (8, 8), seed=2, out=tmp_path, fixed_valence=10)
    clip = idx.clips[0]
    assert np.all(clip.labels()[:, 0] == 10)
    top = mouth_curvature_measure(landmarks_of(face_params(10, 0, (80, 80), 40)))
    for lm in clip.landmarks():
        assert mouth_curvature_measure(lm) == pytest.approx(top, abs=0.002)


def test_generator_argument_errors(tmp_path):
    with pytest.raises(ValueError):
        generate_synthetic_dataset(0, (8, 10), 0, tmp_path)
    with pytest.raises(ValueError):
        generate_synthetic_dataset(1, (4, 10), 0, tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        generate_synthetic_dataset(1, (8, 8), 0, blocker / "sub")


def test_valence_drives_mouth_geometry(tmp_path):
    idx = generate_synthetic_dataset(50, (8, 10), seed=21, out=tmp_path)
    vals, curv = [], []
    for c in idx.clips:
        for ann in c.annotations:
            vals.append(ann.valence)
            curv.append(mouth_curvature_measure(ann.landmarks))
    assert pearson(vals, curv) > 0.95


def test_landmarks_in_frame_and_layout(small_dataset):
    for c in small_dataset.clips:
        lm = c.landmarks()
        assert lm.shape[1:] == (68, 2)
        assert lm.min() >= 0 and lm.max() <= 159


def test_signal_clips(tmp_path):
    idx, windows = generate_signal_clips(3, 20, seed=1, out=tmp_path)
    assert len(idx) == 3
    for c in idx.clips:
        s, e = windows[c.clip_id]
        assert e - s == 8
        labels = c.labels()
        assert np.all(labels == labels[0]) and math.hypot(*labels[0]) >= 6.5
