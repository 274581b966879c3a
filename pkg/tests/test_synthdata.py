import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taskobf.core import SizeBins
from taskobf.synthdata import (
    PERSON_CLS,
    TASK_CLS,
    SceneGenerationError,
    SceneSpec,
    crop_bounds,
    generate_dataset,
    generate_scene,
    identity_counts,
    identity_texture,
    person_crops,
)


def test_scene_is_deterministic():
    spec = SceneSpec(seed=5)
    f1, a1 = generate_scene(spec, 3)
    f2, a2 = generate_scene(spec, 3)
    assert f1 == f2 and a1 == a2
    f3, _ = generate_scene(spec, 4)
    assert not np.array_equal(f1.pixels, f3.pixels)
    f4, _ = generate_scene(SceneSpec(seed=6), 3)
    assert not np.array_equal(f1.pixels, f4.pixels)


def test_dataset_ids_and_hash_stable():
    a = generate_dataset(SceneSpec(seed=1), 5, "val")
    b = generate_dataset(SceneSpec(seed=1), 5, "val")
    assert [f.id for f in a.frames] == [f"val_{i:06d}" for i in range(5)]
    assert a.content_hash() == b.content_hash()


def test_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(image_size=(16, 16))
    with pytest.raises(ValueError):
        SceneSpec(n_identities=1)
    with pytest.raises(ValueError):
        SceneSpec(n_persons=(2, 1))
    with pytest.raises(ValueError):
        SceneSpec(background=7)


def test_no_persons_means_no_keypoints_or_identity():
    ds = generate_dataset(SceneSpec(n_persons=(0, 0), seed=3), 10)
    for _, ann in ds:
        assert ann.keypoints == () and ann.identity is None
        assert all(b.cls == TASK_CLS for b in ann.boxes)
    with pytest.raises(ValueError, match="identity"):
        person_crops(ds)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32), st.integers(0, 200), st.integers(0, 2))
def test_labels_consistent_by_construction(seed, index, background):
    spec = SceneSpec(seed=seed, background=background, n_persons=(0, 2))
    frame, ann = generate_scene(spec, index)
    h, w = spec.image_size
    persons = [b for b in ann.boxes if b.cls == PERSON_CLS]
    planks = [b for b in ann.boxes if b.cls == TASK_CLS]
    assert len(persons) == len(ann.keypoints)
    assert spec.n_task_objects[0] <= len(planks) <= spec.n_task_objects[1]
    for b in ann.boxes:
        assert 0 <= b.x_min < b.x_max <= w and 0 <= b.y_min < b.y_max <= h
    for b, kp in zip(persons, ann.keypoints):
        xy = kp.xy()
        assert np.all(xy[:, 0] >= b.x_min - 0.5) and np.all(xy[:, 0] <= b.x_max + 0.5)
        assert np.all(xy[:, 1] >= b.y_min - 0.5) and np.all(xy[:, 1] <= b.y_max + 0.5)
    if persons:
        assert ann.identity is not None and 0 <= ann.identity < spec.n_identities
    assert frame.pixels.min() >= 0 and frame.pixels.max() <= 1


def test_identity_balance_within_30_percent():
    ds = generate_dataset(SceneSpec(seed=0), 500)
    counts = identity_counts(ds)
    mean = counts.sum() / len(counts)
    assert np.all(np.abs(counts - mean) <= 0.3 * mean)


def test_size_bins_populated():
    ds = generate_dataset(SceneSpec(seed=0), 200)
    bins = SizeBins.scaled(64, 64)
    names = [bins.bin_of(b.area) for _, a in ds for b in a.boxes if b.cls == TASK_CLS]
    for name in ("small", "medium", "large"):
        assert names.count(name) >= 30


def test_identity_textures_are_distinct():
    tex = [identity_texture(i, 8) for i in range(8)]
    keys = {(t.color, round(t.angle, 6), t.period) for t in tex}
    assert len(keys) == 8


def test_person_crops():
    ds = generate_dataset(SceneSpec(seed=2, n_persons=(2, 2)), 4)
    crops = person_crops(ds, pad=2, size=32)
    assert len(crops) == 8
    for (crop, ident), fid in zip(crops, [f.id for f in ds.frames for _ in range(2)]):
        assert crop.pixels.shape == (32, 32, 3)
        assert ident == ds.annotations[fid].identity


def test_crop_bounds_pad_zero_is_box():
    from taskobf.core import BBox

    assert crop_bounds(BBox(3, 4, 20, 30), 0, 64, 64) == (3, 4, 20, 30)
    assert crop_bounds(BBox(3.2, 4.7, 20.1, 30.5), 0, 64, 64) == (3, 4, 21, 31)
    assert crop_bounds(BBox(1, 1, 63, 63), 5, 64, 64) == (0, 0, 64, 64)


def test_crowded_spec_fails_loudly():
    with pytest.raises(SceneGenerationError):
        generate_scene(SceneSpec(image_size=(32, 32), n_task_objects=(12, 12), n_persons=(2, 2)), 0)
