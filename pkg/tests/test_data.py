import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clecnn.data import (GROUPS, CropPolicy, FoldPlan, Manifest, Record, SynthConfig, assert_patient_disjoint,
                         assign_groups, generate_synthetic, load_batch, load_images, make_folds, split_dev_test)
from clecnn.errors import ConfigError, DataError
from clecnn.tensor import make_rng


def fake_manifest(group_sizes, images=2):
    recs = []
    n = 0
    for g, size in zip(GROUPS, group_sizes):
        for _ in range(size):
            recs += [Record(f"P{n:03d}_{i}.png", f"P{n:03d}", g, i % 2, "dev") for i in range(images)]
            n += 1
    return Manifest(recs)


# ---------------------------------------------------------------- generator

def test_generator_is_deterministic(tmp_path):
    cfg = SynthConfig(3, (2, 3), image_size=64, seed=11)
    a = generate_synthetic(cfg, tmp_path / "a")
    b = generate_synthetic(cfg, tmp_path / "b")
    assert [r.path for r in a] == [r.path for r in b]
    for r in a:
        assert (tmp_path / "a" / r.path).read_bytes() == (tmp_path / "b" / r.path).read_bytes()
    assert (tmp_path / "a/manifest.csv").read_bytes() == (tmp_path / "b/manifest.csv").read_bytes()
    c = generate_synthetic(SynthConfig(3, (2, 3), image_size=64, seed=12), tmp_path / "c")
    assert (tmp_path / "a" / a.records[0].path).read_bytes() != (tmp_path / "c" / c.records[0].path).read_bytes()


def test_diagnostic_fraction_binomial_bound(tmp_path):
    cfg = SynthConfig(100, (10, 10), diagnostic_fraction=0.49, image_size=64, seed=3)
    m = generate_synthetic(cfg, tmp_path / "d")
    n = len(m)
    assert n == 1000
    pos = sum(r.label for r in m)
    assert abs(pos - 0.49 * n) <= 3 * math.sqrt(n * 0.49 * 0.51)


def test_every_patient_has_images_and_one_group(small_dataset):
    root, dev, test = small_dataset
    m = Manifest.read(root / "manifest.csv")
    assert len(m.patients) == 25
    for p in m.patients:
        recs = [r for r in m if r.patient_id == p]
        assert len(recs) >= 1 and len({r.group for r in recs}) == 1 and len({r.split for r in recs}) == 1


def test_generator_missing_parent_writes_nothing(tmp_path):
    with pytest.raises(DataError):
        generate_synthetic(SynthConfig(2, (1, 1), image_size=64), tmp_path / "missing" / "out")
    assert not (tmp_path / "missing").exists()


def test_frames_carry_class_signal(small_images):
    dev, _ = small_images
    bright = (dev.images > 200).mean(axis=(1, 2))
    # diagnostic frames contain bright nuclei; the median bright fraction separates the classes
    assert np.median(bright[dev.labels == 1]) > np.median(bright[dev.labels == 0])


@pytest.mark.parametrize("kwargs", [dict(diagnostic_fraction=1.0), dict(image_size=32, crop_size=64),
                                    dict(images_per_patient=(3, 2)), dict(domain="mars")])
def test_synth_config_validation(kwargs):
    with pytest.raises(ConfigError):
        SynthConfig(**kwargs)


def test_group_mix_follows_cohort_weights():
    groups = assign_groups(74, make_rng(0))
    assert {g: groups.count(g) for g in GROUPS} == {"glioma": 21, "meningioma": 30, "other": 23}


# ---------------------------------------------------------------- manifests and splits

def test_manifest_roundtrip(small_dataset, tmp_path):
    root, dev, test = small_dataset
    m = Manifest.read(root / "manifest.csv")
    m.write(tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_bytes() == (root / "manifest.csv").read_bytes()
    assert (root / "manifest.csv").read_text().splitlines()[0] == "path,patient_id,group,label,split"


def test_manifest_rejects_patient_in_two_splits():
    recs = [Record("a.png", "P1", "glioma", 1, "dev"), Record("b.png", "P1", "glioma", 0, "test")]
    with pytest.raises(DataError):
        Manifest(recs)


def test_split_table1_proportions():
    m = fake_manifest((21, 30, 23))
    dev, test = split_dev_test(m, 15 / 74, seed=0)
    assert len(test.patients) == 15 and len(dev.patients) == 59
    assert sorted(dev.patients + test.patients) == m.patients
    assert_patient_disjoint(dev, test)
    # stratified: each group contributes roughly its share
    tg = test.patient_groups()
    assert {g: sum(v == g for v in tg.values()) for g in GROUPS} == {"glioma": 4, "meningioma": 6, "other": 5}


@settings(max_examples=40, deadline=None)
@given(st.tuples(st.integers(2, 12), st.integers(2, 12), st.integers(2, 12)), st.floats(0.1, 0.5),
       st.integers(0, 1000))
def test_split_is_a_patient_partition(sizes, frac, seed):
    m = fake_manifest(sizes)
    dev, test = split_dev_test(m, frac, seed)
    assert set(dev.patients).isdisjoint(test.patients)
    assert sorted(dev.patients + test.patients) == m.patients
    assert len(test.records) + len(dev.records) == len(m.records)
    # every group keeps at least one patient on each side
    for g in GROUPS:
        assert g in dev.patient_groups().values() and g in test.patient_groups().values()


def test_split_needs_two_patients_per_group():
    with pytest.raises(ConfigError):
        split_dev_test(fake_manifest((1, 3, 3)), 0.2)


def test_folds_59_patients():
    plan = make_folds(fake_manifest((17, 24, 18)), 5, seed=0)
    assert sorted(len(f) for f in plan.folds) == [11, 12, 12, 12, 12]
    assert sorted(plan.patients) == fake_manifest((17, 24, 18)).patients
    assert make_folds(fake_manifest((17, 24, 18)), 5, seed=0).folds == plan.folds


@settings(max_examples=40, deadline=None)
@given(st.tuples(st.integers(0, 10), st.integers(0, 10), st.integers(1, 10)), st.integers(2, 6), st.integers(0, 99))
def test_folds_balanced_partition(sizes, k, seed):
    m = fake_manifest(sizes)
    if len(m.patients) < k:
        with pytest.raises(ConfigError):
            make_folds(m, k, seed)
        return
    plan = make_folds(m, k, seed)
    lens = [len(f) for f in plan.folds]
    assert max(lens) - min(lens) <= 1
    assert sorted(plan.patients) == m.patients
    for i in range(k):
        train, val = plan.train_val(i)
        assert set(train).isdisjoint(val) and sorted(train + val) == m.patients


def test_fold_plan_rejects_overlap():
    with pytest.raises(DataError):
        FoldPlan([["P1", "P2"], ["P2"]])


# ---------------------------------------------------------------- batches

def test_eval_crop_is_deterministic_and_scaled(small_images):
    dev, _ = small_images
    x1, y1 = load_batch(dev, np.arange(4), CropPolicy(64, "eval"))
    x2, _ = load_batch(dev, np.arange(4), CropPolicy(64, "eval"))
    assert x1.shape == (4, 1, 64, 64) and x1.dtype == np.float32
    assert np.array_equal(x1, x2) and 0 <= x1.min() and x1.max() <= 1
    np.testing.assert_array_equal(y1, dev.labels[:4])
    np.testing.assert_array_equal(x1[0, 0], dev.images[0, 4:68, 4:68] / np.float32(255))


def test_full_size_crop_is_whole_image():
    img = np.random.default_rng(0).integers(0, 256, (2, 16, 16), dtype=np.uint8)
    for mode in ("eval", "train"):
        x, _ = load_batch(img, [0, 1], CropPolicy(16, mode, flip=False), np.random.default_rng(0))
        np.testing.assert_array_equal(x[:, 0], img / np.float32(255))


def test_train_flip_rate_binomial():
    img = np.arange(16, dtype=np.uint8).reshape(1, 4, 4)
    x, _ = load_batch(img, np.zeros(10000, dtype=int), CropPolicy(4, "train"), make_rng(0, 3))
    flips = int((x[:, 0, 0, 0] == 3 / np.float32(255)).sum())
    assert abs(flips - 5000) <= 3 * math.sqrt(10000 * 0.25)


def test_undersized_frame_is_named():
    with pytest.raises(DataError, match="img7"):
        load_batch(np.zeros((1, 8, 8), np.uint8), [0], CropPolicy(16), ids=["img7"])


def test_unreadable_image(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"not a png")
    m = Manifest([Record("bad.png", "P1", "glioma", 1, "dev")], tmp_path)
    with pytest.raises(DataError, match="bad.png"):
        load_images(m)
