"""IDX ingestion, preprocessing, and partitioning."""

import numpy as np
import pytest

import synthdigits
from qflsim import data
from qflsim.errors import ConfigError, DataError, IngestionError


def _tiny_idx(n=8, seed=0):
    images, labels = synthdigits.make_dataset(n, seed)
    return synthdigits.encode_idx_images(images), synthdigits.encode_idx_labels(labels), images, labels


# =============================================================================
# parse_idx
# =============================================================================

def test_parse_roundtrips_pixels():
    img_b, lab_b, images, labels = _tiny_idx(2)
    raw = data.parse_idx(img_b, lab_b)
    assert np.array_equal(raw.images, images)
    assert np.array_equal(raw.labels, labels)


def test_swapped_magics_rejected():
    img_b, lab_b, _, _ = _tiny_idx(1)
    with pytest.raises(IngestionError):
        data.parse_idx(lab_b, img_b)


def test_truncated_payload_names_offset():
    img_b, lab_b, _, _ = _tiny_idx(1)
    with pytest.raises(IngestionError) as err:
        data.parse_idx(img_b[:-10], lab_b)
    assert "offset" in str(err.value)


def test_count_mismatch_rejected():
    img_b, _, _, _ = _tiny_idx(2)
    lab_short = synthdigits.encode_idx_labels(np.array([0], dtype=np.uint8))
    with pytest.raises(IngestionError):
        data.parse_idx(img_b, lab_short)


def test_gzip_files_load(tmp_path):
    img, lab = synthdigits.write_idx_corpus(tmp_path, n_per_class=3, compress=True)
    raw = data.load_idx_pair(img, lab)
    assert raw.images.shape == (12, 28, 28)


# =============================================================================
# preprocess
# =============================================================================

def test_all_zero_image_gives_zero_features():
    images = np.zeros((1, 28, 28), dtype=np.uint8)
    feats = data.pool_features(images)
    assert np.array_equal(feats, np.zeros((1, 8)))


def test_all_255_image_gives_unit_features():
    images = np.full((1, 28, 28), 255, dtype=np.uint8)
    feats = data.pool_features(images)
    assert np.allclose(feats, 1.0)


def test_half_bright_image_blocks():
    images = np.zeros((1, 28, 28), dtype=np.uint8)
    images[0, :14, :] = 255  # top half bright
    feats = data.pool_features(images).reshape(2, 4)
    assert np.allclose(feats[0], 1.0)
    assert np.allclose(feats[1], 0.0)


def test_preprocess_filters_and_remaps():
    raw = data.RawDataset(
        images=np.zeros((6, 28, 28), dtype=np.uint8),
        labels=np.array([0, 5, 2, 2, 9, 3], dtype=np.uint8),
    )
    out = data.preprocess(raw, class_set=(2, 3))
    assert out.features.shape == (3, 8)
    assert np.array_equal(out.labels, [0, 0, 1])
    assert out.class_set == (2, 3)


def test_preprocess_empty_filter_rejected():
    raw = data.RawDataset(
        images=np.zeros((2, 28, 28), dtype=np.uint8),
        labels=np.array([8, 9], dtype=np.uint8),
    )
    with pytest.raises(DataError):
        data.preprocess(raw, class_set=(0, 1))


# =============================================================================
# split_and_partition
# =============================================================================

def _processed(n_per_class=40, seed=0):
    images, labels = synthdigits.make_dataset(n_per_class, seed)
    return data.preprocess(data.RawDataset(images, labels))


def test_iid_deal_is_balanced_150_over_15():
    processed = _processed(n_per_class=38)  # 152 total; trim to 150 below
    trimmed = data.ProcessedDataset(
        features=processed.features[:150],
        labels=processed.labels[:150],
        class_set=processed.class_set,
    )
    cfg = data.SplitConfig(test_fraction=0.0, per_client_cap=None, test_cap=None)
    shards, test_set, _ = data.split_and_partition(trimmed, 15, seed=3, config=cfg)
    assert [len(lab) for _, lab in shards] == [10] * 15
    assert len(test_set[1]) == 0


def test_same_seed_same_assignment():
    processed = _processed()
    cfg = data.SplitConfig()
    _, _, p1 = data.split_and_partition(processed, 5, seed=42, config=cfg)
    _, _, p2 = data.split_and_partition(processed, 5, seed=42, config=cfg)
    assert np.array_equal(p1.assignment, p2.assignment)


def test_train_test_disjoint_and_cover():
    processed = _processed()
    cfg = data.SplitConfig(per_client_cap=None, test_cap=None)
    shards, test_set, partition = data.split_and_partition(
        processed, 4, seed=7, config=cfg
    )
    train_count = sum(len(lab) for _, lab in shards)
    assert train_count + len(test_set[1]) == len(processed.labels)
    # every sample assigned to exactly one client or the test split
    assigned = (partition.assignment >= 0).sum()
    assert assigned == train_count


def test_dirichlet_high_alpha_approaches_iid():
    processed = _processed(n_per_class=100)
    sizes = []
    for seed in range(20):
        cfg = data.SplitConfig(
            partition_mode="dirichlet",
            dirichlet_alpha=1000.0,
            per_client_cap=None,
            test_cap=None,
        )
        shards, _, _ = data.split_and_partition(processed, 5, seed=seed, config=cfg)
        sizes.append([len(lab) for _, lab in shards])
    sizes = np.array(sizes, dtype=float)
    mean_size = sizes.mean()
    # proportions concentrate near uniform for alpha -> infinity
    assert np.abs(sizes / mean_size - 1.0).mean() < 0.1


def test_dirichlet_low_alpha_is_skewed():
    processed = _processed(n_per_class=100)
    cfg = data.SplitConfig(
        partition_mode="dirichlet",
        dirichlet_alpha=0.2,
        per_client_cap=None,
        test_cap=None,
    )
    shards, _, _ = data.split_and_partition(processed, 5, seed=5, config=cfg)
    sizes = np.array([len(lab) for _, lab in shards], dtype=float)
    assert sizes.std() / sizes.mean() > 0.15


def test_per_client_cap_applies():
    processed = _processed(n_per_class=100)
    cfg = data.SplitConfig(per_client_cap=30, test_cap=20)
    shards, test_set, _ = data.split_and_partition(processed, 3, seed=1, config=cfg)
    assert all(len(lab) == 30 for _, lab in shards)
    assert len(test_set[1]) == 20


def test_bad_configs_rejected():
    with pytest.raises(ConfigError):
        data.SplitConfig(test_fraction=0.7)
    with pytest.raises(ConfigError):
        data.SplitConfig(partition_mode="zipf")
    processed = _processed(n_per_class=2)
    with pytest.raises(ConfigError):
        data.split_and_partition(processed, 0, seed=0)
