import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmadapter.config import BackboneConfig, ConfigError, DataConfig, DataError
from dmadapter.data import (export_manifest, generate_dataset, load_manifest, read_image,
                            sample_attributes)
from dmadapter.metrics import evaluate_similarity, mean_ap, rank_k


@pytest.fixture(scope="module")
def dataset():
    return generate_dataset(DataConfig(), BackboneConfig())


def test_default_shapes(dataset):
    assert dataset.train.images.shape == (256, 32, 16, 3)
    assert dataset.train.captions.shape == (256, 8)
    assert dataset.test.images.shape == (64, 32, 16, 3)
    assert dataset.train.captions.max() < 64


def test_same_seed_is_bit_identical(dataset):
    again = generate_dataset(DataConfig(), BackboneConfig())
    for name in ("train", "test"):
        a, b = dataset.split(name), again.split(name)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.captions, b.captions)
        np.testing.assert_array_equal(a.caption_ids, b.caption_ids)


def test_different_seed_differs(dataset):
    other = generate_dataset(DataConfig(seed=1), BackboneConfig())
    assert not np.array_equal(other.train.images, dataset.train.images)


def test_noise_free_identities_are_constant():
    ds = generate_dataset(DataConfig(noise=0.0), BackboneConfig())
    for split in (ds.train, ds.test):
        for ident in np.unique(split.image_ids):
            imgs = split.images[split.image_ids == ident]
            caps = split.captions[split.caption_ids == ident]
            assert np.all(imgs == imgs[0]) and np.all(caps == caps[0])


def test_splits_are_disjoint(dataset):
    assert not set(dataset.train.image_ids) & set(dataset.test.image_ids)
    assert not set(dataset.train.caption_ids) & set(dataset.test.caption_ids)


def test_attribute_gap_holds(dataset):
    attrs = np.stack(list(dataset.attributes.values()))
    dist = np.abs(attrs[:, None] - attrs[None]).max(axis=2)
    np.fill_diagonal(dist, np.inf)
    assert dist.min() >= 0.25


def test_nearest_centroid_is_perfect_without_noise():
    ds = generate_dataset(DataConfig(noise=0.0), BackboneConfig())
    split = ds.train
    ids = np.unique(split.image_ids)
    flat = split.images.reshape(len(split.images), -1)
    centroids = np.stack([flat[split.image_ids == i].mean(axis=0) for i in ids])
    dist = ((flat[:, None] - centroids[None]) ** 2).sum(axis=2)
    np.testing.assert_array_equal(ids[dist.argmin(axis=1)], split.image_ids)


def test_capacity_error():
    with pytest.raises(ConfigError, match="capacity"):
        sample_attributes(10, 1, 0.5, np.random.default_rng(0))
    with pytest.raises(ConfigError, match="capacity"):
        generate_dataset(DataConfig(num_ids=300, num_test_ids=1, n_attributes=8, gap=1.0),
                         BackboneConfig())


def test_manifest_round_trip(tmp_path, dataset):
    manifest = export_manifest(dataset, tmp_path)
    records = load_manifest(manifest)
    assert len(records) == dataset.train.n_pairs + dataset.test.n_pairs
    assert set(records[0]) == {"pair_id", "identity", "split", "image_path", "token_ids"}
    assert [r["pair_id"] for r in records] == list(range(len(records)))
    for rec in (records[0], records[-1], records[300]):
        split = dataset.split(rec["split"])
        idx = [i for i in range(split.n_pairs) if split.caption_ids[i] == rec["identity"]
               and split.captions[i].tolist() == rec["token_ids"]][0]
        img = read_image(tmp_path / rec["image_path"])
        np.testing.assert_array_equal(img, split.images[split.caption_image[idx]])
    raw = (tmp_path / records[0]["image_path"]).read_bytes()
    assert np.frombuffer(raw[:12], dtype="<i4").tolist() == [32, 16, 3]


# ---------------------------------------------------------------- metrics

def brute_rank_k(sim, qids, gids, k):
    hits = 0
    for i, row in enumerate(sim):
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        hits += any(gids[j] == qids[i] for j in order[:k])
    return hits / len(sim)


def brute_ap(sim, qids, gids):
    aps = []
    for i, row in enumerate(sim):
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        found, precisions = 0, []
        for r, j in enumerate(order, start=1):
            if gids[j] == qids[i]:
                found += 1
                precisions.append(found / r)
        aps.append(sum(precisions) / len(precisions))
    return sum(aps) / len(aps)


def test_rank_k_hand_example():
    sim = np.array([[0.9, 0.8, 0.1], [0.2, 0.3, 0.4]])
    q, g = ["a", "b"], ["b", "a", "b"]
    assert rank_k(sim, q, g, 1) == 0.5
    assert rank_k(sim, q, g, 2) == 1.0


def test_rank_one_perfect_when_match_is_highest():
    sim = np.eye(4) + 0.1
    assert rank_k(sim, [0, 1, 2, 3], [0, 1, 2, 3], 1) == 1.0


def test_rank_k_rejects_large_k():
    with pytest.raises(ValueError):
        rank_k(np.zeros((1, 3)), [0], [0, 1, 2], 4)


def test_ties_go_to_lower_gallery_index():
    sim = np.array([[0.5, 0.5]])
    assert rank_k(sim, [0], [0, 1], 1) == 1.0
    assert rank_k(sim, [1], [0, 1], 1) == 0.0


def test_rank_k_matches_brute_force_20x50():
    rng = np.random.default_rng(0)
    sim = rng.normal(size=(20, 50))
    qids, gids = rng.integers(0, 10, 20), rng.integers(0, 10, 50)
    for k in (1, 5, 10, 50):
        assert rank_k(sim, qids, gids, k) == brute_rank_k(sim, qids, gids, k)


def test_map_single_match_examples():
    assert mean_ap(np.array([[0.9, 0.1, 0.2]]), [1], [1, 2, 3]) == 1.0
    assert mean_ap(np.array([[0.2, 0.9, 0.1]]), [1], [1, 2, 3]) == 0.5


@given(st.integers(0, 2**31), st.integers(1, 8), st.integers(1, 12))
@settings(max_examples=40)
def test_map_and_rank_match_brute_force(seed, nq, ng):
    rng = np.random.default_rng(seed)
    # rounded similarities produce ties on purpose
    sim = np.round(rng.normal(size=(nq, ng)), 1)
    gids = rng.integers(0, 3, ng)
    qids = gids[rng.integers(0, ng, nq)]
    assert abs(mean_ap(sim, qids, gids) - brute_ap(sim, qids, gids)) < 1e-12
    for k in range(1, ng + 1):
        assert rank_k(sim, qids, gids, k) == brute_rank_k(sim, qids, gids, k)
    assert rank_k(sim, qids, gids, ng) == 1.0


@given(st.integers(0, 2**31))
@settings(max_examples=30)
def test_metrics_invariant_to_increasing_transforms(seed):
    rng = np.random.default_rng(seed)
    sim = rng.uniform(0.01, 1.0, size=(6, 15))
    gids = rng.integers(0, 4, 15)
    qids = gids[rng.integers(0, 15, 6)]
    base = evaluate_similarity(sim, qids, gids)
    for f in (lambda x: 2 * x + 1, lambda x: x ** 3):
        assert evaluate_similarity(f(sim), qids, gids) == base


def test_report_ordering_and_range():
    rng = np.random.default_rng(1)
    sim = rng.normal(size=(12, 30))
    gids = rng.integers(0, 6, 30)
    qids = gids[:12]
    r = evaluate_similarity(sim, qids, gids)
    assert 0 <= r.rank1 <= r.rank5 <= r.rank10 <= 1 and 0 <= r.map <= 1


def test_map_zero_match_names_query():
    with pytest.raises(DataError, match="query 1"):
        mean_ap(np.zeros((2, 2)), [0, 5], [0, 1])
