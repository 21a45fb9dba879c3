import numpy as np
import pytest

from netvlad.descriptors import DescriptorDataset, ValidationError, save_dataset
from netvlad.geodata import (
    WorldConfig,
    build_tuples,
    generate_world,
    min_cross_distance,
    pairwise_distances,
    query_indices,
    split_geographic,
)


def _sorted_rows(a):
    return a[np.lexsort(a.T[::-1])]


def test_standard_world_shape(standard_world):
    assert len(standard_world) == 1200
    assert standard_world.descriptors.shape == (1200, 64, 32)
    assert len(np.unique(standard_world.place_ids)) == 200


def test_each_place_has_visits_a_month_apart(standard_world):
    ds = standard_world
    for p in range(0, 200, 17):
        days = np.unique(ds.timestamps[ds.place_ids == p])
        assert len(days) >= 2
        assert np.min(np.diff(days)) >= 31


def test_degenerate_config_gives_identical_multisets():
    cfg = WorldConfig(n_places=3, n_descriptors=8, prototypes_per_place=8, n_landmarks=8, n_transients=0,
                      n_distractors=0, viewpoint_noise=0.0, condition_shift=0.0)
    ds = generate_world(cfg)
    a, b = ds.descriptors[0], ds.descriptors[1]
    np.testing.assert_array_equal(_sorted_rows(a), _sorted_rows(b))


def test_shared_distractors_appear_verbatim_across_places(small_world):
    ds = small_world
    seen = {}
    for img, place in zip(ds.descriptors, ds.place_ids):
        for row in img:
            seen.setdefault(row.tobytes(), set()).add(int(place))
    assert max(len(v) for v in seen.values()) >= 2


def test_generator_is_deterministic(tmp_path):
    cfg = WorldConfig(n_places=12, seed=5)
    h1 = save_dataset(generate_world(cfg), tmp_path / "a")
    h2 = save_dataset(generate_world(cfg), tmp_path / "b")
    assert h1 == h2
    assert save_dataset(generate_world(WorldConfig(n_places=12, seed=6)), tmp_path / "c") != h1


def test_without_time_machine_collapses_dates():
    ds = generate_world(WorldConfig(n_places=10, time_machine=False))
    for p in range(10):
        sel = ds.place_ids == p
        assert len(np.unique(ds.timestamps[sel])) == 1
        assert len(np.unique(ds.conditions[sel])) == 1


def test_config_validation():
    with pytest.raises(ValidationError):
        WorldConfig(n_places=0)
    with pytest.raises(ValidationError):
        WorldConfig(gps_jitter=-1)
    with pytest.raises(ValidationError):
        WorldConfig(place_spacing=20)
    with pytest.raises(ValidationError):
        WorldConfig.from_dict({"places": 3})
    assert WorldConfig.from_dict(WorldConfig().to_dict()) == WorldConfig()


def test_split_all_train(small_world):
    trn, val, test = split_geographic(small_world, (1, 0, 0))
    assert len(trn) == len(small_world) and len(val) == len(test) == 0


def test_standard_split_counts_and_gutters(standard_splits):
    places = [len(np.unique(s.place_ids)) for s in standard_splits]
    assert places == [66, 67, 67]
    ids = [set(s.ids) for s in standard_splits]
    assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])
    for i in range(3):
        for j in range(i + 1, 3):
            assert min_cross_distance(standard_splits[i].positions, standard_splits[j].positions) > 25
    # no place spans two splits
    owners = [set(s.place_ids.tolist()) for s in standard_splits]
    assert sum(len(o) for o in owners) == 200


def test_split_zero_places_rejected(small_world):
    with pytest.raises(ValidationError):
        split_geographic(small_world, (1, 1e-6, 1))


def _hand_world():
    # a: query at origin day 0; b: 3 m away, 62 days later; c: 15 m (ring); d: 30 m; e: 3 m, same day
    pos = np.array([[0.0, 0.0], [3.0, 0.0], [15.0, 0.0], [30.0, 0.0], [0.0, 3.0]])
    days = np.array([0.0, 62.0, 62.0, 62.0, 0.0])
    return DescriptorDataset(ids=list("abcde"), descriptors=np.zeros((5, 1, 2), np.float32),
                             positions=pos, timestamps=days)


def test_tuples_hand_enumerated():
    tuples = {t.query_id: t for t in build_tuples(_hand_world())}
    # b has no negative (d is same-day), c and d have no positive: all dropped
    assert set(tuples) == {"a", "e"}
    assert (tuples["a"].positive_ids, tuples["a"].negative_ids) == (("b",), ("d",))
    assert (tuples["e"].positive_ids, tuples["e"].negative_ids) == (("b",), ("d",))
    for t in tuples.values():
        assert "c" not in t.positive_ids + t.negative_ids


def test_same_place_two_months_apart_are_mutual_positives():
    ds = DescriptorDataset(ids=["a", "b", "n"], descriptors=np.zeros((3, 1, 2), np.float32),
                           positions=np.array([[0.0, 0.0], [3.0, 0.0], [100.0, 0.0]]),
                           timestamps=np.array([0.0, 62.0, 31.0]))
    tuples = {t.query_id: t for t in build_tuples(ds)}
    assert tuples["a"].positive_ids == ("b",) and tuples["b"].positive_ids == ("a",)
    assert tuples["a"].negative_ids == ("n",)


def test_tuple_invariants(standard_splits):
    trn = standard_splits[0]
    index = {i: n for n, i in enumerate(trn.ids)}
    tuples = build_tuples(trn)
    assert len(tuples) > 0
    for t in tuples[::7]:
        q = index[t.query_id]
        for group, ok in ((t.positive_ids, lambda d: d <= 10), (t.negative_ids, lambda d: d > 25)):
            idx = [index[i] for i in group]
            d = pairwise_distances(trn.positions[[q]], trn.positions[idx])[0]
            assert np.all(ok(d))
            assert np.all(np.abs(trn.timestamps[idx] - trn.timestamps[q]) >= 31)


def test_query_role_is_latest_visit(standard_splits):
    test = standard_splits[2]
    q = query_indices(test)
    assert np.all(test.visits[q] == test.visits.max())
    assert len(q) == len(test) // 3
