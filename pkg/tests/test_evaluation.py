import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from netvlad.descriptors import ValidationError
from netvlad.encoders import NetVladEncoder, PoolEncoder
from netvlad.evaluation import evaluate, recall_at_n, retrieve, spatial_nms
from netvlad.geodata import database_indices, query_indices
from netvlad.gradcheck import random_params
from netvlad.postprocess import fit_whitening


def test_retrieve_self():
    assert retrieve(np.array([1.0, 2.0]), np.array([[1.0, 2.0]]), 5, ["x"]) == [("x", 0.0)]


def test_retrieve_hand_ranking():
    db = np.array([[3.0, 0.0], [0.0, 1.0], [0.0, -2.0]])
    # distances from the origin: 3, 1, 2
    got = retrieve(np.zeros(2), db, 3, ["a", "b", "c"])
    assert [g[0] for g in got] == ["b", "c", "a"]
    np.testing.assert_allclose([g[1] for g in got], [1, 2, 3])
    assert len(retrieve(np.zeros(2), db, 99)) == 3


def test_retrieve_ties_by_id():
    db = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    assert [g[0] for g in retrieve(np.zeros(2), db, 3, ["z", "b", "m"])] == ["b", "m", "z"]


def test_retrieve_errors():
    with pytest.raises(ValidationError):
        retrieve(np.zeros(2), np.zeros((0, 2)), 1)
    with pytest.raises(ValidationError):
        retrieve(np.zeros(3), np.zeros((2, 2)), 1)


def test_nms_examples():
    far = {"a": (0, 0), "b": (50, 0), "c": (100, 0)}
    ranked = [("a", 0.1), ("b", 0.2), ("c", 0.3)]
    assert spatial_nms(ranked, far, 10) == ranked
    same = {"a": (0, 0), "b": (0, 0)}
    assert spatial_nms([("b", 0.1), ("a", 0.2)], same, 10) == [("b", 0.1)]


def test_nms_hand_fixture():
    pos = {1: (0, 0), 2: (5, 0), 3: (12, 0), 4: (16, 0), 5: (30, 0)}
    ranked = [(2, 0.1), (1, 0.2), (4, 0.3), (3, 0.4), (5, 0.5)]
    # manual greedy at radius 10: keep 2; drop 1 (5 m from 2); keep 4 (11 m);
    # drop 3 (4 m from 4); keep 5
    assert spatial_nms(ranked, pos, 10) == [(2, 0.1), (4, 0.3), (5, 0.5)]


def test_nms_radius_zero_is_identity():
    pos = {1: (0, 0), 2: (0, 0)}
    assert spatial_nms([(1, 0.0), (2, 0.0)], pos, 0) == [(1, 0.0), (2, 0.0)]


def test_recall_examples():
    db = {"near": (0, 0), "far1": (100, 0), "far2": (200, 0), "far3": (300, 0)}
    lists = [["far1", "far2", "near", "far3"], ["near", "far1"]]
    curve, first = recall_at_n(lists, db, np.zeros((2, 2)), n_values=(1, 5))
    assert curve.recall == [0.5, 1.0] and first == [3, 1]
    perfect, _ = recall_at_n([["near"]], db, np.array([[3.0, 4.0]]), n_values=(1,))
    assert perfect.at(1) == 1.0
    # the threshold is inclusive at exactly 25 m
    edge, _ = recall_at_n([["near"]], db, np.array([[25.0, 0.0]]), n_values=(1,))
    assert edge.at(1) == 1.0
    with pytest.raises(ValidationError):
        recall_at_n(lists, db, np.zeros((2, 2)), n_values=())


@pytest.fixture(scope="module")
def test_split(standard_splits):
    return standard_splits[2]


@pytest.fixture(scope="module")
def random_encoder():
    return NetVladEncoder(random_params(np.random.default_rng(7), 8, 32, scale=1.0))


def _reference_recall(split, params, n=1):
    """Independent pipeline: explicit softmax, residual sums and a full
    distance matrix with stable argsort."""
    w, b, c = (np.asarray(a, dtype=np.float64) for a in (params.w, params.b, params.c))
    x = split.descriptors.astype(np.float64)
    x = x / np.maximum(np.linalg.norm(x, axis=2, keepdims=True), 1e-300)
    reps = []
    for img in x:
        s = img @ w.T + b
        e = np.exp(s - s.max(1, keepdims=True))
        a = e / e.sum(1, keepdims=True)
        v = np.stack([(a[:, k : k + 1] * (img - c[k])).sum(0) for k in range(len(c))])
        v = v / np.linalg.norm(v, axis=1, keepdims=True)
        v = v.reshape(-1)
        reps.append(v / np.linalg.norm(v))
    reps = np.array(reps)
    q, db = query_indices(split), database_indices(split)
    d = np.linalg.norm(reps[q][:, None, :] - reps[db][None, :, :], axis=2)
    hits = 0
    for row, qi in enumerate(q):
        top = db[np.argsort(d[row], kind="stable")[:n]]
        hits += np.any(np.linalg.norm(split.positions[top] - split.positions[qi], axis=1) <= 25)
    return hits / len(q)


def test_random_encoder_matches_reference_pipeline(test_split, random_encoder):
    got = evaluate(test_split, random_encoder, n_values=(1,)).curve.at(1)
    ref = _reference_recall(test_split, random_encoder.params)
    assert abs(got - ref) <= 0.03


def test_evaluate_is_deterministic_and_reports(tmp_path, test_split, random_encoder):
    a = evaluate(test_split, random_encoder)
    b = evaluate(test_split, random_encoder)
    assert json.dumps(a.as_dict()) == json.dumps(b.as_dict())
    assert np.all(np.diff(a.curve.recall) >= 0)
    assert all(0 <= r <= 1 for r in a.curve.recall)
    jpath, cpath = a.write(tmp_path)
    assert json.loads(jpath.read_text())["recall"]["n_values"][0] == 1
    assert cpath.read_text().splitlines()[0] == "n,recall"
    row = a.queries[0]
    assert len(row["top_ids"]) == 10 and set(row) >= {"correct", "first_correct_rank"}


def test_nms_radius_zero_matches_no_nms(test_split, random_encoder):
    reprs = random_encoder.encode(test_split.descriptors)
    a = evaluate(test_split, None, nms_radius=None, reprs=reprs)
    b = evaluate(test_split, None, nms_radius=0.0, reprs=reprs)
    assert a.curve.recall == b.curve.recall and a.queries == b.queries


def test_recall_at_full_depth_is_any_match(test_split):
    reprs = PoolEncoder("sum").encode(test_split.descriptors)
    n_db = len(database_indices(test_split))
    curve = evaluate(test_split, None, reprs=reprs, n_values=(1, n_db)).curve
    q = query_indices(test_split)
    dbp = test_split.positions[database_indices(test_split)]
    any_match = np.mean([np.any(np.linalg.norm(dbp - test_split.positions[i], axis=1) <= 25) for i in q])
    assert curve.at(n_db) == any_match


def test_whitened_evaluation_runs(standard_splits, random_encoder):
    trn, _, test = standard_splits
    w = fit_whitening(random_encoder.encode(trn.descriptors), 64)
    rep = evaluate(test, random_encoder, whitening=w, nms_radius=10.0)
    assert rep.options["whitening_dim"] == 64 and rep.options["nms_radius"] == 10.0


def test_workers_do_not_change_encodings(test_split, random_encoder):
    one = random_encoder.encode(test_split.descriptors, workers=1)
    four = random_encoder.encode(test_split.descriptors, workers=4)
    assert one.tobytes() == four.tobytes()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_retrieval_rotation_invariant(seed):
    r = np.random.default_rng(seed)
    db = r.normal(size=(30, 12))
    q = r.normal(size=12)
    rot, _ = np.linalg.qr(r.normal(size=(12, 12)))
    a = retrieve(q, db, 30)
    b = retrieve(q @ rot, db @ rot, 30)
    assert np.max(np.abs(np.array([x[1] for x in a]) - [x[1] for x in b])) < 1e-6
    # order agrees wherever neighbouring distances are separated beyond rounding
    d = np.array([x[1] for x in a])
    sep = np.concatenate([[True], np.diff(d) > 1e-9]) & np.concatenate([np.diff(d) > 1e-9, [True]])
    assert [x[0] for x, s in zip(a, sep) if s] == [x[0] for x, s in zip(b, sep) if s]
