import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import random_pmf
from secjscc.errors import ArgumentError, ValidationError
from secjscc.lattice import (MultimodalSource, SubsetLattice, build_lattice, load_source_model,
                             modified_distortion, parents, parse_subset_label, source_model_from_dict,
                             source_model_to_dict, subset, subset_entropy, subset_equivocation,
                             subset_label, xor_pair_with_sum)
from secjscc.prob import JointPmf


def test_canonical_order_m3():
    labels = [subset_label(a) for a in build_lattice(3)]
    assert labels == ["1", "2", "3", "1,2", "1,3", "2,3", "1,2,3"]


def test_parents_exclude_empty_and_self():
    assert parents({1, 2, 3}) == tuple(map(frozenset, [{1}, {2}, {3}, {1, 2}, {1, 3}, {2, 3}]))
    assert parents({2}) == ()


def test_label_round_trip():
    for a in build_lattice(4):
        assert parse_subset_label(subset_label(a)) == a
    with pytest.raises(ValidationError):
        parse_subset_label("1,,2")


def test_modality_cap():
    with pytest.raises(ArgumentError):
        build_lattice(5)
    assert len(build_lattice(5, max_m=5)) == 31


def test_xor_counterexample_exact():
    j = xor_pair_with_sum()
    h1 = subset_equivocation(j, {1})
    h2 = subset_equivocation(j, {2})
    h12 = subset_equivocation(j, {1, 2})
    assert (h1, h2, h12) == (1.0, 1.0, 1.0)
    assert h1 + h2 == 2.0 != h12


def test_modified_distortion_known_value():
    # S2 = S1 with probability 0.9, encoder sees S1 only.
    src = MultimodalSource(JointPmf(np.array([[0.45, 0.05], [0.05, 0.45]])), {1})
    dh = modified_distortion(src, 2, 1 - np.eye(2))
    assert np.allclose(dh, [[0.1, 0.9], [0.9, 0.1]], atol=1e-12)


def test_model_round_trip(tmp_path):
    data = {"m": 2, "alphabets": [2, 3], "joint": (np.ones(6) / 6).tolist(), "observed": [1],
            "distortion": {"1": {"matrix": [[0, 1], [1, 0]], "D": 0.1},
                           "2": {"matrix": (1 - np.eye(3)).tolist(), "D": 0.3}},
            "perception": {"1": {"metric": "tv", "P": 0.05}}}
    path = tmp_path / "m.json"
    path.write_text(json.dumps(data))
    model = load_source_model(path)
    assert model.source.unobserved == {2}
    again = source_model_from_dict(source_model_to_dict(model))
    assert np.array_equal(again.source.joint.probs, model.source.joint.probs)
    assert again.perception.thresholds == {1: 0.05}


@pytest.mark.parametrize("mutate,msg", [
    (lambda d: d.pop("joint"), "joint"),
    (lambda d: d.update(alphabets=[2]), "alphabets"),
    (lambda d: d["distortion"].pop("2"), "distortion.2"),
    (lambda d: d.update(joint=[0.5, 0.5, 0.5, 0.5]), "joint"),
])
def test_model_errors_name_the_field(mutate, msg):
    data = {"m": 2, "alphabets": [2, 2], "joint": [0.25] * 4, "observed": [1, 2],
            "distortion": {"1": {"matrix": [[0, 1], [1, 0]], "D": 0.1},
                           "2": {"matrix": [[0, 1], [1, 0]], "D": 0.1}}}
    mutate(data)
    with pytest.raises(ValidationError, match=msg):
        source_model_from_dict(data)


# --- properties ---------------------------------------------------------------


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 4), st.randoms(use_true_random=False))
def test_custom_orders_accepted_iff_linear_extension(m, rnd):
    subsets = list(build_lattice(m))
    rnd.shuffle(subsets)
    is_ext = all(not (b < a) for i, a in enumerate(subsets) for b in subsets[i + 1:])
    if is_ext:
        lat = SubsetLattice(m, tuple(subsets))
        for a, b in itertools.product(lat, lat):
            if a <= b:
                assert lat.position(a) <= lat.position(b)
    else:
        with pytest.raises(ValidationError):
            SubsetLattice(m, tuple(subsets))


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 4))
def test_canonical_order_is_linear_extension(m):
    lat = build_lattice(m)
    for a, b in itertools.product(lat, lat):
        if a <= b:
            assert lat.position(a) <= lat.position(b)
    for a in lat:
        assert all(lat.position(p) < lat.position(a) for p in parents(a))
        assert set(parents(a)) == {b for b in lat if b < a}


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_modified_distortion_is_a_convex_combination(seed):
    rng = np.random.default_rng(seed)
    alph = tuple(int(a) for a in rng.integers(1, 4, size=3))
    p = random_pmf(rng, alph)
    if rng.uniform() < 0.3:
        p = np.where(rng.uniform(size=alph) < 0.3, 0.0, p)
        if p.sum() == 0:
            p.flat[0] = 1.0
        p = p / p.sum()
    src = MultimodalSource(JointPmf(p), {1, 3})
    d = rng.uniform(0, 5, size=(alph[1], 3))
    dh = modified_distortion(src, 2, d)
    seen = p.sum(axis=1) > 0                  # rows of s_E that can occur
    assert np.all(dh[seen] >= d.min(axis=0) - 1e-12)
    assert np.all(dh[seen] <= d.max(axis=0) + 1e-12)
    assert np.all(dh[~seen] == 0.0)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_subset_entropy_monotone(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 4))
    src = MultimodalSource(JointPmf(random_pmf(rng, tuple(rng.integers(1, 4, size=m)), alpha=0.5)),
                           set(range(1, m + 1)))
    lat = build_lattice(m)
    for a, b in itertools.product(lat, lat):
        if a <= b:
            assert subset_entropy(src, a) <= subset_entropy(src, b) + 1e-10
