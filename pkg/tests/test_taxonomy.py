import itertools
import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dualpilot.errors import BadDistribution, InvalidMapping
from dualpilot.taxonomy import (
    CD,
    CL,
    DK,
    TE,
    ClassDistribution,
    ClassMapping,
    ComplexityLabel,
    RoutingAction,
    all_cells,
    build_default_mapping,
    default_mapping,
    route_label,
    sample_class,
    sample_label,
)

labels = st.builds(ComplexityLabel, st.sampled_from(CL), st.sampled_from(CD), st.sampled_from(DK),
                   st.sampled_from(TE))


def test_label_space_has_108_cells():
    cells = all_cells()
    assert len(cells) == 108
    assert len(set(cells)) == 108


def test_default_mapping_has_13_classes():
    assert len(default_mapping()) == 13


def test_shipped_mapping_equals_builder():
    assert default_mapping().to_json() == build_default_mapping().to_json()


def test_simple_fact_cell():
    cls = default_mapping().consolidate(ComplexityLabel(CL.LOW, CD.NONE, DK.GENERAL, TE.LOW))
    assert cls.name == "simple-fact"
    assert cls.band == "low"


def test_histogram_matches_mapping_file():
    # brute-force scan of every cell against the class lists in the file
    m = default_mapping()
    scanned = Counter(m.consolidate(c).id for c in all_cells())
    listed = {c.id: len(c.cells) for c in m}
    assert scanned == listed
    assert sum(scanned.values()) == 108


@given(labels)
def test_every_label_maps_to_exactly_one_class(label):
    m = default_mapping()
    owners = [c.id for c in m if label in c.cells]
    assert owners == [m.consolidate(label).id]


@pytest.mark.parametrize("label, action", [
    (("low", "none", "general", "low"), RoutingAction.FAST),
    (("medium", "cross_meeting", "expert", "high"), RoutingAction.SLOW_CROSS),
    (("low", "recent", "basic", "low"), RoutingAction.SLOW),
    (("high", "none", "general", "low"), RoutingAction.SLOW_RAG),
    (("low", "none", "expert", "low"), RoutingAction.SLOW_RAG),
])
def test_route_label_examples(label, action):
    assert route_label(ComplexityLabel.from_list(label)) is action


def truth_table(label):
    # independent restatement of the precedence rules
    cross = label.cd is CD.CROSS_MEETING
    heavy = label.cl is CL.HIGH or label.dk is DK.EXPERT
    simple = label.cl is CL.LOW and label.cd is CD.NONE
    if cross:
        return RoutingAction.SLOW_CROSS
    if heavy:
        return RoutingAction.SLOW_RAG
    return RoutingAction.FAST if simple else RoutingAction.SLOW


def test_route_label_exhaustive_truth_table():
    for cell in all_cells():
        assert route_label(cell) is truth_table(cell)


def test_fast_only_for_simple_light_cells():
    for cell in all_cells():
        if route_label(cell) is RoutingAction.FAST:
            assert cell.cl is CL.LOW and cell.cd is CD.NONE and cell.dk is not DK.EXPERT


def test_label_round_trip():
    for cell in all_cells():
        assert ComplexityLabel.from_list(cell.to_list()) == cell


def test_mapping_json_round_trip():
    m = default_mapping()
    again = ClassMapping.from_json(json.loads(json.dumps(m.to_json())))
    assert again.to_json() == m.to_json()


def test_mapping_missing_cell_rejected():
    obj = default_mapping().to_json()
    obj["classes"][0]["cells"] = obj["classes"][0]["cells"][1:]
    with pytest.raises(InvalidMapping, match="unassigned"):
        ClassMapping.from_json(obj)


def test_mapping_duplicate_cell_rejected():
    obj = default_mapping().to_json()
    obj["classes"][1]["cells"].append(obj["classes"][0]["cells"][0])
    with pytest.raises(InvalidMapping):
        ClassMapping.from_json(obj)


def test_mapping_malformed_rejected():
    with pytest.raises(InvalidMapping):
        ClassMapping.from_json({"classes": [{"id": 0, "name": "x", "cells": [["low", "bogus", "x", "y"]]}]})


def test_degenerate_distribution_always_returns_key():
    d = ClassDistribution({"A": 1.0})
    rng = np.random.default_rng(0)
    assert {sample_class(d, rng) for _ in range(50)} == {"A"}


@pytest.mark.parametrize("weights", [{}, {"a": 0.5}, {"a": 1.5, "b": -0.5}, {"a": float("nan")}])
def test_bad_distributions(weights):
    with pytest.raises(BadDistribution):
        ClassDistribution(weights)


def test_band_frequencies_100k():
    d = ClassDistribution.default()
    rng = np.random.default_rng(1)
    draws = Counter(sample_class(d, rng) for _ in range(100_000))
    # binomial sd at p=0.38, n=1e5 is 0.0015; 0.01 is > 6 sd
    for band, w in d.weights.items():
        assert draws[band] / 100_000 == pytest.approx(w, abs=0.01)


def test_sampling_is_deterministic():
    d = ClassDistribution.default()
    m = default_mapping()
    r1, r2 = np.random.default_rng(5), np.random.default_rng(5)
    seq1 = [sample_label(sample_class(d, r1, m), r1) for _ in range(200)]
    seq2 = [sample_label(sample_class(d, r2, m), r2) for _ in range(200)]
    assert seq1 == seq2


def test_sample_label_stays_in_class():
    rng = np.random.default_rng(3)
    for cls in default_mapping():
        for _ in range(5):
            assert sample_label(cls, rng) in cls.cells


def test_label_order_is_total():
    cells = all_cells()
    for a, b in itertools.islice(itertools.combinations(cells, 2), 500):
        assert (a < b) != (b < a)
