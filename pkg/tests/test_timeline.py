"""Span attribution tests.

Every override decision is first traced by hand on fixed anchors; the
evaluation table's zero-window column is then checked against fusion
decisions recomputed directly in the test.
"""

import pytest
from hypothesis import given, settings, strategies as st

from conftest import ALICE, BOB, constant_model, hand_interaction, two_user_dataset
from netident.identity import (
    EnrollmentPolicy,
    IdentificationBatch,
    LabeledSample,
    Mode,
    RankedList,
    UserId,
    enroll,
    identify,
)
from netident.mlp import MlpConfig
from netident.timeline import (
    DEFAULT_WINDOW_PRESETS,
    AttributedSpan,
    TimelineConfig,
    attribute,
    build_spans,
    interaction_decisions,
    timeline_eval,
)

IP_A = "192.168.1.10"
IP_B = "192.168.1.11"


def ranked(*entries):
    return RankedList(tuple(entries))


def decision(iid, t, score, ip=IP_A, user=ALICE, service="YouTube"):
    inter = hand_interaction(iid, service, ip, t, [100, 100])
    return inter, ranked((user, score), (BOB if user == ALICE else ALICE, 0.1))


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


def test_config_defaults_valid():
    cfg = TimelineConfig()
    assert cfg.window_s == 30.0
    assert cfg.confidence_threshold == 0.9


@pytest.mark.parametrize("window_s", [-1.0, -0.001])
def test_config_rejects_negative_window(window_s):
    with pytest.raises(ValueError):
        TimelineConfig(window_s=window_s)


@pytest.mark.parametrize("theta", [0.0, 1.0, -0.2, 1.5])
def test_config_rejects_threshold_outside_open_interval(theta):
    with pytest.raises(ValueError):
        TimelineConfig(confidence_threshold=theta)


def test_zero_window_is_a_valid_config():
    assert TimelineConfig(window_s=0.0).window_s == 0.0


# ---------------------------------------------------------------------------
# build_spans
# ---------------------------------------------------------------------------


def test_span_covers_window_both_sides_of_anchor():
    cfg = TimelineConfig(window_s=30.0)
    spans = build_spans([decision(1, 100.0, 0.95)], cfg)
    assert len(spans) == 1
    s = spans[0]
    assert (s.start, s.end) == (70.0, 130.0)
    assert s.user == ALICE
    assert s.src_ip == IP_A
    assert s.anchor_confidence == 0.95
    assert s.anchor_id == 1
    assert s.anchor_time == 100.0


def test_score_below_threshold_makes_no_span():
    cfg = TimelineConfig(confidence_threshold=0.9)
    assert build_spans([decision(1, 100.0, 0.8999)], cfg) == []


def test_score_exactly_at_threshold_makes_a_span():
    cfg = TimelineConfig(confidence_threshold=0.9)
    assert len(build_spans([decision(1, 100.0, 0.9)], cfg)) == 1


def test_empty_ranking_is_skipped():
    cfg = TimelineConfig()
    inter = hand_interaction(1, "YouTube", IP_A, 100.0, [100, 100])
    assert build_spans([(inter, RankedList(()))], cfg) == []


def test_overlapping_anchors_all_emit_spans():
    cfg = TimelineConfig(window_s=60.0)
    spans = build_spans(
        [decision(1, 100.0, 0.95), decision(2, 110.0, 0.93)], cfg
    )
    assert [s.anchor_id for s in spans] == [1, 2]


def test_spans_sorted_by_start_then_anchor_id():
    cfg = TimelineConfig(window_s=10.0)
    spans = build_spans(
        [
            decision(5, 200.0, 0.95),
            decision(2, 50.0, 0.95),
            decision(3, 200.0, 0.91),
        ],
        cfg,
    )
    assert [s.anchor_id for s in spans] == [2, 3, 5]


def test_zero_window_spans_are_degenerate():
    spans = build_spans([decision(1, 100.0, 0.95)], TimelineConfig(window_s=0.0))
    assert spans[0].start == spans[0].end == 100.0


@settings(max_examples=60, deadline=None)
@given(
    t=st.floats(min_value=0.0, max_value=1e6, allow_nan=False),
    w=st.floats(min_value=0.0, max_value=500.0, allow_nan=False),
)
def test_span_width_is_twice_the_window(t, w):
    cfg = TimelineConfig(window_s=w, confidence_threshold=0.5)
    (s,) = build_spans([decision(1, t, 0.95)], cfg)
    assert s.end - s.start == pytest.approx(2.0 * w, abs=1e-6)
    if t == int(t) and w == int(w):
        assert s.end - s.start == 2.0 * w


# ---------------------------------------------------------------------------
# attribute
# ---------------------------------------------------------------------------


def span(start, end, user=ALICE, ip=IP_A, conf=0.95, anchor_id=1):
    return AttributedSpan(ip, user, start, end, conf, anchor_id)


def inter_at(iid, t, ip=IP_A, service="YouTube"):
    return hand_interaction(iid, service, ip, t, [100, 100])


def test_interaction_inside_span_takes_span_user():
    inters = [inter_at(7, 120.0)]
    labels = attribute(inters, [span(70.0, 130.0)], {7: None})
    assert labels == {7: ALICE}


def test_membership_closed_at_start_open_at_end():
    inters = [inter_at(1, 70.0), inter_at(2, 130.0), inter_at(3, 129.999)]
    labels = attribute(
        inters, [span(70.0, 130.0)], {1: None, 2: None, 3: None}
    )
    assert labels == {1: ALICE, 2: None, 3: ALICE}


def test_zero_width_span_covers_nothing_not_even_its_anchor():
    inters = [inter_at(1, 100.0)]
    labels = attribute(inters, [span(100.0, 100.0)], {1: BOB})
    assert labels == {1: BOB}


def test_uncovered_interaction_keeps_base_label():
    inters = [inter_at(1, 500.0)]
    labels = attribute(inters, [span(70.0, 130.0)], {1: BOB})
    assert labels == {1: BOB}


def test_span_on_other_ip_does_not_apply():
    inters = [inter_at(1, 100.0, ip=IP_B)]
    labels = attribute(inters, [span(70.0, 130.0, ip=IP_A)], {1: None})
    assert labels == {1: None}


def test_no_spans_is_the_identity_transform():
    base = {1: ALICE, 2: None}
    inters = [inter_at(1, 10.0), inter_at(2, 20.0)]
    out = attribute(inters, [], base)
    assert out == base
    assert out is not base


def test_higher_confidence_span_wins_conflict():
    inters = [inter_at(9, 100.0)]
    spans = [
        span(50.0, 150.0, user=ALICE, conf=0.92, anchor_id=1),
        span(60.0, 160.0, user=BOB, conf=0.95, anchor_id=2),
    ]
    labels = attribute(inters, spans, {9: None})
    assert labels == {9: BOB}


def test_equal_confidence_goes_to_earlier_anchor():
    inters = [inter_at(9, 100.0)]
    spans = [
        span(40.0, 140.0, user=ALICE, conf=0.95, anchor_id=1),  # anchor 90
        span(60.0, 160.0, user=BOB, conf=0.95, anchor_id=2),  # anchor 110
    ]
    labels = attribute(inters, spans, {9: None})
    assert labels == {9: ALICE}


def test_equal_confidence_and_anchor_time_goes_to_lower_id():
    inters = [inter_at(9, 100.0)]
    spans = [
        span(60.0, 140.0, user=BOB, conf=0.95, anchor_id=4),
        span(60.0, 140.0, user=ALICE, conf=0.95, anchor_id=2),
    ]
    labels = attribute(inters, sorted(spans, key=lambda s: s.anchor_id), {9: None})
    assert labels == {9: ALICE}


def test_wide_span_found_among_many_narrow_ones():
    # the candidate search must honour the widest span, not the nearest start
    inters = [inter_at(1, 900.0)]
    spans = [
        span(0.0, 1000.0, user=ALICE, conf=0.95, anchor_id=1),
        span(400.0, 410.0, user=BOB, ip=IP_B, conf=0.99, anchor_id=2),
        span(850.0, 860.0, user=BOB, ip=IP_B, conf=0.99, anchor_id=3),
    ]
    spans.sort(key=lambda s: (s.start, s.anchor_id))
    labels = attribute(inters, spans, {1: None})
    assert labels == {1: ALICE}


def test_interaction_missing_from_base_stays_unlabeled_when_uncovered():
    inters = [inter_at(1, 500.0)]
    labels = attribute(inters, [span(70.0, 130.0)], {})
    assert labels.get(1) is None


def test_attribute_is_deterministic():
    inters = [inter_at(i, 10.0 * i) for i in range(1, 30)]
    spans = [span(15.0, 95.0, anchor_id=1), span(80.0, 200.0, user=BOB, anchor_id=2)]
    base = {i.interaction_id: None for i in inters}
    assert attribute(inters, spans, base) == attribute(inters, spans, base)


# ---------------------------------------------------------------------------
# Evaluation table
# ---------------------------------------------------------------------------


def anchor_fixture():
    """Alice's strong YouTube scorer anchors spans that can rescue her
    unscoreable Google traffic; bob's traffic scores as alice everywhere."""
    model = constant_model(
        {(ALICE, "YouTube"): 0.95, (BOB, "YouTube"): 0.5}
    )
    samples = [
        LabeledSample(inter_at(1, 0.0, ip=IP_A, service="YouTube"), ALICE),
        LabeledSample(inter_at(2, 10.0, ip=IP_A, service="Google"), ALICE),
        LabeledSample(inter_at(3, 1000.0, ip=IP_B, service="YouTube"), BOB),
    ]
    return model, samples


def test_unscoreable_interaction_gets_empty_ranking():
    model, samples = anchor_fixture()
    decisions = interaction_decisions(model, samples)
    by_id = {inter.interaction_id: r for inter, r, _ in decisions}
    assert by_id[2].entries == ()
    assert by_id[1].top1() == (ALICE, pytest.approx(0.95))


def test_eval_table_hand_trace():
    model, samples = anchor_fixture()
    table = timeline_eval(model, samples, windows=(0.0, 30.0))

    assert table.windows == (0.0, 30.0)
    assert [row.user for row in table.rows] == [ALICE, BOB]
    alice_row, bob_row = table.rows
    # W=0: the Google interaction is unscoreable, a miss.  W=30: the
    # YouTube anchor at t=0 covers it, a hit.  Bob scores as alice always.
    assert alice_row.rates == {0.0: 50.0, 30.0: 100.0}
    assert bob_row.rates == {0.0: 0.0, 30.0: 0.0}
    assert table.average == {0.0: 25.0, 30.0: 50.0}
    assert table.confidence_threshold == 0.9


def test_eval_rescues_nothing_below_threshold():
    model, samples = anchor_fixture()
    table = timeline_eval(
        model, samples, windows=(0.0, 30.0), confidence_threshold=0.96
    )
    alice_row = table.rows[0]
    assert alice_row.rates == {0.0: 50.0, 30.0: 50.0}


def test_zero_window_column_equals_fusion_decisions_recomputed():
    ds = two_user_dataset(n_per_pair=32)
    model, samples = enroll(
        ds,
        EnrollmentPolicy(),
        MlpConfig(hidden_neurons=10, epochs=25, seed=11),
    )
    table = timeline_eval(model, samples, windows=DEFAULT_WINDOW_PRESETS)

    totals: dict[UserId, int] = {}
    hits: dict[UserId, int] = {}
    for s in samples:
        totals[s.user] = totals.get(s.user, 0) + 1
        r = identify(model, IdentificationBatch((s.interaction,), Mode.FUSION))
        top = r.top1()
        if top is not None and top[0] == s.user:
            hits[s.user] = hits.get(s.user, 0) + 1

    for row in table.rows:
        expected = round(100.0 * hits.get(row.user, 0) / totals[row.user], 1)
        assert row.rates[0.0] == expected
    assert table.average[0.0] == round(
        sum(
            round(100.0 * hits.get(u, 0) / totals[u], 1) for u in totals
        )
        / len(totals),
        1,
    )
    for row in table.rows:
        for rate in row.rates.values():
            assert 0.0 <= rate <= 100.0


def test_eval_is_deterministic():
    model, samples = anchor_fixture()
    a = timeline_eval(model, samples, windows=(0.0, 30.0, 60.0))
    b = timeline_eval(model, samples, windows=(0.0, 30.0, 60.0))
    assert a == b
