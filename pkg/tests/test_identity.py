"""Enrollment and identification tests.

Separability of the hand-made fixture is established by a nearest-centroid
oracle before the trained models are held to the same bar; ranking is
checked against plain sorts.
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import (
    ALICE,
    BOB,
    constant_mlp,
    constant_model,
    hand_interaction,
    two_user_dataset,
)
from netident.identity import (
    EnrollmentError,
    EnrollmentPolicy,
    IdentificationBatch,
    IdentificationError,
    IdentityModel,
    Mode,
    RankedList,
    SplitKind,
    LabeledSample,
    _split_pair,
    best_service_table,
    derive_seed,
    enroll,
    group_batches,
    identify,
    identity_model_from_dict,
    identity_model_to_dict,
    load_identity_model,
    rank_users,
    save_identity_model,
    score_interaction,
    tpir_at_rank,
)
from netident.interactions import featurize
from netident.mlp import MlpConfig, forward
from netident.model import DomainError, UserId

FAST_CFG = MlpConfig(hidden_neurons=10, epochs=25, seed=11)


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


def test_chronological_split_even_count():
    inters = [hand_interaction(i, "YouTube", "192.168.1.10", 100.0 + 10 * i,
                               [100, 100]) for i in range(100)]
    train_half, test_half = _split_pair(inters, EnrollmentPolicy(), ALICE, "YouTube")
    assert len(train_half) == len(test_half) == 50
    assert [i.interaction_id for i in train_half] == list(range(0, 50))
    assert [i.interaction_id for i in test_half] == list(range(50, 100))
    assert max(i.start for i in train_half) < min(i.start for i in test_half)


@given(n=st.integers(min_value=1, max_value=200),
       kind=st.sampled_from(list(SplitKind)))
@settings(max_examples=60, deadline=None)
def test_split_disjoint_and_complete(n, kind):
    inters = [hand_interaction(i, "YouTube", "192.168.1.10", 10.0 * i, [100, 100])
              for i in range(n)]
    policy = EnrollmentPolicy(split=kind, seed=4)
    a, b = _split_pair(inters, policy, ALICE, "YouTube")
    ids_a = {i.interaction_id for i in a}
    ids_b = {i.interaction_id for i in b}
    assert not ids_a & ids_b
    assert ids_a | ids_b == set(range(n))
    assert len(a) == (n + 1) // 2


def test_seeded_random_split_deterministic():
    inters = [hand_interaction(i, "YouTube", "192.168.1.10", 10.0 * i, [100, 100])
              for i in range(30)]
    policy = EnrollmentPolicy(split=SplitKind.SEEDED_RANDOM, seed=9)
    a1, _ = _split_pair(inters, policy, ALICE, "YouTube")
    a2, _ = _split_pair(inters, policy, ALICE, "YouTube")
    assert [i.interaction_id for i in a1] == [i.interaction_id for i in a2]


def test_policy_validation():
    with pytest.raises(ValueError):
        EnrollmentPolicy(min_interactions_per_pair=0)
    assert EnrollmentPolicy().ratio == 0.5
    assert EnrollmentPolicy().min_interactions_per_pair == 28


# ---------------------------------------------------------------------------
# Enrollment threshold
# ---------------------------------------------------------------------------


def test_threshold_28_included_27_excluded():
    d28 = two_user_dataset(n_per_pair=28, services=("YouTube",))
    model, samples = enroll(d28, EnrollmentPolicy(), FAST_CFG, include_pooled=False)
    assert set(model.classifiers) == {(ALICE, "YouTube"), (BOB, "YouTube")}
    # 28 split evenly: 14 test interactions per pair
    assert len(samples) == 28

    d27 = two_user_dataset(n_per_pair=27, services=("YouTube",))
    with pytest.raises(EnrollmentError):
        enroll(d27, EnrollmentPolicy(), FAST_CFG, include_pooled=False)


def test_enrollment_skips_service_with_single_user():
    # Bob's YouTube interactions are relabeled as Google so only Alice
    # reaches the YouTube threshold; her pair has no impostors and is
    # dropped while Google still enrolls both.
    d = two_user_dataset(n_per_pair=30, services=("YouTube", "Google"))
    keep = []
    for inter in d.interactions:
        if inter.service == "YouTube" and inter.src_ip == "192.168.1.11":
            continue
        keep.append(inter)
    d.interactions = keep
    model, _ = enroll(d, EnrollmentPolicy(), FAST_CFG, include_pooled=False)
    services_by_user = {(u.label, s) for (u, s) in model.classifiers}
    assert ("alice", "YouTube") not in services_by_user
    assert {("alice", "Google"), ("bob", "Google")} <= services_by_user


def test_enrollment_requires_two_users():
    d = two_user_dataset(n_per_pair=30, services=("YouTube",))
    d.interactions = [i for i in d.interactions if i.src_ip == "192.168.1.10"]
    with pytest.raises(EnrollmentError):
        enroll(d, EnrollmentPolicy(), FAST_CFG, include_pooled=False)


def test_unattributed_interactions_ignored():
    d = two_user_dataset(n_per_pair=30, services=("YouTube",))
    stray = hand_interaction(9999, "YouTube", "192.168.1.99", 50.0, [100, 100])
    d.interactions.append(stray)
    d.records.extend(stray.packets)
    model, samples = enroll(d, EnrollmentPolicy(), FAST_CFG, include_pooled=False)
    assert all(s.interaction.interaction_id != 9999 for s in samples)


# ---------------------------------------------------------------------------
# Separable enrollment end to end, with centroid oracle
# ---------------------------------------------------------------------------


def centroid_oracle_accuracy(dataset, policy):
    """Nearest-centroid classification on standardized features over the
    same chronological split; establishes the fixture is separable."""
    groups = {}
    for inter in dataset.interactions:
        user = dataset.ground_truth.user_at(inter.src_ip, inter.start)
        groups.setdefault(user, []).append(inter)
    train_x, train_y, test_x, test_y = [], [], [], []
    for user, inters in groups.items():
        inters.sort(key=lambda i: (i.start, i.interaction_id))
        cut = (len(inters) + 1) // 2
        for i in inters[:cut]:
            train_x.append(featurize(i).as_array()); train_y.append(user)
        for i in inters[cut:]:
            test_x.append(featurize(i).as_array()); test_y.append(user)
    X = np.asarray(train_x)
    mean, std = X.mean(0), X.std(0)
    std[std == 0] = 1.0
    users = sorted(groups, key=lambda u: u.numeric_id)
    centroids = {
        u: ((X[[y == u for y in train_y]] - mean) / std).mean(0) for u in users
    }
    hits = 0
    for x, truth in zip(test_x, test_y):
        xh = (x - mean) / std
        best = min(users, key=lambda u: float(np.linalg.norm(xh - centroids[u])))
        hits += best == truth
    return hits / len(test_x)


def test_separable_two_user_rank1():
    d = two_user_dataset(n_per_pair=40)
    assert centroid_oracle_accuracy(d, EnrollmentPolicy()) >= 0.95
    model, samples = enroll(d, EnrollmentPolicy(), FAST_CFG, include_pooled=False)
    assert model.enrolled_users == {ALICE, BOB}
    results = []
    for b in group_batches(samples, window_s=60.0):
        ranked = identify(model, IdentificationBatch(b.interactions, Mode.FUSION))
        results.append((ranked, b.true_user))
    assert tpir_at_rank(results, 1) >= 95.0


def test_enrollment_deterministic():
    d = two_user_dataset(n_per_pair=30)
    m1, s1 = enroll(d, EnrollmentPolicy(), FAST_CFG)
    m2, s2 = enroll(d, EnrollmentPolicy(), FAST_CFG)
    assert identity_model_to_dict(m1) == identity_model_to_dict(m2)
    assert s1 == s2


def test_derive_seed_distinct_and_stable():
    a = derive_seed(1, 1, "YouTube")
    assert a == derive_seed(1, 1, "YouTube")
    assert a != derive_seed(1, 2, "YouTube")
    assert a != derive_seed(1, 1, "Google")
    assert a != derive_seed(2, 1, "YouTube")
    assert 0 <= a < 2 ** 64


# ---------------------------------------------------------------------------
# score_interaction
# ---------------------------------------------------------------------------


def test_score_map_keyed_by_service_enrollment():
    u3 = UserId("carol", 3)
    model = constant_model({
        (ALICE, "YouTube"): 0.8,
        (BOB, "YouTube"): 0.3,
        (u3, "Google"): 0.9,
    })
    inter = hand_interaction(1, "YouTube", "192.168.1.10", 0.0, [100, 100])
    res = score_interaction(model, inter)
    assert res.service_enrolled
    assert set(res.scores) == {ALICE, BOB}

    google = hand_interaction(2, "Google", "192.168.1.10", 0.0, [100, 100])
    assert set(score_interaction(model, google).scores) == {u3}

    skype = hand_interaction(3, "Skype", "192.168.1.10", 0.0, [100, 100])
    res = score_interaction(model, skype)
    assert res.scores == {} and not res.service_enrolled


def test_scores_match_brute_force_forward():
    d = two_user_dataset(n_per_pair=30)
    model, samples = enroll(d, EnrollmentPolicy(), FAST_CFG, include_pooled=False)
    inter = samples[0].interaction
    res = score_interaction(model, inter)
    x = featurize(inter).as_array()
    for (user, service), clf in model.classifiers.items():
        if service == inter.service:
            assert res.scores[user] == forward(clf, x)
    assert score_interaction(model, inter).scores == res.scores


# ---------------------------------------------------------------------------
# identify
# ---------------------------------------------------------------------------


def fusion_fixture():
    """Alice scores 0.8/0.6/0.7 on three services; Bob 0.65 everywhere."""
    table = {}
    for service, a_score in (("YouTube", 0.8), ("Google", 0.6), ("Facebook", 0.7)):
        table[(ALICE, service)] = a_score
        table[(BOB, service)] = 0.65
    model = constant_model(table)
    inters = tuple(
        hand_interaction(i + 1, s, "192.168.1.10", 10.0 * i, [100, 100])
        for i, s in enumerate(("YouTube", "Google", "Facebook"))
    )
    return model, inters


def test_fusion_is_arithmetic_mean():
    model, inters = fusion_fixture()
    ranked = identify(model, IdentificationBatch(inters, Mode.FUSION))
    scores = dict(ranked.entries)
    assert scores[ALICE] == pytest.approx(0.7, abs=1e-12)
    assert scores[BOB] == pytest.approx(0.65, abs=1e-12)
    assert ranked.top1()[0] == ALICE


def test_max_rule_takes_maximum():
    model, inters = fusion_fixture()
    ranked = identify(model, IdentificationBatch(inters, Mode.MAX_RULE))
    scores = dict(ranked.entries)
    assert scores[ALICE] == pytest.approx(0.8, abs=1e-12)
    assert scores[BOB] == pytest.approx(0.65, abs=1e-12)


def test_single_interaction_max_equals_fusion():
    model, inters = fusion_fixture()
    one = IdentificationBatch(inters[:1], Mode.MAX_RULE)
    other = IdentificationBatch(inters[:1], Mode.FUSION)
    assert identify(model, one) == identify(model, other)


def test_fusion_averages_only_scoreable_interactions():
    # Bob has no Facebook classifier: his mean spans two interactions only.
    table = {
        (ALICE, "YouTube"): 0.8, (ALICE, "Google"): 0.6, (ALICE, "Facebook"): 0.7,
        (BOB, "YouTube"): 0.9, (BOB, "Google"): 0.5,
    }
    model = constant_model(table)
    inters = tuple(
        hand_interaction(i + 1, s, "192.168.1.10", 10.0 * i, [100, 100])
        for i, s in enumerate(("YouTube", "Google", "Facebook"))
    )
    ranked = identify(model, IdentificationBatch(inters, Mode.FUSION))
    scores = dict(ranked.entries)
    assert scores[BOB] == pytest.approx(0.7, abs=1e-12)
    assert scores[ALICE] == pytest.approx(0.7, abs=1e-12)


def test_exact_tie_resolves_by_numeric_id():
    # 0.5 is exactly representable through the logistic at zero
    table = {(ALICE, "YouTube"): 0.5, (BOB, "YouTube"): 0.5}
    model = constant_model(table)
    inter = hand_interaction(1, "YouTube", "192.168.1.10", 0.0, [100, 100])
    ranked = identify(model, IdentificationBatch((inter,), Mode.FUSION))
    assert [u.label for u, _ in ranked.entries] == ["alice", "bob"]


def test_weighted_fusion():
    model, inters = fusion_fixture()
    ranked = identify(model, IdentificationBatch(inters, Mode.FUSION),
                      service_weights={"YouTube": 3.0, "Google": 1.0, "Facebook": 1.0})
    scores = dict(ranked.entries)
    assert scores[ALICE] == pytest.approx((3 * 0.8 + 0.6 + 0.7) / 5, abs=1e-12)


def test_identify_error_cases():
    model, inters = fusion_fixture()
    skype = (hand_interaction(9, "Skype", "192.168.1.10", 0.0, [100, 100]),)
    with pytest.raises(IdentificationError):
        identify(model, IdentificationBatch(skype, Mode.FUSION))
    with pytest.raises(ValueError):
        IdentificationBatch((), Mode.FUSION)
    mixed = (inters[0], hand_interaction(8, "YouTube", "192.168.1.99", 0.0, [100, 100]))
    with pytest.raises(ValueError):
        IdentificationBatch(mixed, Mode.FUSION)
    with pytest.raises(IdentificationError):
        identify(model, IdentificationBatch(inters, Mode.POOLED_BASELINE))


def test_permutation_invariance():
    model, inters = fusion_fixture()
    a = identify(model, IdentificationBatch(inters, Mode.FUSION))
    b = identify(model, IdentificationBatch(inters[::-1], Mode.FUSION))
    assert a == b
    c = identify(model, IdentificationBatch(inters, Mode.MAX_RULE))
    d = identify(model, IdentificationBatch(inters[::-1], Mode.MAX_RULE))
    assert c == d


def test_monotone_transform_preserves_ordering():
    import math
    model, inters = fusion_fixture()
    before = identify(model, IdentificationBatch(inters, Mode.FUSION))
    # push every constant score through the same increasing map
    shifted = IdentityModel(
        classifiers={
            key: constant_mlp(1 / (1 + math.exp(-(clf.b2 + 1.0))))
            for key, clf in model.classifiers.items()
        },
        enrolled_users=model.enrolled_users,
        policy=model.policy,
    )
    after = identify(shifted, IdentificationBatch(inters, Mode.FUSION))
    assert [u for u, _ in after.entries] == [u for u, _ in before.entries]


def test_pooled_baseline_scores_all_enrolled_users():
    d = two_user_dataset(n_per_pair=30)
    model, samples = enroll(d, EnrollmentPolicy(), FAST_CFG, include_pooled=True)
    batch = IdentificationBatch((samples[0].interaction,), Mode.POOLED_BASELINE)
    ranked = identify(model, batch)
    assert {u for u, _ in ranked.entries} == {ALICE, BOB}
    total = sum(s for _, s in ranked.entries)
    assert total == pytest.approx(1.0, abs=1e-9)


# ---------------------------------------------------------------------------
# rank_users / tpir
# ---------------------------------------------------------------------------


def test_rank_users_brute_force_sort():
    u = [UserId(f"u{i}", i) for i in range(1, 6)]
    scores = {u[0]: 0.2, u[1]: 0.9, u[2]: 0.5, u[3]: 0.9, u[4]: 0.1}
    ranked = rank_users(scores)
    expected = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0].numeric_id))
    assert list(ranked.entries) == expected
    assert [x.numeric_id for x, _ in ranked.entries] == [2, 4, 3, 1, 5]


def test_rank_of():
    u = [UserId(f"u{i}", i) for i in range(1, 4)]
    ranked = rank_users({u[0]: 0.3, u[1]: 0.8, u[2]: 0.5})
    assert ranked.rank_of(u[1]) == 1
    assert ranked.rank_of(u[2]) == 2
    assert ranked.rank_of(u[0]) == 3
    assert ranked.rank_of(UserId("ghost", 99)) is None


def ranked_with_truth_at(position, n=5):
    users = [UserId(f"u{i}", i) for i in range(1, n + 1)]
    scores = {u: 1.0 - 0.1 * i for i, u in enumerate(users)}
    return rank_users(scores), users[position - 1]


def test_tpir_hand_enumeration():
    results = [ranked_with_truth_at(p) for p in (1, 2, 4)]
    assert tpir_at_rank(results, 1) == 33.3
    assert tpir_at_rank(results, 3) == 66.7
    assert tpir_at_rank(results, 5) == 100.0


def test_tpir_truth_always_first():
    results = [ranked_with_truth_at(1) for _ in range(7)]
    for k in (1, 2, 3, 10):
        assert tpir_at_rank(results, k) == 100.0


def test_tpir_unenrolled_truth_is_miss():
    ranked, _ = ranked_with_truth_at(1)
    results = [(ranked, UserId("ghost", 99))]
    assert tpir_at_rank(results, 1) == 0.0
    assert tpir_at_rank(results, 50) == 0.0


def test_tpir_domain_errors():
    results = [ranked_with_truth_at(1)]
    with pytest.raises(DomainError):
        tpir_at_rank(results, 0)
    with pytest.raises(DomainError):
        tpir_at_rank([], 1)


@given(st.lists(st.integers(min_value=1, max_value=8), min_size=1, max_size=40))
def test_tpir_rank_monotonicity(positions):
    results = [ranked_with_truth_at(p, n=8) for p in positions]
    values = [tpir_at_rank(results, k) for k in range(1, 10)]
    for a, b in zip(values, values[1:]):
        assert a <= b
    assert values[-1] == 100.0


# ---------------------------------------------------------------------------
# group_batches
# ---------------------------------------------------------------------------


def test_group_batches_windows_and_majority():
    s = [
        LabeledSample(hand_interaction(1, "YouTube", "192.168.1.10", 10.0, [100, 100]), ALICE),
        LabeledSample(hand_interaction(2, "Google", "192.168.1.10", 30.0, [100, 100]), ALICE),
        LabeledSample(hand_interaction(3, "YouTube", "192.168.1.10", 59.0, [100, 100]), BOB),
        LabeledSample(hand_interaction(4, "YouTube", "192.168.1.10", 61.0, [100, 100]), BOB),
        LabeledSample(hand_interaction(5, "YouTube", "192.168.1.11", 10.0, [100, 100]), BOB),
    ]
    batches = group_batches(s, window_s=60.0)
    assert len(batches) == 3
    first = next(b for b in batches if b.src_ip == "192.168.1.10" and b.window_start == 0.0)
    assert len(first.interactions) == 3
    assert first.true_user == ALICE  # majority 2:1
    assert [i.interaction_id for i in first.interactions] == [1, 2, 3]


def test_group_batches_tie_goes_to_earliest():
    s = [
        LabeledSample(hand_interaction(1, "YouTube", "192.168.1.10", 10.0, [100, 100]), BOB),
        LabeledSample(hand_interaction(2, "YouTube", "192.168.1.10", 20.0, [100, 100]), ALICE),
    ]
    assert group_batches(s, window_s=60.0)[0].true_user == BOB


def test_group_batches_per_service():
    s = [
        LabeledSample(hand_interaction(1, "YouTube", "192.168.1.10", 10.0, [100, 100]), ALICE),
        LabeledSample(hand_interaction(2, "Google", "192.168.1.10", 20.0, [100, 100]), ALICE),
    ]
    batches = group_batches(s, window_s=60.0, per_service=True)
    assert len(batches) == 2
    assert {b.service for b in batches} == {"YouTube", "Google"}
    with pytest.raises(DomainError):
        group_batches(s, window_s=0)


# ---------------------------------------------------------------------------
# best_service_table
# ---------------------------------------------------------------------------


def best_service_fixture():
    table = {
        (ALICE, "Skype"): 0.9, (BOB, "Skype"): 0.2,
        (ALICE, "YouTube"): 0.4, (BOB, "YouTube"): 0.6,
        (ALICE, "Google"): 0.8, (BOB, "Google"): 0.3,
    }
    model = constant_model(table)
    samples = []
    iid = 1
    for service in ("Skype", "YouTube", "Google"):
        for k in range(4):
            samples.append(LabeledSample(
                hand_interaction(iid, service, "192.168.1.10", 100.0 * k, [100, 100]),
                ALICE))
            iid += 1
            samples.append(LabeledSample(
                hand_interaction(iid, service, "192.168.1.11", 100.0 * k + 5, [100, 100]),
                BOB))
            iid += 1
    return model, samples


def test_best_service_ordering_and_rates():
    model, samples = best_service_fixture()
    rows = {r.user: r for r in best_service_table(model, samples)}
    alice_row = rows[ALICE]
    # Alice wins Skype and Google always (constant scores), loses YouTube
    assert [s for s, _ in alice_row.entries] == ["Google", "Skype", "YouTube"]
    assert alice_row.entries[0][1] == 100.0
    assert alice_row.entries[1][1] == 100.0
    assert alice_row.entries[2][1] == 0.0
    bob_row = rows[BOB]
    assert bob_row.entries[0] == ("YouTube", 100.0)


def test_best_service_tie_breaks_lexicographically():
    model, samples = best_service_fixture()
    rows = {r.user: r for r in best_service_table(model, samples)}
    # Google and Skype both 100.0 for Alice; Google sorts first
    assert rows[ALICE].entries[0][0] == "Google"


def test_best_service_insufficient_data():
    model, samples = best_service_fixture()
    carol = UserId("carol", 3)
    model.classifiers[(carol, "Skype")] = constant_mlp(0.5)
    model = IdentityModel(
        classifiers=model.classifiers,
        enrolled_users=frozenset(u for (u, _) in model.classifiers),
        policy=model.policy,
    )
    rows = {r.user: r for r in best_service_table(model, samples)}
    assert rows[carol].insufficient_data


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def test_identity_model_round_trip(tmp_path):
    d = two_user_dataset(n_per_pair=30)
    model, samples = enroll(d, EnrollmentPolicy(), FAST_CFG, include_pooled=True)
    path = tmp_path / "identity.json"
    save_identity_model(path, model)
    loaded = load_identity_model(path)
    assert set(loaded.classifiers) == set(model.classifiers)
    assert loaded.enrolled_users == model.enrolled_users
    assert loaded.policy == model.policy
    assert loaded.pooled_users == model.pooled_users
    x = featurize(samples[0].interaction).as_array()
    for key in model.classifiers:
        assert forward(loaded.classifiers[key], x) == forward(model.classifiers[key], x)
    ranked_a = identify(model, IdentificationBatch((samples[0].interaction,), Mode.POOLED_BASELINE))
    ranked_b = identify(loaded, IdentificationBatch((samples[0].interaction,), Mode.POOLED_BASELINE))
    assert ranked_a == ranked_b


def test_identity_model_dict_schema_guard():
    d = two_user_dataset(n_per_pair=28, services=("YouTube",))
    model, _ = enroll(d, EnrollmentPolicy(), FAST_CFG, include_pooled=False)
    doc = identity_model_to_dict(model)
    doc["schema_version"] = 42
    with pytest.raises(ValueError):
        identity_model_from_dict(doc)
