"""Enrollment, per-interaction scoring and ranked identification.

Enrollment builds one 2-class scorer per (user, service) pair that has
enough interactions, training each against the other users' traffic on the
same service, and optionally a single pooled multiclass baseline over all
users.  Identification aggregates per-interaction scores over an evaluation
batch by one of three rules: the max rule, score-mean fusion, or the pooled
baseline's mean probability.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from netident.interactions import FEATURE_DIM, featurize
from netident.mlp import (
    Mlp,
    MlpConfig,
    PooledMlp,
    forward,
    mlp_from_dict,
    mlp_to_dict,
    pooled_forward,
    pooled_from_dict,
    pooled_to_dict,
    train,
    train_pooled,
)
from netident.model import (
    Dataset,
    DomainError,
    Interaction,
    UserId,
    write_json_atomic,
)

IDENTITY_SCHEMA_VERSION = 1

#: Enrollment requires at least this many interactions per (user, service).
MIN_INTERACTIONS_DEFAULT = 28

#: Rows per user fed to the pooled baseline are capped (seeded subsample) so
#: its stacked Jacobian stays tractable.
POOLED_ROWS_PER_USER = 120


class SplitKind(Enum):
    CHRONOLOGICAL = "CHRONOLOGICAL"
    SEEDED_RANDOM = "SEEDED_RANDOM"


class Mode(Enum):
    MAX_RULE = "MAX_RULE"
    FUSION = "FUSION"
    POOLED_BASELINE = "POOLED_BASELINE"


class EnrollmentError(Exception):
    pass


class IdentificationError(Exception):
    pass


@dataclass(frozen=True)
class EnrollmentPolicy:
    min_interactions_per_pair: int = MIN_INTERACTIONS_DEFAULT
    split: SplitKind = SplitKind.CHRONOLOGICAL
    seed: int = 0
    #: train fraction; fixed even split
    ratio: float = field(default=0.5, init=False)

    def __post_init__(self):
        if self.min_interactions_per_pair < 1:
            raise ValueError("min_interactions_per_pair must be >= 1")


def derive_seed(base_seed: int, *parts) -> int:
    """Stable per-(user, service) seed: first 8 bytes of a SHA-256 digest."""
    text = ":".join([str(base_seed)] + [str(p) for p in parts])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big")


@dataclass(frozen=True)
class LabeledSample:
    interaction: Interaction
    user: UserId


@dataclass
class IdentityModel:
    classifiers: dict[tuple[UserId, str], Mlp]
    enrolled_users: frozenset[UserId]
    policy: EnrollmentPolicy
    pooled: Optional[PooledMlp] = None
    pooled_users: tuple[UserId, ...] = ()

    def users_for_service(self, service: str) -> list[UserId]:
        return sorted(
            (u for (u, s) in self.classifiers if s == service),
            key=lambda u: u.numeric_id,
        )

    def services(self) -> list[str]:
        return sorted({s for (_, s) in self.classifiers})


@dataclass(frozen=True)
class ScoreResult:
    scores: dict  # UserId -> float
    service_enrolled: bool


@dataclass(frozen=True)
class RankedList:
    """Candidates in descending score order; ties by ascending numeric_id."""

    entries: tuple  # of (UserId, float)

    def top1(self):
        return self.entries[0] if self.entries else None

    def rank_of(self, user: UserId) -> Optional[int]:
        for pos, (u, _) in enumerate(self.entries, start=1):
            if u == user:
                return pos
        return None


def rank_users(scores: dict) -> RankedList:
    ordered = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0].numeric_id))
    return RankedList(tuple(ordered))


@dataclass(frozen=True)
class IdentificationBatch:
    interactions: tuple
    mode: Mode

    def __post_init__(self):
        object.__setattr__(self, "interactions", tuple(self.interactions))
        if not self.interactions:
            raise ValueError("batch must be non-empty")
        ips = {i.src_ip for i in self.interactions}
        if len(ips) != 1:
            raise ValueError(f"batch mixes source addresses: {sorted(ips)}")


# ---------------------------------------------------------------------------
# Enrollment
# ---------------------------------------------------------------------------


def _split_pair(
    interactions: list[Interaction], policy: EnrollmentPolicy, user: UserId, service: str
) -> tuple[list[Interaction], list[Interaction]]:
    """Even train/test split of one (user, service) group.

    CHRONOLOGICAL puts the earlier half in training (odd counts give the
    extra item to training); SEEDED_RANDOM shuffles first with a seed
    derived per pair so group order never leaks across pairs.
    """
    ordered = sorted(interactions, key=lambda i: (i.start, i.interaction_id))
    if policy.split is SplitKind.SEEDED_RANDOM:
        rng = np.random.default_rng(
            derive_seed(policy.seed, user.numeric_id, service, "split")
        )
        perm = rng.permutation(len(ordered))
        ordered = [ordered[k] for k in perm]
    cut = (len(ordered) + 1) // 2
    return ordered[:cut], ordered[cut:]


def enroll(
    dataset: Dataset,
    policy: EnrollmentPolicy,
    mlp_cfg: MlpConfig,
    include_pooled: bool = True,
) -> tuple[IdentityModel, list[LabeledSample]]:
    """Build the classifier bank and return it with the held-out test set.

    Each (user, service) pair with at least min_interactions_per_pair
    interactions is split evenly; a 2-class scorer is trained with that
    pair's training half as positives and the training halves of every other
    enrolled user on the same service as negatives.  A pair whose service no
    other user enrolled has no impostor data and is skipped.  The returned
    test set is the union of the test halves of all pairs that kept a
    classifier.
    """
    if mlp_cfg.input_dim != FEATURE_DIM:
        raise ValueError(f"mlp input_dim must be {FEATURE_DIM}")

    groups: dict[tuple[UserId, str], list[Interaction]] = {}
    for inter in dataset.interactions:
        user = dataset.ground_truth.user_at(inter.src_ip, inter.start)
        if user is None:
            continue
        groups.setdefault((user, inter.service), []).append(inter)

    splits: dict[tuple[UserId, str], tuple[list[Interaction], list[Interaction]]] = {}
    for (user, service), inters in groups.items():
        if len(inters) >= policy.min_interactions_per_pair:
            splits[(user, service)] = _split_pair(inters, policy, user, service)

    feats: dict[int, np.ndarray] = {}

    def fmat(inters: Sequence[Interaction]) -> np.ndarray:
        rows = []
        for i in inters:
            a = feats.get(i.interaction_id)
            if a is None:
                a = featurize(i).as_array()
                feats[i.interaction_id] = a
            rows.append(a)
        return np.asarray(rows)

    by_service: dict[str, list[UserId]] = {}
    for (user, service) in splits:
        by_service.setdefault(service, []).append(user)

    classifiers: dict[tuple[UserId, str], Mlp] = {}
    for service, users in sorted(by_service.items()):
        if len(users) < 2:
            continue  # no impostor data on this service
        train_mats = {u: fmat(splits[(u, service)][0]) for u in users}
        for user in sorted(users, key=lambda u: u.numeric_id):
            negatives = np.vstack(
                [train_mats[u] for u in users if u != user]
            )
            cfg = replace(
                mlp_cfg, seed=derive_seed(mlp_cfg.seed, user.numeric_id, service)
            )
            classifiers[(user, service)] = train(cfg, train_mats[user], negatives)

    enrolled = frozenset(u for (u, _) in classifiers)
    if len(enrolled) < 2:
        raise EnrollmentError(
            f"identification needs >= 2 enrolled users, got {len(enrolled)}"
        )

    test_samples = [
        LabeledSample(inter, user)
        for (user, service), (_, test_half) in sorted(
            splits.items(), key=lambda kv: (kv[0][0].numeric_id, kv[0][1])
        )
        if (user, service) in classifiers
        for inter in test_half
    ]

    pooled = None
    pooled_users: tuple[UserId, ...] = ()
    if include_pooled:
        pooled_users = tuple(sorted(enrolled, key=lambda u: u.numeric_id))
        classes = []
        for user in pooled_users:
            rows = np.vstack(
                [
                    fmat(splits[(user, s)][0])
                    for (u, s) in sorted(
                        classifiers, key=lambda k: (k[0].numeric_id, k[1])
                    )
                    if u == user
                ]
            )
            if len(rows) > POOLED_ROWS_PER_USER:
                rng = np.random.default_rng(
                    derive_seed(mlp_cfg.seed, user.numeric_id, "pooled")
                )
                idx = np.sort(
                    rng.choice(len(rows), size=POOLED_ROWS_PER_USER, replace=False)
                )
                rows = rows[idx]
            classes.append(rows)
        pcfg = replace(mlp_cfg, seed=derive_seed(mlp_cfg.seed, "pooled"))
        pooled = train_pooled(pcfg, classes).model

    model = IdentityModel(
        classifiers=classifiers,
        enrolled_users=enrolled,
        policy=policy,
        pooled=pooled,
        pooled_users=pooled_users,
    )
    return model, test_samples


# ---------------------------------------------------------------------------
# Scoring and identification
# ---------------------------------------------------------------------------


def score_interaction(model: IdentityModel, inter: Interaction) -> ScoreResult:
    """Per-user scores from every classifier of the interaction's service."""
    x = featurize(inter).as_array()
    scores = {}
    enrolled = False
    for (user, service), clf in model.classifiers.items():
        if service == inter.service:
            enrolled = True
            scores[user] = forward(clf, x)
    return ScoreResult(scores, enrolled)


def identify(model: IdentityModel, batch: IdentificationBatch,
             service_weights: Optional[dict] = None) -> RankedList:
    """Aggregate per-interaction scores into one ranked candidate list.

    MAX_RULE takes each user's maximum score over the batch; FUSION takes
    the arithmetic mean over the interactions that user could score (or a
    service-weighted mean when service_weights is given); POOLED_BASELINE
    averages the pooled model's per-user probabilities.  Users with no
    scoreable interaction are omitted from the list.
    """
    if batch.mode is Mode.POOLED_BASELINE:
        if model.pooled is None:
            raise IdentificationError("no pooled model was trained")
        probs = np.zeros(len(model.pooled_users))
        for inter in batch.interactions:
            probs += pooled_forward(model.pooled, featurize(inter).as_array())
        probs /= len(batch.interactions)
        return rank_users(dict(zip(model.pooled_users, probs)))

    per_user: dict = {}
    weights: dict = {}
    for inter in batch.interactions:
        result = score_interaction(model, inter)
        w = 1.0 if service_weights is None else service_weights.get(inter.service, 1.0)
        for user, s in result.scores.items():
            if batch.mode is Mode.MAX_RULE:
                per_user[user] = max(per_user.get(user, 0.0), s)
            else:
                per_user[user] = per_user.get(user, 0.0) + w * s
                weights[user] = weights.get(user, 0.0) + w
    if not per_user:
        raise IdentificationError("batch has no scoreable interaction")
    if batch.mode is Mode.FUSION:
        per_user = {u: v / weights[u] for u, v in per_user.items()}
    return rank_users(per_user)


def tpir_at_rank(results: Sequence[tuple], k: int) -> float:
    """Percentage of results whose true user is in the top k candidates.

    A truth absent from the list (not enrolled, or never scoreable) counts
    as a miss.  Rounded to one decimal for table display.
    """
    if k < 1:
        raise DomainError("rank must be >= 1")
    if not results:
        raise DomainError("results must be non-empty")
    hits = 0
    for ranked, truth in results:
        r = ranked.rank_of(truth)
        if r is not None and r <= k:
            hits += 1
    return round(100.0 * hits / len(results), 1)


# ---------------------------------------------------------------------------
# Evaluation batching
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalBatch:
    """Interactions from one source IP inside one evaluation window, with
    the ground-truth user (majority owner; ties go to the earliest)."""

    interactions: tuple
    true_user: UserId
    src_ip: str
    window_start: float
    service: Optional[str] = None


def group_batches(
    samples: Sequence[LabeledSample],
    window_s: float = 60.0,
    per_service: bool = False,
) -> list[EvalBatch]:
    """Group labeled test interactions into per-(src_ip, window) batches.

    per_service additionally separates batches by service, the grouping the
    per-service tables evaluate on.
    """
    if window_s <= 0:
        raise DomainError("window_s must be > 0")
    buckets: dict[tuple, list[LabeledSample]] = {}
    for s in samples:
        widx = int(s.interaction.start // window_s)
        key = (s.interaction.src_ip, widx, s.interaction.service if per_service else None)
        buckets.setdefault(key, []).append(s)

    out = []
    for (ip, widx, service), members in sorted(
        buckets.items(), key=lambda kv: (kv[0][1], kv[0][0], kv[0][2] or "")
    ):
        members.sort(key=lambda s: (s.interaction.start, s.interaction.interaction_id))
        counts: dict[UserId, int] = {}
        for m in members:
            counts[m.user] = counts.get(m.user, 0) + 1
        best = max(counts.values())
        majority = [u for u, c in counts.items() if c == best]
        if len(majority) == 1:
            truth = majority[0]
        else:
            truth = next(m.user for m in members if m.user in majority)
        out.append(
            EvalBatch(
                interactions=tuple(m.interaction for m in members),
                true_user=truth,
                src_ip=ip,
                window_start=widx * window_s,
                service=service,
            )
        )
    return out


# ---------------------------------------------------------------------------
# Best-service table
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BestServiceRow:
    user: UserId
    entries: tuple  # of (service, rank1_pct), best first, up to three
    insufficient_data: bool = False


def best_service_table(
    model: IdentityModel,
    samples: Sequence[LabeledSample],
    window_s: float = 60.0,
) -> list[BestServiceRow]:
    """Top-3 services per user by per-service rank-1 rate.

    Rates come from fusion over per-(src_ip, service, window) batches; ties
    order lexicographically by service name.
    """
    per_service = group_batches(samples, window_s, per_service=True)
    results: dict[tuple[UserId, str], list[tuple[RankedList, UserId]]] = {}
    for b in per_service:
        try:
            ranked = identify(model, IdentificationBatch(b.interactions, Mode.FUSION))
        except IdentificationError:
            continue
        results.setdefault((b.true_user, b.service), []).append((ranked, b.true_user))

    rows = []
    for user in sorted(model.enrolled_users, key=lambda u: u.numeric_id):
        rates = [
            (service, tpir_at_rank(rs, 1))
            for (u, service), rs in results.items()
            if u == user
        ]
        if not rates:
            rows.append(BestServiceRow(user, (), insufficient_data=True))
            continue
        rates.sort(key=lambda e: (-e[1], e[0]))
        rows.append(BestServiceRow(user, tuple(rates[:3])))
    return rows


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def identity_model_to_dict(model: IdentityModel) -> dict:
    users = sorted(
        {u for (u, _) in model.classifiers} | set(model.pooled_users),
        key=lambda u: u.numeric_id,
    )
    return {
        "schema_version": IDENTITY_SCHEMA_VERSION,
        "policy": {
            "min_interactions_per_pair": model.policy.min_interactions_per_pair,
            "split": model.policy.split.value,
            "seed": model.policy.seed,
        },
        "users": [{"label": u.label, "numeric_id": u.numeric_id} for u in users],
        "classifiers": [
            {
                "numeric_id": user.numeric_id,
                "service": service,
                "model": mlp_to_dict(clf),
            }
            for (user, service), clf in sorted(
                model.classifiers.items(),
                key=lambda kv: (kv[0][0].numeric_id, kv[0][1]),
            )
        ],
        "pooled": None if model.pooled is None else pooled_to_dict(model.pooled),
        "pooled_users": [u.numeric_id for u in model.pooled_users],
    }


def identity_model_from_dict(doc: dict) -> IdentityModel:
    if doc.get("schema_version") != IDENTITY_SCHEMA_VERSION:
        raise ValueError(
            f"unsupported identity schema_version {doc.get('schema_version')!r}"
        )
    by_id = {u["numeric_id"]: UserId(u["label"], u["numeric_id"]) for u in doc["users"]}
    classifiers = {
        (by_id[c["numeric_id"]], c["service"]): mlp_from_dict(c["model"])
        for c in doc["classifiers"]
    }
    policy = EnrollmentPolicy(
        min_interactions_per_pair=doc["policy"]["min_interactions_per_pair"],
        split=SplitKind(doc["policy"]["split"]),
        seed=doc["policy"]["seed"],
    )
    return IdentityModel(
        classifiers=classifiers,
        enrolled_users=frozenset(u for (u, _) in classifiers),
        policy=policy,
        pooled=None if doc["pooled"] is None else pooled_from_dict(doc["pooled"]),
        pooled_users=tuple(by_id[n] for n in doc["pooled_users"]),
    )


def save_identity_model(path: Union[str, Path], model: IdentityModel) -> None:
    write_json_atomic(Path(path), identity_model_to_dict(model))


def load_identity_model(path: Union[str, Path]) -> IdentityModel:
    with open(path, "r", encoding="utf-8") as f:
        return identity_model_from_dict(json.load(f))
