"""Timeline attribution: propagate confident identifications over a window.

A decision whose top candidate scores at or above the confidence threshold
anchors a span covering window_s seconds before and after it; interactions
of the same source IP starting inside a span take the span's user, letting
one strong identification label nearby weak or unscoreable traffic.

Span membership is closed at the start and open at the end.  A zero window
therefore covers nothing and attribution reduces to the identity transform,
which is exactly the W=0 baseline the evaluation table pins.
"""

from __future__ import annotations

from bisect import bisect_left, bisect_right
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

from netident.identity import (
    IdentificationBatch,
    IdentificationError,
    IdentityModel,
    Mode,
    RankedList,
    LabeledSample,
    identify,
    tpir_at_rank,
)
from netident.model import Interaction, UserId

DEFAULT_WINDOW_PRESETS = (0.0, 30.0, 60.0, 240.0)
#: The mid-size preset balances coverage and attribution errors best in the
#: evaluation sweep, so it is the default for single-window analysis.
DEFAULT_WINDOW_S = 30.0
DEFAULT_CONFIDENCE = 0.9


class ConflictRule(Enum):
    HIGHER_CONFIDENCE_WINS = "HIGHER_CONFIDENCE_WINS"


@dataclass(frozen=True)
class TimelineConfig:
    window_s: float = DEFAULT_WINDOW_S
    confidence_threshold: float = DEFAULT_CONFIDENCE
    conflict_rule: ConflictRule = ConflictRule.HIGHER_CONFIDENCE_WINS

    def __post_init__(self):
        if self.window_s < 0:
            raise ValueError("window_s must be >= 0")
        if not 0.0 < self.confidence_threshold < 1.0:
            raise ValueError("confidence_threshold must be in (0, 1)")


@dataclass(frozen=True)
class AttributedSpan:
    src_ip: str
    user: UserId
    start: float
    end: float
    anchor_confidence: float
    anchor_id: int

    @property
    def anchor_time(self) -> float:
        return (self.start + self.end) / 2.0


def build_spans(
    decisions: Sequence[tuple[Interaction, RankedList]], cfg: TimelineConfig
) -> list[AttributedSpan]:
    """One span per decision whose top-1 score reaches the threshold.

    The span covers [t - W, t + W] around the decision's interaction start;
    output is sorted by span start (ties by anchor_id).
    """
    spans = []
    for inter, ranked in decisions:
        top = ranked.top1()
        if top is None:
            continue
        user, score = top
        if score >= cfg.confidence_threshold:
            t = inter.start
            spans.append(
                AttributedSpan(
                    src_ip=inter.src_ip,
                    user=user,
                    start=t - cfg.window_s,
                    end=t + cfg.window_s,
                    anchor_confidence=score,
                    anchor_id=inter.interaction_id,
                )
            )
    spans.sort(key=lambda s: (s.start, s.anchor_id))
    return spans


def covering_spans(
    interactions: Sequence[Interaction], spans: Sequence[AttributedSpan]
) -> dict:
    """Best covering span per interaction_id; uncovered ids are absent.

    The winner among same-IP spans containing the interaction start is the
    highest-confidence one (ties: earlier anchor time, then lower anchor_id).
    Spans must be sorted by start, as build_spans emits them.
    """
    out: dict[int, AttributedSpan] = {}
    if not spans:
        return out
    starts = [s.start for s in spans]
    max_width = max(s.end - s.start for s in spans)
    for inter in interactions:
        t = inter.start
        # candidate spans: start <= t and start >= t - max_width
        lo = bisect_left(starts, t - max_width)
        hi = bisect_right(starts, t)
        best = None
        best_key = None
        for s in spans[lo:hi]:
            if s.src_ip != inter.src_ip:
                continue
            if not (s.start <= t < s.end):
                continue
            key = (-s.anchor_confidence, s.anchor_time, s.anchor_id)
            if best_key is None or key < best_key:
                best, best_key = s, key
        if best is not None:
            out[inter.interaction_id] = best
    return out


def attribute(
    interactions: Sequence[Interaction],
    spans: Sequence[AttributedSpan],
    base: dict,
) -> dict:
    """Final label per interaction_id after span overrides.

    An interaction starting inside at least one same-IP span takes the user
    of its best covering span; all other interactions keep their base label.
    """
    out = dict(base)
    for interaction_id, span in covering_spans(interactions, spans).items():
        out[interaction_id] = span.user
    return out


# ---------------------------------------------------------------------------
# Evaluation table
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimelineRow:
    user: UserId
    rates: dict  # window_s -> rank-1 percentage


@dataclass(frozen=True)
class TimelineTable:
    windows: tuple
    rows: tuple  # of TimelineRow
    average: dict  # window_s -> mean percentage over users
    confidence_threshold: float


def interaction_decisions(
    model: IdentityModel, samples: Sequence[LabeledSample]
) -> list[tuple[Interaction, RankedList, UserId]]:
    """Per-interaction fusion decisions (single-interaction batches);
    unscoreable interactions get an empty ranked list."""
    out = []
    for s in samples:
        try:
            ranked = identify(
                model, IdentificationBatch((s.interaction,), Mode.FUSION)
            )
        except IdentificationError:
            ranked = RankedList(())
        out.append((s.interaction, ranked, s.user))
    return out


def per_window_labels(
    decisions: Sequence[tuple[Interaction, RankedList, UserId]],
    windows: Sequence[float],
    confidence_threshold: float,
) -> tuple[dict, dict]:
    """Base labels (top-1 per interaction, None if unscored) and the final
    label map for each window after span attribution."""
    base: dict[int, Optional[UserId]] = {}
    for inter, ranked, _ in decisions:
        top = ranked.top1()
        base[inter.interaction_id] = top[0] if top else None
    interactions = [inter for inter, _, _ in decisions]
    pairs = [(inter, ranked) for inter, ranked, _ in decisions]
    labels = {}
    for w in windows:
        cfg = TimelineConfig(window_s=w, confidence_threshold=confidence_threshold)
        labels[w] = attribute(interactions, build_spans(pairs, cfg), base)
    return base, labels


def rank1_rates(
    labels: dict, samples: Sequence[LabeledSample]
) -> tuple[dict, float]:
    """Per-user percentage of interactions whose final label is correct.

    Every test interaction of a user counts in the denominator; an unlabeled
    interaction is a miss, so attribution coverage is part of the score.
    """
    totals: dict[UserId, int] = {}
    hits: dict[UserId, int] = {}
    for s in samples:
        totals[s.user] = totals.get(s.user, 0) + 1
        if labels.get(s.interaction.interaction_id) == s.user:
            hits[s.user] = hits.get(s.user, 0) + 1
    rates = {
        u: round(100.0 * hits.get(u, 0) / totals[u], 1) for u in totals
    }
    avg = round(sum(rates.values()) / len(rates), 1) if rates else 0.0
    return rates, avg


def timeline_eval(
    model: IdentityModel,
    samples: Sequence[LabeledSample],
    windows: Sequence[float] = DEFAULT_WINDOW_PRESETS,
    confidence_threshold: float = DEFAULT_CONFIDENCE,
) -> TimelineTable:
    """Rank-1 correctness per user and window after span attribution.

    The W=0 column is definitionally the raw per-interaction fusion
    baseline: zero-width spans cover nothing, so labels equal base labels.
    """
    decisions = interaction_decisions(model, samples)
    _, labels_by_window = per_window_labels(decisions, windows, confidence_threshold)

    per_window: dict[float, dict] = {}
    averages: dict[float, float] = {}
    users: list[UserId] = []
    for w in windows:
        rates, avg = rank1_rates(labels_by_window[w], samples)
        per_window[w] = rates
        averages[w] = avg
        users = sorted(rates, key=lambda u: u.numeric_id)

    rows = tuple(
        TimelineRow(u, {w: per_window[w][u] for w in windows}) for u in users
    )
    return TimelineTable(
        windows=tuple(windows),
        rows=rows,
        average=averages,
        confidence_threshold=confidence_threshold,
    )
