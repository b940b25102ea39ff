"""Shared builders for hand-made interactions, datasets and models."""

import math

import numpy as np

from netident.identity import EnrollmentPolicy, IdentityModel
from netident.mlp import Mlp
from netident.model import (
    Dataset,
    Direction,
    GroundTruth,
    GroundTruthSpan,
    Interaction,
    PacketRecord,
    Protocol,
    UserId,
)

ALICE = UserId("alice", 1)
BOB = UserId("bob", 2)

SERVICE_REMOTES = {
    "YouTube": "10.101.0.5",
    "Facebook": "10.102.0.5",
    "Google": "10.103.0.5",
    "Skype": "10.109.0.5",
}


def hand_interaction(iid, service, local_ip, start, lengths, gap=0.05,
                     remote=None, rport=443, flags=0x18, down_every=0):
    """Interaction built directly from a length list; every down_every-th
    packet (if nonzero) flows downstream."""
    remote = remote or SERVICE_REMOTES.get(service, "10.101.0.9")
    packets = []
    for k, length in enumerate(lengths):
        ts = start + k * gap
        down = down_every and (k % down_every == 0) and k > 0
        if down:
            packets.append(PacketRecord(ts, remote, local_ip, rport, 50000,
                                        int(length), Protocol.TCP, flags,
                                        Direction.DOWNSTREAM))
        else:
            packets.append(PacketRecord(ts, local_ip, remote, 50000, rport,
                                        int(length), Protocol.TCP, flags,
                                        Direction.UPSTREAM))
    return Interaction(iid, service, local_ip, packets[0].timestamp,
                       packets[-1].timestamp, tuple(packets))


def two_user_dataset(n_per_pair=40, services=("YouTube", "Google"), seed=0,
                     mean_a=100.0, mean_b=900.0):
    """Two users with well-separated packet-length profiles on each service."""
    rng = np.random.default_rng(seed)
    interactions = []
    iid = 1
    for s_idx, service in enumerate(services):
        for k in range(n_per_pair):
            t = 100.0 + 20.0 * k + 7.0 * s_idx
            lengths = np.clip(rng.normal(mean_a, 10.0, 6), 40, 1500)
            interactions.append(
                hand_interaction(iid, service, "192.168.1.10", t, lengths))
            iid += 1
            lengths = np.clip(rng.normal(mean_b, 30.0, 6), 40, 1500)
            interactions.append(
                hand_interaction(iid, service, "192.168.1.11", t + 5.0, lengths))
            iid += 1
    gt = GroundTruth(
        [ALICE, BOB],
        [
            GroundTruthSpan("192.168.1.10", 0.0, None, ALICE),
            GroundTruthSpan("192.168.1.11", 0.0, None, BOB),
        ],
    )
    records = [p for i in interactions for p in i.packets]
    return Dataset(records=records, interactions=interactions,
                   ground_truth=gt, n_users=2)


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def constant_mlp(score: float, dim=10) -> Mlp:
    """Network whose output is the given score for every input."""
    return Mlp(
        W1=np.zeros((10, dim)), b1=np.zeros(10), w2=np.zeros(10),
        b2=logit(score), norm_mean=np.zeros(dim), norm_std=np.ones(dim),
    )


def constant_model(score_table: dict) -> IdentityModel:
    """IdentityModel from {(UserId, service): score} with constant scorers."""
    classifiers = {
        key: constant_mlp(score) for key, score in score_table.items()
    }
    return IdentityModel(
        classifiers=classifiers,
        enrolled_users=frozenset(u for (u, _) in classifiers),
        policy=EnrollmentPolicy(),
    )
