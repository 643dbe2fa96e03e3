"""Per-round measurements over a swarm state.

Public helpers raise when the question makes no sense (no peers left alive,
no seeders to average over).  The streaming collector used by the simulator
is more forgiving so that edge-case runs still produce rows; it records 0.0
where the strict helpers would raise.

``records_from_log`` is the independent check on the streamed records: it
rebuilds the initial network from the config alone and replays the transfer
log, recomputing every round's record from scratch.
"""

from __future__ import annotations

from dataclasses import dataclass
from statistics import fmean, pvariance
from typing import Optional

ROLE_SEEDER = "SEEDER"
ROLE_LEECHER = "LEECHER"
ROLE_FREELOADER = "FREELOADER"


class MetricsError(Exception):
    """Base class for measurement failures."""


class EmptyNetwork(MetricsError):
    """No live peers to measure."""


class NoSeeders(MetricsError):
    """Seeder statistics requested but the network has no seeders."""


@dataclass(frozen=True)
class MetricRecord:
    """One round's worth of swarm health numbers."""

    round: int
    avg_pieces: float
    seeder_upload_mean: float
    seeder_upload_per_interval: float
    upload_variance: float
    completions: int


def avg_pieces(state) -> float:
    """Mean inventory size across peers still in the network."""
    alive = [p for p in state.peers.values() if not p.departed]
    if not alive:
        raise EmptyNetwork("no live peers")
    return fmean(len(p.inventory) for p in alive)


def upload_variance(state) -> float:
    """Population variance of cumulative uploads over every peer ever seen.

    Departed peers stay in the population: their upload burden counts.
    """
    counts = [p.uploads for p in state.peers.values()]
    if not counts:
        raise EmptyNetwork("no peers")
    return pvariance(counts)


def seeder_upload_mean(state) -> float:
    """Mean cumulative uploads over the original seeders."""
    seeders = [p for p in state.peers.values() if p.role == ROLE_SEEDER]
    if not seeders:
        raise NoSeeders("network has no seeders")
    return fmean(p.uploads for p in seeders)


def freeloader_completion(state) -> dict:
    """Completion round per freeloader; None where still incomplete."""
    return {p.node_id: p.completed_round
            for p in state.peers.values() if p.role == ROLE_FREELOADER}


def _compute(peers: dict, round_no: int, prev_mean: Optional[float]) -> MetricRecord:
    alive_sizes = [len(p.inventory) for p in peers.values() if not p.departed]
    avg = fmean(alive_sizes) if alive_sizes else 0.0
    variance = pvariance([p.uploads for p in peers.values()])
    seeder_counts = [p.uploads for p in peers.values() if p.role == ROLE_SEEDER]
    mean = fmean(seeder_counts) if seeder_counts else 0.0
    interval = mean if prev_mean is None else mean - prev_mean
    completions = sum(1 for p in peers.values()
                      if p.role != ROLE_SEEDER and p.completed_round == round_no)
    return MetricRecord(round=round_no, avg_pieces=avg, seeder_upload_mean=mean,
                        seeder_upload_per_interval=interval,
                        upload_variance=variance, completions=completions)


def collect(state) -> MetricRecord:
    """Streaming record for the round currently ending."""
    prev = state.records[-1].seeder_upload_mean if state.records else None
    return _compute(state.peers, state.round_no, prev)


class _ReplayPeer:
    __slots__ = ("node_id", "role", "inventory", "uploads", "departed",
                 "completed_round")

    def __init__(self, node_id, role, inventory):
        self.node_id = node_id
        self.role = role
        self.inventory = inventory
        self.uploads = 0
        self.departed = False
        self.completed_round = None


def records_from_log(state) -> list:
    """Recompute every per-round record from config plus transfer log alone."""
    from . import swarm

    fresh = swarm.build_network(state.config)
    n_pieces = state.config.n_pieces
    peers = {p.node_id: _ReplayPeer(p.node_id, p.role, set(p.inventory))
             for p in fresh.peers.values()}
    by_round: dict[int, list] = {}
    for event in state.transfer_log:
        by_round.setdefault(event.round, []).append(event)

    out, prev_mean = [], None
    for record in state.records:
        rnd = record.round
        for event in by_round.get(rnd, []):
            if event.event == "upload":
                peers[event.sender].uploads += 1
            elif event.event == "gain":
                peer = peers[event.receiver]
                peer.inventory.add(event.piece)
                if (peer.role != ROLE_SEEDER and peer.completed_round is None
                        and len(peer.inventory) == n_pieces):
                    peer.completed_round = rnd
            elif event.event == "depart":
                peers[event.sender].departed = True
        replayed = _compute(peers, rnd, prev_mean)
        prev_mean = replayed.seeder_upload_mean
        out.append(replayed)
    return out
