"""Round-based swarm simulation.

Peers sit on a fixed random regular graph and exchange pieces with their
neighbors, one synchronous round at a time.  Three network strategies can be
simulated:

* ``proposed``    -- all transfers run through the escrowed exchange
  sessions of :mod:`fairswarm.protocol`.  Two downloaders with something to
  trade run the two-party flow; requests to a full node (an original seeder
  or a downloader that finished and stayed) go into that server's pairing
  pool, where compatible requesters are forced into the seeder-mediated
  three-party flow and loners fall back to a direct serve after a wait.
  Every ``unchoke_period`` rounds each unfinished downloader also gifts one
  piece to a random needy neighbor, which is how empty-handed newcomers
  bootstrap.
* ``willingness`` -- no escrow: a request is accepted with fixed
  probability (seeders always accept, freeloaders never do).
* ``tft``         -- tit-for-tat: a request is accepted only from one of the
  target's recent top reciprocators or from its rotating optimistic slot.

Each round runs the same sub-phases: request generation, request matching,
session stepping (bounded by per-peer upload capacity), optimistic unchoke,
churn, metrics.  All randomness flows from one seeded generator, so a given
config replays byte-identically.
"""

from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import networkx as nx

from . import metrics, protocol
from .metrics import ROLE_FREELOADER, ROLE_LEECHER, ROLE_SEEDER

STRATEGY_PROPOSED = "proposed"
STRATEGY_WILLINGNESS = "willingness"
STRATEGY_TFT = "tft"
STRATEGIES = (STRATEGY_PROPOSED, STRATEGY_WILLINGNESS, STRATEGY_TFT)

CHURN_STATIC = "static"
CHURN_LEAVE_ON_COMPLETE = "leave_on_complete"

STOP_ALL_COMPLETE = "all_complete"
STOP_FREELOADERS_COMPLETE = "freeloaders_complete"

# Peer policies.  Leechers carry their arm's policy; full nodes that serve
# (original seeders, finished downloaders that stay) run "serve".
POLICY_SERVE = "serve"
POLICY_FREELOAD = "freeload"


class SimulationError(Exception):
    """Base class for simulator failures."""


class InvalidConfig(SimulationError):
    """Scenario parameters are inconsistent."""


class NoUsefulPiece(SimulationError):
    """Counterparty holds nothing the peer lacks."""


class NonConvergence(SimulationError):
    """Round cap hit before the stop condition."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


@dataclass
class ScenarioConfig:
    """Everything a run needs; flat so it maps 1:1 onto scenario files."""

    name: str = "adhoc"
    n_nodes: int = 100
    n_seeders: int = 10
    n_freeloaders: int = 0
    n_pieces: int = 25
    strategy: str = STRATEGY_PROPOSED
    willingness: float = 1.0
    degree: int = 8
    capacity: int = 1
    piece_size: int = 32
    unchoke_period: int = 12
    tft_slots: int = 4
    tft_rotation: int = 3
    pair_wait: int = 8
    target_rule: str = "fullest"
    explore: float = 0.0
    churn: str = CHURN_STATIC
    stop: str = STOP_ALL_COMPLETE
    stay_after_complete: bool = False
    seed: int = 1
    max_rounds: Optional[int] = None
    keep_transcripts: bool = False


@dataclass
class PeerState:
    node_id: int
    role: str
    policy: str
    willingness: float
    inventory: set
    neighbors: tuple = ()
    uploads: int = 0
    downloads: int = 0
    departed: bool = False
    completed_round: Optional[int] = None
    busy_session: Optional[str] = None
    pool_server: Optional[int] = None
    optimistic: Optional[int] = None
    recv_window: deque = field(default_factory=lambda: deque(maxlen=3))
    recv_now: dict = field(default_factory=dict)

    @property
    def alive(self) -> bool:
        return not self.departed


@dataclass(frozen=True)
class Request:
    """One upload request as seen by the target."""

    requester: PeerState
    piece: int


@dataclass(frozen=True)
class TransferEvent:
    """Transfer-log entry; the metric oracle replays these."""

    round: int
    event: str          # "upload" | "gain" | "depart"
    via: str            # "l2l" | "l2s_seed" | "l2s_relay" | "gift" | "direct" | "plain" | ""
    sender: int
    receiver: int
    piece: int


@dataclass
class _PoolEntry:
    node: int
    joined_round: int       # wait = now - joined; reset to ration refusers


@dataclass
class _SessionRun:
    seq: int
    session: protocol.ExchangeSession
    server: Optional[int]            # seeder-mediated runs only
    participants: tuple


class SimState:
    """Mutable world state; advanced in place by :func:`tick`."""

    def __init__(self, config: ScenarioConfig):
        self.config = config
        self.rng = random.Random(config.seed)
        self.round_no = 0
        self.peers: dict[int, PeerState] = {}
        self.pools: dict[int, list] = {}
        self.sessions: dict[str, _SessionRun] = {}
        self.session_seq = 0
        self.transfer_log: list[TransferEvent] = []
        self.records: list = []
        self.transcript_archive: list = []
        self._direct_queue: list = []
        self._finished_runs: list = []

    def alive_peers(self):
        return [p for p in self.peers.values() if p.alive]

    def peer(self, node_id: int) -> PeerState:
        return self.peers[node_id]


def _validate(config: ScenarioConfig) -> None:
    c = config
    if c.n_nodes < 1 or c.n_pieces < 1:
        raise InvalidConfig("need at least one node and one piece")
    if c.n_seeders < 0 or c.n_freeloaders < 0:
        raise InvalidConfig("role counts cannot be negative")
    if c.n_seeders + c.n_freeloaders > c.n_nodes:
        raise InvalidConfig("more seeders and freeloaders than nodes")
    if c.strategy not in STRATEGIES:
        raise InvalidConfig(f"unknown strategy {c.strategy!r}")
    if not 0.0 <= c.willingness <= 1.0:
        raise InvalidConfig("willingness must be within [0, 1]")
    if c.churn not in (CHURN_STATIC, CHURN_LEAVE_ON_COMPLETE):
        raise InvalidConfig(f"unknown churn mode {c.churn!r}")
    if c.stop not in (STOP_ALL_COMPLETE, STOP_FREELOADERS_COMPLETE):
        raise InvalidConfig(f"unknown stop condition {c.stop!r}")
    if c.degree < 1 or c.capacity < 1 or c.piece_size < 1:
        raise InvalidConfig("degree, capacity and piece_size must be positive")
    if c.pair_wait < 0 or c.unchoke_period < 0:
        raise InvalidConfig("waits and periods cannot be negative")
    if c.target_rule not in ("fullest", "uniform"):
        raise InvalidConfig(f"unknown target rule {c.target_rule!r}")
    if not 0.0 <= c.explore <= 1.0:
        raise InvalidConfig("explore must be within [0, 1]")


def _spread(candidates: list, count: int) -> list:
    """Pick ``count`` ids evenly spread across ``candidates``."""
    if count == 0:
        return []
    span = len(candidates) / count
    return [candidates[int((i + 0.5) * span)] for i in range(count)]


def _build_graph(config: ScenarioConfig):
    n = config.n_nodes
    if n == 1:
        return {0: ()}
    deg = min(config.degree, n - 1)
    if deg >= n - 1:
        return {i: tuple(j for j in range(n) if j != i) for i in range(n)}
    if (n * deg) % 2:
        deg -= 1
    # Regular graphs of degree >= 3 are connected with overwhelming
    # probability; retry with a shifted seed on the rare miss.
    for attempt in range(50):
        graph = nx.random_regular_graph(deg, n, seed=config.seed * 1000 + attempt)
        if nx.is_connected(graph):
            return {i: tuple(sorted(graph.neighbors(i))) for i in range(n)}
    raise InvalidConfig(f"could not build a connected {deg}-regular graph on {n} nodes")


def build_network(config: ScenarioConfig) -> SimState:
    """Validate the scenario and lay out peers, roles, and topology.

    Seeders and freeloaders are spread evenly across the id space; seeders
    start with a full inventory, everyone else with an empty one.
    """
    _validate(config)
    state = SimState(config)
    adjacency = _build_graph(config)
    all_ids = list(range(config.n_nodes))
    seeder_ids = set(_spread(all_ids, config.n_seeders))
    rest = [i for i in all_ids if i not in seeder_ids]
    freeloader_ids = set(_spread(rest, config.n_freeloaders))
    full = set(range(config.n_pieces))
    for node_id in all_ids:
        if node_id in seeder_ids:
            role, policy = ROLE_SEEDER, POLICY_SERVE
            inventory = set(full)
        elif node_id in freeloader_ids:
            role, policy = ROLE_FREELOADER, POLICY_FREELOAD
            inventory = set()
        else:
            role, policy = ROLE_LEECHER, config.strategy
            inventory = set()
        state.peers[node_id] = PeerState(
            node_id=node_id, role=role, policy=policy,
            willingness=config.willingness, inventory=inventory,
            neighbors=adjacency[node_id],
            recv_window=deque(maxlen=max(config.tft_rotation, 1)),
        )
    return state


# ---------------------------------------------------------------------------
# Piece selection and per-request decisions
# ---------------------------------------------------------------------------

def select_piece(peer: PeerState, holder_inventory: set, rng: random.Random) -> int:
    """Uniform choice among pieces the holder has and the peer lacks."""
    useful = sorted(holder_inventory - peer.inventory)
    if not useful:
        raise NoUsefulPiece(f"nothing useful for node {peer.node_id}")
    return rng.choice(useful)




def _tft_top(peer: PeerState, slots: int) -> list:
    totals: dict[int, int] = {}
    for per_round in peer.recv_window:
        for source, count in per_round.items():
            totals[source] = totals.get(source, 0) + count
    ranked = sorted(totals, key=lambda n: (-totals[n], n))
    return ranked[:slots]


def strategy_decide(peer: PeerState, request: Request, rng: random.Random,
                    tft_slots: int = 4) -> bool:
    """Would ``peer`` upload to this requester?  Capacity is the caller's job."""
    if peer.policy == POLICY_SERVE:
        return True
    if peer.policy == POLICY_FREELOAD:
        return False
    if peer.policy == STRATEGY_WILLINGNESS:
        return rng.random() < peer.willingness
    if peer.policy == STRATEGY_TFT:
        if request.requester.node_id == peer.optimistic:
            return True
        return request.requester.node_id in _tft_top(peer, tft_slots)
    if peer.policy == STRATEGY_PROPOSED:
        # Escrow trade only works when both sides stand to gain.
        if peer.completed_round is not None:
            return False
        return bool(request.requester.inventory - peer.inventory)
    raise InvalidConfig(f"peer {peer.node_id} has unknown policy {peer.policy!r}")


# ---------------------------------------------------------------------------
# Transfer bookkeeping
# ---------------------------------------------------------------------------

def _log(state: SimState, event: str, via: str, sender: int, receiver: int, piece: int):
    state.transfer_log.append(
        TransferEvent(state.round_no, event, via, sender, receiver, piece))


def _count_upload(state: SimState, sender: PeerState, receiver: int, piece: int, via: str):
    sender.uploads += 1
    _log(state, "upload", via, sender.node_id, receiver, piece)


def _grant_piece(state: SimState, receiver: PeerState, piece: int, via: str,
                 sender: int) -> bool:
    """Add a piece to an inventory; returns False on duplicates."""
    if receiver.departed or piece in receiver.inventory:
        return False
    receiver.inventory.add(piece)
    receiver.downloads += 1
    receiver.recv_now[sender] = receiver.recv_now.get(sender, 0) + 1
    _log(state, "gain", via, sender, receiver.node_id, piece)
    if (receiver.role != ROLE_SEEDER and receiver.completed_round is None
            and len(receiver.inventory) == state.config.n_pieces):
        receiver.completed_round = state.round_no
    return True


def _plain_transfer(state: SimState, sender: PeerState, receiver: PeerState,
                    piece: int, via: str):
    _count_upload(state, sender, receiver.node_id, piece, via)
    _grant_piece(state, receiver, piece, via, sender.node_id)


# ---------------------------------------------------------------------------
# Phase 1: request generation
# ---------------------------------------------------------------------------

def _wants_something(requester: PeerState, target: PeerState) -> bool:
    if len(target.inventory) == 0:
        return False
    return not target.inventory <= requester.inventory


def _request_targets(state: SimState, peer: PeerState) -> list:
    """Neighbors this peer would bother asking, given its arm and role.

    Escrowed trading changes what a rational requester prefers: a neighbor
    with mutual gain means an immediate one-for-one exchange, while a server
    means joining its pairing pool.  So willing peers under the escrow arm
    ask trade partners first and fall back to servers; under the plain arms
    there is no such asymmetry.
    """
    proposed = state.config.strategy == STRATEGY_PROPOSED
    out, trades = [], []
    for nid in peer.neighbors:
        target = state.peers[nid]
        if not target.alive or not _wants_something(peer, target):
            continue
        if proposed:
            # Freeloaders are shut out of trades, so they (and everyone
            # else) only bother servers or trade-capable peers.
            if target.policy == POLICY_FREELOAD:
                continue
            if peer.policy == POLICY_FREELOAD and target.policy != POLICY_SERVE:
                continue
            if (peer.policy == STRATEGY_PROPOSED
                    and target.policy == STRATEGY_PROPOSED
                    and target.busy_session is None
                    and peer.inventory - target.inventory):
                trades.append(nid)
        out.append(nid)
    return trades or out


def _waiting_partners(state: SimState, server_id: int) -> int:
    count = 0
    for entry in state.pools.get(server_id, []):
        waiter = state.peers[entry.node]
        if (waiter.alive and waiter.completed_round is None
                and waiter.busy_session is None
                and waiter.policy == STRATEGY_PROPOSED):
            count += 1
    return count


def _generate_requests(state: SimState) -> list:
    requests = []
    for peer in state.peers.values():
        if (not peer.alive or peer.role == ROLE_SEEDER
                or peer.completed_round is not None
                or peer.busy_session is not None or peer.pool_server is not None):
            continue
        targets = _request_targets(state, peer)
        if not targets:
            continue
        if (state.config.target_rule == "fullest"
                and state.rng.random() >= state.config.explore):
            # Ask the neighbor with the most to offer; ties broken toward a
            # server where a lone trade partner already waits, then random.
            counts = {t: len(state.peers[t].inventory - peer.inventory)
                      for t in targets}
            best = max(counts.values())
            tied = sorted(t for t in targets if counts[t] == best)
            waiting = {t: _waiting_partners(state, t) for t in tied}
            positive = [w for w in waiting.values() if w > 0]
            if positive:
                thinnest = min(positive)
                tied = [t for t in tied if waiting[t] == thinnest]
            targets = tied
        requests.append((peer.node_id, state.rng.choice(targets)))
    return requests


# ---------------------------------------------------------------------------
# Phase 2: matching
# ---------------------------------------------------------------------------

def _next_session_id(state: SimState) -> str:
    sid = f"s{state.session_seq:06d}"
    state.session_seq += 1
    return sid


def _start_run(state: SimState, proto: str, parties, wants, server=None) -> _SessionRun:
    sid = _next_session_id(state)
    session = protocol.start_session(
        proto, parties, wants, state.rng, session_id=sid,
        piece_size=state.config.piece_size)
    run = _SessionRun(state.session_seq, session, server,
                      tuple(session.ledger.parties))
    state.sessions[sid] = run
    for pid in run.participants:
        peer = state.peers[pid]
        if peer.policy != POLICY_SERVE:
            peer.busy_session = sid
    return run

def _missing(state: SimState, peer: PeerState) -> set:
    return set(range(state.config.n_pieces)) - peer.inventory


def _willing_count(state: SimState) -> int:
    """Live incomplete downloaders that would upload for pieces."""
    return sum(1 for p in state.peers.values()
               if p.alive and p.completed_round is None
               and p.policy == STRATEGY_PROPOSED)


def match_requests(state: SimState, server: PeerState, entries: list):
    """Split one server pool into trade pairings and direct-serve fallbacks.

    Requesters that share at least two missing pieces are paired for a
    seeder-mediated exchange (freeloaders never pair: they will not upload).
    A willing requester left unpaired for ``pair_wait`` rounds qualifies for
    direct service, and stays qualified each round until paired or complete.
    The fallback exists for peers with nobody available to force into a
    trade, so a refusing requester only reaches it while no willing
    incomplete downloader is left in the swarm at all; the server holds its
    spare capacity for forceable exchanges until then.
    """
    ordered = sorted(entries, key=lambda e: (e.joined_round, e.node))
    missing = {e.node: _missing(state, state.peers[e.node]) for e in ordered}
    paired, pairs = set(), []
    for i, first in enumerate(ordered):
        if first.node in paired or state.peers[first.node].policy == POLICY_FREELOAD:
            continue
        for second in ordered[i + 1:]:
            if second.node in paired or state.peers[second.node].policy == POLICY_FREELOAD:
                continue
            if len(missing[first.node] & missing[second.node]) >= 2:
                pairs.append((first, second))
                paired.update((first.node, second.node))
                break
    willing = _willing_count(state)
    fallbacks = []
    for entry in ordered:
        if entry.node in paired:
            continue
        refuser = state.peers[entry.node].policy == POLICY_FREELOAD
        if refuser and willing > 0:
            entry.joined_round = state.round_no
            continue
        # The wait exists to let a trade partner arrive.  Serve outright
        # when none ever can: a single missing piece cannot make a
        # two-piece exchange, and a lone willing downloader has nobody
        # left to be paired with.
        unpairable = not refuser and (len(missing[entry.node]) < 2
                                      or willing < 2)
        if (unpairable
                or state.round_no - entry.joined_round >= state.config.pair_wait):
            fallbacks.append(entry)
    return pairs, fallbacks


def _prune_pool(state: SimState, server_id: int) -> list:
    kept = []
    for entry in state.pools.get(server_id, []):
        peer = state.peers[entry.node]
        still_waiting = (peer.alive and peer.completed_round is None
                         and peer.busy_session is None
                         and peer.pool_server == server_id)
        if still_waiting:
            kept.append(entry)
        elif peer.pool_server == server_id:
            peer.pool_server = None
    state.pools[server_id] = kept
    return kept


def _match_phase_proposed(state: SimState, requests: list):
    # New requests either join a server pool or attempt a direct trade.
    trade_attempts = []
    for requester_id, target_id in requests:
        requester, target = state.peers[requester_id], state.peers[target_id]
        if target.policy == POLICY_SERVE:
            requester.pool_server = target_id
            state.pools.setdefault(target_id, []).append(
                _PoolEntry(requester_id, state.round_no))
        else:
            trade_attempts.append((requester_id, target_id))

    state.rng.shuffle(trade_attempts)
    for requester_id, target_id in trade_attempts:
        requester, target = state.peers[requester_id], state.peers[target_id]
        if (not target.alive or target.busy_session is not None
                or requester.busy_session is not None):
            continue
        try:
            piece = select_piece(requester, target.inventory, state.rng)
        except NoUsefulPiece:
            continue
        if not strategy_decide(target, Request(requester, piece), state.rng):
            continue
        counter = select_piece(target, requester.inventory, state.rng)
        _start_run(state, protocol.L2L, (target_id, requester_id),
                   {requester_id: {piece}, target_id: {counter}})

    # Server pools: pair what can be paired, queue the rest for fallback.
    for server_id in sorted(state.pools):
        entries = _prune_pool(state, server_id)
        if not entries:
            continue
        server = state.peers[server_id]
        pairs, fallbacks = match_requests(state, server, entries)
        for first, second in pairs:
            wants = {first.node: _missing(state, state.peers[first.node]),
                     second.node: _missing(state, state.peers[second.node])}
            _start_run(state, protocol.L2S, (server_id, first.node, second.node),
                       wants, server=server_id)
            state.peers[first.node].pool_server = None
            state.peers[second.node].pool_server = None
        state.pools[server_id] = [e for e in state.pools[server_id]
                                  if state.peers[e.node].pool_server == server_id]
        for entry in fallbacks:
            state._direct_queue.append((server_id, entry))


def _match_phase_plain(state: SimState, requests: list, budget: dict):
    pending = []
    for requester_id, target_id in requests:
        requester, target = state.peers[requester_id], state.peers[target_id]
        try:
            piece = select_piece(requester, target.inventory, state.rng)
        except NoUsefulPiece:
            continue
        pending.append((requester, target, piece))
    state.rng.shuffle(pending)
    for requester, target, piece in pending:
        if not target.alive or budget.get(target.node_id, 0) <= 0:
            continue
        if strategy_decide(target, Request(requester, piece), state.rng,
                           tft_slots=state.config.tft_slots):
            budget[target.node_id] -= 1
            _plain_transfer(state, target, requester, piece, "plain")


# ---------------------------------------------------------------------------
# Phase 3: session stepping and direct-serve fallbacks
# ---------------------------------------------------------------------------

_GAIN_VIA = {protocol.L2L: "l2l"}


def _finish_run(state: SimState, run: _SessionRun, aborted: bool):
    sess = run.session
    if aborted and sess.ledger.aborted_at is None:
        sess.ledger.aborted_at = sess.phase
    if state.config.keep_transcripts:
        state.transcript_archive.append((sess.session_id, sess.protocol,
                                         protocol.export_transcript(sess)))
    for pid in run.participants:
        peer = state.peers[pid]
        if peer.busy_session == sess.session_id:
            peer.busy_session = None
    del state.sessions[sess.session_id]
    if not aborted:
        state._finished_runs.append(run)


def _upload_via(run: _SessionRun, sender: int) -> str:
    if run.session.protocol == protocol.L2L:
        return "l2l"
    return "l2s_seed" if sender == run.server else "l2s_relay"


def _advance_one(state: SimState, run: _SessionRun, budget: dict) -> None:
    sess = run.session
    while not sess.complete:
        msg = sess.script[sess.phase_index].message
        sender, receiver = state.peers[msg.sender], state.peers[msg.receiver]
        if not sender.alive or not receiver.alive:
            _finish_run(state, run, aborted=True)
            return
        if msg.kind == protocol.DATA:
            if budget.get(msg.sender, 0) <= 0:
                return              # resume next round, capacity exhausted
            budget[msg.sender] -= 1
            _count_upload(state, sender, msg.receiver, msg.piece_refs[0],
                          _upload_via(run, msg.sender))
        protocol.step(sess, msg)
        for party, piece, source in sess.drain_new_gains():
            via = "l2l" if sess.protocol == protocol.L2L else (
                "l2s_seed" if source == run.server else "l2s_relay")
            _grant_piece(state, state.peers[party], piece, via, source)
    _finish_run(state, run, aborted=False)


def _advance_sessions(state: SimState, budget: dict):
    for sid in sorted(state.sessions):
        if sid in state.sessions:
            _advance_one(state, state.sessions[sid], budget)
    _restart_sticky(state)


def _restart_sticky(state: SimState):
    """Re-engage counterparties of a finished session while gain remains.

    A productive pairing keeps trading instead of rejoining the request
    lottery: two-party partners re-trade while each still holds something
    the other lacks; a mediated trio re-pairs while the two downloaders
    still share two missing pieces.
    """
    finished, state._finished_runs = state._finished_runs, []
    for run in finished:
        peers = [state.peers[pid] for pid in run.participants]
        if any(not p.alive or p.busy_session is not None for p in peers):
            continue
        if run.session.protocol == protocol.L2L:
            responder, initiator = peers
            if (responder.completed_round is None
                    and initiator.completed_round is None
                    and responder.inventory - initiator.inventory
                    and initiator.inventory - responder.inventory):
                piece = select_piece(initiator, responder.inventory, state.rng)
                counter = select_piece(responder, initiator.inventory, state.rng)
                _start_run(state, protocol.L2L,
                           (responder.node_id, initiator.node_id),
                           {initiator.node_id: {piece},
                            responder.node_id: {counter}})
        else:
            server, first, second = peers
            if (server.policy == POLICY_SERVE
                    and first.completed_round is None
                    and second.completed_round is None
                    and len(_missing(state, first) & _missing(state, second)) >= 2):
                wants = {first.node_id: _missing(state, first),
                         second.node_id: _missing(state, second)}
                _start_run(state, protocol.L2S,
                           (server.node_id, first.node_id, second.node_id),
                           wants, server=server.node_id)


def _serve_direct(state: SimState, budget: dict):
    # Longest wait first; budget may run out, in which case the entry stays
    # pooled and keeps aging.
    queue = sorted(state._direct_queue,
                   key=lambda se: (se[1].joined_round, se[1].node, se[0]))
    state._direct_queue = []
    for server_id, entry in queue:
        server, peer = state.peers[server_id], state.peers[entry.node]
        if (budget.get(server_id, 0) <= 0 or not peer.alive
                or peer.completed_round is not None
                or peer.pool_server != server_id):
            continue
        try:
            piece = select_piece(peer, server.inventory, state.rng)
        except NoUsefulPiece:
            continue
        budget[server_id] -= 1
        _plain_transfer(state, server, peer, piece, "direct")
        if peer.completed_round is not None:
            peer.pool_server = None
            state.pools[server_id] = [e for e in state.pools[server_id]
                                      if e.node != entry.node]
        elif peer.policy == POLICY_FREELOAD:
            # Charity to a refuser is rationed: its wait restarts per piece.
            # A cooperative waiter keeps its place and is served every round,
            # since only the lack of a partner keeps it out of an exchange.
            entry.joined_round = state.round_no


# ---------------------------------------------------------------------------
# Phase 4: optimistic unchoke
# ---------------------------------------------------------------------------

def optimistic_unchoke(state: SimState, giver: PeerState):
    """Gift one piece to a uniformly random needy neighbor; None if nobody is."""
    candidates = []
    for nid in giver.neighbors:
        target = state.peers[nid]
        if target.alive and giver.inventory - target.inventory:
            candidates.append(nid)
    if not candidates:
        return None
    target = state.peers[state.rng.choice(sorted(candidates))]
    piece = select_piece(target, giver.inventory, state.rng)
    _plain_transfer(state, giver, target, piece, "gift")
    return target.node_id, piece


def _unchoke_phase(state: SimState, budget: dict):
    for peer in state.peers.values():
        if (peer.alive and peer.policy == STRATEGY_PROPOSED
                and peer.completed_round is None and peer.inventory
                and budget.get(peer.node_id, 0) > 0):
            if optimistic_unchoke(state, peer) is not None:
                budget[peer.node_id] -= 1


# ---------------------------------------------------------------------------
# Phases 5-6: churn and metrics
# ---------------------------------------------------------------------------

def _rewire_after_departure(state: SimState, gone: PeerState):
    """Surviving neighbors of a departed peer pick up a replacement link."""
    for nid in gone.neighbors:
        survivor = state.peers[nid]
        if not survivor.alive:
            continue
        kept = tuple(n for n in survivor.neighbors if n != gone.node_id)
        candidates = sorted(p.node_id for p in state.peers.values()
                            if p.alive and p.node_id != nid
                            and p.node_id not in kept)
        if candidates:
            fresh = state.rng.choice(candidates)
            survivor.neighbors = tuple(sorted(kept + (fresh,)))
            other = state.peers[fresh]
            if nid not in other.neighbors:
                other.neighbors = tuple(sorted(other.neighbors + (nid,)))
        else:
            survivor.neighbors = kept


def _churn_phase(state: SimState):
    cfg = state.config
    for peer in state.peers.values():
        if (peer.role == ROLE_SEEDER or peer.departed
                or peer.completed_round != state.round_no):
            continue
        leaves = (cfg.churn == CHURN_LEAVE_ON_COMPLETE
                  and not cfg.stay_after_complete)
        if leaves:
            peer.departed = True
            peer.pool_server = None
            _log(state, "depart", "", peer.node_id, peer.node_id, -1)
            _rewire_after_departure(state, peer)
        elif peer.role == ROLE_LEECHER and peer.policy in (STRATEGY_PROPOSED,
                                                           STRATEGY_TFT):
            peer.policy = POLICY_SERVE     # finished and stays: acts as a seeder


def _rotate_tft(state: SimState):
    cfg = state.config
    if cfg.strategy != STRATEGY_TFT or state.round_no % max(cfg.tft_rotation, 1):
        return
    for peer in state.peers.values():
        if peer.alive and peer.policy == STRATEGY_TFT:
            alive_neighbors = sorted(n for n in peer.neighbors
                                     if state.peers[n].alive)
            peer.optimistic = (state.rng.choice(alive_neighbors)
                               if alive_neighbors else None)


def _push_tft_windows(state: SimState):
    if state.config.strategy != STRATEGY_TFT:
        return
    for peer in state.peers.values():
        peer.recv_window.append(peer.recv_now)
        peer.recv_now = {}


def tick(state: SimState):
    """Advance the simulation one round and append that round's metrics."""
    cfg = state.config
    budget = {p.node_id: cfg.capacity for p in state.peers.values() if p.alive}
    _rotate_tft(state)
    requests = _generate_requests(state)
    if cfg.strategy == STRATEGY_PROPOSED:
        _match_phase_proposed(state, requests)
        _advance_sessions(state, budget)
        _serve_direct(state, budget)
    else:
        _match_phase_plain(state, requests, budget)
    if (cfg.strategy == STRATEGY_PROPOSED and cfg.unchoke_period > 0
            and state.round_no % cfg.unchoke_period == 0):
        _unchoke_phase(state, budget)
    _churn_phase(state)
    _push_tft_windows(state)
    record = metrics.collect(state)
    state.records.append(record)
    state.round_no += 1
    return record


def _default_round_cap(cfg: ScenarioConfig) -> int:
    return 10 * cfg.n_pieces * cfg.n_nodes // max(cfg.n_seeders, 1)


def _stop_reached(state: SimState, stop: str) -> bool:
    if stop == STOP_ALL_COMPLETE:
        return all(p.completed_round is not None
                   for p in state.peers.values() if p.role != ROLE_SEEDER)
    return all(p.completed_round is not None
               for p in state.peers.values() if p.role == ROLE_FREELOADER)


def run_until(state: SimState, stop: Optional[str] = None,
              max_rounds: Optional[int] = None) -> SimState:
    """Tick until the stop condition holds.

    Raises NonConvergence (with the partial state attached) if the round cap
    is hit first; the cap defaults to ``10 * pieces * nodes / seeders``.
    """
    stop = stop or state.config.stop
    cap = max_rounds or state.config.max_rounds or _default_round_cap(state.config)
    while not _stop_reached(state, stop):
        if state.round_no >= cap:
            raise NonConvergence(
                f"{state.config.name}: no {stop} after {state.round_no} rounds",
                state=state)
        tick(state)
    return state
