"""Message-level fair-exchange sessions.

Three exchange flows are implemented, all built on the idea that encrypted
data travels first and the key that unlocks it travels only after the
counterparty has met its own upload obligation:

* ``L2L``   -- two downloaders trade one piece each.  Each side encrypts its
  piece under a fresh lock key, ships the envelope, and releases the unlock
  key only after the peer's envelope has arrived.  Six messages.
* ``L2S``   -- a seeder serves two downloaders at once.  The seeder uploads
  each piece exactly once (encrypted), the downloaders relay the envelopes
  to each other, and the seeder releases its unlock key to a downloader only
  after the *other* downloader acknowledges the relay.  Ten messages.
* ``SECURE`` -- a hardened two-party variant: each side announces a public
  key, data travels under fresh symmetric keys, and those symmetric keys are
  exchanged wrapped under the counterparty's public key, so no decryption
  key ever crosses the wire in the clear.  Seven messages.

A session is a scripted state machine: :func:`step` delivers one message,
advances exactly one phase, and returns the protocol-mandated response.
Every delivered message lands in the transcript, and a per-party ledger
tracks uploaded bytes, decryptable bytes, and released keys, which is what
the incentive analysis runs on.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

from . import crypto

L2L = "L2L"
L2S = "L2S"
SECURE = "SECURE"
PROTOCOLS = (L2L, L2S, SECURE)

REQ = "REQ"
DATA = "DATA"
EXC = "EXC"
ACK = "ACK"

PHASE_COMPLETE = "complete"
PHASE_ABORTED = "aborted"

PartyId = Union[str, int]
PieceId = Union[str, int]

DEFAULT_PIECE_SIZE = 64


class ProtocolError(Exception):
    """Base class for session failures."""


class BadRoleAssignment(ProtocolError):
    """Party list does not fit the protocol's roles."""


class EmptyWants(ProtocolError):
    """Want sets are empty or too thin to run the exchange."""


class OutOfOrderMessage(ProtocolError):
    """Delivered message is not the one the current phase expects."""


class UnknownSession(ProtocolError):
    """Message carries a session id this session does not own."""


class UnreachablePhase(ProtocolError):
    """Abort point names a phase the protocol never reaches."""


def piece_payload(piece: PieceId, size: int = DEFAULT_PIECE_SIZE) -> bytes:
    """Deterministic synthetic content for a piece id."""
    if size < 1:
        raise ValueError("piece size must be positive")
    seed = hashlib.sha256(repr(piece).encode()).digest()
    out = bytearray()
    counter = 0
    while len(out) < size:
        out += hashlib.sha256(seed + counter.to_bytes(4, "big")).digest()
        counter += 1
    return bytes(out[:size])


@dataclass(frozen=True)
class ProtocolMessage:
    session_id: str
    kind: str
    sender: PartyId
    receiver: PartyId
    piece_refs: tuple = ()
    envelope: Optional[crypto.CipherEnvelope] = None
    key_material: Optional[crypto.KeyMaterial] = None

    def payload_len(self) -> int:
        if self.envelope is not None:
            return len(self.envelope.payload)
        if self.key_material is not None:
            return len(self.key_material.data)
        return 0


@dataclass
class PartyLedger:
    """Running totals for one participant."""

    bytes_uploaded: int = 0
    bytes_decryptable: int = 0
    data_sent: int = 0
    keys_released: list = field(default_factory=list)
    pieces_decrypted: set = field(default_factory=set)
    # piece -> party the envelope came from, for provenance accounting
    gained_from: dict = field(default_factory=dict)


@dataclass
class ExchangeLedger:
    parties: dict
    aborted_at: Optional[str] = None

    def __getitem__(self, party: PartyId) -> PartyLedger:
        return self.parties[party]


@dataclass(frozen=True)
class _Step:
    label: str
    message: ProtocolMessage
    # key id surrendered by the sender when this message is delivered
    releases: Optional[str] = None


class ExchangeSession:
    """One scripted exchange between two or three parties.

    The full message script is laid down at start time (all key pairs are
    generated fresh per session from the supplied rng), and delivery order
    is enforced one message at a time by :func:`step`.
    """

    def __init__(self, protocol: str, session_id: str, script: list[_Step],
                 parties: Iterable[PartyId], rsa_pairs: dict):
        self.protocol = protocol
        self.session_id = session_id
        self.script = script
        self.phase_index = 0
        self.transcript: list[ProtocolMessage] = []
        self.ledger = ExchangeLedger({p: PartyLedger() for p in parties})
        self._rsa_pairs = rsa_pairs          # party -> KeyPair, for unwrapping
        self._keyrings: dict = {p: {} for p in parties}
        self._inbox: dict = {p: {} for p in parties}   # piece -> (env, sender)
        self._fresh_gains: list = []

    # -- phase bookkeeping ---------------------------------------------------

    @property
    def phase(self) -> str:
        if self.ledger.aborted_at is not None:
            return PHASE_ABORTED
        if self.phase_index >= len(self.script):
            return PHASE_COMPLETE
        return "await_" + self.script[self.phase_index].label

    @property
    def complete(self) -> bool:
        return self.phase == PHASE_COMPLETE

    def expected_sender(self) -> Optional[PartyId]:
        if self.phase_index < len(self.script):
            return self.script[self.phase_index].message.sender
        return None

    def label_index(self, label: str) -> int:
        for i, entry in enumerate(self.script):
            if entry.label == label:
                return i
        raise UnreachablePhase(f"{self.protocol} has no phase {label!r}")

    # -- effects --------------------------------------------------------------

    def _try_decrypt(self, party: PartyId) -> None:
        ledger = self.ledger[party]
        for piece, (env, sender) in self._inbox[party].items():
            if piece in ledger.pieces_decrypted:
                continue
            key = self._keyrings[party].get(env.key_id)
            if key is None:
                continue
            try:
                plaintext = crypto.decrypt(env, key)
            except crypto.CryptoError:
                continue        # unusable envelope; grants nothing
            ledger.pieces_decrypted.add(piece)
            ledger.bytes_decryptable += len(plaintext)
            ledger.gained_from[piece] = sender
            self._fresh_gains.append((party, piece, sender))

    def _apply(self, msg: ProtocolMessage, releases: Optional[str]) -> None:
        if msg.kind == DATA:
            sender = self.ledger[msg.sender]
            sender.bytes_uploaded += msg.envelope.plaintext_len
            sender.data_sent += 1
            for piece in msg.piece_refs:
                self._inbox[msg.receiver][piece] = (msg.envelope, msg.sender)
            self._try_decrypt(msg.receiver)
        elif msg.kind == EXC:
            material = msg.key_material
            if material is None and msg.envelope is not None:
                # Wrapped key: only the receiver's private key opens it.
                own = self._rsa_pairs.get(msg.receiver)
                if own is not None:
                    try:
                        material = crypto.unwrap_key(msg.envelope, own.dec_key)
                    except crypto.CryptoError:
                        material = None
            if material is not None and material.kind != crypto.KIND_ENC:
                self._keyrings[msg.receiver][material.key_id] = material
                self._try_decrypt(msg.receiver)
            if releases is not None:
                self.ledger[msg.sender].keys_released.append(releases)
        # REQ and ACK carry no payload effects.

    def drain_new_gains(self) -> list:
        """Pieces that became decryptable since the last drain."""
        gains, self._fresh_gains = self._fresh_gains, []
        return gains


def _require_roles(protocol: str, parties, count: int):
    parties = list(parties)
    if len(parties) != count or len(set(parties)) != count:
        raise BadRoleAssignment(f"{protocol} needs {count} distinct parties, got {parties}")
    return parties


def _single_want(wants: dict, party: PartyId) -> PieceId:
    have = wants.get(party) or ()
    if not have:
        raise EmptyWants(f"party {party!r} wants nothing")
    return sorted(have, key=repr)[0]


def _msg(sid, kind, sender, receiver, pieces=(), env=None, key=None):
    return ProtocolMessage(sid, kind, sender, receiver, tuple(pieces), env, key)


def start_session(protocol: str, parties, wants: dict, rng: random.Random,
                  session_id: Optional[str] = None,
                  piece_size: int = DEFAULT_PIECE_SIZE) -> ExchangeSession:
    """Create a session in its initial phase with fresh per-session keys.

    ``parties`` is role-ordered.  L2L and SECURE take ``(responder,
    initiator)`` where the initiator sends the opening request for a piece
    the responder holds.  L2S takes ``(seeder, leecher_a, leecher_b)`` where
    both leechers must want at least two common pieces the seeder holds.
    ``wants`` maps each party to the piece ids it is after.
    """
    if protocol not in PROTOCOLS:
        raise BadRoleAssignment(f"unknown protocol {protocol!r}")
    sid = session_id if session_id is not None else f"x{rng.getrandbits(48):012x}"

    if protocol == L2L:
        responder, initiator = _require_roles(protocol, parties, 2)
        want_by_initiator = _single_want(wants, initiator)   # held by responder
        want_by_responder = _single_want(wants, responder)   # held by initiator
        if set(wants[initiator]) & set(wants[responder]):
            raise BadRoleAssignment("both parties want the same piece; nothing to trade")
        lock_r = crypto.keygen(crypto.TWO_KEY, rng)
        lock_i = crypto.keygen(crypto.TWO_KEY, rng)
        env_r = crypto.encrypt(piece_payload(want_by_initiator, piece_size), lock_r.enc_key)
        env_i = crypto.encrypt(piece_payload(want_by_responder, piece_size), lock_i.enc_key)
        script = [
            _Step("m1", _msg(sid, REQ, initiator, responder, [want_by_initiator])),
            _Step("m2", _msg(sid, REQ, responder, initiator, [want_by_responder])),
            _Step("m3", _msg(sid, DATA, responder, initiator, [want_by_initiator], env=env_r)),
            _Step("m4", _msg(sid, DATA, initiator, responder, [want_by_responder], env=env_i)),
            _Step("m5", _msg(sid, EXC, responder, initiator, key=lock_r.dec_key),
                  releases=lock_r.key_id),
            _Step("m6", _msg(sid, EXC, initiator, responder, key=lock_i.dec_key),
                  releases=lock_i.key_id),
        ]
        return ExchangeSession(protocol, sid, script, (responder, initiator), {})

    if protocol == L2S:
        seeder, first, second = _require_roles(protocol, parties, 3)
        common = set(wants.get(first) or ()) & set(wants.get(second) or ())
        if len(common) < 2:
            raise EmptyWants("seeder-mediated exchange needs two common wanted pieces")
        piece_a, piece_b = sorted(common, key=repr)[:2]
        lock = crypto.keygen(crypto.TWO_KEY, rng)
        env_a = crypto.encrypt(piece_payload(piece_a, piece_size), lock.enc_key)
        env_b = crypto.encrypt(piece_payload(piece_b, piece_size), lock.enc_key)
        script = [
            _Step("m1", _msg(sid, REQ, first, seeder, [piece_a, piece_b])),
            _Step("m2", _msg(sid, REQ, second, seeder, [piece_a, piece_b])),
            _Step("m3", _msg(sid, DATA, seeder, first, [piece_a], env=env_a)),
            _Step("m4", _msg(sid, DATA, seeder, second, [piece_b], env=env_b)),
            _Step("m5", _msg(sid, DATA, first, second, [piece_a], env=env_a)),
            _Step("m6", _msg(sid, DATA, second, first, [piece_b], env=env_b)),
            _Step("m7", _msg(sid, ACK, second, seeder, [piece_a])),
            _Step("m8", _msg(sid, EXC, seeder, first, key=lock.dec_key),
                  releases=lock.key_id),
            _Step("m9", _msg(sid, ACK, first, seeder, [piece_b])),
            _Step("m10", _msg(sid, EXC, seeder, second, key=lock.dec_key),
                  releases=lock.key_id),
        ]
        return ExchangeSession(protocol, sid, script, (seeder, first, second), {})

    # SECURE
    responder, initiator = _require_roles(protocol, parties, 2)
    want_by_initiator = _single_want(wants, initiator)
    want_by_responder = _single_want(wants, responder)
    if set(wants[initiator]) & set(wants[responder]):
        raise BadRoleAssignment("both parties want the same piece; nothing to trade")
    rsa_r = crypto.keygen(crypto.ASYMMETRIC, rng)
    sym_r = crypto.keygen(crypto.SYMMETRIC, rng)
    rsa_i = crypto.keygen(crypto.ASYMMETRIC, rng)
    sym_i = crypto.keygen(crypto.SYMMETRIC, rng)
    env_r = crypto.encrypt(piece_payload(want_by_initiator, piece_size), sym_r.enc_key)
    env_i = crypto.encrypt(piece_payload(want_by_responder, piece_size), sym_i.enc_key)
    wrapped_r = crypto.wrap_key(sym_r.dec_key, rsa_i.enc_key)
    wrapped_i = crypto.wrap_key(sym_i.dec_key, rsa_r.enc_key)
    script = [
        _Step("m1", _msg(sid, REQ, initiator, responder, [want_by_initiator])),
        _Step("m2", _msg(sid, EXC, responder, initiator, key=rsa_r.enc_key)),
        _Step("m3", _msg(sid, EXC, initiator, responder, key=rsa_i.enc_key)),
        _Step("m4", _msg(sid, DATA, responder, initiator, [want_by_initiator], env=env_r)),
        _Step("m5", _msg(sid, DATA, initiator, responder, [want_by_responder], env=env_i)),
        _Step("m6", _msg(sid, EXC, responder, initiator, env=wrapped_r),
              releases=sym_r.key_id),
        _Step("m7", _msg(sid, EXC, initiator, responder, env=wrapped_i),
              releases=sym_i.key_id),
    ]
    return ExchangeSession(protocol, sid, script,
                           (responder, initiator),
                           {responder: rsa_r, initiator: rsa_i})


def initial_message(session: ExchangeSession) -> ProtocolMessage:
    """The opening request that kicks the session off."""
    if session.phase_index != 0:
        raise OutOfOrderMessage("session already started")
    return session.script[0].message


def step(session: ExchangeSession, msg: ProtocolMessage):
    """Deliver one message; returns ``(session, outgoing)``.

    The delivered message must be exactly what the current phase awaits,
    otherwise OutOfOrderMessage is raised and the session is left untouched.
    ``outgoing`` holds the next scripted message (the mandated response) or
    is empty when the exchange just finished.
    """
    if msg.session_id != session.session_id:
        raise UnknownSession(f"message for {msg.session_id!r}, session is {session.session_id!r}")
    if session.phase in (PHASE_COMPLETE, PHASE_ABORTED):
        raise OutOfOrderMessage(f"session already {session.phase}")
    entry = session.script[session.phase_index]
    expected = entry.message
    if (msg.kind, msg.sender, msg.receiver) != (expected.kind, expected.sender, expected.receiver):
        raise OutOfOrderMessage(
            f"phase {session.phase} expects {expected.kind} {expected.sender}->"
            f"{expected.receiver}, got {msg.kind} {msg.sender}->{msg.receiver}")
    session.transcript.append(msg)
    session._apply(msg, entry.releases)
    session.phase_index += 1
    outgoing = []
    if session.phase_index < len(session.script):
        outgoing.append(session.script[session.phase_index].message)
    return session, outgoing


def run_to_completion(session: ExchangeSession) -> ExchangeSession:
    """Pump the session honestly until every scripted message is delivered."""
    queue = [initial_message(session)]
    while queue:
        session, outgoing = step(session, queue.pop(0))
        queue.extend(outgoing)
    if not session.complete:
        raise ProtocolError(f"session stalled at {session.phase}")   # pragma: no cover
    return session


def inject_abort(session: ExchangeSession, party: PartyId,
                 after_phase: str) -> ExchangeSession:
    """Run the session with ``party`` going silent after ``after_phase``.

    ``after_phase`` is a message label (``"m3"``): the run is honest up to
    and including that delivery, after which ``party`` still receives
    whatever others send but emits nothing, so the first scripted message
    from ``party`` beyond that point never appears and the session stalls.
    """
    if party not in session.ledger.parties:
        raise BadRoleAssignment(f"{party!r} is not a participant")
    abort_index = session.label_index(after_phase)
    if session.phase_index != 0:
        raise OutOfOrderMessage("abort injection needs a fresh session")
    queue = [initial_message(session)]
    while queue:
        msg = queue.pop(0)
        if msg.sender == party and session.phase_index > abort_index:
            session.ledger.aborted_at = session.phase
            break
        session, outgoing = step(session, msg)
        queue.extend(outgoing)
    return session


def betrayal_payoff(ledger: ExchangeLedger, party: PartyId) -> int:
    """Plaintext bytes gained minus payload bytes spent for ``party``."""
    entry = ledger[party]
    return entry.bytes_decryptable - entry.bytes_uploaded


def transcript_lines(session: ExchangeSession) -> list[str]:
    """One structured text line per delivered message.

    Format: ``session_id,step,kind,sender,receiver,piece_refs,payload_len``
    with piece refs joined by ``+``.  Stable across runs for fixed seeds.
    """
    lines = []
    for step_no, msg in enumerate(session.transcript, start=1):
        refs = "+".join(str(p) for p in msg.piece_refs)
        lines.append(f"{msg.session_id},{step_no:03d},{msg.kind},{msg.sender},"
                     f"{msg.receiver},{refs},{msg.payload_len()}")
    return lines


def export_transcript(session: ExchangeSession) -> str:
    return "\n".join(transcript_lines(session)) + "\n"
