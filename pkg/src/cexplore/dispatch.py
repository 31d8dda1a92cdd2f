"""Host election and the versioned proposal/commit/finalize handshake.

Messages travel through :class:`NetworkModel`, an in-process queue that can drop,
delay, duplicate and reorder copies from a seeded RNG. Each agent runs one
:class:`DispatchNode`; the lowest id in a communication component hosts rounds.
"""
from __future__ import annotations

import copy
import enum
import functools
import hashlib
import heapq
import random
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .tasks import TaskUnit, decode_unit, encode_unit

RETRY_BUDGET = 5
BASE_TIMEOUT = 10
BACKOFF = 2
NUDGE_CAP = 2  # participant nudges back off to at most timeout * backoff**2


class Kind(enum.IntEnum):
    PROPOSAL = 1
    ACCEPT = 2
    REJECT = 3
    COMMIT = 4
    ACK = 5
    FINALIZE = 6
    CANCEL = 7


class Phase(enum.Enum):
    IDLE = "IDLE"
    PROPOSED = "PROPOSED"
    COMMITTED = "COMMITTED"
    FINALIZED = "FINALIZED"


class Outcome(str, enum.Enum):
    FINALIZED = "FINALIZED"
    CANCELLED = "CANCELLED"
    TIMED_OUT = "TIMED_OUT"


class ProtocolError(ValueError):
    pass


@functools.total_ordering
@dataclass(frozen=True)
class Version:
    host: int
    counter: int
    tick: int

    def key(self) -> tuple[int, int, int]:
        return (self.counter, self.tick, self.host)

    def __lt__(self, other: "Version") -> bool:
        return self.key() < other.key()

    def __eq__(self, other) -> bool:
        return isinstance(other, Version) and self.key() == other.key()

    def __hash__(self) -> int:
        return hash(self.key())


NO_VERSION = Version(0, 0, 0)


# -- wire format --------------------------------------------------------------------

HEADER = struct.Struct("<BHIIHHI")  # kind, host, counter, tick, sender, recipient, payload length


def encode_sequences(sequences: dict) -> bytes:
    out = [struct.pack("<H", len(sequences))]
    for agent in sorted(sequences):
        seq = [int(u) for u in sequences[agent]]
        out.append(struct.pack(f"<HI{len(seq)}I", int(agent), len(seq), *seq))
    return b"".join(out)


def decode_sequences(buf: bytes, offset: int = 0) -> tuple[dict, int]:
    (n,) = struct.unpack_from("<H", buf, offset)
    offset += 2
    out = {}
    for _ in range(n):
        agent, m = struct.unpack_from("<HI", buf, offset)
        offset += 6
        out[agent] = list(struct.unpack_from(f"<{m}I", buf, offset))
        offset += 4 * m
    return out, offset


@dataclass
class Proposal:
    sequences: dict
    units: list = field(default_factory=list)

    def encode(self) -> bytes:
        parts = [encode_sequences(self.sequences), struct.pack("<H", len(self.units))]
        parts.extend(encode_unit(u) for u in sorted(self.units, key=lambda u: u.id))
        return b"".join(parts)

    @classmethod
    def decode(cls, buf: bytes) -> "Proposal":
        try:
            seqs, off = decode_sequences(buf)
            (n,) = struct.unpack_from("<H", buf, off)
            off += 2
            units = []
            for _ in range(n):
                u, off = decode_unit(buf, off)
                units.append(u)
        except (struct.error, ValueError) as exc:
            raise ProtocolError(f"malformed proposal payload: {exc}") from None
        if off != len(buf):
            raise ProtocolError("trailing bytes in proposal payload")
        return cls(seqs, units)

    def referenced(self) -> set[int]:
        return {u for seq in self.sequences.values() for u in seq}


@dataclass(frozen=True)
class DispatchMessage:
    kind: Kind
    version: Version
    sender: int
    recipient: int
    payload: bytes = b""

    def __post_init__(self):
        if self.kind not in (Kind.PROPOSAL, Kind.REJECT) and self.payload:
            raise ProtocolError(f"{self.kind.name} carries no payload")

    def encode(self) -> bytes:
        v = self.version
        return HEADER.pack(int(self.kind), v.host, v.counter, v.tick, self.sender, self.recipient,
                           len(self.payload)) + self.payload

    @classmethod
    def decode(cls, buf: bytes, offset: int = 0) -> tuple["DispatchMessage", int]:
        kind, host, counter, tick, sender, recipient, n = HEADER.unpack_from(buf, offset)
        offset += HEADER.size
        payload = bytes(buf[offset:offset + n])
        if len(payload) != n:
            raise ProtocolError("truncated message")
        return cls(Kind(kind), Version(host, counter, tick), sender, recipient, payload), offset + n


def reject_payload(counter: int) -> bytes:
    return struct.pack("<I", counter)


# -- trace log --------------------------------------------------------------------

TRACE_MAGIC = b"CXTRACE1"
_REC = struct.Struct("<BII")  # event, tick, body length


class Event(enum.IntEnum):
    SEND = 0
    DELIVER = 1
    DROP = 2
    OUT_OF_RANGE = 3
    NOTE = 4


class TraceLog:
    """Append-only binary trace: network events carry raw messages, NOTE carries text."""

    def __init__(self):
        self._chunks = [TRACE_MAGIC]

    def record(self, event: Event, tick: int, body: bytes) -> None:
        self._chunks.append(_REC.pack(int(event), tick, len(body)) + body)

    def note(self, tick: int, text: str) -> None:
        self.record(Event.NOTE, tick, text.encode())

    def getvalue(self) -> bytes:
        return b"".join(self._chunks)

    def write(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.getvalue())


def read_trace(data: bytes):
    """Yield ``(event, tick, DispatchMessage | str)`` from trace bytes."""
    if not data.startswith(TRACE_MAGIC):
        raise ProtocolError("not a message trace")
    off = len(TRACE_MAGIC)
    while off < len(data):
        event, tick, n = _REC.unpack_from(data, off)
        off += _REC.size
        body = data[off:off + n]
        off += n
        if Event(event) == Event.NOTE:
            yield Event.NOTE, tick, body.decode()
        else:
            msg, _ = DispatchMessage.decode(body)
            yield Event(event), tick, msg


def describe(msg: DispatchMessage) -> str:
    v = msg.version
    text = f"{msg.kind.name:<8} v=({v.host},{v.counter},{v.tick}) {msg.sender}->{msg.recipient}"
    if msg.kind == Kind.PROPOSAL:
        p = Proposal.decode(msg.payload)
        text += f" seqs={p.sequences} units={len(p.units)}"
    elif msg.kind == Kind.REJECT and msg.payload:
        text += f" active={struct.unpack('<I', msg.payload)[0]}"
    return text


# -- network ------------------------------------------------------------------------

@dataclass
class NetworkModel:
    drop: float = 0.0
    delay: tuple[int, int] = (1, 1)
    dup: float = 0.0
    reorder: bool = False
    seed: int = 0
    link_filter: Callable[[int, int, int], bool] | None = None
    trace: TraceLog | None = None

    def __post_init__(self):
        if not 0.0 <= self.drop <= 1.0 or not 0.0 <= self.dup <= 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
        lo, hi = self.delay
        if lo < 1 or hi < lo:
            raise ValueError("delay must satisfy 1 <= min <= max")
        self._rng = random.Random(self.seed)
        self._queue: list = []
        self._seq = 0
        self._last: dict = {}
        self.stats = {"sent": 0, "delivered": 0, "dropped": 0, "bytes": 0}

    def send(self, msg: DispatchMessage, tick: int) -> None:
        data = msg.encode()
        self.stats["sent"] += 1
        self.stats["bytes"] += len(data)
        if self.trace is not None:
            self.trace.record(Event.SEND, tick, data)
        copies = 2 if self._rng.random() < self.dup else 1
        for _ in range(copies):
            lost = self._rng.random() < self.drop
            d = self._rng.randint(*self.delay)
            if lost:
                self.stats["dropped"] += 1
                if self.trace is not None:
                    self.trace.record(Event.DROP, tick, data)
                continue
            at = tick + (d if self.reorder else self.delay[0])
            if not self.reorder:
                link = (msg.sender, msg.recipient)
                at = max(at, self._last.get(link, 0))
                self._last[link] = at
            heapq.heappush(self._queue, (at, self._seq, data))
            self._seq += 1

    def next_delivery(self) -> int | None:
        return self._queue[0][0] if self._queue else None

    def deliver(self, tick: int) -> list[DispatchMessage]:
        out = []
        while self._queue and self._queue[0][0] <= tick:
            _, _, data = heapq.heappop(self._queue)
            msg, _ = DispatchMessage.decode(data)
            if self.link_filter is not None and not self.link_filter(msg.sender, msg.recipient, tick):
                self.stats["dropped"] += 1
                if self.trace is not None:
                    self.trace.record(Event.OUT_OF_RANGE, tick, data)
                continue
            self.stats["delivered"] += 1
            if self.trace is not None:
                self.trace.record(Event.DELIVER, tick, data)
            out.append(msg)
        return out

    def clear(self) -> None:
        self._queue.clear()


# -- host election ------------------------------------------------------------------

def components(positions: dict, r_comm: float) -> list[list[int]]:
    """Connected components of the proximity graph, each sorted, ordered by min id."""
    ids = sorted(positions)
    parent = {i: i for i in ids}

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    pts = {i: np.asarray(positions[i], float) for i in ids}
    for a_i, a in enumerate(ids):
        for b in ids[a_i + 1:]:
            if float(np.linalg.norm(pts[a] - pts[b])) <= r_comm:
                ra, rb = find(a), find(b)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
    groups: dict = {}
    for i in ids:
        groups.setdefault(find(i), []).append(i)
    return [groups[k] for k in sorted(groups)]


def elect_host(positions: dict, r_comm: float) -> dict[int, int]:
    """Agent id -> host id (the lowest id in its component)."""
    out = {}
    for comp in components(positions, r_comm):
        for a in comp:
            out[a] = comp[0]
    return out


# -- participant state ------------------------------------------------------------

@dataclass
class ProtocolState:
    agent: int
    phase: Phase = Phase.IDLE
    active: Version = NO_VERSION
    finalized: Version = NO_VERSION
    assignment: dict = field(default_factory=dict)
    records: dict = field(default_factory=dict)
    cache: tuple | None = None
    pending: Proposal | None = None
    clock: int = 0
    retries: int = 0
    deadline: int | None = None
    terminal_units: set = field(default_factory=set)
    stale: Callable[[TaskUnit], bool] | None = None
    replies: dict = field(default_factory=dict)
    decided: dict = field(default_factory=dict)
    seen: dict = field(default_factory=dict)
    version_log: list = field(default_factory=list)

    def own_sequence(self) -> list[int]:
        return list(self.assignment.get(self.agent, []))

    def finalized_view(self) -> tuple[Version, dict]:
        """The last FINALIZED version and its assignment, ignoring any round in flight."""
        if self.phase == Phase.COMMITTED and self.cache is not None:
            assignment, version = self.cache
            return version, assignment
        return self.finalized, self.assignment if self.finalized != NO_VERSION else {}

    def own_units(self) -> list[TaskUnit]:
        """Records of this agent's units under the last FINALIZED assignment."""
        version, assignment = self.finalized_view()
        host = version.host
        return [self.records[(host, u)] for u in assignment.get(self.agent, []) if (host, u) in self.records]

    def assignment_bytes(self) -> bytes:
        return encode_sequences(self.assignment)

    def rollback(self) -> None:
        if self.cache is not None:
            self.assignment, self.finalized = self.cache
        self.cache = None
        self.pending = None
        self.deadline = None
        self.phase = Phase.FINALIZED if self.finalized != NO_VERSION else Phase.IDLE


def validate_proposal(state: ProtocolState, msg: DispatchMessage) -> Kind:
    """ACCEPT (caching the current assignment) or REJECT."""
    if msg.kind != Kind.PROPOSAL or not msg.version > state.active:
        return Kind.REJECT
    try:
        prop = Proposal.decode(msg.payload)
    except ProtocolError:
        return Kind.REJECT
    if state.agent not in prop.sequences:
        return Kind.REJECT
    host = msg.version.host
    carried = {u.id: u for u in prop.units}
    for uid in prop.referenced():
        rec = carried.get(uid) or state.records.get((host, uid))
        if rec is None or uid in state.terminal_units:
            return Kind.REJECT
        if state.stale is not None and state.stale(rec):
            return Kind.REJECT
    state.cache = (copy.deepcopy(state.assignment), state.finalized)
    state.pending = prop
    state.phase = Phase.PROPOSED
    state.active = msg.version
    state.version_log.append(msg.version)
    return Kind.ACCEPT


def _digest(seqs: dict) -> str:
    return hashlib.sha256(encode_sequences(seqs)).hexdigest()


# -- host round -----------------------------------------------------------------------

@dataclass
class HostRound:
    version: Version
    members: list
    proposal: Proposal
    payloads: dict
    stage: Kind = Kind.PROPOSAL
    waiting: set = field(default_factory=set)
    attempts: int = 0
    deadline: int = 0
    outcome: Outcome | None = None


class DispatchNode:
    """One agent's protocol endpoint: always a participant, sometimes a host."""

    def __init__(self, agent: int, network: NetworkModel, timeout: int = BASE_TIMEOUT,
                 retries: int = RETRY_BUDGET, backoff: int = BACKOFF):
        self.id = agent
        self.net = network
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.state = ProtocolState(agent)
        self.round: HostRound | None = None
        self.decisions: dict = {}   # version -> FINALIZE | CANCEL (hosted rounds)
        self.outcomes: list = []    # (version, Outcome, tick)
        self.shared: dict = {}      # member -> {uid: record bytes} known finalized there
        self.last_decision: DispatchMessage | None = None
        self.last_members: list = []

    # -- sending --
    def _send(self, kind: Kind, version: Version, to: int, tick: int, payload: bytes = b"") -> bytes:
        msg = DispatchMessage(kind, version, self.id, to, payload)
        self.net.send(msg, tick)
        return msg.encode()

    def _resend(self, raw: bytes, tick: int) -> None:
        msg, _ = DispatchMessage.decode(raw)
        self.net.send(msg, tick)

    # -- host side --
    def records_for(self, member: int, units: Iterable[TaskUnit]) -> list[TaskUnit]:
        """Unit records whose wire form differs from what ``member`` last finalized."""
        known = self.shared.get(member, {})
        return [u for u in units if known.get(u.id) != encode_unit(u)]

    def start_round(self, members: Iterable[int], sequences: dict, units: Iterable[TaskUnit],
                    tick: int) -> Version:
        if self.round is not None and self.round.outcome is None:
            raise ProtocolError("a hosted round is already open")
        units = list(units)
        members = sorted(m for m in members if m != self.id)
        seqs = {a: list(sequences.get(a, [])) for a in [self.id, *members]}
        self.state.clock += 1
        v = Version(self.id, self.state.clock, tick)
        prop = Proposal(seqs, units)
        payloads = {m: Proposal(seqs, self.records_for(m, units)).encode() for m in members}
        self.round = HostRound(v, members, prop, payloads)
        # the host takes part in its own round without the network
        own = DispatchMessage(Kind.PROPOSAL, v, self.id, self.id, prop.encode())
        self._participant_rollback_if_pending(v)
        if validate_proposal(self.state, own) != Kind.ACCEPT:
            raise ProtocolError("host rejected its own proposal")
        self.state.seen[v] = self.state.cache
        self.round.waiting = set(members)
        for m in members:
            self._send(Kind.PROPOSAL, v, m, tick, payloads[m])
        self.round.deadline = tick + self.timeout
        if not members:
            self._to_commit(tick)
        return v

    def _to_commit(self, tick: int) -> None:
        r = self.round
        r.stage = Kind.COMMIT
        self._apply_pending()
        r.waiting = set(r.members)
        r.attempts = 0
        r.deadline = tick + self.timeout
        for m in r.members:
            self._send(Kind.COMMIT, r.version, m, tick)
        if not r.members:
            self._decide(Kind.FINALIZE, Outcome.FINALIZED, tick)

    def _decide(self, kind: Kind, outcome: Outcome, tick: int) -> None:
        r = self.round
        r.outcome = outcome
        r.stage = kind
        self.decisions[r.version] = kind
        if kind == Kind.FINALIZE:
            self._finalize_local(r.version, tick)
            for m in r.members:
                known = self.shared.setdefault(m, {})
                for u in r.proposal.units:
                    known[u.id] = encode_unit(u)
        else:
            self.state.decided[r.version] = Kind.CANCEL
            if self.state.active == r.version and self.state.phase in (Phase.PROPOSED, Phase.COMMITTED):
                self.state.rollback()
        for m in r.members:
            self._send(kind, r.version, m, tick)
        self.last_decision = DispatchMessage(kind, r.version, self.id, self.id)
        self.last_members = list(r.members)
        self.outcomes.append((r.version, outcome, tick))

    def abort(self, tick: int, outcome: Outcome = Outcome.TIMED_OUT) -> None:
        """Cancel the open hosted round (membership change, competing host)."""
        if self.round is not None and self.round.outcome is None:
            self._decide(Kind.CANCEL, outcome, tick)

    def beacon(self, tick: int) -> None:
        """Re-send the latest decision to the members of that round."""
        if self.last_decision is None:
            return
        d = self.last_decision
        for m in self.last_members:
            self._send(d.kind, d.version, m, tick)

    def _on_host_message(self, msg: DispatchMessage, tick: int) -> None:
        r = self.round
        current = r is not None and msg.version == r.version and r.outcome is None
        if msg.kind == Kind.REJECT and msg.payload:
            (c,) = struct.unpack("<I", msg.payload)
            self.state.clock = max(self.state.clock, c)
        if not current:
            # late reply for a decided round: answer with the decision
            kind = self.decisions.get(msg.version)
            if kind is not None and msg.kind in (Kind.ACCEPT, Kind.ACK):
                self._send(kind, msg.version, msg.sender, tick)
            return
        if msg.sender not in r.members:
            return
        if msg.kind == Kind.REJECT:
            self.shared.pop(msg.sender, None)
            self._decide(Kind.CANCEL, Outcome.CANCELLED, tick)
        elif msg.kind == Kind.ACCEPT and r.stage == Kind.PROPOSAL:
            r.waiting.discard(msg.sender)
            if not r.waiting:
                self._to_commit(tick)
        elif msg.kind == Kind.ACK and r.stage == Kind.COMMIT:
            r.waiting.discard(msg.sender)
            if not r.waiting:
                self._decide(Kind.FINALIZE, Outcome.FINALIZED, tick)

    def _host_timer(self, tick: int) -> None:
        r = self.round
        if r is None or r.outcome is not None or tick < r.deadline:
            return
        if r.attempts >= self.retries:
            self._decide(Kind.CANCEL, Outcome.TIMED_OUT, tick)
            return
        r.attempts += 1
        for m in sorted(r.waiting):
            if r.stage == Kind.PROPOSAL:
                self._send(Kind.PROPOSAL, r.version, m, tick, r.payloads[m])
            else:
                self._send(Kind.COMMIT, r.version, m, tick)
        r.deadline = tick + self.timeout * self.backoff ** r.attempts

    # -- participant side --
    def _apply_pending(self) -> None:
        s = self.state
        if s.phase == Phase.PROPOSED and s.pending is not None:
            host = s.active.host
            for u in s.pending.units:
                s.records[(host, u.id)] = u
            s.assignment = copy.deepcopy(s.pending.sequences)
            s.phase = Phase.COMMITTED

    def _finalize_local(self, v: Version, tick: int) -> None:
        s = self.state
        self._apply_pending()
        s.phase = Phase.FINALIZED
        s.finalized = v
        s.decided[v] = Kind.FINALIZE
        s.cache = None
        s.pending = None
        s.deadline = None
        s.retries = 0

    def _participant_rollback_if_pending(self, v: Version) -> None:
        s = self.state
        if s.phase in (Phase.PROPOSED, Phase.COMMITTED) and s.active < v:
            # an ACKed round may have finalized at the host: fall back without recording a verdict
            if s.phase == Phase.PROPOSED:
                s.decided.setdefault(s.active, Kind.CANCEL)
            s.rollback()

    def _reply(self, key: tuple, kind: Kind, msg: DispatchMessage, tick: int, payload: bytes = b"") -> None:
        raw = self._send(kind, msg.version, msg.sender, tick, payload)
        self.state.replies[key] = raw

    def _arm(self, tick: int) -> None:
        s = self.state
        s.retries = 0
        s.deadline = tick + self.timeout

    def _on_participant_message(self, msg: DispatchMessage, tick: int) -> None:
        s = self.state
        v = msg.version
        key = (msg.kind, v)
        if msg.kind in (Kind.PROPOSAL, Kind.COMMIT) and key in s.replies:
            self._resend(s.replies[key], tick)  # duplicate: same bytes, no state change
            return
        if msg.kind == Kind.PROPOSAL:
            self._participant_rollback_if_pending(v)
            before = (copy.deepcopy(s.assignment), s.finalized)
            verdict = validate_proposal(s, msg)
            s.seen[v] = before
            if verdict == Kind.ACCEPT:
                self._reply(key, Kind.ACCEPT, msg, tick)
                self._arm(tick)
            else:
                self._reply(key, Kind.REJECT, msg, tick, reject_payload(s.active.counter))
        elif msg.kind == Kind.COMMIT:
            if v == s.active and s.phase in (Phase.PROPOSED, Phase.COMMITTED):
                self._apply_pending()
                self._reply(key, Kind.ACK, msg, tick)
                self._arm(tick)
            elif s.decided.get(v) == Kind.FINALIZE:
                self._reply(key, Kind.ACK, msg, tick)
            else:
                self._reply(key, Kind.REJECT, msg, tick, reject_payload(s.active.counter))
        elif msg.kind == Kind.FINALIZE:
            if v == s.active and s.phase in (Phase.PROPOSED, Phase.COMMITTED):
                self._finalize_local(v, tick)
        elif msg.kind == Kind.CANCEL:
            if v == s.active and s.phase in (Phase.PROPOSED, Phase.COMMITTED):
                s.rollback()
                s.decided[v] = Kind.CANCEL
            else:
                s.decided.setdefault(v, Kind.CANCEL)

    def _participant_timer(self, tick: int) -> None:
        s = self.state
        if s.deadline is None or tick < s.deadline or s.phase not in (Phase.PROPOSED, Phase.COMMITTED):
            return
        if s.active.host == self.id:
            s.deadline = None
            return
        # nudge the host with the last reply; it answers decided rounds with the decision
        kind = Kind.ACCEPT if s.phase == Phase.PROPOSED else Kind.ACK
        raw = s.replies.get((Kind.PROPOSAL if kind == Kind.ACCEPT else Kind.COMMIT, s.active))
        if raw is not None:
            self._resend(raw, tick)
        s.retries += 1
        s.deadline = tick + self.timeout * self.backoff ** min(s.retries, NUDGE_CAP)

    # -- event entry points --
    def on_message(self, msg: DispatchMessage, tick: int) -> None:
        self.state.clock = max(self.state.clock, msg.version.counter)
        if msg.kind in (Kind.ACCEPT, Kind.REJECT, Kind.ACK):
            self._on_host_message(msg, tick)
            return
        r = self.round
        if (msg.kind == Kind.PROPOSAL and r is not None and r.outcome is None
                and msg.version.host < self.id):
            # two hosts after a component merge: the higher id yields
            self.abort(tick, Outcome.CANCELLED)
        self._on_participant_message(msg, tick)

    def on_tick(self, tick: int) -> None:
        self._host_timer(tick)
        self._participant_timer(tick)

    def next_timer(self) -> int | None:
        times = []
        if self.round is not None and self.round.outcome is None:
            times.append(self.round.deadline)
        s = self.state
        if s.deadline is not None and s.phase in (Phase.PROPOSED, Phase.COMMITTED) and s.active.host != self.id:
            times.append(s.deadline)
        return min(times) if times else None

    def outcome_of(self, v: Version) -> Outcome | None:
        for ver, out, _ in self.outcomes:
            if ver == v:
                return out
        return None

    def settled(self) -> bool:
        return self.state.phase not in (Phase.PROPOSED, Phase.COMMITTED)


def round_budget(timeout: int = BASE_TIMEOUT, retries: int = RETRY_BUDGET, backoff: int = BACKOFF) -> int:
    """Ticks a host may wait in one phase before giving up."""
    return sum(timeout * backoff ** k for k in range(retries + 1))


def run_round(host: DispatchNode, participants: list, network: NetworkModel, allocation,
              tick: int = 0, units: Iterable[TaskUnit] = (), settle: int | None = None) -> tuple[Outcome, int]:
    """Drive one round to a decision, then let decisions propagate.

    ``allocation`` is an AllocationResult or a plain ``{agent: sequence}``.
    Returns ``(outcome, decision_tick)``; after the decision the loop keeps
    delivering messages for up to ``settle`` ticks (default: one phase budget)
    or until every participant has left the provisional phases.
    """
    seqs = getattr(allocation, "sequences", allocation)
    nodes = {n.id: n for n in [host, *participants]}
    budget = 2 * round_budget(host.timeout, host.retries, host.backoff) + 2 * network.delay[1] + 2
    settle = round_budget(host.timeout, host.retries, host.backoff) if settle is None else settle
    v = host.start_round([p.id for p in participants], seqs, units, tick)
    start = tick
    decided_at = None
    while True:
        outcome = host.outcome_of(v)
        if outcome is not None and decided_at is None:
            decided_at = tick
        if decided_at is not None and (tick - decided_at >= settle or all(n.settled() for n in nodes.values())):
            break
        if decided_at is None and tick - start > budget:
            raise ProtocolError("round exceeded its timeout budget")
        # jump to the next event
        cands = [t for t in [network.next_delivery(), *(n.next_timer() for n in nodes.values())] if t is not None]
        if not cands:
            if decided_at is None:
                raise ProtocolError("round stalled with nothing scheduled")
            break
        tick = max(tick + 1, min(cands))
        for msg in network.deliver(tick):
            if msg.recipient in nodes:
                nodes[msg.recipient].on_message(msg, tick)
        for a in sorted(nodes):
            nodes[a].on_tick(tick)
    return host.outcome_of(v), decided_at
