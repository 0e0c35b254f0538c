"""Deterministic in-process network simulation and rate estimators.

Two layers of fidelity:

* estimate_srtr / estimate_srd run the probabilistic route model only
  (no cryptography) so a hundred thousand trials finish in seconds.
  Node behaviors are drawn lazily per touched node, which is
  distributionally identical to flipping a coin for all n_nodes up
  front.  SRD success is decided by literally stitching attacker
  observations back together, not by evaluating the closed-form
  predicate, so the two can be validated against each other.

* SimWorld + run_end_to_end build real nodes with real keypairs wired
  through an in-process transport, a tick-based block clock, a Sybil
  observer logging every broadcast, and an attack ledger filled by
  observer (fake) nodes.

Everything is seeded: identical SimConfig values produce bit-identical
outcomes.  Per-trial seeds come from a splittable counter so trials are
independent streams.
"""

import json
import random
from dataclasses import dataclass, field

from . import node_runtime
from .ec_crypto import keygen
from .errors import (
    GiveUp,
    InvalidConfig,
    MalformedCipher,
    MalformedRouting,
    NextHopUnreachable,
    NotObserved,
    PeerClosed,
    TrrTimeout,
)
from .node_runtime import SendPolicy, TrrNode, client_send
from .onion_routing import Forward, NodeDescriptor, Release
from .wire_protocol import MAX_TX_SIZE

HONEST = "honest"
FAKE_TRR = "fake_trr"
DISHONEST_MODES = ("deny_connection", "drop_data", "no_release", "wrong_pubkey")

BLOCK_INTERVAL_TICKS = 100


@dataclass(frozen=True, slots=True)
class SimConfig:
    n_nodes: int = 6000
    dishonest_rate: float = 0.0
    fake_rate: float = 0.0
    num_routes: int = 3
    hops: int = 3
    trials: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.n_nodes < self.hops or self.n_nodes < 1:
            raise InvalidConfig("n_nodes must cover at least one route")
        if not (0 <= self.dishonest_rate <= 1 and 0 <= self.fake_rate <= 1):
            raise InvalidConfig("rates must lie in [0, 1]")
        if self.dishonest_rate + self.fake_rate > 1:
            raise InvalidConfig("dishonest_rate + fake_rate must not exceed 1")
        if self.num_routes < 1 or not 1 <= self.hops <= 10:
            raise InvalidConfig("num_routes >= 1 and hops in 1..10 required")
        if self.trials < 1:
            raise InvalidConfig("trials must be at least 1")


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def trial_seed(master: int, index: int) -> int:
    """Independent 64-bit stream seed for one trial."""
    return _splitmix64(_splitmix64(master & 0xFFFFFFFFFFFFFFFF) + index)


# -- statistical estimators -------------------------------------------------

def estimate_srtr(cfg: SimConfig) -> float:
    """Fraction of trials in which at least one of the round's routes
    consists entirely of protocol-following hops (a single round, no
    retries).  Fake observer nodes follow the protocol, so only the
    dishonest fraction breaks a route."""
    cfg.validate()
    d = cfg.dishonest_rate
    population = range(cfg.n_nodes)
    successes = 0
    for t in range(cfg.trials):
        rng = random.Random(trial_seed(cfg.seed, t))
        dishonest: dict[int, bool] = {}
        for _ in range(cfg.num_routes):
            route_ok = True
            for node in rng.sample(population, cfg.hops):
                flag = dishonest.get(node)
                if flag is None:
                    flag = rng.random() < d
                    dishonest[node] = flag
                if flag:
                    route_ok = False
                    break
            if route_ok:
                successes += 1
                break
    return successes / cfg.trials


def estimate_srd(cfg: SimConfig) -> float:
    """Fraction of trials in which stitching the observer ledger
    recovers at least one full route (correct hops, transaction content
    and client address)."""
    cfg.validate()
    f = cfg.fake_rate
    population = range(cfg.n_nodes)
    client_addr = cfg.n_nodes  # outside the node id space
    successes = 0
    for t in range(cfg.trials):
        rng = random.Random(trial_seed(cfg.seed, t))
        fake: dict[int, bool] = {}
        routes = []
        for _ in range(cfg.num_routes):
            route = rng.sample(population, cfg.hops)
            for node in route:
                if node not in fake:
                    fake[node] = rng.random() < f
            routes.append(route)
        if not any(fake[route[-1]] for route in routes):
            continue  # no observed releasing hop, nothing to stitch
        entries = _ledger_entries(routes, fake, client_addr)
        if any(_stitch_route(route, entries, client_addr) for route in routes):
            successes += 1
    return successes / cfg.trials


RELEASE_MARK = -1  # "no next node" in an observer ledger entry


def _ledger_entries(routes, fake, client_addr):
    """Observations pooled across one trial: every observer hop records
    (previous address, own address, next address or RELEASE_MARK)."""
    entries = []
    for route in routes:
        for i, node in enumerate(route):
            if not fake[node]:
                continue
            prev_addr = route[i - 1] if i > 0 else client_addr
            next_addr = route[i + 1] if i < len(route) - 1 else RELEASE_MARK
            entries.append((prev_addr, node, next_addr))
    return entries


def _stitch_route(route, entries, client_addr) -> bool:
    """Attacker reconstruction by chain-stitching ledger addresses.

    Walk backwards from the releasing observation.  A link either
    matches an observer entry directly or bridges one unobserved hop
    whose address the two neighbouring observers both recorded; two
    consecutive unobserved hops leave no matching records and the walk
    dies.  Success requires the recovered chain to equal the actual
    route back to the client address (which also implies the releasing
    observer holds the transaction content).
    """
    releasing = route[-1]
    starts = [e for e in entries if e[1] == releasing and e[2] == RELEASE_MARK]
    if not starts:
        return False
    by_self: dict[int, list] = {}
    by_next: dict[int, list] = {}
    for e in entries:
        by_self.setdefault(e[1], []).append(e)
        if e[2] != RELEASE_MARK:
            by_next.setdefault(e[2], []).append(e)

    target = [client_addr] + list(route)

    def walk(entry, chain) -> bool:
        if len(chain) > len(route):  # cross-route loops cannot match
            return False
        prev_addr = entry[0]
        if prev_addr == client_addr:
            return [client_addr] + chain == target
        for cand in by_self.get(prev_addr, ()):
            if cand[2] == entry[1] and walk(cand, [prev_addr] + chain):
                return True
        for cand in by_next.get(prev_addr, ()):  # bridge one unobserved hop
            if walk(cand, [cand[1], prev_addr] + chain):
                return True
        return False

    return any(walk(e, [releasing]) for e in starts)


def route_pattern_reconstructible(flags) -> bool:
    """Closed-form predicate on a route's observer pattern: both ends
    observed and no two consecutive unobserved hops.  Kept separate
    from the stitching implementation so tests can compare them."""
    flags = list(flags)
    if not flags[0] or not flags[-1]:
        return False
    return all(flags[i] or flags[i + 1] for i in range(len(flags) - 1))


# -- full in-process world ---------------------------------------------------

class SimClock:
    """Tick counter with a block height derived every
    BLOCK_INTERVAL_TICKS ticks; advancing a block notifies every node in
    node-id order."""

    def __init__(self, world):
        self._world = world
        self.tick = 0
        self._height = 0

    def height(self) -> int:
        return self._height

    def advance_block(self) -> None:
        self.tick = (self.tick // BLOCK_INTERVAL_TICKS + 1) * BLOCK_INTERVAL_TICKS
        self._height += 1
        for node in self._world.nodes:
            node.on_new_block(self._height)

    def wait_for(self, height: int) -> None:
        while self._height < height:
            self.advance_block()


class SimBroadcast:
    """Shared broadcast network stub plus the Sybil observer log."""

    def __init__(self, world):
        self._world = world
        self.seen: set[bytes] = set()
        self.log: list[tuple[int, object, bytes]] = []  # (tick, origin, txid)

    def observe(self, origin, tx: bytes) -> None:
        tid = node_runtime.txid(tx)
        self.log.append((self._world.clock.tick, origin, tid))
        self.seen.add(tid)

    def verify(self, tx: bytes) -> bool:
        return 0 < len(tx) <= MAX_TX_SIZE


class NodeView:
    """Per-node handle onto the shared broadcast stub, so the observer
    knows which node announced each transaction."""

    def __init__(self, broadcast: SimBroadcast, node_id):
        self._broadcast = broadcast
        self._node_id = node_id

    def seen_in_blockchain_or_mempool(self, txid: bytes) -> bool:
        return txid in self._broadcast.seen

    def broadcast(self, tx: bytes) -> None:
        self._broadcast.observe(self._node_id, tx)

    def verify(self, tx: bytes) -> bool:
        return self._broadcast.verify(tx)


def sybil_first_spreader(log, txid: bytes):
    """Node that announced txid earliest (ties broken by lowest id)."""
    hits = [(tick, origin) for tick, origin, tid in log if tid == txid]
    if not hits:
        raise NotObserved(f"txid {txid.hex()[:16]} never announced")
    return min(hits)[1]


class SimNode(TrrNode):
    """TrrNode plus a behavior label; observer nodes feed the ledger."""

    def __init__(self, *args, behavior=HONEST, world=None, **kwargs):
        super().__init__(*args, **kwargs)
        self.behavior = behavior
        self.world = world

    def _observe_request(self, src_addr, peeled) -> None:
        if self.behavior != FAKE_TRR:
            return
        me = self.descriptor
        if isinstance(peeled, Forward):
            entry = LedgerEntry(node_id=me.node_id, self_addr=(me.ip, me.port),
                                prev_addr=src_addr,
                                next_addr=(peeled.next_ip, peeled.next_port))
        else:
            entry = LedgerEntry(node_id=me.node_id, self_addr=(me.ip, me.port),
                                prev_addr=src_addr, next_addr=None,
                                tx=peeled.trr_data.tx,
                                txid=node_runtime.txid(peeled.trr_data.tx))
        self.world.attack_ledger.entries.append(entry)

    def _handle_release(self, rel: Release) -> bytes:
        if self.behavior == "no_release":
            # accept and ack but never enqueue: the withheld release is
            # exactly what makes this node dishonest
            self._log("withheld_release")
            return self._own_ack(rel.return_pubkey,
                                 errno=node_runtime.ERR_OK, err_ip=0)
        return super()._handle_release(rel)


@dataclass
class LedgerEntry:
    node_id: object
    self_addr: tuple
    prev_addr: tuple
    next_addr: tuple | None  # None at the releasing hop
    tx: bytes | None = None
    txid: bytes | None = None


@dataclass
class AttackLedger:
    entries: list[LedgerEntry] = field(default_factory=list)

    def reconstruct(self, client_addr):
        """Stitch full chains from releasing observations back to the
        client address; returns (address chain, txid) pairs.  Bridged
        hops contribute the address both neighbouring observers saw.

        Observations pooled across requests can interlink, so every
        stitchable chain is enumerated; candidates that mix requests
        simply fail the caller's comparison with real routes.
        """
        by_self = {}
        by_next = {}
        for e in self.entries:
            by_self.setdefault(e.self_addr, []).append(e)
            if e.next_addr is not None:
                by_next.setdefault(e.next_addr, []).append(e)
        recovered = []

        def walk(entry, chain, out):
            if len(chain) > 11 or len(out) > 64:  # no legal route is longer
                return
            prev = entry.prev_addr
            if prev == client_addr:
                out.append(chain)
                return
            for cand in by_self.get(prev, ()):
                if cand.next_addr == entry.self_addr:
                    walk(cand, [cand.self_addr] + chain, out)
            for cand in by_next.get(prev, ()):
                walk(cand, [cand.self_addr, prev] + chain, out)

        seen = set()
        for e in self.entries:
            if e.next_addr is None:
                hits: list = []
                walk(e, [e.self_addr], hits)
                for chain in hits:
                    key = (tuple(chain), e.txid)
                    if key not in seen:
                        seen.add(key)
                        recovered.append((chain, e.txid))
        return recovered


class InProcessTransport:
    """Synchronous delivery: a request is served by directly invoking
    the target node, one tick of latency per edge."""

    def __init__(self, world):
        self._world = world

    def request(self, ip: int, port: int, packet: bytes, src_addr=None) -> bytes:
        self._world.clock.tick += 1
        node = self._world.by_addr.get((ip, port))
        if node is None or node.behavior == "deny_connection":
            raise NextHopUnreachable(f"no TRR listener at {ip}:{port}")
        if node.behavior == "drop_data":
            raise TrrTimeout(f"node {node.descriptor.node_id} went silent")
        try:
            return node.serve_request(packet, src_addr=src_addr)
        except (MalformedCipher, MalformedRouting) as exc:
            raise PeerClosed(
                f"node {node.descriptor.node_id} closed: {exc}") from exc


class SimWorld:
    """Fully wired network of SimNodes for end-to-end runs."""

    def __init__(self, cfg: SimConfig, *, client_ip=0xC0A80001, client_port=9):
        cfg.validate()
        self.cfg = cfg
        self.rng = random.Random(trial_seed(cfg.seed, 0) ^ 0xE2E)
        self.clock = SimClock(self)
        self.broadcast = SimBroadcast(self)
        self.transport = InProcessTransport(self)
        self.attack_ledger = AttackLedger()
        self.client_addr = (client_ip, client_port)
        self.nodes: list[SimNode] = []
        self.directory: list[NodeDescriptor] = []
        self.by_addr: dict[tuple, SimNode] = {}
        for node_id in range(cfg.n_nodes):
            self._add_node(node_id)

    def _behavior(self):
        u = self.rng.random()
        if u < self.cfg.dishonest_rate:
            return DISHONEST_MODES[self.rng.randrange(len(DISHONEST_MODES))]
        if u < self.cfg.dishonest_rate + self.cfg.fake_rate:
            return FAKE_TRR
        return HONEST

    def _add_node(self, node_id: int) -> None:
        behavior = self._behavior()
        keypair = keygen(self.rng)
        ip = 0x0A000001 + node_id  # 10.0.0.1 upward
        advertised = keypair.public
        if behavior == "wrong_pubkey":
            advertised = keygen(self.rng).public  # directory lies
        descriptor = NodeDescriptor(node_id=node_id, ip=ip, port=8333,
                                    pubkey=keypair.public)
        node = SimNode(keypair, descriptor, self.transport,
                       NodeView(self.broadcast, node_id),
                       random.Random(trial_seed(self.cfg.seed, node_id + 1)),
                       now=lambda: self.clock.tick,
                       behavior=behavior, world=self)
        self.nodes.append(node)
        self.by_addr[(ip, 8333)] = node
        self.directory.append(
            NodeDescriptor(node_id=node_id, ip=ip, port=8333, pubkey=advertised))

    def send(self, tx: bytes, policy: SendPolicy, rng=None):
        """client_send over this world's transport/view/clock."""
        return client_send(
            tx, self.directory, policy, rng or self.rng,
            transport=self.transport,
            view=NodeView(self.broadcast, "client"),
            clock=self.clock, client_addr=self.client_addr,
            now=lambda: self.clock.tick)

    def direct_send(self, tx: bytes) -> None:
        """Baseline non-TRR broadcast straight from the client; the
        Sybil observer attributes it to the client immediately."""
        self.broadcast.observe("client", tx)


@dataclass
class TraceReport:
    """Everything observable about one end-to-end send."""

    config: SimConfig
    txid_hex: str
    success: bool
    rounds: int
    route_ids: list[tuple]
    node_events: list[dict]
    release_ticks: list[int]
    sybil_log: list[tuple]
    recovered_routes: list
    first_spreader: object | None

    def to_json_lines(self) -> str:
        lines = [json.dumps({"txid": self.txid_hex, "success": self.success,
                             "rounds": self.rounds,
                             "first_spreader": repr(self.first_spreader)})]
        for event in self.node_events:
            lines.append(json.dumps(event, default=repr))
        return "\n".join(lines) + "\n"


def run_end_to_end(cfg: SimConfig, tx: bytes,
                   policy: SendPolicy | None = None) -> TraceReport:
    """One full send over a freshly built world."""
    cfg.validate()
    world = SimWorld(cfg)
    policy = policy or SendPolicy(num_routes=cfg.num_routes, hops=cfg.hops)
    tid = node_runtime.txid(tx)
    try:
        report = world.send(tx, policy)
        success = report.success
        rounds = report.total_rounds
        routes = [a.hop_ids for rnd in report.rounds for a in rnd.attempts]
    except GiveUp as exc:
        success = False
        rounds = exc.report.total_rounds
        routes = [a.hop_ids for rnd in exc.report.rounds for a in rnd.attempts]
    events = [e for node in world.nodes for e in node.events]
    release_ticks = [tick for tick, origin, t in world.broadcast.log if t == tid]
    try:
        spreader = sybil_first_spreader(world.broadcast.log, tid)
    except NotObserved:
        spreader = None
    return TraceReport(
        config=cfg, txid_hex=tid.hex(), success=success, rounds=rounds,
        route_ids=routes, node_events=events, release_ticks=release_ticks,
        sybil_log=list(world.broadcast.log),
        recovered_routes=world.attack_ledger.reconstruct(world.client_addr),
        first_spreader=spreader)
