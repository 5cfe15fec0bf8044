"""Deterministic discrete-event simulator for switch-aggregated rings.

Links model store-and-forward serialization: a packet enqueued at time t on a
link whose transmitter frees at time f starts serializing at max(t, f), holds
the transmitter for size/bandwidth seconds, then arrives one propagation delay
later. Loss consumes wire time but suppresses the arrival. Every link draws
from its own generator spawned off the run seed, so runs are reproducible
packet for packet.

Aggregation-pipeline emissions leave a switch after a fixed accelerator
latency; plain forwarded traffic pays only the link costs.
"""

from __future__ import annotations

import heapq
from dataclasses import asdict, dataclass, field

import numpy as np

from .accelerator import AggregationAccelerator, RingTableEntry, Role
from .endhost import RingConfig, RingHost
from .errors import ConfigError, DeadlockError
from .protocol import Packet, TransportHeaders, PacketKind, psn_add

ARRIVAL = 0
TIMER = 1


class Link:
    """One directed link with a FIFO transmitter and optional random loss."""

    def __init__(self, src_id: str, dst_id: str, bandwidth: float,
                 propagation: float, loss_rate: float, rng: np.random.Generator):
        if bandwidth <= 0:
            raise ConfigError(f"bandwidth must be > 0: {bandwidth}")
        if propagation < 0:
            raise ConfigError(f"propagation must be >= 0: {propagation}")
        if not 0.0 <= loss_rate < 1.0:
            raise ConfigError(f"loss_rate must be in [0, 1): {loss_rate}")
        self.src_id = src_id
        self.dst_id = dst_id
        self.bandwidth = bandwidth
        self.propagation = propagation
        self.loss_rate = loss_rate
        self.rng = rng
        self.free_time = 0.0
        self.packets = 0
        self.wire_bytes = 0
        self.payload_bytes = 0
        self.drops = 0

    def transmit(self, sim: "Simulator", pkt: Packet, t_enqueue: float) -> None:
        start = max(self.free_time, t_enqueue)
        tx = pkt.size_bytes / self.bandwidth
        self.free_time = start + tx
        self.packets += 1
        self.wire_bytes += pkt.size_bytes
        if pkt.kind is PacketKind.DATA and pkt.payload is not None:
            self.payload_bytes += 4 * len(pkt.payload)
        if self.loss_rate > 0.0 and self.rng.random() < self.loss_rate:
            self.drops += 1
            return
        sim.push(start + tx + self.propagation, ARRIVAL, (self.dst_id, pkt))


class Node:
    def __init__(self, node_id: str, ip: int):
        self.node_id = node_id
        self.ip = ip

    def on_start(self, sim: "Simulator") -> None:
        pass

    def on_arrival(self, sim: "Simulator", pkt: Packet, now: float) -> None:
        raise NotImplementedError

    def on_timer(self, sim: "Simulator", msg_id: int, attempt: int, now: float) -> None:
        raise NotImplementedError

    def pick_link(self, pkt: Packet) -> Link:
        raise NotImplementedError


class ProtocolHostNode(Node):
    """Ring member: forwards the host state machine's actions into the sim."""

    def __init__(self, node_id: str, ip: int, host: RingHost):
        super().__init__(node_id, ip)
        self.host = host
        self.uplink: Link | None = None
        self.completion_time: float | None = None

    def pick_link(self, pkt: Packet) -> Link:
        return self.uplink

    def _dispatch(self, sim, actions, now: float) -> None:
        for p in actions.packets:
            sim.send(self, p, now)
        for at, msg_id, attempt in actions.timers:
            sim.push(at, TIMER, (self.node_id, msg_id, attempt))
        if self.completion_time is None and self.host.done:
            self.completion_time = now

    def on_start(self, sim) -> None:
        self._dispatch(sim, self.host.start(0.0), 0.0)

    def on_arrival(self, sim, pkt, now) -> None:
        self._dispatch(sim, self.host.on_packet(pkt, now), now)

    def on_timer(self, sim, msg_id, attempt, now) -> None:
        self._dispatch(sim, self.host.on_timeout(msg_id, attempt, now), now)


class SwitchNode(Node):
    def __init__(self, node_id: str, ip: int, accel: AggregationAccelerator,
                 accel_latency: float):
        super().__init__(node_id, ip)
        self.accel = accel
        self.accel_latency = accel_latency
        self.routes: dict[int, Link] = {}
        self.default_link: Link | None = None

    def pick_link(self, pkt: Packet) -> Link:
        link = self.routes.get(pkt.transport.dst_ip, self.default_link)
        if link is None:
            raise ConfigError(
                f"{self.node_id}: no route for 0x{pkt.transport.dst_ip:08x}")
        return link

    def on_arrival(self, sim, pkt, now) -> None:
        res = self.accel.process(pkt, now)
        depart = now + (self.accel_latency if res.accelerated else 0.0)
        for p in res.emissions:
            sim.send(self, p, depart)


class ScriptedSourceNode(Node):
    """Emits a fixed packet list at t=0 and absorbs whatever arrives; used
    for reference traffic patterns that need byte accounting, not protocol."""

    def __init__(self, node_id: str, ip: int, script: list[Packet]):
        super().__init__(node_id, ip)
        self.script = script
        self.uplink: Link | None = None
        self.received_packets = 0
        self.received_payload_bytes = 0

    def pick_link(self, pkt: Packet) -> Link:
        return self.uplink

    def on_start(self, sim) -> None:
        for p in self.script:
            sim.send(self, p, 0.0)

    def on_arrival(self, sim, pkt, now) -> None:
        self.received_packets += 1
        if pkt.payload is not None:
            self.received_payload_bytes += 4 * len(pkt.payload)


@dataclass
class SimReport:
    total_time: float
    events: int
    retransmissions: int
    completion_times: dict[str, float]
    link_wire_bytes: dict[tuple[str, str], int]
    link_payload_bytes: dict[tuple[str, str], int]
    link_packets: dict[tuple[str, str], int]
    link_drops: dict[tuple[str, str], int]
    host_stats: dict[str, dict[str, int]]
    accel_stats: dict[str, dict[str, int]]


class Simulator:
    def __init__(self, seed: int = 0, max_events: int = 5_000_000):
        self.seed_seq = np.random.SeedSequence(seed)
        self.max_events = max_events
        self.nodes: dict[str, Node] = {}
        self.links: list[Link] = []
        self.heap: list = []
        self.seq = 0
        self.now = 0.0
        self.events_processed = 0
        self.hosts: list[ProtocolHostNode] = []
        self.switches: list[SwitchNode] = []

    def new_rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed_seq.spawn(1)[0])

    def add_node(self, node: Node) -> Node:
        if node.node_id in self.nodes:
            raise ConfigError(f"duplicate node id {node.node_id}")
        self.nodes[node.node_id] = node
        if isinstance(node, ProtocolHostNode):
            self.hosts.append(node)
        elif isinstance(node, SwitchNode):
            self.switches.append(node)
        return node

    def add_link(self, src: Node, dst: Node, bandwidth: float,
                 propagation: float, loss_rate: float = 0.0) -> Link:
        link = Link(src.node_id, dst.node_id, bandwidth, propagation,
                    loss_rate, self.new_rng())
        self.links.append(link)
        return link

    def push(self, time: float, kind: int, data: tuple) -> None:
        heapq.heappush(self.heap, (time, self.seq, kind, data))
        self.seq += 1

    def send(self, node: Node, pkt: Packet, t: float) -> None:
        node.pick_link(pkt).transmit(self, pkt, t)

    def run(self) -> SimReport:
        for node in self.nodes.values():
            node.on_start(self)
        while self.heap:
            self.events_processed += 1
            if self.events_processed > self.max_events:
                self._deadlock(f"event budget of {self.max_events} exhausted")
            time, _, kind, data = heapq.heappop(self.heap)
            self.now = time
            if kind == ARRIVAL:
                node_id, pkt = data
                self.nodes[node_id].on_arrival(self, pkt, time)
            else:
                node_id, msg_id, attempt = data
                self.nodes[node_id].on_timer(self, msg_id, attempt, time)
        for h in self.hosts:
            if not h.host.done:
                self._deadlock("simulation went quiet with unfinished hosts")
        return self.report()

    def _deadlock(self, reason: str) -> None:
        stuck = []
        for h in self.hosts:
            if not h.host.done:
                stuck.append(
                    f"{h.node_id}: {h.host.results_received}/{h.host.plan.num_msg} "
                    f"results, awaiting acks for {sorted(h.host.pending)[:8]}"
                )
        detail = "; ".join(stuck) if stuck else "no unfinished hosts"
        raise DeadlockError(f"{reason} at t={self.now:.6g}s ({detail})")

    def report(self) -> SimReport:
        comp = {h.node_id: h.completion_time for h in self.hosts
                if h.completion_time is not None}
        return SimReport(
            total_time=max(comp.values(), default=self.now),
            events=self.events_processed,
            retransmissions=sum(h.host.retransmissions for h in self.hosts),
            completion_times=comp,
            link_wire_bytes={(l.src_id, l.dst_id): l.wire_bytes for l in self.links},
            link_payload_bytes={(l.src_id, l.dst_id): l.payload_bytes for l in self.links},
            link_packets={(l.src_id, l.dst_id): l.packets for l in self.links},
            link_drops={(l.src_id, l.dst_id): l.drops for l in self.links},
            host_stats={
                h.node_id: {
                    "results": h.host.results_received,
                    "retransmissions": h.host.retransmissions,
                    "dup_drops": h.host.dup_drops,
                    "gap_drops": h.host.gap_drops,
                }
                for h in self.hosts
            },
            accel_stats={s.node_id: asdict(s.accel.stats) for s in self.switches},
        )

    def trace_rows(self) -> list[tuple]:
        rows = []
        for h in self.hosts:
            if h.host.events:
                rows.extend(("host", *e) for e in h.host.events)
        for s in self.switches:
            if s.accel.events:
                rows.extend(("switch", *e) for e in s.accel.events)
        rows.sort(key=lambda r: (r[1], str(r[2])))
        return rows


# -- experiment configuration and builders ---------------------------------

HOST_IP_BASE = 0x0A000000
LEAF_IP_BASE = 0x0B000000
SPINE_IP = 0x0C000000
DATA_QP_BASE = 0x100
ACK_QP_BASE = 0x800
RING_ID = 1


def host_ip(i: int) -> int:
    return HOST_IP_BASE + i


def leaf_ip(j: int) -> int:
    return LEAF_IP_BASE + j


@dataclass
class SimConfig:
    topology: str = "single"        # "single" | "spine_leaf"
    num_hosts: int = 4              # single-switch topology
    num_leaves: int = 3             # spine-leaf topology
    workers_per_leaf: int = 2
    tensor_words: int = 4096
    msg_len: int = 16               # packets per message
    pkt_payload_bytes: int = 1024
    window: int = 2
    bandwidth: float = 12.5e9       # bytes/s per link
    propagation: float = 1e-6       # seconds per hop
    accel_latency: float = 3e-6     # aggregation pipeline delay per switch
    loss_rate: float = 0.0
    retransmit_timeout: float | None = None
    seed: int = 0
    max_events: int = 5_000_000
    record_events: bool = False

    def __post_init__(self) -> None:
        if self.topology not in ("single", "spine_leaf"):
            raise ConfigError(f"unknown topology {self.topology!r}")
        if self.tensor_words < 1:
            raise ConfigError("tensor_words must be >= 1")
        if self.topology == "single" and self.num_hosts < 2:
            raise ConfigError("need at least 2 hosts")
        if self.topology == "spine_leaf":
            if self.num_leaves < 2 or self.workers_per_leaf < 1:
                raise ConfigError("spine_leaf needs >= 2 leaves, >= 1 worker each")

    @property
    def total_hosts(self) -> int:
        if self.topology == "single":
            return self.num_hosts
        return self.num_leaves * self.workers_per_leaf

    def timeout(self) -> float:
        if self.retransmit_timeout is not None:
            return self.retransmit_timeout
        # enough for a full window of messages to serialize plus switch hops
        from .protocol import AGG_HEADER_BYTES, BASE_HEADER_BYTES
        msg_wire = self.msg_len * (BASE_HEADER_BYTES + self.pkt_payload_bytes) \
            + AGG_HEADER_BYTES
        hops = 2 if self.topology == "single" else 4
        rtt = hops * self.propagation + 2 * self.accel_latency
        return 4.0 * (rtt + (self.window + 1) * msg_wire / self.bandwidth)


def make_tensors(cfg: SimConfig) -> list[np.ndarray]:
    """Per-host contributions, bounded so no column sum can saturate."""
    n = cfg.total_hosts
    bound = (1 << 30) // n
    children = np.random.SeedSequence(cfg.seed).spawn(n)
    return [
        np.random.default_rng(children[i]).integers(
            -bound, bound, cfg.tensor_words, dtype=np.int32)
        for i in range(n)
    ]


def expected_result(tensors: list[np.ndarray]) -> np.ndarray:
    from . import fixedpoint
    acc = tensors[0].copy()
    for t in tensors[1:]:
        acc = fixedpoint.saturating_add_arrays(acc, t)
    return acc


def _make_hosts(cfg: SimConfig, sim: Simulator, tensors) -> list[ProtocolHostNode]:
    n = cfg.total_hosts
    ring_cfg = RingConfig(
        ring_id=RING_ID, num_hosts=n, window=cfg.window,
        msg_len=cfg.msg_len, pkt_payload_bytes=cfg.pkt_payload_bytes,
    )
    nodes = []
    for i in range(n):
        succ, pred = (i + 1) % n, (i - 1) % n
        send_t = TransportHeaders(
            src_mac=host_ip(i), dst_mac=host_ip(succ), src_ip=host_ip(i),
            dst_ip=host_ip(succ), dst_qp=DATA_QP_BASE + i, psn=0,
        )
        ack_t = TransportHeaders(
            src_mac=host_ip(i), dst_mac=host_ip(pred), src_ip=host_ip(i),
            dst_ip=host_ip(pred), dst_qp=ACK_QP_BASE + i, psn=0,
        )
        host = RingHost(ring_cfg, i, tensors[i], send_t, ack_t,
                        retransmit_timeout=cfg.timeout(),
                        record_events=cfg.record_events)
        nodes.append(sim.add_node(ProtocolHostNode(f"h{i}", host_ip(i), host)))
    return nodes


def build_single_switch(cfg: SimConfig, tensors=None) -> Simulator:
    sim = Simulator(seed=cfg.seed, max_events=cfg.max_events)
    tensors = tensors if tensors is not None else make_tensors(cfg)
    hosts = _make_hosts(cfg, sim, tensors)
    entry = RingTableEntry(RING_ID, cfg.num_hosts, cfg.window, cfg.msg_len)
    accel = AggregationAccelerator("sw0-accel", {RING_ID: entry}, role=Role.TOR,
                                   record_events=cfg.record_events)
    sw = sim.add_node(SwitchNode("sw0", 0x0B000000, accel, cfg.accel_latency))
    for h in hosts:
        h.uplink = sim.add_link(h, sw, cfg.bandwidth, cfg.propagation, cfg.loss_rate)
        sw.routes[h.ip] = sim.add_link(sw, h, cfg.bandwidth, cfg.propagation,
                                       cfg.loss_rate)
    return sim


def build_spine_leaf(cfg: SimConfig, tensors=None) -> Simulator:
    sim = Simulator(seed=cfg.seed, max_events=cfg.max_events)
    tensors = tensors if tensors is not None else make_tensors(cfg)
    hosts = _make_hosts(cfg, sim, tensors)
    n_leaves, per_leaf = cfg.num_leaves, cfg.workers_per_leaf
    leaf_map = {host_ip(i): leaf_ip(i // per_leaf) for i in range(cfg.total_hosts)}
    leaf_entry = RingTableEntry(RING_ID, per_leaf, cfg.window, cfg.msg_len)
    spine_entry = RingTableEntry(RING_ID, n_leaves, cfg.window, cfg.msg_len)

    spine_accel = AggregationAccelerator(
        "spine-accel", {RING_ID: spine_entry}, role=Role.SPINE,
        ip=SPINE_IP, mac=SPINE_IP, record_events=cfg.record_events)
    spine = sim.add_node(SwitchNode("spine", SPINE_IP, spine_accel,
                                    cfg.accel_latency))

    for j in range(n_leaves):
        accel = AggregationAccelerator(
            f"leaf{j}-accel", {RING_ID: leaf_entry}, role=Role.LEAF,
            ip=leaf_ip(j), mac=leaf_ip(j), spine_ip=SPINE_IP, spine_mac=SPINE_IP,
            leaf_of=leaf_map, record_events=cfg.record_events)
        leaf = sim.add_node(SwitchNode(f"leaf{j}", leaf_ip(j), accel,
                                       cfg.accel_latency))
        leaf.default_link = sim.add_link(leaf, spine, cfg.bandwidth,
                                         cfg.propagation, cfg.loss_rate)
        spine.routes[leaf.ip] = sim.add_link(spine, leaf, cfg.bandwidth,
                                             cfg.propagation, cfg.loss_rate)
        for i in range(j * per_leaf, (j + 1) * per_leaf):
            h = hosts[i]
            h.uplink = sim.add_link(h, leaf, cfg.bandwidth, cfg.propagation,
                                    cfg.loss_rate)
            leaf.routes[h.ip] = sim.add_link(leaf, h, cfg.bandwidth,
                                             cfg.propagation, cfg.loss_rate)
            spine.routes[h.ip] = spine.routes[leaf.ip]
    return sim


def build_simulation(cfg: SimConfig, tensors=None) -> Simulator:
    if cfg.topology == "single":
        return build_single_switch(cfg, tensors)
    return build_spine_leaf(cfg, tensors)


def run_simulation(cfg: SimConfig, tensors=None) -> tuple[Simulator, SimReport]:
    sim = build_simulation(cfg, tensors)
    report = sim.run()
    return sim, report


# -- ring all-reduce reference traffic --------------------------------------

def ring_reference_script(i: int, num_hosts: int, tensor_bytes: int,
                          pkt_payload_bytes: int) -> list[Packet]:
    """Packets host i sends in a classic ring all-reduce: 2(P-1) rounds of a
    1/P tensor chunk to the ring successor. No aggregation headers; the
    switch treats it as ordinary traffic."""
    chunk_words = -(-tensor_bytes // num_hosts) // 4
    words_per_pkt = pkt_payload_bytes // 4
    succ = (i + 1) % num_hosts
    pkts = []
    psn = 0
    for _ in range(2 * (num_hosts - 1)):
        remaining = chunk_words
        while remaining > 0:
            take = min(words_per_pkt, remaining)
            pkts.append(Packet(
                transport=TransportHeaders(
                    src_mac=host_ip(i), dst_mac=host_ip(succ), src_ip=host_ip(i),
                    dst_ip=host_ip(succ), dst_qp=0x2000 + i, psn=psn,
                ),
                payload=np.zeros(take, dtype=np.int32),
            ))
            psn = psn_add(psn, 1)
            remaining -= take
    return pkts


def run_ring_reference(num_hosts: int, tensor_bytes: int, pkt_payload_bytes: int,
                       bandwidth: float, propagation: float,
                       seed: int = 0) -> tuple[Simulator, SimReport]:
    """Loss-free byte accounting for the ring all-reduce traffic pattern on a
    single-switch topology with aggregation left unprovisioned."""
    sim = Simulator(seed=seed)
    accel = AggregationAccelerator("ref-accel", {}, role=Role.TOR)
    sw = sim.add_node(SwitchNode("sw0", 0x0B000000, accel, accel_latency=0.0))
    nodes = []
    for i in range(num_hosts):
        script = ring_reference_script(i, num_hosts, tensor_bytes, pkt_payload_bytes)
        node = sim.add_node(ScriptedSourceNode(f"h{i}", host_ip(i), script))
        nodes.append(node)
    for node in nodes:
        node.uplink = sim.add_link(node, sw, bandwidth, propagation)
        sw.routes[node.ip] = sim.add_link(sw, node, bandwidth, propagation)
    report = sim.run()
    return sim, report
