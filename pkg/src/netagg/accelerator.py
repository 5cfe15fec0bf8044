"""Switch-resident gradient aggregation engine.

The accelerator watches RoCE-style traffic pass through a switch. Packets that
open an aggregation message carry a 16-byte header naming (ring, message,
length); the switch learns the sender's connection tuple from the first packet
and recovers (ring, host, message, offset) for every later packet from its PSN
alone. Payload words are summed per column, where a column is one packet
position of one message slot. Once every expected member contributed, the
buffered packets are released with the aggregated payload, so each receiver
sees a perfectly ordinary RC stream from its ring predecessor.

Bookkeeping per ring:

* arrival bitmap, hosts x (window+1)*msg_len columns, message-tagged so a
  retransmission from an older epoch can never corrupt a newer one;
* two lookup tables: connection tuple -> (ring, host), and per-connection
  PSN ranges keyed by message slot (slot = msg mod (window+1));
* a history of aggregated column payloads, kept until the slot's reuse epoch
  completes, which lets the switch replay a result that was lost downstream.

Three roles share the machinery. TOR terminates aggregation in one stage.
LEAF aggregates its local members, forwards one representative packet per
column to a spine, stashes the remaining headers at the leaf that owns each
packet's destination, and on the way back fans the global result out to local
receivers from the stash. SPINE aggregates one packet per leaf and returns
the result by swapping source and destination addresses.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import fixedpoint
from .errors import ConfigError, ProtocolViolation
from .protocol import (
    Packet,
    PacketKind,
    StashRecord,
    TransportHeaders,
    psn_distance,
    psn_in_range,
)


class Role(Enum):
    TOR = "tor"      # single-stage: aggregate all ring members
    LEAF = "leaf"    # first stage: aggregate local members, defer to spine
    SPINE = "spine"  # second stage: aggregate one contribution per leaf


class Classification(Enum):
    FIRST_AGGREGATION = "first"
    NON_FIRST_AGGREGATION = "non_first"
    PASSTHROUGH = "passthrough"


class ArrivalStatus(Enum):
    NEW = "new"            # bit set, payload accumulated, column still short
    FILLED = "filled"      # this arrival completed the column
    DUPLICATE = "dup"      # bit already set for this host and message
    STALE = "stale"        # column has moved on to a newer message


@dataclass(frozen=True)
class RingTableEntry:
    """Control-plane provisioning for one ring at one switch."""

    ring_id: int
    expected_hosts: int   # members this switch must hear from per column
    window: int           # sender window N; slots cycle mod N+1
    msg_len: int          # packets in a full-size message

    def __post_init__(self) -> None:
        if self.expected_hosts < 1:
            raise ConfigError(f"expected_hosts must be >= 1: {self.expected_hosts}")
        if self.window < 1:
            raise ConfigError(f"window must be >= 1: {self.window}")
        if self.msg_len < 1:
            raise ConfigError(f"msg_len must be >= 1: {self.msg_len}")


@dataclass(frozen=True)
class RecoveredInfo:
    """Everything the pipeline needs, recovered from headers or the LUTs."""

    ring_id: int
    host_id: int
    msg_id: int
    msg_pkts: int
    psn0: int
    offset: int
    first: bool


@dataclass(frozen=True)
class _Lut2Entry:
    msg_id: int
    psn0: int
    msg_pkts: int


class _ConnTable:
    """Per-connection message ranges, slotted by msg_id mod (window+1).

    The previous occupant of a slot is retained for replay until the ring
    retires its message, so at most 2*(window+1) entries exist per key.
    """

    def __init__(self, window: int) -> None:
        self.period = window + 1
        self.slots: dict[int, _Lut2Entry] = {}
        self.retained: dict[int, _Lut2Entry] = {}

    def _all(self):
        yield from self.slots.values()
        yield from self.retained.values()

    def find(self, psn: int) -> _Lut2Entry | None:
        for e in self._all():
            if psn_in_range(psn, e.psn0, e.msg_pkts):
                return e
        return None

    def insert(self, msg_id: int, psn0: int, msg_pkts: int) -> _Lut2Entry:
        slot = msg_id % self.period
        cur = self.slots.get(slot)
        if cur is not None and cur.msg_id == msg_id:
            if (cur.psn0, cur.msg_pkts) != (psn0, msg_pkts):
                raise ProtocolViolation(
                    f"message {msg_id} re-announced with different range"
                )
            return cur
        entry = _Lut2Entry(msg_id, psn0, msg_pkts)
        if cur is not None and cur.msg_id > msg_id:
            ret = self.retained.get(slot)
            if ret is not None and ret.msg_id == msg_id:
                return ret
            return entry  # ancient retransmission: serve it, don't store it
        for other in self._all():
            if other.msg_id != msg_id and (
                psn_distance(psn0, other.psn0) < other.msg_pkts
                or psn_distance(other.psn0, psn0) < msg_pkts
            ):
                raise ProtocolViolation(
                    f"PSN range of message {msg_id} overlaps live message {other.msg_id}"
                )
        if cur is not None:
            self.retained[slot] = cur
        self.slots[slot] = entry
        return entry

    def drop_below(self, floor: int) -> None:
        for table in (self.slots, self.retained):
            for slot in [s for s, e in table.items() if e.msg_id < floor]:
                del table[slot]

    def live_count(self, fully_aggregated: set[int]) -> int:
        return sum(1 for e in self._all() if e.msg_id not in fully_aggregated)


class _RingState:
    """Aggregation state for one ring at one switch."""

    def __init__(self, entry: RingTableEntry) -> None:
        self.entry = entry
        self.period = entry.window + 1
        ncols = self.period * entry.msg_len
        self.bits = np.zeros((entry.expected_hosts, ncols), dtype=bool)
        self.col_msg = np.full(ncols, -1, dtype=np.int64)
        self.col_aggregated = np.zeros(ncols, dtype=bool)
        self.col_global = np.zeros(ncols, dtype=bool)  # LEAF: spine result landed
        self.sums: list[np.ndarray | None] = [None] * ncols
        self.buffered: dict[int, list[tuple[int, Packet]]] = {}
        self.upstream: dict[int, Packet] = {}
        self.history: list[np.ndarray | None] = [None] * ncols
        self.history_msg = np.full(ncols, -1, dtype=np.int64)
        # True when history[col] is a final result (switch-local fire for
        # TOR/SPINE, returned spine result for LEAF); a leaf's local sum is
        # not safe to replay to receivers.
        self.history_global = np.zeros(ncols, dtype=bool)
        self.members: list[tuple] = []          # conn key by host_id
        self.conn_tables: dict[tuple, _ConnTable] = {}
        self.foreign_tables: dict[tuple, _ConnTable] = {}  # LEAF: transit conns
        self.uplink_table = _ConnTable(entry.window)
        self.uplink_registered: set[int] = set()
        self.msg_pkts: dict[int, int] = {}
        self.agg_count: dict[int, int] = {}
        self.fully_agg: set[int] = set()
        self.retire_floor = 0

    def column(self, msg_id: int, offset: int) -> int:
        return (msg_id % self.period) * self.entry.msg_len + offset


@dataclass
class AcceleratorStats:
    passthrough: int = 0
    first_packets: int = 0
    nonfirst_packets: int = 0
    fills: int = 0
    duplicates_discarded: int = 0
    replays: int = 0
    stale_forwards: int = 0
    upstream_resends: int = 0
    downstream_dups_dropped: int = 0
    missing_stash: int = 0
    self_addressed_drops: int = 0
    unsafe_clears: int = 0
    double_aggregations: int = 0
    stash_inserts: int = 0
    stash_drops: int = 0
    transit_replays: int = 0
    transit_drops: int = 0


@dataclass
class ProcessResult:
    emissions: list[Packet] = field(default_factory=list)
    accelerated: bool = False


class AggregationAccelerator:
    """Aggregation pipeline of one switch; see the module docstring."""

    def __init__(
        self,
        accel_id: str,
        rings: dict[int, RingTableEntry],
        role: Role = Role.TOR,
        ip: int | None = None,
        mac: int = 0,
        spine_ip: int | None = None,
        spine_mac: int = 0,
        leaf_of: dict[int, int] | None = None,
        record_events: bool = False,
    ) -> None:
        if role is Role.LEAF and (ip is None or spine_ip is None or leaf_of is None):
            raise ConfigError("leaf role needs own/spine addresses and a leaf map")
        if role is Role.SPINE and ip is None:
            raise ConfigError("spine role needs its own address")
        self.accel_id = accel_id
        self.role = role
        self.ip = ip
        self.mac = mac
        self.spine_ip = spine_ip
        self.spine_mac = spine_mac
        self.leaf_of = leaf_of or {}
        self.rings = {rid: _RingState(e) for rid, e in rings.items()}
        self.lut1: dict[tuple, tuple[int, int]] = {}
        self.lut1_capacity = sum(e.expected_hosts for e in rings.values())
        self.stash: dict[tuple[int, int], dict[int, StashRecord]] = {}
        self.uplink_qp_to_ring: dict[int, int] = {}
        self.fire_audit: dict[tuple[int, int, int], int] = {}
        self.stats = AcceleratorStats()
        self.events: list[tuple] | None = [] if record_events else None

    # -- tracing ----------------------------------------------------------

    def _log(self, now: float, kind: str, action: str, rec: RecoveredInfo | None) -> None:
        if self.events is None:
            return
        if rec is None:
            self.events.append((now, self.accel_id, kind, action, -1, -1, -1, -1))
        else:
            self.events.append(
                (now, self.accel_id, kind, action,
                 rec.ring_id, rec.host_id, rec.msg_id, rec.offset)
            )

    # -- classification and recovery --------------------------------------

    def classify(self, pkt: Packet) -> Classification:
        if pkt.kind is not PacketKind.DATA or pkt.resolved:
            return Classification.PASSTHROUGH
        if pkt.agg_header is not None:
            return Classification.FIRST_AGGREGATION
        hit = self.lut1.get(pkt.transport.conn_key)
        if hit is None:
            return Classification.PASSTHROUGH
        ring = self.rings[hit[0]]
        table = ring.conn_tables.get(pkt.transport.conn_key)
        if table is not None and table.find(pkt.transport.psn) is not None:
            return Classification.NON_FIRST_AGGREGATION
        return Classification.PASSTHROUGH

    def _register_member(self, key: tuple, ring_id: int) -> int:
        hit = self.lut1.get(key)
        if hit is not None:
            if hit[0] != ring_id:
                raise ProtocolViolation(
                    f"connection {key} already registered to ring {hit[0]}"
                )
            return hit[1]
        ring = self.rings[ring_id]
        if len(ring.members) >= ring.entry.expected_hosts:
            raise ConfigError(
                f"ring {ring_id} already has {ring.entry.expected_hosts} members"
            )
        if len(self.lut1) >= self.lut1_capacity:
            raise ConfigError("connection table full")
        host_id = len(ring.members)
        ring.members.append(key)
        ring.conn_tables[key] = _ConnTable(ring.entry.window)
        self.lut1[key] = (ring_id, host_id)
        return host_id

    def recover(self, pkt: Packet) -> RecoveredInfo | None:
        """Map a packet to (ring, host, message, offset); None for passthrough."""
        c = self.classify(pkt)
        key = pkt.transport.conn_key
        if c is Classification.FIRST_AGGREGATION:
            hdr = pkt.agg_header
            if hdr.ring_id not in self.rings:
                raise ProtocolViolation(f"unprovisioned ring {hdr.ring_id}")
            ring = self.rings[hdr.ring_id]
            if hdr.msg_len > ring.entry.msg_len:
                raise ProtocolViolation(
                    f"message length {hdr.msg_len} exceeds provisioned {ring.entry.msg_len}"
                )
            host_id = self._register_member(key, hdr.ring_id)
            entry = ring.conn_tables[key].insert(hdr.msg_id, pkt.transport.psn, hdr.msg_len)
            if hdr.msg_id >= ring.retire_floor:
                known = ring.msg_pkts.setdefault(hdr.msg_id, hdr.msg_len)
                if known != hdr.msg_len:
                    raise ProtocolViolation(
                        f"ring {hdr.ring_id} message {hdr.msg_id} announced as both "
                        f"{known} and {hdr.msg_len} packets"
                    )
            return RecoveredInfo(hdr.ring_id, host_id, hdr.msg_id, hdr.msg_len,
                                 entry.psn0, 0, True)
        if c is Classification.NON_FIRST_AGGREGATION:
            ring_id, host_id = self.lut1[key]
            entry = self.rings[ring_id].conn_tables[key].find(pkt.transport.psn)
            offset = psn_distance(pkt.transport.psn, entry.psn0)
            return RecoveredInfo(ring_id, host_id, entry.msg_id, entry.msg_pkts,
                                 entry.psn0, offset, False)
        return None

    # -- arrival state -----------------------------------------------------

    def _retag(self, ring: _RingState, col: int, msg_id: int) -> None:
        old = int(ring.col_msg[col])
        if old >= 0 and not ring.col_aggregated[col] and ring.bits[:, col].any():
            raise ProtocolViolation(
                f"window overrun: message {msg_id} reuses the column of "
                f"message {old} before it aggregated"
            )
        if old >= 0 and self.role is Role.LEAF and ring.col_aggregated[col] \
                and not ring.col_global[col]:
            raise ProtocolViolation(
                f"window overrun: message {msg_id} reuses the column of "
                f"message {old} before its global result returned"
            )
        ring.bits[:, col] = False
        ring.col_msg[col] = msg_id
        ring.col_aggregated[col] = False
        ring.col_global[col] = False
        ring.sums[col] = None
        ring.buffered.pop(col, None)
        ring.upstream.pop(col, None)

    def set_state(self, rec: RecoveredInfo, pkt: Packet) -> ArrivalStatus:
        """Record one arrival in the bitmap; accumulate its payload.

        Setting bit (host, slot, offset) clears the same host's bit one slot
        ahead, the position the next message reusing this PSN space will
        occupy. Normally that bit is a leftover from an epoch the window
        already forced to completion. A loss-delayed retransmit can instead
        find the pair bit guarding a live contribution to the next message;
        clearing it would disable duplicate detection there, so the clear is
        skipped and counted. Retagging wipes the column's bits anyway, so a
        skipped clear never strands state.
        """
        ring = self.rings[rec.ring_id]
        col = ring.column(rec.msg_id, rec.offset)
        cur = int(ring.col_msg[col])
        if cur > rec.msg_id:
            return ArrivalStatus.STALE
        if cur < rec.msg_id:
            self._retag(ring, col, rec.msg_id)
        # An aggregated column counts as a duplicate even if this host's bit
        # was paired-cleared since; accumulating into a fired sum would
        # corrupt it.
        if ring.col_aggregated[col] or ring.bits[rec.host_id, col]:
            return ArrivalStatus.DUPLICATE
        ring.bits[rec.host_id, col] = True
        paired = (col + ring.entry.msg_len) % (ring.period * ring.entry.msg_len)
        if ring.bits[rec.host_id, paired]:
            if ring.col_aggregated[paired]:
                ring.bits[rec.host_id, paired] = False
            else:
                self.stats.unsafe_clears += 1
        acc = ring.sums[col]
        if acc is None:
            ring.sums[col] = pkt.payload.copy()
        else:
            if len(acc) != len(pkt.payload):
                raise ProtocolViolation(
                    f"payload length {len(pkt.payload)} != column width {len(acc)} "
                    f"(ring {rec.ring_id} msg {rec.msg_id} offset {rec.offset})"
                )
            fixedpoint.saturating_accumulate(acc, pkt.payload)
        ring.buffered.setdefault(col, []).append((rec.host_id, pkt))
        if int(ring.bits[:, col].sum()) == ring.entry.expected_hosts:
            return ArrivalStatus.FILLED
        return ArrivalStatus.NEW

    # -- main pipeline -----------------------------------------------------

    def process(self, pkt: Packet, now: float = 0.0) -> ProcessResult:
        if pkt.kind is PacketKind.STASH:
            if pkt.transport.dst_ip == self.ip and self.role is Role.LEAF:
                self._stash_put(pkt.stash_record, now)
                return ProcessResult([], True)
            return ProcessResult([pkt], False)
        if pkt.kind is PacketKind.ACK:
            return ProcessResult([pkt], False)
        if self.role is Role.LEAF and pkt.transport.dst_ip == self.ip:
            return ProcessResult(self._downstream(pkt, now), True)
        if pkt.resolved:
            return ProcessResult([pkt], False)
        # Transit traffic is never aggregated: the spine only sums packets
        # addressed to it, a leaf only sums what its own workers sent.
        if self.role is Role.SPINE and pkt.transport.dst_ip != self.ip:
            self.stats.passthrough += 1
            return ProcessResult([pkt], False)
        if self.role is Role.LEAF and self.leaf_of.get(pkt.transport.src_ip) != self.ip:
            if self.leaf_of.get(pkt.transport.dst_ip) == self.ip:
                return self._transit_to_local(pkt, now)
            self.stats.passthrough += 1
            return ProcessResult([pkt], False)
        rec = self.recover(pkt)
        if rec is None:
            self.stats.passthrough += 1
            if pkt.transport.dst_ip == self.ip:
                self.stats.self_addressed_drops += 1
                self._log(now, "data", "self_drop", None)
                return ProcessResult([], False)
            return ProcessResult([pkt], False)
        if rec.first:
            self.stats.first_packets += 1
        else:
            self.stats.nonfirst_packets += 1
        return ProcessResult(self._aggregate(rec, pkt, now), True)

    def _aggregate(self, rec: RecoveredInfo, pkt: Packet, now: float) -> list[Packet]:
        ring = self.rings[rec.ring_id]
        status = self.set_state(rec, pkt)
        col = ring.column(rec.msg_id, rec.offset)

        if status is ArrivalStatus.STALE:
            if int(ring.history_msg[col]) == rec.msg_id and ring.history[col] is not None:
                self.stats.replays += 1
                self._log(now, "data", "replay", rec)
                return [self._emit_result(pkt, ring.history[col])]
            if self.role is Role.SPINE:
                # a raw forward would point back at this switch
                self.stats.self_addressed_drops += 1
                self._log(now, "data", "stale_drop", rec)
                return []
            self.stats.stale_forwards += 1
            self._log(now, "data", "stale_fwd", rec)
            return [pkt]

        if status is ArrivalStatus.DUPLICATE:
            if ring.col_aggregated[col]:
                if self.role is Role.LEAF and not ring.col_global[col]:
                    return self._nudge_upstream(ring, rec, col, pkt, now)
                self.stats.replays += 1
                self._log(now, "data", "replay", rec)
                return [self._emit_result(pkt, ring.history[col])]
            self.stats.duplicates_discarded += 1
            self._log(now, "data", "dup_drop", rec)
            return []

        if status is ArrivalStatus.NEW:
            self._log(now, "data", "accumulate", rec)
            return []
        return self._fire(ring, rec, col, now)

    def _fire(self, ring: _RingState, rec: RecoveredInfo, col: int, now: float) -> list[Packet]:
        """A column just heard from every expected member."""
        ring.col_aggregated[col] = True
        total = ring.sums[col]
        ring.history[col] = total
        ring.history_msg[col] = rec.msg_id
        ring.history_global[col] = self.role is not Role.LEAF
        self.stats.fills += 1
        self._log(now, "data", "fire", rec)

        audit_key = (rec.ring_id, rec.msg_id, rec.offset)
        n = self.fire_audit.get(audit_key, 0) + 1
        self.fire_audit[audit_key] = n
        if n > 1:
            self.stats.double_aggregations += 1

        done = ring.agg_count.get(rec.msg_id, 0) + 1
        ring.agg_count[rec.msg_id] = done
        if done == ring.msg_pkts[rec.msg_id]:
            ring.fully_agg.add(rec.msg_id)
            floor = rec.msg_id - ring.entry.window
            if floor > ring.retire_floor:
                self._retire(ring, floor)

        buffered = ring.buffered.pop(col, [])
        if self.role is Role.TOR:
            return [bp.with_payload(total, resolved=True) for _, bp in buffered]
        if self.role is Role.SPINE:
            return [self._swap(bp).with_payload(total) for _, bp in buffered]
        return self._leaf_uplink(ring, rec, col, total, buffered, now)

    def _retire(self, ring: _RingState, floor: int) -> None:
        ring.retire_floor = floor
        for key in ring.members:
            ring.conn_tables[key].drop_below(floor)
        for table in ring.foreign_tables.values():
            table.drop_below(floor)
        ring.uplink_table.drop_below(floor)
        for m in [m for m in ring.fully_agg if m < floor]:
            ring.fully_agg.discard(m)
            ring.agg_count.pop(m, None)
            ring.msg_pkts.pop(m, None)
            ring.uplink_registered.discard(m)

    # -- result emission ---------------------------------------------------

    def _emit_result(self, pkt: Packet, payload: np.ndarray) -> Packet:
        out = pkt.with_payload(payload, resolved=True)
        if self.role is Role.SPINE:
            out = self._swap(out)
        return out

    def _swap(self, pkt: Packet) -> Packet:
        t = pkt.transport
        return pkt.with_transport(replace(
            t, src_ip=t.dst_ip, dst_ip=t.src_ip, src_mac=t.dst_mac, dst_mac=t.src_mac,
        ))

    # -- two-tier: leaf uplink, stash, downstream --------------------------

    def _leaf_uplink(self, ring, rec, col, total, buffered, now) -> list[Packet]:
        canonical = next(bp for hid, bp in buffered if hid == 0)
        up = canonical.with_payload(total).with_transport(replace(
            canonical.transport,
            src_ip=self.ip, src_mac=self.mac,
            dst_ip=self.spine_ip, dst_mac=self.spine_mac,
        ))
        ring.upstream[col] = up
        prev = self.uplink_qp_to_ring.setdefault(up.transport.dst_qp, rec.ring_id)
        if prev != rec.ring_id:
            raise ProtocolViolation(
                f"uplink qp {up.transport.dst_qp} shared by rings {prev} and {rec.ring_id}"
            )
        if rec.msg_id not in ring.uplink_registered:
            ring.uplink_table.insert(rec.msg_id, rec.psn0, rec.msg_pkts)
            ring.uplink_registered.add(rec.msg_id)
        out = []
        for _, bp in buffered:
            record = StashRecord(rec.ring_id, rec.msg_id, bp.transport, bp.agg_header)
            dest_leaf = self.leaf_of.get(bp.transport.dst_ip)
            if dest_leaf is None:
                raise ConfigError(f"no leaf owns destination {bp.transport.dst_ip}")
            if dest_leaf == self.ip:
                self._stash_put(record, now)
            else:
                out.append(self._stash_packet(dest_leaf, record))
        out.append(up)
        return out

    def _stash_packet(self, dest_leaf: int, record: StashRecord) -> Packet:
        return Packet(
            transport=TransportHeaders(
                src_mac=self.mac, dst_mac=0, src_ip=self.ip,
                dst_ip=dest_leaf, dst_qp=0, psn=record.transport.psn,
            ),
            kind=PacketKind.STASH,
            stash_record=record,
        )

    def _nudge_upstream(self, ring, rec, col, pkt, now) -> list[Packet]:
        """Duplicate while the spine result is outstanding: the retransmission
        means some receiver starved, so refresh its stash entry and push the
        column to the spine again."""
        self.stats.upstream_resends += 1
        self._log(now, "data", "nudge", rec)
        record = StashRecord(rec.ring_id, rec.msg_id, pkt.transport, pkt.agg_header)
        dest_leaf = self.leaf_of.get(pkt.transport.dst_ip)
        if dest_leaf is None:
            raise ConfigError(f"no leaf owns destination {pkt.transport.dst_ip}")
        out = []
        if dest_leaf == self.ip:
            self._stash_put(record, now)
        else:
            out.append(self._stash_packet(dest_leaf, record))
        out.append(ring.upstream[col])
        return out

    def _stash_put(self, record: StashRecord, now: float) -> None:
        ring = self.rings.get(record.ring_id)
        if ring is None:
            raise ProtocolViolation(f"stash for unprovisioned ring {record.ring_id}")
        if record.msg_id < ring.retire_floor:
            self.stats.stash_drops += 1
            return
        ent = ring.uplink_table.find(record.transport.psn)
        if ent is not None:
            col = ring.column(ent.msg_id, psn_distance(record.transport.psn, ent.psn0))
            if int(ring.col_msg[col]) != ent.msg_id or ring.col_global[col]:
                self.stats.stash_drops += 1  # that column already resolved
                return
        key = (record.ring_id, record.transport.psn)
        self.stash.setdefault(key, {})[record.transport.dst_qp] = record
        self.stats.stash_inserts += 1
        self._log(now, "stash", "put", None)

    def _transit_to_local(self, pkt: Packet, now: float) -> ProcessResult:
        """Retransmitted data from another leaf's worker, addressed to ours.

        The receiver sits at its expected PSN, so forwarding a raw
        contribution would be accepted as a result and corrupt it. Replay the
        global result while this leaf still holds it; once the local epoch
        has moved past the message the receiver provably completed it, and
        the raw packet is forwarded purely to trigger a fresh ack. Anything
        unprovable is dropped and the sender's timer retries.
        """
        hdr = pkt.agg_header
        psn = pkt.transport.psn
        ring = None
        ent = None
        ring_id = -1
        if hdr is not None:
            ring = self.rings.get(hdr.ring_id)
            if ring is None:
                self.stats.passthrough += 1
                return ProcessResult([pkt], False)
            if hdr.msg_len > ring.entry.msg_len:
                raise ProtocolViolation(
                    f"message of {hdr.msg_len} packets exceeds the provisioned "
                    f"{ring.entry.msg_len} for ring {hdr.ring_id}"
                )
            ring_id = hdr.ring_id
            table = ring.foreign_tables.setdefault(
                pkt.transport.conn_key, _ConnTable(ring.entry.window)
            )
            ent = table.insert(hdr.msg_id, psn, hdr.msg_len)
        else:
            for rid, cand in self.rings.items():
                table = cand.foreign_tables.get(pkt.transport.conn_key)
                if table is None:
                    continue
                found = table.find(psn)
                if found is not None:
                    ring, ent, ring_id = cand, found, rid
                    break
        if ent is None:
            self.stats.transit_drops += 1
            self._log(now, "data", "transit_drop", None)
            return ProcessResult([], False)
        offset = psn_distance(psn, ent.psn0)
        col = ring.column(ent.msg_id, offset)
        rec = RecoveredInfo(ring_id, -1, ent.msg_id, ent.msg_pkts, ent.psn0,
                            offset, hdr is not None)
        if int(ring.history_msg[col]) == ent.msg_id and ring.history[col] is not None:
            if ring.history_global[col]:
                self.stats.transit_replays += 1
                self._log(now, "data", "transit_replay", rec)
                return ProcessResult([self._emit_result(pkt, ring.history[col])], True)
            self.stats.transit_drops += 1  # global result still outstanding
            self._log(now, "data", "transit_drop", rec)
            return ProcessResult([], False)
        if int(ring.history_msg[col]) > ent.msg_id:
            self.stats.stale_forwards += 1
            self._log(now, "data", "transit_fwd", rec)
            return ProcessResult([pkt], False)
        self.stats.transit_drops += 1
        self._log(now, "data", "transit_drop", rec)
        return ProcessResult([], False)

    def _downstream(self, pkt: Packet, now: float) -> list[Packet]:
        """Spine result returning to this leaf: fan out via stashed headers."""
        ring_id = self.uplink_qp_to_ring.get(pkt.transport.dst_qp)
        if ring_id is None:
            raise ProtocolViolation(
                f"data addressed to switch on unknown connection qp={pkt.transport.dst_qp}"
            )
        ring = self.rings[ring_id]
        psn = pkt.transport.psn
        ent = ring.uplink_table.find(psn)
        if ent is None:
            self.stats.downstream_dups_dropped += 1  # epoch already retired
            return []
        offset = psn_distance(psn, ent.psn0)
        col = ring.column(ent.msg_id, offset)
        if int(ring.col_msg[col]) != ent.msg_id or ring.col_global[col]:
            self.stats.downstream_dups_dropped += 1
            self._log(now, "data", "downstream_dup", None)
            return []
        if not ring.col_aggregated[col]:
            raise ProtocolViolation(
                f"global result for ring {ring_id} msg {ent.msg_id} offset {offset} "
                "arrived before the local column aggregated"
            )
        ring.history[col] = pkt.payload
        ring.history_msg[col] = ent.msg_id
        ring.history_global[col] = True
        ring.col_global[col] = True
        records = self.stash.pop((ring_id, psn), {})
        self.stats.missing_stash += ring.entry.expected_hosts - len(records)
        self._log(now, "data", "restore", RecoveredInfo(
            ring_id, -1, ent.msg_id, ent.msg_pkts, ent.psn0, offset, False))
        return [
            Packet(transport=r.transport, agg_header=r.agg_header,
                   payload=pkt.payload, resolved=True)
            for r in records.values()
        ]

    # -- introspection -----------------------------------------------------

    def live_range_count(self, ring_id: int) -> int:
        """Connection-table entries for messages still being aggregated."""
        ring = self.rings[ring_id]
        return sum(
            t.live_count(ring.fully_agg) for t in ring.conn_tables.values()
        )

    def stash_size(self) -> int:
        return sum(len(v) for v in self.stash.values())
