"""Sliding-window end-host for switch-aggregated ring traffic.

Each ring member splits its tensor into fixed-size messages and keeps at most
N messages in flight: messages 0..N-1 are sent at start, and receiving the
aggregation result of message i releases message i+N. Results arrive on the
connection from the ring predecessor, because the switch forwards every
buffered packet to its original destination (the sender's successor) once the
packet's column aggregates.

Reliability mirrors RoCE reliable connections. The receiver accepts packets
strictly in PSN order, acknowledges each fully received result message to the
connection's sender (the ring predecessor), and re-acknowledges duplicates.
The sender keeps a per-message retransmit timer that is cancelled by that
ACK; on expiry the whole message is re-segmented and re-sent with the same
PSNs. The timer cannot be cancelled by the sender's own incoming results:
those travel on a different connection and may survive a loss that starved
the successor, or vice versa.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ProtocolViolation
from .protocol import (
    Packet,
    PacketKind,
    TransportHeaders,
    psn_add,
    psn_distance,
    psn_is_behind,
    segment_message,
)

WORD_BYTES = 4


@dataclass(frozen=True)
class RingConfig:
    """Shape of one aggregation ring, agreed by all members up front."""

    ring_id: int
    num_hosts: int
    window: int                 # max messages in flight per host
    msg_len: int                # packets per full-size message
    pkt_payload_bytes: int      # payload bytes per packet (PMTU)

    def __post_init__(self) -> None:
        if self.num_hosts < 1:
            raise ConfigError(f"num_hosts must be >= 1: {self.num_hosts}")
        if self.window < 1:
            raise ConfigError(f"window must be >= 1: {self.window}")
        if self.msg_len < 1:
            raise ConfigError(f"msg_len must be >= 1: {self.msg_len}")
        if self.pkt_payload_bytes < WORD_BYTES:
            raise ConfigError(f"pkt_payload_bytes must be >= {WORD_BYTES}")

    @property
    def words_per_pkt(self) -> int:
        return self.pkt_payload_bytes // WORD_BYTES

    @property
    def msg_words(self) -> int:
        return self.msg_len * self.words_per_pkt


@dataclass(frozen=True)
class MessagePlan:
    """Message boundaries derived from the tensor size; identical on every
    member, so a receiver can map any PSN back to (message, offset)."""

    base_psn: int
    word_starts: tuple[int, ...]
    word_counts: tuple[int, ...]
    pkt_counts: tuple[int, ...]
    psn_starts: tuple[int, ...]  # cumulative packet offsets from base_psn

    @classmethod
    def build(cls, total_words: int, cfg: RingConfig, base_psn: int = 0) -> "MessagePlan":
        if total_words < 1:
            raise ConfigError("tensor must contain at least one word")
        starts, counts, pkts, psns = [], [], [], []
        pos = 0
        psn_off = 0
        while pos < total_words:
            n_words = min(cfg.msg_words, total_words - pos)
            n_pkts = -(-n_words // cfg.words_per_pkt)
            starts.append(pos)
            counts.append(n_words)
            pkts.append(n_pkts)
            psns.append(psn_off)
            pos += n_words
            psn_off += n_pkts
        return cls(base_psn, tuple(starts), tuple(counts), tuple(pkts), tuple(psns))

    @property
    def num_msg(self) -> int:
        return len(self.word_counts)

    @property
    def total_pkts(self) -> int:
        return self.psn_starts[-1] + self.pkt_counts[-1]

    def psn0(self, msg_id: int) -> int:
        return psn_add(self.base_psn, self.psn_starts[msg_id])

    def last_psn(self, msg_id: int) -> int:
        return psn_add(self.base_psn, self.psn_starts[msg_id] + self.pkt_counts[msg_id] - 1)

    def locate_psn(self, psn: int) -> tuple[int, int] | None:
        """(msg_id, packet offset) for a PSN, or None if outside the plan."""
        d = psn_distance(psn, self.base_psn)
        if d >= self.total_pkts:
            return None
        i = bisect.bisect_right(self.psn_starts, d) - 1
        return i, d - self.psn_starts[i]


@dataclass
class HostActions:
    """Packets to transmit and timers to arm, returned by every handler."""

    packets: list[Packet] = field(default_factory=list)
    timers: list[tuple[float, int, int]] = field(default_factory=list)  # (at, msg_id, attempt)


class RingHost:
    """One ring member: window-gated sender plus in-order result receiver."""

    def __init__(
        self,
        cfg: RingConfig,
        host_id: int,
        tensor: np.ndarray,
        send_transport: TransportHeaders,
        ack_transport: TransportHeaders,
        retransmit_timeout: float,
        base_psn: int = 0,
        record_events: bool = False,
    ) -> None:
        if tensor.dtype != np.int32:
            raise ConfigError("tensor must be int32 fixed-point words")
        if retransmit_timeout <= 0:
            raise ConfigError(f"retransmit_timeout must be > 0: {retransmit_timeout}")
        self.cfg = cfg
        self.host_id = host_id
        self.tensor = tensor
        self.plan = MessagePlan.build(len(tensor), cfg, base_psn)
        self.send_transport = send_transport
        self.ack_transport = ack_transport
        self.retransmit_timeout = retransmit_timeout
        self.result = np.zeros(len(tensor), dtype=np.int32)

        self.window = min(cfg.window, self.plan.num_msg)
        self.sent = 0                    # messages sent at least once
        self.results_received = 0
        self.pending: dict[int, int] = {}  # msg_id -> attempt, awaiting ACK
        self.acked: set[int] = set()
        self.retransmissions = 0
        self.dup_drops = 0
        self.gap_drops = 0

        self._expected_psn = base_psn
        self._recv_msg = 0               # message index the receiver is inside
        self._recv_off = 0               # packets accepted within that message
        self.events: list[tuple] | None = [] if record_events else None

    # -- helpers ---------------------------------------------------------

    def _log(self, now: float, event: str, msg_id: int, psn: int) -> None:
        if self.events is not None:
            self.events.append((now, self.host_id, event, msg_id, psn))

    def _segment(self, msg_id: int) -> list[Packet]:
        start = self.plan.word_starts[msg_id]
        words = self.tensor[start : start + self.plan.word_counts[msg_id]]
        return segment_message(
            self.cfg.ring_id,
            msg_id,
            words,
            self.cfg.pkt_payload_bytes,
            self.plan.psn0(msg_id),
            self.send_transport,
        )

    def _send_fresh(self, msg_id: int, now: float, out: HostActions) -> None:
        in_flight = self.sent - self.results_received
        assert in_flight < self.window, "window overrun"
        self.sent += 1
        self.pending[msg_id] = 0
        out.packets.extend(self._segment(msg_id))
        out.timers.append((now + self.retransmit_timeout, msg_id, 0))
        self._log(now, "send", msg_id, self.plan.psn0(msg_id))

    def _ack_packet(self, msg_id: int) -> Packet:
        return Packet(
            transport=replace(self.ack_transport, psn=self.plan.last_psn(msg_id)),
            kind=PacketKind.ACK,
            ack_ring_id=self.cfg.ring_id,
            ack_msg_id=msg_id,
        )

    # -- handlers --------------------------------------------------------

    def start(self, now: float = 0.0) -> HostActions:
        out = HostActions()
        for msg_id in range(self.window):
            self._send_fresh(msg_id, now, out)
        return out

    def on_timeout(self, msg_id: int, attempt: int, now: float) -> HostActions:
        out = HostActions()
        if msg_id in self.acked or self.pending.get(msg_id) != attempt:
            return out  # stale timer
        self.retransmissions += 1
        self.pending[msg_id] = attempt + 1
        out.packets.extend(self._segment(msg_id))  # same PSNs as the original
        out.timers.append((now + self.retransmit_timeout, msg_id, attempt + 1))
        self._log(now, "retransmit", msg_id, self.plan.psn0(msg_id))
        return out

    def on_packet(self, pkt: Packet, now: float) -> HostActions:
        if pkt.kind is PacketKind.ACK:
            return self._on_ack(pkt, now)
        if pkt.kind is not PacketKind.DATA:
            return HostActions()  # stash control traffic is switch-to-switch
        return self._on_data(pkt, now)

    def _on_ack(self, pkt: Packet, now: float) -> HostActions:
        msg_id = pkt.ack_msg_id
        if pkt.ack_ring_id == self.cfg.ring_id and msg_id in self.pending:
            del self.pending[msg_id]
            self.acked.add(msg_id)
            self._log(now, "ack_rx", msg_id, pkt.transport.psn)
        return HostActions()

    def _on_data(self, pkt: Packet, now: float) -> HostActions:
        psn = pkt.transport.psn
        if psn != self._expected_psn:
            if psn_is_behind(psn, self._expected_psn):
                return self._on_duplicate(pkt, now)
            self.gap_drops += 1
            self._log(now, "gap_drop", -1, psn)
            return HostActions()

        msg_id, offset = self._recv_msg, self._recv_off
        if offset == 0:
            hdr = pkt.agg_header
            if hdr is None:
                raise ProtocolViolation(f"result message {msg_id} arrived without a header")
            if hdr.ring_id != self.cfg.ring_id or hdr.msg_id != msg_id:
                raise ProtocolViolation(
                    f"result for unknown message: got ring {hdr.ring_id} msg {hdr.msg_id}, "
                    f"expected ring {self.cfg.ring_id} msg {msg_id}"
                )
            if hdr.msg_len != self.plan.pkt_counts[msg_id]:
                raise ProtocolViolation(
                    f"message {msg_id} length {hdr.msg_len} != planned {self.plan.pkt_counts[msg_id]}"
                )

        word_pos = self.plan.word_starts[msg_id] + offset * self.cfg.words_per_pkt
        self.result[word_pos : word_pos + len(pkt.payload)] = pkt.payload
        self._expected_psn = psn_add(self._expected_psn, 1)
        self._recv_off += 1
        if self._recv_off < self.plan.pkt_counts[msg_id]:
            return HostActions()
        self._recv_msg += 1
        self._recv_off = 0
        return self.on_result_message(msg_id, now)

    def on_result_message(self, msg_id: int, now: float) -> HostActions:
        """A full aggregation result landed: ack it and release the next send."""
        self.results_received += 1
        self._log(now, "result", msg_id, self.plan.last_psn(msg_id))
        out = HostActions()
        out.packets.append(self._ack_packet(msg_id))
        self._log(now, "ack_tx", msg_id, self.plan.last_psn(msg_id))
        next_msg = msg_id + self.window
        if next_msg < self.plan.num_msg:
            self._send_fresh(next_msg, now, out)
        return out

    def _on_duplicate(self, pkt: Packet, now: float) -> HostActions:
        self.dup_drops += 1
        self._log(now, "dup_drop", -1, pkt.transport.psn)
        loc = self.plan.locate_psn(pkt.transport.psn)
        out = HostActions()
        if loc is not None:
            msg_id, offset = loc
            # Re-ack a completed message once per retransmitted copy so a lost
            # ACK cannot stall the sender forever.
            if msg_id < self._recv_msg and offset == self.plan.pkt_counts[msg_id] - 1:
                out.packets.append(self._ack_packet(msg_id))
                self._log(now, "ack_tx", msg_id, pkt.transport.psn)
        return out

    # -- status ----------------------------------------------------------

    @property
    def in_flight(self) -> int:
        return self.sent - self.results_received

    @property
    def done(self) -> bool:
        return self.results_received == self.plan.num_msg and not self.pending
