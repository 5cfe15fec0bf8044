"""Wire formats for the in-network aggregation transport.

The aggregation service rides on RoCE-style UDP encapsulation. A 16-byte
aggregation header is prepended to the payload of the *first* packet of every
message; the remaining packets of the message are plain transport packets
identified by their PSN falling inside the message's PSN range. Payload words
are 32-bit big-endian fixed-point integers.

Byte layout of the aggregation header (big-endian):

    offset 0   magic tag        4 bytes
    offset 4   ring id          2 bytes
    offset 6   reserved         2 bytes
    offset 8   message id       4 bytes
    offset 12  message length   2 bytes   (packets per message)
    offset 14  reserved         2 bytes
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from enum import Enum, auto

import numpy as np

AGG_MAGIC = 0x41474752  # "AGGR" in ASCII
AGG_HEADER_BYTES = 16
_AGG_STRUCT = struct.Struct(">IHHIHH")

ROCE_UDP_PORT = 4791

# Ethernet + IPv4 + UDP + base transport header carried by every packet.
ETH_HEADER_BYTES = 14
IPV4_HEADER_BYTES = 20
UDP_HEADER_BYTES = 8
BTH_BYTES = 12
BASE_HEADER_BYTES = ETH_HEADER_BYTES + IPV4_HEADER_BYTES + UDP_HEADER_BYTES + BTH_BYTES

WORD_BYTES = 4

# Nominal on-wire payload sizes for the two control packet kinds.
ACK_PAYLOAD_BYTES = 12
STASH_PAYLOAD_BYTES = 64

PSN_MOD = 1 << 24
PSN_HALF = 1 << 23
RING_ID_MOD = 1 << 16
MSG_ID_MOD = 1 << 32
MSG_LEN_MOD = 1 << 16


def psn_add(psn: int, delta: int) -> int:
    """PSN arithmetic is modular over the 24-bit sequence space."""
    return (psn + delta) % PSN_MOD


def psn_distance(a: int, b: int) -> int:
    """Forward distance from b to a, modulo the PSN space."""
    return (a - b) % PSN_MOD


def psn_in_range(psn: int, psn0: int, length: int) -> bool:
    """True iff psn lies in [psn0, psn0+length) under modular arithmetic."""
    return psn_distance(psn, psn0) < length


def psn_is_behind(psn: int, expected: int) -> bool:
    """True iff psn precedes expected in the half-window wrap convention."""
    d = psn_distance(psn, expected)
    return d != 0 and d >= PSN_HALF


@dataclass(frozen=True)
class AggregationHeader:
    """First-packet header marking and describing an aggregation message."""

    ring_id: int
    msg_id: int
    msg_len: int
    magic: int = AGG_MAGIC

    def __post_init__(self) -> None:
        if not 0 <= self.ring_id < RING_ID_MOD:
            raise ValueError(f"ring_id out of range: {self.ring_id}")
        if not 0 <= self.msg_id < MSG_ID_MOD:
            raise ValueError(f"msg_id out of range: {self.msg_id}")
        if not 1 <= self.msg_len < MSG_LEN_MOD:
            raise ValueError(f"msg_len must be in [1, 65535]: {self.msg_len}")

    def encode(self) -> bytes:
        return _AGG_STRUCT.pack(self.magic, self.ring_id, 0, self.msg_id, self.msg_len, 0)

    @classmethod
    def decode(cls, data: bytes) -> "AggregationHeader":
        if len(data) < AGG_HEADER_BYTES:
            raise ValueError(f"need {AGG_HEADER_BYTES} bytes, got {len(data)}")
        magic, ring_id, _, msg_id, msg_len, _ = _AGG_STRUCT.unpack(data[:AGG_HEADER_BYTES])
        if magic != AGG_MAGIC:
            raise ValueError(f"bad magic 0x{magic:08x}")
        return cls(ring_id=ring_id, msg_id=msg_id, msg_len=msg_len, magic=magic)


@dataclass(frozen=True)
class TransportHeaders:
    """Per-packet transport identity.

    The triple (src_ip, dst_ip, dst_qp) identifies a connection; psn orders
    packets within it.
    """

    src_mac: int
    dst_mac: int
    src_ip: int
    dst_ip: int
    dst_qp: int
    psn: int
    udp_dst_port: int = ROCE_UDP_PORT

    @property
    def conn_key(self) -> tuple[int, int, int]:
        return (self.src_ip, self.dst_ip, self.dst_qp)


class PacketKind(Enum):
    DATA = auto()
    ACK = auto()
    STASH = auto()


@dataclass(frozen=True)
class StashRecord:
    """Original headers of an aggregation packet, parked at the leaf that
    owns the packet's destination until the global result returns. Carries
    the ring and message ids so the receiving leaf can discard records for
    epochs it has already retired."""

    ring_id: int
    msg_id: int
    transport: TransportHeaders
    agg_header: AggregationHeader | None


@dataclass
class Packet:
    """One simulated packet. Payload arrays are treated as immutable."""

    transport: TransportHeaders
    agg_header: AggregationHeader | None = None
    payload: np.ndarray | None = None
    kind: PacketKind = PacketKind.DATA
    ack_ring_id: int | None = None
    ack_msg_id: int | None = None
    stash_record: StashRecord | None = None
    resolved: bool = False  # carries a final aggregate; never re-aggregated
    size_bytes: int = field(init=False)

    def __post_init__(self) -> None:
        size = BASE_HEADER_BYTES
        if self.kind is PacketKind.DATA:
            if self.agg_header is not None:
                size += AGG_HEADER_BYTES
            if self.payload is not None:
                size += WORD_BYTES * len(self.payload)
        elif self.kind is PacketKind.ACK:
            size += ACK_PAYLOAD_BYTES
        elif self.kind is PacketKind.STASH:
            size += STASH_PAYLOAD_BYTES
        self.size_bytes = size

    def with_payload(self, payload: np.ndarray, *, resolved: bool = False) -> "Packet":
        """Copy of this packet with the payload replaced, headers intact."""
        return Packet(
            transport=self.transport,
            agg_header=self.agg_header,
            payload=payload,
            kind=self.kind,
            resolved=resolved or self.resolved,
        )

    def with_transport(self, transport: TransportHeaders) -> "Packet":
        return Packet(
            transport=transport,
            agg_header=self.agg_header,
            payload=self.payload,
            kind=self.kind,
            resolved=self.resolved,
        )


def segment_message(
    ring_id: int,
    msg_id: int,
    payload: np.ndarray,
    pmtu_bytes: int,
    base_psn: int,
    transport: TransportHeaders,
) -> list[Packet]:
    """Split a message's words into packets.

    The first packet carries the aggregation header; packets take consecutive
    PSNs starting at base_psn; the last packet may be short; no padding.
    """
    if len(payload) == 0:
        raise ValueError("cannot segment an empty message")
    if pmtu_bytes < WORD_BYTES:
        raise ValueError(f"pmtu {pmtu_bytes} smaller than one word")
    words_per_pkt = pmtu_bytes // WORD_BYTES
    n_pkts = -(-len(payload) // words_per_pkt)  # ceil division
    if n_pkts >= MSG_LEN_MOD:
        raise ValueError(f"message needs {n_pkts} packets, exceeds the 16-bit length field")
    header = AggregationHeader(ring_id=ring_id, msg_id=msg_id, msg_len=n_pkts)
    packets = []
    for i in range(n_pkts):
        chunk = payload[i * words_per_pkt : (i + 1) * words_per_pkt]
        packets.append(
            Packet(
                transport=replace(transport, psn=psn_add(base_psn, i)),
                agg_header=header if i == 0 else None,
                payload=chunk,
            )
        )
    return packets
