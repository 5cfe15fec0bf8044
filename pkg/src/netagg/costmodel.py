"""Closed-form communication time models for allreduce variants.

All quantities are SI base units: bytes, bytes/second, seconds. Parameters:

    P        total number of GPUs (ring members)
    n        GPUs per machine (P must divide evenly into machines)
    M        tensor size in bytes
    alpha    per-hop latency in seconds
    B        port bandwidth for the single-network (n = 1) models
    B_intra  intra-machine bandwidth
    B_inter  inter-machine (network) bandwidth

Modeled schemes:

    ring_time                    classic ring allreduce on a single network
    netreduce_time               single-switch in-network aggregation; each
                                 host transmits its tensor once and receives
                                 the aggregate once, independent of P
    flat_ring_time               ring allreduce across machines over the
                                 inter-machine network
    tencent_time                 three-phase hierarchical baseline:
                                 intra-machine reduce, inter-machine ring
                                 allreduce on n parallel rings, intra-machine
                                 broadcast
    hierarchical_netreduce_time  intra-machine reduce + in-network aggregation
                                 of one stream per machine + broadcast

Deltas are pairwise differences of those forms; crossover_tensor_size solves
delta_fr_nh(M) = 0 for the tensor size where the flat ring starts losing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class CostParams:
    """Parameter bundle shared by the closed-form models."""

    P: int
    M: float
    alpha: float
    n: int = 1
    B: float | None = None
    B_intra: float | None = None
    B_inter: float | None = None

    def __post_init__(self) -> None:
        if self.P < 2:
            raise ValueError(f"P must be >= 2: {self.P}")
        if self.n < 1:
            raise ValueError(f"n must be >= 1: {self.n}")
        if self.P % self.n:
            raise ValueError(f"P={self.P} not divisible by n={self.n}")
        if self.M < 0:
            raise ValueError(f"M must be >= 0: {self.M}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0: {self.alpha}")
        for name in ("B", "B_intra", "B_inter"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ValueError(f"{name} must be > 0: {v}")

    @property
    def H(self) -> int:
        """Machine count."""
        return self.P // self.n

    def _require(self, *names: str) -> list[float]:
        vals = []
        for name in names:
            v = getattr(self, name)
            if v is None:
                raise ValueError(f"{name} is required for this model")
            vals.append(v)
        return vals


def ring_time(p: CostParams) -> float:
    """Ring allreduce: 2(P-1) latency hops plus 2(P-1)/P of the tensor on the wire."""
    (B,) = p._require("B")
    return 2.0 * (p.P - 1) * p.alpha + (2.0 * (p.P - 1) / p.P) * (p.M / B)


def netreduce_time(p: CostParams) -> float:
    """Single-switch in-network aggregation: one latency plus one tensor transfer."""
    (B,) = p._require("B")
    return p.alpha + p.M / B


def delta_single(p: CostParams) -> float:
    """ring_time - netreduce_time, simplified; positive for all P >= 2."""
    (B,) = p._require("B")
    return (2.0 * p.P - 3.0) * p.alpha + ((p.P - 2.0) / p.P) * (p.M / B)


def flat_ring_time(p: CostParams) -> float:
    """Ring allreduce over the inter-machine network, all P members."""
    (B_inter,) = p._require("B_inter")
    return 2.0 * (p.P - 1) * p.alpha + 2.0 * ((p.P - 1) / p.P) * (p.M / B_inter)


def tencent_time(p: CostParams) -> float:
    """Three-phase hierarchical allreduce (n parallel inter-machine rings).

    Requires n to be a power of two; the intra-machine phases use
    halving/doubling trees of depth log2(n).
    """
    B_intra, B_inter = p._require("B_intra", "B_inter")
    if p.n & (p.n - 1):
        raise ValueError(f"n must be a power of two: {p.n}")
    n, P = p.n, p.P
    alpha_coef = (n * n + 3.0 * n * math.log2(n) - 3.0 * n + 2.0 * P) / n
    m_coef = (4.0 * (n - 1) * P * B_inter + 2.0 * (P - n) * n * B_intra) / (
        n * P * B_intra * B_inter
    )
    return alpha_coef * p.alpha + m_coef * p.M


def hierarchical_netreduce_time(p: CostParams) -> float:
    """Hierarchical in-network aggregation; the form has no P dependence."""
    B_intra, B_inter = p._require("B_intra", "B_inter")
    n = p.n
    alpha_coef = 2.0 * n - 1.0
    m_coef = (2.0 * (n - 1) * B_inter + n * B_intra) / (n * B_intra * B_inter)
    return alpha_coef * p.alpha + m_coef * p.M


def delta_tr_nh(p: CostParams) -> float:
    """tencent_time - hierarchical_netreduce_time, simplified form."""
    B_intra, B_inter = p._require("B_intra", "B_inter")
    if p.n & (p.n - 1):
        raise ValueError(f"n must be a power of two: {p.n}")
    n, P = p.n, p.P
    alpha_coef = 2.0 * P / n + 3.0 * math.log2(n) - n - 2.0
    m_coef = ((P - 2.0 * n) * n * B_intra + 2.0 * (n - 1) * P * B_inter) / (
        n * P * B_intra * B_inter
    )
    return alpha_coef * p.alpha + m_coef * p.M


def delta_fr_nh_m_coefficient(p: CostParams) -> float:
    """Coefficient of M in delta_fr_nh; negative means a crossover exists."""
    B_intra, B_inter = p._require("B_intra", "B_inter")
    n, P = p.n, p.P
    return ((P - 2.0) * n * B_intra - 2.0 * (n - 1) * P * B_inter) / (
        n * P * B_intra * B_inter
    )


def delta_fr_nh(p: CostParams) -> float:
    """flat_ring_time - hierarchical_netreduce_time, simplified form.

    Affine in M: (2P - 2n - 1) alpha + c * M with c from
    delta_fr_nh_m_coefficient.
    """
    alpha_coef = 2.0 * p.P - 2.0 * p.n - 1.0
    return alpha_coef * p.alpha + delta_fr_nh_m_coefficient(p) * p.M


def ratio_condition(P: int, n: int) -> float:
    """Bandwidth ratio B_intra/B_inter above which the hierarchical in-network
    scheme beats the flat ring for every tensor size: 2P/(P-2)."""
    if P <= 2:
        raise ValueError(f"P must be > 2: {P}")
    if not P > n >= 2:
        raise ValueError(f"requires P > n >= 2, got P={P}, n={n}")
    return 2.0 * P / (P - 2.0)


def crossover_tensor_size(p: CostParams) -> float | None:
    """Tensor size where the flat ring and the hierarchical in-network scheme
    cost the same. None when the M coefficient of the difference is >= 0
    (the hierarchical scheme then wins at every size)."""
    coef = delta_fr_nh_m_coefficient(p)
    if coef >= 0:
        return None
    alpha_term = (2.0 * p.P - 2.0 * p.n - 1.0) * p.alpha
    return -alpha_term / coef


@dataclass(frozen=True)
class WindowParams:
    """Inputs for sizing the sliding window of in-flight messages."""

    rtt: float             # seconds
    port_rate: float       # bytes/second
    msg_len: int           # packets per message
    pkt_size: float        # payload bytes per packet

    def __post_init__(self) -> None:
        if self.rtt < 0:
            raise ValueError(f"rtt must be >= 0: {self.rtt}")
        for name in ("port_rate", "msg_len", "pkt_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0: {getattr(self, name)}")


def min_window(w: WindowParams) -> int:
    """Smallest window that keeps the send pipe full: the bandwidth-delay
    product divided by the message size, at least 1."""
    quotient = (w.rtt * w.port_rate) / (w.msg_len * w.pkt_size)
    return max(1, math.ceil(quotient))
