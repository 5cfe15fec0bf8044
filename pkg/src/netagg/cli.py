"""Command-line harness: analytic sweeps, packet simulations, cross-validation.

Modes
-----
model     analytic cost columns, one CSV row per sweep point
simulate  one packet-level run, one CSV row
sweep     analytic columns plus one simulation per sweep point
validate  packet run checked against a calibrated analytic prediction

Configuration is a ``key = value`` file ('#' starts a comment). The
--mode/--seed/--tolerance/--out flags override their config keys. Output is
CSV with a fixed column set; cells that do not apply are left blank. Reruns
with an identical config are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import costmodel
from .costmodel import CostParams
from .errors import ConfigError, DeadlockError
from .netsim import SimConfig, expected_result, make_tensors, run_simulation
from .protocol import (
    ACK_PAYLOAD_BYTES,
    AGG_HEADER_BYTES,
    BASE_HEADER_BYTES,
    WORD_BYTES,
)

CSV_COLUMNS = [
    "sweep_value",
    "t_flat_ring_s",
    "t_tencent_s",
    "t_hier_netreduce_s",
    "delta_fr_nh_s",
    "delta_tr_nh_s",
    "crossover_bytes",
    "sim_time_s",
]

# config keys and their parsers; unknown keys are rejected
_KEY_TYPES = {
    "mode": str,
    "out": str,
    "tolerance": float,
    # analytic cost parameters
    "procs": int,
    "group_size": int,
    "message_bytes": float,
    "alpha_s": float,
    "bandwidth_intra": float,
    "bandwidth_inter": float,
    # sweep control
    "sweep_axis": str,
    "sweep_values": str,
    "threads": int,
    # simulation parameters
    "topology": str,
    "num_hosts": int,
    "num_leaves": int,
    "workers_per_leaf": int,
    "tensor_words": int,
    "msg_len": int,
    "pkt_payload_bytes": int,
    "window": int,
    "bandwidth": float,
    "propagation_s": float,
    "accel_latency_s": float,
    "loss_rate": float,
    "retransmit_timeout_s": float,
    "seed": int,
    "max_events": int,
}

_AXIS_FIELDS = {
    "message_bytes": "M",
    "procs": "P",
    "group_size": "n",
    "alpha_s": "alpha",
    "bandwidth_intra": "B_intra",
    "bandwidth_inter": "B_inter",
}


def _parse_int(token: str) -> int:
    v = float(token)
    if v != int(v):
        raise ConfigError(f"expected an integer, got {token!r}")
    return int(v)


class RunConfig:
    """Typed view over the key=value file."""

    def __init__(self, raw: dict[str, str]):
        for key in raw:
            if key not in _KEY_TYPES:
                raise ConfigError(f"unknown config key {key!r}")
        self.raw = raw

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        raw = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key = value")
                key, _, value = line.partition("=")
                raw[key.strip()] = value.strip()
        return cls(raw)

    def has(self, key: str) -> bool:
        return key in self.raw

    def get(self, key: str, default=None):
        if key not in self.raw:
            return default
        token = self.raw[key]
        caster = _KEY_TYPES[key]
        try:
            return _parse_int(token) if caster is int else caster(token)
        except ConfigError:
            raise
        except ValueError:
            raise ConfigError(f"bad value for {key}: {token!r}") from None

    def require(self, key: str):
        if key not in self.raw:
            raise ConfigError(f"mode requires config key {key!r}")
        return self.get(key)

    def sweep_tokens(self) -> list[str]:
        tokens = [t.strip() for t in self.raw["sweep_values"].split(",") if t.strip()]
        if not tokens:
            raise ConfigError("sweep_values is empty")
        vals = []
        for t in tokens:
            try:
                vals.append(float(t))
            except ValueError:
                raise ConfigError(f"bad sweep value {t!r}") from None
        if len(vals) > 1:
            diffs = [b - a for a, b in zip(vals, vals[1:])]
            if not (all(d > 0 for d in diffs) or all(d < 0 for d in diffs)):
                raise ConfigError("sweep_values must be strictly monotone")
        return tokens


def _fmt(x) -> str:
    if x is None:
        return ""
    return repr(float(x))


def _base_cost_kwargs(cfg: RunConfig) -> dict:
    return {
        "P": cfg.require("procs"),
        "n": cfg.require("group_size"),
        "M": cfg.require("message_bytes"),
        "alpha": cfg.require("alpha_s"),
        "B_intra": cfg.require("bandwidth_intra"),
        "B_inter": cfg.require("bandwidth_inter"),
    }


def _model_cells(p: CostParams) -> dict[str, str]:
    cells = {
        "t_flat_ring_s": _fmt(costmodel.flat_ring_time(p)),
        "t_hier_netreduce_s": _fmt(costmodel.hierarchical_netreduce_time(p)),
        "delta_fr_nh_s": _fmt(costmodel.delta_fr_nh(p)),
        "crossover_bytes": _fmt(costmodel.crossover_tensor_size(p)),
    }
    if p.n & (p.n - 1):
        # three-phase hierarchical model is defined for power-of-two groups only
        cells["t_tencent_s"] = ""
        cells["delta_tr_nh_s"] = ""
    else:
        cells["t_tencent_s"] = _fmt(costmodel.tencent_time(p))
        cells["delta_tr_nh_s"] = _fmt(costmodel.delta_tr_nh(p))
    return cells


def _cost_point(cfg: RunConfig, axis: str | None, token: str | None) -> CostParams:
    kwargs = _base_cost_kwargs(cfg)
    if axis is not None:
        field = _AXIS_FIELDS[axis]
        value = float(token)
        if field in ("P", "n"):
            kwargs[field] = _parse_int(token)
        else:
            kwargs[field] = value
    try:
        return CostParams(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _sim_config(cfg: RunConfig, seed_override: int | None) -> SimConfig:
    kwargs = {}
    for cfg_key, sim_key in [
        ("topology", "topology"),
        ("num_hosts", "num_hosts"),
        ("num_leaves", "num_leaves"),
        ("workers_per_leaf", "workers_per_leaf"),
        ("tensor_words", "tensor_words"),
        ("msg_len", "msg_len"),
        ("pkt_payload_bytes", "pkt_payload_bytes"),
        ("window", "window"),
        ("bandwidth", "bandwidth"),
        ("propagation_s", "propagation"),
        ("accel_latency_s", "accel_latency"),
        ("loss_rate", "loss_rate"),
        ("retransmit_timeout_s", "retransmit_timeout"),
        ("seed", "seed"),
        ("max_events", "max_events"),
    ]:
        if cfg.has(cfg_key):
            kwargs[sim_key] = cfg.get(cfg_key)
    if seed_override is not None:
        kwargs["seed"] = seed_override
    return SimConfig(**kwargs)


def _sim_point(base: SimConfig, axis: str | None, token: str | None) -> SimConfig:
    """Map one sweep value onto the simulation parameters."""
    if axis is None:
        return base
    import dataclasses

    if axis == "message_bytes":
        nbytes = _parse_int(token)
        if nbytes % WORD_BYTES:
            raise ConfigError(f"message_bytes={nbytes} not a multiple of {WORD_BYTES}")
        return dataclasses.replace(base, tensor_words=nbytes // WORD_BYTES)
    if axis == "procs":
        procs = _parse_int(token)
        if base.topology == "single":
            return dataclasses.replace(base, num_hosts=procs)
        if procs % base.workers_per_leaf:
            raise ConfigError(
                f"procs={procs} not divisible by workers_per_leaf={base.workers_per_leaf}"
            )
        return dataclasses.replace(base, num_leaves=procs // base.workers_per_leaf)
    raise ConfigError(f"sweep axis {axis!r} cannot drive a simulation")


def _run_sim_cell(sim_cfg: SimConfig) -> tuple[str, str | None]:
    """Run one simulation; return (sim_time_s cell, error text)."""
    tensors = make_tensors(sim_cfg)
    sim, report = run_simulation(sim_cfg, tensors)
    expect = expected_result(tensors)
    for h in sim.hosts:
        if not np.array_equal(h.host.result, expect):
            return "", f"host {h.host.host_id} result mismatch"
    return _fmt(report.total_time), None


def _message_plan_counts(cfg: SimConfig) -> tuple[int, int, int, int]:
    words_per_pkt = cfg.pkt_payload_bytes // WORD_BYTES
    msg_words = cfg.msg_len * words_per_pkt
    num_msg = math.ceil(cfg.tensor_words / msg_words)
    total_pkts = math.ceil(cfg.tensor_words / words_per_pkt)
    tail_words = cfg.tensor_words - (num_msg - 1) * msg_words
    tail_pkts = math.ceil(tail_words / words_per_pkt)
    return num_msg, total_pkts, tail_words, tail_pkts


def calibrated_prediction(cfg: SimConfig) -> float:
    """Analytic completion time for a loss-free single-switch run.

    The single-switch model says one aggregation costs a constant latency
    plus one tensor transfer. Calibration maps that onto the packet level:
    the transfer term is every byte a host uplink serializes (payload,
    per-packet headers, one aggregation header per message, and the acks it
    relays), and the latency term is the tail the last message sees after
    the uplink drains: two propagation legs up plus the accelerator delay,
    the result serialization back down, then the final ack's round to the
    ring predecessor.
    """
    num_msg, total_pkts, tail_words, tail_pkts = _message_plan_counts(cfg)
    data_wire = (
        WORD_BYTES * cfg.tensor_words
        + BASE_HEADER_BYTES * total_pkts
        + AGG_HEADER_BYTES * num_msg
    )
    ack_wire = BASE_HEADER_BYTES + ACK_PAYLOAD_BYTES
    uplink_bytes = data_wire + ack_wire * (num_msg - 1)
    tail_result_wire = (
        WORD_BYTES * tail_words + BASE_HEADER_BYTES * tail_pkts + AGG_HEADER_BYTES
    )
    alpha_cal = (
        4.0 * cfg.propagation
        + cfg.accel_latency
        + (tail_result_wire + 2.0 * ack_wire) / cfg.bandwidth
    )
    point = CostParams(P=cfg.num_hosts, M=float(uplink_bytes), alpha=alpha_cal,
                       B=cfg.bandwidth)
    return costmodel.netreduce_time(point)


def _write_rows(rows: list[dict[str, str]], out_path: str | None) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        full = {col: row.get(col, "") for col in CSV_COLUMNS}
        writer.writerow(full)
    text = buf.getvalue()
    if out_path:
        with open(out_path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _sweep_points(cfg: RunConfig, *, required: bool) -> tuple[str | None, list[str]]:
    axis = cfg.get("sweep_axis")
    if axis is None:
        if required:
            raise ConfigError("mode requires config key 'sweep_axis'")
        return None, [str(cfg.require("message_bytes"))]
    if axis not in _AXIS_FIELDS:
        raise ConfigError(f"unknown sweep_axis {axis!r}")
    if not cfg.has("sweep_values"):
        raise ConfigError("sweep_axis set but sweep_values missing")
    return axis, cfg.sweep_tokens()


def cmd_model(cfg: RunConfig, out_path: str | None) -> int:
    axis, tokens = _sweep_points(cfg, required=False)
    rows = []
    for token in tokens:
        point = _cost_point(cfg, axis, token)
        cells = _model_cells(point)
        cells["sweep_value"] = token
        rows.append(cells)
    _write_rows(rows, out_path)
    return 0


def cmd_simulate(cfg: RunConfig, out_path: str | None, seed: int | None) -> int:
    sim_cfg = _sim_config(cfg, seed)
    cell, err = _run_sim_cell(sim_cfg)
    if err is not None:
        print(f"simulation failed: {err}", file=sys.stderr)
        return 1
    row = {"sweep_value": str(WORD_BYTES * sim_cfg.tensor_words), "sim_time_s": cell}
    _write_rows([row], out_path)
    return 0


def cmd_sweep(cfg: RunConfig, out_path: str | None, seed: int | None) -> int:
    axis, tokens = _sweep_points(cfg, required=True)
    base_sim = _sim_config(cfg, seed)
    sim_cfgs = [_sim_point(base_sim, axis, t) for t in tokens]
    workers = cfg.get("threads", min(8, os.cpu_count() or 1))
    if workers < 1:
        raise ConfigError("threads must be >= 1")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        sim_cells = list(pool.map(_run_sim_cell, sim_cfgs))
    rows = []
    for token, (cell, err) in zip(tokens, sim_cells):
        if err is not None:
            print(f"simulation failed at {axis}={token}: {err}", file=sys.stderr)
            return 1
        cells = _model_cells(_cost_point(cfg, axis, token))
        cells["sweep_value"] = token
        cells["sim_time_s"] = cell
        rows.append(cells)
    _write_rows(rows, out_path)
    return 0


def cmd_validate(cfg: RunConfig, seed: int | None, tolerance: float) -> int:
    sim_cfg = _sim_config(cfg, seed)
    tensors = make_tensors(sim_cfg)
    sim, report = run_simulation(sim_cfg, tensors)

    failures = 0

    def check(name: str, ok: bool, detail: str) -> None:
        nonlocal failures
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        failures += 0 if ok else 1

    expect = expected_result(tensors)
    exact = sum(np.array_equal(h.host.result, expect) for h in sim.hosts)
    check("results", exact == len(sim.hosts),
          f"bit-exact on {exact}/{len(sim.hosts)} hosts")

    clean = True
    detail = []
    for sw in sim.switches:
        audits = set(sw.accel.fire_audit.values())
        if audits - {1}:
            clean = False
            detail.append(f"{sw.node_id} fired a column more than once")
        if sw.accel.stats.double_aggregations:
            clean = False
            detail.append(f"{sw.node_id} double aggregation")
        if sw.accel.stash_size():
            clean = False
            detail.append(f"{sw.node_id} stash not drained")
    check("aggregation", clean, "; ".join(detail) or "exactly-once everywhere")

    if sim_cfg.topology == "single" and sim_cfg.loss_rate == 0.0:
        predicted = calibrated_prediction(sim_cfg)
        rel = abs(report.total_time - predicted) / predicted
        check("timing", rel <= tolerance,
              f"simulated {report.total_time:.6e}s vs model {predicted:.6e}s, "
              f"relative error {rel:.4f} (tolerance {tolerance})")
    else:
        print("SKIP  timing: no analytic completion-time model for this "
              "configuration")

    print("VALIDATION " + ("PASS" if failures == 0 else "FAIL"))
    return 0 if failures == 0 else 1


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="netagg",
        description="Cost models and packet-level simulation of in-network "
                    "gradient aggregation.",
    )
    parser.add_argument("--mode", choices=["model", "simulate", "sweep", "validate"])
    parser.add_argument("--config", help="key=value configuration file")
    parser.add_argument("--out", help="CSV output path (default: stdout)")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--tolerance", type=float,
                        help="relative error bound for validate (default 0.05)")
    args = parser.parse_args(argv)

    try:
        cfg = RunConfig.from_file(args.config) if args.config else RunConfig({})
        mode = args.mode or cfg.get("mode")
        if mode is None:
            raise ConfigError("no mode given (flag --mode or config key 'mode')")
        out_path = args.out or cfg.get("out")
        tolerance = args.tolerance if args.tolerance is not None \
            else cfg.get("tolerance", 0.05)
        if not 0 < tolerance < 1:
            raise ConfigError(f"tolerance must be in (0, 1): {tolerance}")

        if mode == "model":
            return cmd_model(cfg, out_path)
        if mode == "simulate":
            return cmd_simulate(cfg, out_path, args.seed)
        if mode == "sweep":
            return cmd_sweep(cfg, out_path, args.seed)
        return cmd_validate(cfg, args.seed, tolerance)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DeadlockError as exc:
        print(f"simulation deadlock: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
