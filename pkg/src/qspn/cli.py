"""Command-line front end.

    qspn run --topology net.topo [--scenario s.scn] [--trace-out t] [--report-out r]
    qspn gen --levels 3 --group-size 4 --fanout 4,4,4 --seed 1 [-o net.topo]
    qspn check --topology net.topo [--scenario s.scn]
    qspn dump-maps --topology net.topo [--node 1.2.3]

Exit status: 0 success, 1 invariant failure (including a run that never
quiesces), 2 usage or parse error.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import sys
from collections import Counter
from dataclasses import dataclass
from typing import Optional

from .addressing import AddressError, TopologyParams, parse_address
from .check import probe_all, run_checks
from .engine import AllRnodesRejected, EngineConfig
from .rem import RemPolicy
from .simnet import (DEFAULT_MAX_MESSAGES, NonQuiescent, ScenarioError, SimError, SimNetwork,
                     TopologyError, dump_maps, generate_topology, load_scenario, load_topology,
                     parse_fanout)

EXIT_OK, EXIT_INVARIANT, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("qspn")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    topology: str
    scenario: Optional[str] = None
    seed: int = 0
    max_time: float = 600_000.0
    max_messages: int = DEFAULT_MAX_MESSAGES
    delta_base: float = 10.0
    mode: str = "rtt"
    loop_check: bool = True
    trace_out: Optional[str] = None
    report_out: Optional[str] = None
    duplicate_forward: bool = False

    def engine_config(self) -> EngineConfig:
        return EngineConfig(policy=RemPolicy(self.delta_base, self.mode), loop_check=self.loop_check,
                            fault_duplicate_forward=self.duplicate_forward)


def read_config_file(path: str) -> dict:
    """[rem] delta_base / mode and [sim] max_time_ms / max_messages, all optional."""
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as e:
        raise UsageError(f"config {path}: {e}") from None
    out = {}
    try:
        if cp.has_option("rem", "delta_base"):
            out["delta_base"] = cp.getfloat("rem", "delta_base")
        if cp.has_option("rem", "mode"):
            out["mode"] = cp.get("rem", "mode")
        if cp.has_option("sim", "max_time_ms"):
            out["max_time"] = cp.getfloat("sim", "max_time_ms")
        if cp.has_option("sim", "max_messages"):
            out["max_messages"] = cp.getint("sim", "max_messages")
    except ValueError as e:
        raise UsageError(f"config {path}: {e}") from None
    return out


def run_config(args) -> RunConfig:
    cfg = RunConfig(args.topology)
    if args.config:
        for k, v in read_config_file(args.config).items():
            setattr(cfg, k, v)
    # Command-line flags win over the config file.
    for name in ("scenario", "seed", "max_time", "max_messages", "delta_base", "mode",
                 "trace_out", "report_out"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    cfg.loop_check = not args.no_loop_check
    cfg.duplicate_forward = getattr(args, "inject_duplicate_forward", False)
    return cfg


def build(cfg: RunConfig) -> SimNetwork:
    try:
        topo = load_topology(cfg.topology)
        steps = load_scenario(cfg.scenario) if cfg.scenario else []
        econf = cfg.engine_config()
    except OSError as e:
        raise UsageError(str(e)) from None
    except (TopologyError, ScenarioError, ValueError) as e:
        raise UsageError(f"parse error: {e}") from None
    net = SimNetwork.from_topology(topo, econf, seed=cfg.seed, max_messages=cfg.max_messages)
    net.schedule(steps)
    return net


def simulate(cfg: RunConfig):
    """Build and run; returns (net, report or None, error text or None)."""
    net = build(cfg)
    try:
        return net, net.run_until_quiescent(cfg.max_time), None
    except NonQuiescent as e:
        return net, None, f"NonQuiescent: {e}"
    except ScenarioError as e:
        raise UsageError(f"scenario error: {e}") from None
    except (SimError, AllRnodesRejected) as e:
        return net, None, f"{type(e).__name__}: {e}"


def report_text(net: SimNetwork, report, error=None) -> str:
    lines = []
    if error:
        lines.append(f"status=failed error={error!r}")
        lines.append(f"messages={net.messages}")
        lines += [f"count {k} {v}" for k, v in sorted(net.by_kind.items())]
        return "\n".join(lines) + "\n"
    lines.append("status=ok")
    lines.append(report.to_text().rstrip("\n"))
    for a, e in sorted(net.engines.items()):
        lines.append(f"entries {a} {e.maps.target_count()}")
    probes = probe_all(net)
    tally = Counter(probes.values())
    lines.append(f"reach pairs={len(probes)} ok={tally['ok']} noroute={tally['noroute']} "
                 f"loops={tally['loop']}")
    lines += path_section(net)
    return "\n".join(lines) + "\n"


def path_section(net: SimNetwork) -> list[str]:
    """Distinct gnode paths carried by higher-level packets, in send order."""
    out, seen = [], set()
    for ev in net.trace:
        pkt = ev.pkt
        if pkt is None or pkt.level == 0 or not ev.kind.startswith("send.") or pkt.dead_hops:
            continue
        ids = [str(h) for h in pkt.traversed]
        if not ids:
            continue
        lines = [f"path L{pkt.level} {'>'.join(ids)}"]
        if pkt.bounced:
            lines.append(f"path L{pkt.level} {'>'.join(reversed(ids))} return")
        for line in lines:
            if line not in seen:
                seen.add(line)
                out.append(line)
    return out


def _write(path, text):
    if path in (None, "-"):
        sys.stdout.write(text)
        return
    try:
        with open(path, "w") as fh:
            fh.write(text)
    except OSError as e:
        raise UsageError(str(e)) from None


def cmd_run(args) -> int:
    cfg = run_config(args)
    net, report, error = simulate(cfg)
    if cfg.trace_out:
        _write(cfg.trace_out, net.render_trace())
    text = report_text(net, report, error)
    _write(cfg.report_out or "-", text)
    if error:
        print(f"error: {error}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


def cmd_gen(args) -> int:
    try:
        params = TopologyParams(args.levels, args.group_size)
        fanout = parse_fanout(args.fanout) if args.fanout else (min(4, args.group_size),) * args.levels
        topo = generate_topology(params, fanout, args.seed, extra=args.extra, full=args.full)
    except ValueError as e:
        raise UsageError(str(e)) from None
    _write(args.output, topo.to_text())
    return EXIT_OK


def cmd_check(args) -> int:
    cfg = run_config(args)
    net, _report, error = simulate(cfg)
    failed = False
    if error:
        print(f"FAIL termination: {error}")
        failed = True
    else:
        print(f"PASS termination: quiescent at t={net.clock:.1f} after {net.messages} messages")
    for v in run_checks(net):
        print(v.line())
        failed |= not v.ok
    return EXIT_INVARIANT if failed else EXIT_OK


def cmd_dump_maps(args) -> int:
    cfg = run_config(args)
    net, _report, error = simulate(cfg)
    if error:
        print(f"error: {error}", file=sys.stderr)
        return EXIT_INVARIANT
    nodes = sorted(net.engines)
    if args.node:
        try:
            want = net.labels.get(args.node) or parse_address(args.node, net.params)
        except AddressError as e:
            raise UsageError(str(e)) from None
        if want not in net.engines:
            raise UsageError(f"no node {args.node} in the network")
        nodes = [want]
    lines = [line for a in nodes for line in dump_maps(net.engines[a])]
    _write(args.output, "".join(line + "\n" for line in lines))
    return EXIT_OK


def _sim_flags(p: argparse.ArgumentParser):
    p.add_argument("--topology", required=True, help="topology file")
    p.add_argument("--scenario", help="scenario file")
    p.add_argument("--seed", type=int, help="seed for hooking randomness (default 0)")
    p.add_argument("--max-time-ms", dest="max_time", type=float, help="virtual time limit")
    p.add_argument("--max-messages", type=int, help="message budget before giving up")
    p.add_argument("--delta-base", type=float, help="REM change threshold base")
    p.add_argument("--mode", choices=("rtt", "bandwidth"), help="REM comparison mode")
    p.add_argument("--config", help="INI file with [rem] and [sim] sections")
    p.add_argument("--no-loop-check", action="store_true", help="debug: disable the loop check")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="qspn", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="simulate until quiescent, write trace and report")
    _sim_flags(p)
    p.add_argument("--trace-out", help="trace file")
    p.add_argument("--report-out", help="report file (default stdout)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("gen", help="write a random topology")
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--group-size", type=int, default=4)
    p.add_argument("--fanout", help="children per gnode for each level, e.g. 4,4,4")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--extra", type=float, default=0.3, help="probability of each non-tree border link")
    p.add_argument("--full", action="store_true", help="every gnode gets exactly fanout children")
    p.add_argument("-o", "--output", help="output file (default stdout)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("check", help="run and print invariant verdicts")
    _sim_flags(p)
    p.add_argument("--inject-duplicate-forward", action="store_true",
                   help="test hook: one engine forwards one packet twice")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("dump-maps", help="run and print every node's routes")
    _sim_flags(p)
    p.add_argument("--node", help="only this node (address or label)")
    p.add_argument("-o", "--output", help="output file (default stdout)")
    p.set_defaults(func=cmd_dump_maps)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"qspn: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"qspn: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
