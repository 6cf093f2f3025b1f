"""Command line: ``simmatch <command> [options]``.

Exit status is 0 on success, 1 on a usage error and 2 when an input file
is missing or malformed.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import detect, evaluate, formats, simm, synth
from .config import ConfigError, load_config
from .roadnet import LocalProjection, NetworkError, load_network, save_network

logger = logging.getLogger("simmatch")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _grid(text: str) -> tuple[int, int]:
    try:
        a, _, b = text.lower().partition("x")
        return int(a), int(b or a)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected NxM, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="simmatch", description="Map matching that tolerates map errors.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, trace=True):
        if trace:
            sp.add_argument("--trace", required=True, help="trace CSV, or a directory of them")
        sp.add_argument("--network", required=True, help="network JSON")
        sp.add_argument("--out", required=True)
        sp.add_argument("--config", help="key = value file (default: $SIMM_CONFIG)")

    m = sub.add_parser("match", help="sIMM match a trace to trajectory GeoJSON")
    common(m)
    m.add_argument("--mu-out", help="per-stage mode-weight CSV (t,mu_r_forward,mu_r_backward)")
    m.add_argument("--workers", type=int, default=1, help="processes for a directory of traces")

    b = sub.add_parser("baseline", help="pure HMM match for comparison")
    common(b)

    s = sub.add_parser("simulate", help="drive a random route and sample a noisy trace")
    s.add_argument("--network", help="network JSON (default: a generated grid)")
    s.add_argument("--grid", type=_grid, default=(6, 6), help="grid size NxM when no network is given")
    s.add_argument("--network-out", help="write the network used")
    s.add_argument("--out", required=True, help="trace CSV")
    s.add_argument("--length", type=float, default=700.0, help="route length in meters")
    s.add_argument("--interval", type=float, default=3.0)
    s.add_argument("--sigma", type=float, default=5.0)
    s.add_argument("--seed", type=int, default=0)

    c = sub.add_parser("corrupt", help="delete or flip streets of a network")
    c.add_argument("--network", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--delete", type=int, action="append", default=[], metavar="STREET")
    c.add_argument("--flip", type=int, action="append", default=[], metavar="STREET")

    d = sub.add_parser("detect", help="find map-error regions from matched trajectories")
    d.add_argument("--input", required=True, help="directory of trajectory GeoJSON files")
    d.add_argument("--network", help="network JSON, fixes the planar frame")
    d.add_argument("--out", required=True, help="report GeoJSON")
    d.add_argument("--summary", help="CSV summary (default: next to --out)")
    d.add_argument("--cell-size", type=float, default=detect.DEFAULT_CELL)
    d.add_argument("--min-traces", type=int, default=detect.DEFAULT_MIN_TRACES)

    e = sub.add_parser("eval", help="gap-bridging scores on seeded synthetic scenarios")
    e.add_argument("--runs", type=int, default=20)
    e.add_argument("--seed", type=int, default=0, help="first scenario seed")
    e.add_argument("--config")
    e.add_argument("--out", help="JSON summary (default: stdout)")

    k = sub.add_parser("bench", help="sIMM versus HMM wall time")
    k.add_argument("--size", type=int, default=50, help="grid blocks per side")
    k.add_argument("--points", type=int, default=1000)
    k.add_argument("--repeats", type=int, default=5)
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--config")
    return p


def _dump(doc, path, indent):
    Path(path).write_text(formats.dumps_geojson(doc, indent), encoding="utf-8")


def _match_one(trace, network, out, mu_out, cfg) -> None:
    net = load_network(network) if not hasattr(network, "edges") else network
    obs = formats.read_trace(trace)
    traj = simm.match(obs, net, cfg.params())
    _dump(formats.trajectory_geojson(traj, net), out, cfg.indent)
    if mu_out:
        formats.write_mode_trace(traj, mu_out)


def _job(args):
    trace, network, out, mu_out, cfg = args
    _match_one(trace, network, out, mu_out, cfg)
    return str(out)


def cmd_match(a, cfg) -> int:
    mu_out = a.mu_out or cfg.mu_out or None
    src = Path(a.trace)
    if not src.is_dir():
        _match_one(src, a.network, a.out, mu_out, cfg)
        return EXIT_OK
    traces = sorted(src.glob("*.csv"))
    if not traces:
        raise FileNotFoundError(f"no *.csv traces in {src}")
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    mu_dir = Path(mu_out) if mu_out else None
    if mu_dir:
        mu_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(t, a.network, out / f"{t.stem}.geojson", mu_dir / f"{t.stem}.csv" if mu_dir else None, cfg)
            for t in traces]
    if a.workers > 1:
        with ProcessPoolExecutor(a.workers) as pool:
            for name in pool.map(_job, jobs):
                logger.info("wrote %s", name)
    else:
        net = load_network(a.network)
        for t, _, o, mo, c in jobs:
            _match_one(t, net, o, mo, c)
            logger.info("wrote %s", o)
    return EXIT_OK


def cmd_baseline(a, cfg) -> int:
    net = load_network(a.network)
    fixes = simm.to_fixes(formats.read_trace(a.trace), net.projection)
    traj = evaluate.baseline_trajectory(fixes, net, cfg.params().hmm)
    _dump(formats.trajectory_geojson(traj, net), a.out, cfg.indent)
    return EXIT_OK


def cmd_simulate(a, cfg) -> int:
    if a.network:
        net = load_network(a.network)
    else:
        net = synth.grid_network(*a.grid)
    path = synth.generate_route(net, a.length, seed=a.seed)
    obs = synth.observe(path, net, a.interval, a.sigma, seed=a.seed + 1)
    formats.write_trace(obs, a.out)
    if a.network_out:
        save_network(net, a.network_out)
    logger.info("route over edges %s, %d observations", path.edges, len(obs))
    return EXIT_OK


def cmd_corrupt(a, cfg) -> int:
    net = load_network(a.network)
    edits = [("delete", s) for s in a.delete] + [("flip", s) for s in a.flip]
    save_network(synth.corrupt(net, edits), a.out)
    return EXIT_OK


def cmd_detect(a, cfg) -> int:
    files = sorted(Path(a.input).glob("*.geojson"))
    if not files:
        raise FileNotFoundError(f"no *.geojson trajectories in {a.input}")
    records = [(f.stem, formats.read_trajectory_points(f)) for f in files]
    if a.network:
        proj = load_network(a.network).projection
    else:
        pts = [p for _, ps in records for p in ps]
        if not pts:
            raise ValueError("trajectories hold no points")
        proj = LocalProjection(sum(p["lat"] for p in pts) / len(pts), sum(p["lon"] for p in pts) / len(pts))
    grid = detect.DensityGrid(a.cell_size)
    for name, pts in records:
        detect.accumulate(grid, detect.segments_from_points(pts, name, proj))
    regions = detect.report(grid, a.min_traces)
    _dump(detect.regions_geojson(regions, proj), a.out, cfg.indent)
    summary = a.summary or str(Path(a.out).with_suffix(".csv"))
    detect.write_summary(regions, summary, proj)
    print(f"{len(regions)} region(s) from {len(files)} trajectories")
    return EXIT_OK


def cmd_eval(a, cfg) -> int:
    params = cfg.params()
    net = synth.grid_network(6, 6)
    runs = [evaluate.gap_run(s, params, net) for s in range(a.seed, a.seed + a.runs)]
    text = json.dumps(evaluate.gap_summary(runs), indent=2) + "\n"
    if a.out:
        Path(a.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_bench(a, cfg) -> int:
    r = evaluate.bench(a.size, a.points, a.repeats, a.seed, cfg.params())
    print(f"sIMM {r['simm_s']:.3f} s  HMM {r['hmm_s']:.3f} s  ratio {r['ratio']:.2f} "
          f"({r['points']} points, {r['grid']}x{r['grid']} grid, median of {r['repeats']})")
    return EXIT_OK


COMMANDS = {"match": cmd_match, "baseline": cmd_baseline, "simulate": cmd_simulate,
            "corrupt": cmd_corrupt, "detect": cmd_detect, "eval": cmd_eval, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(getattr(a, "config", None))
        return COMMANDS[a.command](a, cfg)
    except (OSError, ConfigError, NetworkError, formats.TraceError, synth.ScenarioError,
            json.JSONDecodeError, ValueError) as exc:
        print(f"simmatch {a.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
