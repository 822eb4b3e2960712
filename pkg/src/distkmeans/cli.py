"""Command-line entry point: generate datasets, run the protocol, compare with the oracle.

Exit codes: 0 success, 1 input error, 2 oracle mismatch, 3 internal error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, dkmeans, sim
from .errors import InputError, ProtocolError
from .graph import Graph

SCHEMA_VERSION = 1
EXIT_OK, EXIT_INPUT, EXIT_MISMATCH, EXIT_INTERNAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    """Usage errors are input errors here, not argparse's default code 2."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


@dataclass
class ResultDocument:
    config: dict
    centroids: list
    labels: list
    d_trace: list
    phase_rounds: list
    exit_reason: str
    steps_taken: int
    empty: list
    environment: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def from_result(cls, result: dkmeans.ClusteringResult, config: dict) -> ResultDocument:
        cents = [None if e else [float(v) for v in c] for c, e in zip(result.centroids, result.empty)]
        return cls(
            config=config,
            centroids=cents,
            labels=[int(v) for v in result.labels],
            d_trace=[float(v) for v in result.d_trace],
            phase_rounds=[dict(p) for p in result.phase_rounds],
            exit_reason=result.exit_reason,
            steps_taken=int(result.steps_taken),
            empty=[bool(e) for e in result.empty],
            environment={"version": __version__, "seed": config.get("seed")},
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, allow_nan=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> ResultDocument:
        obj = json.loads(text)
        version = obj.get("schema_version")
        if version != SCHEMA_VERSION:
            raise InputError(f"unsupported result schema version {version!r}")
        return cls(**obj)


def write_dataset(path: Path, ds: sim.Dataset) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["id"] + [f"x{j + 1}" for j in range(ds.d)]
    if ds.positions is not None:
        header += ["px", "py"]
    w.writerow(header)
    for i in range(ds.n):
        row = [int(ds.ids[i])] + [repr(float(v)) for v in ds.observations[i]]
        if ds.positions is not None:
            row += [repr(float(v)) for v in ds.positions[i]]
        w.writerow(row)
    path.write_text(buf.getvalue())


def read_dataset(path: Path) -> sim.Dataset:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read dataset {path}: {exc}") from exc
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise InputError(f"{path}: empty dataset file")
    header = [h.strip() for h in rows[0]]
    xcols = [j for j, h in enumerate(header) if h.startswith("x")]
    if not header or header[0] != "id" or not xcols:
        raise InputError(f"{path}: header must be id,x1,...,xd[,px,py]")
    pcols = [header.index(h) for h in ("px", "py") if h in header]
    if len(pcols) == 1:
        raise InputError(f"{path}: px and py must appear together")
    body = [r for r in rows[1:] if r]
    try:
        ids = [int(r[0]) for r in body]
        obs = [[float(r[j]) for j in xcols] for r in body]
        pos = [[float(r[j]) for j in pcols] for r in body] if pcols else None
    except (ValueError, IndexError) as exc:
        raise InputError(f"{path}: malformed row ({exc})") from exc
    if not body:
        raise InputError(f"{path}: no observations")
    if not np.all(np.isfinite(obs)):
        raise InputError(f"{path}: observations must be finite")
    return sim.Dataset(np.array(obs), None if pos is None else np.array(pos), np.array(ids))


def read_graph(path: Path, n: int) -> Graph:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read edge list {path}: {exc}") from exc
    try:
        return Graph.from_edge_list(n, text)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from exc


def _floats(text: Optional[str]) -> Optional[list[float]]:
    if text is None:
        return None
    try:
        return [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise InputError(f"expected comma-separated numbers, got {text!r}") from exc


def _scalar_or_list(values: list[float]):
    return values[0] if len(values) == 1 else values


def config_from_args(args) -> dkmeans.RunConfig:
    return dkmeans.RunConfig(
        k=args.k,
        max_steps=args.max_steps,
        exit_mode=args.exit.upper() if args.exit != "none" else "none",
        delta_max=args.delta_max,
        n_upper=args.n_upper,
        seed=args.seed,
        init_low=_scalar_or_list(_floats(args.init_low)),
        init_high=_scalar_or_list(_floats(args.init_high)),
        norm_weights=_floats(args.weights),
    )


def config_echo(cfg: dkmeans.RunConfig) -> dict:
    return {
        "k": cfg.k, "max_steps": cfg.max_steps, "exit_mode": cfg.exit_mode,
        "delta_max": cfg.delta_max, "n_upper": cfg.n_upper, "seed": cfg.seed,
        "init_low": cfg.init_low, "init_high": cfg.init_high, "norm_weights": cfg.norm_weights,
    }


def _load(args) -> tuple[sim.Dataset, Graph, dkmeans.RunConfig]:
    ds = read_dataset(Path(args.data))
    g = read_graph(Path(args.edges), ds.n)
    return ds, g, config_from_args(args)


def d_trace_csv(result: dkmeans.ClusteringResult) -> str:
    lines = ["step,D"] + [f"{t},{d!r}" for t, d in enumerate(result.d_trace, 1)]
    return "\n".join(lines) + "\n"


def phase_csv(result: dkmeans.ClusteringResult) -> str:
    lines = ["step," + ",".join(dkmeans.PHASES)]
    for t, p in enumerate(result.phase_rounds, 1):
        lines.append(f"{t}," + ",".join(str(p[k]) for k in dkmeans.PHASES))
    return "\n".join(lines) + "\n"


def phase_table(trace: sim.Trace) -> str:
    totals = trace.phase_totals()
    shares = trace.phase_shares()
    names = {"I": "initialization", "C": "centroid choice", "R": "centroid refinement", "E": "exit evaluation"}
    out = [f"{'phase':<22}{'rounds':>10}{'share':>9}"]
    for p in sim.PHASE_ORDER:
        out.append(f"{p + ' ' + names[p]:<22}{totals[p]:>10}{100 * shares[p]:>8.2f}%")
    out.append(f"{'total':<22}{trace.total_rounds:>10}")
    out.append(f"messages: {trace.message_count}")
    return "\n".join(out)


def cmd_generate(args) -> int:
    field_name = None if args.field == "none" else args.field
    ds, g, rejected = sim.make_dataset(args.n, args.d, args.seed, args.rho, field_name, args.max_attempts)
    write_dataset(Path(args.data), ds)
    Path(args.edges).write_text(g.to_edge_list())
    print(f"connected: yes (n={ds.n}, edges={g.edge_count}, rejected draws={rejected})")
    print(f"wrote {args.data} and {args.edges}")
    return EXIT_OK


def cmd_run(args) -> int:
    ds, g, cfg = _load(args)
    exp = sim.run_experiment(ds, g, cfg)
    doc = ResultDocument.from_result(exp.result, config_echo(cfg))
    out = Path(args.out)
    out.write_text(doc.to_json())
    stem = out.with_suffix("")
    Path(f"{stem}_dtrace.csv").write_text(d_trace_csv(exp.result))
    Path(f"{stem}_phases.csv").write_text(phase_csv(exp.result))
    if args.trace:
        Path(args.trace).write_text(exp.trace.to_jsonl())
    print(f"exit: {exp.result.exit_reason} after {exp.result.steps_taken} steps, D = {exp.result.d_trace[-1]!r}")
    print(f"wrote {out}")
    return EXIT_OK


def _fault(step: int, slot: int, amount: float):
    def tamper(t: int, agents) -> None:
        if t == step:
            for a in agents:
                a.centroids[slot - 1] = a.centroids[slot - 1] + amount
    return tamper


def cmd_compare(args) -> int:
    ds, g, cfg = _load(args)
    tamper = _fault(args.inject_fault, args.fault_slot, args.fault_amount) if args.inject_fault else None
    exp = sim.run_experiment(ds, g, cfg, tamper=tamper)
    devs = sim.step_deviations(exp.result, exp.oracle_trace, ds.observations)
    print(f"{'step':>5}{'centroid dev':>16}{'D dev':>14}{'label diffs':>13}")
    for dev in devs:
        print(f"{dev.step:>5}{dev.centroid:>16.3e}{dev.objective:>14.3e}{dev.label_mismatches:>13}")
    print(f"exit: distributed {exp.result.exit_reason}, oracle {exp.oracle_exit}")
    print()
    print(phase_table(exp.trace))
    bad = sim.first_divergent_step(devs, args.tolerance)
    if bad is None and exp.result.exit_reason != exp.oracle_exit:
        bad = exp.result.steps_taken
    if bad is not None:
        print(f"MISMATCH: first divergent step {bad} (tolerance {args.tolerance:g})")
        return EXIT_MISMATCH
    print(f"OK: all deviations below {args.tolerance:g}")
    return EXIT_OK


def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset CSV")
    p.add_argument("--edges", required=True, help="edge-list file")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--max-steps", type=int, default=100)
    p.add_argument("--exit", choices=["c1", "c2", "none"], default="c1")
    p.add_argument("--delta-max", type=float, default=1e-6)
    p.add_argument("--n-upper", type=int, default=None, help="upper bound on the network size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--weights", default=None, help="comma-separated diagonal of the norm weighting")
    p.add_argument("--init-low", default="0", help="scalar or comma-separated lower bounds")
    p.add_argument("--init-high", default="1", help="scalar or comma-separated upper bounds")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="distkmeans", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("generate", help="write a dataset CSV and a connected unit-disk edge list")
    gen.add_argument("--n", type=int, required=True)
    gen.add_argument("--d", type=int, default=2)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--topology", choices=["unit-disk"], default="unit-disk")
    gen.add_argument("--rho", type=float, default=sim.DEFAULT_RHO)
    gen.add_argument("--field", choices=["none", *sim.FIELDS], default="none")
    gen.add_argument("--max-attempts", type=int, default=1000)
    gen.add_argument("--data", default="dataset.csv")
    gen.add_argument("--edges", default="edges.txt")
    gen.set_defaults(func=cmd_generate)

    run = sub.add_parser("run", help="run the distributed protocol")
    _run_flags(run)
    run.add_argument("--out", default="result.json")
    run.add_argument("--trace", default=None, help="also write the round trace as JSON lines")
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="check the distributed run against centralized k-means")
    _run_flags(cmp_)
    cmp_.add_argument("--tolerance", type=float, default=1e-9)
    cmp_.add_argument("--inject-fault", type=int, default=0, metavar="STEP",
                      help="self-test: shift one centroid at every agent after this step's update")
    cmp_.add_argument("--fault-slot", type=int, default=1)
    cmp_.add_argument("--fault-amount", type=float, default=1e-3)
    cmp_.set_defaults(func=cmd_compare)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ProtocolError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001 - stable exit-code contract
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
