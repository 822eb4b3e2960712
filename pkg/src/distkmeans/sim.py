"""Experiment harness: dataset generators, round accounting and oracle matching."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import dkmeans, oracle
from .errors import InputError
from .graph import Graph, is_connected, unit_disk

DEFAULT_RHO = float(np.sqrt(2.0) / 5.0)
FIELDS = ("two-bump", "constant")
PHASE_ORDER = ("I", "C", "R", "E")


@dataclass
class Dataset:
    observations: np.ndarray
    positions: Optional[np.ndarray] = None
    ids: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        obs = np.asarray(self.observations, dtype=float)
        if obs.ndim == 1:
            obs = obs[:, None]
        if obs.ndim != 2 or len(obs) == 0:
            raise InputError("observations must be a non-empty n x d matrix")
        self.observations = obs
        n = len(obs)
        if self.positions is not None:
            pos = np.asarray(self.positions, dtype=float)
            if pos.shape != (n, 2):
                raise InputError(f"positions must be {n} x 2, got {pos.shape}")
            self.positions = pos
        ids = np.arange(n) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        if ids.shape != (n,) or len(set(ids.tolist())) != n:
            raise InputError("ids must be unique, one per observation")
        self.ids = ids

    @property
    def n(self) -> int:
        return len(self.observations)

    @property
    def d(self) -> int:
        return self.observations.shape[1]

    def placement(self) -> np.ndarray:
        """Positions, falling back to the observations when they are planar."""
        if self.positions is not None:
            return self.positions
        if self.d == 2:
            return self.observations
        raise InputError("dataset has no positions and observations are not 2-dimensional")


@dataclass
class Trace:
    """Round accounting for one run.

    ``records`` hold ``step``, ``phase`` (I/C/R/E), ``label``, ``rounds``
    and ``messages``; a message is one agent-to-neighbour transmission.
    """

    records: list[dict] = field(default_factory=list)
    rejections: int = 0
    wall_time: float = 0.0

    @classmethod
    def from_result(cls, result: dkmeans.ClusteringResult, rejections: int = 0,
                    wall_time: float = 0.0) -> Trace:
        recs = [{"step": r.step, "phase": r.letter, "label": r.label,
                 "rounds": r.rounds, "messages": r.messages} for r in result.round_log]
        return cls(recs, rejections, wall_time)

    @property
    def total_rounds(self) -> int:
        return sum(r["rounds"] for r in self.records)

    @property
    def message_count(self) -> int:
        return sum(r["messages"] for r in self.records)

    def phase_totals(self) -> dict[str, int]:
        out = dict.fromkeys(PHASE_ORDER, 0)
        for r in self.records:
            out[r["phase"]] += r["rounds"]
        return out

    def phase_shares(self) -> dict[str, float]:
        total = self.total_rounds
        return {p: (v / total if total else 0.0) for p, v in self.phase_totals().items()}

    def to_jsonl(self) -> str:
        """Summary line followed by one line per record; wall time is left out
        so the text depends only on the inputs."""
        head = {"kind": "summary", "total_rounds": self.total_rounds,
                "message_count": self.message_count, "rejections": self.rejections}
        lines = [json.dumps(head, sort_keys=True)]
        lines += [json.dumps({"kind": "record", **r}, sort_keys=True) for r in self.records]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> Trace:
        trace = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            obj = json.loads(line)
            kind = obj.pop("kind")
            if kind == "summary":
                trace.rejections = obj["rejections"]
            else:
                trace.records.append(obj)
        return trace


def gen_uniform_positions(n: int, seed: int | np.random.Generator) -> np.ndarray:
    """``n`` i.i.d. uniform points in the unit square."""
    if n < 1:
        raise InputError("n must be at least 1")
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 1.0, size=(n, 2))


def _two_bump(p: np.ndarray, centers=((0.25, 0.25), (0.75, 0.75)), width: float = 0.15) -> np.ndarray:
    centers = np.asarray(centers, dtype=float)
    sq = ((p[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
    raw = np.exp(-sq / (2 * width**2)).sum(axis=1)
    # peak of the sum sits at a bump center
    peak = np.exp(-((centers[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1) / (2 * width**2)).sum(axis=1).max()
    return raw / peak


def gen_scalar_field(positions: np.ndarray, field_spec: str | dict = "two-bump") -> np.ndarray:
    """Scalar observation per position, clipped to [0, 1].

    ``field_spec`` is a field name or a dict with a ``name`` key plus
    parameters: ``two-bump`` accepts ``centers`` and ``width``, ``constant``
    accepts ``value``.
    """
    params = {"name": field_spec} if isinstance(field_spec, str) else dict(field_spec)
    name = params.pop("name", None)
    p = np.asarray(positions, dtype=float)
    if name == "two-bump":
        values = _two_bump(p, **params)
    elif name == "constant":
        values = np.full(len(p), float(params.get("value", 0.5)))
    else:
        raise InputError(f"unknown field {name!r}; choose from {FIELDS}")
    return np.clip(values, 0.0, 1.0)


def connected_unit_disk(n: int, rho: float, rng: np.random.Generator,
                        max_attempts: int = 1000) -> tuple[np.ndarray, Graph, int]:
    """Draw positions until the unit-disk graph is connected.

    Returns positions, graph and the number of rejected draws.
    """
    for rejected in range(max_attempts):
        pos = gen_uniform_positions(n, rng)
        g = unit_disk(pos, rho)
        if is_connected(g):
            return pos, g, rejected
    raise InputError(f"no connected unit-disk graph with n={n}, rho={rho} after {max_attempts} draws")


def make_dataset(n: int, d: int, seed: int, rho: float = DEFAULT_RHO, field_name: Optional[str] = None,
                 max_attempts: int = 1000) -> tuple[Dataset, Graph, int]:
    """Positions, observations and a connected topology from one seed.

    Without a field, planar observations are the positions themselves and
    other dimensions are drawn uniformly in the unit cube. A field yields
    scalar observations, so it requires ``d == 1``.
    """
    if d < 1:
        raise InputError("d must be at least 1")
    rng = np.random.default_rng(seed)
    pos, g, rejected = connected_unit_disk(n, rho, rng, max_attempts)
    if field_name is not None:
        if d != 1:
            raise InputError("a scalar field produces 1-dimensional observations; use d=1")
        return Dataset(gen_scalar_field(pos, field_name)[:, None], pos), g, rejected
    if d == 2:
        return Dataset(pos.copy(), None), g, rejected
    return Dataset(rng.uniform(0.0, 1.0, size=(n, d)), pos), g, rejected


@dataclass
class ExperimentResult:
    result: dkmeans.ClusteringResult
    trace: Trace
    oracle_trace: list[oracle.KMeansState]
    oracle_exit: str

    @property
    def phase_shares(self) -> dict[str, float]:
        return self.trace.phase_shares()


def oracle_run(x: np.ndarray, config: dkmeans.RunConfig) -> tuple[list[oracle.KMeansState], str]:
    """Centralized k-means fed the same draws the leader makes."""
    d = x.shape[1]
    low, high = config.bounds(d)
    rng = np.random.default_rng(config.seed)
    init = oracle.draw_centroids(rng, config.k, low, high)
    return oracle.kmeans(x, init, config.max_steps, config.exit_mode, config.delta_max,
                         config.weights(d), repair_rng=rng, init_low=low, init_high=high)


def run_experiment(dataset: Dataset, g: Graph, config: dkmeans.RunConfig, rejections: int = 0,
                   tamper: Optional[Callable[[int, list[dkmeans.AgentState]], None]] = None,
                   ) -> ExperimentResult:
    start = time.perf_counter()
    result = dkmeans.run(dataset.observations, g, config, dataset.ids, tamper=tamper)
    trace = Trace.from_result(result, rejections, time.perf_counter() - start)
    otrace, oexit = oracle_run(dataset.observations, config)
    return ExperimentResult(result, trace, otrace, oexit)


@dataclass
class StepDeviation:
    step: int
    centroid: float
    objective: float
    label_mismatches: int

    def within(self, tol: float) -> bool:
        return self.label_mismatches == 0 and self.centroid < tol and self.objective < tol


def relative_deviation(a, b, floor: float = 0.0) -> float:
    """``max|a - b| / max|b|``, with ``floor`` guarding a zero reference."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        return float("inf")
    diff = float(np.max(np.abs(a - b))) if a.size else 0.0
    if diff == 0.0:
        return 0.0
    scale = max(float(np.max(np.abs(b))) if b.size else 0.0, floor)
    return diff / scale if scale > 0 else float("inf")


def step_deviations(result: dkmeans.ClusteringResult, oracle_trace: Sequence[oracle.KMeansState],
                    x: np.ndarray) -> list[StepDeviation]:
    """Per-step deviation of the distributed run from the oracle.

    A step present in only one of the two runs counts as infinitely divergent.
    """
    x = np.asarray(x, dtype=float)
    floor = 1e-12 * max(float(np.sum(x * x)), 1.0)
    out = []
    for t in range(max(len(oracle_trace), result.steps_taken)):
        if t >= len(oracle_trace) or t >= result.steps_taken:
            out.append(StepDeviation(t + 1, float("inf"), float("inf"), x.shape[0]))
            continue
        ref = oracle_trace[t]
        out.append(StepDeviation(
            t + 1,
            relative_deviation(result.centroid_trace[t], ref.centroids),
            relative_deviation(result.d_trace[t], ref.d, floor),
            int(np.sum(result.label_trace[t] != ref.labels)),
        ))
    return out


def first_divergent_step(devs: Sequence[StepDeviation], tol: float) -> Optional[int]:
    for dev in devs:
        if not dev.within(tol):
            return dev.step
    return None
