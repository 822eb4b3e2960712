"""Distributed k-means executed synchronously by every agent of a network.

Each main-cycle step runs four phases: propagation of the current centroids
by max-consensus, a local nearest-centroid choice, refinement through
sub-cluster averaging on the cluster subgraph followed by a network-wide
weighted average, and the exit test. Agent state lives in
:class:`AgentState`; the phase functions read every agent's state, run
one consensus primitive over the network and write the results back.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import consensus
from .errors import InputError, ProtocolError
from .graph import ClusterGraph, Graph, induce_cluster_graph, is_connected
from .oracle import draw_centroid, draw_centroids, nearest, weighted_sq_distance

EXIT_MODES = ("C1", "C2", "none")
PHASES = ("propagation", "choice", "refinement", "exit")
# one-letter phase codes used in round traces
PHASE_LETTER = {"init": "I", "propagation": "C", "choice": "C", "refinement": "R", "exit": "E"}
MAX_REPAIR_ATTEMPTS = 10


@dataclass
class SubclusterInfo:
    scc: np.ndarray
    scs: int
    is_subleader: bool
    subleader_id: int


@dataclass
class AgentState:
    """What one agent keeps between rounds, apart from its neighbour list.

    ``centroids`` is the ``(k, d)`` block; ``-inf`` rows mean "unknown".
    ``choice`` is 1-based with 0 meaning no choice yet.
    """

    id: int
    x: np.ndarray
    centroids: np.ndarray
    choice: int = 0
    prev_choice: int = 0
    mu: Optional[np.ndarray] = None
    mu_hat: Optional[np.ndarray] = None
    subcluster: Optional[SubclusterInfo] = None
    leader_flag: bool = False
    leader_id: int = -1
    n_estimate: int = 0
    last_d: float = float("nan")

    def persistent_vector(self) -> np.ndarray:
        """Flat float64 serialization of the persistent state."""
        k, d = self.centroids.shape
        mu = self.mu if self.mu is not None else np.zeros(k)
        mu_hat = self.mu_hat if self.mu_hat is not None else np.full(k, -np.inf)
        sc = self.subcluster
        sub = (np.concatenate([sc.scc, [sc.scs, float(sc.is_subleader), sc.subleader_id]])
               if sc is not None else np.full(d + 3, np.nan))
        return np.concatenate([
            [self.id], self.x, self.centroids.ravel(), [self.choice, self.prev_choice],
            mu, mu_hat, sub, [float(self.leader_flag), self.leader_id, self.n_estimate, self.last_d],
        ]).astype(np.float64)


@dataclass
class RunConfig:
    """Protocol parameters shared by all agents.

    ``init_low`` / ``init_high`` bound the uniform centroid draws per
    component (scalars broadcast). ``n_upper`` defaults to the true network
    size. ``norm_weights`` are the diagonal of the distance weighting.
    """

    k: int
    max_steps: int = 100
    exit_mode: str = "C1"
    delta_max: float = 1e-6
    n_upper: Optional[int] = None
    seed: int = 0
    init_low: float | Sequence[float] = 0.0
    init_high: float | Sequence[float] = 1.0
    norm_weights: Optional[Sequence[float]] = None
    fta_method: str = "exact"
    ranking: str = "shortcut"

    def validate(self, n: int, d: int) -> None:
        if self.k < 1 or self.k > n:
            raise InputError(f"k={self.k} must lie in 1..{n}")
        if self.max_steps < 1:
            raise InputError("max_steps must be at least 1")
        if self.exit_mode not in EXIT_MODES:
            raise InputError(f"exit mode must be one of {EXIT_MODES}")
        if not self.delta_max > 0:
            raise InputError("delta_max must be positive")
        if self.n_upper is not None and self.n_upper < n:
            raise InputError(f"n_upper={self.n_upper} is below the network size {n}")
        low, high = self.bounds(d)
        if np.any(low > high):
            raise InputError("init_low must not exceed init_high")
        w = self.weights(d)
        if w is not None and np.any(w <= 0):
            raise InputError("norm weights must be positive")

    def bounds(self, d: int) -> tuple[np.ndarray, np.ndarray]:
        try:
            low = np.broadcast_to(np.asarray(self.init_low, dtype=float), (d,)).copy()
            high = np.broadcast_to(np.asarray(self.init_high, dtype=float), (d,)).copy()
        except ValueError as exc:
            raise InputError(f"init range must be a scalar or have {d} components") from exc
        return low, high

    def weights(self, d: int) -> Optional[np.ndarray]:
        if self.norm_weights is None:
            return None
        w = np.asarray(self.norm_weights, dtype=float)
        if w.shape != (d,):
            raise InputError(f"norm weights must have {d} components")
        return w


@dataclass
class RoundRecord:
    step: int
    phase: str
    label: str
    rounds: int
    messages: int

    @property
    def letter(self) -> str:
        return PHASE_LETTER[self.phase]


@dataclass
class ClusteringResult:
    centroids: np.ndarray
    labels: np.ndarray
    d_trace: list[float]
    steps_taken: int
    phase_rounds: list[dict[str, int]]
    exit_reason: str
    empty: np.ndarray
    init_rounds: int = 0
    centroid_trace: list[np.ndarray] = field(default_factory=list)
    label_trace: list[np.ndarray] = field(default_factory=list)
    repairs: list[tuple[int, ...]] = field(default_factory=list)
    round_log: list[RoundRecord] = field(default_factory=list)
    leader_id: int = -1
    n_estimate: int = 0
    agents: list[AgentState] = field(default_factory=list, repr=False)

    @property
    def total_rounds(self) -> int:
        return sum(r.rounds for r in self.round_log)


class _Accountant:
    def __init__(self) -> None:
        self.log: list[RoundRecord] = []

    def hook(self, step: int, phase: str) -> consensus.RoundHook:
        def record(label: str, rounds: int, messages: int) -> None:
            self.log.append(RoundRecord(step, phase, label, rounds, messages))
        return record

    def step_rounds(self, step: int) -> dict[str, int]:
        out = dict.fromkeys(PHASES, 0)
        for r in self.log:
            if r.step == step:
                out[r.phase] += r.rounds
        return out


def _stack(agents: list[AgentState], attr: str) -> np.ndarray:
    return np.array([getattr(a, attr) for a in agents])


def leader_election(agents: list[AgentState], g: Graph, rounds: int,
                    hook: Optional[consensus.RoundHook] = None) -> int:
    """Max-consensus on identifiers; the largest id becomes the leader."""
    ids = np.array([a.id for a in agents], dtype=float)
    best = consensus.max_consensus(ids, g, rounds, hook, "leader-election")
    for a, b in zip(agents, best):
        a.leader_id = int(b)
        a.leader_flag = a.id == a.leader_id
    return agents[0].leader_id


def init_centroids(agents: list[AgentState], config: RunConfig, rng: np.random.Generator) -> None:
    """The leader draws ``k`` random centroids; everyone else starts at ``-inf``."""
    k = config.k
    d = len(agents[0].x)
    low, high = config.bounds(d)
    for a in agents:
        if a.leader_flag:
            a.centroids = draw_centroids(rng, k, low, high)
        else:
            a.centroids = np.full((k, d), -np.inf)


def propagation_vector(agent: AgentState, step: int) -> np.ndarray:
    """Initial max-consensus state encoding the agent's current knowledge.

    At step 1 this is the whole block. Later only the chosen slot carries the
    centroid; every other slot is ``-inf``.
    """
    if step == 1:
        return agent.centroids.ravel().copy()
    d = agent.centroids.shape[1]
    own = agent.centroids[agent.choice - 1]
    return np.kron(agent.mu, own) + np.kron(agent.mu_hat, np.ones(d))


def _check_identical(agents: list[AgentState]) -> None:
    first = agents[0].centroids
    for a in agents[1:]:
        if not np.array_equal(a.centroids, first):
            raise ProtocolError(f"agent {a.id} disagrees on the centroid block after propagation")


def centroid_propagation(agents: list[AgentState], g: Graph, step: int, n: int,
                         hook: Optional[consensus.RoundHook] = None) -> np.ndarray:
    k, d = agents[0].centroids.shape
    start = np.array([propagation_vector(a, step) for a in agents])
    out = consensus.max_consensus(start, g, n, hook, "propagation")
    for a, row in zip(agents, out):
        a.centroids = row.reshape(k, d)
    _check_identical(agents)
    return agents[0].centroids.copy()


def unchosen_slots(block: np.ndarray) -> list[int]:
    return [j for j in range(len(block)) if np.all(np.isneginf(block[j]))]


def repair_unchosen_centroids(agents: list[AgentState], g: Graph, n: int, config: RunConfig,
                              rng: np.random.Generator,
                              hook: Optional[consensus.RoundHook] = None) -> tuple[int, ...]:
    """Leader redraws every slot nobody chose and re-propagates it.

    Returns the repaired slots (0-based) in draw order.
    """
    leader = next(a for a in agents if a.leader_flag)
    d = leader.centroids.shape[1]
    low, high = config.bounds(d)
    repaired: list[int] = []
    for _ in range(MAX_REPAIR_ATTEMPTS):
        slots = unchosen_slots(leader.centroids)
        if not slots:
            return tuple(repaired)
        for j in slots:
            leader.centroids[j] = draw_centroid(rng, low, high)
            repaired.append(j)
        k = leader.centroids.shape[0]
        start = np.array([a.centroids.ravel() for a in agents])
        out = consensus.max_consensus(start, g, n, hook, "repair")
        for a, row in zip(agents, out):
            a.centroids = row.reshape(k, d)
        _check_identical(agents)
    raise ProtocolError(f"centroid slots still unchosen after {MAX_REPAIR_ATTEMPTS} redraws")


def nearest_centroid_choice(agent: AgentState, block: np.ndarray,
                            norm_weights: Optional[np.ndarray] = None) -> tuple[int, np.ndarray, np.ndarray]:
    """Pick the nearest centroid and encode the choice.

    Returns the 1-based choice, the one-hot ``mu`` and ``mu_hat`` (0 at the
    chosen slot, ``-inf`` elsewhere). The agent's state is updated too.
    """
    if not np.all(np.isfinite(block)):
        raise ProtocolError("nearest-centroid choice needs a fully known block")
    j = nearest(agent.x, block, norm_weights)
    k = len(block)
    mu = np.zeros(k)
    mu[j] = 1.0
    mu_hat = np.full(k, -np.inf)
    mu_hat[j] = 0.0
    agent.prev_choice = agent.choice
    agent.choice = j + 1
    agent.mu, agent.mu_hat = mu, mu_hat
    return j + 1, mu, mu_hat


def subcluster_phase(agents: list[AgentState], gc: ClusterGraph, n: int,
                     config: Optional[RunConfig] = None,
                     hook: Optional[consensus.RoundHook] = None) -> consensus.FtaPlan:
    """Centroid, leader and size of every connected piece of every cluster."""
    method = config.fta_method if config else "exact"
    ranking = config.ranking if config else "shortcut"
    ids = np.array([a.id for a in agents])
    plan = consensus.fta_setup(gc, n, ids, ranking=ranking, method=method, hook=hook)
    scc = consensus.fta_consensus(_stack(agents, "x"), plan, hook, "subcluster-centroid")
    leader = consensus.max_consensus(ids.astype(float), gc, n, hook, "subcluster-leader")
    flag = ids == leader
    scs = consensus.network_size(flag, plan, hook, "subcluster-size")
    for a, c, lid, f, s in zip(agents, scc, leader, flag, scs):
        a.subcluster = SubclusterInfo(np.array(c), int(s), bool(f), int(lid))
    return plan


def centroid_update(agents: list[AgentState], plan_g: consensus.FtaPlan,
                    hook: Optional[consensus.RoundHook] = None) -> np.ndarray:
    """Network-wide average of sub-cluster leaders' weighted sums.

    Returns the emptiness mask of the ``k`` slots. Empty slots keep their
    propagated value until the next repair.
    """
    k, d = agents[0].centroids.shape
    eta = np.zeros((len(agents), k * (d + 1)))
    for i, a in enumerate(agents):
        sc = a.subcluster
        if sc.is_subleader:
            j = a.choice - 1
            eta[i, j * (d + 1): j * (d + 1) + d] = sc.scc * sc.scs
            eta[i, j * (d + 1) + d] = sc.scs
    bar = consensus.fta_consensus(eta, plan_g, hook, "centroid-average")
    empty = None
    for a, row in zip(agents, bar):
        blocks = row.reshape(k, d + 1)
        sigma, eps = blocks[:, :d], blocks[:, d]
        if np.any(eps < 0):
            raise ProtocolError(f"agent {a.id}: negative cluster weight {eps}")
        mask = eps == 0
        a.centroids = a.centroids.copy()
        a.centroids[~mask] = sigma[~mask] / eps[~mask, None]
        if empty is None:
            empty = mask
        elif not np.array_equal(empty, mask):
            raise ProtocolError("agents disagree on which clusters are empty")
    return empty


def exit_check(agents: list[AgentState], g: Graph, plan_g: consensus.FtaPlan, mode: str,
               step: int, n: int, delta_max: float, norm_weights: Optional[np.ndarray] = None,
               hook: Optional[consensus.RoundHook] = None) -> tuple[bool, Optional[float]]:
    """Evaluate the exit criterion; the first step never exits.

    Returns ``(exit, D)`` where ``D`` is the consensus objective under C2 and
    ``None`` otherwise.
    """
    if mode == "C1":
        nu = np.array([float(a.choice != a.prev_choice) for a in agents])
        bar = consensus.max_consensus(nu, g, n, hook, "exit-c1")
        return step >= 2 and bool(np.all(bar == 0)), None
    if mode == "C2":
        nu = np.array([n * weighted_sq_distance(a.x, a.centroids[a.choice - 1], norm_weights)
                       for a in agents])
        bar = consensus.fta_consensus(nu, plan_g, hook, "exit-c2")
        d_now = float(bar[0])
        stop = step >= 2 and all(abs(b - a.last_d) < delta_max for a, b in zip(agents, bar))
        for a, b in zip(agents, bar):
            a.last_d = float(b)
        return stop, d_now
    return False, None


def observed_objective(agents: list[AgentState], norm_weights: Optional[np.ndarray] = None) -> float:
    """D(T) read off the agents' states by an outside observer."""
    return float(sum(weighted_sq_distance(a.x, a.centroids[a.choice - 1], norm_weights) for a in agents))


def run(x, g: Graph, config: RunConfig, ids: Optional[Sequence[int]] = None,
        tamper: Optional[Callable[[int, list[AgentState]], None]] = None) -> ClusteringResult:
    """Execute initialization and up to ``max_steps`` main-cycle steps.

    ``tamper(step, agents)``, when given, is called after each centroid
    update; it exists so tests can inject faults.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if g.vertex_count != n:
        raise InputError(f"graph has {g.vertex_count} vertices but there are {n} observations")
    if not is_connected(g):
        raise InputError("the communication graph must be connected")
    config.validate(n, d)
    ids = list(range(n)) if ids is None else [int(i) for i in ids]
    if len(ids) != n or len(set(ids)) != n:
        raise InputError("agent identifiers must be unique, one per observation")
    n_upper = config.n_upper or n
    norm_w = config.weights(d)

    agents = [AgentState(i, row.copy(), np.full((config.k, d), -np.inf)) for i, row in zip(ids, x)]
    acct = _Accountant()
    init = acct.hook(0, "init")

    leader_id = leader_election(agents, g, n_upper, init)
    plan_upper = consensus.fta_setup(g, n_upper, ids, ranking=config.ranking,
                                     method=config.fta_method, hook=init)
    sizes = consensus.network_size([a.leader_flag for a in agents], plan_upper, init, "network-size")
    if len(set(sizes.tolist())) != 1:
        raise ProtocolError(f"agents disagree on the network size: {sorted(set(sizes.tolist()))}")
    n_known = int(sizes[0])
    if n_known != n:
        raise ProtocolError(f"size estimate {n_known} differs from the true size {n}")
    for a in agents:
        a.n_estimate = n_known
    # weights built from the exact size differ from the upper-bound ones unless they coincide
    plan_g = plan_upper if n_upper == n_known else consensus.fta_setup(
        g, n_known, ids, ranking=config.ranking, method=config.fta_method, hook=init)

    rng = np.random.default_rng(config.seed)
    init_centroids(agents, config, rng)

    d_trace: list[float] = []
    phase_rounds: list[dict[str, int]] = []
    centroid_trace: list[np.ndarray] = []
    label_trace: list[np.ndarray] = []
    repairs: list[tuple[int, ...]] = []
    exit_reason = "M-exhausted"
    empty = np.zeros(config.k, dtype=bool)
    step = 0
    for step in range(1, config.max_steps + 1):
        block = centroid_propagation(agents, g, step, n_known, acct.hook(step, "propagation"))
        fixed = ()
        if unchosen_slots(block):
            fixed = repair_unchosen_centroids(agents, g, n_known, config, rng,
                                              acct.hook(step, "propagation"))
        repairs.append(fixed)
        block = agents[0].centroids
        for a in agents:
            nearest_centroid_choice(a, block, norm_w)
        # every agent tells its neighbours its choice: one round
        acct.hook(step, "choice")("choice-broadcast", 1, 2 * g.edge_count)
        gc = induce_cluster_graph(g, [a.choice for a in agents])
        refine = acct.hook(step, "refinement")
        subcluster_phase(agents, gc, n_known, config, refine)
        empty = centroid_update(agents, plan_g, refine)
        if tamper is not None:
            tamper(step, agents)
        stop, d_cons = exit_check(agents, g, plan_g, config.exit_mode, step, n_known,
                                  config.delta_max, norm_w, acct.hook(step, "exit"))
        d_trace.append(d_cons if d_cons is not None else observed_objective(agents, norm_w))
        centroid_trace.append(agents[0].centroids.copy())
        label_trace.append(np.array([a.choice for a in agents]))
        phase_rounds.append(acct.step_rounds(step))
        if stop:
            exit_reason = config.exit_mode
            break

    return ClusteringResult(
        centroids=agents[0].centroids.copy(),
        labels=np.array([a.choice for a in agents]),
        d_trace=d_trace,
        steps_taken=step,
        phase_rounds=phase_rounds,
        exit_reason=exit_reason,
        empty=empty,
        init_rounds=sum(r.rounds for r in acct.log if r.step == 0),
        centroid_trace=centroid_trace,
        label_trace=label_trace,
        repairs=repairs,
        round_log=acct.log,
        leader_id=leader_id,
        n_estimate=n_known,
        agents=agents,
    )
