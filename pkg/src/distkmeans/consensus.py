"""Max-consensus, linear averaging and finite-time average consensus.

Every routine simulates synchronous rounds over all agents at once: agent
``i``'s row of the stacked state is its local value, and a round only ever
combines a row with the rows of its neighbours. Disconnected graphs are
fine; each connected component reaches its own consensus.

Round costs are reported through an optional ``hook(label, rounds, messages)``
callable so the simulator can attribute them to protocol phases.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import InputError, ProtocolError
from .graph import AnyGraph, connected_components

RoundHook = Callable[[str, int, int], None]

EPS = np.finfo(float).eps


def _charge(hook: Optional[RoundHook], label: str, rounds: int, g: AnyGraph) -> None:
    if hook is not None and rounds > 0:
        hook(label, rounds, rounds * 2 * g.edge_count)


def _as_matrix(values) -> tuple[np.ndarray, bool]:
    arr = np.array(values, dtype=float)
    if arr.ndim == 1:
        return arr[:, None], True
    if arr.ndim != 2:
        raise InputError("consensus state must be one value or one vector per agent")
    return arr, False


def build_weights(g: AnyGraph, n: int) -> np.ndarray:
    """Weight matrix with ``1/n`` on every edge and the slack on the diagonal.

    ``n`` is the network size the agents know, which may be an upper bound
    on the true vertex count; any ``n >= vertex_count`` keeps the matrix
    symmetric, doubly stochastic and nonnegative.
    """
    if n < g.vertex_count:
        raise InputError(f"weight parameter n={n} is below the vertex count {g.vertex_count}")
    w = g.adjacency_matrix() / n
    w[np.diag_indices_from(w)] = 1.0 - g.degrees() / n
    return w


def max_consensus(initial, g: AnyGraph, rounds: int, hook: Optional[RoundHook] = None,
                  label: str = "max") -> np.ndarray:
    """Run ``rounds`` synchronous neighbourhood-maximum updates.

    ``-inf`` entries act as "no information" and are absorbed by any finite
    value.
    """
    if rounds < 1:
        raise InputError("max-consensus needs at least one round")
    z, scalar = _as_matrix(initial)
    if len(z) != g.vertex_count:
        raise InputError("one initial value per agent is required")
    e = g.edges
    for _ in range(rounds):
        nxt = z.copy()
        if len(e):
            np.maximum.at(nxt, e[:, 0], z[e[:, 1]])
            np.maximum.at(nxt, e[:, 1], z[e[:, 0]])
        z = nxt
    _charge(hook, label, rounds, g)
    return z[:, 0] if scalar else z


@dataclass(frozen=True)
class ConsensusState:
    values: np.ndarray
    t: int = 0


def linear_iteration(w: np.ndarray, state: ConsensusState) -> ConsensusState:
    """One step of ``z(t+1) = (W kron I_d) z(t)``."""
    z, _ = _as_matrix(state.values)
    if w.shape != (len(z), len(z)):
        raise InputError("weight matrix and state disagree on the number of agents")
    nxt = w @ z
    if np.ndim(state.values) == 1:
        nxt = nxt[:, 0]
    return ConsensusState(nxt, state.t + 1)


@dataclass(frozen=True)
class FtaCoefficients:
    """Per-agent finite-time averaging data.

    ``q`` and ``p`` are the agent's minimal polynomial of ``W`` and its
    quotient by ``(g - 1)``, highest degree first; ``gamma[t]`` weights the
    agent's own iterate ``z_i(t)``. The ``*_scaled`` tuples hold the same
    polynomials for the integer matrix ``n_upper * W``; their coefficients
    are exact integers and drive the actual averaging.
    """

    delta: int
    q: np.ndarray
    p: np.ndarray
    gamma: np.ndarray
    p_at_one: float
    q_scaled: tuple[int, ...] = ()
    p_scaled: tuple[int, ...] = ()

    @property
    def alpha(self) -> np.ndarray:
        return self.q[1:]

    @property
    def beta(self) -> np.ndarray:
        return self.p


@dataclass(frozen=True)
class FtaPlan:
    """Everything agents on one graph need to average in finite time."""

    graph: AnyGraph
    n_upper: int
    weights: np.ndarray
    coeffs: tuple[FtaCoefficients, ...]
    method: str = "exact"

    @property
    def rounds(self) -> int:
        """Data-independent round budget of one averaging run."""
        return self.n_upper - 1

    @property
    def setup_rounds(self) -> int:
        return ranking_rounds(self.n_upper) + run_rounds(self.n_upper)

    def __getitem__(self, i: int) -> FtaCoefficients:
        return self.coeffs[i]

    def __len__(self) -> int:
        return len(self.coeffs)


def ranking_rounds(n_upper: int) -> int:
    # n_upper exclusion max-consensus instances of n_upper rounds each
    return n_upper * n_upper


def run_rounds(n_upper: int) -> int:
    # n_upper preparatory runs of n_upper + 1 linear iterations each
    return n_upper * (n_upper + 1)


def rank_identifiers(ids: Sequence[int], g: AnyGraph, n_upper: int) -> np.ndarray:
    """Rank agents by identifier through repeated max-consensus with exclusion.

    In run ``j`` every agent not yet ranked offers its id, the others offer
    ``-inf``; the winner takes rank ``j``. On a disconnected graph each
    component ranks its own members. Returns the 0-based rank per agent.
    """
    ids = np.asarray(ids, dtype=float)
    n = g.vertex_count
    rank = np.full(n, -1, dtype=np.int64)
    for j in range(min(n_upper, n)):
        offer = np.where(rank < 0, ids, -np.inf)
        best = max_consensus(offer, g, n_upper)
        winner = (rank < 0) & (ids == best)
        rank[winner] = j
    if (rank < 0).any():
        raise ProtocolError("identifier ranking did not cover every agent; is n_upper too small?")
    return rank


def global_rank(ids: Sequence[int]) -> np.ndarray:
    """0-based rank of each agent in descending identifier order."""
    order = np.argsort(-np.asarray(ids, dtype=float), kind="stable")
    rank = np.empty(len(order), dtype=np.int64)
    rank[order] = np.arange(len(order))
    return rank


def scaled_weights(g: AnyGraph, n_upper: int) -> np.ndarray:
    """``n_upper * W`` as an int64 matrix."""
    b = g.adjacency_matrix().astype(np.int64)
    b[np.diag_indices_from(b)] = n_upper - g.degrees()
    return b


# ---------------------------------------------------------------------------
# floating-point route: run matrices and SVD rank threshold
# ---------------------------------------------------------------------------

def numerical_rank(s: np.ndarray, rows: int, cols: int) -> int:
    """Count singular values above ``max(rows + 2, cols) * eps * s_max``."""
    if len(s) == 0 or s[0] == 0.0:
        return 0
    tol = max(rows + 2, cols) * EPS * s[0]
    return int((s > tol).sum())


def preparatory_runs(w: np.ndarray, rank: np.ndarray, n_upper: int) -> np.ndarray:
    """Iterates of the canonical runs, shape ``(n_upper + 2, n, n_upper)``.

    Run ``j`` starts with a 1 at the agent ranked ``j`` and zeros elsewhere;
    runs beyond the agent count stay identically zero. Works for float
    weights and for int64 matrices alike.
    """
    n = len(w)
    z0 = np.zeros((n, n_upper), dtype=w.dtype)
    z0[np.arange(n), rank] = 1
    out = np.empty((n_upper + 2, n, n_upper), dtype=w.dtype)
    out[0] = z0
    for t in range(1, n_upper + 2):
        out[t] = w @ out[t - 1]
    return out


def agent_run_matrix(runs: np.ndarray, i: int, delta: int) -> np.ndarray:
    """Agent ``i``'s matrix ``[z(delta+1), ..., z(0)]`` with one row per run."""
    return runs[delta + 1::-1, i, :].T


def _svd_coefficients(runs: np.ndarray, i: int, n_upper: int) -> FtaCoefficients:
    live = np.any(runs[:, i, :] != 0.0, axis=0)
    for delta in range(n_upper):
        z = agent_run_matrix(runs, i, delta)[live]
        _, s, vh = np.linalg.svd(z)
        cols = delta + 2
        if numerical_rank(s, n_upper, cols) < cols:
            break
    else:
        raise ProtocolError(f"agent {i}: run matrix never lost rank up to delta={n_upper - 1}")
    null = vh[-1]
    if abs(null[0]) < EPS:
        raise ProtocolError(f"agent {i}: degenerate null vector at delta={delta}")
    q = null / null[0]
    p, _ = synthetic_division(q)
    p_one = float(p.sum())
    if p_one == 0.0 or not np.isfinite(p_one):
        raise ProtocolError(f"agent {i}: reduced polynomial vanishes at 1")
    return FtaCoefficients(delta, q, p, p[::-1] / p_one, p_one)


def synthetic_division(q, root=1):
    """Divide a polynomial (highest degree first) by ``g - root``.

    Returns ``(quotient, remainder)``; works on floats and on Python ints.
    """
    out = []
    acc = 0
    for c in q[:-1]:
        acc = acc * root + c
        out.append(acc)
    rem = acc * root + q[-1]
    if isinstance(q, np.ndarray):
        return np.array(out, dtype=q.dtype), rem
    return out, rem


# ---------------------------------------------------------------------------
# exact route: modular elimination, CRT, integer certificate
# ---------------------------------------------------------------------------

def _is_prime(m: int) -> bool:
    if m < 2:
        return False
    f = 2
    while f * f <= m:
        if m % f == 0:
            return False
        f += 1
    return True


def _primes_below(limit: int):
    m = limit - 1
    while True:
        if _is_prime(m):
            yield m
        m -= 1


# products of residues stay below 2**50, leaving room for int64 sums
_PRIME_LIMIT = 1 << 25


def _modinv(x: np.ndarray, prime: int) -> np.ndarray:
    """Elementwise inverse modulo ``prime`` by Fermat exponentiation."""
    result = np.ones_like(x)
    base = x % prime
    e = prime - 2
    while e:
        if e & 1:
            result = (result * base) % prime
        base = (base * base) % prime
        e >>= 1
    return result


def _modular_dependencies(b: np.ndarray, rank: np.ndarray, prime: int) -> tuple[np.ndarray, np.ndarray]:
    """First linear dependency among each agent's run columns, modulo ``prime``.

    ``b`` is the scaled weight matrix of one connected component and
    ``rank`` orders its members' runs. Column ``t`` of agent ``a`` is its
    value in every run after ``t`` iterations. Returns ``(m, coef)`` where
    ``m[a]`` is the index of the first column lying in the span of its
    predecessors and ``coef[a, :m+1]`` (with ``coef[a, m] == 1``) is the
    vanishing combination.
    """
    n = len(b)
    cols = n + 1
    runs = np.empty((cols, n, n), dtype=np.int64)
    runs[0] = 0
    runs[0][np.arange(n), rank] = 1
    bm = b % prime
    for t in range(1, cols):
        runs[t] = (bm @ runs[t - 1]) % prime
    basis = np.zeros((n, cols, n), dtype=np.int64)
    bcoef = np.zeros((n, cols, cols), dtype=np.int64)
    pivots = np.zeros((n, cols), dtype=np.int64)
    used = np.zeros((n, cols), dtype=bool)
    count = np.zeros(n, dtype=np.int64)
    m = np.full(n, -1, dtype=np.int64)
    dep = np.zeros((n, cols), dtype=np.int64)
    agents = np.arange(n)
    for t in range(cols):
        active = m < 0
        if not active.any():
            break
        # basis rows beyond t are unused and their coefficients live in columns <= t
        bs, cs = basis[:, :t], bcoef[:, :t, : t + 1]
        v = runs[t].copy()
        c = np.zeros((n, t + 1), dtype=np.int64)
        c[:, t] = 1
        f = np.where(used[:, :t], v[agents[:, None], pivots[:, :t]], 0)
        v = (v - np.einsum("ar,arx->ax", f, bs)) % prime
        c = (c - np.einsum("ar,arx->ax", f, cs)) % prime
        zero = ~v.any(axis=1)
        hit = active & zero
        m[hit] = t
        dep[hit, : t + 1] = c[hit]
        grow = np.nonzero(active & ~zero)[0]
        if len(grow):
            vg = v[grow]
            piv = np.argmax(vg != 0, axis=1)
            inv = _modinv(vg[np.arange(len(grow)), piv], prime)
            va = (vg * inv[:, None]) % prime
            ca = (c[grow] * inv[:, None]) % prime
            gcol = basis[grow[:, None], np.arange(t)[None, :], piv[:, None]]
            basis[grow, :t] = (bs[grow] - gcol[:, :, None] * va[:, None, :]) % prime
            bcoef[grow, :t, : t + 1] = (cs[grow] - gcol[:, :, None] * ca[:, None, :]) % prime
            k = count[grow]
            basis[grow, k] = va
            bcoef[grow, k, : t + 1] = ca
            pivots[grow, k] = piv
            used[grow, k] = True
            count[grow] += 1
    if (m < 0).any():
        raise ProtocolError("run matrix never lost column rank")
    return m, dep


def _exact_coefficients(g: AnyGraph, n_upper: int, rank: np.ndarray) -> list[tuple[int, list[int]]]:
    """Exact minimal polynomial of ``n_upper * W`` with respect to each agent.

    Returns per agent ``(m, coeffs)``: degree and integer coefficients,
    highest degree first. Runs seeded outside an agent's component never
    reach it, so each component is solved on its own.
    """
    b = scaled_weights(g, n_upper)
    out: list = [None] * g.vertex_count
    for part in connected_components(g):
        idx = np.array(part)
        local_rank = np.argsort(np.argsort(rank[idx]))
        for a, res in zip(part, _component_coefficients(b[np.ix_(idx, idx)], local_rank, n_upper)):
            out[a] = res
    return out


def _component_coefficients(b: np.ndarray, rank: np.ndarray, n_upper: int) -> list[tuple[int, list[int]]]:
    """Degree from modular elimination, coefficients by CRT, certified exactly.

    A prime can only under-report the dependency index, so the largest index
    seen across primes is the true one; primes that disagree are dropped.
    The coefficients are integers bounded by ``(n_upper + 1) ** m`` because
    every eigenvalue of ``b`` lies in ``[-n_upper, n_upper]``.
    """
    n = len(b)
    primes = _primes_below(_PRIME_LIMIT)
    residues: list[tuple[int, np.ndarray, np.ndarray]] = []
    for _ in range(500):
        p = next(primes)
        residues.append((p, *_modular_dependencies(b, rank, p)))
        m_true = np.max([r[1] for r in residues], axis=0)
        out = []
        for a in range(n):
            ma = int(m_true[a])
            good = [(pr, d[a]) for pr, mm, d in residues if mm[a] == ma]
            modulus = 1
            for pr, _ in good:
                modulus *= pr
            if modulus <= 2 * (n_upper + 1) ** ma:
                break
            out.append((ma, [_crt([(int(d[s]), pr) for pr, d in good]) for s in range(ma, -1, -1)]))
        if len(out) < n:
            continue
        _certify(b, out)
        return out
    raise ProtocolError("modular reconstruction of minimal polynomials did not settle")


def _certify(b: np.ndarray, found: list[tuple[int, list[int]]]) -> None:
    """Check ``e_a' q_a(B) == 0`` in exact integer arithmetic for every agent.

    Horner's rule on all agents at once: column ``a`` of ``acc`` holds
    ``q_a(B) e_a``, which is the transpose of ``e_a' q_a(B)`` as ``B`` is
    symmetric. Shorter polynomials are padded with leading zeros.
    """
    n = len(b)
    diag = np.array(np.diag(b).tolist(), dtype=object)
    iu = np.nonzero(np.triu(b, k=1))
    edges = np.column_stack(iu)
    top = max(len(c) for _, c in found)
    padded = [[0] * (top - len(c)) + list(c) for _, c in found]
    acc = np.zeros((n, n), dtype=object)
    for s in range(top):
        acc = _exact_step(acc, diag, edges)
        for a in range(n):
            acc[a, a] += padded[a][s]
    if acc.any():
        bad = int(np.nonzero(acc.any(axis=0))[0][0])
        raise ProtocolError(f"agent {bad}: reconstructed minimal polynomial does not annihilate")


def _crt(pairs: list[tuple[int, int]]) -> int:
    x, mod = 0, 1
    for r, p in pairs:
        t = ((r - x) * pow(mod, -1, p)) % p
        x += mod * t
        mod *= p
    return x - mod if x > mod // 2 else x


def _float_coefficients(m: int, q_scaled: list[int], n_upper: int) -> FtaCoefficients:
    p_scaled, rem = synthetic_division(q_scaled, n_upper)
    if rem != 0:
        raise ProtocolError("minimal polynomial has no root at 1")
    p_n = sum(c * n_upper ** (len(p_scaled) - 1 - j) for j, c in enumerate(p_scaled))
    if p_n == 0:
        raise ProtocolError("reduced polynomial vanishes at 1")
    delta = m - 1
    # q(g) = q_scaled(N g) / N**m, p(g) = p_scaled(N g) / N**delta
    q = np.array([float(Fraction(c, n_upper ** j)) for j, c in enumerate(q_scaled)])
    p = np.array([float(Fraction(c, n_upper ** j)) for j, c in enumerate(p_scaled)])
    p_one = float(Fraction(p_n, n_upper ** delta))
    # gamma_t = beta_t / p(1) = p_scaled[delta - t] * N**t / p_scaled(N)
    gamma = np.array([float(Fraction(p_scaled[delta - t] * n_upper**t, p_n)) for t in range(delta + 1)])
    return FtaCoefficients(delta, q, p, gamma, p_one, tuple(q_scaled), tuple(p_scaled))


def fta_setup(g: AnyGraph, n_upper: int, ids: Optional[Sequence[int]] = None,
              ranking: str = "shortcut", method: str = "exact",
              hook: Optional[RoundHook] = None) -> FtaPlan:
    """Let every agent learn its finite-time averaging coefficients on ``g``.

    Each agent looks at its own values across ``n_upper`` canonical runs and
    finds the first iteration count at which they become linearly
    dependent. ``method="exact"`` decides rank and coefficients in exact
    arithmetic; ``method="svd"`` uses floating-point runs and a singular
    value threshold, which is only trustworthy on small graphs (roughly
    ``n <= 12``) because the run matrices are Krylov-type and lose
    conditioning geometrically.

    ``ranking="shortcut"`` orders the canonical runs by the globally known
    identifiers; ``ranking="max-consensus"`` derives the order in-network.
    The round charge is the same either way.
    """
    n = g.vertex_count
    if n_upper < n:
        raise InputError(f"n_upper={n_upper} is below the vertex count {n}")
    ids = np.arange(n) if ids is None else np.asarray(ids)
    if len(set(ids.tolist())) != n:
        raise InputError("agent identifiers must be unique")
    if ranking == "shortcut":
        rank = global_rank(ids)
    elif ranking == "max-consensus":
        rank = rank_identifiers(ids, g, n_upper)
    else:
        raise InputError(f"unknown ranking mode {ranking!r}")
    w = build_weights(g, n_upper)
    if method == "exact":
        exact = _exact_coefficients(g, n_upper, rank)
        coeffs = tuple(_float_coefficients(m, q, n_upper) for m, q in exact)
    elif method == "svd":
        runs = preparatory_runs(w, rank, n_upper)
        coeffs = tuple(_svd_coefficients(runs, i, n_upper) for i in range(n))
    else:
        raise InputError(f"unknown setup method {method!r}")
    _charge(hook, "fta-ranking", ranking_rounds(n_upper), g)
    _charge(hook, "fta-runs", run_rounds(n_upper), g)
    return FtaPlan(g, n_upper, w, coeffs, method)


def _to_integers(z: np.ndarray) -> tuple[np.ndarray, int]:
    """Exact integer image of a float array and the common power-of-two denominator."""
    if not np.all(np.isfinite(z)):
        raise InputError("finite-time averaging needs finite initial values")
    ratios = [x.as_integer_ratio() for x in z.ravel().tolist()]
    den = max(d for _, d in ratios)
    ints = np.array([num * (den // d) for num, d in ratios], dtype=object).reshape(z.shape)
    return ints, den


def _exact_step(z: np.ndarray, diag: np.ndarray, edges: np.ndarray) -> np.ndarray:
    out = diag[:, None] * z
    if len(edges):
        np.add.at(out, edges[:, 0], z[edges[:, 1]])
        np.add.at(out, edges[:, 1], z[edges[:, 0]])
    return out


def fta_consensus(initial, plan: FtaPlan, hook: Optional[RoundHook] = None,
                  label: str = "fta") -> np.ndarray:
    """Per-component average recovered from each agent's first ``delta_i + 1`` iterates.

    With an exact plan the iterates of ``n_upper * W`` are carried as Python
    integers and every agent's combination is rounded to float once, so the
    result is the correctly rounded component mean.
    """
    z, scalar = _as_matrix(initial)
    if len(z) != len(plan):
        raise InputError("one initial value per agent is required")
    depth = max(c.delta for c in plan.coeffs)
    if plan.method == "exact":
        out = _exact_fta(z, plan, depth)
    else:
        gamma = np.zeros((len(plan), depth + 1))
        for i, c in enumerate(plan.coeffs):
            gamma[i, : c.delta + 1] = c.gamma
        out = gamma[:, [0]] * z
        for t in range(1, depth + 1):
            z = plan.weights @ z
            out = out + gamma[:, [t]] * z
    _charge(hook, label, plan.rounds, plan.graph)
    return out[:, 0] if scalar else out


def _exact_fta(z: np.ndarray, plan: FtaPlan, depth: int) -> np.ndarray:
    ints, den = _to_integers(z)
    g = plan.graph
    diag = np.array([plan.n_upper - d for d in g.degrees().tolist()], dtype=object)
    n = len(plan)
    acc = np.zeros(ints.shape, dtype=object)
    cur = ints
    for t in range(depth + 1):
        if t:
            cur = _exact_step(cur, diag, g.edges)
        for i, c in enumerate(plan.coeffs):
            if t <= c.delta:
                # p_scaled is highest degree first; ascending index t is p_scaled[delta - t]
                acc[i] = acc[i] + c.p_scaled[c.delta - t] * cur[i]
    out = np.empty(z.shape)
    for i, c in enumerate(plan.coeffs):
        p_n = sum(cf * plan.n_upper ** (c.delta - j) for j, cf in enumerate(c.p_scaled))
        scale = p_n * den
        out[i] = [a / scale for a in acc[i].tolist()]
    return out


def network_size(leader_flag, plan: FtaPlan, hook: Optional[RoundHook] = None,
                 label: str = "size") -> np.ndarray:
    """Component size at every agent, from averaging a one-leader indicator."""
    flag = np.asarray(leader_flag, dtype=float)
    value = fta_consensus(flag, plan, hook, label)
    if np.any(value <= 0) or not np.all(np.isfinite(value)):
        raise ProtocolError("size consensus produced a non-positive value")
    recip = 1.0 / value
    size = np.rint(recip).astype(np.int64)
    if np.any(np.abs(recip - size) > 1e-6):
        raise ProtocolError(f"size consensus is not near an integer: {recip}")
    return size
