"""Exact soft and plain dynamic programming on interval-action MDPs."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mdp import Mdp, PiecewisePolicy, check

KL_INFINITY = math.inf  # sentinel for absolute-continuity failure
DEFAULT_TOL = 1e-12
DEFAULT_MAX_ITER = 100_000
DEFAULT_TIE_TOL = 1e-9


class NotConverged(RuntimeError):
    pass


# -- single-state primitives -------------------------------------------------


def _split(atoms: Sequence[tuple[float, float]]):
    if len(atoms) == 0:
        raise ValueError("empty atom list")
    w = [float(a[0]) for a in atoms]
    q = [float(a[1]) for a in atoms]
    if any(not x > 0.0 for x in w):
        raise ValueError("atom weights must be positive")
    return w, q


def soft_state_value(atoms: Sequence[tuple[float, float]], alpha: float) -> float:
    """alpha * log sum_k w_k exp(Q_k / alpha) for (weight, Q) pairs.

    Max-shifted, with compensated summation of the shifted terms so that
    splitting an atom into equal parts leaves the result unchanged.
    """
    if not alpha > 0.0:
        raise ValueError("alpha must be positive")
    w, q = _split(atoms)
    m = max(q)
    total = math.fsum(wk * math.exp((qk - m) / alpha) for wk, qk in zip(w, q))
    return m + alpha * math.log(total)


def log_partition(atoms: Sequence[tuple[float, float]], alpha: float) -> float:
    """log Z with Z = sum_k w_k exp(Q_k / alpha)."""
    return soft_state_value(atoms, alpha) / alpha


def boltzmann_policy(atoms: Sequence[tuple[float, float]], alpha: float) -> list[float]:
    """Masses p_k = w_k exp(Q_k / alpha) / Z."""
    if not alpha > 0.0:
        raise ValueError("alpha must be positive")
    w, q = _split(atoms)
    m = max(q)
    terms = [wk * math.exp((qk - m) / alpha) for wk, qk in zip(w, q)]
    z = math.fsum(terms)
    return [t / z for t in terms]


def differential_entropy(masses: Sequence[float], weights: Sequence[float]) -> float:
    """Entropy of the piecewise-constant density with the given atom masses."""
    return -math.fsum(p * math.log(p / w) for p, w in zip(masses, weights) if p > 0.0)


def kl_divergence(p: Sequence[float], q: Sequence[float], weights: Sequence[float] | None = None) -> float:
    """KL(p || q) between two mass vectors on the same partition.

    Weights cancel for densities on a shared partition; the argument is kept
    only to check alignment. Returns ``KL_INFINITY`` when p is not absolutely
    continuous with respect to q.
    """
    if len(p) != len(q) or (weights is not None and len(weights) != len(p)):
        raise ValueError("length mismatch")
    terms = []
    for pk, qk in zip(p, q):
        if pk <= 0.0:
            continue
        if qk <= 0.0:
            return KL_INFINITY
        terms.append(pk * math.log(pk / qk))
    return max(0.0, math.fsum(terms))


# -- compiled form -----------------------------------------------------------


class CompiledMdp:
    """Array view of an MDP: atoms flattened in state order, padded per state.

    ``base[j]`` is the atom reward plus the terminal-successor contribution,
    ``P`` maps atoms to non-terminal successor indices, so that
    ``Q = base + gamma * P @ V``.
    """

    def __init__(self, mdp: Mdp):
        check(mdp)
        self.mdp = mdp
        self.ids = mdp.nonterminal_ids
        self.index = {sid: i for i, sid in enumerate(self.ids)}
        self.atom_ids: list[list[str]] = []
        rows, cols, vals = [], [], []
        base, logw, owner = [], [], []
        j = 0
        for i, sid in enumerate(self.ids):
            spec = mdp[sid]
            self.atom_ids.append([a.atom_id for a in spec.atoms])
            for a in spec.atoms:
                term = []
                for tgt, p in a.transitions.items():
                    if mdp[tgt].terminal:
                        term.append(p * mdp.terminal_value(tgt))
                    elif p != 0.0:
                        rows.append(j)
                        cols.append(self.index[tgt])
                        vals.append(p)
                base.append(a.reward + math.fsum(term))
                logw.append(math.log(a.weight))
                owner.append(i)
                j += 1
        n, m = len(self.ids), j
        self.n_states, self.n_atoms = n, m
        self.base = np.asarray(base, dtype=float)
        self.logw = np.asarray(logw, dtype=float)
        self.owner = np.asarray(owner, dtype=np.intp)
        self.P = sp.csr_matrix((vals, (rows, cols)), shape=(m, n))
        counts = np.bincount(self.owner, minlength=n)
        self.offsets = np.concatenate([[0], np.cumsum(counts)])
        width = int(counts.max()) if n else 0
        # padded[i, k] -> flat atom index, or -1
        self.padded = np.full((n, width), -1, dtype=np.intp)
        for i in range(n):
            c = counts[i]
            self.padded[i, :c] = np.arange(self.offsets[i], self.offsets[i] + c)
        self.mask = self.padded >= 0

    def q_from_v(self, v: np.ndarray) -> np.ndarray:
        return self.base + self.mdp.gamma * (self.P @ v)

    def _pad(self, flat: np.ndarray, fill: float) -> np.ndarray:
        out = np.full(self.padded.shape, fill)
        out[self.mask] = flat[self.padded[self.mask]]
        return out

    def soft_v(self, q: np.ndarray, alpha: float) -> np.ndarray:
        x = self._pad(q / alpha + self.logw, -np.inf)
        m = x.max(axis=1)
        return alpha * (m + np.log(np.exp(x - m[:, None]).sum(axis=1)))

    def max_v(self, q: np.ndarray) -> np.ndarray:
        return self._pad(q, -np.inf).max(axis=1)

    def min_v(self, q: np.ndarray) -> np.ndarray:
        return self._pad(q, np.inf).min(axis=1)

    def boltzmann(self, q: np.ndarray, alpha: float) -> np.ndarray:
        x = q / alpha + self.logw
        m = self._pad(x, -np.inf).max(axis=1)
        e = np.exp(x - m[self.owner])
        z = np.bincount(self.owner, weights=e, minlength=self.n_states)
        return e / z[self.owner]

    def per_state(self, flat: np.ndarray) -> dict[str, dict[str, float]]:
        return {
            sid: {aid: float(flat[self.offsets[i] + k]) for k, aid in enumerate(self.atom_ids[i])}
            for i, sid in enumerate(self.ids)
        }

    def full_values(self, v: np.ndarray) -> dict[str, float]:
        """Non-terminal values plus the terminal contribution for terminal states."""
        out = {sid: float(v[i]) for i, sid in enumerate(self.ids)}
        for sid, spec in self.mdp.states.items():
            if spec.terminal:
                out[sid] = float(spec.terminal_reward)
        return out


# -- solutions ---------------------------------------------------------------


@dataclass
class SoftSolution:
    alpha: float
    V: dict[str, float]
    Q: dict[str, dict[str, float]]
    policy: PiecewisePolicy
    residual: float
    iterations: int
    converged: bool = True
    residuals: list[float] = field(default_factory=list, repr=False)

    def q_vector(self, state_id: str) -> list[float]:
        return list(self.Q[state_id].values())


@dataclass
class PlainSolution:
    V: dict[str, float]
    Q: dict[str, dict[str, float]]
    greedy: dict[str, frozenset[str]]
    residual: float
    iterations: int
    converged: bool = True
    residuals: list[float] = field(default_factory=list, repr=False)

    def q_vector(self, state_id: str) -> list[float]:
        return list(self.Q[state_id].values())


def _iterate(cm: CompiledMdp, backup, tol: float, max_iter: int):
    v = np.zeros(cm.n_states)
    residuals = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        new = backup(cm.q_from_v(v))
        res = float(np.max(np.abs(new - v))) if cm.n_states else 0.0
        residuals.append(res)
        v = new
        if res < tol:
            converged = True
            break
    return v, residuals, converged, it


def soft_value_iteration(mdp: Mdp, alpha: float | None = None, tol: float = DEFAULT_TOL,
                         max_iter: int = DEFAULT_MAX_ITER, strict: bool = False) -> SoftSolution:
    """Synchronous soft value iteration to sup-norm tolerance `tol` on V.

    Returns the last iterate with ``converged=False`` if `max_iter` is reached,
    or raises :class:`NotConverged` when `strict` is set.
    """
    alpha = mdp.alpha if alpha is None else alpha
    if not alpha > 0.0:
        raise ValueError("alpha must be positive")
    if not tol > 0.0:
        raise ValueError("tol must be positive")
    cm = CompiledMdp(mdp)
    v, residuals, converged, it = _iterate(cm, lambda q: cm.soft_v(q, alpha), tol, max_iter)
    if strict and not converged:
        raise NotConverged(f"soft value iteration did not converge in {max_iter} sweeps")
    q = cm.q_from_v(v)
    # report V consistent with the final Q so the log-partition identity is exact
    v = cm.soft_v(q, alpha)
    p = cm.boltzmann(q, alpha)
    masses = {sid: tuple(p[cm.offsets[i]:cm.offsets[i + 1]]) for i, sid in enumerate(cm.ids)}
    return SoftSolution(alpha, cm.full_values(v), cm.per_state(q), PiecewisePolicy(masses),
                        residuals[-1] if residuals else 0.0, it, converged, residuals)


def _greedy_sets(cm: CompiledMdp, q: np.ndarray, v: np.ndarray, tie_tol: float, maximize=True):
    out = {}
    for i, sid in enumerate(cm.ids):
        qs = q[cm.offsets[i]:cm.offsets[i + 1]]
        if maximize:
            hit = qs >= v[i] - tie_tol
        else:
            hit = qs <= v[i] + tie_tol
        out[sid] = frozenset(a for a, h in zip(cm.atom_ids[i], hit) if h)
    return out


def plain_value_iteration(mdp: Mdp, tol: float = DEFAULT_TOL, tie_tol: float = DEFAULT_TIE_TOL,
                          max_iter: int = DEFAULT_MAX_ITER, minimize: bool = False,
                          strict: bool = False) -> PlainSolution:
    """Optimal (or, with `minimize`, pessimal) entropy-free values."""
    cm = CompiledMdp(mdp)
    backup = cm.min_v if minimize else cm.max_v
    v, residuals, converged, it = _iterate(cm, backup, tol, max_iter)
    if strict and not converged:
        raise NotConverged(f"plain value iteration did not converge in {max_iter} sweeps")
    q = cm.q_from_v(v)
    v = backup(q)
    return PlainSolution(cm.full_values(v), cm.per_state(q),
                         _greedy_sets(cm, q, v, tie_tol, not minimize),
                         residuals[-1] if residuals else 0.0, it, converged, residuals)


def policy_evaluation(mdp: Mdp, policy: PiecewisePolicy, alpha: float | None = None,
                      with_entropy: bool = True, tol: float = DEFAULT_TOL):
    """Value of a fixed policy, optionally with the alpha-weighted entropy bonus.

    Solves the linear system ``(I - gamma P_pi) V = r_pi`` directly; `tol`
    bounds the accepted residual of the solve. Returns ``(V, J)`` where
    ``J = V[start]``.
    """
    alpha = mdp.alpha if alpha is None else alpha
    policy.check(mdp)
    cm = CompiledMdp(mdp)
    p = np.concatenate([np.asarray(policy[sid], dtype=float) for sid in cm.ids]) \
        if cm.n_states else np.zeros(0)
    r = np.bincount(cm.owner, weights=p * cm.base, minlength=cm.n_states)
    if with_entropy and alpha != 0.0:
        h = np.array([differential_entropy(policy[sid], mdp[sid].weights) for sid in cm.ids])
        r = r + alpha * h
    pp = sp.csr_matrix((p, (cm.owner, np.arange(cm.n_atoms))), shape=(cm.n_states, cm.n_atoms))
    T = (pp @ cm.P).tocsc()
    A = sp.identity(cm.n_states, format="csc") - mdp.gamma * T
    v = spla.spsolve(A, r) if cm.n_states else np.zeros(0)
    v = np.atleast_1d(v)
    resid = float(np.max(np.abs(A @ v - r))) if cm.n_states else 0.0
    if resid > max(tol, 1e-9) * max(1.0, float(np.max(np.abs(r))) if cm.n_states else 1.0):
        raise NotConverged(f"policy evaluation residual {resid:.3g}")
    values = cm.full_values(v)
    start = mdp.start_state
    j = values[start] if not mdp[start].terminal else mdp.terminal_value(start)
    return values, j


# -- landscape export --------------------------------------------------------

LANDSCAPE_FIELDS = ["state_id", "atom_id", "lo", "hi", "weight", "q_soft", "q_plain",
                    "policy_mass", "policy_density"]


def landscape_rows(mdp: Mdp, soft: SoftSolution, plain: PlainSolution,
                   states: Iterable[str] | None = None) -> list[dict]:
    """One row per (state, atom) of the non-terminal states, sorted by (state_id, lo)."""
    wanted = mdp.nonterminal_ids
    if states is not None:
        states = list(states)
        for sid in states:
            if sid not in mdp.states or mdp[sid].terminal:
                raise KeyError(f"unknown or terminal state {sid!r}")
        wanted = states
    rows = []
    for sid in sorted(wanted):
        spec = mdp[sid]
        masses = soft.policy[sid]
        for k, a in sorted(enumerate(spec.atoms), key=lambda t: t[1].lo):
            rows.append({
                "state_id": sid,
                "atom_id": a.atom_id,
                "lo": a.lo,
                "hi": a.hi,
                "weight": a.weight,
                "q_soft": soft.Q[sid][a.atom_id],
                "q_plain": plain.Q[sid][a.atom_id],
                "policy_mass": masses[k],
                "policy_density": masses[k] / a.weight,
            })
    return rows


def rows_to_csv(rows: list[Mapping], fields: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()
