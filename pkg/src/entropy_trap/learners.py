"""Tabular sampled-update learners: soft, plain and the adaptive-entropy gate.

Every transition updates two tables. The soft table bootstraps from the
log-partition value of the next state, the plain table from its max. The
mode only decides which table drives behavior (and, for ``adaent``, a
per-state cosine-similarity gate picks the table).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .mdp import Mdp

MODES = ("soft", "plain", "adaent")
SELECTIONS = ("greedy_soft", "greedy_plain", "gated")
ZERO_NORM = 1e-12


class DivergenceError(RuntimeError):
    pass


def cosine_similarity(u: Sequence[float], v: Sequence[float]) -> float:
    """Cosine of the angle between u and v; 1 when either vector is (near) zero."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape or u.ndim != 1 or u.size == 0:
        raise ValueError("vectors must be non-empty and of equal length")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < ZERO_NORM or nv < ZERO_NORM:
        return 1.0
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


@dataclass
class LearnerConfig:
    alpha: float = 1.0
    lr: float = 0.2
    lr_schedule: str = "constant"  # or "visits": 1 / (1 + visits)
    episodes: int = 1000
    max_steps: int = 100
    epsilon_gate: float = 0.95
    behavior: str = "boltzmann"  # or "epsilon_greedy"
    epsilon_explore: float = 0.05
    seed: int = 0
    eval_every: int = 100
    eval_episodes: int = 10
    q_init: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.lr <= 1.0:
            raise ValueError("lr must lie in (0, 1]")
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if self.lr_schedule not in ("constant", "visits"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.behavior not in ("boltzmann", "epsilon_greedy"):
            raise ValueError(f"unknown behavior {self.behavior!r}")
        if not self.alpha > 0.0:
            raise ValueError("alpha must be positive")


class MdpEnv:
    """Sampling view of an :class:`Mdp` with integer state and atom indices."""

    def __init__(self, mdp: Mdp):
        self.mdp = mdp
        self.ids = mdp.nonterminal_ids
        self.index = {sid: i for i, sid in enumerate(self.ids)}
        self.n_atoms = [len(mdp[sid].atoms) for sid in self.ids]
        self.log_w = [np.log(np.asarray(mdp[sid].weights, dtype=float)) for sid in self.ids]
        self.atom_ids = [[a.atom_id for a in mdp[sid].atoms] for sid in self.ids]
        # per (state, atom): successor indices (-1 = terminal), cumulative probs, rewards
        self._succ = []
        for sid in self.ids:
            row = []
            for a in mdp[sid].atoms:
                nxt = list(a.transitions.items())
                idx = np.array([self.index.get(t, -1) for t, _ in nxt], dtype=np.intp)
                rew = np.array([a.reward + (mdp.terminal_value(t) if mdp[t].terminal else 0.0)
                                for t, _ in nxt])
                cum = np.cumsum([p for _, p in nxt])
                row.append((idx, cum, rew))
            self._succ.append(row)
        if mdp[mdp.start_state].terminal:
            raise ValueError("start state is terminal")
        self.start = self.index[mdp.start_state]
        self.gamma = mdp.gamma

    def step(self, s: int, k: int, rng: np.random.Generator) -> tuple[float, int, bool]:
        idx, cum, rew = self._succ[s][k]
        if len(idx) == 1:
            j = 0
        else:
            j = min(int(np.searchsorted(cum, rng.random() * cum[-1], side="right")), len(idx) - 1)
        nxt = int(idx[j])
        return float(rew[j]), nxt, nxt < 0


@dataclass
class DualQTables:
    q_soft: list[np.ndarray]
    q_plain: list[np.ndarray]
    visits: list[np.ndarray]
    alpha: float
    epsilon_gate: float = 0.95

    @classmethod
    def zeros(cls, env: MdpEnv, alpha: float, epsilon_gate: float = 0.95,
              fill: float = 0.0) -> "DualQTables":
        return cls([np.full(n, fill) for n in env.n_atoms], [np.full(n, fill) for n in env.n_atoms],
                   [np.zeros(n, dtype=np.int64) for n in env.n_atoms], alpha, epsilon_gate)

    def soft_value(self, s: int, log_w: np.ndarray) -> float:
        x = self.q_soft[s] / self.alpha + log_w
        m = x.max()
        return float(self.alpha * (m + math.log(np.exp(x - m).sum())))

    def use_soft(self, s: int) -> bool:
        return cosine_similarity(self.q_soft[s], self.q_plain[s]) > self.epsilon_gate

    def table_for(self, s: int, selection: str) -> np.ndarray:
        if selection == "greedy_soft":
            return self.q_soft[s]
        if selection == "greedy_plain":
            return self.q_plain[s]
        if selection == "gated":
            return self.q_soft[s] if self.use_soft(s) else self.q_plain[s]
        raise ValueError(f"unknown selection {selection!r}")

    def max_abs(self) -> float:
        return max(max(float(np.abs(q).max()) for q in self.q_soft),
                   max(float(np.abs(q).max()) for q in self.q_plain))

    def to_doc(self, env: MdpEnv) -> dict:
        return {
            "alpha": self.alpha,
            "epsilon_gate": self.epsilon_gate,
            "states": {
                sid: {
                    "atoms": env.atom_ids[i],
                    "q_soft": [float(x) for x in self.q_soft[i]],
                    "q_plain": [float(x) for x in self.q_plain[i]],
                    "visits": [int(x) for x in self.visits[i]],
                }
                for i, sid in enumerate(env.ids)
            },
        }

    @classmethod
    def from_doc(cls, doc: dict, env: MdpEnv) -> "DualQTables":
        qs, qp, vs = [], [], []
        for i, sid in enumerate(env.ids):
            row = doc["states"][sid]
            if row["atoms"] != env.atom_ids[i]:
                raise ValueError(f"table atoms at {sid!r} do not match the MDP")
            qs.append(np.asarray(row["q_soft"], dtype=float))
            qp.append(np.asarray(row["q_plain"], dtype=float))
            vs.append(np.asarray(row["visits"], dtype=np.int64))
        return cls(qs, qp, vs, float(doc["alpha"]), float(doc.get("epsilon_gate", 0.95)))


def greedy(q: np.ndarray) -> int:
    """Argmax with ties broken by the lowest atom index."""
    return int(np.argmax(q))


def _boltzmann_sample(q: np.ndarray, log_w: np.ndarray, alpha: float, u: float) -> int:
    x = q / alpha + log_w
    p = np.exp(x - x.max())
    cum = np.cumsum(p)
    return min(int(np.searchsorted(cum, u * cum[-1], side="right")), len(q) - 1)


@dataclass
class LogRow:
    episode: int
    mode: str
    eval_return: float
    gate_soft_fraction: float
    max_abs_q: float


LOG_FIELDS = ["episode", "mode", "eval_return", "gate_soft_fraction", "max_abs_q"]


@dataclass
class TrainingResult:
    tables: DualQTables
    log: list[LogRow] = field(default_factory=list)
    choices: list[tuple[int, int]] = field(default_factory=list, repr=False)

    def log_rows(self) -> list[dict]:
        return [asdict(r) for r in self.log]


EVAL_SELECTION = {"soft": "greedy_soft", "plain": "greedy_plain", "adaent": "gated"}


def q_learning(mdp: Mdp | MdpEnv, config: LearnerConfig, mode: str = "soft",
               record_choices: bool = False) -> TrainingResult:
    """Train dual Q tables from sampled transitions.

    Every random draw is made regardless of mode, so runs that differ only in
    how the behavior table is chosen share the same sample path whenever they
    pick the same atoms.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    env = mdp if isinstance(mdp, MdpEnv) else MdpEnv(mdp)
    rng = np.random.default_rng(config.seed)
    tables = DualQTables.zeros(env, config.alpha, config.epsilon_gate, config.q_init)
    alpha, gamma = config.alpha, env.gamma
    result = TrainingResult(tables)
    eval_sel = EVAL_SELECTION[mode]
    routed_soft = 0
    updates = 0

    for ep in range(1, config.episodes + 1):
        s = env.start
        for _ in range(config.max_steps):
            if mode == "soft":
                table = tables.q_soft[s]
            elif mode == "plain":
                table = tables.q_plain[s]
            else:
                table = tables.q_soft[s] if tables.use_soft(s) else tables.q_plain[s]
            routed_soft += table is tables.q_soft[s]
            u_explore, u_pick = rng.random(), rng.random()
            if config.behavior == "boltzmann":
                k = _boltzmann_sample(table, env.log_w[s], alpha, u_pick)
            elif u_explore < config.epsilon_explore:
                k = min(int(u_pick * len(table)), len(table) - 1)
            else:
                k = greedy(table)
            if record_choices:
                result.choices.append((s, k))
            r, nxt, done = env.step(s, k, rng)

            if done:
                target_soft = target_plain = r
            else:
                target_soft = r + gamma * tables.soft_value(nxt, env.log_w[nxt])
                target_plain = r + gamma * float(tables.q_plain[nxt].max())
            tables.visits[s][k] += 1
            lr = config.lr if config.lr_schedule == "constant" else 1.0 / (1.0 + (tables.visits[s][k] - 1))
            tables.q_soft[s][k] += lr * (target_soft - tables.q_soft[s][k])
            tables.q_plain[s][k] += lr * (target_plain - tables.q_plain[s][k])
            if not (math.isfinite(tables.q_soft[s][k]) and math.isfinite(tables.q_plain[s][k])):
                raise DivergenceError(
                    f"non-finite Q at state {env.ids[s]!r}, atom {env.atom_ids[s][k]!r}, episode {ep}")
            updates += 1
            if done:
                break
            s = nxt

        if ep % config.eval_every == 0 or ep == config.episodes:
            mean, _ = evaluate_rollouts(env, tables, eval_sel, config.eval_episodes,
                                        seed=config.seed + ep, max_steps=config.max_steps)
            result.log.append(LogRow(ep, mode, mean, routed_soft / max(updates, 1), tables.max_abs()))
    return result


def evaluate_rollouts(env: Mdp | MdpEnv, tables: DualQTables, selection: str = "greedy_plain",
                      n_episodes: int = 10, seed: int = 0, max_steps: int = 100,
                      goal_state: str | None = None):
    """Mean discounted return (and its standard error) of greedy rollouts.

    With `goal_state`, returns ``(mean, stderr, reach_rate)`` where
    ``reach_rate`` is the fraction of episodes ending in that terminal.
    """
    if selection not in SELECTIONS:
        raise ValueError(f"unknown selection {selection!r}")
    env = env if isinstance(env, MdpEnv) else MdpEnv(env)
    rng = np.random.default_rng(seed)
    returns = []
    reached = 0
    for _ in range(n_episodes):
        s, total, disc = env.start, 0.0, 1.0
        for _ in range(max_steps):
            k = greedy(tables.table_for(s, selection))
            r, nxt, done = env.step(s, k, rng)
            total += disc * r
            disc *= env.gamma
            if done:
                if goal_state is not None:
                    tgt = _terminal_hit(env, s, k, r)
                    reached += tgt == goal_state
                break
            s = nxt
        returns.append(total)
    arr = np.asarray(returns)
    mean = float(arr.mean())
    stderr = float(arr.std(ddof=1) / math.sqrt(len(arr))) if len(arr) > 1 else 0.0
    if goal_state is not None:
        return mean, stderr, reached / n_episodes
    return mean, stderr


def _terminal_hit(env: MdpEnv, s: int, k: int, r: float) -> str:
    atom = env.mdp[env.ids[s]].atoms[k]
    terms = [t for t in atom.transitions if env.mdp[t].terminal]
    if len(terms) == 1:
        return terms[0]
    for t in terms:
        if atom.reward + env.mdp.terminal_value(t) == r:
            return t
    return terms[0]
