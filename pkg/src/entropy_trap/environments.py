"""Desk-scale environments: the two-branch toy, Obstacle2D and trap chains."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.stats import norm

from .mdp import ActionAtom, Mdp, StateSpec
from .solvers import plain_value_iteration, soft_state_value, soft_value_iteration

# -- toy ---------------------------------------------------------------------

TOY_START = "s_0"
TOY_GOOD = "s_g"
TOY_BAD = "s_b"


def build_toy(r_plus: float = 1.0, r_g_minus: float = -20.0, r_b_minus: float = -1.0,
              gamma: float = 0.99, alpha: float = 1.0, terminal_timing: str = "on_entry") -> Mdp:
    """Two-branch toy: a narrow rewarding region behind s_g versus a flat mild penalty behind s_b."""
    states = {
        TOY_START: StateSpec(TOY_START, atoms=(
            ActionAtom("A_1", -1.0, 0.0, 0.0, {TOY_GOOD: 1.0}),
            ActionAtom("A_2", 0.0, 1.0, 0.0, {TOY_BAD: 1.0}),
        )),
        TOY_GOOD: StateSpec(TOY_GOOD, atoms=(
            ActionAtom("center", -0.1, 0.1, 0.0, {"s_T+": 1.0}, weight=0.2),
            ActionAtom("left", -1.0, -0.1, 0.0, {"s_gT-": 1.0}, weight=0.9),
            ActionAtom("right", 0.1, 1.0, 0.0, {"s_gT-": 1.0}, weight=0.9),
        )),
        TOY_BAD: StateSpec(TOY_BAD, atoms=(
            ActionAtom("all", -1.0, 1.0, 0.0, {"s_bT-": 1.0}),
        )),
        "s_T+": StateSpec("s_T+", terminal=True, terminal_reward=r_plus),
        "s_gT-": StateSpec("s_gT-", terminal=True, terminal_reward=r_g_minus),
        "s_bT-": StateSpec("s_bT-", terminal=True, terminal_reward=r_b_minus),
    }
    return Mdp(states, TOY_START, gamma, alpha, terminal_timing)


def alpha_scaled_toy(alpha_new: float) -> Mdp:
    """Toy with every terminal reward multiplied by `alpha_new` and temperature `alpha_new`."""
    if not alpha_new > 0.0:
        raise ValueError("alpha_new must be positive")
    return build_toy(r_plus=alpha_new * 1.0, r_g_minus=alpha_new * -20.0,
                     r_b_minus=alpha_new * -1.0, alpha=alpha_new)


def _toy_branches(mdp: Mdp) -> tuple[str, str]:
    start = mdp[mdp.start_state]
    if len(start.atoms) != 2 or any(a.successor is None for a in start.atoms):
        raise ValueError("expected a start state with two deterministic atoms")
    return start.atoms[0].successor, start.atoms[1].successor


def misleading_reward_interval(mdp: Mdp, alpha: float | None = None) -> tuple[float, float]:
    """Open interval of flat penalties for the second branch that mislead the soft policy.

    Any constant Q at the second branch strictly inside the interval makes the
    soft agent prefer the second branch while the plain optimum keeps the first.
    """
    alpha = mdp.alpha if alpha is None else alpha
    good, bad = _toy_branches(mdp)
    soft = soft_value_iteration(mdp, alpha)
    atoms_g = [(a.weight, soft.Q[good][a.atom_id]) for a in mdp[good].atoms]
    total_b = math.fsum(mdp[bad].weights)
    lo = soft_state_value(atoms_g, alpha) - alpha * math.log(total_b)
    hi = max(q for _, q in atoms_g)
    if not lo < hi:
        raise ValueError(f"empty misleading interval ({lo!r}, {hi!r})")
    return lo, hi


@dataclass(frozen=True)
class GaussianPolicyParams:
    mu: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0.0:
            raise ValueError("sigma must be positive")


PAPER_GAUSS_G = GaussianPolicyParams(0.013, 0.027)
PAPER_GAUSS_B = GaussianPolicyParams(0.016, 0.877)


def _atom_q_lookup(mdp: Mdp, state_id: str):
    """Vectorized a -> Q(state, atom containing a) for the terminal-successor toy states."""
    plain = plain_value_iteration(mdp)
    atoms = mdp[state_id].atoms
    los = np.array([a.lo for a in atoms])
    his = np.array([a.hi for a in atoms])
    qs = np.array([plain.Q[state_id][a.atom_id] for a in atoms])

    def lookup(a: np.ndarray) -> np.ndarray:
        out = np.full(a.shape, np.nan)
        # earlier atoms win on shared endpoints
        for k in range(len(atoms) - 1, -1, -1):
            inside = (a >= los[k]) & (a <= his[k])
            out[inside] = qs[k]
        return out

    return lookup


def squashed_gaussian_value(params: GaussianPolicyParams, q_of_action, alpha: float,
                            n_samples: int, rng: np.random.Generator) -> float:
    """Monte Carlo soft value E[Q(tanh u) - alpha log pi(tanh u)] with u ~ N(mu, sigma)."""
    z = rng.standard_normal(n_samples)
    u = params.mu + params.sigma * z
    a = np.tanh(u)
    log_n = -0.5 * z * z - math.log(params.sigma) - 0.5 * math.log(2 * math.pi)
    # log(1 - tanh(u)^2), written stably
    log_jac = 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))
    return float(np.mean(q_of_action(a) - alpha * log_n + alpha * log_jac))


def toy_gaussian_values(params_g: GaussianPolicyParams = PAPER_GAUSS_G,
                        params_b: GaussianPolicyParams = PAPER_GAUSS_B,
                        alpha: float = 1.0, gamma: float = 0.99,
                        n_samples: int = 1_000_000, seed: int = 0) -> tuple[float, float]:
    """Q(s_0, A_1) and Q(s_0, A_2) when s_g and s_b follow tanh-squashed Gaussian policies."""
    toy = build_toy(gamma=gamma, alpha=max(alpha, 1e-12))
    rng = np.random.default_rng(seed)
    v_g = squashed_gaussian_value(params_g, _atom_q_lookup(toy, TOY_GOOD), alpha, n_samples, rng)
    v_b = squashed_gaussian_value(params_b, _atom_q_lookup(toy, TOY_BAD), alpha, n_samples, rng)
    return gamma * v_g, gamma * v_b


def toy_gaussian_expected_q(params: GaussianPolicyParams, state_id: str, gamma: float = 0.99) -> float:
    """gamma * E[Q] by region probabilities of the squashed Gaussian (no entropy term)."""
    toy = build_toy(gamma=gamma)
    total = 0.0
    for a in toy[state_id].atoms:
        q = plain_value_iteration(toy).Q[state_id][a.atom_id]
        with np.errstate(divide="ignore"):
            lo, hi = np.arctanh(np.clip([a.lo, a.hi], -1.0, 1.0))
        prob = norm.cdf(hi, params.mu, params.sigma) - norm.cdf(lo, params.mu, params.sigma)
        total += prob * q
    return gamma * total


# -- Obstacle2D --------------------------------------------------------------

GOAL = (3.0, 0.0)
WALL_X = 2.0
WALL_Y = (-2.0, 2.0)
ACTION_BOUND = 3.0
GOAL_REWARD = 500.0
WALL_REWARD = -200.0
GOAL_RADIUS = 0.1
MAX_STEPS = 50
WORLD = ((-1.0, 4.0), (-4.0, 4.0))


@dataclass(frozen=True)
class Obstacle2DState:
    position: tuple[float, float] = (0.0, 0.0)
    outcome: str = "running"
    steps: int = 0

    @property
    def done(self) -> bool:
        return self.outcome != "running"


def crosses_wall(p: Sequence[float], q: Sequence[float]) -> bool:
    """Closed-segment intersection of p->q with the wall {x = 2, -2 <= y <= 2}."""
    (x0, y0), (x1, y1) = p, q
    lo_x, hi_x = min(x0, x1), max(x0, x1)
    if not lo_x <= WALL_X <= hi_x:
        return False
    if x0 == x1:
        # segment lies on the wall line
        return max(min(y0, y1), WALL_Y[0]) <= min(max(y0, y1), WALL_Y[1])
    t = (WALL_X - x0) / (x1 - x0)
    y = y0 + t * (y1 - y0)
    return WALL_Y[0] <= y <= WALL_Y[1]


def _clamp(p):
    (xl, xh), (yl, yh) = WORLD
    return (min(max(p[0], xl), xh), min(max(p[1], yl), yh))


def obstacle2d_step(state: Obstacle2DState, action: Sequence[float], goal_radius: float = GOAL_RADIUS,
                    max_steps: int = MAX_STEPS) -> tuple[Obstacle2DState, float]:
    if state.done:
        raise ValueError("episode already finished")
    ax, ay = float(action[0]), float(action[1])
    if not (abs(ax) <= ACTION_BOUND and abs(ay) <= ACTION_BOUND):
        raise ValueError(f"action {action!r} outside [-3, 3]^2")
    p = state.position
    q = (p[0] + ax, p[1] + ay)
    steps = state.steps + 1
    if crosses_wall(p, q):
        return Obstacle2DState(p, "wall", steps), WALL_REWARD
    q = _clamp(q)
    if math.dist(q, GOAL) <= goal_radius:
        return Obstacle2DState(q, "goal", steps), GOAL_REWARD
    reward = math.dist(p, GOAL) - math.dist(q, GOAL)
    return Obstacle2DState(q, "timeout" if steps >= max_steps else "running", steps), reward


DEFAULT_ACTIONS = ((3.0, 0.0), (-3.0, 0.0), (0.0, 3.0), (0.0, -3.0),
                   (1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0))


class GridSpec:
    def __init__(self, grid_n: int):
        if grid_n < 4:
            raise ValueError("grid_n must be >= 4")
        self.n = grid_n
        (self.xl, self.xh), (self.yl, self.yh) = WORLD
        self.dx = (self.xh - self.xl) / grid_n
        self.dy = (self.yh - self.yl) / grid_n

    def cell(self, p) -> tuple[int, int]:
        i = min(int((p[0] - self.xl) // self.dx), self.n - 1)
        j = min(int((p[1] - self.yl) // self.dy), self.n - 1)
        return max(i, 0), max(j, 0)

    def center(self, i: int, j: int) -> tuple[float, float]:
        return (self.xl + (i + 0.5) * self.dx, self.yl + (j + 0.5) * self.dy)

    def box_distance(self, i: int, j: int, p) -> float:
        x0, y0 = self.xl + i * self.dx, self.yl + j * self.dy
        ddx = max(x0 - p[0], 0.0, p[0] - (x0 + self.dx))
        ddy = max(y0 - p[1], 0.0, p[1] - (y0 + self.dy))
        return math.hypot(ddx, ddy)

    @staticmethod
    def sid(i: int, j: int) -> str:
        return f"c{i}_{j}"


def discretize_obstacle2d(grid_n: int = 20, action_set: Sequence[Sequence[float]] = DEFAULT_ACTIONS,
                          gamma: float = 0.99, alpha: float = 1.0,
                          goal_radius: float = GOAL_RADIUS) -> Mdp:
    """Tabular Obstacle2D over a grid of cells, transitions stepped from cell centers.

    A step ends at the goal terminal when the continuous step reaches the goal
    or the landing cell lies within `goal_radius` of the goal (the goal point
    is generally not a cell center).
    """
    for a in action_set:
        if not (abs(a[0]) <= ACTION_BOUND and abs(a[1]) <= ACTION_BOUND):
            raise ValueError(f"action {a!r} outside [-3, 3]^2")
    g = GridSpec(grid_n)
    goal_cells = {(i, j) for i in range(grid_n) for j in range(grid_n)
                  if g.box_distance(i, j, GOAL) <= goal_radius}
    states = {
        "goal": StateSpec("goal", terminal=True, terminal_reward=0.0),
        "wall": StateSpec("wall", terminal=True, terminal_reward=0.0),
    }
    width = 2 * ACTION_BOUND / max(len(action_set), 1)
    for i in range(grid_n):
        for j in range(grid_n):
            if (i, j) in goal_cells:
                continue
            c = g.center(i, j)
            atoms = []
            for k, a in enumerate(action_set):
                nxt, r = obstacle2d_step(Obstacle2DState(c), a, goal_radius, max_steps=10**9)
                if nxt.outcome == "wall":
                    tgt = "wall"
                elif nxt.outcome == "goal" or g.cell(nxt.position) in goal_cells:
                    tgt, r = "goal", GOAL_REWARD
                else:
                    tgt = g.sid(*g.cell(nxt.position))
                # one unit-weight atom per discrete action, laid out on a 1-D index axis
                atoms.append(ActionAtom(f"a{k}", -ACTION_BOUND + k * width,
                                        -ACTION_BOUND + (k + 1) * width, r, {tgt: 1.0},
                                        weight=1.0))
            states[g.sid(i, j)] = StateSpec(g.sid(i, j), atoms=tuple(atoms))
    start = g.sid(*g.cell((0.0, 0.0)))
    meta = {"env": "obstacle2d", "grid_n": grid_n, "actions": [list(map(float, a)) for a in action_set],
            "goal_cells": sorted(g.sid(i, j) for i, j in goal_cells)}
    return Mdp(states, start, gamma, alpha, "on_entry", meta)


# -- trap chains -------------------------------------------------------------


def chain_mdp(length: int, good_reward: float = 1.0, bad_reward: float = -1.0, seed: int = 0,
              gamma: float = 0.99, alpha: float = 1.0) -> Mdp:
    """Deterministic chain; every state offers an advance atom and a detour atom.

    Both atoms move to the next state; the seed shuffles which action interval
    carries the advance atom and where the interval is split.
    """
    if length < 2:
        raise ValueError("length must be >= 2")
    rng = np.random.default_rng(seed)
    states = {"end": StateSpec("end", terminal=True, terminal_reward=0.0)}
    for t in range(length):
        sid = f"t{t}"
        nxt = f"t{t + 1}" if t + 1 < length else "end"
        cut = float(np.round(rng.uniform(-0.5, 0.5), 6))
        spans = [(-1.0, cut), (cut, 1.0)]
        if rng.random() < 0.5:
            spans.reverse()
        adv = ActionAtom("advance", *spans[0], good_reward, {nxt: 1.0})
        det = ActionAtom("detour", *spans[1], bad_reward, {nxt: 1.0})
        atoms = (adv, det) if adv.lo < det.lo else (det, adv)
        states[sid] = StateSpec(sid, atoms=atoms)
    ordered = {f"t{t}": states[f"t{t}"] for t in range(length)}
    ordered["end"] = states["end"]
    meta = {"env": "trap_chain", "length": length, "seed": seed}
    return Mdp(ordered, "t0", gamma, alpha, "on_entry", meta)


def build_trap_chain(length: int, good_reward: float = 1.0, bad_reward: float = -1.0,
                     seed: int = 0, eta: float = 0.99, **opts):
    """Chain MDP plus its all-state worst-case bifurcation extension.

    Returns ``(chain, extended, report)``.
    """
    from .bifurcation import worst_case_transform

    chain = chain_mdp(length, good_reward, bad_reward, seed)
    extended, report = worst_case_transform(chain, eta, **opts)
    extended = replace(extended, metadata={**chain.metadata, "eta": eta, "extended": True})
    return chain, extended, report
