import math

import numpy as np
import pytest

from entropy_trap.environments import build_toy, chain_mdp
from entropy_trap.mdp import ActionAtom, Mdp, StateSpec


def random_mdp(seed, n_states=None, max_atoms=4, deterministic=True, alpha=None, gamma=None):
    """Small random MDP with interval atoms and one or two terminals."""
    rng = np.random.default_rng(seed)
    n = n_states or int(rng.integers(2, 7))
    n_term = int(rng.integers(1, 3))
    ids = [f"s{i}" for i in range(n)]
    terms = [f"T{i}" for i in range(n_term)]
    targets = ids + terms
    states = {}
    for sid in ids:
        k = int(rng.integers(1, max_atoms + 1))
        cuts = np.sort(rng.uniform(-1.0, 1.0, size=k - 1))
        edges = np.concatenate([[-1.0], cuts, [1.0]])
        atoms = []
        for j in range(k):
            if deterministic:
                nxt = {str(rng.choice(targets)): 1.0}
            else:
                picks = rng.choice(targets, size=2, replace=False)
                p = float(rng.uniform(0.1, 0.9))
                nxt = {str(picks[0]): p, str(picks[1]): 1.0 - p}
            atoms.append(ActionAtom(f"a{j}", float(edges[j]), float(edges[j + 1]),
                                    float(rng.uniform(-2, 2)), nxt))
        states[sid] = StateSpec(sid, atoms=tuple(atoms))
    for tid in terms:
        states[tid] = StateSpec(tid, terminal=True, terminal_reward=float(rng.uniform(-3, 3)))
    return Mdp(states, "s0",
               gamma if gamma is not None else float(rng.uniform(0.5, 0.95)),
               alpha if alpha is not None else float(rng.uniform(0.3, 2.0)),
               str(rng.choice(["on_entry", "discounted"])))


def random_target(mdp, seed, state_id=None):
    from entropy_trap.bifurcation import TargetPolicySpec

    rng = np.random.default_rng(10_000 + seed)
    if state_id is None:
        state_id = str(rng.choice(mdp.nonterminal_ids))
    atoms = mdp[state_id].atoms
    p = rng.dirichlet(np.ones(len(atoms)))
    p = np.maximum(p, 1e-3)
    p = p / p.sum()
    return TargetPolicySpec(state_id, {a.atom_id: float(x) for a, x in zip(atoms, p)})


def naive_soft_values(mdp, alpha, tol=1e-14, max_iter=200_000):
    """Soft value iteration with plain exponentials and dict lookups (no log-sum-exp)."""
    v = {sid: 0.0 for sid in mdp.nonterminal_ids}

    def q_of(atom, v):
        total = atom.reward
        for t, p in atom.transitions.items():
            if mdp[t].terminal:
                r = mdp[t].terminal_reward
                total += p * (r if mdp.terminal_timing == "on_entry" else mdp.gamma * r)
            else:
                total += p * mdp.gamma * v[t]
        return total

    for _ in range(max_iter):
        new = {}
        for sid in mdp.nonterminal_ids:
            z = sum(a.weight * math.exp(q_of(a, v) / alpha) for a in mdp[sid].atoms)
            new[sid] = alpha * math.log(z)
        delta = max(abs(new[s] - v[s]) for s in v)
        v = new
        if delta < tol:
            break
    q = {sid: {a.atom_id: q_of(a, v) for a in mdp[sid].atoms} for sid in mdp.nonterminal_ids}
    return v, q


@pytest.fixture
def toy():
    return build_toy()


@pytest.fixture
def chain3():
    return chain_mdp(3)


FIXTURE_SEEDS = list(range(8))


@pytest.fixture(params=FIXTURE_SEEDS)
def fixture_mdp(request):
    return random_mdp(request.param, deterministic=request.param % 2 == 0)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
