"""Entropy bifurcation extensions.

An extension reroutes each atom of a targeted state through a fresh
bifurcating state with two branches: one returns to the original successor,
the other ends in a fresh terminal whose reward and action-space measure are
tuned so the bifurcating state's soft value is whatever the target policy
needs. Plain optimal Q values on the original states do not move; the soft
optimal policy at the targeted state becomes the target.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Mapping, Sequence

from .mdp import ActionAtom, Mdp, PiecewisePolicy, StateSpec
from .solvers import (
    DEFAULT_TOL,
    PlainSolution,
    SoftSolution,
    boltzmann_policy,
    kl_divergence,
    plain_value_iteration,
    policy_evaluation,
    soft_value_iteration,
)

MAX_W1_HALVINGS = 60


class ExtensionError(ValueError):
    """The requested extension cannot be built."""


class InfeasibleExtension(ExtensionError):
    pass


@dataclass(frozen=True)
class TargetPolicySpec:
    state_id: str
    masses: Mapping[str, float]

    def __post_init__(self):
        object.__setattr__(self, "masses", {k: float(v) for k, v in self.masses.items()})
        for aid, p in self.masses.items():
            if not (p > 0.0 and math.isfinite(p)):
                raise ExtensionError(f"target mass for {aid!r} must be strictly positive, got {p!r}")
        total = math.fsum(self.masses.values())
        if abs(total - 1.0) > 1e-10:
            raise ExtensionError(f"target masses sum to {total!r}")

    def vector(self, mdp: Mdp) -> list[float]:
        spec = mdp[self.state_id]
        ids = [a.atom_id for a in spec.atoms]
        if set(ids) != set(self.masses):
            raise ExtensionError(
                f"target atoms {sorted(self.masses)} do not match state atoms {sorted(ids)}")
        return [self.masses[aid] for aid in ids]

    @classmethod
    def parse(cls, state_id: str, text: str) -> "TargetPolicySpec":
        """Parse ``"A_1:0.01,A_2:0.99"``."""
        masses = {}
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            aid, _, val = part.rpartition(":")
            if not aid:
                raise ExtensionError(f"bad target entry {part!r}; expected atom:mass")
            masses[aid.strip()] = float(val)
        return cls(state_id, masses)

    def to_doc(self) -> dict:
        return {"state": self.state_id, "masses": dict(self.masses)}

    @classmethod
    def from_doc(cls, doc: Mapping) -> "TargetPolicySpec":
        try:
            return cls(str(doc["state"]), dict(doc["masses"]))
        except KeyError as exc:
            raise ExtensionError(f"target document missing field {exc.args[0]!r}") from None


@dataclass
class BifurcationParams:
    state_id: str
    atom_id: str
    mu_state: str
    trap_state: str
    successor: str
    w1: float
    w2: float
    r_loop: float
    r_trap: float
    v_target: float
    q1: float
    q2: float


@dataclass
class ExtensionReport:
    kl_at_target: float
    plain_q_residual: float
    soft_v_residual: float
    trap_avoidance_margin: float
    greedy_preserved: bool = True
    j_plus: float | None = None
    j_minus: float | None = None
    j_maxent: float | None = None
    params: list[BifurcationParams] = field(default_factory=list)

    def passed(self, kl_tol: float = 1e-6, plain_tol: float = 1e-8) -> bool:
        return (self.kl_at_target < kl_tol and self.plain_q_residual < plain_tol
                and self.greedy_preserved)

    def to_doc(self) -> dict:
        doc = {k: v for k, v in asdict(self).items() if k != "params"}
        doc["params"] = [asdict(p) for p in self.params]
        return doc


# -- closed-form pieces ------------------------------------------------------


def backward_q(target: Sequence[float], v_s: float, alpha: float, weights: Sequence[float]) -> list[float]:
    """Q_k = alpha log(p_k / w_k) + v_s: the Q vector whose Boltzmann policy is `target`
    and whose soft value is `v_s`."""
    if len(target) != len(weights):
        raise ValueError("length mismatch")
    out = []
    for p, w in zip(target, weights):
        if not p > 0.0:
            raise ExtensionError("target mass must be strictly positive on every atom")
        out.append(alpha * math.log(p / w) + v_s)
    return out


def _log_diff_exp(a: float, b: float) -> float:
    """log(e^a - e^b) for a > b."""
    return a + math.log(-math.expm1(b - a))


def trap_log_mass(v_target: float, q1: float, alpha: float, w1: float) -> float:
    """log(e^{v/alpha} - w1 e^{q1/alpha}); raises when the difference is not positive."""
    a = v_target / alpha
    b = math.log(w1) + q1 / alpha
    if not a > b:
        raise InfeasibleExtension(
            f"v_target={v_target!r} too small for w1={w1!r}, q1={q1!r} "
            f"(need v_target > q1 + alpha*log(w1) = {alpha * b!r})")
    return _log_diff_exp(a, b)


def forward_solve(v_target: float, q1: float, alpha: float, gamma: float, w1: float, w2: float,
                  terminal_timing: str = "on_entry") -> tuple[float, float]:
    """Trap-branch Q and trap terminal reward giving the bifurcating state soft value `v_target`.

    Returns ``(q2, r_trap)``.
    """
    if not (w1 > 0.0 and w2 > 0.0):
        raise ValueError("branch weights must be positive")
    q2 = alpha * (trap_log_mass(v_target, q1, alpha, w1) - math.log(w2))
    r_trap = q2 if terminal_timing == "on_entry" else q2 / gamma
    return q2, r_trap


# -- construction ------------------------------------------------------------


def _continuation(mdp: Mdp, sid: str, values: Mapping[str, float]) -> float:
    """What entering `sid` contributes to the entering atom's Q."""
    if mdp[sid].terminal:
        return mdp.terminal_value(sid)
    return mdp.gamma * values[sid]


def mu_ids(state_id: str, atom_id: str) -> tuple[str, str]:
    return f"{state_id}::{atom_id}::mu", f"{state_id}::{atom_id}::muT"


def build_extensions(mdp: Mdp, targets: Iterable[TargetPolicySpec], w1: float = 1.0,
                     w2_min: float = 1.0, margin: float = 0.1,
                     soft: SoftSolution | None = None, plain: PlainSolution | None = None,
                     tol: float = DEFAULT_TOL) -> tuple[Mdp, list[BifurcationParams]]:
    """Extend `mdp` at several states at once (one target per state)."""
    targets = list(targets)
    if len({t.state_id for t in targets}) != len(targets):
        raise ExtensionError("at most one target per state")
    alpha, gamma = mdp.alpha, mdp.gamma
    if gamma <= 0.0:
        raise ExtensionError("bifurcation needs gamma > 0")
    for t in targets:
        if t.state_id not in mdp.states or mdp[t.state_id].terminal:
            raise ExtensionError(f"unknown or terminal target state {t.state_id!r}")
        for a in mdp[t.state_id].atoms:
            if a.successor is None:
                raise ExtensionError(
                    f"atom {a.atom_id!r} at {t.state_id!r} has no deterministic successor")
        t.vector(mdp)
    soft = soft or soft_value_iteration(mdp, alpha, tol)
    plain = plain or plain_value_iteration(mdp, tol)

    new_states = dict(mdp.states)
    params: list[BifurcationParams] = []
    for t in sorted(targets, key=lambda t: t.state_id):
        spec = mdp[t.state_id]
        q_target = backward_q(t.vector(mdp), soft.V[t.state_id], alpha, spec.weights)
        rewired = []
        for atom, qt in zip(spec.atoms, q_target):
            s_next = atom.successor
            mu, trap = mu_ids(t.state_id, atom.atom_id)
            if mu in new_states or trap in new_states:
                raise ExtensionError(f"state id collision for {mu!r}")
            v_target = (qt - atom.reward) / gamma
            c_plain = _continuation(mdp, s_next, plain.V)
            c_soft = _continuation(mdp, s_next, soft.V)
            # plain value through the loop branch equals the bypassed continuation
            r_loop = (1.0 - gamma) / gamma * c_plain
            q1 = r_loop + c_soft
            q1_plain = r_loop + c_plain

            w1_eff = w1
            for _ in range(MAX_W1_HALVINGS + 1):
                if v_target / alpha > math.log(w1_eff) + q1 / alpha:
                    break
                w1_eff /= 2.0
            else:
                raise InfeasibleExtension(
                    f"{t.state_id}/{atom.atom_id}: v_target={v_target:.6g} infeasible with "
                    f"q1={q1:.6g} even after shrinking w1 to {w1_eff:.3g}")
            log_mass = trap_log_mass(v_target, q1, alpha, w1_eff)
            # keep the trap branch's plain value at least `margin` below the loop branch
            log_w2 = max(math.log(w2_min), log_mass - (q1_plain - margin) / alpha)
            w2 = math.exp(log_w2)
            q2, r_trap = forward_solve(v_target, q1, alpha, gamma, w1_eff, w2, mdp.terminal_timing)

            new_states[mu] = StateSpec(mu, atoms=(
                ActionAtom("A1", 0.0, w1_eff, r_loop, {s_next: 1.0}, weight=w1_eff),
                ActionAtom("A2", w1_eff, w1_eff + w2, 0.0, {trap: 1.0}, weight=w2),
            ))
            new_states[trap] = StateSpec(trap, terminal=True, terminal_reward=r_trap)
            rewired.append(replace(atom, transitions={mu: 1.0}))
            params.append(BifurcationParams(t.state_id, atom.atom_id, mu, trap, s_next, w1_eff, w2,
                                            r_loop, r_trap, v_target, q1, q2))
        new_states[t.state_id] = replace(spec, atoms=tuple(rewired))
    extended = replace(mdp, states=new_states)
    return extended, params


def build_extension(mdp: Mdp, target: TargetPolicySpec, w1: float = 1.0, w2_min: float = 1.0,
                    margin: float = 0.1, tol: float = DEFAULT_TOL) -> tuple[Mdp, list[BifurcationParams]]:
    """Extend `mdp` so the soft optimal policy at ``target.state_id`` equals the target."""
    return build_extensions(mdp, [target], w1=w1, w2_min=w2_min, margin=margin, tol=tol)


# -- verification ------------------------------------------------------------


def verify_extension(original: Mdp, extended: Mdp, target: TargetPolicySpec | Iterable[TargetPolicySpec],
                     tol: float = DEFAULT_TOL, params: list[BifurcationParams] | None = None,
                     soft_orig: SoftSolution | None = None,
                     plain_orig: PlainSolution | None = None) -> ExtensionReport:
    """Certify an extension by re-solving both MDPs from scratch."""
    targets = [target] if isinstance(target, TargetPolicySpec) else list(target)
    for sid in original.states:
        if sid not in extended.states:
            raise ExtensionError(f"extended MDP lacks original state {sid!r}")
    for sid in original.nonterminal_ids:
        a_orig = [a.atom_id for a in original[sid].atoms]
        a_ext = [a.atom_id for a in extended[sid].atoms]
        if a_orig != a_ext:
            raise ExtensionError(f"atom ids differ at {sid!r}")

    soft_o = soft_orig or soft_value_iteration(original, original.alpha, tol)
    plain_o = plain_orig or plain_value_iteration(original, tol)
    soft_e = soft_value_iteration(extended, extended.alpha, tol)
    plain_e = plain_value_iteration(extended, tol)

    kl = 0.0
    for t in targets:
        p_ext = list(soft_e.policy[t.state_id])
        kl = max(kl, kl_divergence(p_ext, t.vector(original)))

    plain_res = 0.0
    soft_res = 0.0
    greedy_same = True
    for sid in original.nonterminal_ids:
        for aid, q in plain_o.Q[sid].items():
            plain_res = max(plain_res, abs(plain_e.Q[sid][aid] - q))
        soft_res = max(soft_res, abs(soft_e.V[sid] - soft_o.V[sid]))
        greedy_same &= plain_e.greedy[sid] == plain_o.greedy[sid]

    margin = math.inf
    for sid in extended.states:
        if sid.endswith("::mu") and sid not in original.states:
            q = plain_e.Q[sid]
            margin = min(margin, q["A1"] - q["A2"])
    return ExtensionReport(kl, plain_res, soft_res, margin, greedy_same, params=list(params or []))


# -- worst case ----------------------------------------------------------------


def worst_case_targets(mdp: Mdp, eta: float, tol: float = DEFAULT_TOL) -> list[TargetPolicySpec]:
    """Mass `eta` on each state's plain-worst atom, the rest spread evenly."""
    if not 0.0 < eta < 1.0:
        raise ValueError("eta must lie in (0, 1)")
    worst = plain_value_iteration(mdp, tol, minimize=True)
    out = []
    for sid in mdp.nonterminal_ids:
        atoms = mdp[sid].atoms
        if len(atoms) < 2:
            continue
        qmin = worst.Q[sid]
        k_worst = min(range(len(atoms)), key=lambda k: (qmin[atoms[k].atom_id], k))
        rest = (1.0 - eta) / (len(atoms) - 1)
        out.append(TargetPolicySpec(sid, {a.atom_id: (eta if k == k_worst else rest)
                                          for k, a in enumerate(atoms)}))
    return out


def maxent_policy_on_original(original: Mdp, soft_ext: SoftSolution) -> PiecewisePolicy:
    """The extended MDP's soft optimal policy, read off on the original states."""
    return PiecewisePolicy({sid: soft_ext.policy[sid] for sid in original.nonterminal_ids})


def worst_case_transform(mdp: Mdp, eta: float = 0.99, w1: float = 1.0, w2_min: float = 1.0,
                         margin: float = 0.1, tol: float = DEFAULT_TOL) -> tuple[Mdp, ExtensionReport]:
    """Extend every original state so the soft optimal policy concentrates on the worst atoms."""
    for sid in mdp.nonterminal_ids:
        for a in mdp[sid].atoms:
            if a.successor is None:
                raise ExtensionError(f"atom {a.atom_id!r} at {sid!r} has no deterministic successor")
    targets = worst_case_targets(mdp, eta, tol)
    soft_o = soft_value_iteration(mdp, mdp.alpha, tol)
    plain_o = plain_value_iteration(mdp, tol)
    extended, params = build_extensions(mdp, targets, w1, w2_min, margin, soft_o, plain_o, tol)
    report = verify_extension(mdp, extended, targets, tol, params, soft_o, plain_o)

    worst = plain_value_iteration(mdp, tol, minimize=True)
    report.j_plus = plain_o.V[mdp.start_state]
    report.j_minus = worst.V[mdp.start_state]
    soft_e = soft_value_iteration(extended, extended.alpha, tol)
    _, report.j_maxent = policy_evaluation(mdp, maxent_policy_on_original(mdp, soft_e),
                                           with_entropy=False)
    return extended, report


def boltzmann_at(mdp: Mdp, soft: SoftSolution, state_id: str) -> list[float]:
    spec = mdp[state_id]
    return boltzmann_policy([(a.weight, soft.Q[state_id][a.atom_id]) for a in spec.atoms], soft.alpha)
