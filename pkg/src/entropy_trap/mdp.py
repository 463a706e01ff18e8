"""Interval-action MDP data model.

Each non-terminal state owns an ordered list of action atoms. An atom is an
interval of the action space with a Lebesgue weight; reward and transitions
are constant over it, so Q is piecewise constant and every integral over the
action space becomes a weighted sum over atoms.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

TERMINAL_TIMINGS = ("on_entry", "discounted")
PROB_TOL = 1e-12


class MdpError(ValueError):
    """Base error for malformed MDPs and documents."""


class MdpParseError(MdpError):
    """Document is structurally malformed (missing or mistyped field)."""


class MdpValidationError(MdpError):
    """Document parsed but violates one or more invariants."""

    def __init__(self, violations: list["Violation"]):
        self.violations = violations
        lines = "; ".join(str(v) for v in violations)
        super().__init__(f"invalid MDP ({len(violations)} violation(s)): {lines}")


@dataclass(frozen=True)
class ActionAtom:
    atom_id: str
    lo: float
    hi: float
    reward: float
    transitions: Mapping[str, float]
    weight: float | None = None

    def __post_init__(self):
        if self.weight is None:
            object.__setattr__(self, "weight", self.hi - self.lo)
        object.__setattr__(self, "transitions", dict(self.transitions))

    @property
    def successor(self) -> str | None:
        """The single next state if the atom is deterministic, else None."""
        if len(self.transitions) == 1:
            (sid, p), = self.transitions.items()
            if p == 1.0:
                return sid
        return None


@dataclass(frozen=True)
class StateSpec:
    state_id: str
    terminal: bool = False
    terminal_reward: float = 0.0
    atoms: tuple[ActionAtom, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "atoms", tuple(self.atoms))

    def atom(self, atom_id: str) -> ActionAtom:
        for a in self.atoms:
            if a.atom_id == atom_id:
                return a
        raise KeyError(f"state {self.state_id!r} has no atom {atom_id!r}")

    def atom_index(self, atom_id: str) -> int:
        for k, a in enumerate(self.atoms):
            if a.atom_id == atom_id:
                return k
        raise KeyError(f"state {self.state_id!r} has no atom {atom_id!r}")

    @property
    def weights(self) -> list[float]:
        return [a.weight for a in self.atoms]


@dataclass(frozen=True)
class Mdp:
    states: Mapping[str, StateSpec]
    start_state: str
    gamma: float
    alpha: float = 1.0
    terminal_timing: str = "on_entry"
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "states", dict(self.states))
        object.__setattr__(self, "metadata", dict(self.metadata))

    def __getitem__(self, state_id: str) -> StateSpec:
        return self.states[state_id]

    @property
    def nonterminal_ids(self) -> list[str]:
        return [sid for sid, s in self.states.items() if not s.terminal]

    def terminal_value(self, state_id: str) -> float:
        """Contribution of entering terminal `state_id` to the Q of the entering atom."""
        r = self.states[state_id].terminal_reward
        return r if self.terminal_timing == "on_entry" else self.gamma * r

    def with_state(self, spec: StateSpec) -> "Mdp":
        states = dict(self.states)
        states[spec.state_id] = spec
        return replace(self, states=states)


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str
    state_id: str | None = None
    atom_id: str | None = None

    def __str__(self):
        where = ""
        if self.state_id is not None:
            where = f"[{self.state_id}" + (f"/{self.atom_id}" if self.atom_id else "") + "] "
        return f"{where}{self.message}"


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok

    def __len__(self):
        return len(self.violations)

    def __iter__(self):
        return iter(self.violations)


def validate(mdp: Mdp) -> ValidationReport:
    """Collect every violated invariant; never raises on bad content."""
    out: list[Violation] = []

    def add(kind, msg, sid=None, aid=None):
        out.append(Violation(kind, msg, sid, aid))

    if not (isinstance(mdp.gamma, (int, float)) and 0.0 <= mdp.gamma < 1.0):
        add("gamma", f"gamma must lie in [0, 1), got {mdp.gamma!r}")
    if not (isinstance(mdp.alpha, (int, float)) and mdp.alpha > 0.0):
        add("alpha", f"alpha must be positive, got {mdp.alpha!r}")
    if mdp.terminal_timing not in TERMINAL_TIMINGS:
        add("terminal_timing", f"unknown terminal_timing {mdp.terminal_timing!r}")
    if mdp.start_state not in mdp.states:
        add("start", f"start state {mdp.start_state!r} does not exist")

    for sid, spec in mdp.states.items():
        if spec.state_id != sid:
            add("state_id", f"state keyed {sid!r} carries id {spec.state_id!r}", sid)
        if spec.terminal:
            if spec.atoms:
                add("terminal_atoms", "terminal state has atoms", sid)
            if not math.isfinite(spec.terminal_reward):
                add("terminal_reward", "terminal reward is not finite", sid)
            continue
        if not spec.atoms:
            add("no_atoms", "non-terminal state has no atoms", sid)
        seen = set()
        for a in spec.atoms:
            aid = a.atom_id
            if aid in seen:
                add("duplicate_atom", f"duplicate atom id {aid!r}", sid, aid)
            seen.add(aid)
            if not a.hi > a.lo:
                add("interval", f"empty interval: hi {a.hi!r} <= lo {a.lo!r}", sid, aid)
            if not (math.isfinite(a.weight) and a.weight > 0.0):
                add("weight", f"nonpositive weight {a.weight!r}", sid, aid)
            if not math.isfinite(a.reward):
                add("reward", "reward is not finite", sid, aid)
            if not a.transitions:
                add("transitions", "atom has no transitions", sid, aid)
                continue
            for tgt, p in a.transitions.items():
                if tgt not in mdp.states:
                    add("unknown_target", f"unknown transition target {tgt!r}", sid, aid)
                if not (math.isfinite(p) and p >= 0.0):
                    add("probability", f"negative or non-finite probability {p!r} to {tgt!r}", sid, aid)
            total = math.fsum(a.transitions.values())
            if abs(total - 1.0) > PROB_TOL:
                add("probability_sum", f"probabilities sum to {total:.12g}", sid, aid)
        ordered = sorted(spec.atoms, key=lambda a: a.lo)
        for left, right in zip(ordered, ordered[1:]):
            if right.lo < left.hi:
                add("overlap",
                    f"atoms {left.atom_id!r} and {right.atom_id!r} overlap",
                    sid, right.atom_id)
    return ValidationReport(out)


def check(mdp: Mdp) -> Mdp:
    report = validate(mdp)
    if not report.ok:
        raise MdpValidationError(report.violations)
    return mdp


# -- serialization -----------------------------------------------------------


def _num(x: float) -> float:
    # repr round-trips binary64 exactly (at most 17 significant digits)
    return float(x)


def save_mdp(mdp: Mdp) -> dict:
    """Serialize a valid MDP to a JSON-compatible document."""
    check(mdp)
    states = {}
    for sid, s in mdp.states.items():
        states[sid] = {
            "terminal": bool(s.terminal),
            "terminal_reward": _num(s.terminal_reward),
            "atoms": [
                {
                    "id": a.atom_id,
                    "lo": _num(a.lo),
                    "hi": _num(a.hi),
                    "weight": _num(a.weight),
                    "reward": _num(a.reward),
                    "next": {t: _num(p) for t, p in a.transitions.items()},
                }
                for a in s.atoms
            ],
        }
    doc = {
        "gamma": _num(mdp.gamma),
        "alpha": _num(mdp.alpha),
        "terminal_timing": mdp.terminal_timing,
        "start": mdp.start_state,
        "states": states,
    }
    if mdp.metadata:
        doc["metadata"] = dict(mdp.metadata)
    return doc


def _field(obj: Mapping, key: str, kind, where: str):
    if not isinstance(obj, Mapping):
        raise MdpParseError(f"{where}: expected an object, got {type(obj).__name__}")
    if key not in obj:
        raise MdpParseError(f"{where}: missing field {key!r}")
    val = obj[key]
    if kind is float:
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise MdpParseError(f"{where}: field {key!r} must be a number")
        return float(val)
    if not isinstance(val, kind):
        raise MdpParseError(f"{where}: field {key!r} must be {kind.__name__}")
    return val


def load_mdp(doc: Mapping) -> Mdp:
    """Parse and validate a document produced by :func:`save_mdp`."""
    gamma = _field(doc, "gamma", float, "document")
    alpha = _field(doc, "alpha", float, "document")
    timing = _field(doc, "terminal_timing", str, "document")
    start = _field(doc, "start", str, "document")
    raw_states = _field(doc, "states", dict, "document")
    states = {}
    for sid, raw in raw_states.items():
        where = f"states.{sid}"
        terminal = _field(raw, "terminal", bool, where)
        treward = float(raw.get("terminal_reward", 0.0)) if terminal else 0.0
        atoms = []
        for k, ra in enumerate(_field(raw, "atoms", list, where)):
            aw = f"{where}.atoms[{k}]"
            nxt = _field(ra, "next", dict, aw)
            atoms.append(ActionAtom(
                atom_id=_field(ra, "id", str, aw),
                lo=_field(ra, "lo", float, aw),
                hi=_field(ra, "hi", float, aw),
                weight=_field(ra, "weight", float, aw) if "weight" in ra else None,
                reward=_field(ra, "reward", float, aw),
                transitions={str(t): _field(nxt, t, float, f"{aw}.next") for t in nxt},
            ))
        states[sid] = StateSpec(sid, terminal, treward, tuple(atoms))
    mdp = Mdp(states, start, gamma, alpha, timing, doc.get("metadata", {}))
    return check(mdp)


def dump_mdp(mdp: Mdp, path: str | Path) -> None:
    Path(path).write_text(json.dumps(save_mdp(mdp), indent=1))


def read_mdp(path: str | Path) -> Mdp:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MdpParseError(f"{path}: not valid JSON ({exc})") from exc
    return load_mdp(doc)


# -- refinement --------------------------------------------------------------


def refine_atom(mdp: Mdp, state_id: str, atom_id: str, parts: int) -> Mdp:
    """Split one atom into `parts` equal-width atoms with the same reward and transitions."""
    if state_id not in mdp.states:
        raise KeyError(f"unknown state {state_id!r}")
    spec = mdp.states[state_id]
    k = spec.atom_index(atom_id)
    if parts < 2:
        raise ValueError("parts must be >= 2")
    atom = spec.atoms[k]
    width = (atom.hi - atom.lo) / parts
    pieces = []
    for i in range(parts):
        lo = atom.lo + i * width
        hi = atom.hi if i == parts - 1 else atom.lo + (i + 1) * width
        pieces.append(replace(atom, atom_id=f"{atom_id}.{i}", lo=lo, hi=hi,
                              weight=atom.weight / parts))
    atoms = spec.atoms[:k] + tuple(pieces) + spec.atoms[k + 1:]
    return mdp.with_state(replace(spec, atoms=atoms))


# -- policies ----------------------------------------------------------------


@dataclass(frozen=True)
class PiecewisePolicy:
    """Per-state probability masses aligned with the state's atoms."""

    masses: Mapping[str, tuple[float, ...]]

    def __post_init__(self):
        object.__setattr__(self, "masses", {s: tuple(float(x) for x in p)
                                            for s, p in self.masses.items()})

    def __getitem__(self, state_id: str) -> tuple[float, ...]:
        return self.masses[state_id]

    def density(self, mdp: Mdp, state_id: str) -> list[float]:
        return [p / w for p, w in zip(self.masses[state_id], mdp[state_id].weights)]

    def check(self, mdp: Mdp, tol: float = 1e-10) -> None:
        for sid in mdp.nonterminal_ids:
            if sid not in self.masses:
                raise ValueError(f"policy has no masses for state {sid!r}")
            p = self.masses[sid]
            if len(p) != len(mdp[sid].atoms):
                raise ValueError(
                    f"policy at {sid!r} has {len(p)} masses for {len(mdp[sid].atoms)} atoms")
            if any(x < 0.0 or not math.isfinite(x) for x in p):
                raise ValueError(f"policy at {sid!r} has a negative or non-finite mass")
            if abs(math.fsum(p) - 1.0) > tol:
                raise ValueError(f"policy masses at {sid!r} sum to {math.fsum(p)!r}")

    @classmethod
    def uniform(cls, mdp: Mdp) -> "PiecewisePolicy":
        """Uniform density: mass proportional to atom weight."""
        out = {}
        for sid in mdp.nonterminal_ids:
            w = mdp[sid].weights
            total = math.fsum(w)
            out[sid] = tuple(x / total for x in w)
        return cls(out)

    @classmethod
    def deterministic(cls, mdp: Mdp, choice: Mapping[str, str]) -> "PiecewisePolicy":
        """All mass on one atom per state; states missing from `choice` use their first atom."""
        out = {}
        for sid in mdp.nonterminal_ids:
            spec = mdp[sid]
            k = spec.atom_index(choice[sid]) if sid in choice else 0
            out[sid] = tuple(1.0 if i == k else 0.0 for i in range(len(spec.atoms)))
        return cls(out)
