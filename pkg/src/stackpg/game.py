"""Domain model: process graph, objectives, game variants, coalition strategies.

A production chain is an alternating graph of actuators (players) and
material states (reservoir fill levels).  Each player owns a set of local
objectives; a game variant decides how those objectives are combined:

* ``vanilla``  -- one weighted-sum utility per player,
* ``ds2``      -- one internal leader/follower game per player,
* ``stack``    -- a chain of leader/follower games along a priority
  hierarchy, each coalition becoming the next game's leader.

Everything in this module is a pure value type; no operation mutates its
inputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum


class GraphError(ValueError):
    """Raised when a process graph violates the alternating-chain rules."""


class ObjectiveKind(str, Enum):
    BOTTLENECK_OVERFLOW_PREV = "bottleneck_overflow_prev"
    BOTTLENECK_OVERFLOW_NEXT = "bottleneck_overflow_next"
    POWER = "power"
    DEMAND = "demand"
    CUSTOM = "custom"


@dataclass(frozen=True)
class ObjectiveSpec:
    """One local objective of a player, identified by a stable id."""

    id: str
    kind: ObjectiveKind


@dataclass(frozen=True)
class ProcessGraph:
    """Actuator/state graph of the chain.

    Edges run state->actuator (material drawn from the state) or
    actuator->state (material deposited).  Edges between two actuators or
    two states are rejected, as are players with no neighbor state at all.
    """

    actuator_nodes: tuple[str, ...]
    state_nodes: tuple[str, ...]
    edges: tuple[tuple[str, str], ...]
    global_states: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        actuators = set(self.actuator_nodes)
        states = set(self.state_nodes)
        if actuators & states:
            raise GraphError(f"nodes listed as both actuator and state: {actuators & states}")
        for a, b in self.edges:
            if a in actuators and b in actuators:
                raise GraphError(f"edge ({a}, {b}) connects two actuators")
            if a in states and b in states:
                raise GraphError(f"edge ({a}, {b}) connects two states")
            for node in (a, b):
                if node not in actuators and node not in states:
                    raise GraphError(f"edge endpoint {node!r} is not a declared node")
        if not self.global_states <= states:
            raise GraphError("global_states must be a subset of state_nodes")
        for player in self.actuator_nodes:
            prior, nxt = neighbor_states(self, player)
            if not prior and not nxt:
                raise GraphError(f"player {player!r} has no neighbor states")


def neighbor_states(graph: ProcessGraph, player: str) -> tuple[frozenset[str], frozenset[str]]:
    """Prior (incoming) and next (outgoing) neighbor states of a player."""
    if player not in graph.actuator_nodes:
        raise GraphError(f"unknown player {player!r}")
    prior = frozenset(a for a, b in graph.edges if b == player)
    nxt = frozenset(b for a, b in graph.edges if a == player)
    return prior, nxt


def local_states(graph: ProcessGraph, player: str) -> tuple[str, ...]:
    """All states a player's utility may read: prior + next + global, ordered."""
    prior, nxt = neighbor_states(graph, player)
    seen = []
    for s in graph.state_nodes:
        if s in prior or s in nxt or s in graph.global_states:
            seen.append(s)
    return tuple(seen)


# ---------------------------------------------------------------------------
# Actions
# ---------------------------------------------------------------------------

def clamp01(x: float) -> float:
    return 0.0 if x < 0.0 else (1.0 if x > 1.0 else x)


@dataclass(frozen=True)
class DeviceRange:
    """Physical range of an actuator's control variable.

    All learning happens on normalized actions in [0, 1]; this is the affine
    bridge back to device units.  ``binary`` devices threshold at 0.5.
    """

    lo: float
    hi: float
    unit: str = ""
    binary: bool = False

    def denormalize(self, action: float) -> float:
        if not 0.0 <= action <= 1.0:
            raise ValueError(f"action {action} outside [0, 1]")
        if self.binary:
            return self.hi if action >= 0.5 else self.lo
        return self.lo + action * (self.hi - self.lo)


def coalition_combine(a_leader: float, a_follower: float, mode: str = "additive") -> float:
    """Combine the leader's and follower's normalized actions into one.

    ``additive`` is the form the shipped experiments use; ``multiplicative``
    is the definitional alternative.  Both clamp back into [0, 1].
    """
    if mode == "additive":
        return clamp01(a_leader + a_follower)
    if mode == "multiplicative":
        return clamp01(a_leader * a_follower)
    raise ValueError(f"unknown coalition mode {mode!r}")


# ---------------------------------------------------------------------------
# Objective hierarchies and game variants
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ObjectiveHierarchy:
    """Priority order over a player's objectives, most important first.

    Each slot is a *group* of objective ids whose utilities are summed; the
    reference configurations use singleton groups only.  Groups exist so a
    single leader/follower split (a 2-slot hierarchy) can express the ds2
    variant exactly.
    """

    slots: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        flat = [oid for slot in self.slots for oid in slot]
        if len(flat) != len(set(flat)):
            raise ValueError("hierarchy repeats an objective id")
        if any(len(slot) == 0 for slot in self.slots):
            raise ValueError("empty hierarchy slot")

    @property
    def k(self) -> int:
        return len(self.slots)

    @property
    def n_games(self) -> int:
        return self.k - 1

    def validate_against(self, objective_ids: set[str]) -> None:
        flat = {oid for slot in self.slots for oid in slot}
        if flat != objective_ids:
            raise ValueError(
                f"hierarchy covers {sorted(flat)} but player objectives are {sorted(objective_ids)}"
            )
        if self.k < 2:
            raise ValueError("a stacked variant needs at least 2 hierarchy slots")


@dataclass(frozen=True)
class VanillaVariant:
    """Weighted-sum utility; weights keyed by objective id."""

    weights: dict[str, float]

    def __post_init__(self):
        for oid, w in self.weights.items():
            if not math.isfinite(w) or w < 0.0:
                raise ValueError(f"weight for {oid!r} must be finite and >= 0, got {w}")


@dataclass(frozen=True)
class DS2Variant:
    """Single internal leader/follower split per player."""

    leader_objectives: dict[str, tuple[str, ...]]    # player -> objective ids
    follower_objectives: dict[str, tuple[str, ...]]
    beta_l: float = 0.65
    theta_l: float | None = 2.0

    def __post_init__(self):
        if not 0.0 <= self.beta_l <= 1.0:
            raise ValueError(f"beta_l must be in [0, 1], got {self.beta_l}")


@dataclass(frozen=True)
class StackVariant:
    """Chained leader/follower games along per-player hierarchies."""

    hierarchies: dict[str, ObjectiveHierarchy]       # player -> hierarchy
    beta_l: tuple[float, ...] = (0.50, 0.65, 0.75)   # per game z, last reused
    theta_l: tuple[float | None, ...] | None = None  # None disables all gates

    def __post_init__(self):
        for b in self.beta_l:
            if not 0.0 <= b <= 1.0:
                raise ValueError(f"beta_l entries must be in [0, 1], got {b}")

    def beta_for(self, z: int) -> float:
        return self.beta_l[min(z, len(self.beta_l) - 1)]

    def theta_for(self, z: int) -> float | None:
        if self.theta_l is None:
            return None
        return self.theta_l[min(z, len(self.theta_l) - 1)]


GameVariant = VanillaVariant | DS2Variant | StackVariant


@dataclass(frozen=True)
class GameSpec:
    """One leader/follower game inside a player, fully resolved.

    ``leader_ids`` is the cumulative prefix of the hierarchy up to this
    game's leader slot; its utility is the plain sum of those signals.  The
    follower utility trades that sum off against the follower slot's sum.
    """

    z: int
    leader_ids: tuple[str, ...]
    follower_ids: tuple[str, ...]
    beta: float
    theta: float | None

    def leader_utility(self, signals: dict[str, float]) -> float:
        return sum(signals[oid] for oid in self.leader_ids)

    def gate_open(self, signals: dict[str, float]) -> bool:
        """Whether the follower trains this window (leader good enough)."""
        return self.theta is None or self.leader_utility(signals) >= self.theta

    def follower_utility(self, signals: dict[str, float]) -> float:
        u_lead = self.leader_utility(signals)
        u_next = sum(signals[oid] for oid in self.follower_ids)
        u_f = self.beta * u_lead + (1.0 - self.beta) * u_next
        if self.theta is not None and u_lead < self.theta:
            return 0.0
        return u_f


def games_for_player(variant: DS2Variant | StackVariant, player: str) -> tuple[GameSpec, ...]:
    """Resolve a variant into the ordered list of games one player runs.

    ds2 degenerates to a single game over the (leader group, follower group)
    hierarchy; stack yields k-1 games with cumulative leader prefixes.
    """
    if isinstance(variant, DS2Variant):
        hierarchy = ObjectiveHierarchy(
            (tuple(variant.leader_objectives[player]), tuple(variant.follower_objectives[player]))
        )
        betas: tuple[float, ...] = (variant.beta_l,)
        thetas: tuple[float | None, ...] = (variant.theta_l,)
    else:
        hierarchy = variant.hierarchies[player]
        betas = tuple(variant.beta_for(z) for z in range(hierarchy.n_games))
        thetas = tuple(variant.theta_for(z) for z in range(hierarchy.n_games))
    games = []
    prefix: tuple[str, ...] = ()
    for z in range(hierarchy.n_games):
        prefix = prefix + hierarchy.slots[z]
        games.append(
            GameSpec(
                z=z,
                leader_ids=prefix,
                follower_ids=hierarchy.slots[z + 1],
                beta=betas[z],
                theta=thetas[z],
            )
        )
    return tuple(games)


def vanilla_utility(variant: VanillaVariant, signals: dict[str, float]) -> float:
    """Weighted sum of one player's objective signals (the baseline utility)."""
    return sum(variant.weights.get(oid, 0.0) * val for oid, val in signals.items())


def potential_value(utilities) -> float:
    """Sum of per-player combined utilities -- the common comparison scale.

    Callers pass vanilla-weighted utilities so all variants are scored
    identically.  Non-finite inputs are a contract violation.
    """
    total = 0.0
    for u in utilities:
        if not math.isfinite(u):
            raise ValueError(f"non-finite player utility {u}")
        total += u
    return total
