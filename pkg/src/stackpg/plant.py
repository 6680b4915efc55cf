"""Bulk-goods production line simulator.

A chain of five actuators moves granular material from an unlimited supply
through alternating hoppers and silos to an outlet hopper that serves a
constant product demand:

    supply -> belt -> hopper_a -> pump_a -> silo_a -> vibro -> hopper_b
           -> pump_b -> silo_b -> feeder -> outlet -> demand

Material moves in liters; each step transfers min(desired, available) out of
the source and spills anything beyond the sink's headroom into an overflow
ledger, so supplied = delivered + spilled + inventory change holds exactly.

Utility signals are shaped per window from band-violation integrals over
the reservoir each player fills: how deep its fill sat below the low
threshold (the player starving its downstream neighbor) and how deep above
the high threshold (the player overfilling it), plus mean electrical power
and, for the final actuator, the unserved demand volume.  All signals live
in (0, 1].
Every reservoir is regulated by exactly one player, the one pumping into
it, so demand pull propagates up the chain window by window while the upper
threshold stops flooding; power is the tie-breaker in between.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .game import DeviceRange, ObjectiveKind, ObjectiveSpec, ProcessGraph


class PlantError(RuntimeError):
    """Raised on invalid actions, broken wiring, or non-finite plant state."""


ACTUATOR_KINDS = ("rpm", "timed", "binary")


@dataclass
class Reservoir:
    """One material buffer with soft operating thresholds.

    ``q_low``/``q_high`` bound the preferred fill band; crossing them only
    costs utility.  Physical loss happens at ``capacity``.  Unlimited
    reservoirs model the raw-material supply: draining them never reduces
    their fill.
    """

    name: str
    capacity: float
    q_low: float
    q_high: float
    fill: float
    unlimited: bool = False
    overflow: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.q_low < self.q_high < self.capacity:
            raise PlantError(
                f"{self.name}: need 0 < q_low < q_high < capacity, "
                f"got {self.q_low}, {self.q_high}, {self.capacity}"
            )
        if not 0.0 <= self.fill <= self.capacity:
            raise PlantError(f"{self.name}: initial fill {self.fill} outside [0, capacity]")

    @property
    def headroom(self) -> float:
        return self.capacity - self.fill


@dataclass(frozen=True)
class ActuatorSpec:
    """Transport device between two reservoirs.

    Kinds:

    * ``rpm``    -- continuous speed; flow and power affine in the action.
    * ``timed``  -- runs at full rate for the first ``action * window``
      seconds of every utility window, then idles.
    * ``binary`` -- full rate when the action is >= 0.5, else off.
    """

    name: str
    kind: str
    source: str
    sink: str
    flow_lo: float
    flow_hi: float
    power_lo_kw: float
    power_hi_kw: float
    device: DeviceRange

    def __post_init__(self):
        if self.kind not in ACTUATOR_KINDS:
            raise PlantError(f"{self.name}: unknown actuator kind {self.kind!r}")
        if self.flow_lo < 0.0 or self.flow_hi < self.flow_lo:
            raise PlantError(f"{self.name}: need 0 <= flow_lo <= flow_hi")

    def _is_on(self, action: float, phase: float, window: float) -> bool:
        if self.kind == "binary":
            return action >= 0.5
        if self.kind == "timed":
            return phase < action * window
        return True

    def flow_rate(self, action: float, phase: float, window: float) -> float:
        """Transport rate in L/s for a normalized action at a window phase."""
        if self.kind == "rpm":
            return self.flow_lo + action * (self.flow_hi - self.flow_lo)
        return self.flow_hi if self._is_on(action, phase, window) else 0.0

    def power_kw(self, action: float, phase: float, window: float) -> float:
        if self.kind == "rpm":
            return self.power_lo_kw + action * (self.power_hi_kw - self.power_lo_kw)
        on = self._is_on(action, phase, window)
        return self.power_hi_kw if on else self.power_lo_kw


@dataclass
class StepReading:
    """Everything one integration step exposes to accumulators and checks.

    ``sink_over``/``sink_under`` grade each player's sink by how deep the
    fill that held during the interval sat outside the preferred band,
    normalized to [0, 1]: 0 in band, 1 at physical capacity respectively
    bone dry.  A graded depth keeps the shaped utilities responsive inside
    saturated windows, where a plain above/below flag would be constant no
    matter what the player does.  Grading the entry fill (transfers land at
    interval end) makes each band signal a function of state alone, so at
    the single-step scale a player's utility moves only with its own action.
    """

    t: float
    dt: float
    fills: dict[str, float]
    power_kw: dict[str, float]
    moved: dict[str, float]
    sink_over: dict[str, float]
    sink_under: dict[str, float]
    supplied: float
    draw: float
    deficit: float
    spill: float
    mass_residual: float


class Plant:
    """Discrete-time integrator for the reservoir chain.

    Transfers execute in actuator declaration order (upstream first) within
    a step; the demand draw from the outlet closes the step.  A running
    ledger of supplied / delivered / spilled volume is kept so conservation
    can be asserted both per step and per episode.
    """

    def __init__(
        self,
        reservoirs: list[Reservoir],
        actuators: list[ActuatorSpec],
        demand_rate: float,
        dt: float,
        window_seconds: float,
        demand_sink: str,
        power_ref_kw: float = 1.0,
        violation_weight: float = 1.0,
        demand_weight: float = 1.0,
    ):
        names = [r.name for r in reservoirs]
        if len(set(names)) != len(names):
            raise PlantError("duplicate reservoir names")
        self.reservoirs = {r.name: r for r in reservoirs}
        anames = [a.name for a in actuators]
        if len(set(anames)) != len(anames):
            raise PlantError("duplicate actuator names")
        for a in actuators:
            for endpoint in (a.source, a.sink):
                if endpoint not in self.reservoirs:
                    raise PlantError(f"{a.name}: unknown reservoir {endpoint!r}")
            if a.source == a.sink:
                raise PlantError(f"{a.name}: source and sink coincide")
        if demand_sink not in self.reservoirs:
            raise PlantError(f"unknown demand sink {demand_sink!r}")
        if demand_rate < 0.0 or dt <= 0.0 or window_seconds <= 0.0:
            raise PlantError("demand_rate >= 0, dt > 0 and window_seconds > 0 required")
        if window_seconds / dt != round(window_seconds / dt):
            raise PlantError("window_seconds must be a whole number of dt steps")
        if power_ref_kw <= 0.0 or violation_weight <= 0.0 or demand_weight <= 0.0:
            raise PlantError("power_ref_kw, violation_weight and demand_weight must be > 0")
        self.actuators = list(actuators)
        self.demand_rate = demand_rate
        self.dt = dt
        self.window_seconds = window_seconds
        self.demand_sink = demand_sink
        self.power_ref_kw = power_ref_kw
        self.violation_weight = violation_weight
        self.demand_weight = demand_weight
        self._init_fills = {r.name: r.fill for r in reservoirs}
        self.t = 0.0
        self.supplied_total = 0.0
        self.delivered_total = 0.0
        self.spilled_total = 0.0
        self.deficit_total = 0.0
        self.energy_kws = {a.name: 0.0 for a in actuators}

    # -- state access --------------------------------------------------------

    @property
    def player_names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.actuators)

    @property
    def reservoir_names(self) -> tuple[str, ...]:
        return tuple(self.reservoirs)

    def actuator(self, name: str) -> ActuatorSpec:
        for a in self.actuators:
            if a.name == name:
                return a
        raise PlantError(f"unknown actuator {name!r}")

    def normalized_state(self, player: str) -> np.ndarray:
        """Map coordinates for one player: (source fill, sink fill) in [0, 1]."""
        a = self.actuator(player)
        src = self.reservoirs[a.source]
        snk = self.reservoirs[a.sink]
        return np.array([src.fill / src.capacity, snk.fill / snk.capacity])

    def requested_total(self) -> float:
        return self.demand_rate * self.t

    def inventory(self) -> float:
        return sum(r.fill for r in self.reservoirs.values() if not r.unlimited)

    def reset(self) -> None:
        for name, r in self.reservoirs.items():
            r.fill = self._init_fills[name]
            r.overflow = 0.0
        self.t = 0.0
        self.supplied_total = 0.0
        self.delivered_total = 0.0
        self.spilled_total = 0.0
        self.deficit_total = 0.0
        self.energy_kws = {a.name: 0.0 for a in self.actuators}

    def clone(self) -> "Plant":
        other = Plant(
            [
                Reservoir(r.name, r.capacity, r.q_low, r.q_high, r.fill, r.unlimited, r.overflow)
                for r in self.reservoirs.values()
            ],
            self.actuators,
            self.demand_rate,
            self.dt,
            self.window_seconds,
            self.demand_sink,
            self.power_ref_kw,
            self.violation_weight,
            self.demand_weight,
        )
        other.t = self.t
        other.supplied_total = self.supplied_total
        other.delivered_total = self.delivered_total
        other.spilled_total = self.spilled_total
        other.deficit_total = self.deficit_total
        other.energy_kws = dict(self.energy_kws)
        return other

    # -- dynamics --------------------------------------------------------------

    def step(self, actions: dict[str, float]) -> StepReading:
        """Advance one dt with all actuator actions held fixed."""
        for a in self.actuators:
            act = actions.get(a.name)
            if act is None:
                raise PlantError(f"missing action for {a.name!r}")
            if not math.isfinite(act) or not 0.0 <= act <= 1.0:
                raise PlantError(f"{a.name}: action {act!r} outside [0, 1]")
        phase = math.fmod(self.t, self.window_seconds)
        # Transfers land at the end of the interval, so the level that held
        # during [t, t+dt) is the entry fill; grade band depth against that.
        # This also keeps each band signal a pure function of state, never of
        # the actions applied in the same step.
        sink_over = {}
        sink_under = {}
        for a in self.actuators:
            snk = self.reservoirs[a.sink]
            over = (snk.fill - snk.q_high) / (snk.capacity - snk.q_high)
            under = (snk.q_low - snk.fill) / snk.q_low
            sink_over[a.name] = min(max(over, 0.0), 1.0)
            sink_under[a.name] = min(max(under, 0.0), 1.0)
        inv_before = self.inventory()
        supplied = 0.0
        spill = 0.0
        moved_by: dict[str, float] = {}
        power: dict[str, float] = {}
        for a in self.actuators:
            act = actions[a.name]
            src = self.reservoirs[a.source]
            snk = self.reservoirs[a.sink]
            desired = a.flow_rate(act, phase, self.window_seconds) * self.dt
            avail = desired if src.unlimited else min(desired, src.fill)
            if src.unlimited:
                supplied += avail
            else:
                src.fill -= avail
            accepted = min(avail, snk.headroom)
            snk.fill += accepted
            lost = avail - accepted
            snk.overflow += lost
            spill += lost
            moved_by[a.name] = avail
            power[a.name] = a.power_kw(act, phase, self.window_seconds)
            self.energy_kws[a.name] += power[a.name] * self.dt
        outlet = self.reservoirs[self.demand_sink]
        want = self.demand_rate * self.dt
        draw = min(want, outlet.fill)
        outlet.fill -= draw
        deficit = want - draw
        self.t += self.dt
        self.supplied_total += supplied
        self.delivered_total += draw
        self.spilled_total += spill
        self.deficit_total += deficit
        inv_after = self.inventory()
        residual = (supplied - draw - spill) - (inv_after - inv_before)
        if not math.isfinite(inv_after):
            raise PlantError("non-finite reservoir fill")
        if abs(residual) > 1e-6:
            raise PlantError(f"mass balance broken by {residual}")
        fills = {name: r.fill for name, r in self.reservoirs.items()}
        return StepReading(
            t=self.t,
            dt=self.dt,
            fills=fills,
            power_kw=power,
            moved=moved_by,
            sink_over=sink_over,
            sink_under=sink_under,
            supplied=supplied,
            draw=draw,
            deficit=deficit,
            spill=spill,
            mass_residual=residual,
        )


# ---------------------------------------------------------------------------
# Window signal shaping
# ---------------------------------------------------------------------------

class WindowAccumulator:
    """Folds step readings of one utility window into objective signals.

    Signals per actuator: ``<name>.overflow`` (how far the reservoir it
    fills sat above the high threshold), ``<name>.bottleneck`` (how far it
    sat below the low threshold), ``<name>.power`` from mean power in units
    of ``power_ref_kw``, and ``<final>.demand`` from the unserved volume.
    Each is 1/(1 + violation), so 1.0 means the window was clean.

    Every violation measure is dimensionless and window-length invariant:
    band violations enter as the window mean of the normalized depth
    outside the band scaled by ``violation_weight``, and the demand deficit
    as the fraction of the requested volume scaled by ``demand_weight``.
    Raw seconds or liters would rescale the signals whenever the window
    length changes, and long windows would saturate 1/(1 + seconds) so
    badly that clearing most of a violation is worth less than the power it
    takes.
    """

    def __init__(
        self,
        player_names: tuple[str, ...],
        final_player: str,
        power_ref_kw: float = 1.0,
        violation_weight: float = 1.0,
        demand_weight: float = 1.0,
    ):
        if final_player not in player_names:
            raise PlantError(f"final player {final_player!r} not in chain")
        if power_ref_kw <= 0.0 or violation_weight <= 0.0 or demand_weight <= 0.0:
            raise PlantError("power_ref_kw, violation_weight and demand_weight must be > 0")
        self.player_names = player_names
        self.final_player = final_player
        self.power_ref_kw = power_ref_kw
        self.violation_weight = violation_weight
        self.demand_weight = demand_weight
        self.reset()

    def reset(self) -> None:
        self.elapsed = 0.0
        self.sink_over_s = {p: 0.0 for p in self.player_names}
        self.sink_under_s = {p: 0.0 for p in self.player_names}
        self.energy_kws = {p: 0.0 for p in self.player_names}
        self.unmet = 0.0
        self.requested = 0.0
        self.spill = 0.0

    def add(self, reading: StepReading) -> None:
        self.elapsed += reading.dt
        for p in self.player_names:
            self.sink_over_s[p] += reading.sink_over[p] * reading.dt
            self.sink_under_s[p] += reading.sink_under[p] * reading.dt
            self.energy_kws[p] += reading.power_kw[p] * reading.dt
        self.unmet += reading.deficit
        self.requested += reading.draw + reading.deficit
        self.spill += reading.spill

    def mean_power_kw(self) -> float:
        if self.elapsed == 0.0:
            raise PlantError("empty window")
        return sum(self.energy_kws.values()) / self.elapsed

    def signals(self) -> dict[str, float]:
        if self.elapsed == 0.0:
            raise PlantError("empty window")
        out: dict[str, float] = {}
        for p in self.player_names:
            v_hi = self.violation_weight * self.sink_over_s[p] / self.elapsed
            v_lo = self.violation_weight * self.sink_under_s[p] / self.elapsed
            out[f"{p}.overflow"] = 1.0 / (1.0 + v_hi)
            out[f"{p}.bottleneck"] = 1.0 / (1.0 + v_lo)
            mean_kw = self.energy_kws[p] / self.elapsed
            out[f"{p}.power"] = 1.0 / (1.0 + mean_kw / self.power_ref_kw)
        v_d = self.demand_weight * self.unmet / self.requested if self.requested > 0.0 else 0.0
        out[f"{self.final_player}.demand"] = 1.0 / (1.0 + v_d)
        return out


def one_step_signals(plant: Plant, actions: dict[str, float]) -> dict[str, float]:
    """Signals after a single dt step from the plant's current state.

    The plant is cloned first, so repeated evaluation from the same state is
    side-effect free.  This is the evaluation scale the interchangeability
    checks operate on.
    """
    probe = plant.clone()
    acc = WindowAccumulator(
        probe.player_names,
        final_player=probe.player_names[-1],
        power_ref_kw=probe.power_ref_kw,
        violation_weight=probe.violation_weight,
        demand_weight=probe.demand_weight,
    )
    acc.add(probe.step(actions))
    return acc.signals()


# ---------------------------------------------------------------------------
# Reference chain
# ---------------------------------------------------------------------------

PLAYERS = ("belt", "pump_a", "vibro", "pump_b", "feeder")
FINAL_PLAYER = "feeder"

_RESERVOIR_DEFAULTS = {
    # name: (capacity, q_low, q_high, init fill, unlimited)
    # Headroom above q_high exceeds one utility window of worst-case inflow
    # (0.45 L/s * 10 s), so a single badly played window cannot physically
    # spill; the band penalty has a full window to react first.
    "supply": (17.42, 0.5, 17.0, 17.42, True),
    "hopper_a": (12.0, 1.8, 7.3, 4.5, False),
    "silo_a": (20.0, 3.0, 14.0, 8.0, False),
    "hopper_b": (12.0, 1.8, 7.3, 4.5, False),
    "silo_b": (20.0, 3.0, 14.0, 8.0, False),
    "outlet": (12.0, 1.8, 7.3, 4.5, False),
}

_ACTUATOR_DEFAULTS = {
    # name: (kind, source, sink, flow_lo, flow_hi, power_lo_kw, power_hi_kw,
    #        device lo, device hi, device unit)
    # flow and power are 0 at action 0: a parked actuator moves nothing.
    "belt": ("rpm", "supply", "hopper_a", 0.0, 0.45, 0.0, 0.105, 0.0, 1800.0, "rpm"),
    "pump_a": ("timed", "hopper_a", "silo_a", 0.0, 0.40, 0.0, 0.305, 0.0, 1.0, "duty"),
    "vibro": ("binary", "silo_a", "hopper_b", 0.0, 0.40, 0.0, 0.280, 0.0, 1.0, "on"),
    "pump_b": ("timed", "hopper_b", "silo_b", 0.0, 0.38, 0.0, 0.305, 0.0, 1.0, "duty"),
    "feeder": ("rpm", "silo_b", "outlet", 0.0, 0.40, 0.0, 0.095, 0.0, 1150.0, "rpm"),
}

_SCALAR_DEFAULTS = {
    "demand_rate": 0.125,
    "dt": 1.0,
    # short windows give the gradient learners many map updates per episode
    # and keep each window's damage small; the signals below are averaged
    # over the window, so utilities stay comparable across window lengths
    "window_seconds": 10.0,
    # power signal scale: u_P halves at this mean draw.  Set near the whole
    # chain's worst case so per-window power costs stay small against a
    # threshold violation, which is what keeps power a secondary objective.
    "power_ref_kw": 1.1,
    # a window pinned at capacity (or bone dry) scores 1/(1 + weight); 4.0
    # drops it to 0.2, well below any power saving, while partial
    # recoveries still move the signal
    "violation_weight": 4.0,
    # a fully unserved window scores 1/(1 + demand_weight); 2.5 leaves the
    # demand term dominant for the final player without drowning its band
    # objectives
    "demand_weight": 2.5,
}


def default_params() -> dict:
    """Full parameter tree of the reference chain, ready for overriding."""
    return {
        **dict(_SCALAR_DEFAULTS),
        "reservoirs": {
            name: {
                "capacity": cap,
                "q_low": ql,
                "q_high": qh,
                "fill": fill,
                "unlimited": unlimited,
            }
            for name, (cap, ql, qh, fill, unlimited) in _RESERVOIR_DEFAULTS.items()
        },
        "actuators": {
            name: {
                "kind": kind,
                "source": src,
                "sink": snk,
                "flow_lo": flo,
                "flow_hi": fhi,
                "power_lo_kw": plo,
                "power_hi_kw": phi,
                "device_lo": dlo,
                "device_hi": dhi,
                "device_unit": unit,
            }
            for name, (kind, src, snk, flo, fhi, plo, phi, dlo, dhi, unit) in _ACTUATOR_DEFAULTS.items()
        },
    }


def _merge_params(base: dict, overrides: dict, path: str = "") -> dict:
    out = dict(base)
    for key, val in overrides.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise PlantError(f"unknown plant parameter {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise PlantError(f"{where!r} must be a mapping")
            out[key] = _merge_params(base[key], val, where)
        else:
            out[key] = val
    return out


def build_bglp(params: dict | None = None) -> Plant:
    """Construct the reference five-actuator chain.

    ``params`` partially overrides default_params(); unknown keys are
    rejected rather than ignored.
    """
    p = _merge_params(default_params(), params or {})
    reservoirs = [
        Reservoir(
            name=name,
            capacity=rp["capacity"],
            q_low=rp["q_low"],
            q_high=rp["q_high"],
            fill=rp["fill"],
            unlimited=rp["unlimited"],
        )
        for name, rp in p["reservoirs"].items()
    ]
    actuators = [
        ActuatorSpec(
            name=name,
            kind=ap["kind"],
            source=ap["source"],
            sink=ap["sink"],
            flow_lo=ap["flow_lo"],
            flow_hi=ap["flow_hi"],
            power_lo_kw=ap["power_lo_kw"],
            power_hi_kw=ap["power_hi_kw"],
            device=DeviceRange(
                lo=ap["device_lo"],
                hi=ap["device_hi"],
                unit=ap["device_unit"],
                binary=ap["kind"] == "binary",
            ),
        )
        for name, ap in p["actuators"].items()
        if name in PLAYERS
    ]
    actuators.sort(key=lambda a: PLAYERS.index(a.name))
    return Plant(
        reservoirs=reservoirs,
        actuators=actuators,
        demand_rate=p["demand_rate"],
        dt=p["dt"],
        window_seconds=p["window_seconds"],
        demand_sink="outlet",
        power_ref_kw=p["power_ref_kw"],
        violation_weight=p["violation_weight"],
        demand_weight=p["demand_weight"],
    )


def bglp_graph() -> ProcessGraph:
    """Actuator/state graph of the reference chain."""
    edges = []
    for name, (_, src, snk, *_rest) in _ACTUATOR_DEFAULTS.items():
        edges.append((src, name))
        edges.append((name, snk))
    return ProcessGraph(
        actuator_nodes=PLAYERS,
        state_nodes=tuple(_RESERVOIR_DEFAULTS),
        edges=tuple(edges),
    )


def bglp_objectives() -> dict[str, tuple[ObjectiveSpec, ...]]:
    """Local objectives per player; only the final player serves demand.

    ``overflow`` and ``bottleneck`` both watch the reservoir the player
    fills: overflow penalizes time above its high limit, bottleneck time
    below its low limit, so each buffer is held in band by the one player
    pumping into it.
    """
    out: dict[str, tuple[ObjectiveSpec, ...]] = {}
    for p in PLAYERS:
        objs = [
            ObjectiveSpec(f"{p}.overflow", ObjectiveKind.BOTTLENECK_OVERFLOW_NEXT),
            ObjectiveSpec(f"{p}.bottleneck", ObjectiveKind.BOTTLENECK_OVERFLOW_NEXT),
        ]
        if p == FINAL_PLAYER:
            objs.append(ObjectiveSpec(f"{p}.demand", ObjectiveKind.DEMAND))
        objs.append(ObjectiveSpec(f"{p}.power", ObjectiveKind.POWER))
        out[p] = tuple(objs)
    return out
