"""Numerical checks of the assumptions the learning rules rely on.

The chain's utilities are constructed so that, at the single-step scale and
away from threshold boundaries, a player's utility does not react to other
players' actions, and therefore the sum of utilities moves exactly as much
as any one deviating player's own utility.  These properties are checked by
finite differences at randomly sampled interior operating points ("general
position": every reservoir fill keeps a margin from its thresholds, from
empty and full, and every action keeps a margin from switching boundaries).

Also here: finite-difference validation of the closed-form gradient law and
a brute-force reference for the follower's inner best response.  Planted
couplings are provided to demonstrate each check can actually fail.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .learning import PolyModel, follower_gradient, leader_gradient, multi_step_follower, MomentumState
from .plant import Plant, build_bglp, one_step_signals


@dataclass
class ConditionReport:
    name: str
    passed: bool
    worst: float
    tolerance: float
    samples: int
    note: str = ""

    def line(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"{status}  {self.name}: worst {self.worst:.3e} vs tol {self.tolerance:.1e} ({self.samples} samples)"


def report_to_json(reports: list[ConditionReport]) -> dict:
    return {
        "checks": [asdict(r) for r in reports],
        "all_passed": all(r.passed for r in reports),
    }


# ---------------------------------------------------------------------------
# General-position sampling
# ---------------------------------------------------------------------------

_ACTION_MARGIN = 0.05


def _sample_fill(res, rng: np.random.Generator, max_step: float) -> float:
    """A fill whose indicators cannot flip within one step.

    One player deviation changes a neighbor fill by at most the largest
    single-step transfer, so keeping that distance (plus slack) from both
    thresholds, from empty and from full makes every indicator locally
    constant and every transfer unconstrained.
    """
    margin = max_step + 0.15
    bands = [
        (max_step + 0.1, res.q_low - margin),
        (res.q_low + margin, res.q_high - margin),
        (res.q_high + margin, res.capacity - margin),
    ]
    bands = [(lo, hi) for lo, hi in bands if lo < hi]
    widths = np.array([hi - lo for lo, hi in bands])
    lo, hi = bands[rng.choice(len(bands), p=widths / widths.sum())]
    return float(rng.uniform(lo, hi))


def _sample_action(kind: str, rng: np.random.Generator) -> float:
    if kind == "binary":
        side = rng.random() < 0.5
        return float(rng.uniform(0.6, 1.0 - _ACTION_MARGIN)) if side else float(
            rng.uniform(_ACTION_MARGIN, 0.4)
        )
    return float(rng.uniform(_ACTION_MARGIN, 1.0 - _ACTION_MARGIN))


def sample_general_position(plant: Plant, rng: np.random.Generator) -> tuple[Plant, dict[str, float]]:
    """A cloned plant with interior fills plus a margin-safe action profile."""
    probe = plant.clone()
    probe.t = 0.0
    max_step = max(a.flow_hi for a in probe.actuators) * probe.dt
    for res in probe.reservoirs.values():
        if not res.unlimited:
            res.fill = _sample_fill(res, rng, max_step)
    actions = {a.name: _sample_action(a.kind, rng) for a in probe.actuators}
    return probe, actions


def _player_utility(signals: dict[str, float], player: str) -> float:
    prefix = f"{player}."
    return sum(v for k, v in signals.items() if k.startswith(prefix))


# ---------------------------------------------------------------------------
# Structural checks on the plant's utilities
# ---------------------------------------------------------------------------

def check_cross_partials(
    plant: Plant,
    rng: np.random.Generator,
    samples: int = 200,
    h: float = 1e-4,
    tol: float = 1e-6,
    signal_fn=one_step_signals,
) -> ConditionReport:
    """max |du_i/da_j|, j != i, by central differences at one-step scale."""
    worst = 0.0
    players = plant.player_names
    for _ in range(samples):
        probe, actions = sample_general_position(plant, rng)
        for j in players:
            plus = dict(actions)
            plus[j] = actions[j] + h
            minus = dict(actions)
            minus[j] = actions[j] - h
            sig_p = signal_fn(probe, plus)
            sig_m = signal_fn(probe, minus)
            for i in players:
                if i == j:
                    continue
                deriv = (_player_utility(sig_p, i) - _player_utility(sig_m, i)) / (2.0 * h)
                worst = max(worst, abs(deriv))
    return ConditionReport(
        name="cross_partials",
        passed=worst <= tol,
        worst=worst,
        tolerance=tol,
        samples=samples,
    )


def check_potential_alignment(
    plant: Plant,
    rng: np.random.Generator,
    samples: int = 200,
    tol: float = 1e-9,
    signal_fn=one_step_signals,
) -> ConditionReport:
    """|du_i - dphi| for unilateral deviations, phi = sum of utilities."""
    worst = 0.0
    players = plant.player_names
    kinds = {a.name: a.kind for a in plant.actuators}
    for _ in range(samples):
        probe, actions = sample_general_position(plant, rng)
        deviator = players[rng.integers(len(players))]
        moved = dict(actions)
        moved[deviator] = _sample_action(kinds[deviator], rng)
        sig_a = signal_fn(probe, actions)
        sig_b = signal_fn(probe, moved)
        du = _player_utility(sig_b, deviator) - _player_utility(sig_a, deviator)
        dphi = sum(_player_utility(sig_b, p) for p in players) - sum(
            _player_utility(sig_a, p) for p in players
        )
        worst = max(worst, abs(du - dphi))
    return ConditionReport(
        name="potential_alignment",
        passed=worst <= tol,
        worst=worst,
        tolerance=tol,
        samples=samples,
    )


def check_mass_balance(
    plant: Plant,
    rng: np.random.Generator,
    steps: int = 10_000,
    tol: float = 1e-9,
) -> ConditionReport:
    """Per-step conservation residual under uniformly random actions."""
    probe = plant.clone()
    probe.reset()
    worst = 0.0
    players = probe.player_names
    for _ in range(steps):
        actions = {p: float(rng.uniform(0.0, 1.0)) for p in players}
        reading = probe.step(actions)
        worst = max(worst, abs(reading.mass_residual))
    return ConditionReport(
        name="mass_balance",
        passed=worst <= tol,
        worst=worst,
        tolerance=tol,
        samples=steps,
    )


def planted_cross_coupling(strength: float = 0.01, source: str = "belt", target: str = "feeder"):
    """A deliberately broken signal map: target's power reads source's action.

    Fails both the cross-partial and the alignment check; used to prove they
    detect violations rather than passing vacuously.
    """

    def signal_fn(plant: Plant, actions: dict[str, float]) -> dict[str, float]:
        signals = one_step_signals(plant, actions)
        signals[f"{target}.power"] += strength * actions[source]
        return signals

    return signal_fn


# ---------------------------------------------------------------------------
# Gradient law vs finite differences
# ---------------------------------------------------------------------------

def _fd1(f, x: float, h: float) -> float:
    """Fourth-order first derivative; exact through quintics."""
    return (f(x - 2 * h) - 8 * f(x - h) + 8 * f(x + h) - f(x + 2 * h)) / (12.0 * h)


def _fd2(f, x: float, h: float) -> float:
    """Fourth-order second derivative; exact through quintics."""
    return (
        -f(x - 2 * h) + 16 * f(x - h) - 30 * f(x) + 16 * f(x + h) - f(x + 2 * h)
    ) / (12.0 * h * h)


def _fd_cross(f, x: float, y: float, h: float) -> float:
    """Mixed second derivative, Richardson-extrapolated to fourth order."""

    def four_point(step: float) -> float:
        return (
            f(x + step, y + step)
            - f(x + step, y - step)
            - f(x - step, y + step)
            + f(x - step, y - step)
        ) / (4.0 * step * step)

    return (4.0 * four_point(h / 2.0) - four_point(h)) / 3.0


def fd_leader_gradient(
    model_l: PolyModel, model_f: PolyModel, a_l: float, a_f: float, h: float = 1e-3
) -> float:
    """The leader law assembled purely from finite differences of the models.

    Stencils are fourth order, so for the quartic-and-below surrogates the
    only error left is float rounding; h = 1e-3 keeps the h^2 denominators
    well away from cancellation.
    """
    d_l = _fd1(lambda x: model_l(x, a_f), a_l, h)
    d_lf = _fd1(lambda y: model_l(a_l, y), a_f, h)
    hess = _fd2(lambda y: model_f(a_l, y), a_f, h)
    cross = _fd_cross(model_f, a_l, a_f, h)
    return d_l - cross * (1.0 / hess) * d_lf


def fd_follower_gradient(model_f: PolyModel, a_l: float, a_f: float, h: float = 1e-3) -> float:
    return _fd1(lambda y: model_f(a_l, y), a_f, h)


def _random_model(rng: np.random.Generator, degree: int) -> PolyModel:
    n = (degree + 1) * (degree + 2) // 2
    return PolyModel(degree=degree, coeffs=rng.uniform(-1.0, 1.0, size=n))


def check_gradient_law(
    rng: np.random.Generator,
    models: int = 1000,
    tol: float = 1e-6,
) -> ConditionReport:
    """Relative error of both closed-form gradients against FD references.

    Models with near-flat follower curvature are resampled: the law itself
    switches to the fallback branch there and the FD reference degenerates.
    """
    worst = 0.0
    done = 0
    while done < models:
        degree = int(rng.integers(2, 5))
        model_l = _random_model(rng, degree)
        model_f = _random_model(rng, degree)
        a_l = float(rng.uniform(0.1, 0.9))
        a_f = float(rng.uniform(0.1, 0.9))
        if abs(model_f.d2_follower(a_l, a_f)) < 0.1:
            continue
        done += 1
        got_l = leader_gradient(model_l, model_f, a_l, a_f, eps_hess=1e-12)
        ref_l = fd_leader_gradient(model_l, model_f, a_l, a_f)
        got_f = follower_gradient(model_f, a_l, a_f)
        ref_f = fd_follower_gradient(model_f, a_l, a_f)
        rel_l = abs(got_l - ref_l) / max(1.0, abs(ref_l))
        rel_f = abs(got_f - ref_f) / max(1.0, abs(ref_f))
        worst = max(worst, rel_l, rel_f)
    return ConditionReport(
        name="gradient_law",
        passed=worst <= tol,
        worst=worst,
        tolerance=tol,
        samples=models,
    )


# ---------------------------------------------------------------------------
# Follower inner loop vs brute force
# ---------------------------------------------------------------------------

def brute_force_best_response(model_f: PolyModel, a_l: float, points: int = 10_001) -> float:
    """Dense-grid argmax of the follower surface; ties take the lower action."""
    grid = np.linspace(0.0, 1.0, points)
    values = np.array([model_f(a_l, a) for a in grid])
    return float(grid[int(np.argmax(values))])


def check_best_response(
    rng: np.random.Generator,
    models: int = 50,
    tol: float = 1e-2,
    steps: int = 60,
    alpha_m: float = 0.5,
    beta_m: float = 0.4,
) -> ConditionReport:
    """Inner-loop convergence on strictly concave follower surfaces."""
    worst = 0.0
    for _ in range(models):
        c4 = float(rng.uniform(-2.0, -0.5))           # a_f^2
        c2 = float(rng.uniform(-2.0 * c4 * 0.1, -2.0 * c4 * 0.9))  # a_f: interior argmax
        c5 = float(rng.uniform(-0.3, 0.3))            # a_l * a_f
        coeffs = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), c2, rng.uniform(-1, 1), c4, c5])
        model_f = PolyModel(degree=2, coeffs=coeffs)
        a_l = float(rng.uniform(0.0, 1.0))
        target = brute_force_best_response(model_f, a_l)
        got = multi_step_follower(
            model_f,
            a_l,
            a_f_start=float(rng.uniform(0.0, 1.0)),
            steps=steps,
            alpha_m=alpha_m,
            beta_m=beta_m,
            momentum=MomentumState(),
        )
        worst = max(worst, abs(got - target))
    return ConditionReport(
        name="follower_best_response",
        passed=worst <= tol,
        worst=worst,
        tolerance=tol,
        samples=models,
    )


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------

CHECK_NAMES = (
    "cross_partials",
    "potential_alignment",
    "mass_balance",
    "gradient_law",
    "best_response",
)


def run_verification(
    plant: Plant | None = None,
    seed: int = 0,
    samples: int = 200,
    fd_models: int = 1000,
    br_models: int = 50,
    mass_steps: int = 10_000,
    checks: tuple[str, ...] | None = None,
    signal_fn=one_step_signals,
) -> list[ConditionReport]:
    """Run the named condition checks (all of them by default), in order."""
    if plant is None:
        plant = build_bglp()
    selected = CHECK_NAMES if checks is None else tuple(checks)
    unknown = [name for name in selected if name not in CHECK_NAMES]
    if unknown:
        raise ValueError(f"unknown checks {unknown}; known: {list(CHECK_NAMES)}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0x5EED))))
    runners = {
        "cross_partials": lambda: check_cross_partials(
            plant, rng, samples=samples, signal_fn=signal_fn
        ),
        "potential_alignment": lambda: check_potential_alignment(
            plant, rng, samples=samples, signal_fn=signal_fn
        ),
        "mass_balance": lambda: check_mass_balance(plant, rng, steps=mass_steps),
        "gradient_law": lambda: check_gradient_law(rng, models=fd_models),
        "best_response": lambda: check_best_response(rng, models=br_models),
    }
    return [runners[name]() for name in selected]
