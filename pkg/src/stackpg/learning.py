"""Leader-follower gradient learning on performance maps.

The learning law treats each map cell's stored action as a weight.  Both
roles' utilities are approximated per cell by a bivariate polynomial in
(a_L, a_F) fitted with the ridge-regularized normal equation; the leader
steps along

    w_L = dU_L/da_L - (d2U_F/da_F da_L)^T (d2U_F/da_F^2)^-1 dU_L/da_F

anticipating the follower's best response, while the follower climbs its
own partial dU_F/da_F with momentum, optional mean-reverting exploration
noise, and multiple inner steps per timestep under a frozen leader action.

The vanilla baseline keeps one map per player and explores by epsilon-mixed
uniform sampling around the stored best action.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .game import GameSpec, clamp01, coalition_combine
from .maps import PerformanceMap, StackedMap, SupportGrid, layer_index, nearest_cell


class SingularFitError(RuntimeError):
    """Normal-equation Gram matrix is degenerate even after the ridge term."""


# ---------------------------------------------------------------------------
# Polynomial surrogate
# ---------------------------------------------------------------------------

def monomial_exponents(degree: int) -> list[tuple[int, int]]:
    """Bivariate basis exponents (j, m) with j + m <= degree.

    Ordered by total degree; within a degree, pure leader power first, then
    pure follower, then mixed terms by descending leader exponent.  Degree 2
    therefore reads 1, a_L, a_F, a_L^2, a_F^2, a_L*a_F.
    """
    exps: list[tuple[int, int]] = []
    for d in range(degree + 1):
        if d == 0:
            exps.append((0, 0))
            continue
        exps.append((d, 0))
        exps.append((0, d))
        for j in range(d - 1, 0, -1):
            exps.append((j, d - j))
    return exps


def basis_size(degree: int) -> int:
    return (degree + 1) * (degree + 2) // 2


@dataclass(frozen=True)
class PolyModel:
    """Fitted polynomial surrogate of a role utility over (a_L, a_F)."""

    degree: int
    coeffs: np.ndarray  # aligned with monomial_exponents(degree)

    def __post_init__(self):
        if self.degree < 2:
            raise ValueError("degree >= 2 required: the leader law needs second derivatives")
        if len(self.coeffs) != basis_size(self.degree):
            raise ValueError(
                f"{len(self.coeffs)} coefficients for degree {self.degree}; "
                f"expected {basis_size(self.degree)}"
            )

    def _terms(self):
        return zip(self.coeffs, monomial_exponents(self.degree))

    def __call__(self, a_l: float, a_f: float) -> float:
        return float(sum(c * a_l**j * a_f**m for c, (j, m) in self._terms()))

    def d_leader(self, a_l: float, a_f: float) -> float:
        return float(sum(c * j * a_l ** (j - 1) * a_f**m for c, (j, m) in self._terms() if j))

    def d_follower(self, a_l: float, a_f: float) -> float:
        return float(sum(c * m * a_l**j * a_f ** (m - 1) for c, (j, m) in self._terms() if m))

    def d2_follower(self, a_l: float, a_f: float) -> float:
        return float(
            sum(c * m * (m - 1) * a_l**j * a_f ** (m - 2) for c, (j, m) in self._terms() if m > 1)
        )

    def d2_cross(self, a_l: float, a_f: float) -> float:
        return float(
            sum(c * j * m * a_l ** (j - 1) * a_f ** (m - 1) for c, (j, m) in self._terms() if j and m)
        )

    def depends_on_follower(self) -> bool:
        return any(c != 0.0 and m > 0 for c, (j, m) in self._terms())


def design_matrix(a_l: np.ndarray, a_f: np.ndarray, degree: int) -> np.ndarray:
    cols = [a_l**j * a_f**m for j, m in monomial_exponents(degree)]
    return np.stack(cols, axis=1)


# Gram matrices beyond this condition number are treated as rank-deficient;
# any positive ridge keeps legitimate fits far below it.
_COND_LIMIT = 1e14


def fit_poly(a_l, a_f, u, degree: int = 2, ridge: float = 1e-8) -> PolyModel:
    """Least-squares polynomial fit via the normal equation.

    ``ridge`` scales an identity term added to the Gram matrix; rank
    deficiency that survives it raises SingularFitError so callers can fall
    back to exploration.
    """
    a_l = np.asarray(a_l, dtype=float)
    a_f = np.asarray(a_f, dtype=float)
    u = np.asarray(u, dtype=float)
    nb = basis_size(degree)
    if len(u) < nb:
        raise ValueError(f"need at least {nb} samples for degree {degree}, got {len(u)}")
    x = design_matrix(a_l, a_f, degree)
    gram = x.T @ x + ridge * np.eye(nb)
    rhs = x.T @ u
    if np.linalg.cond(gram) > _COND_LIMIT:
        raise SingularFitError(f"degenerate Gram matrix (ridge={ridge})")
    try:
        coeffs = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularFitError(str(exc)) from exc
    if not np.all(np.isfinite(coeffs)):
        raise SingularFitError("non-finite coefficients")
    return PolyModel(degree=degree, coeffs=coeffs)


# ---------------------------------------------------------------------------
# Gradient law
# ---------------------------------------------------------------------------

def hessian_is_degenerate(model_f: PolyModel, a_l: float, a_f: float, eps_hess: float = 1e-6) -> bool:
    return abs(model_f.d2_follower(a_l, a_f)) < eps_hess


def leader_gradient(
    model_l: PolyModel,
    model_f: PolyModel,
    a_l: float,
    a_f: float,
    eps_hess: float = 1e-6,
) -> float:
    """Leader's learning gradient, anticipating the follower's best response.

    When the follower curvature is below ``eps_hess`` the correction term is
    dropped and the plain partial derivative is returned; callers can detect
    that path with hessian_is_degenerate.
    """
    d_l = model_l.d_leader(a_l, a_f)
    hess = model_f.d2_follower(a_l, a_f)
    if abs(hess) < eps_hess:
        return d_l
    cross = model_f.d2_cross(a_l, a_f)
    return d_l - cross * (1.0 / hess) * model_l.d_follower(a_l, a_f)


def follower_gradient(model_f: PolyModel, a_l: float, a_f: float) -> float:
    """Best-response direction: the follower's own partial derivative."""
    return model_f.d_follower(a_l, a_f)


def leader_update(a_cell: float, omega_l: float, alpha: float) -> float:
    return clamp01(a_cell + alpha * omega_l)


@dataclass
class OUNoise:
    """Mean-reverting exploration noise; emits exactly 0 when disabled."""

    theta: float = 0.15
    sigma: float = 0.2
    mu: float = 0.0
    dt: float = 1.0
    enabled: bool = False
    state: float = 0.0

    def reset(self) -> None:
        self.state = self.mu if self.enabled else 0.0

    def sample(self, rng: np.random.Generator) -> float:
        if not self.enabled:
            return 0.0
        dx = self.theta * (self.mu - self.state) * self.dt
        dx += self.sigma * np.sqrt(self.dt) * rng.standard_normal()
        self.state += dx
        return self.state


@dataclass
class MomentumState:
    """Velocity accumulator for one follower cell."""

    velocity: float = 0.0


def follower_update(
    a_cell: float,
    omega_f: float,
    alpha_m: float,
    beta_m: float,
    momentum: MomentumState,
    noise: OUNoise | None = None,
    rng: np.random.Generator | None = None,
    bounds: tuple[float, float] = (0.0, 1.0),
) -> float:
    """One momentum-accumulated follower step plus optional noise, clamped.

    ``bounds`` is the follower's own action box, not the coalition's: an
    additive follower trims in [-1, 1] so it can cancel its leader outright.
    """
    momentum.velocity = beta_m * momentum.velocity + (1.0 - beta_m) * omega_f
    step = alpha_m * momentum.velocity
    if noise is not None:
        step += noise.sample(rng)
    return float(min(max(a_cell + step, bounds[0]), bounds[1]))


def multi_step_follower(
    model_f: PolyModel,
    a_l: float,
    a_f_start: float,
    steps: int,
    alpha_m: float,
    beta_m: float,
    momentum: MomentumState,
    noise: OUNoise | None = None,
    rng: np.random.Generator | None = None,
    bounds: tuple[float, float] = (0.0, 1.0),
    grad_clip: float = math.inf,
) -> float:
    """Iterate the follower step under a frozen leader action and model.

    The surrogate is fitted once per timestep; refitting inside the inner
    loop is deliberately not done.  ``grad_clip`` bounds each raw gradient
    before it enters the momentum mix; fixed points are unaffected because
    the clip is sign-preserving.
    """
    if steps < 1:
        raise ValueError("steps >= 1 required")
    a_f = a_f_start
    for _ in range(steps):
        omega = follower_gradient(model_f, a_l, a_f)
        omega = min(max(omega, -grad_clip), grad_clip)
        a_f = follower_update(a_f, omega, alpha_m, beta_m, momentum, noise, rng, bounds)
    return a_f


def best_response_sample(
    best_action: float,
    epsilon: float,
    radius: float,
    rng: np.random.Generator,
) -> float:
    """Vanilla exploration: uniform with probability epsilon, else a bounded
    perturbation of the stored best action."""
    if rng.random() < epsilon:
        return float(rng.uniform(0.0, 1.0))
    if radius <= 0.0:
        return best_action
    return clamp01(best_action + float(rng.uniform(-radius, radius)))


# ---------------------------------------------------------------------------
# Sample buffers
# ---------------------------------------------------------------------------

class SampleBuffer:
    """Per-cell ring buffers of (a_L, a_F, u_L, u_F) observations."""

    def __init__(self, capacity: int = 32):
        if capacity < 1:
            raise ValueError("capacity >= 1 required")
        self.capacity = capacity
        self._cells: dict[tuple[int, ...], deque] = {}

    def append(self, cell: tuple[int, ...], a_l: float, a_f: float, u_l: float, u_f: float) -> None:
        buf = self._cells.get(cell)
        if buf is None:
            buf = deque(maxlen=self.capacity)
            self._cells[cell] = buf
        buf.append((a_l, a_f, u_l, u_f))

    def size(self, cell: tuple[int, ...]) -> int:
        buf = self._cells.get(cell)
        return 0 if buf is None else len(buf)

    def arrays(self, cell: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        rows = np.array(self._cells[cell], dtype=float)
        return rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3]


# ---------------------------------------------------------------------------
# Learner configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LearnerConfig:
    alpha: float = 0.40
    follower_steps: int = 5
    poly_degree: int = 2
    ridge: float = 1e-8
    eps_hess: float = 1e-6
    momentum_alpha: float = 0.5
    momentum_beta: float = 0.4
    buffer_capacity: int = 32
    gamma: float = 1e-6            # interpolation smoothing
    spread_min: float = 0.05       # explore when buffered actions cluster tighter
    step_cap: float = math.inf     # max cell-action movement per window update
    anneal_end: float = 1.0        # step-size factor reached at end of training
    ou_enabled: bool = False
    ou_theta: float = 0.15
    ou_sigma: float = 0.2
    ou_dt: float = 1.0
    eps_start: float = 1.0         # vanilla exploration schedule
    eps_end: float = 0.02
    radius_start: float = 0.5
    radius_end: float = 0.05

    def __post_init__(self):
        if self.alpha <= 0.0:
            raise ValueError("alpha must be > 0")
        if self.poly_degree < 2:
            raise ValueError("poly_degree >= 2 required")
        if self.follower_steps < 1:
            raise ValueError("follower_steps >= 1 required")


# ---------------------------------------------------------------------------
# Per-player learners
# ---------------------------------------------------------------------------

@dataclass
class Proposal:
    """Actions chosen for one upcoming utility window."""

    executed: float
    cell: tuple[int, ...]
    role_actions: list[tuple[float, float]] = field(default_factory=list)  # per game (a_L, a_F)
    explored: bool = False


class _GameState:
    """Mutable learning state of one stacked game inside a player."""

    def __init__(
        self,
        grid: SupportGrid,
        n_layers: int,
        cfg: LearnerConfig,
        leads: bool,
        follower_init: float,
    ):
        self.leader_map = PerformanceMap(grid) if leads else None
        # followers start at the coalition identity: they contribute nothing
        # until a fitted surface says otherwise
        self.follower_map = StackedMap(grid, n_layers, init_action=follower_init)
        self.buffer = SampleBuffer(cfg.buffer_capacity)
        self.momentum: dict[tuple, MomentumState] = {}

    def momentum_for(self, layer: int, cell: tuple[int, ...]) -> MomentumState:
        key = (layer, *cell)
        st = self.momentum.get(key)
        if st is None:
            st = MomentumState()
            self.momentum[key] = st
        return st


class StackelbergLearner:
    """One player's chained leader/follower learner (ds2 or stack variant).

    The map cells are the optimization iterates.  Each window plays the
    interpolated maps as-is (identical to the evaluation readout), then on
    observing the window's utilities fits both role surrogates from the
    cell's sample buffer and steps the cell actions in place: one
    anticipating-gradient step for the first game's leader, a multi-step
    best-response climb for every follower, each coalition feeding the next
    game's leader input.  A window probes randomly instead of playing the
    policy while the cell's buffer is too small to fit, or when it has
    collapsed onto a cluster too tight to carry gradient information.
    """

    def __init__(
        self,
        player: str,
        games: tuple[GameSpec, ...],
        grid: SupportGrid,
        n_layers: int,
        cfg: LearnerConfig,
        rng: np.random.Generator,
        coalition_mode: str = "additive",
    ):
        if not games:
            raise ValueError("at least one game required")
        self.player = player
        self.games = games
        self.cfg = cfg
        self.rng = rng
        self.coalition_mode = coalition_mode
        self.grid = grid
        # additive followers trim in [-1, 1] around their leader; the neutral
        # trim is 0.  Multiplicative followers scale in [0, 1]; neutral is 1.
        if coalition_mode == "additive":
            follower_init, self.follower_bounds = 0.0, (-1.0, 1.0)
        else:
            follower_init, self.follower_bounds = 1.0, (0.0, 1.0)
        self.states = [
            _GameState(grid, n_layers, cfg, leads=(g.z == 0), follower_init=follower_init)
            for g in games
        ]
        self.noise = OUNoise(
            theta=cfg.ou_theta, sigma=cfg.ou_sigma, dt=cfg.ou_dt, enabled=cfg.ou_enabled
        )
        # per-window cell movement stays below step_cap for the leader's
        # single step and for the follower's whole multi-step run
        self._follower_clip = cfg.step_cap / (cfg.follower_steps * cfg.momentum_alpha)
        self.progress = 0.0  # training fraction in [0, 1], set by the trainer
        self.hessian_fallbacks = 0
        self.singular_fits = 0
        self._pending: Proposal | None = None

    def _step_scale(self) -> float:
        """Anneal step sizes toward ``anneal_end`` so the iterates settle.

        Constant steps on noisy gradients leave the cells wandering inside a
        stationary band; the shipped policy would then be whatever the last
        window happened to write.
        """
        t = min(max(self.progress, 0.0), 1.0)
        return 1.0 + (self.cfg.anneal_end - 1.0) * t

    # -- policy readout (no learning, no exploration) -----------------------

    def policy_action(self, state) -> float:
        """Evaluation policy: interpolate every map, fold coalitions."""
        a = 0.0
        for game, gs in zip(self.games, self.states):
            if gs.leader_map is not None:
                a_l = gs.leader_map.interpolate(state, self.cfg.gamma)
            else:
                a_l = a
            a_f = gs.follower_map.interpolate(state, a_l, self.cfg.gamma)
            a = coalition_combine(a_l, a_f, self.coalition_mode)
        return a

    # -- training ------------------------------------------------------------

    def propose(self, state) -> Proposal:
        """Choose this window's executed action and remember it for observe()."""
        cell = nearest_cell(self.grid, state)
        role_actions: list[tuple[float, float]] = []
        explored = False
        a_prev = 0.0
        for game, gs in zip(self.games, self.states):
            if self._needs_probe(gs, cell):
                explored = True
                a_l, a_f = self._explore_pair(gs, a_prev)
            else:
                if gs.leader_map is not None:
                    a_l = gs.leader_map.interpolate(state, self.cfg.gamma)
                else:
                    a_l = a_prev
                a_f = gs.follower_map.interpolate(state, a_l, self.cfg.gamma)
            role_actions.append((a_l, a_f))
            a_prev = coalition_combine(a_l, a_f, self.coalition_mode)
        prop = Proposal(executed=a_prev, cell=cell, role_actions=role_actions, explored=explored)
        self._pending = prop
        return prop

    def _explore_pair(self, gs: _GameState, a_prev: float) -> tuple[float, float]:
        """Random role actions that keep the coalition inside the action box.

        For additive coalitions the trim is drawn from [-a_l, 1 - a_l], which
        makes the explored coalition itself uniform on [0, 1] instead of the
        clamp folding probability mass onto the box edges.
        """
        a_l = float(self.rng.uniform(0.0, 1.0)) if gs.leader_map is not None else a_prev
        if self.coalition_mode == "additive":
            return a_l, float(self.rng.uniform(-a_l, 1.0 - a_l))
        return a_l, float(self.rng.uniform(0.0, 1.0))

    def _needs_probe(self, gs: _GameState, cell) -> bool:
        """Whether this window must gather data instead of playing the policy.

        Two triggers: the cell's buffer cannot support a fit yet, or a full
        buffer has collapsed onto a tight cluster.  The latter happens once
        the iterate settles: the policy replays itself into the ring buffer
        until the fit loses all usable directions, so roughly one window per
        buffer turnover is spent on a probe that keeps the surrogate alive.
        """
        n = gs.buffer.size(cell)
        if n < basis_size(self.cfg.poly_degree):
            return True
        if n >= self.cfg.buffer_capacity:
            a_l, a_f, _, _ = gs.buffer.arrays(cell)
            if float(np.std(a_l) + np.std(a_f)) < self.cfg.spread_min:
                return True
        return False

    def _fit_models(self, gs: _GameState, cell, need_leader: bool):
        """Fit (leader, follower) surrogates for one cell, or None."""
        if gs.buffer.size(cell) < basis_size(self.cfg.poly_degree):
            return None
        a_l, a_f, u_l, u_f = gs.buffer.arrays(cell)
        try:
            model_f = fit_poly(a_l, a_f, u_f, self.cfg.poly_degree, self.cfg.ridge)
            model_l = (
                fit_poly(a_l, a_f, u_l, self.cfg.poly_degree, self.cfg.ridge)
                if need_leader
                else None
            )
        except SingularFitError:
            self.singular_fits += 1
            return None
        return model_l, model_f

    def observe(self, signals: dict[str, float]) -> None:
        """Close the window: buffer the observation, then step the iterates.

        Gradients are evaluated at the stored cell actions, not at the
        played pair, so probe windows feed the surrogate without yanking
        the iterate toward the probe.  The leader steps once; the follower
        multi-steps under the leader action held constant at its pre-update
        value.  The gate needs no special casing here: windows with a
        failing leader store a zero follower utility, so the fitted
        follower surface is flat wherever the leader has not yet delivered
        and the trim simply stays where it is.
        """
        prop = self._pending
        if prop is None:
            raise RuntimeError("observe() before propose()")
        self._pending = None
        cell = prop.cell
        for game, gs, (a_l, a_f) in zip(self.games, self.states, prop.role_actions):
            u_l = game.leader_utility(signals)
            u_f = game.follower_utility(signals)
            gs.buffer.append(cell, a_l, a_f, u_l, u_f)
            fitted = self._fit_models(gs, cell, need_leader=gs.leader_map is not None)
            if fitted is None:
                continue
            model_l, model_f = fitted
            scale = self._step_scale()
            lead_clip = self.cfg.step_cap / self.cfg.alpha
            if gs.leader_map is not None:
                a_lead = float(gs.leader_map.actions[cell])
                a_f0 = float(gs.follower_map.layer_for(a_lead).actions[cell])
                if hessian_is_degenerate(model_f, a_lead, a_f0, self.cfg.eps_hess):
                    self.hessian_fallbacks += 1
                omega_l = leader_gradient(model_l, model_f, a_lead, a_f0, self.cfg.eps_hess)
                omega_l = min(max(omega_l, -lead_clip), lead_clip)
                gs.leader_map.set_cell(
                    cell, leader_update(a_lead, omega_l, self.cfg.alpha * scale), u_l
                )
            else:
                a_lead = a_l
            layer = layer_index(a_lead, gs.follower_map.n_layers)
            fmap = gs.follower_map.layers[layer]
            a_f1 = multi_step_follower(
                model_f,
                a_lead,
                float(fmap.actions[cell]),
                self.cfg.follower_steps,
                self.cfg.momentum_alpha * scale,
                self.cfg.momentum_beta,
                gs.momentum_for(layer, cell),
                self.noise,
                self.rng,
                self.follower_bounds,
                grad_clip=self._follower_clip,
            )
            fmap.set_cell(cell, a_f1, u_f)

    # -- persistence hooks ----------------------------------------------------

    def named_maps(self) -> list[tuple[str, PerformanceMap | StackedMap]]:
        out: list[tuple[str, PerformanceMap | StackedMap]] = []
        for game, gs in zip(self.games, self.states):
            if gs.leader_map is not None:
                out.append((f"{self.player}_g{game.z}_leader", gs.leader_map))
            out.append((f"{self.player}_g{game.z}_follower", gs.follower_map))
        return out


class VanillaLearner:
    """Best-response baseline: one map, epsilon-mixed uniform exploration."""

    def __init__(
        self,
        player: str,
        grid: SupportGrid,
        cfg: LearnerConfig,
        rng: np.random.Generator,
    ):
        self.player = player
        self.cfg = cfg
        self.rng = rng
        self.grid = grid
        self.map = PerformanceMap(grid)
        self.progress = 0.0  # training fraction in [0, 1], set by the trainer
        self._pending: Proposal | None = None

    def schedule(self) -> tuple[float, float]:
        t = min(max(self.progress, 0.0), 1.0)
        eps = self.cfg.eps_start + (self.cfg.eps_end - self.cfg.eps_start) * t
        radius = self.cfg.radius_start + (self.cfg.radius_end - self.cfg.radius_start) * t
        return eps, radius

    def policy_action(self, state) -> float:
        return self.map.interpolate(state, self.cfg.gamma)

    def propose(self, state) -> Proposal:
        cell = nearest_cell(self.grid, state)
        eps, radius = self.schedule()
        action = best_response_sample(float(self.map.actions[cell]), eps, radius, self.rng)
        prop = Proposal(executed=action, cell=cell, explored=True)
        self._pending = prop
        return prop

    def observe_utility(self, utility: float) -> None:
        prop = self._pending
        if prop is None:
            raise RuntimeError("observe_utility() before propose()")
        self._pending = None
        self.map.update_cell(prop.cell, prop.executed, utility)

    def named_maps(self) -> list[tuple[str, PerformanceMap]]:
        return [(f"{self.player}_map", self.map)]
