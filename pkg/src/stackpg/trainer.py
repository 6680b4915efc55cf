"""Training orchestration: episodes, windows, evaluation, sweeps.

One run trains one variant on one plant.  Time is organized as

    episode -> utility window -> integration step

with all actuator actions proposed simultaneously at the window start from
the window-start reservoir fills, held for the whole window, and credited
with the window's signals afterwards.  Evaluation episodes read the learned
maps through pure interpolation: no exploration, no map writes, no random
draws, so they are exactly reproducible from the trained state.

Per-player random streams are spawned from the master seed by position in
the chain, independent of the variant, so structurally equivalent variants
consume identical randomness.
"""
from __future__ import annotations

import copy
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .game import (
    DS2Variant,
    StackVariant,
    VanillaVariant,
    games_for_player,
    potential_value,
    vanilla_utility,
)
from .learning import LearnerConfig, StackelbergLearner, VanillaLearner
from .maps import SupportGrid
from .plant import FINAL_PLAYER, Plant, WindowAccumulator, bglp_objectives, build_bglp


@dataclass(frozen=True)
class TrainingPlan:
    """Resolved run shape; every field is final (no config lookups later)."""

    variant: str
    episodes: int
    horizon_seconds: float
    eval_episodes: int
    eval_horizon_seconds: float
    seed: int
    threads: int

    def __post_init__(self):
        if self.variant not in ("sbpg", "ds2", "stack"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.episodes < 1 or self.eval_episodes < 0:
            raise ValueError("episodes >= 1 and eval_episodes >= 0 required")
        if self.threads < 1:
            raise ValueError("threads >= 1 required")


@dataclass
class EpisodeMetrics:
    """Per-episode scalars; the comparison quantities all variants share."""

    episode: int
    phase: str  # "train" or "eval"
    windows: int
    mean_potential: float
    last_potential: float
    mean_power_kw: float
    delivered_l: float
    requested_l: float
    demand_fraction: float
    spilled_l: float
    unmet_l: float


@dataclass
class RunResult:
    plan: TrainingPlan
    config_hash: str
    players: tuple[str, ...]
    episodes: list[EpisodeMetrics] = field(default_factory=list)
    window_potential: list[float] = field(default_factory=list)  # training windows
    window_power_kw: list[float] = field(default_factory=list)
    eval_window_potential: list[float] = field(default_factory=list)
    actions: list[list[float]] = field(default_factory=list)     # training, per window
    learners: dict = field(default_factory=dict)
    # per-step telemetry of the evaluation episodes (policy behavior);
    # training episodes are summarized per window and per episode instead
    step_columns: tuple[str, ...] = ()
    eval_steps: list[list[float]] = field(default_factory=list)

    def eval_metrics(self) -> list[EpisodeMetrics]:
        return [m for m in self.episodes if m.phase == "eval"]

    def train_metrics(self) -> list[EpisodeMetrics]:
        return [m for m in self.episodes if m.phase == "train"]


def aggregate_metrics(metrics: list[EpisodeMetrics]) -> dict[str, float]:
    """Means over a list of episodes; the acceptance quantities."""
    if not metrics:
        raise ValueError("no episodes to aggregate")
    n = float(len(metrics))
    return {
        "mean_potential": sum(m.mean_potential for m in metrics) / n,
        "mean_power_kw": sum(m.mean_power_kw for m in metrics) / n,
        "demand_fraction": sum(m.demand_fraction for m in metrics) / n,
        "spilled_l": sum(m.spilled_l for m in metrics) / n,
        "unmet_l": sum(m.unmet_l for m in metrics) / n,
    }


# ---------------------------------------------------------------------------
# Variant runtimes
# ---------------------------------------------------------------------------

class _Runtime:
    """Per-variant learner bundle with a uniform propose/observe surface."""

    def __init__(self, cfg: ExperimentConfig, variant, plant: Plant, seed: int):
        self.objective_ids = {
            player: tuple(o.id for o in objs) for player, objs in bglp_objectives().items()
        }
        self.players = plant.player_names
        self.weights_variant = cfg.vanilla_variant()
        lc = cfg.learner_config()
        grid = SupportGrid(dims=2, points=cfg.map_points)
        streams = np.random.SeedSequence(seed).spawn(len(self.players))
        self.learners: dict[str, StackelbergLearner | VanillaLearner] = {}
        for player, stream in zip(self.players, streams):
            rng = np.random.Generator(np.random.PCG64(stream))
            if isinstance(variant, VanillaVariant):
                self.learners[player] = VanillaLearner(player, grid, lc, rng)
            else:
                self.learners[player] = StackelbergLearner(
                    player,
                    games_for_player(variant, player),
                    grid,
                    cfg.map_layers,
                    lc,
                    rng,
                    coalition_mode=cfg.coalition_mode,
                )

    def player_signals(self, player: str, signals: dict[str, float]) -> dict[str, float]:
        return {oid: signals[oid] for oid in self.objective_ids[player]}

    def player_utility(self, player: str, signals: dict[str, float]) -> float:
        """Vanilla-weighted utility: the common scale all variants report."""
        return vanilla_utility(self.weights_variant, self.player_signals(player, signals))

    def potential(self, signals: dict[str, float]) -> float:
        return potential_value(self.player_utility(p, signals) for p in self.players)

    def propose_actions(self, states: dict[str, np.ndarray], pool) -> dict[str, float]:
        def one(player: str) -> tuple[str, float]:
            return player, self.learners[player].propose(states[player]).executed

        if pool is None:
            return dict(one(p) for p in self.players)
        return dict(pool.map(one, self.players))

    def policy_actions(self, states: dict[str, np.ndarray]) -> dict[str, float]:
        return {p: self.learners[p].policy_action(states[p]) for p in self.players}

    def observe(self, signals: dict[str, float], pool) -> None:
        def one(player: str) -> None:
            learner = self.learners[player]
            if isinstance(learner, VanillaLearner):
                learner.observe_utility(self.player_utility(player, signals))
            else:
                learner.observe(signals)

        if pool is None:
            for p in self.players:
                one(p)
        else:
            list(pool.map(one, self.players))

    def set_progress(self, fraction: float) -> None:
        for learner in self.learners.values():
            learner.progress = fraction


def _variant_object(cfg: ExperimentConfig, name: str, grouped_stack: bool):
    if name == "sbpg":
        return cfg.vanilla_variant()
    if name == "ds2":
        return cfg.ds2_variant()
    if name == "stack":
        return cfg.grouped_stack_variant() if grouped_stack else cfg.stack_variant()
    raise ValueError(f"unknown variant {name!r}")


# ---------------------------------------------------------------------------
# Episode execution
# ---------------------------------------------------------------------------

def _run_episode(
    plant: Plant,
    runtime: _Runtime,
    horizon_seconds: float,
    train: bool,
    episode: int,
    pool,
    result: RunResult,
) -> EpisodeMetrics:
    plant.reset()
    steps_per_window = int(round(plant.window_seconds / plant.dt))
    n_windows = int(round(horizon_seconds / plant.window_seconds))
    acc = WindowAccumulator(
        plant.player_names,
        FINAL_PLAYER,
        plant.power_ref_kw,
        plant.violation_weight,
        plant.demand_weight,
    )
    potentials = []
    for _ in range(n_windows):
        states = {p: plant.normalized_state(p) for p in plant.player_names}
        if train:
            actions = runtime.propose_actions(states, pool)
        else:
            actions = runtime.policy_actions(states)
        acc.reset()
        for _ in range(steps_per_window):
            reading = plant.step(actions)
            acc.add(reading)
            if not train:
                result.eval_steps.append(
                    [episode, reading.t]
                    + [actions[p] for p in plant.player_names]
                    + [reading.fills[r] for r in plant.reservoir_names]
                    + [reading.power_kw[p] for p in plant.player_names]
                    + [reading.draw, reading.deficit, reading.spill]
                )
        signals = acc.signals()
        phi = runtime.potential(signals)
        potentials.append(phi)
        if train:
            runtime.observe(signals, pool)
            result.window_potential.append(phi)
            result.window_power_kw.append(acc.mean_power_kw())
            result.actions.append([actions[p] for p in plant.player_names])
        else:
            result.eval_window_potential.append(phi)
    requested = plant.requested_total()
    elapsed = plant.t
    total_energy = sum(plant.energy_kws.values())
    return EpisodeMetrics(
        episode=episode,
        phase="train" if train else "eval",
        windows=n_windows,
        mean_potential=float(np.mean(potentials)),
        last_potential=potentials[-1],
        mean_power_kw=total_energy / elapsed,
        delivered_l=plant.delivered_total,
        requested_l=requested,
        demand_fraction=plant.delivered_total / requested if requested else 1.0,
        spilled_l=plant.spilled_total,
        unmet_l=plant.deficit_total,
    )


def run_training(
    cfg: ExperimentConfig,
    variant_name: str,
    *,
    seed: int | None = None,
    episodes: int | None = None,
    horizon_seconds: float | None = None,
    eval_episodes: int | None = None,
    eval_horizon_seconds: float | None = None,
    threads: int | None = None,
    grouped_stack: bool = False,
) -> RunResult:
    """Train one variant, then evaluate it; returns metrics and learners."""
    tr = cfg.training
    plan = TrainingPlan(
        variant=variant_name,
        episodes=int(episodes if episodes is not None else tr["episodes"]),
        horizon_seconds=float(
            horizon_seconds if horizon_seconds is not None else tr["horizon_seconds"]
        ),
        eval_episodes=int(eval_episodes if eval_episodes is not None else tr["eval_episodes"]),
        eval_horizon_seconds=float(
            eval_horizon_seconds
            if eval_horizon_seconds is not None
            else tr["eval_horizon_seconds"]
        ),
        seed=int(seed if seed is not None else tr["seed"]),
        threads=int(threads if threads is not None else tr["threads"]),
    )
    variant = _variant_object(cfg, plan.variant, grouped_stack)
    if isinstance(variant, StackVariant) and all(
        h.n_games == 1 for h in variant.hierarchies.values()
    ):
        warnings.warn(
            "every player has a two-slot hierarchy, so stack runs a single "
            "game per player and is structurally identical to ds2",
            RuntimeWarning,
            stacklevel=2,
        )
    plant = build_bglp(cfg.plant_params())
    runtime = _Runtime(cfg, variant, plant, plan.seed)
    result = RunResult(
        plan=plan,
        config_hash=cfg.hash(),
        players=plant.player_names,
        learners=runtime.learners,
        step_columns=(
            "episode",
            "t",
            *(f"action.{p}" for p in plant.player_names),
            *(f"fill.{r}" for r in plant.reservoir_names),
            *(f"power_kw.{p}" for p in plant.player_names),
            "draw",
            "deficit",
            "spill",
        ),
    )
    pool = ThreadPoolExecutor(max_workers=plan.threads) if plan.threads > 1 else None
    try:
        for ep in range(plan.episodes):
            runtime.set_progress(ep / max(plan.episodes - 1, 1))
            metrics = _run_episode(
                plant, runtime, plan.horizon_seconds, True, ep, pool, result
            )
            result.episodes.append(metrics)
        for ep in range(plan.eval_episodes):
            metrics = _run_episode(
                plant,
                runtime,
                plan.eval_horizon_seconds,
                False,
                plan.episodes + ep,
                pool,
                result,
            )
            result.episodes.append(metrics)
    finally:
        if pool is not None:
            pool.shutdown()
    return result


# ---------------------------------------------------------------------------
# Random-search sweep
# ---------------------------------------------------------------------------

@dataclass
class SweepTrial:
    index: int
    params: dict[str, float]
    score: float  # mean evaluation potential


def sweep(
    cfg: ExperimentConfig,
    variant_name: str,
    n_trials: int,
    seed: int | None = None,
) -> list[SweepTrial]:
    """Random search over the gradient-learning knobs.

    Each trial perturbs the learning section, trains at the configured desk
    scale, and scores by mean evaluation potential.  Trials are ranked best
    first; ties resolve to the earlier trial for reproducibility.
    """
    if n_trials < 1:
        raise ValueError("n_trials >= 1 required")
    master = int(seed if seed is not None else cfg.training["seed"])
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((master, 0xC0FFEE))))
    trials = []
    for i in range(n_trials):
        params = {
            "learning.alpha": round(float(rng.uniform(0.1, 0.8)), 4),
            "learning.momentum_alpha": round(float(rng.uniform(0.2, 0.8)), 4),
            "learning.momentum_beta": round(float(rng.uniform(0.0, 0.8)), 4),
            "learning.follower_steps": int(rng.integers(1, 9)),
        }
        tree = copy.deepcopy(cfg.tree)
        for path, value in params.items():
            node = tree
            keys = path.split(".")
            for key in keys[:-1]:
                node = node[key]
            node[keys[-1]] = value
        trial_cfg = ExperimentConfig(tree)
        trial_cfg.validate()
        result = run_training(trial_cfg, variant_name, seed=master + i)
        score = aggregate_metrics(result.eval_metrics())["mean_potential"]
        trials.append(SweepTrial(index=i, params=params, score=score))
    trials.sort(key=lambda t: (-t.score, t.index))
    return trials
