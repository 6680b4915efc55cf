"""Experiment configuration: defaults, YAML loading, overrides, hashing.

The resolved configuration is a plain nested dict so it can be hashed and
dumped losslessly; ExperimentConfig wraps it with typed accessors and
assembles the game variants from the reference chain's objective kinds:

* the vanilla baseline weighs every objective equally unless told otherwise,
* ds2 puts everything except power on the leader and power on the follower,
* stack orders objectives overflow > bottleneck > demand > power, one game
  per adjacent pair.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import yaml

from .game import (
    DS2Variant,
    ObjectiveHierarchy,
    ObjectiveKind,
    ObjectiveSpec,
    StackVariant,
    VanillaVariant,
)
from .learning import LearnerConfig
from .plant import bglp_objectives, default_params


class ConfigError(ValueError):
    """Unknown keys, malformed overrides, or out-of-range values."""


VARIANT_NAMES = ("sbpg", "ds2", "stack")


def default_config() -> dict:
    return {
        "plant": default_params(),
        "training": {
            "episodes": 9,
            "horizon_seconds": 10_000.0,
            "eval_episodes": 1,
            "eval_horizon_seconds": 10_000.0,
            "seed": 0,
            "threads": 1,
        },
        "maps": {
            "points": 8,
            "layers": 8,
        },
        "learning": {
            "alpha": 0.40,
            "follower_steps": 5,
            "poly_degree": 2,
            "ridge": 1.0e-8,
            "eps_hess": 0.05,
            "momentum_alpha": 0.5,
            "momentum_beta": 0.4,
            "buffer_capacity": 32,
            "gamma": 1.0e-6,
            "step_cap": 0.10,
            "anneal_end": 0.10,
            "ou": {
                "enabled": False,
                "theta": 0.15,
                "sigma": 0.2,
            },
            "exploration": {
                "eps_start": 1.0,
                "eps_end": 0.02,
                "radius_start": 0.5,
                "radius_end": 0.05,
            },
        },
        "verify": {
            "samples": 200,
            "fd_models": 1000,
            "br_models": 50,
            "mass_steps": 10_000,
            # nonzero strength leaks the source's action into the target's
            # power signal, deliberately breaking separability so the checks
            # can be demonstrated to catch a planted violation
            "planted_coupling": {
                "source": "belt",
                "target": "feeder",
                "strength": 0.0,
            },
        },
        "variants": {
            "coalition": "additive",
            "vanilla": {
                # keys are objective ids ("belt.power") or bare objective
                # names ("power") applied to every player; ids win
                "weights": {
                    "overflow": 1.0,
                    "bottleneck": 1.0,
                    "demand": 1.0,
                    "power": 1.0,
                },
            },
            "ds2": {
                "beta": 0.65,
                "theta": 2.0,
            },
            "stack": {
                "betas": [0.50, 0.65, 0.75],
                "thetas": None,
            },
        },
    }


def _merge(base: dict, overrides: dict, path: str = "") -> dict:
    """Recursive override with unknown-key rejection.

    ``weights`` and the plant's reservoir/actuator tables accept new keys;
    everywhere else a key must already exist in the defaults.
    """
    open_tables = {"variants.vanilla.weights"}
    out = dict(base)
    for key, val in overrides.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            if path in open_tables:
                out[key] = val
                continue
            raise ConfigError(f"unknown configuration key {where!r}")
        if isinstance(base[key], dict) and base[key]:
            if not isinstance(val, dict):
                raise ConfigError(f"{where!r} must be a mapping")
            out[key] = _merge(base[key], val, where)
        else:
            out[key] = val
    return out


def parse_set_override(expr: str) -> tuple[list[str], object]:
    """Parse one ``path.to.key=value`` override; values read as YAML."""
    if "=" not in expr:
        raise ConfigError(f"override {expr!r} is not of the form key=value")
    path, raw = expr.split("=", 1)
    keys = [k for k in path.strip().split(".") if k]
    if not keys:
        raise ConfigError(f"override {expr!r} has an empty key path")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override value {raw!r} is not valid YAML: {exc}") from exc
    return keys, value


def _nest(keys: list[str], value) -> dict:
    tree: dict = {keys[-1]: value}
    for key in reversed(keys[:-1]):
        tree = {key: tree}
    return tree


def load_config(path: str | None = None, overrides: list[str] | None = None) -> "ExperimentConfig":
    """Resolve defaults <- YAML file <- --set overrides, then validate."""
    tree = default_config()
    if path is not None:
        with open(path) as fh:
            loaded = yaml.safe_load(fh)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        tree = _merge(tree, loaded)
    for expr in overrides or []:
        keys, value = parse_set_override(expr)
        tree = _merge(tree, _nest(keys, value))
    cfg = ExperimentConfig(tree)
    cfg.validate()
    return cfg


@dataclass(frozen=True)
class ExperimentConfig:
    """Typed view over the resolved configuration tree."""

    tree: dict

    # -- scalar accessors -----------------------------------------------------

    @property
    def training(self) -> dict:
        return self.tree["training"]

    @property
    def map_points(self) -> int:
        return int(self.tree["maps"]["points"])

    @property
    def map_layers(self) -> int:
        return int(self.tree["maps"]["layers"])

    @property
    def coalition_mode(self) -> str:
        return self.tree["variants"]["coalition"]

    def plant_params(self) -> dict:
        return self.tree["plant"]

    @property
    def verify_params(self) -> dict:
        return self.tree["verify"]

    def learner_config(self) -> LearnerConfig:
        ln = self.tree["learning"]
        return LearnerConfig(
            alpha=float(ln["alpha"]),
            follower_steps=int(ln["follower_steps"]),
            poly_degree=int(ln["poly_degree"]),
            ridge=float(ln["ridge"]),
            eps_hess=float(ln["eps_hess"]),
            momentum_alpha=float(ln["momentum_alpha"]),
            momentum_beta=float(ln["momentum_beta"]),
            buffer_capacity=int(ln["buffer_capacity"]),
            gamma=float(ln["gamma"]),
            step_cap=float(ln["step_cap"]),
            anneal_end=float(ln["anneal_end"]),
            ou_enabled=bool(ln["ou"]["enabled"]),
            ou_theta=float(ln["ou"]["theta"]),
            ou_sigma=float(ln["ou"]["sigma"]),
            eps_start=float(ln["exploration"]["eps_start"]),
            eps_end=float(ln["exploration"]["eps_end"]),
            radius_start=float(ln["exploration"]["radius_start"]),
            radius_end=float(ln["exploration"]["radius_end"]),
        )

    # -- variants ---------------------------------------------------------------

    def vanilla_variant(self) -> VanillaVariant:
        weights = {}
        declared = dict(self.tree["variants"]["vanilla"]["weights"])
        suffixes = {"overflow", "bottleneck", "demand", "power"}
        for player, objs in bglp_objectives().items():
            for obj in objs:
                suffix = obj.id.split(".", 1)[1]
                default = declared.get(suffix, 1.0)
                weights[obj.id] = float(declared.pop(obj.id, default))
        unknown = set(declared) - suffixes
        if unknown:
            raise ConfigError(f"weights for unknown objectives: {sorted(unknown)}")
        return VanillaVariant(weights=weights)

    def ds2_variant(self) -> DS2Variant:
        vd = self.tree["variants"]["ds2"]
        leaders: dict[str, tuple[str, ...]] = {}
        followers: dict[str, tuple[str, ...]] = {}
        for player, objs in bglp_objectives().items():
            ordered = _priority_order(objs)
            leaders[player] = tuple(o.id for o in ordered if o.kind is not ObjectiveKind.POWER)
            followers[player] = tuple(o.id for o in ordered if o.kind is ObjectiveKind.POWER)
        theta = vd["theta"]
        return DS2Variant(
            leader_objectives=leaders,
            follower_objectives=followers,
            beta_l=float(vd["beta"]),
            theta_l=None if theta is None else float(theta),
        )

    def stack_variant(self) -> StackVariant:
        vs = self.tree["variants"]["stack"]
        hierarchies = {
            player: ObjectiveHierarchy(tuple((o.id,) for o in _priority_order(objs)))
            for player, objs in bglp_objectives().items()
        }
        thetas = vs["thetas"]
        return StackVariant(
            hierarchies=hierarchies,
            beta_l=tuple(float(b) for b in vs["betas"]),
            theta_l=None if thetas is None else tuple(
                None if t is None else float(t) for t in thetas
            ),
        )

    def grouped_stack_variant(self) -> StackVariant:
        """Two-slot stack built from the ds2 split; runs the same games as ds2."""
        ds2 = self.ds2_variant()
        hierarchies = {
            player: ObjectiveHierarchy(
                (ds2.leader_objectives[player], ds2.follower_objectives[player])
            )
            for player in bglp_objectives()
        }
        return StackVariant(
            hierarchies=hierarchies,
            beta_l=(ds2.beta_l,),
            theta_l=None if ds2.theta_l is None else (ds2.theta_l,),
        )

    # -- identity ---------------------------------------------------------------

    def hash(self) -> str:
        blob = json.dumps(self.tree, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def validate(self) -> None:
        tr = self.training
        if int(tr["episodes"]) < 1 or int(tr["eval_episodes"]) < 1:
            raise ConfigError("episodes and eval_episodes must be >= 1")
        window = float(self.tree["plant"]["window_seconds"])
        for key in ("horizon_seconds", "eval_horizon_seconds"):
            horizon = float(tr[key])
            if horizon <= 0.0 or horizon / window != round(horizon / window):
                raise ConfigError(f"{key} must be a positive whole number of windows")
        if int(tr["threads"]) < 1:
            raise ConfigError("threads must be >= 1")
        if self.map_points < 2:
            raise ConfigError("maps.points must be >= 2")
        if self.map_layers < 1:
            raise ConfigError("maps.layers must be >= 1")
        if self.coalition_mode not in ("additive", "multiplicative"):
            raise ConfigError(f"unknown coalition mode {self.coalition_mode!r}")
        vf = self.verify_params
        for key in ("samples", "fd_models", "br_models", "mass_steps"):
            if int(vf[key]) < 1:
                raise ConfigError(f"verify.{key} must be >= 1")
        planted = vf["planted_coupling"]
        if float(planted["strength"]) < 0.0:
            raise ConfigError("verify.planted_coupling.strength must be >= 0")
        players = set(bglp_objectives())
        for end in ("source", "target"):
            if planted[end] not in players:
                raise ConfigError(
                    f"verify.planted_coupling.{end} must be one of {sorted(players)}"
                )
        self.learner_config()
        self.vanilla_variant()
        self.ds2_variant()
        self.stack_variant()


_KIND_PRIORITY = {
    ObjectiveKind.BOTTLENECK_OVERFLOW_PREV: 0,
    ObjectiveKind.BOTTLENECK_OVERFLOW_NEXT: 0,
    ObjectiveKind.DEMAND: 1,
    ObjectiveKind.POWER: 2,
    ObjectiveKind.CUSTOM: 3,
}


def _priority_order(objs: tuple[ObjectiveSpec, ...]) -> list[ObjectiveSpec]:
    """Objectives most-important-first: overflow, bottleneck, demand, power.

    The sort is stable, so objectives of equal kind keep declaration order;
    that is what puts overflow ahead of bottleneck in the hierarchy.
    """
    return sorted(objs, key=lambda o: _KIND_PRIORITY[o.kind])
