"""Leader-follower potential-game learning for modular production chains."""

__version__ = "0.1.0"

from .game import (
    DS2Variant,
    GameSpec,
    ObjectiveHierarchy,
    ObjectiveKind,
    ObjectiveSpec,
    ProcessGraph,
    StackVariant,
    VanillaVariant,
    games_for_player,
    potential_value,
)
from .learning import (
    LearnerConfig,
    PolyModel,
    SingularFitError,
    fit_poly,
    follower_gradient,
    leader_gradient,
)
from .maps import PerformanceMap, StackedMap, SupportGrid, load_map, save_map
from .plant import Plant, build_bglp
from .trainer import run_training

__all__ = [
    "DS2Variant",
    "GameSpec",
    "LearnerConfig",
    "ObjectiveHierarchy",
    "ObjectiveKind",
    "ObjectiveSpec",
    "PerformanceMap",
    "Plant",
    "PolyModel",
    "ProcessGraph",
    "SingularFitError",
    "StackVariant",
    "StackedMap",
    "SupportGrid",
    "VanillaVariant",
    "build_bglp",
    "fit_poly",
    "follower_gradient",
    "games_for_player",
    "leader_gradient",
    "load_map",
    "potential_value",
    "run_training",
    "save_map",
]
