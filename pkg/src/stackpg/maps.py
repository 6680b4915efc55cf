"""Discretized policy storage: performance maps and stacked follower maps.

A performance map discretizes a player's state space into an equidistant
grid of support vectors.  Each cell stores one action (the best explored
one for sampling learners, the current gradient iterate for the others)
plus the utility last credited to it; reading a policy out of the map is a
global inverse-squared-distance interpolation over the *visited* cells.

Follower policies add the leader's action as an extra input.  Rather than
growing the grid by a dimension, the map is stacked: L full copies, indexed
by the leader action bucket, so a read touches a single layer.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .game import clamp01

INIT_ACTION = 0.5          # midpoint start for unexplored cells
UNVISITED = -np.inf        # utility sentinel; any real utility replaces it

_MAGIC = b"SPGM"
_VERSION = 2


class MapFormatError(ValueError):
    """Malformed or truncated map file."""


class MapVersionError(MapFormatError):
    """Map file written by an incompatible format version."""


@dataclass(frozen=True)
class SupportGrid:
    """Equidistant support vectors over a box.

    ``points`` support vectors per axis; spacing per axis is
    (hi - lo) / (points - 1).
    """

    dims: int
    points: int
    bounds: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        if self.bounds is None:
            object.__setattr__(self, "bounds", ((0.0, 1.0),) * self.dims)
        if self.points < 2:
            raise ValueError("need at least 2 support vectors per axis")
        if len(self.bounds) != self.dims:
            raise ValueError("one (lo, hi) pair per dimension required")
        for lo, hi in self.bounds:
            if not hi > lo:
                raise ValueError(f"degenerate bounds ({lo}, {hi})")

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.points,) * self.dims

    @property
    def n_cells(self) -> int:
        return self.points ** self.dims

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(lo, hi, self.points) for lo, hi in self.bounds]

    def support_vectors(self) -> np.ndarray:
        """All support vectors, shape (n_cells, dims), C-order flattened."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def clip(self, s: np.ndarray) -> np.ndarray:
        lo = np.array([b[0] for b in self.bounds])
        hi = np.array([b[1] for b in self.bounds])
        return np.clip(np.asarray(s, dtype=float), lo, hi)


def nearest_cell(grid: SupportGrid, s0) -> tuple[int, ...]:
    """Index of the support vector closest to ``s0`` (Euclidean).

    Exact halfway ties break toward the lower index on each axis.
    """
    s0 = np.asarray(s0, dtype=float)
    if s0.shape != (grid.dims,):
        raise ValueError(f"state has shape {s0.shape}, grid expects ({grid.dims},)")
    if not np.all(np.isfinite(s0)):
        raise ValueError(f"non-finite state {s0}")
    idx = []
    for x, (lo, hi) in zip(s0, grid.bounds):
        spacing = (hi - lo) / (grid.points - 1)
        pos = (float(x) - lo) / spacing
        frac = pos - np.floor(pos)
        i = int(np.floor(pos)) if frac == 0.5 else int(np.floor(pos + 0.5))
        idx.append(min(max(i, 0), grid.points - 1))
    return tuple(idx)


def layer_index(a_leader: float, n_layers: int) -> int:
    """Bucket of a leader action among ``n_layers`` equal slices of [0, 1]."""
    if n_layers < 1:
        raise ValueError("need at least one layer")
    return min(max(int(np.floor(a_leader * n_layers)), 0), n_layers - 1)


class PerformanceMap:
    """One stored action + utility per support vector.

    Two write disciplines share the container: ``update_cell`` keeps the
    best explored pair (a write lands iff its utility strictly exceeds the
    stored one) for sampling learners, and ``set_cell`` overwrites outright
    for gradient learners whose stored action is the optimization iterate
    itself.  Unvisited cells carry the initialization action and a -inf
    utility so the first real observation always lands.
    """

    def __init__(self, grid: SupportGrid, init_action: float = INIT_ACTION):
        self.grid = grid
        self.init_action = init_action
        self.actions = np.full(grid.shape, init_action, dtype=float)
        self.utilities = np.full(grid.shape, UNVISITED, dtype=float)
        self.visit_counts = np.zeros(grid.shape, dtype=np.int64)

    def update_cell(self, cell: tuple[int, ...], action: float, utility: float) -> bool:
        """Record one observation; returns True if the stored pair changed."""
        if not np.isfinite(utility):
            raise ValueError(f"non-finite utility {utility}")
        self.visit_counts[cell] += 1
        if utility > self.utilities[cell]:
            self.actions[cell] = action
            self.utilities[cell] = utility
            return True
        return False

    def set_cell(self, cell: tuple[int, ...], action: float, utility: float) -> None:
        """Overwrite one cell outright.

        Gradient learners store their current action iterate here, so no
        improvement test applies; ``utility`` is kept purely as the latest
        observation for inspection.
        """
        if not np.isfinite(utility):
            raise ValueError(f"non-finite utility {utility}")
        self.actions[cell] = action
        self.utilities[cell] = utility
        self.visit_counts[cell] += 1

    def interpolate(self, s0, gamma: float = 1e-6) -> float:
        """Inverse-squared-distance blend of visited-cell actions at ``s0``.

        Weights are 1 / (d^2 + gamma); unvisited cells are excluded so the
        readout never drifts toward untrained defaults.  With no visits the
        initialization action is returned.
        """
        if gamma <= 0.0:
            raise ValueError(f"gamma must be > 0, got {gamma}")
        visited = self.visit_counts.ravel() > 0
        if not visited.any():
            return self.init_action
        s0 = self.grid.clip(s0)
        supports = self.grid.support_vectors()[visited]
        acts = self.actions.ravel()[visited]
        d2 = np.sum((supports - s0) ** 2, axis=1)
        w = 1.0 / (d2 + gamma)
        blended = float(np.dot(w / w.sum(), acts))
        # guard the boundedness invariant against last-bit rounding
        return float(np.clip(blended, acts.min(), acts.max()))

    def copy(self) -> "PerformanceMap":
        m = PerformanceMap(self.grid, self.init_action)
        m.actions = self.actions.copy()
        m.utilities = self.utilities.copy()
        m.visit_counts = self.visit_counts.copy()
        return m

    def __eq__(self, other) -> bool:
        if not isinstance(other, PerformanceMap):
            return NotImplemented
        return (
            self.grid == other.grid
            and self.init_action == other.init_action
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.utilities, other.utilities)
            and np.array_equal(self.visit_counts, other.visit_counts)
        )


class StackedMap:
    """L performance-map layers, indexed by the discretized leader action."""

    def __init__(self, grid: SupportGrid, n_layers: int, init_action: float = INIT_ACTION):
        if n_layers < 1:
            raise ValueError("need at least one layer")
        self.grid = grid
        self.n_layers = n_layers
        self.layers = [PerformanceMap(grid, init_action) for _ in range(n_layers)]

    def layer_for(self, a_leader: float) -> PerformanceMap:
        return self.layers[layer_index(a_leader, self.n_layers)]

    def interpolate(self, s0, a_leader: float, gamma: float = 1e-6) -> float:
        return self.layer_for(a_leader).interpolate(s0, gamma)

    def __eq__(self, other) -> bool:
        if not isinstance(other, StackedMap):
            return NotImplemented
        return self.n_layers == other.n_layers and self.layers == other.layers


# ---------------------------------------------------------------------------
# Persistence: versioned binary + JSON export
# ---------------------------------------------------------------------------
# Layout: MAGIC | u16 version | u16 dims | u32 points | u32 layers |
#         f64 init_action | f64 bounds[2*dims] | per layer: actions f64[n],
#         utilities f64[n], visits i64[n].  All little-endian, C-order.

def _pack_header(grid: SupportGrid, n_layers: int, init_action: float) -> bytes:
    head = struct.pack("<4sHHII", _MAGIC, _VERSION, grid.dims, grid.points, n_layers)
    head += struct.pack("<d", init_action)
    for lo, hi in grid.bounds:
        head += struct.pack("<dd", lo, hi)
    return head


def save_map(m: PerformanceMap | StackedMap, path) -> None:
    if isinstance(m, PerformanceMap):
        grid, layers, init = m.grid, [m], m.init_action
    else:
        grid, layers, init = m.grid, m.layers, m.layers[0].init_action
    blob = bytearray(_pack_header(grid, len(layers), init))
    for layer in layers:
        blob += layer.actions.astype("<f8").tobytes(order="C")
        blob += layer.utilities.astype("<f8").tobytes(order="C")
        blob += layer.visit_counts.astype("<i8").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_map(path) -> PerformanceMap | StackedMap:
    """Inverse of save_map; single-layer files load as PerformanceMap."""
    with open(path, "rb") as fh:
        blob = fh.read()
    fixed = struct.calcsize("<4sHHII")
    if len(blob) < fixed:
        raise MapFormatError("truncated map file (header)")
    magic, version, dims, points, n_layers = struct.unpack_from("<4sHHII", blob, 0)
    if magic != _MAGIC:
        raise MapFormatError("not a map file (bad magic)")
    if version != _VERSION:
        raise MapVersionError(f"map file version {version}, expected {_VERSION}")
    off = fixed
    if len(blob) < off + 8 * (1 + 2 * dims):
        raise MapFormatError("truncated map file (bounds)")
    (init_action,) = struct.unpack_from("<d", blob, off)
    off += 8
    bounds = []
    for _ in range(dims):
        lo, hi = struct.unpack_from("<dd", blob, off)
        bounds.append((lo, hi))
        off += 16
    grid = SupportGrid(dims=dims, points=points, bounds=tuple(bounds))
    n = grid.n_cells
    layer_bytes = n * 8 * 3
    if len(blob) != off + n_layers * layer_bytes:
        raise MapFormatError("truncated or oversized map file (payload)")
    layers = []
    for _ in range(n_layers):
        layer = PerformanceMap(grid, init_action)
        layer.actions = np.frombuffer(blob, "<f8", n, off).reshape(grid.shape).copy()
        off += n * 8
        layer.utilities = np.frombuffer(blob, "<f8", n, off).reshape(grid.shape).copy()
        off += n * 8
        layer.visit_counts = np.frombuffer(blob, "<i8", n, off).reshape(grid.shape).copy()
        off += n * 8
        layers.append(layer)
    if n_layers == 1:
        return layers[0]
    stacked = StackedMap(grid, n_layers, init_action)
    stacked.layers = layers
    return stacked


def _nullify_unvisited(utilities: np.ndarray):
    flat = [None if not np.isfinite(u) else float(u) for u in utilities.ravel()]
    out: list = flat
    for n in reversed(utilities.shape[1:]):
        out = [out[i : i + n] for i in range(0, len(out), n)]
    return out


def map_to_json(m: PerformanceMap | StackedMap, path) -> None:
    """Human-inspectable export; unvisited utilities serialize as null."""
    layers = [m] if isinstance(m, PerformanceMap) else m.layers
    grid = m.grid
    doc = {
        "grid": {"dims": grid.dims, "points": grid.points, "bounds": [list(b) for b in grid.bounds]},
        "layers": [
            {
                "actions": layer.actions.tolist(),
                "utilities": _nullify_unvisited(layer.utilities),
                "visit_counts": layer.visit_counts.tolist(),
            }
            for layer in layers
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)


__all__ = [
    "INIT_ACTION",
    "UNVISITED",
    "MapFormatError",
    "MapVersionError",
    "SupportGrid",
    "PerformanceMap",
    "StackedMap",
    "nearest_cell",
    "layer_index",
    "save_map",
    "load_map",
    "map_to_json",
    "clamp01",
]
