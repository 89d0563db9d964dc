"""Virtual demining environment.

A clearance run is a strict state machine: one reachable tile is cleared
per timestep until the region is done. Reachable means on the region
border or 8-adjacent to an already cleared tile. Policies:

* random — uniform choice among reachable tiles, averaged over seeded runs;
* sequential — boustrophedon sweeps, one run per compass direction;
* pattern — sequential until the first multi-mine cluster appears, then
  greedy highest-risk-first with the risk map rebuilt on a fixed cadence.

Performance is summarized by the demining score (mean share of mines
found per timestep) and T_x (percent of tiles cleared to reach x% of the
mines).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import clustering, patterns, risk
from .geodata import Bounds, Grid, MetricPoint, MinefieldDataset, assign_mines, build_grid

DIRECTIONS = ("south", "north", "east", "west")


@dataclass
class ClearanceState:
    grid: Grid
    cleared: np.ndarray  # bool (n_tiles,)
    reachable_mask: np.ndarray  # bool, maintained incrementally
    timestep: int
    found: list[int]  # dataset mine indices in discovery order
    route: list[int]
    l: list[float]  # share of total mines found after each timestep
    total_mines: int
    seed: int | None = None

    @property
    def done(self) -> bool:
        return self.timestep >= self.grid.n_tiles


@dataclass
class ClearanceHistory:
    l: np.ndarray
    route: tuple[int, ...] | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.l)


@dataclass
class SuiteResult:
    """Pointwise mean over a family of runs plus the individual histories."""

    mean_l: np.ndarray
    histories: list[ClearanceHistory]

    def scorecard(self) -> "Scorecard":
        return Scorecard.from_l(self.mean_l)


@dataclass(frozen=True)
class Scorecard:
    demining_score: float
    t50: float
    t75: float
    t90: float
    t100: float

    @classmethod
    def from_l(cls, l: np.ndarray) -> "Scorecard":
        return cls(
            demining_score=float(np.mean(l)),
            t50=t_x_of(l, 50),
            t75=t_x_of(l, 75),
            t90=t_x_of(l, 90),
            t100=t_x_of(l, 100),
        )

    def to_dict(self) -> dict:
        return {
            "demining_score": self.demining_score,
            "t50": self.t50,
            "t75": self.t75,
            "t90": self.t90,
            "t100": self.t100,
        }


@dataclass
class RiskStack:
    """Everything a pattern deminer needs to rebuild its risk map online."""

    kind: str  # "linear" | "curved" | "bayesian"
    model: risk.RiskModel
    cluster_eps: float
    fit_config: patterns.PatternFitConfig | None = None
    anchor_extent: float = patterns.TRAINING_ANCHOR_EXTENT
    recalc_interval: int = 25

    def __post_init__(self):
        if self.kind not in ("linear", "curved", "bayesian"):
            raise ValueError(f"unknown pattern deminer kind {self.kind!r}")
        if self.recalc_interval < 1:
            raise ValueError("recalc_interval must be >= 1")
        if self.kind in ("curved", "bayesian") and self.fit_config is None:
            raise ValueError("curved kinds need a PatternFitConfig")


# ---------------------------------------------------------------------------
# State machine
# ---------------------------------------------------------------------------


def new_state(grid: Grid, dataset: MinefieldDataset, seed: int | None = None) -> ClearanceState:
    n = grid.n_tiles
    return ClearanceState(
        grid=grid,
        cleared=np.zeros(n, dtype=bool),
        reachable_mask=_border_mask(grid),
        timestep=0,
        found=[],
        route=[],
        l=[],
        total_mines=len(dataset),
        seed=seed,
    )


def _border_mask(grid: Grid) -> np.ndarray:
    mask = np.zeros(grid.n_tiles, dtype=bool)
    cols = np.arange(grid.n_tiles) % grid.n_cols
    rows = np.arange(grid.n_tiles) // grid.n_cols
    mask[(cols == 0) | (cols == grid.n_cols - 1) | (rows == 0) | (rows == grid.n_rows - 1)] = True
    return mask


def reachable(state: ClearanceState) -> np.ndarray:
    """Indices of tiles that may be cleared next (sorted row-major)."""
    return np.flatnonzero(state.reachable_mask)


def is_reachable(state: ClearanceState, tile_index: int) -> bool:
    return bool(state.reachable_mask[tile_index])


def step(state: ClearanceState, tile_index: int) -> tuple[ClearanceState, int]:
    """Clear one tile in place; returns (state, number of mines found in it)."""
    if state.cleared[tile_index]:
        raise ValueError(f"tile {tile_index} already cleared")
    if not state.reachable_mask[tile_index]:
        raise ValueError(f"tile {tile_index} is not reachable")
    state.cleared[tile_index] = True
    state.reachable_mask[tile_index] = False
    mines = state.grid.tiles[tile_index].mine_indices
    state.found.extend(mines)
    state.timestep += 1
    state.route.append(int(tile_index))
    share = len(state.found) / state.total_mines if state.total_mines else 1.0
    state.l.append(share)
    # uncleared 8-neighbors become reachable
    col, row = tile_index % state.grid.n_cols, tile_index // state.grid.n_cols
    for dc in (-1, 0, 1):
        for dr in (-1, 0, 1):
            if dc == 0 and dr == 0:
                continue
            c, r = col + dc, row + dr
            if 0 <= c < state.grid.n_cols and 0 <= r < state.grid.n_rows:
                idx = r * state.grid.n_cols + c
                if not state.cleared[idx]:
                    state.reachable_mask[idx] = True
    return state, len(mines)


def history_of(state: ClearanceState, **meta) -> ClearanceHistory:
    return ClearanceHistory(l=np.array(state.l), route=tuple(state.route), meta=dict(meta))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def demining_score(history) -> float:
    """Mean share of mines found over the entire clearance (complete runs only)."""
    l = _l_of(history)
    n = len(l)
    if n == 0:
        raise ValueError("empty history")
    grid_n = getattr(history, "meta", {}).get("n_tiles")
    if grid_n is not None and grid_n != n:
        raise ValueError(f"incomplete history: {n} of {grid_n} timesteps")
    return float(np.mean(l))


def t_x(history, x: int) -> float:
    return t_x_of(_l_of(history), x)


def t_x_of(l: np.ndarray, x: int) -> float:
    if x not in (50, 75, 90, 100):
        raise ValueError("x must be one of 50, 75, 90, 100")
    l = np.asarray(l, dtype=float)
    n = len(l)
    hit = np.flatnonzero(l >= x / 100.0 - 1e-12)
    if len(hit) == 0:
        return 100.0
    return 100.0 * (int(hit[0]) + 1) / n


def _l_of(history) -> np.ndarray:
    if isinstance(history, ClearanceHistory):
        return history.l
    return np.asarray(history, dtype=float)


def average_histories(histories: list[ClearanceHistory]) -> np.ndarray:
    ls = np.vstack([h.l for h in histories])
    return ls.mean(axis=0)


# ---------------------------------------------------------------------------
# Baseline policies
# ---------------------------------------------------------------------------


def run_random(grid: Grid, dataset: MinefieldDataset, seed: int, runs: int = 10) -> SuiteResult:
    """Average of `runs` uniformly random clearances (seeded, reproducible)."""
    if grid.n_tiles < 1:
        raise ValueError("grid must have at least one tile")
    children = np.random.SeedSequence(seed).spawn(runs)
    histories = []
    for r in range(runs):
        rng = np.random.default_rng(children[r])
        state = new_state(grid, dataset, seed=seed)
        while not state.done:
            cand = reachable(state)
            step(state, int(rng.choice(cand)))
        histories.append(history_of(state, policy="random", run=r, n_tiles=grid.n_tiles))
    return SuiteResult(mean_l=average_histories(histories), histories=histories)


def serpentine_route(grid: Grid, direction: str) -> list[int]:
    """Boustrophedon visit order covering the grid from one side."""
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    route = []
    if direction in ("south", "north"):
        rows = range(grid.n_rows) if direction == "south" else range(grid.n_rows - 1, -1, -1)
        for k, row in enumerate(rows):
            cols = range(grid.n_cols) if k % 2 == 0 else range(grid.n_cols - 1, -1, -1)
            route.extend(row * grid.n_cols + c for c in cols)
    else:
        cols = range(grid.n_cols) if direction == "east" else range(grid.n_cols - 1, -1, -1)
        for k, col in enumerate(cols):
            rows_it = range(grid.n_rows) if k % 2 == 0 else range(grid.n_rows - 1, -1, -1)
            route.extend(r * grid.n_cols + col for r in rows_it)
    return route


def run_sequential(grid: Grid, dataset: MinefieldDataset, direction: str) -> ClearanceHistory:
    state = new_state(grid, dataset)
    for tile in serpentine_route(grid, direction):
        step(state, tile)
    return history_of(state, policy="sequential", direction=direction, n_tiles=grid.n_tiles)


def run_sequential_suite(grid: Grid, dataset: MinefieldDataset) -> SuiteResult:
    histories = [run_sequential(grid, dataset, d) for d in DIRECTIONS]
    return SuiteResult(mean_l=average_histories(histories), histories=histories)


# ---------------------------------------------------------------------------
# Pattern deminer
# ---------------------------------------------------------------------------


def _fit_cluster_patterns(found_xy: np.ndarray, stack: RiskStack, cache: dict) -> list:
    """DBSCAN the found mines and fit a pattern per multi-mine cluster."""
    params = clustering.ClusteringParams(eps=stack.cluster_eps, min_pts=1)
    clusters, _ = clustering.dbscan(found_xy, params)
    fitted = []
    for cl in clusters:
        if len(cl) < 2:
            continue
        key = (cl.points.round(6).tobytes(), stack.kind,
               None if stack.fit_config is None else stack.fit_config.pc_smoothness_factor,
               stack.anchor_extent)
        if key in cache:
            fitted.append(cache[key])
            continue
        if stack.kind == "linear":
            pat = patterns.fit_linear(cl)
        else:
            pat = patterns.fit_principal_curve(cl, stack.fit_config)
            pat = patterns.build_anchors(pat, stack.anchor_extent)
        cache[key] = pat
        fitted.append(pat)
    return fitted


def has_multi_mine_cluster(found_xy: np.ndarray, eps: float) -> bool:
    if len(found_xy) < 2:
        return False
    clusters, _ = clustering.dbscan(found_xy, clustering.ClusteringParams(eps=eps, min_pts=1))
    return any(len(c) >= 2 for c in clusters)


def run_pattern_deminer(grid: Grid, dataset: MinefieldDataset, stack: RiskStack,
                        start_side: str = "south", cache: dict | None = None) -> ClearanceHistory:
    """One pattern-guided clearance starting with a serpentine from `start_side`.

    The deminer sweeps sequentially until the found mines form a cluster of
    at least two; from then on it clears the reachable tile with the highest
    combined risk (ties to the smaller row-major index), rebuilding
    clusters, patterns and the risk map every `recalc_interval` timesteps.
    Reachable tiles without a risk estimate rank below estimated ones and
    keep serpentine order among themselves.
    """
    if stack.model is None:
        raise ValueError("pattern deminer needs a trained risk model")
    cache = {} if cache is None else cache
    state = new_state(grid, dataset)
    route = serpentine_route(grid, start_side)
    serp_rank = np.empty(grid.n_tiles, dtype=int)
    serp_rank[route] = np.arange(grid.n_tiles)

    mine_xy = dataset.coords()
    risk_arr: np.ndarray | None = None
    t_first: int | None = None
    rebuilds = 0
    found_at_last_check = -1

    while not state.done:
        t = state.timestep
        if t_first is None:
            if len(state.found) != found_at_last_check:
                found_at_last_check = len(state.found)
                if has_multi_mine_cluster(mine_xy[state.found], stack.cluster_eps):
                    t_first = t
        if t_first is not None:
            due = (t == t_first) or ((t - t_first) % stack.recalc_interval == 0)
            if due:
                fitted = _fit_cluster_patterns(mine_xy[state.found], stack, cache)
                risk_arr = risk.risk_map(grid, fitted, stack.model, cleared=state.cleared)
                rebuilds += 1
        tile = _select_tile(state, risk_arr, route, serp_rank)
        step(state, tile)

    return history_of(
        state,
        policy=stack.kind,
        start_side=start_side,
        n_tiles=grid.n_tiles,
        t_first=t_first,
        rebuilds=rebuilds,
        recalc_interval=stack.recalc_interval,
    )


def argmax_risk_tile(state: ClearanceState, risk_arr: np.ndarray | None) -> int | None:
    """Reachable tile with the highest estimated risk; ties to the smaller
    row-major index. None when no reachable tile has an estimate."""
    if risk_arr is None:
        return None
    cand = np.flatnonzero(state.reachable_mask)
    if not len(cand):
        return None
    vals = risk_arr[cand]
    ok = ~np.isnan(vals)
    if not ok.any():
        return None
    sub = cand[ok]
    return int(sub[np.argmax(vals[ok])])  # first max = smallest row-major index


def serpentine_next(state: ClearanceState, route: list[int]) -> int:
    """First reachable uncleared tile in serpentine order."""
    for tile in route:
        if state.reachable_mask[tile]:
            return tile
    raise ValueError("no reachable tile left")


def _select_tile(state: ClearanceState, risk_arr: np.ndarray | None,
                 route: list[int], serp_rank: np.ndarray) -> int:
    if risk_arr is None:
        return route[state.timestep]  # pre-pattern: cleared set is a route prefix
    best = argmax_risk_tile(state, risk_arr)
    if best is not None:
        return best
    cand = np.flatnonzero(state.reachable_mask)
    return int(cand[np.argmin(serp_rank[cand])])


def run_pattern_suite(grid: Grid, dataset: MinefieldDataset, stack: RiskStack) -> SuiteResult:
    cache: dict = {}
    histories = [run_pattern_deminer(grid, dataset, stack, side, cache) for side in DIRECTIONS]
    return SuiteResult(mean_l=average_histories(histories), histories=histories)


# ---------------------------------------------------------------------------
# Route audit
# ---------------------------------------------------------------------------


def audit_route(grid: Grid, dataset: MinefieldDataset, route) -> bool:
    """Replay a route, verifying every pick was reachable; True when valid."""
    state = new_state(grid, dataset)
    seen = set()
    for tile in route:
        if tile in seen or not is_reachable(state, tile):
            return False
        seen.add(tile)
        step(state, tile)
    return state.done


# ---------------------------------------------------------------------------
# Synthetic minefields
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    pattern: str  # "line" | "arc" | "multi"
    n_mines: int
    spacing: float
    jitter: float
    region_size: float  # square side, meters
    seed: int
    tile_size: float = 25.0
    arc_radius: float = 200.0
    components: tuple[str, ...] = ("line", "arc")

    def __post_init__(self):
        if self.n_mines < 2:
            raise ValueError("n_mines must be >= 2")
        if self.pattern not in ("line", "arc", "multi"):
            raise ValueError(f"unknown pattern kind {self.pattern!r}")


def generate_synthetic_minefield(spec: SyntheticSpec) -> tuple[Grid, MinefieldDataset]:
    """Seeded minefield with mines laid along planted line/arc geometry."""
    rng = np.random.default_rng(spec.seed)
    size = spec.region_size
    if spec.pattern == "multi":
        per = _split_counts(spec.n_mines, len(spec.components))
        pts = []
        for i, (kind, cnt) in enumerate(zip(spec.components, per)):
            # separate sub-windows keep the planted clusters apart
            frac = (i + 0.5) / len(spec.components)
            window_center = np.array([size * frac, size * frac])
            pts.append(_lay_pattern(rng, kind, cnt, spec, window_center, size / (2 * len(spec.components))))
        xy = np.vstack(pts)
    else:
        xy = _lay_pattern(rng, spec.pattern, spec.n_mines, spec,
                          np.array([size / 2, size / 2]), size / 2)
    dataset = MinefieldDataset(mines=[MetricPoint(float(x), float(y)) for x, y in xy])
    grid = build_grid(Bounds(0.0, 0.0, size, size), spec.tile_size)
    return assign_mines(grid, dataset), dataset


def _split_counts(total: int, parts: int) -> list[int]:
    base = total // parts
    counts = [base] * parts
    for i in range(total - base * parts):
        counts[i] += 1
    return counts


def _lay_pattern(rng, kind: str, n: int, spec: SyntheticSpec,
                 window_center: np.ndarray, half_window: float) -> np.ndarray:
    margin = min(spec.tile_size / 2, spec.region_size / 20)
    lo_r = np.full(2, margin)
    hi_r = np.full(2, spec.region_size - margin)

    base = None
    for _ in range(100):  # orientation retries until the geometry fits
        if kind == "line":
            theta = rng.uniform(0, math.pi)
            u = np.array([math.cos(theta), math.sin(theta)])
            offsets = (np.arange(n) - (n - 1) / 2) * spec.spacing
            raw = np.outer(offsets, u)
        elif kind == "arc":
            r = spec.arc_radius
            arc_span = (n - 1) * spec.spacing / r
            phi0 = rng.uniform(0, 2 * math.pi)
            angles = phi0 + np.linspace(0, arc_span, n)
            raw = r * np.column_stack([np.cos(angles), np.sin(angles)])
            raw -= raw.mean(axis=0)
        else:
            raise ValueError(f"unknown component kind {kind!r}")

        bb_min, bb_max = raw.min(axis=0), raw.max(axis=0)
        # admissible centroid range inside the window (cluster separation)...
        lo_c = np.maximum(window_center - half_window, lo_r) - bb_min
        hi_c = np.minimum(window_center + half_window, hi_r) - bb_max
        if np.all(hi_c >= lo_c):
            base = raw + rng.uniform(lo_c, hi_c)
            break
        # ...or anywhere in the region when the window is too small
        lo_c, hi_c = lo_r - bb_min, hi_r - bb_max
        if np.all(hi_c >= lo_c):
            base = raw + np.clip(window_center, lo_c, hi_c)
            break
    if base is None:
        raise ValueError(f"{kind} pattern of {n} mines does not fit the region")

    out = np.empty_like(base)
    for i, b in enumerate(base):
        ok = False
        for _ in range(100):
            p = b + rng.normal(0.0, spec.jitter, size=2) if spec.jitter > 0 else b
            if np.all(p >= 0) and np.all(p <= spec.region_size):
                out[i] = p
                ok = True
                break
        if not ok:
            raise ValueError(f"mine {i} could not be placed inside the region after 100 attempts")
    return out


# ---------------------------------------------------------------------------
# Cross validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HyperGrid:
    landmine_weights: tuple[float, ...] = (30.0, 60.0, 90.0)
    cluster_max_distances: tuple[float, ...] = (50.0, 75.0, 100.0)
    pc_smoothness_factors: tuple[float, ...] = (5.0, 10.0, 25.0)

    def cells(self, kind: str) -> list[dict]:
        if kind == "linear":
            return [
                {"landmine_weight": w, "cluster_max_distance": d}
                for w, d in itertools.product(self.landmine_weights, self.cluster_max_distances)
            ]
        return [
            {"landmine_weight": w, "cluster_max_distance": d, "pc_smoothness_factor": s}
            for w, d, s in itertools.product(
                self.landmine_weights, self.cluster_max_distances, self.pc_smoothness_factors
            )
        ]


@dataclass
class CVResult:
    cells: list[dict]  # one record per hyperparameter combination
    best: dict
    best_score: float

    def to_dict(self) -> dict:
        return {"cells": self.cells, "best": self.best, "best_score": self.best_score}


def cross_validate(regions, kind: str, grid: HyperGrid,
                   recalc_interval: int = 50,
                   sampler: risk.SamplerSettings | None = None) -> CVResult:
    """Two-fold CV: train on one region, run a full clearance on the other.

    The score per cell is the tile-count-weighted mean of the two validation
    demining scores; the argmax is deterministic (first cell wins ties, in
    grid order).
    """
    from . import training  # local import; training builds on this module

    if len(regions) != 2:
        raise ValueError("two-fold CV needs exactly two regions")
    cells = grid.cells(kind)
    if not cells:
        raise ValueError("empty hyperparameter grid")

    records = []
    best = None
    best_score = -math.inf
    for cell in cells:
        hyper = training.InstanceHyperparams(
            landmine_weight=cell["landmine_weight"],
            cluster_max_distance=cell["cluster_max_distance"],
            pc_smoothness_factor=cell.get("pc_smoothness_factor"),
        )
        fold_scores = []
        fold_tiles = []
        for train_idx, val_idx in ((0, 1), (1, 0)):
            instance = training.train_instance([regions[train_idx]], kind, hyper, sampler=sampler)
            stack = training.make_stack(instance, recalc_interval=recalc_interval)
            suite = run_pattern_suite(regions[val_idx][0], regions[val_idx][1], stack)
            fold_scores.append(float(np.mean(suite.mean_l)))
            fold_tiles.append(regions[val_idx][0].n_tiles)
        weighted = float(np.average(fold_scores, weights=fold_tiles))
        record = dict(cell)
        record.update({
            "fold_scores": fold_scores,
            "fold_tiles": fold_tiles,
            "weighted_score": weighted,
        })
        records.append(record)
        if weighted > best_score:
            best_score = weighted
            best = dict(cell)
    return CVResult(cells=records, best=best, best_score=best_score)
