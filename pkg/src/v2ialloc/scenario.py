"""Synthetic intersection worlds and per-agent sensing grids.

A scenario is a static snapshot of one perception period: an RSU, ``M``
CAVs and a set of rectangular objects on a BEV grid.  Agent index 0 is
the RSU, indices ``1..M`` are the CAVs.  Per-agent visibility comes from
integer line walks over the grid, and sensing quality decays
exponentially with range on visible cells.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCENARIO_SCHEMA = "v2ialloc-scenario/1"


class ScenarioError(ValueError):
    """Raised when a scenario config cannot be realized."""


@dataclass
class ScenarioConfig:
    grid_h: int = 64
    grid_w: int = 64
    cell_size: float = 1.0
    n_cavs: int = 4
    n_objects: int = 14
    object_cells: tuple[int, int] = (2, 4)  # (width, length) in cells
    rsu_xy: tuple[float, float] = (40.5, 40.5)
    rsu_height: float = 25.0
    road_half_width: int = 6  # cells either side of each road axis
    speed_range: tuple[float, float] = (0.0, 25.0)  # km/h
    sensing_base_quality: float = 0.95
    sensing_decay: float = 40.0
    clutter_max: float = 0.1
    min_cav_distance: float = 6.0
    seed: int = 0

    def validate(self) -> None:
        if self.grid_h < 1 or self.grid_w < 1:
            raise ScenarioError("grid dimensions must be >= 1")
        if not 0.0 < self.sensing_base_quality <= 1.0:
            raise ScenarioError("sensing_base_quality must lie in (0, 1]")
        if self.sensing_decay <= 0:
            raise ScenarioError("sensing_decay must be positive")
        if not 0.0 <= self.clutter_max < 1.0:
            raise ScenarioError("clutter_max must lie in [0, 1)")
        lo, hi = self.speed_range
        if not 0.0 <= lo <= hi <= 25.0:
            raise ScenarioError("speed_range must lie within 0-25 km/h")
        if self.cell_size <= 0:
            raise ScenarioError("cell_size must be positive")
        if self.n_cavs < 0 or self.n_objects < 0:
            raise ScenarioError("counts must be non-negative")


@dataclass
class SceneObject:
    cells: np.ndarray  # (n, 2) int array of (row, col)
    center: tuple[float, float]  # (x, y) meters
    yaw: float


@dataclass
class Scenario:
    config: ScenarioConfig
    objects: list[SceneObject]
    agent_xy: np.ndarray  # (M+1, 2) meters; row 0 is the RSU
    cav_velocity: np.ndarray  # (M, 2) m/s
    occupancy: np.ndarray  # (H, W) uint8
    object_id: np.ndarray  # (H, W) int, -1 on background
    visibility: np.ndarray  # (M+1, H, W) uint8
    quality: np.ndarray  # (M+1, H, W) float
    clutter: np.ndarray  # (M+1, H, W) float
    extras: dict = field(default_factory=dict)

    @property
    def n_cavs(self) -> int:
        return self.agent_xy.shape[0] - 1

    @property
    def shape(self) -> tuple[int, int]:
        return self.occupancy.shape

    def agent_cell(self, agent: int) -> tuple[int, int]:
        return _xy_to_cell(self.agent_xy[agent], self.config.cell_size, self.shape)

    def cav_positions(self) -> np.ndarray:
        return self.agent_xy[1:]


def _xy_to_cell(xy, cell_size: float, shape) -> tuple[int, int]:
    r = int(np.floor(xy[1] / cell_size))
    c = int(np.floor(xy[0] / cell_size))
    return min(max(r, 0), shape[0] - 1), min(max(c, 0), shape[1] - 1)


def _cell_center(rc, cell_size: float) -> tuple[float, float]:
    return ((rc[1] + 0.5) * cell_size, (rc[0] + 0.5) * cell_size)


def _road_mask(cfg: ScenarioConfig) -> np.ndarray:
    h, w = cfg.grid_h, cfg.grid_w
    mask = np.zeros((h, w), dtype=bool)
    r0, c0 = h // 2, w // 2
    hw = cfg.road_half_width
    mask[max(r0 - hw, 0):min(r0 + hw, h), :] = True
    mask[:, max(c0 - hw, 0):min(c0 + hw, w)] = True
    return mask


def _dilate(mask: np.ndarray) -> np.ndarray:
    # 8-neighbourhood dilation by one cell
    out = mask.copy()
    out[1:, :] |= mask[:-1, :]
    out[:-1, :] |= mask[1:, :]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    out[1:, 1:] |= mask[:-1, :-1]
    out[:-1, :-1] |= mask[1:, 1:]
    out[1:, :-1] |= mask[:-1, 1:]
    out[:-1, 1:] |= mask[1:, :-1]
    return out


def generate_scenario(config: ScenarioConfig, max_retries: int = 500) -> Scenario:
    """Build a deterministic scenario from ``config`` (seeded by ``config.seed``).

    Objects are vehicle-sized rectangles on two roads crossing at the grid
    center, kept one cell apart so that their footprints never touch.
    CAVs sit on free road cells.  Raises :class:`ScenarioError` when the
    requested objects cannot be placed within ``max_retries`` draws each.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    h, w = config.grid_h, config.grid_w
    road = _road_mask(config)
    rsu_cell = _xy_to_cell(config.rsu_xy, config.cell_size, (h, w))

    # CAVs first so objects never cover a sensor
    reserved = np.zeros((h, w), dtype=bool)
    reserved[rsu_cell] = True
    road_cells = np.argwhere(road)
    rsu_xy = np.asarray(config.rsu_xy, dtype=float)
    cav_xy = np.zeros((config.n_cavs, 2))
    cav_vel = np.zeros((config.n_cavs, 2))
    r0, c0 = h // 2, w // 2
    for m in range(config.n_cavs):
        for _ in range(max_retries):
            rc = road_cells[rng.integers(len(road_cells))]
            if reserved[rc[0], rc[1]]:
                continue
            xy = np.asarray(_cell_center(rc, config.cell_size))
            if np.hypot(*(xy - rsu_xy)) < config.min_cav_distance:
                continue
            break
        else:
            raise ScenarioError(f"could not place CAV {m + 1}")
        reserved[rc[0], rc[1]] = True
        cav_xy[m] = xy
        speed = rng.uniform(*config.speed_range) / 3.6
        horizontal = abs(rc[0] - r0) < config.road_half_width
        sign = 1.0 if rng.random() < 0.5 else -1.0
        cav_vel[m] = (sign * speed, 0.0) if horizontal else (0.0, sign * speed)

    object_id = np.full((h, w), -1, dtype=np.int64)
    blocked = _dilate(reserved)
    objects: list[SceneObject] = []
    width, length = config.object_cells
    for j in range(config.n_objects):
        for _ in range(max_retries):
            horizontal = rng.random() < 0.5
            rows, cols = (width, length) if horizontal else (length, width)
            if rows > h or cols > w:
                continue
            r = int(rng.integers(0, h - rows + 1))
            c = int(rng.integers(0, w - cols + 1))
            if not road[r:r + rows, c:c + cols].all():
                continue
            if blocked[r:r + rows, c:c + cols].any():
                continue
            break
        else:
            raise ScenarioError(
                f"could not place object {j + 1} of {config.n_objects} disjointly"
            )
        foot = np.zeros((h, w), dtype=bool)
        foot[r:r + rows, c:c + cols] = True
        object_id[foot] = j
        blocked |= _dilate(foot)
        cells = np.argwhere(foot)
        center = ((c + cols / 2) * config.cell_size, (r + rows / 2) * config.cell_size)
        yaw = (0.0 if rng.random() < 0.5 else np.pi) if horizontal else \
            (np.pi / 2 if rng.random() < 0.5 else -np.pi / 2)
        objects.append(SceneObject(cells=cells, center=center, yaw=float(yaw)))

    agent_xy = np.vstack([rsu_xy[None, :], cav_xy])
    n_agents = config.n_cavs + 1
    clutter = rng.uniform(0.0, config.clutter_max, size=(n_agents, h, w)) \
        if config.clutter_max > 0 else np.zeros((n_agents, h, w))

    scenario = Scenario(
        config=config,
        objects=objects,
        agent_xy=agent_xy,
        cav_velocity=cav_vel,
        occupancy=(object_id >= 0).astype(np.uint8),
        object_id=object_id,
        visibility=np.zeros((n_agents, h, w), dtype=np.uint8),
        quality=np.zeros((n_agents, h, w)),
        clutter=clutter,
    )
    for a in range(n_agents):
        scenario.visibility[a] = visibility_grid(scenario, a)
        scenario.quality[a] = sensing_quality_grid(scenario, a)
    # false positives only arise where the sensor actually observes
    scenario.clutter *= scenario.visibility
    return scenario


def line_cells(start: tuple[int, int], stop: tuple[int, int]) -> list[tuple[int, int]]:
    """Cells visited by the integer line walk from ``start`` to ``stop`` (inclusive).

    Step ``i`` of ``n = max(|dr|, |dc|)`` lands on ``start + round(i * d / n)``
    with halves rounded up, computed in exact integer arithmetic.
    """
    (r0, c0), (r1, c1) = start, stop
    dr, dc = r1 - r0, c1 - c0
    n = max(abs(dr), abs(dc))
    if n == 0:
        return [(r0, c0)]
    return [
        (r0 + (2 * i * dr + n) // (2 * n), c0 + (2 * i * dc + n) // (2 * n))
        for i in range(n + 1)
    ]


def visibility_grid(scenario: Scenario, agent: int) -> np.ndarray:
    """Binary (H, W) map of cells the agent can see.

    A target cell is hidden when any intermediate cell on the line walk
    towards it is occupied by an object other than the target's own
    object.  The agent's own cell is always visible.
    """
    h, w = scenario.shape
    obj = scenario.object_id
    r0, c0 = scenario.agent_cell(agent)
    rr, cc = np.mgrid[0:h, 0:w]
    dr = (rr - r0).ravel()
    dc = (cc - c0).ravel()
    n = np.maximum(np.abs(dr), np.abs(dc))
    nmax = int(n.max()) if n.size else 0
    visible = np.ones(h * w, dtype=bool)
    if nmax <= 1:
        return visible.reshape(h, w).astype(np.uint8)
    target_obj = obj.ravel()
    safe_n = np.maximum(n, 1)
    # intermediate steps 1..n-1; the agent cell and the target are excluded
    for i in range(1, nmax):
        active = i < n
        if not active.any():
            break
        ri = r0 + (2 * i * dr[active] + n[active]) // (2 * safe_n[active])
        ci = c0 + (2 * i * dc[active] + n[active]) // (2 * safe_n[active])
        hit = obj[ri, ci]
        blocks = (hit >= 0) & (hit != target_obj[active])
        idx = np.flatnonzero(active)
        visible[idx[blocks]] = False
    return visible.reshape(h, w).astype(np.uint8)


def distance_grid(scenario: Scenario, agent: int) -> np.ndarray:
    h, w = scenario.shape
    cs = scenario.config.cell_size
    ys = (np.arange(h) + 0.5) * cs
    xs = (np.arange(w) + 0.5) * cs
    ax, ay = scenario.agent_xy[agent]
    return np.hypot(xs[None, :] - ax, ys[:, None] - ay)


def sensing_quality_grid(scenario: Scenario, agent: int) -> np.ndarray:
    cfg = scenario.config
    d = distance_grid(scenario, agent)
    vis = scenario.visibility[agent]
    return cfg.sensing_base_quality * np.exp(-d / cfg.sensing_decay) * vis


# -- export / import -------------------------------------------------------

def _rle_row(row) -> str:
    out = []
    prev, count = None, 0
    for v in row:
        v = float(v)
        if v == prev:
            count += 1
            continue
        if prev is not None:
            out.append(f"{prev!r}*{count}")
        prev, count = v, 1
    if prev is not None:
        out.append(f"{prev!r}*{count}")
    return " ".join(out)


def _unrle_row(text: str) -> list[float]:
    vals: list[float] = []
    for tok in text.split():
        v, n = tok.rsplit("*", 1)
        vals.extend([float(v)] * int(n))
    return vals


def _encode_grid(grid: np.ndarray) -> list[str]:
    return [_rle_row(row) for row in grid]


def _decode_grid(rows: list[str], dtype) -> np.ndarray:
    return np.asarray([_unrle_row(r) for r in rows], dtype=dtype)


def scenario_to_dict(scenario: Scenario) -> dict:
    cfg = dataclasses.asdict(scenario.config)
    return {
        "schema": SCENARIO_SCHEMA,
        "config": cfg,
        "agents": {
            "xy": scenario.agent_xy.tolist(),
            "cav_velocity": scenario.cav_velocity.tolist(),
        },
        "objects": [
            {"cells": o.cells.tolist(), "center": list(o.center), "yaw": o.yaw}
            for o in scenario.objects
        ],
        "grids": {
            "object_id": _encode_grid(scenario.object_id),
            "visibility": [_encode_grid(g) for g in scenario.visibility],
            "quality": [_encode_grid(g) for g in scenario.quality],
            "clutter": [_encode_grid(g) for g in scenario.clutter],
        },
    }


def scenario_from_dict(data: dict) -> Scenario:
    if data.get("schema") != SCENARIO_SCHEMA:
        raise ScenarioError(f"unsupported scenario schema {data.get('schema')!r}")
    cfg = dict(data["config"])
    for key in ("object_cells", "rsu_xy", "speed_range"):
        cfg[key] = tuple(cfg[key])
    config = ScenarioConfig(**cfg)
    g = data["grids"]
    object_id = _decode_grid(g["object_id"], np.int64)
    objects = [
        SceneObject(
            cells=np.asarray(o["cells"], dtype=np.int64).reshape(-1, 2),
            center=tuple(o["center"]),
            yaw=float(o["yaw"]),
        )
        for o in data["objects"]
    ]
    return Scenario(
        config=config,
        objects=objects,
        agent_xy=np.asarray(data["agents"]["xy"], dtype=float).reshape(-1, 2),
        cav_velocity=np.asarray(data["agents"]["cav_velocity"], dtype=float).reshape(-1, 2),
        occupancy=(object_id >= 0).astype(np.uint8),
        object_id=object_id,
        visibility=np.stack([_decode_grid(x, np.uint8) for x in g["visibility"]]),
        quality=np.stack([_decode_grid(x, float) for x in g["quality"]]),
        clutter=np.stack([_decode_grid(x, float) for x in g["clutter"]]),
    )


def save_scenario(scenario: Scenario, path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(scenario), indent=1))


def load_scenario(path) -> Scenario:
    return scenario_from_dict(json.loads(Path(path).read_text()))


def scenario_from_grid(
    object_id: np.ndarray,
    agent_xy,
    config: ScenarioConfig | None = None,
    clutter: np.ndarray | None = None,
) -> Scenario:
    """Wrap a hand-built object-id grid into a full :class:`Scenario`.

    Handy for fixtures: visibility and quality are derived exactly as for
    generated scenarios; clutter defaults to zero.
    """
    object_id = np.asarray(object_id, dtype=np.int64)
    h, w = object_id.shape
    agent_xy = np.asarray(agent_xy, dtype=float).reshape(-1, 2)
    if config is None:
        config = ScenarioConfig(grid_h=h, grid_w=w, n_cavs=len(agent_xy) - 1,
                                n_objects=0, clutter_max=0.0)
    else:
        config = dataclasses.replace(config, grid_h=h, grid_w=w,
                                     n_cavs=len(agent_xy) - 1)
    objects = []
    cs = config.cell_size
    for j in np.unique(object_id[object_id >= 0]):
        cells = np.argwhere(object_id == j)
        cy = (cells[:, 0].mean() + 0.5) * cs
        cx = (cells[:, 1].mean() + 0.5) * cs
        objects.append(SceneObject(cells=cells, center=(float(cx), float(cy)), yaw=0.0))
    n_agents = len(agent_xy)
    scenario = Scenario(
        config=config,
        objects=objects,
        agent_xy=agent_xy,
        cav_velocity=np.zeros((n_agents - 1, 2)),
        occupancy=(object_id >= 0).astype(np.uint8),
        object_id=object_id,
        visibility=np.zeros((n_agents, h, w), dtype=np.uint8),
        quality=np.zeros((n_agents, h, w)),
        clutter=np.zeros((n_agents, h, w)) if clutter is None else np.asarray(clutter, float),
    )
    for a in range(n_agents):
        scenario.visibility[a] = visibility_grid(scenario, a)
        scenario.quality[a] = sensing_quality_grid(scenario, a)
    return scenario
