"""Car-following world: a lead car, the agent's passenger car and roadside objects.

Kinematics are one-dimensional (positions along a straight road). Alleys
alternate between the left and right side of the road and only matter for
rendering. Every function here is pure with respect to its inputs: stepping
returns a new :class:`EpisodeState` and leaves the old one untouched.
"""
from __future__ import annotations

import csv
import dataclasses
import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, parse_key_values, coerce_dataclass


class Action(enum.IntEnum):
    INCREASE = 0
    MAINTAIN = 1
    DECREASE = 2


SPEED_SIGN = np.array([1.0, 0.0, -1.0])


@dataclass(frozen=True)
class WorldConfig:
    """Geometry, dynamics and rendering parameters (meters, seconds, m/s)."""

    road_length: float = 1000.0
    alley_count: int = 80
    alley_spacing: float = 12.0
    alley_start: float = 40.0
    alley_occupancy: float = 0.4
    target_ratio: float = 0.25
    visual_radius: float = 10.0
    min_gap: float = 5.0
    max_gap: float = 60.0
    sim_dt: float = 0.1
    speed_delta: float = 0.5
    v_max: float = 20.0
    initial_speed: float = 10.0
    # lead speed: v <- clip(v + reversion * (mean - v) + noise * N(0, 1), 0, v_max)
    lead_mean_speed: float = 10.0
    lead_reversion: float = 0.05
    lead_noise: float = 0.2
    start_gap: float = 30.0
    frame_size: int = 64
    view_behind: float = 16.0
    view_ahead: float = 80.0
    vehicle_length: float = 6.0
    lum_background: float = 0.0
    lum_road: float = 0.25
    lum_nontarget: float = 0.5
    lum_target: float = 0.75
    lum_vehicle: float = 1.0

    def __post_init__(self):
        if not 0 < self.min_gap < self.max_gap:
            raise ConfigError("need 0 < min_gap < max_gap")
        if not 0 <= self.alley_occupancy <= 1:
            raise ConfigError("alley_occupancy must lie in [0, 1]")
        if not 0 <= self.target_ratio <= 1:
            raise ConfigError("target_ratio must lie in [0, 1]")
        if self.frame_size < 16:
            raise ConfigError("frame_size must be at least 16")
        if self.sim_dt <= 0:
            raise ConfigError("sim_dt must be positive")
        if not self.min_gap < self.start_gap < self.max_gap:
            raise ConfigError("start_gap must lie strictly inside the gap bounds")
        if self.alley_count < 0 or self.alley_spacing <= 0:
            raise ConfigError("alley_count must be >= 0 and alley_spacing > 0")
        lums = (self.lum_background, self.lum_road, self.lum_nontarget,
                self.lum_target, self.lum_vehicle)
        if len(set(lums)) != len(lums):
            raise ConfigError("luminance levels must be distinct")

    @property
    def n_occupied(self):
        return int(round(self.alley_occupancy * self.alley_count))

    @property
    def meters_per_row(self):
        return (self.view_behind + self.view_ahead) / self.frame_size

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def load_world_config(path, base=None):
    """Read a ``key = value`` file into a :class:`WorldConfig`."""
    text = Path(path).read_text()
    sections = parse_key_values(text, source=str(path))
    values = sections.get("env", {})
    values.update(sections.get("", {}))
    return coerce_dataclass(base or WorldConfig(), values, source=str(path))


@dataclass(frozen=True)
class VehicleState:
    position: float
    speed: float


@dataclass(frozen=True, eq=False)
class ObjectLabels:
    """True category and labeler-assigned label per object (True = target)."""

    true_category: np.ndarray
    assigned: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.true_category, dtype=bool)
        a = np.asarray(self.assigned, dtype=bool)
        if t.shape != a.shape or t.ndim != 1:
            raise ConfigError("true_category and assigned must be 1-D and equal length")
        object.__setattr__(self, "true_category", t)
        object.__setattr__(self, "assigned", a)

    def __len__(self):
        return len(self.true_category)


@dataclass(frozen=True, eq=False)
class World:
    """Static object layout of one episode; arrays are indexed by object."""

    object_id: np.ndarray
    alley_index: np.ndarray
    position: np.ndarray
    side: np.ndarray              # 0 = left, 1 = right
    true_category: np.ndarray     # True = target
    assigned: np.ndarray
    empty_alley_position: np.ndarray

    def __len__(self):
        return len(self.position)

    def luminance(self, config):
        return np.where(self.assigned, config.lum_target, config.lum_nontarget)

    def instances(self, config):
        lum = self.luminance(config)
        return [
            ObjectInstance(int(self.object_id[k]), int(self.alley_index[k]),
                           float(self.position[k]),
                           "left" if self.side[k] == 0 else "right",
                           "target" if self.true_category[k] else "nontarget",
                           "target" if self.assigned[k] else "nontarget",
                           float(lum[k]))
            for k in range(len(self))
        ]


@dataclass(frozen=True)
class ObjectInstance:
    object_id: int
    alley_index: int
    position: float
    side: str
    true_category: str
    assigned_label: str
    luminance: float


@dataclass(frozen=True, eq=False)
class EpisodeState:
    config: WorldConfig
    world: World
    lead: VehicleState
    passenger: VehicleState
    step_count: int = 0
    terminal: bool = False
    truncated: bool = False
    cause: str = ""
    rng_state: dict = field(default=None, repr=False, compare=False)
    frames: tuple = field(default=(), repr=False, compare=False)

    @property
    def elapsed(self):
        return self.step_count * self.config.sim_dt

    @property
    def gap(self):
        return self.lead.position - self.passenger.position

    @property
    def done(self):
        return self.terminal or self.truncated

    @property
    def objects(self):
        return self.world.instances(self.config)


@dataclass(frozen=True)
class VisibilityEvent:
    object_id: int
    kind: str  # "WVD_a" for true targets, "WVD_b" for true nontargets


def episode_seeds(seed):
    """Independent child seeds for layout, lead-vehicle and reward streams."""
    layout, lead, reward = np.random.SeedSequence(seed).spawn(3)
    return layout, lead, reward


def layout_world(config, labels=None, seed=0):
    rng = np.random.default_rng(episode_seeds(seed)[0])
    n_occ = config.n_occupied
    if labels is None:
        n_targets = int(round(config.target_ratio * n_occ))
        cats = np.zeros(n_occ, dtype=bool)
        cats[:n_targets] = True
        rng.shuffle(cats)
        labels = ObjectLabels(cats, cats.copy())
    elif len(labels) != n_occ:
        raise ConfigError(
            f"got {len(labels)} object labels but the world has {n_occ} "
            f"occupied alleys")
    occupied = np.sort(rng.choice(config.alley_count, size=n_occ, replace=False))
    order = rng.permutation(n_occ)
    alley_pos = config.alley_start + config.alley_spacing * np.arange(config.alley_count)
    empty = np.setdiff1d(np.arange(config.alley_count), occupied)
    return World(
        object_id=order,
        alley_index=occupied,
        position=alley_pos[occupied],
        side=occupied % 2,
        true_category=labels.true_category[order],
        assigned=labels.assigned[order],
        empty_alley_position=alley_pos[empty],
    )


def init_episode(config, labels=None, seed=0):
    """Start an episode: passenger at 0, lead ``start_gap`` ahead, both at cruise speed.

    ``labels`` gives one entry per occupied alley; with ``None`` a perfect
    labeler is simulated (assigned label = true category). The seed decides
    which alleys hold which objects.
    """
    world = layout_world(config, labels, seed)
    lead_rng = np.random.Generator(np.random.PCG64(episode_seeds(seed)[1]))
    state = EpisodeState(
        config=config,
        world=world,
        lead=VehicleState(config.start_gap, config.initial_speed),
        passenger=VehicleState(0.0, config.initial_speed),
        rng_state=lead_rng.bit_generator.state,
    )
    frame = render_topdown(state)
    return dataclasses.replace(state, frames=(frame, frame, frame))


def _lead_update(config, lead, noise):
    v = lead.speed + config.lead_reversion * (config.lead_mean_speed - lead.speed) \
        + config.lead_noise * noise
    v = min(max(v, 0.0), config.v_max)
    return VehicleState(lead.position + v * config.sim_dt, v)


def lead_step(state):
    """Advance only the lead vehicle by one time step."""
    if state.done:
        raise RuntimeError("cannot advance a finished episode")
    bitgen = np.random.PCG64()
    bitgen.state = state.rng_state
    noise = np.random.Generator(bitgen).standard_normal()
    return dataclasses.replace(state, lead=_lead_update(state.config, state.lead, noise),
                               rng_state=bitgen.state)


def visible_objects(state):
    """Boolean mask of objects within the visual radius of the passenger."""
    return np.abs(state.world.position - state.passenger.position) \
        <= state.config.visual_radius


def visibility_events(state):
    mask = visible_objects(state)
    world = state.world
    return [VisibilityEvent(int(world.object_id[k]),
                            "WVD_a" if world.true_category[k] else "WVD_b")
            for k in np.flatnonzero(mask)]


def step(state, action):
    """Apply ``action`` for one time step.

    Returns ``(new_state, terminal, events)``. ``terminal`` is True when the
    gap left the open interval (min_gap, max_gap); reaching the end of the road
    sets ``new_state.truncated`` instead.
    """
    if state.done:
        raise RuntimeError("cannot step a finished episode; call init_episode")
    cfg = state.config
    action = Action(action)
    v = state.passenger.speed + SPEED_SIGN[action] * cfg.speed_delta
    v = min(max(v, 0.0), cfg.v_max)
    moved = lead_step(state)
    passenger = VehicleState(state.passenger.position + v * cfg.sim_dt, v)
    gap = moved.lead.position - passenger.position
    terminal = not (cfg.min_gap < gap < cfg.max_gap)
    cause = ""
    if terminal:
        cause = "too_close" if gap <= cfg.min_gap else "too_far"
    truncated = not terminal and passenger.position >= cfg.road_length
    if truncated:
        cause = "road_end"
    new = dataclasses.replace(moved, passenger=passenger,
                              step_count=state.step_count + 1,
                              terminal=terminal, truncated=truncated, cause=cause)
    frame = render_topdown(new)
    new = dataclasses.replace(new, frames=(*state.frames[1:], frame))
    return new, terminal, visibility_events(new)


def _row_coverage(config, lo, hi):
    """Fraction of each frame row covered by the road interval [lo, hi] (relative meters)."""
    m = config.meters_per_row
    n = config.frame_size
    top = config.view_ahead - m * np.arange(n)          # upper edge of each row
    bottom = top - m
    overlap = np.clip(np.minimum(top, hi) - np.maximum(bottom, lo), 0.0, None)
    return overlap / m


def _columns(config):
    n = config.frame_size
    road = slice(int(round(0.35 * n)), int(round(0.65 * n)))
    car = slice(int(round(0.43 * n)), int(round(0.57 * n)))
    disc_x = (0.15 * n, 0.85 * n)
    return road, car, disc_x


def render_topdown(state):
    """Passenger-centred top-down grayscale frame, far-ahead at the top.

    Vehicles are white blocks (their longitudinal edges are area-weighted so
    sub-pixel motion stays visible); objects in range are hard-edged discs
    whose gray level encodes the assigned label only.
    """
    cfg = state.config
    n = cfg.frame_size
    m = cfg.meters_per_row
    frame = np.full((n, n), cfg.lum_background, dtype=np.float32)
    road, car, disc_x = _columns(cfg)
    frame[:, road] = cfg.lum_road

    world = state.world
    rel = world.position - state.passenger.position
    in_frame = (rel > -cfg.view_behind - 5 * m) & (rel < cfg.view_ahead + 5 * m)
    if np.any(in_frame):
        radius = n / 16.0
        rows = np.arange(n) + 0.5
        cols = np.arange(n) + 0.5
        lum = world.luminance(cfg)
        for k in np.flatnonzero(in_frame):
            cy = (cfg.view_ahead - rel[k]) / m
            cx = disc_x[world.side[k]]
            r0 = max(int(np.floor(cy - radius)), 0)
            r1 = min(int(np.ceil(cy + radius)) + 1, n)
            if r0 >= r1:
                continue
            c0 = max(int(np.floor(cx - radius)), 0)
            c1 = min(int(np.ceil(cx + radius)) + 1, n)
            dy = rows[r0:r1, None] - cy
            dx = cols[None, c0:c1] - cx
            inside = dy * dy + dx * dx <= radius * radius
            patch = frame[r0:r1, c0:c1]
            patch[inside] = lum[k]

    half = cfg.vehicle_length / 2
    for rel_pos in (0.0, state.gap):
        cover = _row_coverage(cfg, rel_pos - half, rel_pos + half)
        hit = cover > 0
        if np.any(hit):
            frame[hit, car] = (cfg.lum_road * (1 - cover[hit])
                               + cfg.lum_vehicle * cover[hit])[:, None]
    frame.setflags(write=False)
    return frame


def observe(state):
    """Stack of the three most recent frames, oldest first, shape (3, n, n)."""
    return np.stack(state.frames)


def trace_row(state, action, events):
    kinds = {e.kind for e in events}
    return {
        "step": state.step_count,
        "d": round(state.gap, 6),
        "lead_speed": round(state.lead.speed, 6),
        "passenger_speed": round(state.passenger.speed, 6),
        "action": Action(action).name,
        "terminal": int(state.terminal),
        "wvd_a": int("WVD_a" in kinds),
        "wvd_b": int("WVD_b" in kinds),
    }


def write_trace_csv(rows, path):
    fields = ["step", "d", "lead_speed", "passenger_speed", "action",
              "terminal", "wvd_a", "wvd_b"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def write_pgm(frame, path):
    """Save a frame as a binary portable graymap (P5, maxval 255)."""
    frame = np.asarray(frame)
    data = np.clip(np.round(frame * 255), 0, 255).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())


def read_pgm(path):
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM file")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    data = np.frombuffer(parts[4][:w * h], dtype=np.uint8).reshape(h, w)
    return data.astype(np.float32) / maxval
