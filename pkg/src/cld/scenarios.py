"""Procedural road scenarios, the scripted reference driver, and training windows.

Three road layouts are supported: a straight two-lane road, a sinusoidally
curved two-lane road, and a four-way intersection of two such roads. The
reference driver follows its lane with pure pursuit and picks the largest
acceleration whose short look-ahead stays clear of lead and crossing
traffic. Its rollouts are the "ground truth" demonstrations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .core import (
    A_MAX,
    DT,
    W_MAX,
    AgentState,
    ContextBatch,
    HistorySpec,
    NeighborProfile,
    Scenario,
    SemanticMap,
    TrajectoryDataset,
    context_arrays,
    polyline_arclength,
    polyline_states,
    to_ego_frame,
)
from .errors import InvalidInputError

SPECS = ("straight-road", "curved-road", "four-way-intersection")
COLLISION_THRESHOLD = 2.0


@dataclass(frozen=True)
class ScenarioParams:
    """Knobs of the procedural generator.

    ``crossing_spread_s`` bounds how far (in seconds) a crossing vehicle's
    arrival at the conflict point is offset from the ego's nominal arrival.
    ``ego_offset`` bounds the ego's lateral position in its lane; the position
    drifts between random knots spaced ``drift_spacing`` metres apart.
    """

    lane_width: tuple = (3.4, 4.0)
    ego_speed: tuple = (6.5, 9.5)
    ego_offset: float = 0.5
    drift_spacing: tuple = (15.0, 35.0)
    lead_prob: float = 0.5
    lead_brake_prob: float = 0.5
    oncoming: tuple = (0, 2)
    crossers: tuple = (1, 2)
    crossing_spread_s: float = 4.0
    curve_amplitude: tuple = (6.0, 12.0)
    curve_wavelength: tuple = (140.0, 220.0)
    resolution: float = 0.5
    duration: float = 20.0


PRESETS = {
    "nominal": ScenarioParams(),
    # narrowed roads, more and better-timed conflicts
    "stress": ScenarioParams(lane_width=(2.2, 2.5), lead_prob=0.7, lead_brake_prob=0.8,
                             crossers=(1, 2), crossing_spread_s=1.5,
                             curve_amplitude=(8.0, 14.0), curve_wavelength=(120.0, 180.0)),
}


@dataclass(frozen=True)
class Horizon:
    """Step bookkeeping shared by demonstrations and closed-loop runs."""

    history: int = 10
    plan: int = 20
    execute: int = 5
    duration_s: float = 20.0
    dt: float = DT

    @property
    def start(self) -> int:
        """First model-controlled step (the warm-up fills the history)."""
        return self.history - 1

    @property
    def control_steps(self) -> int:
        return int(round(self.duration_s / self.dt))

    @property
    def total_steps(self) -> int:
        """Steps covered by demonstrations: warm-up, control window, plan look-ahead."""
        return self.start + self.control_steps + self.plan


# ---- geometry ----------------------------------------------------------------

def resample_polyline(points: np.ndarray, spacing: float = 0.5) -> np.ndarray:
    cum = polyline_arclength(points)
    s = np.arange(0.0, cum[-1] + 1e-9, spacing)
    return np.stack([np.interp(s, cum, points[:, 0]), np.interp(s, cum, points[:, 1])], axis=1)


def offset_polyline(path: np.ndarray, offset: float) -> np.ndarray:
    """Shift a dense polyline sideways; positive offset is to the left of travel (scalar or (N, 1))."""
    tang = np.gradient(path, axis=0)
    tang /= np.linalg.norm(tang, axis=1, keepdims=True)
    normal = np.stack([-tang[:, 1], tang[:, 0]], axis=1)
    return path + offset * normal


def rasterize_roads(centerlines, half_widths, bounds, resolution) -> SemanticMap:
    """Mark cells whose centre lies within each road's half width; bounds is (x0, x1, y0, y1)."""
    x0, x1, y0, y1 = bounds
    w = int(math.ceil((x1 - x0) / resolution))
    h = int(math.ceil((y1 - y0) / resolution))
    grid = np.zeros((h, w), dtype=np.bool_)
    for line, hw in zip(centerlines, half_widths):
        for a, b in zip(line[:-1], line[1:]):
            lo = np.minimum(a, b) - hw
            hi = np.maximum(a, b) + hw
            c0 = max(int((lo[0] - x0) / resolution), 0)
            c1 = min(int((hi[0] - x0) / resolution) + 1, w)
            r0 = max(int((lo[1] - y0) / resolution), 0)
            r1 = min(int((hi[1] - y0) / resolution) + 1, h)
            if c0 >= c1 or r0 >= r1:
                continue
            cx = x0 + (np.arange(c0, c1) + 0.5) * resolution
            cy = y0 + (np.arange(r0, r1) + 0.5) * resolution
            px, py = np.meshgrid(cx, cy)
            d = b - a
            L2 = max(float(d @ d), 1e-12)
            u = np.clip(((px - a[0]) * d[0] + (py - a[1]) * d[1]) / L2, 0.0, 1.0)
            dist2 = (px - a[0] - u * d[0]) ** 2 + (py - a[1] - u * d[1]) ** 2
            grid[r0:r1, c0:c1] |= dist2 <= hw * hw
    return SemanticMap(grid, x0, y0, resolution)


# ---- reference driver --------------------------------------------------------

@dataclass
class ReferenceDriver:
    """Stateless lane follower: action depends only on (state, step index).

    ``tracks`` holds neighbour states for every step the driver may be asked
    about; ``conflict`` flags which neighbours the speed filter must respect.
    """

    route: np.ndarray
    target_speed: float
    tracks: np.ndarray
    conflict: np.ndarray
    safe_distance: float = 3.0
    horizon_s: float = 4.0
    dt: float = DT
    _cum: np.ndarray = field(init=False, repr=False)

    CANDIDATES = np.array([1.5, 1.0, 0.5, 0.0, -0.5, -1.0, -1.5, -2.0, -2.5, -3.0, -3.5, -4.0])

    def __post_init__(self):
        self._cum = polyline_arclength(self.route)

    def _arc_position(self, x, y):
        d2 = (self.route[:, 0] - x) ** 2 + (self.route[:, 1] - y) ** 2
        return float(self._cum[int(np.argmin(d2))])

    def _point_at(self, s):
        return np.stack([np.interp(s, self._cum, self.route[:, 0]),
                         np.interp(s, self._cum, self.route[:, 1])], axis=-1)

    def steer(self, state, s_now):
        x, y, v, th = state
        look = min(max(3.0 + 0.5 * v, 4.0), 10.0)
        tx, ty = self._point_at(s_now + look)
        alpha = math.atan2(ty - y, tx - x) - th
        alpha = math.atan2(math.sin(alpha), math.cos(alpha))
        kappa = 2.0 * math.sin(alpha) / look
        return float(np.clip(max(v, 1.0) * kappa, -W_MAX, W_MAX))

    def accel(self, state, s_now, step):
        v = state[2]
        a_cruise = float(np.clip(0.8 * (self.target_speed - v), -2.0, 1.5))
        cands = np.concatenate([[a_cruise], self.CANDIDATES[self.CANDIDATES < a_cruise]])
        idx = np.nonzero(self.conflict)[0]
        if len(idx) == 0:
            return a_cruise
        n = int(round(self.horizon_s / 0.2))
        tt = np.arange(1, n + 1) * 0.2
        # speed under constant accel with a floor at zero, integrated exactly
        a = cands[:, None]
        t_stop = np.where(a < 0, v / np.maximum(-a, 1e-9), np.inf)
        te = np.minimum(tt[None], t_stop)
        ds = v * te + 0.5 * a * te * te
        ego = self._point_at(s_now + ds)  # (C, n, 2)
        steps = np.minimum(step + np.round(tt / self.dt).astype(int), self.tracks.shape[1] - 1)
        nb = self.tracks[idx][:, steps, :2]  # (J, n, 2)
        d = np.sqrt(((ego[:, None] - nb[None]) ** 2).sum(-1)).min(axis=(1, 2))
        ok = np.nonzero(d >= self.safe_distance)[0]
        return float(cands[ok[0]]) if len(ok) else -A_MAX

    def action(self, state, step):
        s_now = self._arc_position(state[0], state[1])
        return np.array([self.accel(state, s_now, step), self.steer(state, s_now)])

    def drive(self, state, start_step, n_steps):
        """Roll the driver forward; returns states (n+1, 4) and actions (n, 2)."""
        states = np.empty((n_steps + 1, 4))
        actions = np.empty((n_steps, 2))
        states[0] = state
        for i in range(n_steps):
            actions[i] = self.action(states[i], start_step + i)
            states[i + 1] = kernels.rollout_batch(states[i][None], actions[i][None, None], self.dt)[0, 1]
        return states, actions


def reference_driver(scn: Scenario, horizon: Horizon, extra_steps: int = 60) -> ReferenceDriver:
    tracks = scn.neighbor_tracks(horizon.total_steps + extra_steps, horizon.dt)
    conflict = np.array([getattr(p, "kind", "") in ("lead", "crossing") for p in scn.neighbor_policies],
                        dtype=bool)
    return ReferenceDriver(scn.ego_route, scn.ego_target_speed, tracks, conflict, dt=horizon.dt)


@dataclass(frozen=True, eq=False)
class ScriptedNeighbor(NeighborProfile):
    kind: str = "other"


@dataclass(frozen=True, eq=False)
class Demonstration:
    states: np.ndarray  # (total_steps+1, 4)
    actions: np.ndarray  # (total_steps, 2)


# ---- layouts ----------------------------------------------------------------

def _lane(center, offset):
    return offset_polyline(center, offset)


def _straight_layout(rng, p: ScenarioParams):
    center = resample_polyline(np.array([[-60.0, 0.0], [340.0, 0.0]]), 1.0)
    return center, [center], None


def _curved_layout(rng, p: ScenarioParams):
    amp = rng.uniform(*p.curve_amplitude)
    lam = rng.uniform(*p.curve_wavelength)
    phase = rng.uniform(0, 2 * math.pi)
    xs = np.arange(-60.0, 340.0 + 1e-9, 1.0)
    center = np.stack([xs, amp * np.sin(2 * math.pi * xs / lam + phase)], axis=1)
    return resample_polyline(center, 1.0), [resample_polyline(center, 1.0)], None


def _intersection_layout(rng, p: ScenarioParams):
    approach = rng.uniform(40.0, 70.0)
    center = resample_polyline(np.array([[-approach - 60.0, 0.0], [340.0 - approach, 0.0]]), 1.0)
    cross = resample_polyline(np.array([[0.0, -160.0], [0.0, 160.0]]), 1.0)
    return center, [center, cross], approach


def _drift_offsets(rng, n: int, p: ScenarioParams) -> np.ndarray:
    """Smooth lateral offset per 1 m route sample: random knots, linear blend, moving average."""
    knots = [0.0]
    while knots[-1] < n:
        knots.append(knots[-1] + rng.uniform(*p.drift_spacing))
    vals = rng.uniform(-p.ego_offset, p.ego_offset, len(knots))
    off = np.interp(np.arange(n, dtype=np.float64), knots, vals)
    k = 15
    padded = np.concatenate([np.full(k // 2, off[0]), off, np.full(k // 2, off[-1])])
    return np.convolve(padded, np.ones(k) / k, mode="valid")


def _speed_knots(base, rng, p: ScenarioParams, brake: bool, t_total):
    if not brake:
        return np.array([[0.0, base]])
    tb = rng.uniform(2.0, 0.6 * t_total)
    low = rng.uniform(0.0, 0.4 * base)
    decel = rng.uniform(2.0, 3.0)
    t1 = tb + (base - low) / decel
    t2 = t1 + rng.uniform(1.5, 4.0)
    t3 = t2 + (base - low) / 1.5
    return np.array([[0.0, base], [tb, base], [t1, low], [t2, low], [t3, base]])


def _build_scenario(spec: str, rng: np.random.Generator, p: ScenarioParams, horizon: Horizon, name: str):
    w = rng.uniform(*p.lane_width)
    if spec == "straight-road":
        center, roads, approach = _straight_layout(rng, p)
    elif spec == "curved-road":
        center, roads, approach = _curved_layout(rng, p)
    elif spec == "four-way-intersection":
        center, roads, approach = _intersection_layout(rng, p)
    else:
        raise InvalidInputError(f"unknown scenario spec {spec!r}; expected one of {SPECS}")

    t_total = (horizon.total_steps + 80) * horizon.dt
    v_target = rng.uniform(*p.ego_speed)
    drift = _drift_offsets(rng, len(center), p)
    offset = float(drift[0])
    ego_lane = _lane(center, -w / 2)
    route = _lane(center, -w / 2 + drift[:, None])
    s_cum = polyline_arclength(route)
    s0 = 60.0  # ego starts 60 m into its route
    ego0 = polyline_states(route, np.array([s0]), np.array([v_target * rng.uniform(0.85, 1.0)]))[0]

    neighbors = []
    if rng.random() < p.lead_prob:
        gap = rng.uniform(15.0, 35.0)
        base = v_target * rng.uniform(0.7, 0.95)
        knots = _speed_knots(base, rng, p, rng.random() < p.lead_brake_prob, t_total)
        neighbors.append(ScriptedNeighbor(ego_lane, knots, s0 + gap, kind="lead"))
    opposite = _lane(center, w / 2)[::-1]
    s_opp = polyline_arclength(opposite)
    for _ in range(rng.integers(p.oncoming[0], p.oncoming[1] + 1)):
        ahead = rng.uniform(30.0, 200.0)
        start = s_opp[-1] - (s0 + ahead)
        if start < 5.0:
            continue
        neighbors.append(ScriptedNeighbor(opposite, np.array([[0.0, rng.uniform(6.0, 10.0)]]), start,
                                          kind="oncoming"))
    if approach is not None:
        cross = roads[1]
        t_arrive = approach / max(ego0[2], 1.0)
        for _ in range(rng.integers(p.crossers[0], p.crossers[1] + 1)):
            southbound = rng.random() < 0.5
            lane = _lane(cross[::-1] if southbound else cross, -w / 2)
            speed = rng.uniform(6.0, 9.0)
            t_meet = max(horizon.start * horizon.dt + 1.0,
                         t_arrive + rng.uniform(-p.crossing_spread_s, p.crossing_spread_s))
            s_lane = polyline_arclength(lane)
            # arc length along the crossing lane where it meets the ego lane (y = -w/2)
            meet = float(np.interp(-w / 2, lane[:, 1] if not southbound else lane[::-1, 1],
                                   s_lane if not southbound else s_lane[::-1]))
            start = meet - speed * t_meet
            if start < 5.0:
                continue
            neighbors.append(ScriptedNeighbor(lane, np.array([[0.0, speed]]), start, kind="crossing"))

    all_xy = [route] + [n.path for n in neighbors] + roads
    pts = np.concatenate(all_xy)
    lo = np.maximum(pts.min(axis=0) - 10.0, [-400.0, -400.0])
    hi = np.minimum(pts.max(axis=0) + 10.0, [500.0, 400.0])
    smap = rasterize_roads(roads, [w] * len(roads), (lo[0], hi[0], lo[1], hi[1]), p.resolution)

    agents = [AgentState.from_array(ego0)]
    kept = []
    for nb in neighbors:
        st = nb.track(0, horizon.dt)[0]
        if smap.drivable(st[0], st[1]):
            agents.append(AgentState.from_array(st))
            kept.append(nb)
    return Scenario(smap, agents, kept, p.duration, route, float(v_target), float(offset), name)


def demonstration(scn: Scenario, horizon: Horizon = Horizon()) -> Demonstration:
    drv = reference_driver(scn, horizon)
    states, actions = drv.drive(scn.agents[0].as_array(), 0, horizon.total_steps)
    return Demonstration(states, actions)


def demo_is_clean(scn: Scenario, demo: Demonstration, horizon: Horizon) -> bool:
    n = demo.states.shape[0] - 1
    tracks = scn.neighbor_tracks(n, horizon.dt)
    m = scn.map
    if kernels.offroad_batch(m.grid, m.origin_x, m.origin_y, m.resolution, demo.states[None])[0]:
        return False
    if len(tracks):
        dmin = kernels.min_distance_batch(demo.states[None, :, :2], tracks[None, :, :, :2],
                                          np.ones((1, len(tracks)), dtype=bool))[0]
        if dmin < COLLISION_THRESHOLD:
            return False
    return True


def generate_scenarios(spec: str, count: int, seed: int, params: ScenarioParams | str = "nominal",
                       horizon: Horizon = Horizon(), max_tries: int = 50):
    """Seeded scenarios plus their clean reference-driver demonstrations.

    ``spec`` is one of :data:`SPECS` or ``"mixed"`` (cycles through all three).
    Scenario i draws from its own stream seeded by (seed, i), so a prefix of a
    larger request reproduces a smaller one.
    """
    if isinstance(params, str):
        if params not in PRESETS:
            raise InvalidInputError(f"unknown preset {params!r}; expected one of {sorted(PRESETS)}")
        params = PRESETS[params]
    if spec != "mixed" and spec not in SPECS:
        raise InvalidInputError(f"unknown scenario spec {spec!r}; expected one of {SPECS + ('mixed',)}")
    if count < 0:
        raise InvalidInputError("count must be non-negative")
    scenarios, demos = [], []
    for i in range(count):
        kind = SPECS[i % 3] if spec == "mixed" else spec
        rng = np.random.default_rng([seed, i])
        for _ in range(max_tries):
            scn = _build_scenario(kind, rng, params, horizon, f"{kind}-{seed}-{i}")
            demo = demonstration(scn, horizon)
            if demo_is_clean(scn, demo, horizon):
                break
        else:
            raise InvalidInputError(f"could not build a clean {kind} scenario for index {i}")
        scenarios.append(scn)
        demos.append(demo)
    return scenarios, demos


# ---- training windows -----------------------------------------------------------

def world_states(scn: Scenario, ego_states: np.ndarray, dt: float = DT) -> np.ndarray:
    """(1+J, n, 4) ego followed by neighbour tracks over the same n steps."""
    n = ego_states.shape[0]
    tracks = scn.neighbor_tracks(n - 1, dt)
    return np.concatenate([ego_states[None], tracks], axis=0)


def build_dataset(scenarios, demos, horizon: Horizon = Horizon(), hspec: HistorySpec | None = None,
                  stride: int = 10) -> TrajectoryDataset:
    """Slice demonstrations into (context, next-T trajectory) windows."""
    hspec = hspec or HistorySpec(steps=horizon.history)
    crops, hists, masks, egos, states, actions, ids = [], [], [], [], [], [], []
    T = horizon.plan
    for k, (scn, demo) in enumerate(zip(scenarios, demos)):
        world = world_states(scn, demo.states, horizon.dt)
        last = demo.states.shape[0] - 1 - T
        for t in range(horizon.start, last + 1, stride):
            crop, hist, mask = context_arrays(world, scn.map, t, hspec)
            ego = demo.states[t]
            crops.append(crop)
            hists.append(hist)
            masks.append(mask)
            egos.append(ego)
            states.append(to_ego_frame(demo.states[t:t + T + 1], np.array([ego[0], ego[1], ego[3]])))
            actions.append(demo.actions[t:t + T])
            ids.append(k)
    if not states:
        raise InvalidInputError("no training windows: empty scenario list or demonstrations too short")
    ctx = ContextBatch(np.stack(crops), np.stack(hists), np.stack(masks), np.stack(egos))
    return TrajectoryDataset(ctx, np.stack(states), np.stack(actions), np.array(ids))
