"""Closed-loop plan / execute / re-plan harness.

The reference driver fills the first H-1 steps so a full history exists,
then the planner takes over for ``control_steps`` steps, re-planning every
``execute`` steps. Neighbours replay their open-loop scripts. Scenarios in a
batch advance in lockstep so the planner sees one stacked context batch per
re-plan; every scenario draws from its own random stream, so batching does
not change results.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .core import ContextBatch, HistorySpec, Scenario, Trajectory, context_arrays
from .diffusion import DenoiserModel, DiffusionSchedule, sample_batch
from .errors import InsufficientHistoryError, InvalidInputError
from .scenarios import Horizon, reference_driver
from .vae import VaeModel, decode_actions_batch


@dataclass
class ReplanRecord:
    step: int  # absolute step index at which the plan was made
    plan: np.ndarray  # (T, 2) planned actions
    executed: np.ndarray  # (l, 2) executed prefix
    z0: np.ndarray | None = None


@dataclass
class ClosedLoopRun:
    scenario_index: int
    scenario_name: str
    start_step: int
    trajectory: Trajectory  # model-controlled part: control_steps + 1 states
    warmup_states: np.ndarray  # (start_step + 1, 4), last row == trajectory.states[0]
    neighbor_tracks: np.ndarray  # (J, control_steps + 1, 4) aligned with trajectory
    replans: list = field(default_factory=list)
    contexts: ContextBatch | None = None
    collided: bool = False
    went_offroad: bool = False

    @property
    def n_replans(self) -> int:
        return len(self.replans)

    def failed(self, task: str) -> bool:
        if task == "no-collision":
            return self.collided
        if task == "no-offroad":
            return self.went_offroad
        if task == "any":
            return self.collided or self.went_offroad
        raise InvalidInputError(f"unknown task {task!r}")


@dataclass
class PlanJob:
    scenario_index: int
    step: int
    rng: np.random.Generator | None = None


class ModelPlanner:
    """Sample a latent with the denoiser, decode it into a T-step action plan."""

    def __init__(self, vae: VaeModel, dm: DenoiserModel, sched: DiffusionSchedule):
        self.vae, self.dm, self.sched = vae, dm, sched

    def plan(self, ctx: ContextBatch, jobs):
        D = self.dm.config.latent_dim
        noise = np.stack([j.rng.standard_normal((self.sched.K + 1, D)) for j in jobs])
        z0, traces = sample_batch(ctx, self.dm, self.sched, noise)
        return decode_actions_batch(z0, ctx, self.vae), {"z0": z0, "traces": traces}


class OraclePlanner:
    """The reference driver, queried as a T-step planner (harness self-check)."""

    def __init__(self, scenarios, horizon: Horizon = Horizon()):
        self.horizon = horizon
        self.drivers = [reference_driver(s, horizon) for s in scenarios]

    def plan(self, ctx: ContextBatch, jobs):
        out = []
        for j, ego in zip(jobs, ctx.ego_now):
            _, acts = self.drivers[j.scenario_index].drive(ego, j.step, self.horizon.plan)
            out.append(acts)
        return np.stack(out), {}


def scenario_rng(seed: int, scenario_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, scenario_index, 7])


def run_closed_loop(planner, scenarios, seed: int, horizon: Horizon = Horizon(),
                    hspec: HistorySpec | None = None, indices=None, keep_contexts: bool = False,
                    threshold: float = 2.0):
    """Run every scenario through the protocol; returns one ClosedLoopRun each.

    ``indices`` gives the scenario ids used for rng streams and planner lookups
    (defaults to 0..n-1).
    """
    hspec = hspec or HistorySpec(steps=horizon.history)
    if hspec.steps != horizon.history:
        raise InvalidInputError("history spec and horizon disagree on H")
    if horizon.execute < 1 or horizon.execute > horizon.plan:
        raise InvalidInputError(f"execution horizon l={horizon.execute} must lie in [1, T={horizon.plan}]")
    if horizon.control_steps % horizon.execute:
        raise InvalidInputError("control window must be a whole number of execution horizons")
    scenarios = list(scenarios)
    indices = list(range(len(scenarios))) if indices is None else list(indices)
    H, t0, n_ctl, l, T = horizon.history, horizon.start, horizon.control_steps, horizon.execute, horizon.plan
    for s in scenarios:
        if s.duration + 1e-9 < n_ctl * horizon.dt:
            raise InsufficientHistoryError(f"scenario {s.name!r} lasts {s.duration} s, shorter than the run")
    B = len(scenarios)
    if B == 0:
        return []
    rngs = [scenario_rng(seed, i) for i in indices]
    tracks = [s.neighbor_tracks(t0 + n_ctl + T, horizon.dt) for s in scenarios]
    ego = np.zeros((B, t0 + n_ctl + 1, 4))
    for b, s in enumerate(scenarios):
        drv = reference_driver(s, horizon)
        ego[b, :t0 + 1], _ = drv.drive(s.agents[0].as_array(), 0, t0)
    actions = np.zeros((B, n_ctl, 2))
    records = [[] for _ in range(B)]
    ctx_log = []
    for r in range(n_ctl // l):
        t = t0 + r * l
        crops, hists, masks = [], [], []
        for b, s in enumerate(scenarios):
            world = np.concatenate([ego[b, t - H + 1:t + 1][None], tracks[b][:, t - H + 1:t + 1]], axis=0)
            c, h, m = context_arrays(world, s.map, H - 1, hspec)
            crops.append(c)
            hists.append(h)
            masks.append(m)
        ctx = ContextBatch(np.stack(crops), np.stack(hists), np.stack(masks), ego[:, t].copy())
        jobs = [PlanJob(indices[b], t, rngs[b]) for b in range(B)]
        plans, info = planner.plan(ctx, jobs)
        states = kernels.rollout_batch(ego[:, t], np.ascontiguousarray(plans[:, :l]), horizon.dt)
        ego[:, t + 1:t + l + 1] = states[:, 1:]
        actions[:, r * l:(r + 1) * l] = plans[:, :l]
        for b in range(B):
            z0 = info["z0"][b].copy() if "z0" in info else None
            records[b].append(ReplanRecord(t, plans[b].copy(), plans[b, :l].copy(), z0))
        if keep_contexts:
            ctx_log.append(ctx)
    runs = []
    for b, s in enumerate(scenarios):
        states = ego[b, t0:]
        traj = Trajectory(states, actions[b], horizon.dt)
        nb = tracks[b][:, t0:t0 + n_ctl + 1]
        m = s.map
        off = bool(kernels.offroad_batch(m.grid, m.origin_x, m.origin_y, m.resolution, states[None])[0])
        col = False
        if len(nb):
            d = kernels.min_distance_batch(states[None, :, :2], np.ascontiguousarray(nb[None, :, :, :2]),
                                           np.ones((1, len(nb)), dtype=bool))[0]
            col = bool(d < threshold)
        run = ClosedLoopRun(indices[b], s.name, t0, traj, ego[b, :t0 + 1].copy(), nb, records[b],
                            ContextBatch.concat([c.take([b]) for c in ctx_log]) if keep_contexts else None,
                            col, off)
        runs.append(run)
    return runs


def closed_loop_run(model_stack, scenario: Scenario, sched: DiffusionSchedule, l: int = 5, seed: int = 0,
                    horizon: Horizon = Horizon(), scenario_index: int = 0) -> ClosedLoopRun:
    """Single-scenario convenience wrapper; model_stack is (vae, dm) or a planner."""
    planner = model_stack if hasattr(model_stack, "plan") else ModelPlanner(model_stack[0], model_stack[1], sched)
    if l != horizon.execute:
        horizon = Horizon(horizon.history, horizon.plan, l, horizon.duration_s, horizon.dt)
    return run_closed_loop(planner, [scenario], seed, horizon, indices=[scenario_index])[0]


def run_in_batches(planner, scenarios, seed: int, horizon: Horizon = Horizon(), batch: int = 64, **kw):
    runs = []
    for i in range(0, len(scenarios), batch):
        idx = list(range(i, min(i + batch, len(scenarios))))
        runs += run_closed_loop(planner, scenarios[i:i + batch], seed, horizon, indices=idx, **kw)
    return runs
