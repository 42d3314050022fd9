"""Reward-driven fine-tuning of the denoiser.

Each reverse chain z^K -> z^0 is an episode whose only reward arrives at the
end: the decoded plan is rolled out and scored against the scene. The update
maximises an importance-weighted, PPO-clipped surrogate of the per-step
log-likelihoods. Only denoiser parameters change; the VAE stays frozen.

Training situations come from a pool of closed-loop states visited by the
current model on a training scenario suite; the pool is refreshed
periodically so it tracks the states the fine-tuned policy actually reaches.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .core import ContextBatch
from .diffcompute import Tensor, adam_update, clip, exp, mean, minimum, mul, no_grad, sub, tsum
from .diffusion import DenoiserModel, DiffusionSchedule, TraceBatch, sample_batch, trace_log_probs
from .errors import InvalidInputError
from .reward import RewardConfig, task_reward
from .scenarios import Horizon
from .simulation import ModelPlanner, run_in_batches
from .vae import VaeModel, decode_actions_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FinetuneConfig:
    n_rollouts: int = 64
    samples_per_context: int = 4
    inner_epochs: int = 2
    clip_ratio: float = 0.1
    lr: float = 3e-5
    iterations: int = 200
    reward_mode: str = "collision"
    ratio_guard: float = 0.5
    max_grad_norm: float = 1.0
    pool_refresh: int = 50
    include_last_step: bool = False
    focus_frac: float = 0.5
    focus_window_s: float = 3.0
    # stop once the training suite's closed-loop failure rate (measured at pool refreshes)
    # has fallen by this fraction of its value at iteration 0; None runs every iteration
    target_reduction: float | None = None

    def __post_init__(self):
        if self.n_rollouts < 2:
            raise InvalidInputError("n_rollouts must be >= 2")
        if not self.clip_ratio > 0:
            raise InvalidInputError("clip_ratio must be > 0")
        if self.n_rollouts % self.samples_per_context:
            raise InvalidInputError("n_rollouts must be a multiple of samples_per_context")
        if self.target_reduction is not None and not 0 < self.target_reduction < 1:
            raise InvalidInputError("target_reduction must lie in (0, 1)")
        if self.target_reduction is not None and not self.pool_refresh:
            raise InvalidInputError("target_reduction needs pool_refresh > 0")

    def to_dict(self):
        return asdict(self)


# ---- situations ---------------------------------------------------------------

@dataclass
class SituationPool:
    """Closed-loop states to plan from, with what is needed to score a plan there."""

    scenarios: list
    contexts: ContextBatch
    scenario_index: np.ndarray
    step: np.ndarray
    horizon: Horizon = field(default_factory=Horizon)
    focus: np.ndarray | None = None  # rows planned shortly before a closed-loop failure
    eligible: np.ndarray | None = None  # rows whose plan does not start in violation
    fail_rate: float | None = None  # share of the source runs with a task-relevant failure
    _tracks: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.scenario_index)

    def tracks(self, i: int) -> np.ndarray:
        if i not in self._tracks:
            h = self.horizon
            self._tracks[i] = self.scenarios[i].neighbor_tracks(h.total_steps + h.plan, h.dt)
        return self._tracks[i]

    def score(self, rows: np.ndarray, actions: np.ndarray, threshold: float = 2.0):
        """Roll plans out from each row's ego state; returns (collided, offroad) flags."""
        T = actions.shape[1]
        states = kernels.rollout_batch(self.contexts.ego_now[rows], np.ascontiguousarray(actions),
                                       self.horizon.dt)
        col = np.zeros(len(rows), dtype=bool)
        off = np.zeros(len(rows), dtype=bool)
        for n, r in enumerate(rows):
            s = self.scenario_index[r]
            t = self.step[r]
            m = self.scenarios[s].map
            off[n] = kernels.offroad_batch(m.grid, m.origin_x, m.origin_y, m.resolution, states[n:n + 1])[0]
            tr = self.tracks(s)[:, t:t + T + 1, :2]
            if len(tr):
                d = kernels.min_distance_batch(states[n:n + 1, :, :2], np.ascontiguousarray(tr[None]),
                                               np.ones((1, len(tr)), dtype=bool))[0]
                col[n] = d < threshold
        return col, off

    def draw(self, n: int, rng: np.random.Generator, focus_frac: float = 0.0) -> np.ndarray:
        """Row indices: a ``focus_frac`` share from the focus set (when non-empty), the rest uniform."""
        n_focus = int(round(n * focus_frac)) if self.focus is not None and len(self.focus) else 0
        if self.eligible is not None and len(self.eligible):
            rows = self.eligible[rng.integers(0, len(self.eligible), size=n - n_focus)]
        else:
            rows = rng.integers(0, len(self), size=n - n_focus)
        if n_focus:
            rows = np.concatenate([self.focus[rng.integers(0, len(self.focus), size=n_focus)], rows])
        return rows

    @classmethod
    def from_runs(cls, scenarios, runs, horizon: Horizon = Horizon(), mode: str = "collision",
                  window_s: float = 3.0, threshold: float = 2.0):
        ctx = ContextBatch.concat([r.contexts for r in runs])
        sidx = np.concatenate([[r.scenario_index] * r.n_replans for r in runs]).astype(int)
        step = np.concatenate([[rec.step for rec in r.replans] for r in runs]).astype(int)
        focus, eligible = [], []
        offset = failed = 0
        for r in runs:
            # a plan that starts in violation scores -1 whatever is sampled, so it carries no signal
            bad = violation_mask(r, scenarios[r.scenario_index], mode, threshold)
            ok = [i for i, rec in enumerate(r.replans) if not bad[rec.step - r.start_step]]
            eligible += [offset + i for i in ok]
            hit = np.flatnonzero(bad)
            if len(hit):
                failed += 1
                fail = r.start_step + hit[0]
                lo = fail - int(round(window_s / horizon.dt))
                focus += [offset + i for i in ok if lo <= r.replans[i].step <= fail]
            offset += r.n_replans
        return cls(list(scenarios), ctx, sidx, step, horizon, np.array(focus, dtype=int),
                   np.array(eligible, dtype=int), failed / max(len(runs), 1))


def violation_mask(run, scenario, mode: str, threshold: float = 2.0) -> np.ndarray:
    """Per executed state of a closed-loop run: is a task-relevant predicate violated there."""
    states = run.trajectory.states
    bad = np.zeros(len(states), dtype=bool)
    if mode in ("collision", "combined") and len(run.neighbor_tracks):
        d = np.sqrt(((states[None, :, :2] - run.neighbor_tracks[:, :, :2]) ** 2).sum(-1)).min(axis=0)
        bad |= d < threshold
    if mode in ("offroad", "combined"):
        m = scenario.map
        bad |= ~kernels.raster_lookup(m.grid, m.origin_x, m.origin_y, m.resolution, states[:, 0], states[:, 1])
    return bad


def first_failure_step(run, scenario, mode: str, threshold: float = 2.0):
    """Absolute step of the first task-relevant violation in a closed-loop run, or None."""
    hit = np.flatnonzero(violation_mask(run, scenario, mode, threshold))
    return int(run.start_step + hit[0]) if len(hit) else None


def build_pool(vae: VaeModel, dm: DenoiserModel, sched: DiffusionSchedule, scenarios, seed: int,
               horizon: Horizon = Horizon(), mode: str = "collision", window_s: float = 3.0,
               threshold: float = 2.0) -> SituationPool:
    runs = run_in_batches(ModelPlanner(vae, dm, sched), scenarios, seed, horizon, keep_contexts=True)
    return SituationPool.from_runs(scenarios, runs, horizon, mode, window_s, threshold)


# ---- rollouts and the estimator --------------------------------------------------

@dataclass(frozen=True, eq=False)
class RolloutBatch:
    traces: TraceBatch
    rewards: np.ndarray
    contexts: ContextBatch
    advantages: np.ndarray
    log_prob_old: np.ndarray  # (N, S) recomputed at the snapshot for the trained steps
    steps: np.ndarray  # trace positions entering the surrogate
    rows: np.ndarray | None = None

    def __len__(self):
        return len(self.rewards)


def normalize_advantages(rewards, scale: bool = True) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    a = r - r.mean()
    return a / (r.std() + 1e-8) if scale else a


def surrogate_steps(K: int, include_last: bool) -> np.ndarray:
    """Trace positions used by the surrogate; the final k=1 transition is excluded by default."""
    return np.arange(K) if include_last or K == 1 else np.arange(K - 1)


def collect_rollouts(dm: DenoiserModel, vae: VaeModel, pool: SituationPool, sched: DiffusionSchedule,
                     config: FinetuneConfig, rng: np.random.Generator,
                     reward_config: RewardConfig | None = None) -> RolloutBatch:
    reward_config = reward_config or RewardConfig(mode=config.reward_mode)
    G = config.samples_per_context
    base = pool.draw(config.n_rollouts // G, rng, config.focus_frac)
    rows = np.repeat(base, G)
    ctx = pool.contexts.take(rows)
    noise = rng.standard_normal((len(rows), sched.K + 1, dm.config.latent_dim))
    z0, traces = sample_batch(ctx, dm, sched, noise)
    actions = decode_actions_batch(z0, ctx, vae)
    col, off = pool.score(rows, actions, reward_config.collision_threshold)
    rewards = task_reward(col, off, reward_config)
    steps = surrogate_steps(sched.K, config.include_last_step)
    with no_grad():
        lp_old = trace_log_probs(traces, ctx, dm, sched, steps).data.copy()
    return RolloutBatch(traces, rewards, ctx, normalize_advantages(rewards), lp_old, steps, rows)


def clipped_surrogate(logp: Tensor, logp_old: np.ndarray, advantages: np.ndarray, clip_ratio: float):
    """Mean over traces of sum over steps of min(rho*A, clip(rho)*A). Returns (surrogate, rho array)."""
    rho = exp(sub(logp, logp_old))
    adv = np.asarray(advantages, dtype=np.float64)[:, None]
    unclipped = mul(rho, adv)
    if np.isinf(clip_ratio):
        term = unclipped
    else:
        term = minimum(unclipped, mul(clip(rho, 1.0 - clip_ratio, 1.0 + clip_ratio), adv))
    return mean(tsum(term, axis=1)), rho.data


def is_policy_gradient(batch: RolloutBatch, dm: DenoiserModel, sched: DiffusionSchedule,
                       config: FinetuneConfig) -> dict:
    """Write -grad(surrogate) into the denoiser's gradient slots (descent on -J is ascent on J)."""
    if batch.log_prob_old is None or batch.log_prob_old.shape != (len(batch), len(batch.steps)):
        raise InvalidInputError("rollout batch is missing per-step old log-probabilities")
    logp = trace_log_probs(batch.traces, batch.contexts, dm, sched, batch.steps)
    sur, rho = clipped_surrogate(logp, batch.log_prob_old, batch.advantages, config.clip_ratio)
    mul(sur, -1.0).backward()
    return {"surrogate": sur.item(), "ratio_dev": float(np.mean(np.abs(rho - 1.0)))}


def finetune(dm: DenoiserModel, vae: VaeModel, sched: DiffusionSchedule, train_scenarios, config: FinetuneConfig,
             seed: int, horizon: Horizon = Horizon(), on_iter=None,
             reward_config: RewardConfig | None = None) -> list[dict]:
    """Algorithm loop: refresh pool, collect, several clipped updates. Mutates ``dm`` in place."""
    reward_config = reward_config or RewardConfig(mode=config.reward_mode)
    if reward_config.mode != config.reward_mode:
        raise InvalidInputError(f"reward config mode {reward_config.mode!r} != fine-tune mode {config.reward_mode!r}")
    # a new objective: pretraining moments would rescale the first updates
    dm.params.reset_optimizer()
    rng = np.random.default_rng(seed)
    report = []
    pool = None
    for it in range(config.iterations):
        if pool is None or (config.pool_refresh and it % config.pool_refresh == 0):
            pool = build_pool(vae, dm, sched, train_scenarios, seed * 1000 + it, horizon, config.reward_mode,
                              config.focus_window_s, reward_config.collision_threshold)
            log.info("pool refreshed: %d situations, %d in focus, train failure rate %.3f",
                     len(pool), len(pool.focus), pool.fail_rate)
            if it == 0:
                fail0 = pool.fail_rate
            elif config.target_reduction is not None and pool.fail_rate <= (1 - config.target_reduction) * fail0:
                log.info("iteration %d: train failure rate %.3f reached the target (start %.3f), stopping",
                         it, pool.fail_rate, fail0)
                break
        batch = collect_rollouts(dm, vae, pool, sched, config, rng, reward_config)
        aborted = False
        ratio_dev = 0.0
        gnorm = 0.0
        for ep in range(config.inner_epochs):
            stats = is_policy_gradient(batch, dm, sched, config)
            ratio_dev = stats["ratio_dev"]
            if ratio_dev > config.ratio_guard:
                dm.params.zero_grad()
                aborted = True
                log.warning("iteration %d: mean |ratio-1| %.3f above guard, skipping remaining epochs", it, ratio_dev)
                break
            gnorm = dm.params.grad_norm()
            adam_update(dm.params, config.lr, max_grad_norm=config.max_grad_norm)
        rec = {"iteration": it, "mean_reward": float(np.mean(batch.rewards)), "mean_ratio_dev": ratio_dev,
               "pool_focus": len(pool.focus), "pool_fail": pool.fail_rate,
               "grad_norm": gnorm, "aborted": aborted}
        report.append(rec)
        log.info("rl iter %d reward %.3f ratio_dev %.4f", it, rec["mean_reward"], ratio_dev)
        if on_iter:
            on_iter(rec)
    return report
