"""Off-policy actor-critic training with a discrete action head.

The actor outputs a probability per grid action (either a differentiable
decision tree or a softmax-headed network); the critic estimates the
cost-to-go of every action from a state. The critic regresses on the
probability-weighted bootstrap target of the target networks, the actor
descends the expected critic cost directly (costs are minimized, so no
sign gymnastics anywhere). Also here: the self-consumption rule-based
controller used as a baseline and the shared evaluation loop.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

from . import ddt
from .critic import (
    AdamState,
    MlpParams,
    adam_init,
    adam_step,
    init_mlp,
    mlp_backward_batch,
    mlp_forward,
    mlp_forward_batch,
    polyak_update,
)
from .ddt import TreeParams
from .hems import BatteryConfig, HemsEnv
from .profiles import N_FEATURES, NormStats, ProfileSet, norm_apply, norm_fit

logger = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# experience


@dataclass(frozen=True)
class Transition:
    x: np.ndarray
    u: int
    c: float
    x_next: np.ndarray
    done: bool


@dataclass(frozen=True)
class Batch:
    x: np.ndarray       # (B, F)
    u: np.ndarray       # (B,) int
    c: np.ndarray       # (B,)
    x_next: np.ndarray  # (B, F)
    done: np.ndarray    # (B,) float 0/1


class ReplayBuffer:
    """Fixed-capacity ring buffer with seeded uniform sampling."""

    def __init__(self, capacity: int, seed: int, n_features: int = N_FEATURES):
        if capacity < 1:
            raise ValueError(f"capacity must be positive, got {capacity}")
        self.capacity = int(capacity)
        self._rng = np.random.default_rng(seed)
        self._x = np.zeros((capacity, n_features))
        self._u = np.zeros(capacity, dtype=np.int64)
        self._c = np.zeros(capacity)
        self._xn = np.zeros((capacity, n_features))
        self._done = np.zeros(capacity)
        self._size = 0
        self._cursor = 0

    def __len__(self) -> int:
        return self._size

    def push(self, tr: Transition) -> None:
        i = self._cursor
        self._x[i] = tr.x
        self._u[i] = tr.u
        self._c[i] = tr.c
        self._xn[i] = tr.x_next
        self._done[i] = 1.0 if tr.done else 0.0
        self._cursor = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, batch_size: int) -> Batch:
        if self._size < 1:
            raise ValueError("cannot sample from an empty buffer")
        idx = self._rng.integers(0, self._size, size=batch_size)
        return Batch(
            x=self._x[idx],
            u=self._u[idx],
            c=self._c[idx],
            x_next=self._xn[idx],
            done=self._done[idx],
        )


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class AgentConfig:
    """Training hyperparameters; defaults fit the 24-step day episodes."""

    depth: int = 2
    actor_kind: str = "ddt"          # "ddt" or "mlp"
    actor_hidden: tuple = (64, 64)   # used by the "mlp" actor only
    critic_hidden: tuple = (64, 64)
    gamma: float = 0.99
    tau: float = 0.005
    lr_actor: float = 1e-3
    lr_critic: float = 1e-3
    batch_size: int = 64
    buffer_capacity: int = 50_000
    episodes: int = 2000
    warmup: int = 500      # transitions collected before updates start
    update_every: int = 1  # environment steps per gradient update
    epsilon: float = 0.05  # uniform floor mixed into the sampling distribution
    train_e0_fraction: float = 1.0
    eval_every: int = 1
    seeds: tuple = (0, 1, 2, 3, 4)

    def __post_init__(self) -> None:
        problems = []
        if self.depth < 1:
            problems.append(f"depth must be >= 1, got {self.depth}")
        if self.actor_kind not in ("ddt", "mlp"):
            problems.append(f"actor_kind must be 'ddt' or 'mlp', got {self.actor_kind!r}")
        if not 0.0 <= self.gamma <= 1.0:
            problems.append(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0.0 < self.tau <= 1.0:
            problems.append(f"tau must lie in (0, 1], got {self.tau}")
        if self.lr_actor <= 0 or self.lr_critic <= 0:
            problems.append("learning rates must be positive")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.buffer_capacity < self.batch_size:
            problems.append(
                f"buffer capacity {self.buffer_capacity} below batch size "
                f"{self.batch_size}"
            )
        if self.episodes < 0:
            problems.append(f"episodes must be >= 0, got {self.episodes}")
        if self.warmup < 0:
            problems.append(f"warmup must be >= 0, got {self.warmup}")
        if self.update_every < 1:
            problems.append(f"update_every must be >= 1, got {self.update_every}")
        if not 0.0 <= self.epsilon <= 1.0:
            problems.append(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if not 0.0 <= self.train_e0_fraction <= 1.0:
            problems.append(
                f"train_e0_fraction must lie in [0, 1], got {self.train_e0_fraction}"
            )
        if self.eval_every < 1:
            problems.append(f"eval_every must be >= 1, got {self.eval_every}")
        if len(self.seeds) < 1:
            problems.append("need at least one seed")
        if problems:
            raise ValueError("; ".join(problems))
        object.__setattr__(self, "actor_hidden", tuple(int(v) for v in self.actor_hidden))
        object.__setattr__(self, "critic_hidden", tuple(int(v) for v in self.critic_hidden))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))


# --------------------------------------------------------------------------
# policy plumbing (tree or softmax-headed network)


def actor_probs_batch(actor, x: np.ndarray) -> np.ndarray:
    """Action probabilities of either actor kind for a batch of states."""
    if isinstance(actor, TreeParams):
        return ddt.forward_soft_batch(actor, x)
    if isinstance(actor, MlpParams):
        logits, _ = mlp_forward_batch(actor, x)
        return softmax(logits, axis=-1)
    raise ValueError(f"unsupported actor type {type(actor)}")


def actor_probs(actor, x: np.ndarray) -> np.ndarray:
    return actor_probs_batch(actor, np.asarray(x, dtype=np.float64)[None, :])[0]


def greedy_action(actor, x: np.ndarray) -> int:
    """Deterministic action: crisp walk for trees, argmax head otherwise."""
    if isinstance(actor, TreeParams):
        return ddt.infer_crisp(ddt.crispify(actor), x)
    if isinstance(actor, MlpParams):
        logits, _ = mlp_forward(actor, x)
        return int(np.argmax(logits))
    raise ValueError(f"unsupported actor type {type(actor)}")


def select_action(
    actor, x: np.ndarray, mode: str, rng: np.random.Generator, epsilon: float = 0.05
) -> int:
    """Pick one action index.

    "explore" samples the actor's soft distribution mixed with a uniform
    floor of weight ``epsilon``; "greedy" is deterministic.
    """
    if mode == "greedy":
        return greedy_action(actor, x)
    if mode != "explore":
        raise ValueError(f"unknown mode {mode!r}, expected 'explore' or 'greedy'")
    p = actor_probs(actor, x)
    n = p.shape[0]
    p = (1.0 - epsilon) * p + epsilon / n
    edges = np.cumsum(p)
    return min(int(np.searchsorted(edges, rng.uniform() * edges[-1])), n - 1)


# --------------------------------------------------------------------------
# updates


def critic_target(
    batch: Batch, target_critic: MlpParams, target_actor, gamma: float
) -> np.ndarray:
    """Bootstrap regression target, zeroed past the end of the episode.

    y_i = c_i + gamma * (1 - done_i) * sum_k p(u_k | x'_i) Q_target(x'_i)[k],
    with the action probabilities taken from the target actor. gamma = 1
    recovers the undiscounted form.
    """
    probs = actor_probs_batch(target_actor, batch.x_next)
    q_next, _ = mlp_forward_batch(target_critic, batch.x_next)
    bootstrap = np.einsum("ba,ba->b", probs, q_next)
    return batch.c + gamma * (1.0 - batch.done) * bootstrap


def critic_update(batch: Batch, critic: MlpParams, state: AdamState, targets: np.ndarray):
    """One squared-error regression step on the taken-action outputs.

    Returns (new critic, new optimizer state, scalar loss).
    """
    n = batch.x.shape[0]
    q, cache = mlp_forward_batch(critic, batch.x)
    err = q[np.arange(n), batch.u] - targets
    loss = float(0.5 * np.mean(err * err))
    upstream = np.zeros_like(q)
    upstream[np.arange(n), batch.u] = err / n
    grads = mlp_backward_batch(critic, cache, upstream)
    arrays, state = adam_step(critic.to_arrays(), grads.to_arrays(), state)
    return critic.with_arrays(arrays), state, loss


def actor_update(batch: Batch, actor, critic: MlpParams, state: AdamState):
    """Descend the expected critic cost E[sum_k p(u_k|x) Q(x)[k]].

    The critic is frozen inside this step; its Q row (scaled by 1/B) is
    the upstream gradient fed to the actor. Returns (new actor, new
    optimizer state, the pre-update expected cost).
    """
    n = batch.x.shape[0]
    q, _ = mlp_forward_batch(critic, batch.x)
    if not np.all(np.isfinite(q)):
        # catch divergence at its source: feeding inf/NaN upstream into the
        # actor would corrupt its parameters before any loss check runs
        raise RuntimeError(
            "critic cost estimates became non-finite; training has diverged"
        )
    if isinstance(actor, TreeParams):
        probs = ddt.forward_soft_batch(actor, batch.x)
        expected = float(np.mean(np.einsum("ba,ba->b", probs, q)))
        grads = ddt.backward_batch(actor, batch.x, q / n)
        arrays, state = adam_step(actor.to_arrays(), grads.to_arrays(), state)
        return actor.with_arrays(arrays), state, expected
    if isinstance(actor, MlpParams):
        logits, cache = mlp_forward_batch(actor, batch.x)
        probs = softmax(logits, axis=-1)
        inner = np.einsum("ba,ba->b", probs, q)
        expected = float(np.mean(inner))
        upstream = probs * (q - inner[:, None]) / n
        grads = mlp_backward_batch(actor, cache, upstream)
        arrays, state = adam_step(actor.to_arrays(), grads.to_arrays(), state)
        return actor.with_arrays(arrays), state, expected
    raise ValueError(f"unsupported actor type {type(actor)}")


# --------------------------------------------------------------------------
# rule-based baseline


def rbc_action(
    p_con: float, p_pv: float, e: float, battery: BatteryConfig, dt: float = 1.0
) -> float:
    """Self-consumption rule: store PV surplus, discharge to cover deficit.

    Returns the relative power command in [-1, 1]. Charging is limited by
    the surplus, the power rating and the remaining headroom; discharging
    by the deficit, the power rating and what the store can deliver.
    Prices are ignored by design.
    """
    net = p_con + p_pv
    eta = battery.eta
    if net < 0:
        headroom = (battery.e_max - e) / (eta * dt)
        u = min(-net, battery.p_max, headroom)
        return float(u / battery.p_max)
    if net > 0:
        available = e * eta / dt
        u = min(net, battery.p_max, available)
        return float(-u / battery.p_max)
    return 0.0


def make_rbc_policy(battery: BatteryConfig, dt: float = 1.0):
    """Wrap the rule as an observation -> action callable for evaluation."""

    def policy(obs: np.ndarray) -> float:
        e = float(obs[1]) * battery.e_max
        return rbc_action(float(obs[2]), float(obs[3]), e, battery, dt)

    return policy


# --------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class EvalReport:
    """Mean and per-day episode costs; tree policies also report the
    soft-greedy (argmax of the soft output) costs next to the crisp ones."""

    mean_daily_cost: float
    per_day_costs: list
    traces: list | None = None
    soft_greedy_mean: float | None = None
    soft_greedy_per_day: list | None = None


def _rollout(env: HemsEnv, day_index: int, act, e0: float, collect_trace: bool):
    obs = env.reset(day_index, e0=e0)
    total = 0.0
    trace = [] if collect_trace else None
    while not env.done:
        t = env.t
        action = act(obs)
        res = env.step(action)
        total += res.cost
        if collect_trace:
            trace.append(
                {
                    "day": day_index,
                    "t": t,
                    "obs": [float(v) for v in obs],
                    "action": int(action) if isinstance(action, (int, np.integer)) else float(action),
                    "cost": float(res.cost),
                    "e": float(env.e),
                    "p_agg": float(res.diagnostics.p_agg),
                    "u_applied": float(res.diagnostics.u_applied),
                }
            )
        obs = res.obs
    return total, trace


def _policy_callable(policy, stats: NormStats | None):
    """Normalize-and-decide wrapper for the supported policy kinds."""
    if isinstance(policy, ddt.CrispTree):
        if stats is None:
            raise ValueError("crisp tree evaluation needs normalization stats")
        return lambda obs: ddt.infer_crisp(policy, norm_apply(stats, obs))
    if isinstance(policy, TreeParams):
        if stats is None:
            raise ValueError("tree evaluation needs normalization stats")
        return lambda obs: int(np.argmax(ddt.forward_soft(policy, norm_apply(stats, obs))))
    if isinstance(policy, MlpParams):
        if stats is None:
            raise ValueError("network evaluation needs normalization stats")
        return lambda obs: int(np.argmax(mlp_forward(policy, norm_apply(stats, obs))[0]))
    if callable(policy):
        return policy
    raise ValueError(f"unsupported policy type {type(policy)}")


def evaluate(
    policy,
    env: HemsEnv,
    day_indices,
    stats: NormStats | None = None,
    e0: float = 0.0,
    collect_trace: bool = False,
) -> EvalReport:
    """Score a policy over whole days, starting from an empty store.

    Accepts a crisp tree, soft tree parameters, a softmax-headed network,
    or any observation -> action callable (the rule-based controller's
    continuous commands go through the environment's continuous pathway).
    A soft tree is scored with its crisp extraction as the headline number
    and with plain argmax of the soft output alongside.
    """
    day_indices = list(day_indices)
    if not day_indices:
        raise ValueError("need at least one day to evaluate on")
    soft_costs = None
    if isinstance(policy, TreeParams):
        soft_act = _policy_callable(policy, stats)
        soft_costs = [
            _rollout(env, d, soft_act, e0, False)[0] for d in day_indices
        ]
        act = _policy_callable(ddt.crispify(policy), stats)
    else:
        act = _policy_callable(policy, stats)
    costs = []
    traces = [] if collect_trace else None
    for d in day_indices:
        total, trace = _rollout(env, d, act, e0, collect_trace)
        costs.append(float(total))
        if collect_trace:
            traces.append(trace)
    return EvalReport(
        mean_daily_cost=float(np.mean(costs)),
        per_day_costs=costs,
        traces=traces,
        soft_greedy_mean=float(np.mean(soft_costs)) if soft_costs is not None else None,
        soft_greedy_per_day=[float(c) for c in soft_costs] if soft_costs is not None else None,
    )


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainResult:
    actor: object
    critic: MlpParams
    curve: list
    stats: NormStats
    seed: int


def _nan_dump(tag, episode, step, critic_loss, actor_cost, actor, critic):
    parts = [
        f"{tag} became non-finite at episode {episode} step {step}:",
        f"critic_loss={critic_loss}",
        f"actor_expected_cost={actor_cost}",
    ]
    for name, arr in zip(("actor", "critic"), (actor, critic)):
        mags = [float(np.max(np.abs(a))) if a.size else 0.0 for a in arr.to_arrays()]
        parts.append(f"max|{name}|={max(mags):.3e}")
    return " ".join(parts)


def train(cfg: AgentConfig, env: HemsEnv, profile_set: ProfileSet, seed: int) -> TrainResult:
    """Run one seeded training job and return the final networks and curve.

    Episodes are whole days drawn uniformly from the train split. Each
    episode starts at a state of charge drawn uniformly from the first
    ``train_e0_fraction`` of capacity: the greedy policy alone would keep
    the store near empty, and the replay buffer then never contains the
    well-charged states whose value the critic must learn before storing
    energy can look attractive. The learning curve's eval column is the
    greedy score on the eval split from an empty store (matching how
    policies are compared after training). One gradient update per
    environment step once ``warmup`` transitions are stored. Identical
    seeds give identical curves.
    """
    train_days = profile_set.train_indices
    eval_days = profile_set.eval_indices
    if not train_days or not eval_days:
        raise ValueError("training needs at least one train day and one eval day")
    stats = norm_fit(profile_set)
    n_actions = env.battery.n_actions

    s_actor, s_critic, s_expl, s_replay, s_day = (
        int(v) for v in np.random.SeedSequence(seed).generate_state(5)
    )
    if cfg.actor_kind == "ddt":
        actor = ddt.init_tree(cfg.depth, N_FEATURES, n_actions, s_actor)
    else:
        actor = init_mlp((N_FEATURES, *cfg.actor_hidden, n_actions), s_actor)
    critic = init_mlp((N_FEATURES, *cfg.critic_hidden, n_actions), s_critic)
    target_actor = actor
    target_critic = critic
    actor_opt = adam_init(actor.to_arrays(), lr=cfg.lr_actor)
    critic_opt = adam_init(critic.to_arrays(), lr=cfg.lr_critic)
    rng_expl = np.random.default_rng(s_expl)
    rng_day = np.random.default_rng(s_day)
    buffer = ReplayBuffer(cfg.buffer_capacity, s_replay)

    e0_cap = cfg.train_e0_fraction * env.battery.e_max
    curve = []
    eval_cost = float("nan")
    steps_seen = 0
    for episode in range(cfg.episodes):
        day = train_days[int(rng_day.integers(len(train_days)))]
        obs = env.reset(day, e0=float(rng_day.uniform(0.0, e0_cap)))
        x = norm_apply(stats, obs)
        episode_cost = 0.0
        while not env.done:
            u = select_action(actor, x, "explore", rng_expl, cfg.epsilon)
            res = env.step(u)
            x_next = norm_apply(stats, res.obs)
            buffer.push(Transition(x, u, res.cost, x_next, res.done))
            episode_cost += res.cost
            steps_seen += 1
            ready = len(buffer) >= max(cfg.warmup, cfg.batch_size)
            if ready and steps_seen % cfg.update_every == 0:
                batch = buffer.sample(cfg.batch_size)
                y = critic_target(batch, target_critic, target_actor, cfg.gamma)
                critic, critic_opt, critic_loss = critic_update(
                    batch, critic, critic_opt, y
                )
                actor, actor_opt, actor_cost = actor_update(
                    batch, actor, critic, actor_opt
                )
                if not (np.isfinite(critic_loss) and np.isfinite(actor_cost)):
                    raise RuntimeError(
                        _nan_dump(
                            "loss", episode, env.t, critic_loss, actor_cost,
                            actor, critic,
                        )
                    )
                target_actor = target_actor.with_arrays(
                    polyak_update(
                        target_actor.to_arrays(), actor.to_arrays(), cfg.tau
                    )
                )
                target_critic = target_critic.with_arrays(
                    polyak_update(
                        target_critic.to_arrays(), critic.to_arrays(), cfg.tau
                    )
                )
            x = x_next
        if episode % cfg.eval_every == 0 or episode == cfg.episodes - 1:
            greedy = evaluate(
                ddt.crispify(actor) if isinstance(actor, TreeParams) else actor,
                env,
                eval_days,
                stats=stats,
            )
            eval_cost = greedy.mean_daily_cost
        curve.append(
            {
                "episode": episode,
                "train_cost": float(episode_cost),
                "eval_cost": float(eval_cost),
            }
        )
        if episode % 200 == 0:
            logger.info(
                "seed %d episode %d train %.3f eval %.3f",
                seed, episode, episode_cost, eval_cost,
            )
    return TrainResult(actor=actor, critic=critic, curve=curve, stats=stats, seed=seed)
