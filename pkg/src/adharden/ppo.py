"""Clipped-surrogate policy optimization over parallel attack environments.

The agent rolls out a fixed budget of transitions round-robin across the
environment pool (finished episodes restart immediately, picking up any
defense-plan swap at the reset), estimates advantages with GAE, then takes
several epochs of minibatched clipped-surrogate steps on the actor and
value-regression steps on the critic.  A defender hook may run between
training epochs to re-plan the environments' defenses.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import nn
from .env import AttackEnv, DefenseConfig, encode
from .util import EvalResult, binomial_ci

# Hook contract: (critic snapshot, current env defenses) -> new env defenses.
DefenderHook = Callable[[nn.MlpParams, list[DefenseConfig]], list[DefenseConfig]]


class PpoError(RuntimeError):
    pass


@dataclass
class PpoConfig:
    """Training hyper-parameters.

    The defaults are the paper-scale settings: 20 environments, batches of
    800 transitions, 10 update epochs per batch, clip 0.2, GAE lambda 0.95,
    entropy bonus 0.01, value coefficient 0.5, Adam at 1e-4.  The reward is
    terminal-only and episodes are bounded, so the discount stays at 1.0 and
    the undiscounted return equals the success probability.
    """

    clip_eps: float = 0.2
    gamma: float = 1.0
    gae_lambda: float = 0.95
    batch_size: int = 800
    update_epochs: int = 10
    minibatch_size: int = 200
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    n_envs: int = 20
    lr: float = 1e-4
    hidden: int = 128
    hook_every: int = 20

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        for name in ("clip_eps", "gae_lambda", "batch_size", "update_epochs",
                     "minibatch_size", "n_envs", "lr", "hidden", "hook_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class PolicyParams:
    """Actor and critic networks plus their optimizer moments."""

    actor: nn.MlpParams
    critic: nn.MlpParams
    actor_opt: nn.AdamState
    critic_opt: nn.AdamState

    @classmethod
    def init(cls, n_features: int, n_actions: int, cfg: PpoConfig, rng: np.random.Generator) -> "PolicyParams":
        sizes_a = [n_features, cfg.hidden, cfg.hidden, n_actions]
        sizes_c = [n_features, cfg.hidden, cfg.hidden, 1]
        actor = nn.init_mlp(sizes_a, rng, out_scale=0.01)
        critic = nn.init_mlp(sizes_c, rng)
        return cls(actor, critic,
                   nn.AdamState.for_params(actor, lr=cfg.lr),
                   nn.AdamState.for_params(critic, lr=cfg.lr))


@dataclass
class RolloutBatch:
    features: np.ndarray  # (B, N)
    masks: np.ndarray  # (B, N) bool
    actions: np.ndarray  # (B,)
    logp_old: np.ndarray  # (B,)
    advantages: np.ndarray  # (B,)
    returns: np.ndarray  # (B,)
    values: np.ndarray  # (B,)
    episode_rewards: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def mean_episode_reward(self) -> float:
        if not self.episode_rewards:
            return 0.0
        return float(np.mean(self.episode_rewards))


def compute_gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    bootstrap_value: float,
    gamma: float,
    lam: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation over one env's transition stream.

    ``dones[t]`` marks that the episode ended at step t; the value beyond a
    boundary is masked out, and the stream's trailing state (if unfinished)
    bootstraps with ``bootstrap_value``.  Returns (advantages, returns) with
    returns = advantages + values.
    """
    n = len(rewards)
    adv = np.zeros(n)
    last = 0.0
    for t in range(n - 1, -1, -1):
        nonterminal = 0.0 if dones[t] else 1.0
        next_value = bootstrap_value if t == n - 1 else values[t + 1]
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return adv, adv + values


def collect_rollouts(
    envs: Sequence[AttackEnv],
    params: PolicyParams,
    cfg: PpoConfig,
    rng: np.random.Generator,
) -> RolloutBatch:
    """Gather at least ``cfg.batch_size`` transitions round-robin.

    All envs are stepped synchronously: one batched actor/critic forward per
    round, then one env transition each.  Envs whose episode ends restart
    from their (possibly re-planned) initial state; an env whose initial
    state is already terminal contributes a zero-length, zero-reward episode
    and is skipped for the round.
    """
    buffers: list[dict[str, list]] = [
        {"feat": [], "mask": [], "action": [], "logp": [], "reward": [], "value": [], "done": []}
        for _ in envs
    ]
    episode_rewards: list[int] = []
    total = 0
    while total < cfg.batch_size:
        active: list[int] = []
        for i, e in enumerate(envs):
            if e.done:
                episode_rewards.append(e.episode_return)
                e.reset()
            if not e.done:
                active.append(i)
        if not active:
            break  # every env is degenerate (initial state terminal)
        feats = np.stack([encode(envs[i].state) for i in active])
        masks = np.stack([envs[i].legal() for i in active])
        dist, _ = nn.actor_forward(params.actor, feats, masks)
        actions = dist.sample(rng)
        logps = dist.log_prob(actions)
        values, _ = nn.critic_forward(params.critic, feats)
        for j, i in enumerate(active):
            _, reward, done = envs[i].step(int(actions[j]))
            buf = buffers[i]
            buf["feat"].append(feats[j])
            buf["mask"].append(masks[j])
            buf["action"].append(int(actions[j]))
            buf["logp"].append(float(logps[j]))
            buf["reward"].append(float(reward))
            buf["value"].append(float(values[j]))
            buf["done"].append(done)
            total += 1

    parts: dict[str, list[np.ndarray]] = {k: [] for k in ("feat", "mask", "action", "logp", "adv", "ret", "value")}
    for i, buf in enumerate(buffers):
        if not buf["action"]:
            continue
        rewards = np.array(buf["reward"])
        values = np.array(buf["value"])
        dones = np.array(buf["done"])
        if dones[-1]:
            bootstrap = 0.0
        else:
            v, _ = nn.critic_forward(params.critic, encode(envs[i].state)[None, :])
            bootstrap = float(v[0])
        adv, ret = compute_gae(rewards, values, dones, bootstrap, cfg.gamma, cfg.gae_lambda)
        parts["feat"].append(np.stack(buf["feat"]))
        parts["mask"].append(np.stack(buf["mask"]))
        parts["action"].append(np.array(buf["action"]))
        parts["logp"].append(np.array(buf["logp"]))
        parts["adv"].append(adv)
        parts["ret"].append(ret)
        parts["value"].append(values)
    if not parts["action"]:
        n_feat = envs[0].cg.n_nsps
        empty = np.zeros((0, n_feat))
        return RolloutBatch(empty, empty.astype(bool), np.zeros(0, dtype=int),
                            np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0),
                            episode_rewards)
    return RolloutBatch(
        features=np.concatenate(parts["feat"]),
        masks=np.concatenate(parts["mask"]),
        actions=np.concatenate(parts["action"]),
        logp_old=np.concatenate(parts["logp"]),
        advantages=np.concatenate(parts["adv"]),
        returns=np.concatenate(parts["ret"]),
        values=np.concatenate(parts["value"]),
        episode_rewards=episode_rewards,
    )


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    """Zero-mean unit-std advantages; a zero or constant batch stays at zero
    (preserves per-sample argmax)."""
    if len(adv) == 0:
        return adv
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def policy_loss_and_grads(
    actor: nn.MlpParams,
    feats: np.ndarray,
    masks: np.ndarray,
    actions: np.ndarray,
    logp_old: np.ndarray,
    adv: np.ndarray,
    cfg: PpoConfig,
) -> tuple[float, list[np.ndarray], list[np.ndarray], dict[str, float]]:
    """Clipped-surrogate policy loss with entropy bonus, plus exact grads.

    loss = -mean(min(r A, clip(r, 1∓eps) A)) - entropy_coef * mean(H)
    with r = exp(log pi(a) - log pi_old(a)).
    """
    n = len(actions)
    dist, cache = nn.actor_forward(actor, feats, masks)
    logp = dist.log_prob(actions)
    ratio = np.exp(logp - logp_old)
    lo, hi = 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps
    surr1 = ratio * adv
    surr2 = np.clip(ratio, lo, hi) * adv
    entropy = dist.entropy()
    loss = float(-np.minimum(surr1, surr2).mean() - cfg.entropy_coef * entropy.mean())

    # d loss / d logp per sample: the active min-branch, flat in clip plateaus.
    unclipped_active = surr1 <= surr2
    in_window = (ratio > lo) & (ratio < hi)
    d_obj = np.where(unclipped_active | in_window, ratio * adv, 0.0)
    d_logp = -d_obj / n
    d_entropy = np.full(n, -cfg.entropy_coef / n)
    dlogits = nn.logprob_entropy_grad(dist.probs, actions, d_logp, d_entropy)
    gw, gb, _ = nn.mlp_backward(actor, cache, dlogits)
    diag = {
        "clip_fraction": float((~in_window).mean()),
        "approx_kl": float(((ratio - 1.0) - np.log(ratio)).mean()),
        "entropy": float(entropy.mean()),
    }
    return loss, gw, gb, diag


def value_loss_and_grads(
    critic: nn.MlpParams,
    feats: np.ndarray,
    returns: np.ndarray,
    cfg: PpoConfig,
) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Value regression: loss = value_coef * mean((v - return)^2)."""
    n = len(returns)
    v, cache = nn.critic_forward(critic, feats)
    err = v - returns
    loss = float(cfg.value_coef * (err**2).mean())
    dv = (cfg.value_coef * 2.0 / n) * err
    gw, gb, _ = nn.mlp_backward(critic, cache, dv[:, None])
    return loss, gw, gb


def ppo_update(
    params: PolicyParams,
    batch: RolloutBatch,
    cfg: PpoConfig,
    rng: np.random.Generator,
) -> dict[str, float]:
    """Run the update epochs over shuffled minibatches; returns diagnostics
    averaged over minibatches.  Raises PpoError on a non-finite loss."""
    if len(batch) == 0:
        raise PpoError("empty batch")
    adv = normalize_advantages(batch.advantages)
    diags: list[dict[str, float]] = []
    n = len(batch)
    for _ in range(cfg.update_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            idx = order[start : start + cfg.minibatch_size]
            p_loss, gw, gb, diag = policy_loss_and_grads(
                params.actor, batch.features[idx], batch.masks[idx],
                batch.actions[idx], batch.logp_old[idx], adv[idx], cfg,
            )
            v_loss, cgw, cgb = value_loss_and_grads(
                params.critic, batch.features[idx], batch.returns[idx], cfg,
            )
            if not (np.isfinite(p_loss) and np.isfinite(v_loss)):
                raise PpoError(f"non-finite loss: policy={p_loss} value={v_loss} diag={diag}")
            nn.adam_step(params.actor, params.actor_opt, gw, gb)
            nn.adam_step(params.critic, params.critic_opt, cgw, cgb)
            diag["policy_loss"] = p_loss
            diag["value_loss"] = v_loss
            diags.append(diag)
    return {k: float(np.mean([d[k] for d in diags])) for k in diags[0]}


@dataclass
class TrainResult:
    params: PolicyParams
    history: list[dict[str, float]]

    @property
    def final_reward(self) -> float:
        return self.history[-1]["mean_episode_reward"] if self.history else 0.0


def train(
    envs: Sequence[AttackEnv],
    params: PolicyParams,
    cfg: PpoConfig,
    epochs: int,
    seed: int,
    defender_hook: DefenderHook | None = None,
) -> TrainResult:
    """Interleaved training loop.

    One epoch = one rollout batch plus one ppo_update.  After every
    ``cfg.hook_every`` epochs the defender hook receives a critic snapshot
    and the envs' current plans and returns replacement plans, which each env
    adopts at its next episode start.
    """
    ss = np.random.SeedSequence(seed)
    rollout_rng, update_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    history: list[dict[str, float]] = []
    for epoch in range(1, epochs + 1):
        batch = collect_rollouts(envs, params, cfg, rollout_rng)
        row: dict[str, float] = {
            "epoch": float(epoch),
            "mean_episode_reward": batch.mean_episode_reward,
            "episodes": float(len(batch.episode_rewards)),
            "transitions": float(len(batch)),
        }
        if len(batch) > 0:
            row.update(ppo_update(params, batch, cfg, update_rng))
        if defender_hook is not None and epoch % cfg.hook_every == 0:
            snapshot = params.critic.clone()
            new_plans = defender_hook(snapshot, [e.defense for e in envs])
            for e, plan in zip(envs, new_plans):
                e.set_defense(plan)
        history.append(row)
    return TrainResult(params, history)


def evaluate_policy(
    params: PolicyParams,
    env: AttackEnv,
    episodes: int = 5000,
    rng: np.random.Generator | None = None,
    sample: bool = True,
) -> EvalResult:
    """Roll ``episodes`` episodes and report the empirical success rate with a
    binomial 95% CI.  Samples from the policy by default; ``sample=False``
    acts greedily."""
    if rng is None:
        rng = np.random.default_rng(0)
    successes = 0
    for _ in range(episodes):
        env.reset()
        while not env.done:
            feats = encode(env.state)[None, :]
            mask = env.legal()[None, :]
            dist, _ = nn.actor_forward(params.actor, feats, mask)
            a = dist.sample(rng)[0] if sample else dist.argmax()[0]
            _, reward, _ = env.step(int(a))
            successes += reward
    return binomial_ci(successes, episodes)
