"""The training loop: epsilon-greedy acting, replay, per-layer TD updates.

Every cell trains on its own squared TD error. Targets are per layer and use
the double-Q pairing: the bootstrap action is the argmax of that layer's
*online* prediction at the next state, its value comes from the frozen
target copy of the same layer. Sub-trajectories of up to seq_len steps are
replayed from a zeroed state to rebuild the recurrent inputs before the
update step (burn-in); only the final window step is updated by default.

Within one update, all activations are computed with the current weights
first and every cell is then updated from those pre-update activations, so
per-cell gradient work is order-independent and could run in parallel. A
strict-sequential mode (each cell's update feeding recomputed activations
to the next) is available for comparison, as is an update-every-window-step
mode; both are off by default.

Bookkeeping (epsilon/learning-rate schedules, target sync, metrics rows) is
counted in environment steps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import baseline as baselinemod
from . import cell as cellmod
from .envs.base import Env
from .network import (
    NetworkConfig,
    NetworkParams,
    clone_params,
    network_init,
    network_q,
    network_step,
    normalize_message,
    quantile_mean,
    step_batch,
    zero_state,
)
from .numkit import AdamState, LrSchedule, adam_init, adam_step, clip_global_norm, lr_at
from .replay import BatchSample, ReplayBuffer, SubTrajectory, Transition


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int
    lr: LrSchedule
    gamma: float = 0.99
    batch_size: int = 512
    train_freq: int = 4
    target_sync: int = 1000
    exploration_fraction: float = 0.1
    final_epsilon: float = 0.01
    max_grad_norm: float = 1.0
    seq_len: int = 8
    buffer_capacity: int = 5_000_000
    learning_starts: int | None = 10_000  # None -> batch_size
    eval_every: int = 20_000
    eval_episodes: int = 25
    final_eval_episodes: int = 100
    checkpoint_every: int | None = None
    update_all_steps: bool = False
    strict_sequential: bool = False
    averaged_target_action: bool = False

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        if not 0.0 < self.exploration_fraction <= 1.0:
            raise ValueError("exploration_fraction must be in (0, 1]")

    @property
    def warmup_transitions(self) -> int:
        return self.batch_size if self.learning_starts is None else self.learning_starts


PRESETS = {
    # warmup-cosine to 1e-4 over 500k steps then cosine to 3e-5; eps 1.0 -> 0.01
    "minatar": dict(
        lr_kind="warmup-cosine",
        peak_lr=1e-4,
        warmup_steps=500_000,
        final_lr=3e-5,
        exploration_fraction=0.1,
        final_epsilon=0.01,
        buffer_capacity=5_000_000,
    ),
    # constant 2.5e-4, eps 1.0 -> 0.05 over the first 20 percent of training
    "classic": dict(
        lr_kind="constant",
        peak_lr=2.5e-4,
        exploration_fraction=0.2,
        final_epsilon=0.05,
        buffer_capacity=5_000_000,
    ),
    # constant 2.5e-4, eps 1.0 -> 0.01 over the first quarter of training
    "dmc-style": dict(
        lr_kind="constant",
        peak_lr=2.5e-4,
        exploration_fraction=0.25,
        final_epsilon=0.01,
        buffer_capacity=4_000_000,
    ),
}


def make_train_config(preset: str, total_steps: int, **overrides) -> TrainConfig:
    """Build a TrainConfig from a named preset plus flat overrides.

    Learning-rate fields are flattened (lr_kind, peak_lr, warmup_steps,
    final_lr); warmup is capped at total_steps for short runs.
    """
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    merged: dict = dict(PRESETS[preset])
    merged.update(overrides)
    kind = merged.pop("lr_kind")
    peak = float(merged.pop("peak_lr"))
    warmup = int(merged.pop("warmup_steps", 0))
    final = float(merged.pop("final_lr", 0.0))
    if kind == "constant":
        lr = LrSchedule(kind="constant", peak_lr=peak)
    else:
        lr = LrSchedule(
            kind="warmup-cosine",
            peak_lr=peak,
            warmup_steps=min(warmup, total_steps),
            total_steps=total_steps,
            final_lr=final,
        )
    return TrainConfig(total_steps=total_steps, lr=lr, **merged)


def epsilon_at(cfg: TrainConfig, step: int) -> float:
    """Linear from 1.0 at step 0 to final_epsilon at the end of exploration."""
    if step < 0:
        raise ValueError("step must be >= 0")
    end = cfg.exploration_fraction * cfg.total_steps
    if end <= 0 or step >= end:
        return cfg.final_epsilon
    return 1.0 + (cfg.final_epsilon - 1.0) * (step / end)


def select_action(
    params: NetworkParams,
    state: list[np.ndarray],
    obs: np.ndarray,
    eps: float,
    rng: np.random.Generator,
) -> tuple[int, list[np.ndarray]]:
    """Epsilon-greedy over the layer-averaged Q; returns (action, new state).

    The recurrent state advances on every call, whether or not the action
    was random. Exact Q ties resolve to the lowest action index.
    """
    per_layer_q, new_state = network_step(params, state, obs)
    if rng.random() < eps:
        return int(rng.integers(params.config.action_count)), new_state
    return int(np.argmax(network_q(per_layer_q))), new_state


def sync_target(online: NetworkParams, target: NetworkParams, step: int, c: int) -> NetworkParams:
    """Deep-copy online weights into the target every c steps; no-op otherwise."""
    if c < 1:
        raise ValueError("sync period must be >= 1")
    if step % c == 0:
        return clone_params(online)
    return target


def _burned_states(
    online: NetworkParams, target: NetworkParams, sample: BatchSample
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    b = sample.obs.shape[0]
    st_o = zero_state(online.config, batch=b)
    st_t = zero_state(target.config, batch=b)
    for k in range(sample.burn_obs.shape[1]):
        ob = sample.burn_obs[:, k]
        st_o = step_batch(online, st_o, ob, want_q=False).h
        st_t = step_batch(target, st_t, ob, want_q=False).h
    return st_o, st_t


def _layer_targets(
    online_q_next: list[np.ndarray],
    target_q_next: list[np.ndarray],
    reward: np.ndarray,
    terminal: np.ndarray,
    gamma: float,
    quantiles: int,
    averaged_action: bool = False,
) -> list[np.ndarray]:
    """Per-layer double-Q targets; truncation bootstraps, true terminals do not.

    The bootstrap action comes from the online network: each layer's own
    argmax by default, or the layer-averaged argmax (the acting policy's
    choice) for every layer when averaged_action is set.
    """
    bootstrap = gamma * (~terminal).astype(np.float32)
    rows = np.arange(reward.shape[0])
    a_shared = (
        np.argmax(network_q_batch(online_q_next), axis=1) if averaged_action else None
    )
    ys = []
    for q_on, q_tg in zip(online_q_next, target_q_next):
        a_star = a_shared if a_shared is not None else np.argmax(quantile_mean(q_on), axis=1)
        if quantiles == 1:
            ys.append(reward + bootstrap * q_tg[rows, a_star, 0])
        else:
            ys.append(reward[:, None] + bootstrap[:, None] * q_tg[rows, a_star, :])
    return ys


def network_q_batch(per_layer_q: list[np.ndarray]) -> np.ndarray:
    """Layer-averaged (B, A) values, same fixed order as network_q."""
    acc = quantile_mean(per_layer_q[0])
    for q in per_layer_q[1:]:
        acc = acc + quantile_mean(q)
    return acc / len(per_layer_q)


def _batch_inputs_and_targets(
    online: NetworkParams,
    target: NetworkParams,
    sample: BatchSample,
    gamma: float,
    averaged_action: bool = False,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Cell inputs at the update step and per-layer TD targets."""
    st_o, st_t = _burned_states(online, target, sample)
    out_j = step_batch(online, st_o, sample.obs, want_q=False, want_x=True)
    out_next = step_batch(online, out_j.h, sample.next_obs, want_q=True)
    tgt_j = step_batch(target, st_t, sample.obs, want_q=False)
    tgt_next = step_batch(target, tgt_j.h, sample.next_obs, want_q=True)
    ys = _layer_targets(
        out_next.q, tgt_next.q, sample.reward, sample.terminal, gamma,
        online.config.quantiles_per_action, averaged_action,
    )
    return out_j.x, ys


def _cell_grad(p: cellmod.CellParams, x, actions, y):
    if p.quantiles_per_action == 1:
        return cellmod.td_grad_batch(p, x, actions, y)
    return cellmod.quantile_grad_batch(p, x, actions, y)


def _apply_grads(
    online: NetworkParams,
    grads: list[cellmod.CellGrad | None],
    opt_states: list[AdamState],
    lr: float,
    max_norm: float,
    layer_mask: list[bool] | None,
) -> None:
    for l, (c, g) in enumerate(zip(online.cells, grads)):
        if layer_mask is not None and not layer_mask[l]:
            continue
        clipped = clip_global_norm(g.tensors(), max_norm)
        new_tensors, opt_states[l] = adam_step(c.tensors(), clipped, opt_states[l], lr)
        c.set_tensors(new_tensors)


def per_layer_td_targets(
    online: NetworkParams,
    target: NetworkParams,
    batch: list[SubTrajectory],
    gamma: float,
) -> list[np.ndarray]:
    """Spec surface over SubTrajectory lists; delegates to the array path."""
    sample = _stack_subtrajectories(batch, online.config.obs_dim)
    _, ys = _batch_inputs_and_targets(online, target, sample, gamma)
    return ys


def _stack_subtrajectories(batch: list[SubTrajectory], obs_dim: int) -> BatchSample:
    if not batch:
        raise ValueError("batch must be non-empty")
    k = max(t.burn_in_len for t in batch)
    k = max(k, 1)
    b = len(batch)
    burn_obs = np.zeros((b, k, obs_dim), dtype=np.float32)
    burn_action = np.zeros((b, k), dtype=np.int64)
    burn_reward = np.zeros((b, k), dtype=np.float32)
    finals = []
    for i, sub in enumerate(batch):
        *burn, last = sub.transitions
        assert len(burn) == sub.burn_in_len
        for j, tr in enumerate(burn):
            col = k - sub.burn_in_len + j
            burn_obs[i, col] = tr.s
            burn_action[i, col] = tr.a
            burn_reward[i, col] = tr.r
        finals.append(last)
    return BatchSample(
        burn_obs=burn_obs,
        burn_len=np.array([t.burn_in_len for t in batch], dtype=np.int64),
        burn_action=burn_action,
        burn_reward=burn_reward,
        obs=np.stack([t.s for t in finals]).astype(np.float32),
        action=np.array([t.a for t in finals], dtype=np.int64),
        reward=np.array([t.r for t in finals], dtype=np.float32),
        next_obs=np.stack([t.s_next for t in finals]).astype(np.float32),
        terminal=np.array([t.terminal for t in finals]),
        truncated=np.array([t.truncated for t in finals]),
    )


def train_step(
    online: NetworkParams,
    target: NetworkParams,
    buf: ReplayBuffer,
    cfg: TrainConfig,
    step: int,
    opt_states: list[AdamState],
    rng: np.random.Generator,
    layer_mask: list[bool] | None = None,
) -> np.ndarray:
    """One sampled batch, one local gradient step per cell; returns per-layer MSE."""
    sample = buf.sample_batch(cfg.batch_size, cfg.seq_len, rng)
    lr = lr_at(cfg.lr, step)
    if cfg.update_all_steps:
        return _train_step_all_positions(online, target, sample, cfg, lr, opt_states, layer_mask)
    if cfg.strict_sequential:
        return _train_step_strict(online, target, sample, cfg, lr, opt_states, layer_mask)
    xs, ys = _batch_inputs_and_targets(
        online, target, sample, cfg.gamma, cfg.averaged_target_action
    )
    losses = np.zeros(len(online.cells))
    grads: list[cellmod.CellGrad] = []
    for l, c in enumerate(online.cells):
        loss, grad = _cell_grad(c, xs[l], sample.action, ys[l])
        losses[l] = loss
        grads.append(grad)
    _apply_grads(online, grads, opt_states, lr, cfg.max_grad_norm, layer_mask)
    return losses


def _train_step_strict(online, target, sample, cfg, lr, opt_states, layer_mask):
    """Algorithm-literal mode: each cell's update feeds recomputed activations upward.

    Burn-in states and the downward (previous-step) channel use pre-update
    weights; the bottom-up channel within the update step is recomputed from
    each cell's post-update weights before the next cell trains.
    """
    cfgn = online.config
    st_o, st_t = _burned_states(online, target, sample)
    pre_j = step_batch(online, st_o, sample.obs, want_q=False)
    tgt_j = step_batch(target, st_t, sample.obs, want_q=False)
    tgt_next = step_batch(target, tgt_j.h, sample.next_obs, want_q=True)
    rows = np.arange(sample.obs.shape[0])
    bootstrap = cfg.gamma * (~sample.terminal).astype(np.float32)
    a_shared = None
    if cfg.averaged_target_action:
        pre_next = step_batch(online, pre_j.h, sample.next_obs, want_q=True)
        a_shared = np.argmax(network_q_batch(pre_next.q), axis=1)
    losses = np.zeros(len(online.cells))
    below_j = sample.obs
    below_next = sample.next_obs
    from .network import _cell_inputs_batch  # local import to reuse the wiring rule

    for l, c in enumerate(online.cells):
        x_j = _cell_inputs_batch(cfgn, l, sample.obs, below_j, st_o)
        x_next = _cell_inputs_batch(cfgn, l, sample.next_obs, below_next, pre_j.h)
        _, q_next = cellmod.forward_batch(c, x_next)
        a_star = a_shared
        if a_star is None:
            a_star = np.argmax(quantile_mean(q_next), axis=1)
        if cfgn.quantiles_per_action == 1:
            y = sample.reward + bootstrap * tgt_next.q[l][rows, a_star, 0]
        else:
            y = sample.reward[:, None] + bootstrap[:, None] * tgt_next.q[l][rows, a_star, :]
        loss, grad = _cell_grad(c, x_j, sample.action, y)
        losses[l] = loss
        grads_full: list = [None] * len(online.cells)
        grads_full[l] = grad
        mask_full = [False] * len(online.cells)
        mask_full[l] = layer_mask[l] if layer_mask is not None else True
        _apply_grads(online, grads_full, opt_states, lr, cfg.max_grad_norm, mask_full)
        _, below_j = cellmod.hidden_batch(c, x_j)
        _, below_next = cellmod.hidden_batch(c, x_next)
        if cfgn.normalize_messages:
            below_j = normalize_message(below_j)
            below_next = normalize_message(below_next)
    return losses


def _train_step_all_positions(online, target, sample, cfg, lr, opt_states, layer_mask):
    """Update every real window position, not just the final one."""
    cfgn = online.config
    b, k = sample.burn_obs.shape[:2]
    rows = np.arange(b)
    # Unroll both networks over the whole window plus the bootstrap step,
    # keeping inputs and predictions at every step.
    st_o = zero_state(cfgn, batch=b)
    st_t = zero_state(cfgn, batch=b)
    xs_per_step, q_on, q_tg = [], [], []
    obs_seq = [sample.burn_obs[:, i] for i in range(k)] + [sample.obs, sample.next_obs]
    for ob in obs_seq:
        out_o = step_batch(online, st_o, ob, want_q=True, want_x=True)
        out_t = step_batch(target, st_t, ob, want_q=True)
        xs_per_step.append(out_o.x)
        q_on.append(out_o.q)
        q_tg.append(out_t.q)
        st_o, st_t = out_o.h, out_t.h

    actions = np.concatenate([sample.burn_action, sample.action[:, None]], axis=1)
    rewards = np.concatenate([sample.burn_reward, sample.reward[:, None]], axis=1)
    real = np.concatenate(
        [np.arange(k)[None, :] >= (k - sample.burn_len)[:, None], np.ones((b, 1), bool)], axis=1
    )
    n_real = float(real.sum())
    losses = np.zeros(len(online.cells))
    grads: list[cellmod.CellGrad | None] = [None] * len(online.cells)
    for pos in range(k + 1):
        mask = real[:, pos]
        if not mask.any():
            continue
        terminal = sample.terminal if pos == k else np.zeros(b, dtype=bool)
        bootstrap = cfg.gamma * (~terminal).astype(np.float32)
        weight = float(mask.sum()) / n_real
        a_shared = (
            np.argmax(network_q_batch(q_on[pos + 1]), axis=1)
            if cfg.averaged_target_action else None
        )
        for l, c in enumerate(online.cells):
            a_star = a_shared
            if a_star is None:
                a_star = np.argmax(quantile_mean(q_on[pos + 1][l]), axis=1)
            if cfgn.quantiles_per_action == 1:
                y = rewards[:, pos] + bootstrap * q_tg[pos + 1][l][rows, a_star, 0]
            else:
                y = rewards[:, pos][:, None] + bootstrap[:, None] * q_tg[pos + 1][l][rows, a_star, :]
            x = xs_per_step[pos][l][mask]
            loss, grad = _cell_grad(c, x, actions[:, pos][mask], y[mask])
            losses[l] += loss * weight
            if grads[l] is None:
                grads[l] = grad
                for t in grads[l].tensors():
                    t *= weight
            else:
                for acc, t in zip(grads[l].tensors(), grad.tensors()):
                    acc += weight * t
    _apply_grads(online, grads, opt_states, lr, cfg.max_grad_norm, layer_mask)
    return losses


# ---------------------------------------------------------------------------
# Full training runs
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    params: object  # NetworkParams or MlpParams
    episode_returns: list[float]
    final_eval_returns: list[float]


def _derive_seeds(seed: int) -> dict[str, int]:
    ss = np.random.SeedSequence(seed)
    names = ["init", "act", "replay", "env", "eval"]
    return {n: int(c.generate_state(1)[0]) for n, c in zip(names, ss.spawn(len(names)))}


def greedy_returns(
    act_greedy: Callable[[np.ndarray, object], tuple[int, object]],
    init_state: Callable[[], object],
    env: Env,
    episodes: int,
    seed_base: int,
) -> list[tuple[float, int]]:
    """Greedy (eps = 0) episode returns and lengths; one reseed per episode."""
    out = []
    for ep in range(episodes):
        obs = env.reset(seed=(seed_base + ep) % (2**63))
        state = init_state()
        total, length, done = 0.0, 0, False
        while not done:
            action, state = act_greedy(obs, state)
            obs, r, term, trunc = env.step(action)
            total += r
            length += 1
            done = term or trunc
        out.append((total, length))
    return out


def run_training(
    env_factory: Callable[[], Env],
    net_cfg: NetworkConfig | None,
    cfg: TrainConfig,
    seed: int,
    *,
    model: str = "cells",
    mlp_hidden: tuple[int, ...] = (),
    metrics=None,
    eval_metrics=None,
    checkpoint_path=None,
    save_fn: Callable | None = None,
) -> RunResult:
    """Run the full acting/replay/update loop; deterministic per seed.

    metrics / eval_metrics are row sinks with a write(dict) method (or None).
    """
    env = env_factory()
    spec = env.spec
    seeds = _derive_seeds(seed)
    act_rng = np.random.default_rng(seeds["act"])
    replay_rng = np.random.default_rng(seeds["replay"])

    if model == "cells":
        if net_cfg is None:
            raise ValueError("cell model needs a NetworkConfig")
        if net_cfg.action_count != spec.action_count or net_cfg.obs_dim != spec.obs_dim:
            raise ValueError(
                f"network config ({net_cfg.obs_dim} obs, {net_cfg.action_count} actions) does not"
                f" match env {spec.name} ({spec.obs_dim} obs, {spec.action_count} actions)"
            )
        params = network_init(net_cfg, seeds["init"])
        target = clone_params(params)
        opt_states = [adam_init(c.tensors()) for c in params.cells]
        n_layers = len(params.cells)

        def init_state():
            return zero_state(net_cfg)

        def act(obs, state, eps):
            return select_action(params, state, obs, eps, act_rng)

        def act_greedy(obs, state):
            per_layer_q, new_state = network_step(params, state, obs)
            return int(np.argmax(network_q(per_layer_q))), new_state

        def update(step):
            return train_step(params, target, buf, cfg, step, opt_states, replay_rng)

        def save(path):
            from .network import save_network

            save_network(path, params)

    elif model == "mlp":
        params = baselinemod.init_mlp(spec.obs_dim, tuple(mlp_hidden), spec.action_count, seeds["init"])
        target = baselinemod.clone_mlp(params)
        opt_states = [adam_init(params.tensors())]
        n_layers = 1

        def init_state():
            return None

        def act(obs, state, eps):
            if act_rng.random() < eps:
                return int(act_rng.integers(spec.action_count)), None
            return int(np.argmax(baselinemod.mlp_forward(params, obs))), None

        def act_greedy(obs, state):
            return int(np.argmax(baselinemod.mlp_forward(params, obs))), None

        def update(step):
            return baselinemod.train_step_mlp(params, target, buf, cfg, step, opt_states, replay_rng)

        def save(path):
            baselinemod.save_mlp(path, params)

    else:
        raise ValueError(f"unknown model {model!r}")

    if save_fn is None:
        save_fn = save

    buf = ReplayBuffer(cfg.buffer_capacity, spec.obs_dim, obs_dtype=spec.obs_storage_dtype)
    obs = env.reset(seed=seeds["env"])
    state = init_state()
    episode_idx = 0
    ep_return, ep_length = 0.0, 0
    loss_sums = np.zeros(n_layers)
    loss_count = 0
    episode_returns: list[float] = []
    eval_env = env_factory()
    eval_counter = 0

    def run_eval(step, phase, episodes):
        nonlocal eval_counter
        results = greedy_returns(
            act_greedy, init_state, eval_env, episodes, seeds["eval"] + eval_counter
        )
        eval_counter += episodes
        if eval_metrics is not None:
            for i, (ret, length) in enumerate(results):
                eval_metrics.write(
                    {"step": step, "phase": phase, "episode": i, "return": ret, "length": length}
                )
        return [r for r, _ in results]

    for step_i in range(cfg.total_steps):
        eps = epsilon_at(cfg, step_i)
        action, state = act(obs, state, eps)
        obs2, r, term, trunc = env.step(action)
        buf.push(Transition(s=obs, a=action, r=r, s_next=obs2, terminal=term, truncated=trunc))
        ep_return += r
        ep_length += 1
        if term or trunc:
            episode_returns.append(ep_return)
            if metrics is not None:
                row = {
                    "step": step_i + 1,
                    "episode": episode_idx,
                    "episode_return": ep_return,
                    "episode_length": ep_length,
                    "epsilon": eps,
                    "lr": lr_at(cfg.lr, step_i),
                }
                for l in range(n_layers):
                    row[f"loss_layer_{l + 1}"] = (
                        loss_sums[l] / loss_count if loss_count else None
                    )
                metrics.write(row)
            loss_sums[:] = 0.0
            loss_count = 0
            episode_idx += 1
            ep_return, ep_length = 0.0, 0
            obs = env.reset()
            state = init_state()
        else:
            obs = obs2
        if (step_i + 1) % cfg.train_freq == 0 and buf.size >= cfg.warmup_transitions:
            losses = update(step_i)
            loss_sums += losses
            loss_count += 1
        if (step_i + 1) % cfg.target_sync == 0:
            if model == "cells":
                target = clone_params(params)
            else:
                target = baselinemod.clone_mlp(params)
        if cfg.eval_every and (step_i + 1) % cfg.eval_every == 0:
            run_eval(step_i + 1, "periodic", cfg.eval_episodes)
        if (
            checkpoint_path is not None
            and cfg.checkpoint_every
            and (step_i + 1) % cfg.checkpoint_every == 0
        ):
            save_fn(checkpoint_path)

    final_eval = (
        run_eval(cfg.total_steps, "final", cfg.final_eval_episodes)
        if cfg.final_eval_episodes
        else []
    )
    if checkpoint_path is not None:
        save_fn(checkpoint_path)
    return RunResult(params=params, episode_returns=episode_returns, final_eval_returns=final_eval)
