"""PPO fine-tuning against a snapshot opponent pool.

Advantage estimation supports two modes: classic GAE, which discounts
TD residuals to the end of the episode, and a truncated variant that
cuts the residual sum off after a fixed horizon L. With terminal-only
rewards the truncated estimator trades a little bias for substantially
less value-noise accumulation on long games; L = infinity recovers GAE.

Value targets are advantage + V(s_t) in both modes. Policy updates use
the clipped surrogate objective with advantage normalization per update
batch, an entropy bonus over legal actions only, and a squared-error
value loss, all drawn from a single forward pass per minibatch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .encoding import NUM_ACTIONS, encode, legality_mask
from .errors import ConfigError, DomainError
from .models import (Network, PolicyHead, factorized_codec, infer,
                     joint_policy_logits, load, sample_move)
from .pool import DRAW, LOSS, WIN, Pool, PoolConfig
from .rules import (Move, Outcome, Position, Side, move_from_iccs,
                    outcome_score)

# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


class AdvMode(Enum):
    GAE = "gae"
    VECT = "vect"


@dataclass
class AdvConfig:
    mode: AdvMode = AdvMode.VECT
    gamma: float = 1.0
    lam: float = 0.95
    horizon: Optional[int] = 20  # None means unbounded (equivalent to GAE)

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must be in (0, 1]")
        if not 0 <= self.lam <= 1:
            raise ConfigError("lambda must be in [0, 1]")
        if self.horizon is not None and self.horizon < 0:
            raise ConfigError("horizon must be None or >= 0")


@dataclass
class PPOConfig:
    clip_eps: float = 0.2
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    epochs: int = 3
    minibatch_size: int = 128
    games_per_iter: int = 16
    tau_train: float = 1.0
    max_plies: int = 400
    lr: float = 1e-3

    def __post_init__(self):
        if self.clip_eps <= 0:
            raise ConfigError("clip_eps must be > 0")
        if self.entropy_coef < 0 or self.value_coef < 0:
            raise ConfigError("loss coefficients must be >= 0")
        if self.epochs < 1 or self.minibatch_size < 1 or self.games_per_iter < 1:
            raise ConfigError("epochs, minibatch_size, games_per_iter must be >= 1")
        if self.tau_train <= 0:
            raise ConfigError("tau_train must be > 0")
        if self.max_plies < 1:
            raise ConfigError("max_plies must be >= 1")


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    """One player's decision steps through one episode.

    Rewards are terminal-only: zero everywhere except the last step,
    which carries the game result from this player's perspective.
    bootstrap_value is V(s_T); it is 0 at a true terminal state.
    """

    obs: np.ndarray            # (T, 10, 9, planes) float32
    masks: np.ndarray          # (T, NUM_ACTIONS) bool
    slots: Optional[np.ndarray]  # (T, NUM_ACTIONS) int64, factorized head only
    actions: np.ndarray        # (T,) int64 joint action indices
    log_probs: np.ndarray      # (T,) float64, behavior policy
    rewards: np.ndarray        # (T,) float64
    values: np.ndarray         # (T,) float64, V(s_t) at collection time
    dones: np.ndarray          # (T,) bool, True only at the last step
    bootstrap_value: float = 0.0

    def __post_init__(self):
        n = len(self.actions)
        if n == 0:
            raise DomainError("trajectory has no steps")
        fields = (self.obs, self.masks, self.actions, self.log_probs,
                  self.rewards, self.values, self.dones)
        if any(len(f) != n for f in fields):
            raise DomainError("trajectory field lengths disagree")
        if np.any(self.rewards[:-1] != 0):
            raise DomainError("rewards must be zero before the terminal step")
        if self.rewards[-1] not in (-1.0, 0.0, 1.0):
            raise DomainError("terminal reward must be -1, 0, or +1")
        if self.dones[:-1].any() or not self.dones[-1]:
            raise DomainError("done must mark exactly the last step")

    def __len__(self) -> int:
        return len(self.actions)


# ---------------------------------------------------------------------------
# Advantage estimation
# ---------------------------------------------------------------------------


def td_residuals(rewards, values, gamma: float, bootstrap: float = 0.0) -> np.ndarray:
    """delta_t = r_t + gamma * V(s_{t+1}) - V(s_t), with V(s_T) = bootstrap."""
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if r.shape != v.shape or r.ndim != 1:
        raise DomainError("rewards and values must be 1-D and the same length")
    v_next = np.append(v[1:], bootstrap)
    return r + gamma * v_next - v


def gae(rewards, values, gamma: float, lam: float, bootstrap: float = 0.0) -> np.ndarray:
    """A_t = sum_{n>=0} (gamma*lam)^n delta_{t+n}, by reverse recursion."""
    d = td_residuals(rewards, values, gamma, bootstrap)
    adv = np.empty_like(d)
    acc = 0.0
    c = gamma * lam
    for t in range(len(d) - 1, -1, -1):
        acc = d[t] + c * acc
        adv[t] = acc
    return adv


def vect(rewards, values, gamma: float, lam: float, horizon: Optional[int],
         bootstrap: float = 0.0) -> np.ndarray:
    """Truncated residual sum: A_t = sum_{n=0}^{L} (gamma*lam)^n delta_{t+n}.

    Terms past the end of the episode are zero, so horizon None (or any
    L >= T-1) covers the full tail. Computed by shifted window sums, so
    A_t never touches residuals beyond t + L.
    """
    d = td_residuals(rewards, values, gamma, bootstrap)
    n_steps = len(d)
    limit = n_steps if horizon is None else min(horizon, n_steps)
    adv = d.copy()
    c = gamma * lam
    w = 1.0
    for n in range(1, limit + 1):
        w *= c
        if n >= n_steps or w == 0.0:
            break
        adv[: n_steps - n] += w * d[n:]
    return adv


def advantages(traj: Trajectory, cfg: AdvConfig) -> Tuple[np.ndarray, np.ndarray]:
    """(advantage, value target) arrays for one trajectory."""
    if cfg.mode is AdvMode.GAE:
        adv = gae(traj.rewards, traj.values, cfg.gamma, cfg.lam,
                  traj.bootstrap_value)
    else:
        adv = vect(traj.rewards, traj.values, cfg.gamma, cfg.lam,
                   cfg.horizon, traj.bootstrap_value)
    return adv, adv + np.asarray(traj.values, dtype=np.float64)


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    """Shift to mean 0, scale to unit std (std floored at 1e-8)."""
    a = np.asarray(adv, dtype=np.float64)
    return (a - a.mean()) / max(float(a.std()), 1e-8)


# ---------------------------------------------------------------------------
# Opening book
# ---------------------------------------------------------------------------


@dataclass
class OpeningBook:
    lines: List[List[Move]]

    def __post_init__(self):
        for i, line in enumerate(self.lines):
            pos = Position.initial()
            for mv in line:
                if pos.terminal() is not None:
                    raise DomainError(f"book line {i} continues past a terminal position")
                pos = pos.apply_move(mv)  # raises IllegalMoveError with context

    @classmethod
    def from_iccs(cls, lines: Sequence[str]) -> "OpeningBook":
        return cls([[move_from_iccs(tok) for tok in text.split()] for text in lines])


def default_book() -> OpeningBook:
    """A handful of mainline first exchanges for rollout variety."""
    return OpeningBook.from_iccs([
        "b2e2 h7e7",  # opposing central cannons
        "b2e2 b9c7",  # central cannon vs. screen horse
        "h2e2 h9g7",
        "c3c4 g6g5",  # soldier openings
        "b0c2 b9c7",  # quiet horse development
    ])


# ---------------------------------------------------------------------------
# Rollout collection
# ---------------------------------------------------------------------------


@dataclass
class Episode:
    moves: List[Move]          # full game record, opening included
    outcome: Outcome
    learner_side: Side
    opening: int               # book line index, -1 when no book
    trajectories: Dict[Side, Trajectory]

    def learner_score(self) -> float:
        """Pool-convention score: win 1, draw 0.5, loss 0."""
        return {1: WIN, 0: DRAW, -1: LOSS}[outcome_score(self.outcome, self.learner_side)]


def _act(net: Network, pos: Position, tau: float, rng):
    """Sample one move; returns the step record for a trajectory."""
    obs = encode(pos, net.cfg.feature_variant)
    mask = legality_mask(pos)
    slots = None
    if net.cfg.policy_head == PolicyHead.FACTORIZED16X90:
        slots = factorized_codec(pos)
    out = infer(net, obs, mask, slots)
    legal = np.flatnonzero(mask)
    logp = np.log(out.probs[legal])
    logp = (logp - logp.max()) / tau
    w = np.exp(logp)
    p = w / w.sum()
    pick = int(rng.choice(len(legal), p=p))
    return (obs, mask, slots, int(legal[pick]), float(np.log(p[pick])),
            out.value)


def _finish_trajectory(steps: list, final_reward: float) -> Trajectory:
    obs, masks, slots, actions, log_probs, values = zip(*steps)
    n = len(steps)
    rewards = np.zeros(n)
    rewards[-1] = final_reward
    dones = np.zeros(n, dtype=bool)
    dones[-1] = True
    return Trajectory(
        obs=np.stack(obs),
        masks=np.stack(masks),
        slots=None if slots[0] is None else np.stack(slots),
        actions=np.array(actions, dtype=np.int64),
        log_probs=np.array(log_probs),
        rewards=rewards,
        values=np.array(values),
        dones=dones,
        bootstrap_value=0.0,
    )


def collect(learner: Network, opponent: Network, book: Optional[OpeningBook],
            n_games: int, rng, *, tau_train: float = 1.0, tau_opp: float = 0.5,
            max_plies: int = 400) -> List[Episode]:
    """Play n_games and record the learner's decision steps.

    Colors alternate game to game; each game opens with a uniformly
    chosen book line played verbatim by both sides (no steps recorded).
    When opponent is the learner object itself, both sides' steps are
    recorded as separate per-player trajectories.
    """
    if tau_train <= 0:
        raise ConfigError("tau_train must be > 0 to define behavior log-probs")
    self_play = opponent is learner
    episodes = []
    for g in range(n_games):
        learner_side = Side.RED if g % 2 == 0 else Side.BLACK
        pos = Position.initial()
        moves: List[Move] = []
        opening = -1
        if book is not None and book.lines:
            opening = int(rng.integers(len(book.lines)))
            for mv in book.lines[opening]:
                pos = pos.apply_move_unchecked(mv)
                moves.append(mv)
        buffers: Dict[Side, list] = {}
        while (outcome := pos.terminal(draw_move_cap=max_plies)) is None:
            side = pos.side_to_move
            if side == learner_side or self_play:
                step = _act(learner, pos, tau_train, rng)
                buffers.setdefault(side, []).append(step)
                mv = Move(step[3] // 90, step[3] % 90)
            else:
                mv = sample_move(opponent, pos, tau_opp, rng)
            pos = pos.apply_move_unchecked(mv)
            moves.append(mv)
        trajectories = {
            side: _finish_trajectory(steps, float(outcome_score(outcome, side)))
            for side, steps in buffers.items()
        }
        episodes.append(Episode(moves=moves, outcome=outcome,
                                learner_side=learner_side, opening=opening,
                                trajectories=trajectories))
    return episodes


# ---------------------------------------------------------------------------
# PPO update
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    obs: np.ndarray
    masks: np.ndarray
    slots: Optional[np.ndarray]
    actions: np.ndarray
    old_log_probs: np.ndarray
    advantages: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)


def build_batch(trajectories: Sequence[Trajectory], cfg: AdvConfig) -> Batch:
    if not trajectories:
        raise DomainError("no trajectories to batch")
    per = [advantages(t, cfg) for t in trajectories]
    slots = None
    if trajectories[0].slots is not None:
        slots = np.concatenate([t.slots for t in trajectories])
    return Batch(
        obs=np.concatenate([t.obs for t in trajectories]),
        masks=np.concatenate([t.masks for t in trajectories]),
        slots=slots,
        actions=np.concatenate([t.actions for t in trajectories]),
        old_log_probs=np.concatenate([t.log_probs for t in trajectories]),
        advantages=np.concatenate([a for a, _ in per]),
        targets=np.concatenate([tg for _, tg in per]),
    )


def ppo_losses(net, batch: Batch, idx: np.ndarray, norm_adv: np.ndarray,
               cfg: PPOConfig):
    """Per-minibatch loss terms from one forward pass.

    Returns (policy_loss, value_loss, entropy) Tensors plus the ratio
    array for diagnostics. Entropy is over legal actions only; masked
    logits receive exactly zero gradient.
    """
    obs_t = Tensor(batch.obs[idx].astype(ad.current_dtype()))
    policy, value = net.forward_batch(obs_t)
    joint = joint_policy_logits(policy, None if batch.slots is None
                                else batch.slots[idx])
    if cfg.tau_train != 1.0:
        joint = joint * (1.0 / cfg.tau_train)
    mask = batch.masks[idx]
    lp = ad.masked_log_softmax(joint, mask)
    new_lp = ad.take_along_last(lp, batch.actions[idx][:, None])
    ratio = (new_lp - batch.old_log_probs[idx][:, None]).exp()
    adv = norm_adv[idx][:, None]
    clipped = ad.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)
    policy_loss = -(ad.minimum(ratio * adv, clipped * adv).mean())
    value_loss = ((value - batch.targets[idx][:, None]) ** 2).mean()
    entropy = -((lp.exp() * lp * mask.astype(lp.data.dtype)).sum(axis=-1)).mean()
    return policy_loss, value_loss, entropy, ratio.data[:, 0]


def ppo_update(net, optimizer: Adam, batch: Batch, cfg: PPOConfig, rng) -> dict:
    """Run cfg.epochs of minibatched clipped-surrogate updates.

    Advantages are normalized once over the whole batch. Returns stats
    averaged over all minibatch passes: clip_fraction, approx_kl,
    entropy, policy_loss, value_loss.
    """
    norm_adv = normalize_advantages(batch.advantages)
    n = len(batch)
    sums = {"clip_fraction": 0.0, "approx_kl": 0.0, "entropy": 0.0,
            "policy_loss": 0.0, "value_loss": 0.0}
    seen = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            idx = perm[start:start + cfg.minibatch_size]
            p_loss, v_loss, ent, ratio = ppo_losses(net, batch, idx, norm_adv, cfg)
            loss = p_loss + cfg.value_coef * v_loss - cfg.entropy_coef * ent
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            k = len(idx)
            sums["clip_fraction"] += k * float(np.mean(np.abs(ratio - 1) > cfg.clip_eps))
            new_lp = np.log(ratio) + batch.old_log_probs[idx]
            sums["approx_kl"] += k * float(np.mean(batch.old_log_probs[idx] - new_lp))
            sums["entropy"] += k * ent.item()
            sums["policy_loss"] += k * p_loss.item()
            sums["value_loss"] += k * v_loss.item()
            seen += k
    return {key: val / seen for key, val in sums.items()}


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class RLResult:
    net: Network
    optimizer: Adam
    pool: Pool
    history: List[dict] = field(default_factory=list)


def rl_train(sl_checkpoint, iterations: int, *, ppo: PPOConfig = None,
             adv: AdvConfig = None, pool_cfg: PoolConfig = None,
             book: Optional[OpeningBook] = None, seed: int = 0,
             metrics_path=None, pool_dir=None) -> RLResult:
    """Iterate select-opponent / collect / update / gate from an SL start.

    Zero iterations returns the supervised checkpoint unchanged. Pool
    snapshots are written next to the checkpoint unless pool_dir is
    given. Metrics go to metrics_path as one JSON object per iteration.
    """
    ppo = ppo or PPOConfig()
    adv = adv or AdvConfig()
    pool_cfg = pool_cfg or PoolConfig()
    net = load(sl_checkpoint)
    if pool_dir is None:
        pool_dir = Path(sl_checkpoint).parent / "pool"
    Path(pool_dir).mkdir(parents=True, exist_ok=True)
    pool = Pool.init(sl_checkpoint, pool_cfg, directory=pool_dir)
    optimizer = Adam(net.params(), lr=ppo.lr)
    rng = np.random.default_rng(seed)
    result = RLResult(net=net, optimizer=optimizer, pool=pool)
    opponents: Dict[int, Network] = {}
    out = open(metrics_path, "a") if metrics_path is not None else None
    try:
        for it in range(iterations):
            entry = pool.select(rng)
            if entry.entry_id not in opponents:
                opponents[entry.entry_id] = load(entry.path)
            eps = collect(net, opponents[entry.entry_id], book,
                          ppo.games_per_iter, rng, tau_train=ppo.tau_train,
                          tau_opp=pool_cfg.tau_opp, max_plies=ppo.max_plies)
            trajs = [ep.trajectories[ep.learner_side] for ep in eps
                     if ep.learner_side in ep.trajectories]
            stats = ppo_update(net, optimizer, build_batch(trajs, adv), ppo, rng)
            wdl = {WIN: 0, DRAW: 0, LOSS: 0}
            for ep in eps:
                score = ep.learner_score()
                pool.record_result(entry.entry_id, score)
                wdl[score] += 1
            gated = pool.maybe_gate(net)
            row = {
                "iteration": it,
                "opponent": entry.entry_id,
                "games": len(eps),
                "mean_length": float(np.mean([len(ep.moves) for ep in eps])),
                "wins": wdl[WIN], "draws": wdl[DRAW], "losses": wdl[LOSS],
                "gated": gated,
                "pool": [{"id": e.entry_id, "r": e.r, "games": e.games}
                         for e in pool.entries],
                **stats,
            }
            result.history.append(row)
            if out is not None:
                out.write(json.dumps(row, sort_keys=True) + "\n")
                out.flush()
    finally:
        if out is not None:
            out.close()
    return result


# ---------------------------------------------------------------------------
# Estimator ablation plumbing
# ---------------------------------------------------------------------------


def ablation_arms(horizons=(5, 10, 20, 50, None), gamma: float = 1.0,
                  lam: float = 0.95) -> Dict[str, AdvConfig]:
    arms = {"gae": AdvConfig(mode=AdvMode.GAE, gamma=gamma, lam=lam)}
    for h in horizons:
        name = f"vect-{'inf' if h is None else h}"
        arms[name] = AdvConfig(mode=AdvMode.VECT, gamma=gamma, lam=lam, horizon=h)
    return arms


def run_ablation(sl_checkpoint, iterations: int,
                 arms: Optional[Dict[str, AdvConfig]] = None,
                 **train_kw) -> Dict[str, List[dict]]:
    """Paired training runs (same seed) per advantage configuration.

    Returns each arm's metrics history; win-rate curves come from the
    per-iteration W/D/L counts.
    """
    arms = arms or ablation_arms()
    return {name: rl_train(sl_checkpoint, iterations, adv=cfg, **train_kw).history
            for name, cfg in arms.items()}
