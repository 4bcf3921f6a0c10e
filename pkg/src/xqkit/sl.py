"""Supervised phase: masked cross-entropy on expert moves plus a value
auxiliary trained on the position after the chosen move.

The value head learns outcomes in the mover-relative convention used
everywhere else: the target for the successor position is the final result
seen by the player to move there, i.e. minus the sampled player's result.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .encoding import (FeatureVariant, encode, legality_mask, move_to_index)
from .errors import ConfigError, DomainError, FormatError, IllegalLabelError
from .models import (Network, NetConfig, PolicyHead, build, factorized_codec,
                     joint_policy_logits)
from .models import load as load_net
from .models import save as save_net
from .records import (GameRecord, SampleCurve, SampleMode, SamplePoint,
                      sample_weight)
from .rules import Move

_DEFAULT_CURVE = SampleCurve()


@dataclass
class SLConfig:
    batch_size: int = 16
    steps: int = 200
    lr: float = 1e-3
    aux_weight: float = 0.5
    sampling: SampleMode = SampleMode.CURVE
    feature_variant: FeatureVariant = FeatureVariant.BOARD_ALLY_ENEMY
    eval_fraction: float = 0.1
    log_every: int = 50

    def __post_init__(self):
        if self.aux_weight < 0:
            raise ConfigError("aux_weight must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if not 0.0 <= self.eval_fraction < 1.0:
            raise ConfigError("eval_fraction must be in [0, 1)")


@dataclass
class StageMetrics:
    """Top-1 accuracy split by game phase (thirds of each game's length).

    An accuracy is None when its bucket received no samples.
    """

    accuracy_first: Optional[float]
    accuracy_mid: Optional[float]
    accuracy_last: Optional[float]
    count_first: int
    count_mid: int
    count_last: int

    @property
    def overall(self) -> Optional[float]:
        total = self.count_first + self.count_mid + self.count_last
        if total == 0:
            return None
        correct = 0.0
        for acc, count in ((self.accuracy_first, self.count_first),
                           (self.accuracy_mid, self.count_mid),
                           (self.accuracy_last, self.count_last)):
            if count:
                correct += acc * count
        return correct / total

    def as_dict(self) -> Dict:
        return {
            "acc_first": self.accuracy_first,
            "acc_mid": self.accuracy_mid,
            "acc_last": self.accuracy_last,
            "count_first": self.count_first,
            "count_mid": self.count_mid,
            "count_last": self.count_last,
        }


def stage_of(t: int, total: int) -> str:
    if 3 * t < total:
        return "first"
    if 3 * t < 2 * total:
        return "mid"
    return "last"


def all_samples(records: Sequence[GameRecord]) -> List[SamplePoint]:
    """Every ply of every record as a SamplePoint."""
    out = []
    for rec in records:
        positions = rec.replay()
        for t in range(rec.num_plies):
            out.append(SamplePoint(
                position=positions[t],
                chosen_move=rec.move_at(t),
                final_result=rec.result_for(positions[t].side_to_move),
                t=t,
                total=rec.num_plies,
            ))
    return out


class BatchSampler:
    """Game-uniform, step-weighted sampling with replayed positions cached.

    Matches the distribution of records.draw_samples but amortizes each
    game's replay across the whole training run.
    """

    def __init__(self, records: Sequence[GameRecord], mode: SampleMode,
                 curve: SampleCurve = _DEFAULT_CURVE):
        if not records:
            raise DomainError("dataset is empty")
        self.records = list(records)
        for i, rec in enumerate(self.records):
            if rec.num_plies == 0:
                raise DomainError(f"record {i} has no moves to sample")
        self.mode = mode
        self.curve = curve
        self._positions: Dict[int, list] = {}
        self._weights: Dict[int, np.ndarray] = {}

    def _step_weights(self, g: int) -> np.ndarray:
        w = self._weights.get(g)
        if w is None:
            total = self.records[g].num_plies
            if self.mode == SampleMode.CURVE:
                w = np.array([self.curve.weight(t, total) for t in range(total)])
                w = w / w.sum()
            else:
                w = np.full(total, 1.0 / total)
            self._weights[g] = w
        return w

    def _position(self, g: int, t: int):
        positions = self._positions.get(g)
        if positions is None:
            positions = self.records[g].replay()
            self._positions[g] = positions
        return positions[t]

    def draw(self, n: int, rng: np.random.Generator) -> List[SamplePoint]:
        games = rng.integers(0, len(self.records), size=n)
        out = []
        for g in games.tolist():
            rec = self.records[g]
            total = rec.num_plies
            t = int(rng.choice(total, p=self._step_weights(g)))
            pos = self._position(g, t)
            out.append(SamplePoint(
                position=pos,
                chosen_move=rec.move_at(t),
                final_result=rec.result_for(pos.side_to_move),
                t=t,
                total=total,
            ))
        return out


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def _batch_arrays(net: Network, samples: Sequence[SamplePoint]):
    fv = net.cfg.feature_variant
    obs = np.stack([encode(s.position, fv) for s in samples])
    masks = np.stack([legality_mask(s.position) for s in samples])
    labels = np.empty(len(samples), dtype=np.int64)
    for i, s in enumerate(samples):
        idx = move_to_index(s.chosen_move)
        if not masks[i, idx]:
            raise IllegalLabelError(
                f"sample {i}: move {s.chosen_move} not legal in its position")
        labels[i] = idx
    slots = None
    if net.cfg.policy_head == PolicyHead.FACTORIZED16X90:
        slots = np.stack([factorized_codec(s.position) for s in samples])
    return obs, masks, labels, slots


def _policy_log_probs(net: Network, obs, masks, slots) -> Tensor:
    policy, _ = net.forward_batch(Tensor(obs.astype(ad.current_dtype())))
    joint = joint_policy_logits(policy, slots)
    return ad.masked_log_softmax(joint, masks)


def sl_loss(net: Network, samples: Sequence[SamplePoint],
            aux_weight: float = 0.5) -> Tuple[Tensor, Dict]:
    """Combined loss tensor plus plain-float diagnostics.

    Backpropagate through the returned tensor to get gradients. With
    aux_weight == 0 the successor forward pass is skipped entirely and the
    loss is exactly the policy cross-entropy.
    """
    obs, masks, labels, slots = _batch_arrays(net, samples)
    lp = _policy_log_probs(net, obs, masks, slots)
    picked = ad.take_along_last(lp, labels[:, None])
    ce = -picked.mean()
    stats = {"ce": float(ce.data), "correct": _top1_correct(lp.data, masks, labels)}
    if aux_weight == 0:
        stats["aux"] = 0.0
        return ce, stats
    fv = net.cfg.feature_variant
    succ_obs = np.stack([
        encode(s.position.apply_move_unchecked(s.chosen_move), fv)
        for s in samples
    ])
    targets = np.array([[-s.final_result] for s in samples])
    value = net.forward_value(Tensor(succ_obs.astype(ad.current_dtype())))
    diff = value - targets.astype(ad.current_dtype())
    aux = (diff * diff).mean()
    stats["aux"] = float(aux.data)
    return ce + aux_weight * aux, stats


def _top1_correct(lp_data: np.ndarray, masks: np.ndarray,
                  labels: np.ndarray) -> int:
    correct = 0
    for row, mask, label in zip(lp_data, masks, labels):
        legal = np.flatnonzero(mask)
        if legal[np.argmax(row[legal])] == label:
            correct += 1
    return correct


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def evaluate_stagewise(net: Network, samples: Sequence[SamplePoint],
                       batch_size: int = 64) -> StageMetrics:
    correct = {"first": 0, "mid": 0, "last": 0}
    count = {"first": 0, "mid": 0, "last": 0}
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        obs, masks, labels, slots = _batch_arrays(net, chunk)
        lp = _policy_log_probs(net, obs, masks, slots).data
        for i, s in enumerate(chunk):
            stage = stage_of(s.t, s.total)
            count[stage] += 1
            legal = np.flatnonzero(masks[i])
            if legal[np.argmax(lp[i, legal])] == labels[i]:
                correct[stage] += 1

    def acc(stage):
        return correct[stage] / count[stage] if count[stage] else None

    return StageMetrics(
        accuracy_first=acc("first"), accuracy_mid=acc("mid"),
        accuracy_last=acc("last"), count_first=count["first"],
        count_mid=count["mid"], count_last=count["last"])


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def split_records(records: Sequence[GameRecord], eval_fraction: float,
                  seed: int) -> Tuple[List[GameRecord], List[GameRecord]]:
    """Deterministic game-level train/eval split (no position leakage)."""
    order = np.random.default_rng(seed).permutation(len(records))
    n_eval = int(round(eval_fraction * len(records)))
    if n_eval >= len(records):
        n_eval = len(records) - 1
    eval_ids = set(order[:n_eval].tolist())
    train = [r for i, r in enumerate(records) if i not in eval_ids]
    evals = [r for i, r in enumerate(records) if i in eval_ids]
    return train, evals


@dataclass
class TrainResult:
    net: Network
    optimizer: Adam
    history: List[Dict]
    step: int
    rng_state: Dict


def train(records: Sequence[GameRecord], cfg: SLConfig, net_cfg: NetConfig,
          seed: int = 0, metrics_path=None, curve: SampleCurve = _DEFAULT_CURVE,
          resume: Optional[TrainResult] = None) -> TrainResult:
    """Run cfg.steps optimizer steps; deterministic given the seed.

    Pass a previous TrainResult as `resume` to continue the same run: the
    trajectory of a resumed run is identical to one long run because the
    sampler RNG state travels with the result.
    """
    if not records:
        raise DomainError("dataset is empty")
    if net_cfg.feature_variant != cfg.feature_variant:
        raise ConfigError("network and trainer feature variants differ")
    train_recs, eval_recs = split_records(records, cfg.eval_fraction, seed)
    sampler = BatchSampler(train_recs, cfg.sampling, curve)
    eval_samples = all_samples(eval_recs)

    if resume is not None:
        net, opt, step0 = resume.net, resume.optimizer, resume.step
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
    else:
        net = build(net_cfg, seed=seed)
        opt = Adam(net.params(), lr=cfg.lr)
        step0 = 0
        rng = np.random.default_rng(seed + 1)

    history: List[Dict] = []
    sink = open(metrics_path, "w") if metrics_path is not None else None
    try:
        for step in range(step0, cfg.steps):
            batch = sampler.draw(cfg.batch_size, rng)
            loss, stats = sl_loss(net, batch, cfg.aux_weight)
            opt.zero_grad()
            loss.backward()
            opt.step()
            is_last = step == cfg.steps - 1
            if (step + 1) % cfg.log_every == 0 or is_last:
                row = {"step": step + 1, "loss": float(loss.data),
                       "ce": stats["ce"], "aux": stats["aux"],
                       "batch_acc": stats["correct"] / len(batch)}
                if eval_samples:
                    row.update(evaluate_stagewise(net, eval_samples).as_dict())
                history.append(row)
                if sink is not None:
                    sink.write(json.dumps(row, sort_keys=True) + "\n")
    finally:
        if sink is not None:
            sink.close()
    return TrainResult(net=net, optimizer=opt, history=history,
                       step=cfg.steps, rng_state=rng.bit_generator.state)


_OPT_MAGIC = b"XQOP"
_OPT_VERSION = 1


def save_trainer_state(result: TrainResult, path) -> None:
    """Network checkpoint plus a .opt sidecar with optimizer and RNG.

    The sidecar is a JSON header followed by raw little-endian array
    payloads, so identical states serialize to identical bytes (an npz
    zip would embed wall-clock timestamps).
    """
    save_net(result.net, path)
    state = result.optimizer.state_arrays()
    arrays = [(k, np.asarray(state[k])) for k in sorted(state)]
    meta = {
        "step": result.step, "rng_state": result.rng_state,
        "lr": result.optimizer.lr,
        "arrays": [[k, list(a.shape), a.dtype.str] for k, a in arrays],
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(str(path) + ".opt", "wb") as fh:
        fh.write(_OPT_MAGIC)
        fh.write(struct.pack("<II", _OPT_VERSION, len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(a.astype(a.dtype.newbyteorder("<")).tobytes())


def load_trainer_state(path, expect_config: Optional[NetConfig] = None) -> TrainResult:
    net = load_net(path, expect_config)
    raw = Path(str(path) + ".opt").read_bytes()
    if len(raw) < 12 or raw[:4] != _OPT_MAGIC:
        raise FormatError(f"{path}.opt: not an optimizer sidecar (bad magic)")
    version, header_len = struct.unpack_from("<II", raw, 4)
    if version != _OPT_VERSION:
        raise FormatError(f"{path}.opt: unsupported version {version}")
    meta = json.loads(raw[12:12 + header_len].decode("utf-8"))
    offset = 12 + header_len
    state = {}
    for key, shape, dtype_str in meta["arrays"]:
        dt = np.dtype(dtype_str)
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        chunk = raw[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise FormatError(f"{path}.opt: truncated payload at {key!r}")
        state[key] = np.frombuffer(chunk, dtype=dt).reshape(shape)
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}.opt: {len(raw) - offset} trailing bytes")
    opt = Adam(net.params(), lr=meta["lr"])
    opt.load_state_arrays(state)
    return TrainResult(net=net, optimizer=opt, history=[], step=meta["step"],
                       rng_state=meta["rng_state"])
