"""Dynamic opponent pool: snapshot league with softmax-by-weakness
selection and threshold gating.

Each entry tracks r_i, an EMA of the learner's score against it (win 1,
draw 0.5, loss 0). Selection favors entries the learner still struggles
with: p_i proportional to e^(-r_i / tau_sel). Once the learner's minimum
r_i across the pool clears the gate threshold (with enough games on every
entry), the current network is snapshotted in as a new opponent.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .errors import ConfigError, DomainError, UnknownEntryError

WIN, DRAW, LOSS = 1.0, 0.5, 0.0
_SCORES = (WIN, DRAW, LOSS)


@dataclass
class PoolConfig:
    tau_sel: float = 1.0
    theta: float = 0.55
    tau_opp: float = 0.5
    tau_train: float = 1.0
    alpha_ema: float = 0.05
    min_games: int = 50
    max_size: int = 8

    def __post_init__(self):
        if self.tau_sel < 0:
            raise ConfigError("tau_sel must be >= 0 (0 selects argmin exactly)")
        if not 0.5 <= self.theta < 1:
            raise ConfigError("gate threshold must be in [0.5, 1)")
        if not 0 < self.alpha_ema <= 1:
            raise ConfigError("alpha_ema must be in (0, 1]")
        if self.max_size < 1:
            raise ConfigError("max_size must be >= 1")


@dataclass
class PoolEntry:
    entry_id: int
    path: Optional[str]  # checkpoint ref; None for in-memory test pools
    r: float = 0.5
    games: int = 0
    games_since_gate: int = 0
    is_seed: bool = False


class Pool:
    def __init__(self, cfg: PoolConfig, directory=None):
        self.cfg = cfg
        self.directory = Path(directory) if directory is not None else None
        self.entries: List[PoolEntry] = []
        self.next_id = 0

    # -- construction -------------------------------------------------------

    @classmethod
    def init(cls, sl_checkpoint, cfg: PoolConfig = PoolConfig(),
             directory=None) -> "Pool":
        """Fresh pool seeded with the supervised checkpoint at r = 0.5."""
        pool = cls(cfg, directory)
        pool._add(str(sl_checkpoint) if sl_checkpoint is not None else None,
                  is_seed=True)
        return pool

    def _add(self, path: Optional[str], is_seed: bool = False) -> PoolEntry:
        entry = PoolEntry(entry_id=self.next_id, path=path, is_seed=is_seed)
        self.next_id += 1
        self.entries.append(entry)
        return entry

    # -- queries ------------------------------------------------------------

    def __len__(self) -> int:
        return len(self.entries)

    def entry(self, entry_id: int) -> PoolEntry:
        for e in self.entries:
            if e.entry_id == entry_id:
                return e
        raise UnknownEntryError(f"no pool entry with id {entry_id}")

    def min_rate(self) -> float:
        return min(e.r for e in self.entries)

    def selection_probabilities(self) -> np.ndarray:
        tau = self.cfg.tau_sel
        if tau == 0:
            p = np.zeros(len(self.entries))
            best = min(range(len(self.entries)),
                       key=lambda i: (self.entries[i].r, self.entries[i].entry_id))
            p[best] = 1.0
            return p
        z = np.array([-e.r / tau for e in self.entries])
        z -= z.max()
        w = np.exp(z)
        return w / w.sum()

    def select(self, rng: np.random.Generator) -> PoolEntry:
        if not self.entries:
            raise DomainError("pool is empty")
        p = self.selection_probabilities()
        return self.entries[int(rng.choice(len(self.entries), p=p))]

    # -- updates ------------------------------------------------------------

    def record_result(self, entry_id: int, score: float) -> None:
        """score: 1 win, 0.5 draw, 0 loss, from the learner's perspective."""
        if score not in _SCORES:
            raise DomainError(f"score must be one of {_SCORES}, got {score}")
        e = self.entry(entry_id)
        e.r = (1 - self.cfg.alpha_ema) * e.r + self.cfg.alpha_ema * score
        e.games += 1
        e.games_since_gate += 1

    def gate_ready(self) -> bool:
        return all(e.games_since_gate >= self.cfg.min_games for e in self.entries)

    def maybe_gate(self, current_net=None, save=None) -> bool:
        """Snapshot the current network when it dominates the whole pool.

        Fires iff every entry has min_games since the last gate and
        min_i r_i >= theta. `save(net, path) -> None` writes the snapshot
        when the pool has a directory; in-memory pools skip the write.
        """
        if not self.gate_ready():
            return False
        if self.min_rate() < self.cfg.theta:
            return False
        path = None
        if self.directory is not None:
            path = str(self.directory / f"entry{self.next_id:04d}.ckpt")
            if save is None:
                from .models import save
            save(current_net, path)
        self._add(path)
        if len(self.entries) > self.cfg.max_size:
            self._evict_oldest()
        for e in self.entries:
            e.games_since_gate = 0
        return True

    def _evict_oldest(self) -> None:
        for i, e in enumerate(self.entries):
            if not e.is_seed:
                del self.entries[i]
                return
        raise DomainError("pool has no evictable entry")

    # -- persistence --------------------------------------------------------

    def manifest(self) -> dict:
        return {
            "next_id": self.next_id,
            "config": {
                "tau_sel": self.cfg.tau_sel, "theta": self.cfg.theta,
                "tau_opp": self.cfg.tau_opp, "tau_train": self.cfg.tau_train,
                "alpha_ema": self.cfg.alpha_ema,
                "min_games": self.cfg.min_games, "max_size": self.cfg.max_size,
            },
            "entries": [
                {"id": e.entry_id, "path": e.path, "r": e.r, "games": e.games,
                 "games_since_gate": e.games_since_gate, "seed": e.is_seed}
                for e in self.entries
            ],
        }

    def save_manifest(self, path) -> None:
        Path(path).write_text(json.dumps(self.manifest(), indent=2,
                                         sort_keys=True) + "\n")

    @classmethod
    def load_manifest(cls, path, directory=None) -> "Pool":
        doc = json.loads(Path(path).read_text())
        pool = cls(PoolConfig(**doc["config"]), directory)
        pool.next_id = doc["next_id"]
        for row in doc["entries"]:
            pool.entries.append(PoolEntry(
                entry_id=row["id"], path=row["path"], r=row["r"],
                games=row["games"], games_since_gate=row["games_since_gate"],
                is_seed=row["seed"]))
        return pool
