"""Alpha-beta baseline: handcrafted evaluation plus fixed-depth negamax.

The search is plain fail-soft negamax with alpha-beta pruning and a fixed
move order (captures first by MVV-LVA, then flat action index). With that
order and strict improvement updates, the root (score, move) pair is
identical to full-width negamax, which the tests exploit as an oracle.
Scores are integers from the side to move's perspective; wins are scored
MATE - ply so faster mates win comparisons, and in-tree draws score 0.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, Optional, Tuple

from .errors import ConfigError, TerminalPositionError
from .rules import (Move, PieceKind, Position, Side, _legal_moves, code_kind,
                    code_side, piece_code)

MATE = 100_000
_INF = 10 * MATE


@dataclass(frozen=True)
class EvalWeights:
    chariot: int = 900
    cannon: int = 450
    horse: int = 400
    advisor: int = 200
    elephant: int = 200
    soldier: int = 100
    soldier_across_river: int = 200
    general: int = 0
    mobility: int = 2  # per legal move, both sides

    def base(self, kind: PieceKind) -> int:
        return _BASE_ORDER[kind](self)

    def material(self, kind: PieceKind, side: Side, rank: int) -> int:
        if kind == PieceKind.SOLDIER:
            crossed = rank >= 5 if side == Side.RED else rank <= 4
            return self.soldier_across_river if crossed else self.soldier
        return self.base(kind)


_BASE_ORDER = {
    PieceKind.GENERAL: lambda w: w.general,
    PieceKind.ADVISOR: lambda w: w.advisor,
    PieceKind.ELEPHANT: lambda w: w.elephant,
    PieceKind.HORSE: lambda w: w.horse,
    PieceKind.CHARIOT: lambda w: w.chariot,
    PieceKind.CANNON: lambda w: w.cannon,
    PieceKind.SOLDIER: lambda w: w.soldier,
}

DEFAULT_WEIGHTS = EvalWeights()


@lru_cache(maxsize=None)
def _material_table(weights: EvalWeights):
    """Signed value per (piece code, rank), positive for Red."""
    table = [[0] * 10 for _ in range(16)]
    for side in (Side.RED, Side.BLACK):
        sign = 1 if side == Side.RED else -1
        for kind in PieceKind:
            row = table[piece_code(side, kind)]
            for rank in range(10):
                row[rank] = sign * weights.material(kind, side, rank)
    return table


@dataclass
class SearchConfig:
    """depth is exact unless a node or time budget interrupts deepening.

    With budgets set, the search iterates depth 1..depth and returns the
    deepest fully completed result; depth 1 always completes. Results are
    deterministic for depth and max_nodes; time_limit_s trades that away.
    """

    depth: int = 2
    max_nodes: Optional[int] = None
    time_limit_s: Optional[float] = None
    weights: EvalWeights = field(default_factory=EvalWeights)

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("search depth must be >= 1")


@dataclass
class SearchStats:
    nodes: int = 0
    evals: int = 0
    depth_reached: int = 0


def evaluate(pos: Position, weights: EvalWeights = DEFAULT_WEIGHTS) -> int:
    """Material plus mobility from the side to move's perspective."""
    mover = pos.side_to_move
    table = _material_table(weights)
    material = 0
    for flat, code in enumerate(pos.board):
        if code:
            material += table[code][flat // 9]
    if mover == Side.BLACK:
        material = -material
    mobility = (len(pos.legal_moves())
                - len(_legal_moves(list(pos.board), 1 - mover)))
    return material + weights.mobility * mobility


def ordered_moves(pos: Position, weights: EvalWeights = DEFAULT_WEIGHTS):
    """Captures first (MVV-LVA on base values), then flat action index."""

    def key(m: Move):
        victim = pos.board[m.to_sq]
        index = m.from_sq * 90 + m.to_sq
        if victim:
            attacker = pos.board[m.from_sq]
            return (0, -weights.base(code_kind(victim)),
                    weights.base(code_kind(attacker)), index)
        return (1, 0, 0, index)

    return sorted(pos.legal_moves(), key=key)


class _Budget(Exception):
    pass


class _Searcher:
    def __init__(self, cfg: SearchConfig, cache: Optional[Dict] = None):
        self.cfg = cfg
        self.cache = cache if cache is not None else {}
        self.stats = SearchStats()
        self.deadline = None
        self.enforce = False

    def eval_leaf(self, pos: Position) -> int:
        key = (pos.board, pos.side_to_move)
        score = self.cache.get(key)
        if score is None:
            score = evaluate(pos, self.cfg.weights)
            self.cache[key] = score
        self.stats.evals += 1
        return score

    def _check_budget(self):
        if not self.enforce:
            return
        if self.cfg.max_nodes is not None and self.stats.nodes > self.cfg.max_nodes:
            raise _Budget
        if self.deadline is not None and time.monotonic() > self.deadline:
            raise _Budget

    def negamax(self, pos: Position, depth: int, alpha: int, beta: int, ply: int) -> int:
        self.stats.nodes += 1
        self._check_budget()
        legal = pos.legal_moves()
        if not legal:
            return -(MATE - ply)
        if pos.terminal() is not None:
            return 0
        if depth == 0:
            return self.eval_leaf(pos)
        best = -_INF
        for m in ordered_moves(pos, self.cfg.weights):
            value = -self.negamax(pos.apply_move_unchecked(m), depth - 1,
                                  -beta, -alpha, ply + 1)
            if value > best:
                best = value
            if best > alpha:
                alpha = best
            if alpha >= beta:
                break
        return best

    def root(self, pos: Position, depth: int) -> Tuple[int, Move]:
        self.stats.nodes += 1
        best = -_INF
        best_move = None
        alpha = -_INF
        for m in ordered_moves(pos, self.cfg.weights):
            value = -self.negamax(pos.apply_move_unchecked(m), depth - 1,
                                  -_INF, -alpha, 1)
            if value > best:
                best, best_move = value, m
            if value > alpha:
                alpha = value
        return best, best_move


def search_with_stats(pos: Position, cfg: SearchConfig,
                      cache: Optional[Dict] = None) -> Tuple[int, Move, SearchStats]:
    if pos.terminal() is not None:
        raise TerminalPositionError(f"cannot search terminal position {pos.to_fen()}")
    searcher = _Searcher(cfg, cache)
    if cfg.time_limit_s is not None:
        searcher.deadline = time.monotonic() + cfg.time_limit_s
    budgeted = cfg.max_nodes is not None or cfg.time_limit_s is not None
    if not budgeted:
        score, move = searcher.root(pos, cfg.depth)
        searcher.stats.depth_reached = cfg.depth
        return score, move, searcher.stats
    result = None
    for depth in range(1, cfg.depth + 1):
        searcher.enforce = depth > 1  # depth 1 always completes
        try:
            score, move = searcher.root(pos, depth)
        except _Budget:
            break
        result = (score, move)
        searcher.stats.depth_reached = depth
    score, move = result
    return score, move, searcher.stats


def search(pos: Position, cfg: SearchConfig) -> Tuple[int, Move]:
    score, move, _ = search_with_stats(pos, cfg)
    return score, move


class AlphaBetaAgent:
    """Move-selecting wrapper; deterministic at fixed depth.

    Keeps an evaluation cache across calls since consecutive searches in a
    game revisit many leaf positions.
    """

    def __init__(self, cfg: SearchConfig):
        self.cfg = cfg
        self.cache: Dict = {}
        self.name = f"alphabeta:{cfg.depth}"

    def choose(self, pos: Position, rng=None) -> Move:
        _, move, _ = search_with_stats(pos, self.cfg, self.cache)
        return move


def make_baseline_agent(cfg: SearchConfig) -> AlphaBetaAgent:
    return AlphaBetaAgent(cfg)
