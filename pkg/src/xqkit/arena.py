"""Head-to-head evaluation: paired-game matches, Wilson intervals, Elo.

Matches run in color-swapped pairs. Both games of a pair share one RNG
seed and (when an opening set is given) one opening, so swapping the two
agents replays exactly the same physical games with the roles reversed;
win and loss counts mirror bit-exactly. Pairs are independent through a
seed stream, which makes reports reproducible regardless of worker
scheduling.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize
from scipy.stats import norm

from .errors import ConfigError, DisconnectedGraphError, DomainError
from .models import Network, sample_move
from .rules import Move, Outcome, Position, Side, outcome_score

_Z95 = float(norm.ppf(0.975))


class Agent(Protocol):
    name: str

    def choose(self, pos: Position, rng=None) -> Move: ...


class RandomAgent:
    """Uniform choice over legal moves."""

    name = "random"

    def choose(self, pos: Position, rng=None) -> Move:
        moves = pos.legal_moves()
        if rng is None:
            raise DomainError("random agent needs a generator")
        return moves[int(rng.integers(len(moves)))]


class NetAgent:
    """Network policy sampled at a fixed temperature (0 plays argmax)."""

    def __init__(self, net: Network, tau: float = 1.0, name: Optional[str] = None):
        self.net = net
        self.tau = tau
        self.name = name if name is not None else f"net:tau={tau:g}"

    def choose(self, pos: Position, rng=None) -> Move:
        return sample_move(self.net, pos, self.tau, rng)


# ---------------------------------------------------------------------------
# Match configuration and report
# ---------------------------------------------------------------------------


@dataclass
class MatchConfig:
    games: int = 100
    tau_a: float = 1.0  # consumed when agents are built from checkpoints
    tau_b: float = 1.0
    openings: Optional[List[List[Move]]] = None
    max_plies: int = 400
    seed: int = 0

    def __post_init__(self):
        if self.games < 2 or self.games % 2:
            raise ConfigError("games must be even (colors alternate in pairs)")
        if self.max_plies < 1:
            raise ConfigError("max_plies must be >= 1")
        if self.openings is not None and len(self.openings) == 0:
            raise ConfigError("opening set must be None or non-empty")


def wilson_interval(successes: int, n: int, z: float = _Z95) -> Tuple[float, float]:
    """Wilson score interval for a binomial proportion; (0, 1) when n = 0."""
    if n == 0:
        return 0.0, 1.0
    p = successes / n
    denom = 1 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = (z / denom) * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n))
    # The interval provably contains the point estimate and lives in
    # [0, 1]; clamping removes last-ulp rounding excursions only.
    return (min(max(0.0, center - half), p), max(min(1.0, center + half), p))


@dataclass
class MatchReport:
    agent_a: str
    agent_b: str
    games: int
    wins: int
    draws: int
    losses: int
    mean_length: float
    per_opening: Dict[int, List[int]] = field(default_factory=dict)

    def __post_init__(self):
        if self.wins + self.draws + self.losses != self.games:
            raise DomainError("win/draw/loss counts must sum to the game count")

    @property
    def win_rate(self) -> float:
        return self.wins / self.games

    @property
    def draw_rate(self) -> float:
        return self.draws / self.games

    @property
    def loss_rate(self) -> float:
        return self.losses / self.games

    @property
    def score(self) -> float:
        """Points fraction for A, draws counting half."""
        return (self.wins + 0.5 * self.draws) / self.games

    def win_rate_interval(self) -> Tuple[float, float]:
        return wilson_interval(self.wins, self.games)

    def draw_rate_interval(self) -> Tuple[float, float]:
        return wilson_interval(self.draws, self.games)

    def format_score(self) -> str:
        """Headline "win%(draw%)" string, e.g. "92.5%(2.8%)"."""
        return f"{100 * self.win_rate:.1f}%({100 * self.draw_rate:.1f}%)"

    def as_dict(self) -> dict:
        lo, hi = self.win_rate_interval()
        dlo, dhi = self.draw_rate_interval()
        return {
            "agent_a": self.agent_a,
            "agent_b": self.agent_b,
            "games": self.games,
            "wins": self.wins,
            "draws": self.draws,
            "losses": self.losses,
            "win_rate": self.win_rate,
            "draw_rate": self.draw_rate,
            "loss_rate": self.loss_rate,
            "win_rate_ci95": [lo, hi],
            "draw_rate_ci95": [dlo, dhi],
            "score": self.score,
            "mean_length": self.mean_length,
            "per_opening": {str(k): v for k, v in sorted(self.per_opening.items())},
            "summary": self.format_score(),
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True, indent=2)


# ---------------------------------------------------------------------------
# Match play
# ---------------------------------------------------------------------------


def _play_game(red: Agent, black: Agent, opening: Optional[List[Move]],
               max_plies: int, rng) -> Tuple[Outcome, int]:
    pos = Position.initial()
    plies = 0
    if opening:
        for mv in opening:
            pos = pos.apply_move_unchecked(mv)
            plies += 1
    while (outcome := pos.terminal(draw_move_cap=max_plies)) is None:
        agent = red if pos.side_to_move == Side.RED else black
        pos = pos.apply_move_unchecked(agent.choose(pos, rng))
        plies += 1
    return outcome, plies


def play_match(agent_a: Agent, agent_b: Agent, cfg: MatchConfig,
               workers: int = 1) -> MatchReport:
    """Play cfg.games in color-swapped pairs and tally results for A.

    Agents must return legal moves. Openings cycle across pairs, each
    played once per color assignment. Workers > 1 plays pairs in
    threads; the report is identical either way.
    """
    n_pairs = cfg.games // 2
    children = np.random.SeedSequence(cfg.seed).spawn(n_pairs)

    def play_pair(p: int) -> List[Tuple[int, Outcome, int, int]]:
        opening_idx = -1
        opening = None
        if cfg.openings is not None:
            opening_idx = p % len(cfg.openings)
            opening = cfg.openings[opening_idx]
        out = []
        for a_red in (True, False):
            rng = np.random.default_rng(children[p])
            red, black = (agent_a, agent_b) if a_red else (agent_b, agent_a)
            outcome, plies = _play_game(red, black, opening, cfg.max_plies, rng)
            a_side = Side.RED if a_red else Side.BLACK
            out.append((opening_idx, outcome, plies, outcome_score(outcome, a_side)))
        return out

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_pair = list(pool.map(play_pair, range(n_pairs)))
    else:
        per_pair = [play_pair(p) for p in range(n_pairs)]

    wins = draws = losses = 0
    lengths = []
    per_opening: Dict[int, List[int]] = {}
    for results in per_pair:
        for opening_idx, outcome, plies, a_score in results:
            slot = per_opening.setdefault(opening_idx, [0, 0, 0])
            if a_score > 0:
                wins += 1
                slot[0] += 1
            elif a_score == 0:
                draws += 1
                slot[1] += 1
            else:
                losses += 1
                slot[2] += 1
            lengths.append(plies)
    return MatchReport(
        agent_a=agent_a.name, agent_b=agent_b.name, games=cfg.games,
        wins=wins, draws=draws, losses=losses,
        mean_length=float(np.mean(lengths)), per_opening=per_opening,
    )


# ---------------------------------------------------------------------------
# Elo ratings
# ---------------------------------------------------------------------------

_ELO_SCALE = math.log(10) / 400


def elo(reports: Sequence[MatchReport], anchor: Optional[str] = None,
        prior: float = 1e-9) -> Dict[str, float]:
    """Maximum-likelihood logistic ratings from a set of match reports.

    Draws count half a point. The anchor agent (lowest name by default)
    is fixed at 0. A vanishingly weak Gaussian prior keeps one-sided
    results finite without visibly moving any estimate (a 75% gap shifts
    by well under 0.001 points). Agents must form a connected graph.
    """
    if not reports:
        raise DomainError("no reports to rate")
    names = sorted({r.agent_a for r in reports} | {r.agent_b for r in reports})
    index = {name: i for i, name in enumerate(names)}
    if anchor is None:
        anchor = names[0]
    if anchor not in index:
        raise DomainError(f"anchor {anchor!r} is not in any report")

    # Connectivity over the undirected comparison graph.
    adjacency = {name: set() for name in names}
    pair_data: Dict[Tuple[int, int], List[float]] = {}
    for r in reports:
        adjacency[r.agent_a].add(r.agent_b)
        adjacency[r.agent_b].add(r.agent_a)
        key = (index[r.agent_a], index[r.agent_b])
        score_n = pair_data.setdefault(key, [0.0, 0.0])
        score_n[0] += r.wins + 0.5 * r.draws
        score_n[1] += r.games
    reached = {anchor}
    frontier = [anchor]
    while frontier:
        nxt = adjacency[frontier.pop()] - reached
        reached |= nxt
        frontier.extend(nxt)
    if reached != set(names):
        missing = sorted(set(names) - reached)
        raise DisconnectedGraphError(
            f"agents {missing} share no comparison path with {anchor!r}")

    k = len(names)
    a_idx = np.array([key[0] for key in pair_data])
    b_idx = np.array([key[1] for key in pair_data])
    scores = np.array([v[0] for v in pair_data.values()])
    counts = np.array([v[1] for v in pair_data.values()])
    anchor_i = index[anchor]
    free = [i for i in range(k) if i != anchor_i]

    def unpack(x):
        ratings = np.zeros(k)
        ratings[free] = x
        return ratings

    def nll(x):
        ratings = unpack(x)
        diff = _ELO_SCALE * (ratings[a_idx] - ratings[b_idx])
        # log(1 + e^-d) stable on both tails
        log_p = -np.logaddexp(0.0, -diff)
        log_q = -np.logaddexp(0.0, diff)
        ll = scores @ log_p + (counts - scores) @ log_q
        return -(ll - prior * (ratings @ ratings))

    def grad(x):
        ratings = unpack(x)
        diff = _ELO_SCALE * (ratings[a_idx] - ratings[b_idx])
        p = 1.0 / (1.0 + np.exp(-diff))
        g_pair = _ELO_SCALE * (scores - counts * p)
        g = np.zeros(k)
        np.add.at(g, a_idx, g_pair)
        np.add.at(g, b_idx, -g_pair)
        g -= 2 * prior * ratings
        return -g[free]

    result = minimize(nll, np.zeros(len(free)), jac=grad, method="L-BFGS-B",
                      options={"maxiter": 10_000, "ftol": 1e-14, "gtol": 1e-10})
    ratings = unpack(result.x)
    return {name: float(ratings[index[name]]) for name in names}
