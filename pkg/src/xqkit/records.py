"""Game records: PGN-subset parsing, cleaning, storage, and sampling.

File format: one PGN-style document per record (bracketed tag pairs, then
whitespace-separated ICCS move tokens, then a result token), documents
separated by a blank line. A sidecar ``<name>.idx`` holds little-endian
64-bit byte offsets of each document.
"""

from __future__ import annotations

import math
import re
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Sequence

import numpy as np

from .errors import DomainError, IllegalMoveError, ParseError
from .rules import Move, Outcome, Position, Side, move_from_iccs, move_to_iccs, outcome_score

MIN_ROUNDS = 10  # records with fewer full rounds are dropped during cleaning


class Termination(Enum):
    NORMAL = "normal"
    DISCONNECT = "disconnect"


_RESULT_TOKENS = {"1-0": Outcome.RED_WINS, "0-1": Outcome.BLACK_WINS, "1/2-1/2": Outcome.DRAW}
_RESULT_STRINGS = {v: k for k, v in _RESULT_TOKENS.items()}
_TAG_RE = re.compile(r'^\[(\w+)\s+"([^"]*)"\]\s*$')


@dataclass
class GameRecord:
    moves: List[str]  # ICCS tokens, alternating Red/Black from the start
    result: Outcome
    termination: Termination = Termination.NORMAL
    metadata: dict = field(default_factory=dict)

    @property
    def num_plies(self) -> int:
        return len(self.moves)

    @property
    def num_rounds(self) -> int:
        return len(self.moves) // 2

    @staticmethod
    def make(
        moves: Sequence[str],
        result: Outcome,
        termination: Termination = Termination.NORMAL,
        metadata: Optional[dict] = None,
    ) -> "GameRecord":
        """Build a record with tags kept in sync so serialization round-trips."""
        meta = dict(metadata or {})
        meta["Result"] = _RESULT_STRINGS[result]
        if termination == Termination.DISCONNECT:
            meta["Termination"] = "disconnect"
        return GameRecord(list(moves), result, termination, meta)

    def move_at(self, t: int) -> Move:
        return move_from_iccs(self.moves[t])

    def result_for(self, side: Side) -> int:
        """Final score (+1/0/-1) from `side`'s perspective."""
        return outcome_score(self.result, side)

    def replay(self) -> List[Position]:
        """Positions before each move plus the final position (length T+1)."""
        positions = [Position.initial()]
        for i, token in enumerate(self.moves):
            m = move_from_iccs(token)
            pos = positions[-1]
            if m not in pos.legal_moves():
                raise IllegalMoveError(
                    f"move {token!r} illegal at index {i}", index=i
                )
            positions.append(pos.apply_move_unchecked(m))
        return positions


def parse_record(text: str) -> GameRecord:
    """Parse one PGN-style document and replay-validate every move."""
    metadata = {}
    body_tokens: List[str] = []
    for line in text.splitlines():
        stripped = line.strip()
        if not stripped:
            continue
        tag = _TAG_RE.match(stripped)
        if tag:
            if body_tokens:
                raise ParseError("tag pair after move text")
            metadata[tag.group(1)] = tag.group(2)
        elif stripped.startswith("["):
            raise ParseError(f"malformed tag pair: {stripped!r}")
        else:
            body_tokens.extend(stripped.split())
    if not body_tokens:
        raise ParseError("document has no move text or result token")
    result_token = body_tokens[-1]
    if result_token not in _RESULT_TOKENS:
        raise ParseError(f"missing or unknown result token {result_token!r}")
    move_tokens = body_tokens[:-1]

    pos = Position.initial()
    for i, token in enumerate(move_tokens):
        m = move_from_iccs(token)  # raises ParseError on bad syntax
        if m not in pos.legal_moves():
            raise IllegalMoveError(f"move {token!r} illegal at index {i}", index=i)
        pos = pos.apply_move_unchecked(m)

    termination = (
        Termination.DISCONNECT
        if metadata.get("Termination", "").lower() == "disconnect"
        else Termination.NORMAL
    )
    return GameRecord(move_tokens, _RESULT_TOKENS[result_token], termination, metadata)


def serialize_record(record: GameRecord) -> str:
    lines = [f'[{key} "{value}"]' for key, value in record.metadata.items()]
    lines.append("")
    body = record.moves + [_RESULT_STRINGS[record.result]]
    lines.append(" ".join(body))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Cleaning
# ---------------------------------------------------------------------------


@dataclass
class CleanStats:
    parsed: int = 0
    dropped_short: int = 0
    dropped_disconnect: int = 0
    kept: int = 0

    def as_dict(self) -> dict:
        return {
            "parsed": self.parsed,
            "dropped_short": self.dropped_short,
            "dropped_disconnect": self.dropped_disconnect,
            "kept": self.kept,
        }


def clean(records: Iterable[GameRecord]) -> tuple:
    """Drop disconnected games and games shorter than MIN_ROUNDS rounds.

    Returns (kept_records, CleanStats). Order is preserved.
    """
    stats = CleanStats()
    kept = []
    for rec in records:
        stats.parsed += 1
        if rec.termination == Termination.DISCONNECT:
            stats.dropped_disconnect += 1
        elif rec.num_rounds < MIN_ROUNDS:
            stats.dropped_short += 1
        else:
            kept.append(rec)
            stats.kept += 1
    return kept, stats


# ---------------------------------------------------------------------------
# Sampling curve
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SampleCurve:
    """Weight curve log(a * t / T + b) + c over step t of a game of length T.

    Defaults instantiate the late-game-emphasis curve with a = 1/2 (so the
    log argument is t/(2T) + e^-1), b = e^-1 and c = 1.5.
    """

    a: float = 0.5
    b: float = math.exp(-1)
    c: float = 1.5

    def weight(self, t: int, total: int) -> float:
        if total < 1 or t < 0 or t >= total:
            raise DomainError(f"step {t} outside game of length {total}")
        # log(a*t/T + b) + c, written so the t=0 value log(b)+c is exact.
        return math.log(self.b) + self.c + math.log1p(self.a * t / (total * self.b))


_DEFAULT_CURVE = SampleCurve()


def sample_weight(t: int, total: int) -> float:
    """Sampling weight of step t in a game of length ``total`` plies."""
    return _DEFAULT_CURVE.weight(t, total)


# ---------------------------------------------------------------------------
# Record files and the dataset index
# ---------------------------------------------------------------------------


def write_records(path, records: Iterable[GameRecord]) -> int:
    """Write records as blank-line-separated documents plus a ``.idx`` sidecar."""
    path = Path(path)
    offsets = []
    with open(path, "wb") as fh:
        for rec in records:
            offsets.append(fh.tell())
            fh.write(serialize_record(rec).encode("utf-8"))
            fh.write(b"\n")
    _write_index(path.with_suffix(path.suffix + ".idx"), offsets)
    return len(offsets)


def _write_index(idx_path, offsets) -> None:
    with open(idx_path, "wb") as fh:
        fh.write(struct.pack("<%dQ" % len(offsets), *offsets))


def _read_index(idx_path) -> List[int]:
    raw = Path(idx_path).read_bytes()
    if len(raw) % 8:
        raise ParseError(f"index file {idx_path} has truncated entries")
    return list(struct.unpack("<%dQ" % (len(raw) // 8), raw))


def _split_documents(raw: bytes) -> List[tuple]:
    """(start, end) byte spans of each document in a record file.

    A blank line ends a document only once movetext has appeared; the blank
    line between a document's tag section and its movetext stays internal.
    """
    spans = []
    pos = 0
    start = end = None
    has_body = False
    n = len(raw)
    while pos <= n:
        nl = raw.find(b"\n", pos)
        line_end = nl if nl != -1 else n
        stripped = raw[pos:line_end].strip()
        if stripped:
            if start is None:
                start = pos
            end = line_end
            if not stripped.startswith(b"["):
                has_body = True
        elif start is not None and has_body:
            spans.append((start, end))
            start, end, has_body = None, None, False
        if nl == -1:
            break
        pos = nl + 1
    if start is not None:
        spans.append((start, end))
    return spans


def iter_documents(text: str) -> Iterator[str]:
    """Split a record file into documents at blank lines."""
    raw = text.encode("utf-8")
    for start, end in _split_documents(raw):
        yield raw[start:end].decode("utf-8")


@dataclass
class DatasetIndex:
    """Byte offsets into a record file plus per-record game lengths."""

    path: Path
    offsets: List[int]
    lengths: List[int]  # plies per record

    def __len__(self) -> int:
        return len(self.offsets)

    @staticmethod
    def build(path) -> "DatasetIndex":
        path = Path(path)
        raw = path.read_bytes()
        offsets, lengths = [], []
        for start, end in _split_documents(raw):
            rec = parse_record(raw[start:end].decode("utf-8"))
            offsets.append(start)
            lengths.append(rec.num_plies)
        _write_index(path.with_suffix(path.suffix + ".idx"), offsets)
        return DatasetIndex(path, offsets, lengths)

    @staticmethod
    def load(path) -> "DatasetIndex":
        path = Path(path)
        offsets = _read_index(path.with_suffix(path.suffix + ".idx"))
        raw = path.read_bytes()
        lengths = []
        for i, off in enumerate(offsets):
            end = offsets[i + 1] if i + 1 < len(offsets) else len(raw)
            doc = raw[off:end].decode("utf-8")
            tokens = [
                tok
                for line in doc.splitlines()
                if line.strip() and not line.strip().startswith("[")
                for tok in line.split()
            ]
            lengths.append(max(len(tokens) - 1, 0))
        return DatasetIndex(path, offsets, lengths)

    def record(self, i: int) -> GameRecord:
        raw = self.path.read_bytes()
        end = self.offsets[i + 1] if i + 1 < len(self.offsets) else len(raw)
        return parse_record(raw[self.offsets[i] : end].decode("utf-8"))


# ---------------------------------------------------------------------------
# Sample drawing
# ---------------------------------------------------------------------------


@dataclass
class SamplePoint:
    position: Position
    chosen_move: Move
    final_result: int  # +1 / 0 / -1 from the mover's perspective
    t: int
    total: int


class SampleMode(Enum):
    UNIFORM = "uniform"
    CURVE = "curve"


def draw_samples(
    index: DatasetIndex,
    n: int,
    mode: SampleMode = SampleMode.CURVE,
    seed: int = 0,
    curve: SampleCurve = _DEFAULT_CURVE,
) -> List[SamplePoint]:
    """Draw n training samples: game uniform, then step by curve weight.

    Deterministic given the seed. Positions are materialized by replaying
    each touched record once.
    """
    if n == 0:
        return []
    if len(index) == 0:
        raise DomainError("dataset is empty")
    rng = np.random.default_rng(seed)
    games = rng.integers(0, len(index), size=n)
    steps = np.empty(n, dtype=np.int64)
    for g in sorted(set(games.tolist())):
        ids = np.flatnonzero(games == g)
        total = index.lengths[g]
        if total == 0:
            raise DomainError(f"record {g} has no moves to sample")
        if mode == SampleMode.CURVE:
            w = np.array([curve.weight(t, total) for t in range(total)])
            w = w / w.sum()
        else:
            w = np.full(total, 1.0 / total)
        steps[ids] = rng.choice(total, size=ids.size, p=w)

    # Replay each touched record once, then fill samples in draw order.
    out: List[Optional[SamplePoint]] = [None] * n
    for g in sorted(set(games.tolist())):
        rec = index.record(g)
        positions = rec.replay()
        for i in np.flatnonzero(games == g):
            t = int(steps[i])
            pos = positions[t]
            out[i] = SamplePoint(
                position=pos,
                chosen_move=move_from_iccs(rec.moves[t]),
                final_result=outcome_score(rec.result, pos.side_to_move),
                t=t,
                total=rec.num_plies,
            )
    return out


# ---------------------------------------------------------------------------
# Alpha-beta annotation and synthetic datasets
# ---------------------------------------------------------------------------


def annotate_with_searcher(pos: Position, cfg=None) -> Move:
    """Best move per the alpha-beta baseline at the configured depth."""
    from .errors import TerminalPositionError
    from .search import SearchConfig, search

    if pos.terminal() is not None:
        raise TerminalPositionError("cannot annotate a terminal position")
    _, move = search(pos, cfg or SearchConfig(depth=2))
    return move


def synthesize_records(
    n_games: int,
    cfg=None,
    seed: int = 0,
    max_plies: int = 120,
    epsilon: float = 0.15,
) -> List[GameRecord]:
    """Self-play games of the alpha-beta baseline with epsilon-random moves.

    Gives a small labeled corpus for desk-scale experiments where the real
    human corpus is unavailable.
    """
    from .search import SearchConfig, search

    cfg = cfg or SearchConfig(depth=1)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_games):
        pos = Position.initial()
        moves = []
        outcome = Outcome.DRAW
        while True:
            term = pos.terminal(draw_move_cap=max_plies)
            if term is not None:
                outcome = term
                break
            if rng.random() < epsilon:
                legal = pos.legal_moves()
                m = legal[int(rng.integers(0, len(legal)))]
            else:
                _, m = search(pos, cfg)
            moves.append(move_to_iccs(m))
            pos = pos.apply_move_unchecked(m)
        out.append(GameRecord.make(moves, outcome))
    return out
