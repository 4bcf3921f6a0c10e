"""Xiangqi rules: board state, legal move generation, terminal detection, perft.

Board geometry: 10 ranks x 9 files. Rank 0 is Red's back rank, Red advances
toward rank 9. A square is addressed either as (file, rank) or as the flat
index ``rank * 9 + file`` in 0..89.

Positions are immutable values; every operation here is a pure function, so
they can be shared freely across workers.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from enum import IntEnum
from functools import reduce
from typing import NamedTuple, Optional

from .errors import IllegalMoveError, ParseError

FILES = 9
RANKS = 10
NUM_SQUARES = 90


class Side(IntEnum):
    RED = 0
    BLACK = 1

    @property
    def opponent(self) -> "Side":
        return Side(1 - self.value)


class PieceKind(IntEnum):
    GENERAL = 0
    ADVISOR = 1
    ELEPHANT = 2
    HORSE = 3
    CHARIOT = 4
    CANNON = 5
    SOLDIER = 6


NUM_KINDS = 7

# Piece codes on the board array: 0 = empty, otherwise 1 + side*7 + kind.
EMPTY = 0


def piece_code(side: Side, kind: PieceKind) -> int:
    return 1 + side * NUM_KINDS + kind


def code_side(code: int) -> Side:
    return Side((code - 1) // NUM_KINDS)


def code_kind(code: int) -> PieceKind:
    return PieceKind((code - 1) % NUM_KINDS)


class Outcome(IntEnum):
    RED_WINS = 0
    BLACK_WINS = 1
    DRAW = 2


def outcome_score(outcome: Outcome, side: Side) -> int:
    """Terminal result from ``side``'s perspective: +1 win, 0 draw, -1 loss."""
    if outcome == Outcome.DRAW:
        return 0
    won = (outcome == Outcome.RED_WINS) == (side == Side.RED)
    return 1 if won else -1


class Square(NamedTuple):
    file: int
    rank: int

    @property
    def flat(self) -> int:
        return self.rank * FILES + self.file

    @staticmethod
    def from_flat(flat: int) -> "Square":
        return Square(flat % FILES, flat // FILES)


class Move(NamedTuple):
    """A move as a pair of flat square indices."""

    from_sq: int
    to_sq: int


_FILE_CHARS = "abcdefghi"


def move_to_iccs(m: Move) -> str:
    return "%s%d%s%d" % (
        _FILE_CHARS[m.from_sq % FILES],
        m.from_sq // FILES,
        _FILE_CHARS[m.to_sq % FILES],
        m.to_sq // FILES,
    )


def move_from_iccs(text: str) -> Move:
    """Parse an ICCS coordinate token such as ``h2e2``."""
    if len(text) != 4:
        raise ParseError(f"bad ICCS move {text!r}: expected 4 characters")
    ff, fr, tf, tr = text[0], text[1], text[2], text[3]
    if ff not in _FILE_CHARS or tf not in _FILE_CHARS:
        raise ParseError(f"bad ICCS move {text!r}: file out of range")
    if not (fr.isdigit() and tr.isdigit()):
        raise ParseError(f"bad ICCS move {text!r}: rank out of range")
    return Move(
        int(fr) * FILES + _FILE_CHARS.index(ff),
        int(tr) * FILES + _FILE_CHARS.index(tf),
    )


# ---------------------------------------------------------------------------
# Precomputed geometry tables
# ---------------------------------------------------------------------------

_PALACE_FILES = (3, 4, 5)
_PALACE_RANKS = ((0, 1, 2), (7, 8, 9))


def _in_board(file: int, rank: int) -> bool:
    return 0 <= file < FILES and 0 <= rank < RANKS


def _in_palace(side: int, file: int, rank: int) -> bool:
    return file in _PALACE_FILES and rank in _PALACE_RANKS[side]


def _build_tables():
    king = ([], [])
    advisor = ([], [])
    elephant = ([], [])
    soldier = ([], [])
    horse = []
    rays = []
    horse_src = []
    soldier_src = ([], [])
    for sq in range(NUM_SQUARES):
        r, f = divmod(sq, FILES)

        for side in (0, 1):
            dests = []
            if _in_palace(side, f, r):
                for df, dr in ((0, 1), (0, -1), (1, 0), (-1, 0)):
                    nf, nr = f + df, r + dr
                    if _in_palace(side, nf, nr):
                        dests.append(nr * FILES + nf)
            king[side].append(tuple(dests))

            dests = []
            if _in_palace(side, f, r):
                for df, dr in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                    nf, nr = f + df, r + dr
                    if _in_palace(side, nf, nr):
                        dests.append(nr * FILES + nf)
            advisor[side].append(tuple(dests))

            own_ranks = range(0, 5) if side == 0 else range(5, 10)
            dests = []
            if r in own_ranks:
                for df, dr in ((2, 2), (2, -2), (-2, 2), (-2, -2)):
                    nf, nr = f + df, r + dr
                    if _in_board(nf, nr) and nr in own_ranks:
                        eye = (r + dr // 2) * FILES + (f + df // 2)
                        dests.append((nr * FILES + nf, eye))
            elephant[side].append(tuple(dests))

            forward = 1 if side == 0 else -1
            crossed = (r >= 5) if side == 0 else (r <= 4)
            dests = []
            if _in_board(f, r + forward):
                dests.append((r + forward) * FILES + f)
            if crossed:
                for df in (1, -1):
                    if _in_board(f + df, r):
                        dests.append(r * FILES + f + df)
            soldier[side].append(tuple(dests))

        steps = []
        for df, dr in ((1, 2), (-1, 2), (1, -2), (-1, -2), (2, 1), (2, -1), (-2, 1), (-2, -1)):
            nf, nr = f + df, r + dr
            if _in_board(nf, nr):
                leg_f = f + (df // 2 if abs(df) == 2 else 0)
                leg_r = r + (dr // 2 if abs(dr) == 2 else 0)
                steps.append((nr * FILES + nf, leg_r * FILES + leg_f))
        horse.append(tuple(steps))

        sq_rays = []
        for df, dr in ((0, 1), (0, -1), (1, 0), (-1, 0)):
            ray = []
            nf, nr = f + df, r + dr
            while _in_board(nf, nr):
                ray.append(nr * FILES + nf)
                nf += df
                nr += dr
            sq_rays.append(tuple(ray))
        rays.append(tuple(sq_rays))

    # Reverse tables: squares a horse/soldier could attack sq from.
    for sq in range(NUM_SQUARES):
        srcs = []
        for a in range(NUM_SQUARES):
            for dest, leg in horse[a]:
                if dest == sq:
                    srcs.append((a, leg))
        horse_src.append(tuple(srcs))
        for side in (0, 1):
            srcs = [a for a in range(NUM_SQUARES) if sq in soldier[side][a]]
            soldier_src[side].append(tuple(srcs))
    return king, advisor, elephant, soldier, horse, rays, horse_src, soldier_src


(
    _KING_STEPS,
    _ADVISOR_STEPS,
    _ELEPHANT_STEPS,
    _SOLDIER_STEPS,
    _HORSE_STEPS,
    _RAYS,
    _HORSE_SOURCES,
    _SOLDIER_SOURCES,
) = _build_tables()

# Zobrist keys: fixed seed so hashes are stable across runs and processes.
_zrng = random.Random(0x5A3C_0FF5)
_ZOBRIST = [[_zrng.getrandbits(64) for _ in range(NUM_SQUARES)] for _ in range(1 + 2 * NUM_KINDS)]
_ZOBRIST_SIDE = _zrng.getrandbits(64)


def _board_hash(board, side_to_move: int) -> int:
    h = reduce(
        lambda acc, sq: acc ^ _ZOBRIST[board[sq]][sq] if board[sq] else acc,
        range(NUM_SQUARES),
        0,
    )
    return h ^ _ZOBRIST_SIDE if side_to_move else h


# ---------------------------------------------------------------------------
# Core move generation on a mutable board list (hot path)
# ---------------------------------------------------------------------------


def _attacked(board, sq: int, by: int) -> bool:
    """True if `sq` (the general's square) is attacked by side `by`.

    Covers chariot, cannon, horse, soldier and the flying-general rule via
    the ray scan. Advisors and elephants can never reach the enemy palace.
    """
    soldier = 1 + by * NUM_KINDS + PieceKind.SOLDIER
    for a in _SOLDIER_SOURCES[by][sq]:
        if board[a] == soldier:
            return True
    horse = 1 + by * NUM_KINDS + PieceKind.HORSE
    for a, leg in _HORSE_SOURCES[sq]:
        if board[a] == horse and not board[leg]:
            return True
    chariot = 1 + by * NUM_KINDS + PieceKind.CHARIOT
    cannon = 1 + by * NUM_KINDS + PieceKind.CANNON
    general = 1 + by * NUM_KINDS + PieceKind.GENERAL
    for ray in _RAYS[sq]:
        screen = False
        for s in ray:
            p = board[s]
            if not p:
                continue
            if screen:
                if p == cannon:
                    return True
                break
            if p == chariot or p == general:
                return True
            screen = True
    return False


def _find_general(board, side: int) -> int:
    target = 1 + side * NUM_KINDS + PieceKind.GENERAL
    for rank_block in _PALACE_RANKS[side]:
        base = rank_block * FILES
        for f in _PALACE_FILES:
            if board[base + f] == target:
                return base + f
    # Fallback for positions built by tests with a displaced general.
    for sq in range(NUM_SQUARES):
        if board[sq] == target:
            return sq
    raise ValueError("no general on board for side %d" % side)


def _pseudo_moves(board, side: int):
    moves = []
    app = moves.append
    lo = 1 + side * NUM_KINDS
    hi = lo + NUM_KINDS
    own = range(lo, hi)
    for sq in range(NUM_SQUARES):
        p = board[sq]
        if p < lo or p >= hi:
            continue
        kind = p - lo
        if kind == PieceKind.CHARIOT:
            for ray in _RAYS[sq]:
                for t in ray:
                    q = board[t]
                    if not q:
                        app((sq, t))
                    else:
                        if q not in own:
                            app((sq, t))
                        break
        elif kind == PieceKind.CANNON:
            for ray in _RAYS[sq]:
                screen = False
                for t in ray:
                    q = board[t]
                    if not screen:
                        if not q:
                            app((sq, t))
                        else:
                            screen = True
                    elif q:
                        if q not in own:
                            app((sq, t))
                        break
        elif kind == PieceKind.HORSE:
            for t, leg in _HORSE_STEPS[sq]:
                if not board[leg] and board[t] not in own:
                    app((sq, t))
        elif kind == PieceKind.SOLDIER:
            for t in _SOLDIER_STEPS[side][sq]:
                if board[t] not in own:
                    app((sq, t))
        elif kind == PieceKind.ELEPHANT:
            for t, eye in _ELEPHANT_STEPS[side][sq]:
                if not board[eye] and board[t] not in own:
                    app((sq, t))
        elif kind == PieceKind.ADVISOR:
            for t in _ADVISOR_STEPS[side][sq]:
                if board[t] not in own:
                    app((sq, t))
        else:
            for t in _KING_STEPS[side][sq]:
                if board[t] not in own:
                    app((sq, t))
    return moves


def _legal_moves(board, side: int):
    """Sorted (from, to) pairs legal for `side` on a mutable board list."""
    enemy = 1 - side
    king = _find_general(board, side)
    legal = []
    app = legal.append
    for mv in _pseudo_moves(board, side):
        f, t = mv
        cap = board[t]
        board[t] = board[f]
        board[f] = EMPTY
        ks = t if f == king else king
        if not _attacked(board, ks, enemy):
            app(mv)
        board[f] = board[t]
        board[t] = cap
    legal.sort()
    return legal


def _perft(board, side: int, depth: int) -> int:
    moves = _legal_moves(board, side)
    if depth == 1:
        return len(moves)
    total = 0
    flip = 1 - side
    for f, t in moves:
        cap = board[t]
        board[t] = board[f]
        board[f] = EMPTY
        total += _perft(board, flip, depth - 1)
        board[f] = board[t]
        board[t] = cap
    return total


# ---------------------------------------------------------------------------
# Position value type
# ---------------------------------------------------------------------------

INITIAL_FEN = "rnbakabnr/9/1c5c1/p1p1p1p1p/9/9/P1P1P1P1P/1C5C1/9/RNBAKABNR w"

_FEN_PIECES = {
    "K": (Side.RED, PieceKind.GENERAL),
    "A": (Side.RED, PieceKind.ADVISOR),
    "B": (Side.RED, PieceKind.ELEPHANT),
    "N": (Side.RED, PieceKind.HORSE),
    "R": (Side.RED, PieceKind.CHARIOT),
    "C": (Side.RED, PieceKind.CANNON),
    "P": (Side.RED, PieceKind.SOLDIER),
}
_FEN_PIECES.update(
    {k.lower(): (Side.BLACK, kind) for k, (_, kind) in list(_FEN_PIECES.items())}
)
_PIECE_FEN = {piece_code(s, k): ch for ch, (s, k) in _FEN_PIECES.items()}

_MAX_COUNTS = {
    PieceKind.GENERAL: 1,
    PieceKind.ADVISOR: 2,
    PieceKind.ELEPHANT: 2,
    PieceKind.HORSE: 2,
    PieceKind.CHARIOT: 2,
    PieceKind.CANNON: 2,
    PieceKind.SOLDIER: 5,
}

DEFAULT_DRAW_MOVE_CAP = 400
REPETITION_LIMIT = 3


@dataclass(frozen=True)
class Position:
    """Full game state. Immutable; derived data is memoized per instance."""

    board: tuple
    side_to_move: Side
    ply: int
    history: tuple  # zobrist hashes since the last capture, newest last
    zkey: int

    @staticmethod
    def initial() -> "Position":
        return Position.from_fen(INITIAL_FEN)

    @staticmethod
    def from_board(board, side_to_move: Side, ply: int = 0, validate: bool = True) -> "Position":
        board = tuple(board)
        if validate:
            _validate_board(board)
        z = _board_hash(board, side_to_move)
        return Position(board, Side(side_to_move), ply, (z,), z)

    @staticmethod
    def from_fen(fen: str) -> "Position":
        parts = fen.split()
        if len(parts) < 2:
            raise ParseError(f"bad FEN {fen!r}: expected '<board> <side>'")
        rows = parts[0].split("/")
        if len(rows) != RANKS:
            raise ParseError(f"bad FEN {fen!r}: expected 10 ranks")
        board = [EMPTY] * NUM_SQUARES
        for i, row in enumerate(rows):
            rank = RANKS - 1 - i
            f = 0
            for ch in row:
                if ch.isdigit():
                    f += int(ch)
                elif ch in _FEN_PIECES:
                    if f >= FILES:
                        raise ParseError(f"bad FEN {fen!r}: rank {rank} overflows")
                    s, k = _FEN_PIECES[ch]
                    board[rank * FILES + f] = piece_code(s, k)
                    f += 1
                else:
                    raise ParseError(f"bad FEN {fen!r}: unknown piece {ch!r}")
            if f != FILES:
                raise ParseError(f"bad FEN {fen!r}: rank {rank} has {f} files")
        if parts[1] == "w":
            stm = Side.RED
        elif parts[1] == "b":
            stm = Side.BLACK
        else:
            raise ParseError(f"bad FEN {fen!r}: side must be 'w' or 'b'")
        return Position.from_board(board, stm)

    def to_fen(self) -> str:
        rows = []
        for rank in range(RANKS - 1, -1, -1):
            row = ""
            empty = 0
            for f in range(FILES):
                p = self.board[rank * FILES + f]
                if p:
                    if empty:
                        row += str(empty)
                        empty = 0
                    row += _PIECE_FEN[p]
                else:
                    empty += 1
            if empty:
                row += str(empty)
            rows.append(row)
        return "/".join(rows) + (" w" if self.side_to_move == Side.RED else " b")

    # -- queries ----------------------------------------------------------

    def piece_at(self, sq: int) -> Optional[tuple]:
        p = self.board[sq]
        if not p:
            return None
        return code_side(p), code_kind(p)

    def legal_moves(self) -> list:
        cached = self.__dict__.get("_legal")
        if cached is None:
            cached = [Move(f, t) for f, t in _legal_moves(list(self.board), self.side_to_move)]
            self.__dict__["_legal"] = cached
        return cached

    def in_check(self, side: Side) -> bool:
        board = list(self.board)
        return _attacked(board, _find_general(board, side), 1 - side)

    def zobrist(self) -> int:
        return self.zkey

    def apply_move(self, m: Move) -> "Position":
        if m not in self.legal_moves():
            raise IllegalMoveError(f"illegal move {move_to_iccs(m)} in {self.to_fen()}")
        return self.apply_move_unchecked(m)

    def apply_move_unchecked(self, m: Move) -> "Position":
        """Apply a move known to be legal (e.g. drawn from legal_moves())."""
        board = list(self.board)
        f, t = m
        moved = board[f]
        cap = board[t]
        board[t] = moved
        board[f] = EMPTY
        z = self.zkey ^ _ZOBRIST[moved][f] ^ _ZOBRIST[moved][t] ^ _ZOBRIST_SIDE
        if cap:
            z ^= _ZOBRIST[cap][t]
            history = (z,)
        else:
            history = self.history + (z,)
        return Position(tuple(board), self.side_to_move.opponent, self.ply + 1, history, z)

    def terminal(self, draw_move_cap: int = DEFAULT_DRAW_MOVE_CAP) -> Optional[Outcome]:
        if not self.legal_moves():
            # Checkmate and stalemate both lose for the side to move.
            return Outcome.RED_WINS if self.side_to_move == Side.BLACK else Outcome.BLACK_WINS
        if self.ply >= draw_move_cap:
            return Outcome.DRAW
        if self.history.count(self.zkey) >= REPETITION_LIMIT:
            return Outcome.DRAW
        return None

    def perft(self, depth: int) -> int:
        if depth < 0:
            raise ValueError("perft depth must be >= 0")
        if depth == 0:
            return 1
        return _perft(list(self.board), self.side_to_move, depth)

    def piece_count(self) -> int:
        return sum(1 for p in self.board if p)

    def flip_side(self) -> "Position":
        """Same board with the other side to move; history restarts here."""
        stm = self.side_to_move.opponent
        z = self.zkey ^ _ZOBRIST_SIDE
        return Position(self.board, stm, self.ply, (z,), z)


def _validate_board(board) -> None:
    counts = {Side.RED: dict.fromkeys(PieceKind, 0), Side.BLACK: dict.fromkeys(PieceKind, 0)}
    for sq, p in enumerate(board):
        if not p:
            continue
        side, kind = code_side(p), code_kind(p)
        counts[side][kind] += 1
        rank, file = divmod(sq, FILES)
        if kind in (PieceKind.GENERAL, PieceKind.ADVISOR) and not _in_palace(side, file, rank):
            raise ParseError(f"{kind.name} of {side.name} outside palace at square {sq}")
        if kind == PieceKind.ELEPHANT:
            own = rank < 5 if side == Side.RED else rank >= 5
            if not own:
                raise ParseError(f"ELEPHANT of {side.name} across the river at square {sq}")
    for side in (Side.RED, Side.BLACK):
        if counts[side][PieceKind.GENERAL] != 1:
            raise ParseError(f"{side.name} must have exactly one general")
        for kind, limit in _MAX_COUNTS.items():
            if counts[side][kind] > limit:
                raise ParseError(f"too many {kind.name} for {side.name}")
