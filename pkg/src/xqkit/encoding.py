"""Observation tensors, action indices, legality masks, factorized actions.

Observations are mover-relative: the board is rotated 180 degrees when Black
is to move, so the side to move always plays toward rank 9. Action indices
stay in absolute board coordinates (from.flat * 90 + to.flat) so a mask or a
sampled index maps straight back to a playable Move.
"""

from __future__ import annotations

import struct
from enum import IntEnum
from typing import List, NamedTuple

import numpy as np

from .errors import FormatError, IllegalMoveError, RangeError
from .rules import Move, Position, Side, Square

RANKS = 10
FILES = 9
NUM_ACTIONS = 8100
MAX_PIECE_SLOTS = 16

_OBS_HEADER = struct.Struct("<3H")


class FeatureVariant(IntEnum):
    BOARD_ONLY = 0
    BOARD_ALLY = 1
    BOARD_ALLY_ENEMY = 2

    @property
    def planes(self) -> int:
        return 14 + 7 * int(self)

    @staticmethod
    def from_name(name: str) -> "FeatureVariant":
        try:
            return FeatureVariant[name.upper().replace("-", "_")]
        except KeyError:
            raise FormatError(f"unknown feature variant {name!r}") from None


def _view_cell(flat: int, side: Side) -> tuple:
    rank, file = divmod(flat, FILES)
    if side == Side.RED:
        return rank, file
    return RANKS - 1 - rank, FILES - 1 - file


def encode(pos: Position, variant: FeatureVariant = FeatureVariant.BOARD_ALLY_ENEMY) -> np.ndarray:
    """Observation of shape (10, 9, planes), float32 zeros and ones.

    Planes 0-6 hold the mover's pieces by kind and 7-13 the opponent's.
    Planes 14-20 mark cells a mover piece of each kind can legally reach;
    planes 21-27 mark the same for the opponent as if it had the move.
    """
    side = pos.side_to_move
    obs = np.zeros((RANKS, FILES, variant.planes), dtype=np.float32)
    for flat in range(RANKS * FILES):
        piece = pos.piece_at(flat)
        if piece is None:
            continue
        owner, kind = piece
        r, f = _view_cell(flat, side)
        obs[r, f, kind if owner == side else 7 + kind] = 1.0
    if variant >= FeatureVariant.BOARD_ALLY:
        for m in pos.legal_moves():
            _, kind = pos.piece_at(m.from_sq)
            r, f = _view_cell(m.to_sq, side)
            obs[r, f, 14 + kind] = 1.0
    if variant == FeatureVariant.BOARD_ALLY_ENEMY:
        for m in pos.flip_side().legal_moves():
            _, kind = pos.piece_at(m.from_sq)
            r, f = _view_cell(m.to_sq, side)
            obs[r, f, 21 + kind] = 1.0
    return obs


def move_to_index(m: Move) -> int:
    return m.from_sq * 90 + m.to_sq


def index_to_move(i: int) -> Move:
    if not 0 <= i < NUM_ACTIONS:
        raise RangeError(f"action index {i} outside 0..{NUM_ACTIONS - 1}")
    return Move(i // 90, i % 90)


def legality_mask(pos: Position) -> np.ndarray:
    """Boolean vector of length 8100, true exactly at legal action indices."""
    mask = np.zeros(NUM_ACTIONS, dtype=bool)
    for m in pos.legal_moves():
        mask[m.from_sq * 90 + m.to_sq] = True
    return mask


def mover_piece_squares(pos: Position) -> List[int]:
    """Flat squares of the mover's pieces, ascending; defines piece slots."""
    side = pos.side_to_move
    return [flat for flat in range(RANKS * FILES)
            if (p := pos.piece_at(flat)) is not None and p[0] == side]


class FactorizedAction(NamedTuple):
    """Piece slot plus destination square; round-trips with legal Moves."""

    piece_slot: int
    destination: Square


def factorize(m: Move, pos: Position) -> FactorizedAction:
    if m not in pos.legal_moves():
        raise IllegalMoveError(f"cannot factorize illegal move in {pos.to_fen()}")
    slots = mover_piece_squares(pos)
    return FactorizedAction(slots.index(m.from_sq), Square.from_flat(m.to_sq))


def defactorize(action: FactorizedAction, pos: Position) -> Move:
    slots = mover_piece_squares(pos)
    if not 0 <= action.piece_slot < len(slots):
        raise IllegalMoveError(
            f"piece slot {action.piece_slot} out of range for {len(slots)} live pieces"
        )
    m = Move(slots[action.piece_slot], action.destination.flat)
    if m not in pos.legal_moves():
        raise IllegalMoveError("factorized action does not name a legal move")
    return m


def dump_observation(obs: np.ndarray) -> bytes:
    """Header (H, W, P as little-endian u16) then row-major f32 planes."""
    h, w, p = obs.shape
    return _OBS_HEADER.pack(h, w, p) + np.ascontiguousarray(obs, dtype="<f4").tobytes()


def load_observation(raw: bytes) -> np.ndarray:
    if len(raw) < _OBS_HEADER.size:
        raise FormatError("observation blob shorter than its header")
    h, w, p = _OBS_HEADER.unpack_from(raw)
    body = raw[_OBS_HEADER.size:]
    if len(body) != h * w * p * 4:
        raise FormatError(
            f"observation payload is {len(body)} bytes, expected {h * w * p * 4}"
        )
    return np.frombuffer(body, dtype="<f4").reshape(h, w, p).copy()
