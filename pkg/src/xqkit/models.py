"""Policy-value networks: micro residual CNN and micro ViT variants.

Both end in a masked policy head over the 8100 flat actions (optionally
factorized into 16 piece slots x 90 destinations) and a tanh value head.
The value is the expected terminal result from the mover's perspective.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoding import (
    NUM_ACTIONS,
    FeatureVariant,
    encode,
    legality_mask,
    mover_piece_squares,
)
from .errors import (
    ConfigError,
    FormatError,
    ManifestMismatchError,
    TerminalPositionError,
)
from .layers import (
    Conv2D,
    Conv2DSpec,
    Dense,
    DenseSpec,
    LayerNorm,
    LayerNormSpec,
    MultiHeadAttention,
    MultiHeadAttentionSpec,
    embedding_init,
)
from .rules import Move, Position

CHECKPOINT_MAGIC = b"XQNP"
CHECKPOINT_VERSION = 1

_DEST_IDX = np.arange(NUM_ACTIONS, dtype=np.int64) % 90


class PolicyHead(Enum):
    FLAT8100 = "flat8100"
    FACTORIZED16X90 = "factorized16x90"


@dataclass(frozen=True)
class ModResNetMicro:
    blocks: int = 4
    channels: int = 64


@dataclass(frozen=True)
class ViTMicro:
    layers: int = 4
    d_model: int = 128
    heads: int = 4


@dataclass(frozen=True)
class ResNetUnmodified:
    """Ablation arm: 7x7 stride-2 entry convolution plus max pooling."""

    blocks: int = 4
    channels: int = 64


Variant = Union[ModResNetMicro, ViTMicro, ResNetUnmodified]


@dataclass(frozen=True)
class NetConfig:
    variant: Variant = ModResNetMicro()
    feature_variant: FeatureVariant = FeatureVariant.BOARD_ALLY_ENEMY
    policy_head: PolicyHead = PolicyHead.FLAT8100


@dataclass
class PolicyValueOutput:
    logits: Union[np.ndarray, Tuple[np.ndarray, np.ndarray]]
    value: float
    probs: np.ndarray  # length 8100; exactly 0 at masked-out actions


def net_config_to_dict(cfg: NetConfig) -> dict:
    v = cfg.variant
    if isinstance(v, ModResNetMicro):
        variant = {"kind": "mod_resnet_micro", "blocks": v.blocks, "channels": v.channels}
    elif isinstance(v, ResNetUnmodified):
        variant = {"kind": "resnet_unmodified", "blocks": v.blocks, "channels": v.channels}
    elif isinstance(v, ViTMicro):
        variant = {"kind": "vit_micro", "layers": v.layers,
                   "d_model": v.d_model, "heads": v.heads}
    else:
        raise ConfigError(f"unknown variant {v!r}")
    return {
        "variant": variant,
        "feature_variant": cfg.feature_variant.name.lower(),
        "policy_head": cfg.policy_head.value,
    }


def net_config_from_dict(d: dict) -> NetConfig:
    v = d["variant"]
    kind = v.get("kind")
    if kind == "mod_resnet_micro":
        variant = ModResNetMicro(int(v["blocks"]), int(v["channels"]))
    elif kind == "resnet_unmodified":
        variant = ResNetUnmodified(int(v["blocks"]), int(v["channels"]))
    elif kind == "vit_micro":
        variant = ViTMicro(int(v["layers"]), int(v["d_model"]), int(v["heads"]))
    else:
        raise ConfigError(f"unknown network variant kind {kind!r}")
    return NetConfig(
        variant=variant,
        feature_variant=FeatureVariant.from_name(d["feature_variant"]),
        policy_head=PolicyHead(d["policy_head"]),
    )


# ---------------------------------------------------------------------------
# Network implementations
# ---------------------------------------------------------------------------


class Network:
    """Built network: ordered named parameters plus a batched forward pass."""

    def __init__(self, cfg: NetConfig):
        self.cfg = cfg
        self._named: List[Tuple[str, Tensor]] = []

    def _reg_layer(self, name: str, layer) -> object:
        for i, p in enumerate(layer.params()):
            self._named.append((f"{name}.{i}", p))
        return layer

    def _reg_param(self, name: str, tensor: Tensor) -> Tensor:
        self._named.append((name, tensor))
        return tensor

    def named_params(self) -> List[Tuple[str, Tensor]]:
        return list(self._named)

    def params(self) -> List[Tensor]:
        return [p for _, p in self._named]

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def forward_batch(self, obs: Tensor):
        raise NotImplementedError

    def forward_value(self, obs: Tensor):
        """Value head only; skips the policy head computation."""
        return self.forward_batch(obs)[1]


class _ConvPolicyValueHeads:
    """Shared 1x1-conv heads for the residual CNN variants."""

    def __init__(self, net: Network, channels: int, cells: int, rng):
        head = net.cfg.policy_head
        self.pol_conv = net._reg_layer("policy.conv", Conv2D(Conv2DSpec(1, channels, 2), rng))
        flat = cells * 2
        if head == PolicyHead.FLAT8100:
            self.pol_out = net._reg_layer("policy.out", Dense(DenseSpec(flat, NUM_ACTIONS), rng))
            self.pol_factored = None
        else:
            self.pol_slots = net._reg_layer("policy.slots", Dense(DenseSpec(flat, 16), rng))
            self.pol_dests = net._reg_layer("policy.dests", Dense(DenseSpec(flat, 90), rng))
            self.pol_factored = (self.pol_slots, self.pol_dests)
        self.val_conv = net._reg_layer("value.conv", Conv2D(Conv2DSpec(1, channels, 4), rng))
        self.val_hidden = net._reg_layer("value.hidden", Dense(DenseSpec(cells * 4, 64), rng))
        self.val_out = net._reg_layer("value.out", Dense(DenseSpec(64, 1), rng))

    def value(self, features: Tensor):
        b = features.shape[0]
        val = self.val_conv(features).relu().reshape(b, -1)
        return self.val_out(self.val_hidden(val).relu()).tanh()

    def __call__(self, features: Tensor):
        b = features.shape[0]
        pol = self.pol_conv(features).relu().reshape(b, -1)
        if self.pol_factored is None:
            policy = self.pol_out(pol)
        else:
            policy = (self.pol_slots(pol), self.pol_dests(pol))
        return policy, self.value(features)


class _ResNet(Network):
    def __init__(self, cfg: NetConfig, seed: int):
        super().__init__(cfg)
        rng = np.random.default_rng(seed)
        v = cfg.variant
        planes = cfg.feature_variant.planes
        c = v.channels
        unmodified = isinstance(v, ResNetUnmodified)
        entry_spec = Conv2DSpec(7, planes, c, stride=2) if unmodified else Conv2DSpec(1, planes, c)
        self.entry = self._reg_layer("entry.conv", Conv2D(entry_spec, rng))
        self.entry_norm = self._reg_layer("entry.norm", LayerNorm(LayerNormSpec(c)))
        self.pool = unmodified
        shape = entry_spec.infer_shape((1, 10, 9, planes))
        if unmodified:
            shape = (1, shape[1] // 2, shape[2] // 2, c)
        self.blocks = []
        for i in range(v.blocks):
            conv1 = self._reg_layer(f"block{i}.conv1", Conv2D(Conv2DSpec(3, c, c), rng))
            norm1 = self._reg_layer(f"block{i}.norm1", LayerNorm(LayerNormSpec(c)))
            conv2 = self._reg_layer(f"block{i}.conv2", Conv2D(Conv2DSpec(3, c, c), rng))
            norm2 = self._reg_layer(f"block{i}.norm2", LayerNorm(LayerNormSpec(c)))
            self.blocks.append((conv1, norm1, conv2, norm2))
        self.heads = _ConvPolicyValueHeads(self, c, shape[1] * shape[2], rng)

    def _features(self, obs: Tensor):
        x = self.entry_norm(self.entry(obs)).relu()
        if self.pool:
            x = ad.max_pool2d(x)
        for conv1, norm1, conv2, norm2 in self.blocks:
            y = norm1(conv1(x)).relu()
            y = norm2(conv2(y))
            x = (x + y).relu()
        return x

    def forward_batch(self, obs: Tensor):
        return self.heads(self._features(obs))

    def forward_value(self, obs: Tensor):
        return self.heads.value(self._features(obs))


class _ViT(Network):
    def __init__(self, cfg: NetConfig, seed: int):
        super().__init__(cfg)
        if not isinstance(cfg.variant, ViTMicro):
            raise ConfigError("ViT network requires a ViTMicro variant")
        rng = np.random.default_rng(seed)
        v = cfg.variant
        d = v.d_model
        planes = cfg.feature_variant.planes
        MultiHeadAttentionSpec(d, v.heads)  # validates divisibility
        self.embed = self._reg_layer("embed", Dense(DenseSpec(planes, d), rng))
        self.readout = self._reg_param(
            "readout_token", ad.parameter(embedding_init(rng, (1, 1, d)))
        )
        self.pos = self._reg_param(
            "pos_embed", ad.parameter(embedding_init(rng, (91, d)))
        )
        self.blocks = []
        for i in range(v.layers):
            norm1 = self._reg_layer(f"layer{i}.norm1", LayerNorm(LayerNormSpec(d)))
            attn = self._reg_layer(
                f"layer{i}.attn", MultiHeadAttention(MultiHeadAttentionSpec(d, v.heads), rng)
            )
            norm2 = self._reg_layer(f"layer{i}.norm2", LayerNorm(LayerNormSpec(d)))
            up = self._reg_layer(f"layer{i}.up", Dense(DenseSpec(d, 4 * d), rng))
            down = self._reg_layer(f"layer{i}.down", Dense(DenseSpec(4 * d, d), rng))
            self.blocks.append((norm1, attn, norm2, up, down))
        self.final_norm = self._reg_layer("final.norm", LayerNorm(LayerNormSpec(d)))
        head = cfg.policy_head
        if head == PolicyHead.FLAT8100:
            self.pol_out = self._reg_layer("policy.out", Dense(DenseSpec(d, NUM_ACTIONS), rng))
            self.pol_factored = None
        else:
            self.pol_slots = self._reg_layer("policy.slots", Dense(DenseSpec(d, 16), rng))
            self.pol_dests = self._reg_layer("policy.dests", Dense(DenseSpec(d, 90), rng))
            self.pol_factored = (self.pol_slots, self.pol_dests)
        self.val_out = self._reg_layer("value.out", Dense(DenseSpec(d, 1), rng))

    @property
    def token_count(self) -> int:
        return 91

    def _summary(self, obs: Tensor):
        b = obs.shape[0]
        d = self.cfg.variant.d_model
        tokens = self.embed(obs.reshape(b, 90, obs.shape[3]))
        readout = ad.broadcast_to(self.readout, (b, 1, d))
        x = ad.concat([readout, tokens], axis=1) + self.pos
        for norm1, attn, norm2, up, down in self.blocks:
            x = x + attn(norm1(x))
            x = x + down(up(norm2(x)).gelu())
        return self.final_norm(x)[:, 0]

    def forward_batch(self, obs: Tensor):
        summary = self._summary(obs)
        if self.pol_factored is None:
            policy = self.pol_out(summary)
        else:
            policy = (self.pol_slots(summary), self.pol_dests(summary))
        return policy, self.val_out(summary).tanh()

    def forward_value(self, obs: Tensor):
        return self.val_out(self._summary(obs)).tanh()


def build(cfg: NetConfig, seed: int = 0) -> Network:
    if isinstance(cfg.variant, (ModResNetMicro, ResNetUnmodified)):
        return _ResNet(cfg, seed)
    if isinstance(cfg.variant, ViTMicro):
        return _ViT(cfg, seed)
    raise ConfigError(f"unknown network variant {cfg.variant!r}")


# ---------------------------------------------------------------------------
# Factorized-head codec and inference
# ---------------------------------------------------------------------------


def factorized_codec(pos: Position) -> np.ndarray:
    """slot_idx[i]: piece slot of action i's from-square (0 when not a
    mover piece; such actions are always masked)."""
    slot_of = {sq: slot for slot, sq in enumerate(mover_piece_squares(pos))}
    slot_idx = np.zeros(NUM_ACTIONS, dtype=np.int64)
    for m in pos.legal_moves():
        base = m.from_sq * 90
        slot_idx[base : base + 90] = slot_of[m.from_sq]
    return slot_idx


def joint_policy_logits(policy, slot_idx: Optional[np.ndarray] = None) -> Tensor:
    """Collapse a head output to (batch, 8100) joint logits."""
    if isinstance(policy, Tensor):
        return policy
    slots, dests = policy
    if slot_idx is None:
        raise ConfigError("factorized policy head requires a slot codec")
    if slot_idx.ndim == 1:
        slot_idx = np.broadcast_to(slot_idx, (slots.shape[0],) + slot_idx.shape)
    dest_idx = np.broadcast_to(_DEST_IDX, slot_idx.shape)
    return ad.take_along_last(slots, slot_idx) + ad.take_along_last(dests, dest_idx)


def infer(net: Network, obs: np.ndarray, mask: np.ndarray,
          slot_idx: Optional[np.ndarray] = None) -> PolicyValueOutput:
    """Masked policy distribution and value for one observation."""
    obs_t = Tensor(np.asarray(obs, dtype=ad.current_dtype())[None])
    policy, value = net.forward_batch(obs_t)
    joint = joint_policy_logits(policy, slot_idx)
    lp = ad.masked_log_softmax(joint, np.asarray(mask, bool)[None])
    probs = ad.masked_probs(lp, np.asarray(mask, bool)[None])[0]
    if isinstance(policy, Tensor):
        logits = policy.data[0]
    else:
        logits = (policy[0].data[0], policy[1].data[0])
    return PolicyValueOutput(logits=logits, value=float(value.data[0, 0]), probs=probs)


def infer_position(net: Network, pos: Position) -> PolicyValueOutput:
    obs = encode(pos, net.cfg.feature_variant)
    mask = legality_mask(pos)
    slot_idx = None
    if net.cfg.policy_head == PolicyHead.FACTORIZED16X90:
        slot_idx = factorized_codec(pos)
    return infer(net, obs, mask, slot_idx)


def sample_move(net: Network, pos: Position, tau: float, rng) -> Move:
    """Draw a move with probability proportional to e^(logit/tau).

    tau = 0 plays the argmax, ties broken by lowest action index.
    """
    if pos.terminal() is not None:
        raise TerminalPositionError(f"no move to sample in {pos.to_fen()}")
    out = infer_position(net, pos)
    legal = np.flatnonzero(out.probs > 0)
    if tau == 0:
        index = int(legal[np.argmax(out.probs[legal])])
    else:
        # Re-temper the masked distribution: p_i^(1/tau), renormalized.
        logp = np.log(out.probs[legal])
        logp = (logp - logp.max()) / tau
        w = np.exp(logp)
        index = int(rng.choice(legal, p=w / w.sum()))
    return Move(index // 90, index % 90)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _probe_outputs(net: Network) -> bytes:
    planes = net.cfg.feature_variant.planes
    rng = np.random.default_rng(0xC0FFEE)
    obs = rng.random((2, 10, 9, planes)).astype(np.float32)
    policy, value = net.forward_batch(Tensor(obs))
    parts = []
    if isinstance(policy, Tensor):
        parts.append(policy.data.astype("<f4").tobytes())
    else:
        parts.extend(p.data.astype("<f4").tobytes() for p in policy)
    parts.append(value.data.astype("<f4").tobytes())
    return b"".join(parts)


def probe_hash(net: Network) -> str:
    return hashlib.sha256(_probe_outputs(net)).hexdigest()


def save(net: Network, path) -> None:
    manifest = [[name, list(p.shape)] for name, p in net.named_params()]
    header = {
        "config": net_config_to_dict(net.cfg),
        "manifest": manifest,
        "probe_sha256": probe_hash(net),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for _, p in net.named_params():
            fh.write(p.data.astype("<f4").tobytes())


def load(path, expect_config: Optional[NetConfig] = None) -> Network:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, header_len = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 12 + header_len:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header: {exc}") from None
    cfg = net_config_from_dict(header["config"])
    if expect_config is not None and cfg != expect_config:
        raise ManifestMismatchError(
            f"checkpoint holds {net_config_to_dict(cfg)}, "
            f"expected {net_config_to_dict(expect_config)}"
        )
    with ad.use_dtype(np.float32):
        net = build(cfg, seed=0)
    own = [[name, list(p.shape)] for name, p in net.named_params()]
    if own != header["manifest"]:
        raise ManifestMismatchError(f"{path}: parameter manifest does not match")
    offset = 12 + header_len
    for _, p in net.named_params():
        nbytes = p.size * 4
        chunk = raw[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise FormatError(f"{path}: truncated parameter payload")
        p.data[...] = np.frombuffer(chunk, dtype="<f4").reshape(p.shape)
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    if probe_hash(net) != header["probe_sha256"]:
        raise FormatError(f"{path}: probe hash mismatch, payload corrupt")
    return net
