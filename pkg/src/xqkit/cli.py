"""Command-line entry point: data ingestion, training, evaluation,
diagnostics, and a UCCI adapter for GUI play.

All configuration is one JSON document with per-section defaults (see
DEFAULT_CONFIG); unknown keys are rejected before any compute starts.
Every command is deterministic under --seed: primary outputs
(checkpoints, metrics, reports) are byte-identical across same-seed
runs. Run manifests additionally carry wall-clock fields, which are
excluded from that guarantee.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .arena import MatchConfig, NetAgent, RandomAgent, play_match
from .encoding import FeatureVariant
from .errors import ConfigError, XqError
from .models import (ModResNetMicro, NetConfig, PolicyHead, ResNetUnmodified,
                     ViTMicro, load, sample_move, save)
from .pool import PoolConfig
from .records import (DatasetIndex, SampleMode, clean, iter_documents,
                      parse_record, synthesize_records, write_records)
from .rl import AdvConfig, AdvMode, PPOConfig, default_book, rl_train
from .rules import Position, move_from_iccs, move_to_iccs
from .search import AlphaBetaAgent, SearchConfig, search
from .sl import SLConfig, load_trainer_state, save_trainer_state, train

# ---------------------------------------------------------------------------
# Configuration schema
# ---------------------------------------------------------------------------

DEFAULT_CONFIG: Dict[str, Dict] = {
    "data": {
        "dataset": None,          # path to an ingested dataset; None synthesizes
        "synthesize_games": 24,   # self-generated corpus size when no dataset
        "synthesize_plies": 60,
        "synthesize_seed": 0,
    },
    "encoding": {
        "feature_variant": "board_ally_enemy",  # board_only | board_ally | board_ally_enemy
    },
    "model": {
        "variant": "mod_resnet_micro",  # mod_resnet_micro | resnet_unmodified | vit_micro
        "blocks": 2,                    # residual variants
        "channels": 32,
        "layers": 2,                    # vit_micro
        "d_model": 64,
        "heads": 4,
        "policy_head": "flat8100",      # flat8100 | factorized16x90
    },
    "sl": {
        "batch_size": 16,
        "steps": 200,
        "lr": 1e-3,
        "aux_weight": 0.5,
        "sampling": "curve",            # curve | uniform
        "eval_fraction": 0.1,
        "log_every": 50,
    },
    "rl": {
        "iterations": 1,
        "clip_eps": 0.2,
        "entropy_coef": 0.01,
        "value_coef": 0.5,
        "epochs": 3,
        "minibatch_size": 128,
        "games_per_iter": 16,
        "tau_train": 1.0,
        "max_plies": 400,
        "lr": 1e-3,
        "mode": "vect",                 # vect | gae
        "gamma": 1.0,
        "lam": 0.95,
        "horizon": 20,                  # null means unbounded
        "use_book": True,
    },
    "pool": {
        "tau_sel": 1.0,
        "theta": 0.55,
        "tau_opp": 0.5,
        "tau_train": 1.0,
        "alpha_ema": 0.05,
        "min_games": 50,
        "max_size": 8,
    },
    "arena": {
        "games": 100,
        "tau_a": 1.0,
        "tau_b": 1.0,
        "max_plies": 400,
        "use_book": False,
        "workers": 1,
    },
    "search": {
        "depth": 2,
        "max_nodes": None,
        "time_limit_s": None,
    },
}


def merge_config(overrides: Optional[dict]) -> dict:
    """DEFAULT_CONFIG with overrides applied; unknown keys rejected."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if overrides is None:
        return cfg
    if not isinstance(overrides, dict):
        raise ConfigError("config root must be a JSON object")
    for section, values in overrides.items():
        if section not in cfg:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        for key, value in values.items():
            if key not in cfg[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            cfg[section][key] = value
    return cfg


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return merge_config(None)
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return merge_config(doc)


def build_net_config(cfg: dict) -> NetConfig:
    m = cfg["model"]
    name = m["variant"]
    if name == "mod_resnet_micro":
        variant = ModResNetMicro(int(m["blocks"]), int(m["channels"]))
    elif name == "resnet_unmodified":
        variant = ResNetUnmodified(int(m["blocks"]), int(m["channels"]))
    elif name == "vit_micro":
        variant = ViTMicro(int(m["layers"]), int(m["d_model"]), int(m["heads"]))
    else:
        raise ConfigError(f"unknown model.variant {name!r}")
    return NetConfig(
        variant=variant,
        feature_variant=FeatureVariant.from_name(cfg["encoding"]["feature_variant"]),
        policy_head=PolicyHead(m["policy_head"]),
    )


def build_sl_config(cfg: dict) -> SLConfig:
    s = cfg["sl"]
    return SLConfig(
        batch_size=int(s["batch_size"]), steps=int(s["steps"]),
        lr=float(s["lr"]), aux_weight=float(s["aux_weight"]),
        sampling=SampleMode[s["sampling"].upper()],
        feature_variant=FeatureVariant.from_name(cfg["encoding"]["feature_variant"]),
        eval_fraction=float(s["eval_fraction"]), log_every=int(s["log_every"]),
    )


def build_rl_configs(cfg: dict):
    r = cfg["rl"]
    ppo = PPOConfig(
        clip_eps=float(r["clip_eps"]), entropy_coef=float(r["entropy_coef"]),
        value_coef=float(r["value_coef"]), epochs=int(r["epochs"]),
        minibatch_size=int(r["minibatch_size"]),
        games_per_iter=int(r["games_per_iter"]),
        tau_train=float(r["tau_train"]), max_plies=int(r["max_plies"]),
        lr=float(r["lr"]),
    )
    adv = AdvConfig(
        mode=AdvMode(r["mode"]), gamma=float(r["gamma"]), lam=float(r["lam"]),
        horizon=None if r["horizon"] is None else int(r["horizon"]),
    )
    p = cfg["pool"]
    pool_cfg = PoolConfig(
        tau_sel=float(p["tau_sel"]), theta=float(p["theta"]),
        tau_opp=float(p["tau_opp"]), tau_train=float(p["tau_train"]),
        alpha_ema=float(p["alpha_ema"]), min_games=int(p["min_games"]),
        max_size=int(p["max_size"]),
    )
    return ppo, adv, pool_cfg


def build_search_config(cfg: dict, depth: Optional[int] = None) -> SearchConfig:
    s = cfg["search"]
    return SearchConfig(
        depth=int(depth if depth is not None else s["depth"]),
        max_nodes=None if s["max_nodes"] is None else int(s["max_nodes"]),
        time_limit_s=None if s["time_limit_s"] is None else float(s["time_limit_s"]),
    )


# ---------------------------------------------------------------------------
# Run manifests
# ---------------------------------------------------------------------------


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0:
            return out.stdout.strip()
    except (OSError, subprocess.TimeoutExpired):
        pass
    return "unknown"


@dataclass
class RunManifest:
    config: dict
    seed: int
    git: str = field(default_factory=git_describe)
    started_at: Optional[str] = None
    finished_at: Optional[str] = None
    artifacts: Dict[str, str] = field(default_factory=dict)

    def write(self, path) -> None:
        """Atomic write: temp file in the same directory, then rename."""
        doc = {
            "config": self.config, "seed": self.seed, "git": self.git,
            "started_at": self.started_at, "finished_at": self.finished_at,
            "artifacts": self.artifacts,
        }
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        os.replace(tmp, path)


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _start_manifest(out_dir: Path, config: dict, seed: int) -> RunManifest:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(config=config, seed=seed, started_at=_now())
    manifest.write(out_dir / "manifest.json")
    return manifest


def _finish_manifest(manifest: RunManifest, out_dir: Path, **artifacts) -> None:
    manifest.finished_at = _now()
    manifest.artifacts = {k: str(v) for k, v in artifacts.items()}
    manifest.write(out_dir / "manifest.json")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_perft(args) -> int:
    try:
        pos = Position.from_fen(args.fen) if args.fen else Position.initial()
    except XqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    t0 = time.perf_counter()
    count = pos.perft(args.depth)
    dt = max(time.perf_counter() - t0, 1e-9)
    print(f"perft({args.depth}) = {count}  ({count / dt:,.0f} nodes/s)")
    if args.expect is not None and count != args.expect:
        print(f"MISMATCH: expected {args.expect}", file=sys.stderr)
        return 1
    return 0


def cmd_ingest(args) -> int:
    records = []
    parse_errors = 0
    files_ok = 0
    for path in args.paths:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            print(f"error: {path}: {exc}", file=sys.stderr)
            continue
        file_records = []
        for doc in iter_documents(text):
            try:
                file_records.append(parse_record(doc))
            except XqError as exc:
                parse_errors += 1
                print(f"error: {path}: {exc}", file=sys.stderr)
        if file_records:
            files_ok += 1
        records.extend(file_records)
    kept, stats = clean(records)
    if args.out:
        write_records(args.out, kept)
        DatasetIndex.build(args.out)
        print(f"dataset written to {args.out}", file=sys.stderr)
    if parse_errors:
        print(f"{parse_errors} document(s) failed to parse", file=sys.stderr)
    print(json.dumps(stats.as_dict(), sort_keys=True))
    return 0 if files_ok else 1


def _training_records(cfg: dict):
    data = cfg["data"]
    if data["dataset"] is not None:
        index = DatasetIndex.load(data["dataset"])
        return [index.record(i) for i in range(len(index))]
    return synthesize_records(int(data["synthesize_games"]),
                              seed=int(data["synthesize_seed"]),
                              max_plies=int(data["synthesize_plies"]))


def cmd_train_sl(args) -> int:
    config = load_config(args.config)
    sl_cfg = build_sl_config(config)
    net_cfg = build_net_config(config)
    out_dir = Path(args.out)
    resume = load_trainer_state(args.resume, net_cfg) if args.resume else None
    records = _training_records(config)
    manifest = _start_manifest(out_dir, config, args.seed)
    metrics = out_dir / "metrics.jsonl"
    # A resumed run appends its segment so the metrics file matches an
    # uninterrupted run; otherwise train() truncates and starts fresh.
    appending = bool(args.resume) and metrics.exists()
    segment = out_dir / "metrics.part.jsonl" if appending else metrics
    try:
        result = train(records, sl_cfg, net_cfg, seed=args.seed,
                       metrics_path=segment, resume=resume)
    except KeyboardInterrupt:
        _finish_manifest(manifest, out_dir, metrics=metrics)
        print("interrupted; manifest finalized", file=sys.stderr)
        return 130
    if appending:
        with open(metrics, "ab") as fh:
            fh.write(segment.read_bytes())
        segment.unlink()
    checkpoint = out_dir / "checkpoint.ckpt"
    save_trainer_state(result, checkpoint)
    _finish_manifest(manifest, out_dir, checkpoint=checkpoint, metrics=metrics)
    print(json.dumps({"checkpoint": str(checkpoint), "steps": result.step,
                      "metrics": str(metrics)}, sort_keys=True))
    return 0


def cmd_train_rl(args) -> int:
    config = load_config(args.config)
    ppo, adv, pool_cfg = build_rl_configs(config)
    if not Path(args.checkpoint).exists():
        print(f"error: checkpoint not found: {args.checkpoint}", file=sys.stderr)
        return 2
    out_dir = Path(args.out)
    manifest = _start_manifest(out_dir, config, args.seed)
    metrics = out_dir / "metrics.jsonl"
    if metrics.exists():
        metrics.unlink()
    book = default_book() if config["rl"]["use_book"] else None
    try:
        result = rl_train(args.checkpoint, int(config["rl"]["iterations"]),
                          ppo=ppo, adv=adv, pool_cfg=pool_cfg, book=book,
                          seed=args.seed, metrics_path=metrics,
                          pool_dir=out_dir / "pool")
    except KeyboardInterrupt:
        _finish_manifest(manifest, out_dir, metrics=metrics)
        print("interrupted; manifest finalized", file=sys.stderr)
        return 130
    checkpoint = out_dir / "checkpoint.ckpt"
    save(result.net, checkpoint)
    result.pool.save_manifest(out_dir / "pool.json")
    _finish_manifest(manifest, out_dir, checkpoint=checkpoint, metrics=metrics,
                     pool=out_dir / "pool.json")
    print(json.dumps({"checkpoint": str(checkpoint),
                      "iterations": len(result.history),
                      "metrics": str(metrics)}, sort_keys=True))
    return 0


def make_agent(spec: str, tau: float, cfg: dict):
    """Agent from a spec string: random | alphabeta:<depth> | <checkpoint>."""
    if spec == "random":
        return RandomAgent()
    if spec.startswith("alphabeta:"):
        try:
            depth = int(spec.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad alpha-beta depth in {spec!r}") from None
        return AlphaBetaAgent(build_search_config(cfg, depth=depth))
    if not Path(spec).exists():
        raise FileNotFoundError(spec)
    return NetAgent(load(spec), tau=tau, name=Path(spec).stem)


def cmd_arena(args) -> int:
    config = load_config(args.config)
    a_cfg = config["arena"]
    games = args.games if args.games is not None else int(a_cfg["games"])
    openings = default_book().lines if a_cfg["use_book"] else None
    match_cfg = MatchConfig(
        games=games, tau_a=float(a_cfg["tau_a"]), tau_b=float(a_cfg["tau_b"]),
        openings=openings, max_plies=int(a_cfg["max_plies"]), seed=args.seed,
    )
    try:
        agent_a = make_agent(args.agent_a, match_cfg.tau_a, config)
        agent_b = make_agent(args.agent_b, match_cfg.tau_b, config)
    except FileNotFoundError as exc:
        print(f"error: checkpoint not found: {exc}", file=sys.stderr)
        return 2
    report = play_match(agent_a, agent_b, match_cfg,
                        workers=int(a_cfg["workers"]))
    print(report.format_score())
    print(report.to_json())
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")
    return 0


def _ucci_position(tokens: List[str], reply) -> Optional[Position]:
    """Parse "position fen <fen> [moves ...]" / "position startpos [moves ...]"."""
    try:
        if tokens and tokens[0] == "startpos":
            pos = Position.initial()
            rest = tokens[1:]
        elif tokens and tokens[0] == "fen":
            if "moves" in tokens:
                cut = tokens.index("moves")
                fen_tokens, rest = tokens[1:cut], tokens[cut:]
            else:
                fen_tokens, rest = tokens[1:], []
            pos = Position.from_fen(" ".join(fen_tokens))
        else:
            reply("info string unknown command")
            return None
    except XqError as exc:
        reply(f"info string bad position: {exc}")
        return None
    if rest and rest[0] == "moves":
        for k, text in enumerate(rest[1:], start=1):
            try:
                pos = pos.apply_move(move_from_iccs(text))
            except XqError:
                reply(f"info string illegal move at {k}")
                return None
    return pos


def cmd_ucci(args, stdin=None, stdout=None) -> int:
    """Minimal UCCI loop: ucci / isready / position / go / quit.

    Moves come from the checkpoint's argmax policy when one is loaded,
    otherwise from alpha-beta at the configured depth; "go depth d"
    forces alpha-beta at depth d either way.
    """
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    config = load_config(args.config)
    net = load(args.checkpoint) if args.checkpoint else None
    tau = args.tau
    rng = np.random.default_rng(args.seed)
    pos = Position.initial()

    def reply(text: str) -> None:
        print(text, file=stdout, flush=True)

    for line in stdin:
        tokens = line.split()
        if not tokens:
            continue
        cmd, rest = tokens[0], tokens[1:]
        if cmd == "ucci":
            reply("ucciok")
        elif cmd == "isready":
            reply("readyok")
        elif cmd == "quit":
            break
        elif cmd == "position":
            parsed = _ucci_position(rest, reply)
            if parsed is not None:
                pos = parsed
        elif cmd == "go":
            if pos.terminal() is not None:
                reply("info string no move in a finished game")
                continue
            depth = None
            if len(rest) >= 2 and rest[0] == "depth":
                try:
                    depth = int(rest[1])
                except ValueError:
                    reply("info string bad depth")
                    continue
            if net is not None and depth is None:
                move = sample_move(net, pos, tau, rng)
            else:
                _, move = search(pos, build_search_config(config, depth=depth))
            reply(f"bestmove {move_to_iccs(move)}")
        else:
            reply("info string unknown command")
    return 0


def cmd_gradcheck(args) -> int:
    from .layers import run_gradcheck_suite

    results = run_gradcheck_suite(seed=args.seed)
    failed = []
    for spec, err in results:
        status = "ok" if err < args.tolerance else "FAIL"
        print(f"{status:4s} {type(spec).__name__:24s} max_rel_error={err:.3e}")
        if err >= args.tolerance:
            failed.append(type(spec).__name__)
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    print(f"all {len(results)} layer specs under {args.tolerance:g}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xqkit",
        description="Xiangqi policy/value training and evaluation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("perft", help="move-generator leaf counts")
    p.add_argument("--fen", default=None, help="position (default: startpos)")
    p.add_argument("--depth", type=int, required=True)
    p.add_argument("--expect", type=int, default=None,
                   help="exit 1 unless the count matches")
    p.set_defaults(func=cmd_perft)

    p = sub.add_parser("ingest", help="parse and clean game records")
    p.add_argument("paths", nargs="+")
    p.add_argument("--out", default=None, help="write dataset + index here")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train-sl", help="supervised policy/value training")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default="runs/sl")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resume", default=None, help="trainer checkpoint to continue")
    p.set_defaults(func=cmd_train_sl)

    p = sub.add_parser("train-rl", help="PPO fine-tuning against the pool")
    p.add_argument("--checkpoint", required=True, help="supervised starting point")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default="runs/rl")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_rl)

    p = sub.add_parser("arena", help="head-to-head match")
    p.add_argument("agent_a", help="random | alphabeta:<depth> | checkpoint path")
    p.add_argument("agent_b")
    p.add_argument("--config", default=None)
    p.add_argument("--games", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="also write the report here")
    p.set_defaults(func=cmd_arena)

    p = sub.add_parser("ucci", help="UCCI protocol adapter on stdin/stdout")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--tau", type=float, default=0.0,
                   help="sampling temperature, 0 plays argmax")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ucci)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except XqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
