"""Acceptance gate: eleven go/no-go checks spanning move generation,
gradients, advantage estimators, sampling, pool selection, masking, both
trainers, search, and end-to-end determinism.

Each check prints exactly one "criterion NN PASS/FAIL" line (visible with
-s or in captured output). Budgeted checks assert their own wall-clock
limits. The RL smoke check is stochastic by nature and is allowed three
seeded attempts; any pass accepts.
"""

import json
import time
from contextlib import contextmanager

import numpy as np
import pytest
from scipy.stats import chisquare

from xqkit import autodiff as ad
from xqkit.arena import (MatchConfig, NetAgent, RandomAgent, play_match,
                         wilson_interval)
from xqkit.autodiff import Adam
from xqkit.cli import main
from xqkit.encoding import (NUM_ACTIONS, FeatureVariant, legality_mask,
                            move_to_index)
from xqkit.layers import run_gradcheck_suite
from xqkit.models import (ModResNetMicro, NetConfig, build, infer_position,
                          load, save)
from xqkit.pool import Pool, PoolConfig, PoolEntry
from xqkit.records import SampleMode, sample_weight, synthesize_records
from xqkit.rl import (AdvConfig, AdvMode, Batch, PPOConfig, Trajectory,
                      build_batch, default_book, gae, ppo_losses, ppo_update,
                      rl_train, vect)
from xqkit.rules import Position
from xqkit.search import AlphaBetaAgent, SearchConfig, search
from xqkit.sl import (SLConfig, all_samples, evaluate_stagewise,
                      save_trainer_state, train)

from oracles import (deterministic_openings_corpus, fullwidth_negamax,
                     oracle_gae, random_playout_positions)


@contextmanager
def gate(number, description):
    try:
        yield
    except BaseException:
        print(f"criterion {number:2d} FAIL  {description}")
        raise
    print(f"criterion {number:2d} PASS  {description}")


def random_episode(rng, min_len=2, max_len=40):
    n = int(rng.integers(min_len, max_len + 1))
    rewards = rng.normal(size=n)
    values = rng.normal(size=n)
    bootstrap = float(rng.normal())
    return rewards, values, bootstrap


@pytest.mark.slow
def test_criterion_01_movegen_perft():
    with gate(1, "perft(1..4) from the opening position, exact, < 60 s"):
        t0 = time.perf_counter()
        pos = Position.initial()
        counts = [pos.perft(d) for d in (1, 2, 3, 4)]
        elapsed = time.perf_counter() - t0
        assert counts == [44, 1920, 79666, 3290240]
        assert elapsed < 60.0


@pytest.mark.slow
def test_criterion_02_gradient_correctness():
    with gate(2, "grad_check over every layer spec, max rel err < 1e-4"):
        t0 = time.perf_counter()
        results = run_gradcheck_suite(seed=0)
        elapsed = time.perf_counter() - t0
        assert len(results) == 12
        worst = max(err for _, err in results)
        assert worst < 1e-4, [(type(s).__name__, e) for s, e in results]
        assert elapsed < 120.0


def test_criterion_03_estimator_identities():
    with gate(3, "vect==gae at full horizon; telescoped form; gae oracle"):
        rng = np.random.default_rng(31)
        # (a) horizon at or past episode length makes vect and gae agree.
        for _ in range(200):
            rewards, values, bootstrap = random_episode(rng)
            gamma = float(rng.uniform(0.9, 1.0))
            lam = float(rng.uniform(0.5, 1.0))
            reference = gae(rewards, values, gamma, lam, bootstrap=bootstrap)
            for horizon in (len(rewards), len(rewards) + 3, None):
                trunc = vect(rewards, values, gamma, lam, horizon,
                             bootstrap=bootstrap)
                assert np.max(np.abs(trunc - reference)) <= 1e-12
        # (b) gamma = lam = 1 telescopes to a windowed return difference.
        for _ in range(1000):
            rewards, values, bootstrap = random_episode(rng)
            n = len(rewards)
            horizon = int(rng.integers(0, n + 3))
            got = vect(rewards, values, 1.0, 1.0, horizon,
                       bootstrap=bootstrap)
            padded = np.append(values, bootstrap)
            closed = np.empty(n)
            for t in range(n):
                m = min(t + horizon, n - 1)
                closed[t] = rewards[t:m + 1].sum() + padded[m + 1] - values[t]
            assert np.max(np.abs(got - closed)) <= 1e-9
        # (c) gae against the brute-force double loop.
        for _ in range(300):
            rewards, values, bootstrap = random_episode(rng)
            gamma = float(rng.uniform(0.8, 1.0))
            lam = float(rng.uniform(0.0, 1.0))
            got = gae(rewards, values, gamma, lam, bootstrap=bootstrap)
            want = oracle_gae(rewards, values, bootstrap, gamma, lam)
            assert np.max(np.abs(got - want)) <= 1e-9


def test_criterion_04_sampling_curve_fidelity():
    with gate(4, "curve draw frequencies chi-square p > 0.01; w(0) == 0.5"):
        for total in (10, 33, 200):
            assert sample_weight(0, total) == 0.5
        from xqkit.sl import BatchSampler
        record = synthesize_records(1, seed=13, max_plies=60)[0]
        total = record.num_plies
        assert total >= 30
        sampler = BatchSampler([record], SampleMode.CURVE)
        rng = np.random.default_rng(4)
        draws = 100_000
        counts = np.zeros(total)
        for point in sampler.draw(draws, rng):
            counts[point.t] += 1
        weights = np.array([sample_weight(t, total) for t in range(total)])
        expected = weights / weights.sum() * draws
        assert chisquare(counts, expected).pvalue > 0.01


def test_criterion_05_pool_selection_and_gating(tmp_path):
    with gate(5, "softmax-by-weakness within 2% over 100k; gate iff ready"):
        ckpt = tmp_path / "seed.ckpt"
        net_cfg = NetConfig(variant=ModResNetMicro(blocks=1, channels=8),
                            feature_variant=FeatureVariant.BOARD_ONLY)
        save(build(net_cfg, seed=0), ckpt)

        pool = Pool.init(ckpt, PoolConfig(tau_sel=1.0), directory=tmp_path)
        pool.entries[0].r = 0.0
        pool.entries.append(PoolEntry(entry_id=1, path=str(ckpt), r=1.0))
        expected = np.array([1.0, np.exp(-1.0)])
        expected /= expected.sum()
        assert expected[0] == pytest.approx(0.7311, abs=5e-5)
        rng = np.random.default_rng(5)
        draws = 100_000
        picks = np.array([pool.select(rng).entry_id for _ in range(draws)])
        freq = np.bincount(picks, minlength=2) / draws
        assert np.max(np.abs(freq - expected)) < 0.02

        # Gate truth table over (min-games satisfied, min r >= theta).
        def staged(rates, games_each):
            p = Pool.init(ckpt, PoolConfig(theta=0.55, min_games=2),
                          directory=tmp_path)
            p.entries[0].r = rates[0]
            p.entries[0].games_since_gate = games_each
            for i, r in enumerate(rates[1:], start=1):
                p.entries.append(PoolEntry(entry_id=i, path=str(ckpt), r=r,
                                           games_since_gate=games_each))
            return p

        assert staged([0.6, 0.58], 2).maybe_gate(load(ckpt)) is True
        assert staged([0.6, 0.54], 2).maybe_gate(load(ckpt)) is False
        assert staged([0.6, 0.58], 1).maybe_gate(load(ckpt)) is False
        assert staged([0.9, 0.9], 0).maybe_gate(load(ckpt)) is False


def test_criterion_06_masking():
    with gate(6, "1,000 positions: illegal prob 0, legal sum 1, popcount"):
        net_cfg = NetConfig(variant=ModResNetMicro(blocks=1, channels=8),
                            feature_variant=FeatureVariant.BOARD_ONLY)
        net = build(net_cfg, seed=6)
        positions = random_playout_positions(1000, seed=60)
        assert len(positions) == 1000
        for pos in positions:
            mask = legality_mask(pos)
            legal = pos.legal_moves()
            assert int(mask.sum()) == len(legal)
            out = infer_position(net, pos)
            assert np.all(out.probs[~mask] == 0.0)
            assert abs(out.probs[mask].sum() - 1.0) <= 1e-6
            for move in legal:
                assert mask[move_to_index(move)]


@pytest.mark.slow
def test_criterion_07_sl_overfit():
    with gate(7, "256-sample corpus to >= 95% top-1 in 2,000 steps, < 5 min"):
        corpus = deterministic_openings_corpus(n_games=8, plies=32)
        samples = all_samples(corpus)
        assert len(samples) == 256
        cfg = SLConfig(batch_size=16, steps=2000, lr=1e-3, eval_fraction=0.0,
                       sampling=SampleMode.UNIFORM,
                       feature_variant=FeatureVariant.BOARD_ONLY,
                       log_every=500)
        net_cfg = NetConfig(variant=ModResNetMicro(blocks=1, channels=16),
                            feature_variant=FeatureVariant.BOARD_ONLY)
        t0 = time.perf_counter()
        result = train(corpus, cfg, net_cfg, seed=0)
        elapsed = time.perf_counter() - t0
        accuracy = evaluate_stagewise(result.net, samples).overall
        assert accuracy >= 0.95
        assert elapsed < 300.0


class _TableNet:
    """Observation-blind logit table; minimal net for bandit training."""

    def __init__(self):
        self.W = ad.parameter(np.zeros((1, NUM_ACTIONS)))
        self.v = ad.parameter(np.zeros((1, 1)))

    def params(self):
        return [self.W, self.v]

    def forward_batch(self, obs_t):
        n = obs_t.shape[0]
        return (ad.broadcast_to(self.W, (n, NUM_ACTIONS)),
                ad.broadcast_to(self.v, (n, 1)))


def _bandit_mask():
    mask = np.zeros(NUM_ACTIONS, bool)
    mask[:2] = True
    return mask


def test_criterion_08_ppo_sanity():
    with gate(8, "bandit >= 0.95 on the better arm; clipped grads are zero"):
        # Two-armed bandit: arm 0 pays 1, arm 1 pays 0.
        net = _TableNet()
        opt = Adam(net.params(), lr=3e-3)
        rng = np.random.default_rng(0)
        cfg = PPOConfig(lr=3e-3)
        mask = _bandit_mask()
        for _ in range(500):
            z = net.W.data[0, :2] - net.W.data[0, :2].max()
            p = np.exp(z) / np.exp(z).sum()
            trajs = []
            for _ in range(32):
                a = int(rng.choice(2, p=p))
                trajs.append(Trajectory(
                    obs=np.zeros((1, 1, 1, 1), np.float32), masks=mask[None],
                    slots=None, actions=np.array([a], np.int64),
                    log_probs=np.array([float(np.log(p[a]))]),
                    rewards=np.array([1.0 if a == 0 else 0.0]),
                    values=np.array([float(net.v.data[0, 0])]),
                    dones=np.array([True])))
            ppo_update(net, opt, build_batch(trajs, AdvConfig(mode=AdvMode.GAE)),
                       cfg, rng)
        z = net.W.data[0, :2] - net.W.data[0, :2].max()
        p = np.exp(z) / np.exp(z).sum()
        assert p[0] >= 0.95

        # Ratios pushed past 1 + eps with positive advantages: the clipped
        # branch is active everywhere, so the policy gradient must vanish.
        clip_net = _TableNet()
        batch = Batch(
            obs=np.zeros((2, 1, 1, 1), np.float32),
            masks=np.tile(mask, (2, 1)), slots=None,
            actions=np.array([0, 1], np.int64),
            old_log_probs=np.full(2, -5.0),
            advantages=np.array([2.0, 1.5]),
            targets=np.zeros(2),
        )
        policy_loss, _, _, ratios = ppo_losses(
            clip_net, batch, np.arange(2), batch.advantages, PPOConfig())
        assert np.all(ratios > 1.2)
        policy_loss.backward()
        assert np.array_equal(clip_net.W.grad, np.zeros_like(clip_net.W.grad))


def _history_free_positions(n, seed, max_plies=50):
    """Non-terminal playout positions re-rooted without game history, so
    no repetition or move-cap draw is reachable inside a shallow tree."""
    out = []
    for p in random_playout_positions(3 * n, seed, max_plies=max_plies):
        if p.terminal() is None:
            out.append(Position.from_board(p.board, p.side_to_move))
        if len(out) == n:
            break
    assert len(out) == n
    return out


@pytest.mark.slow
def test_criterion_09_alpha_beta_soundness():
    with gate(9, "search == negamax over 200 positions; d3 >= 95% vs random"):
        positions = _history_free_positions(200, seed=90)
        split = [(pos, 1) for pos in positions[:120]] + \
                [(pos, 2) for pos in positions[120:184]] + \
                [(pos, 3) for pos in positions[184:]]
        for pos, depth in split:
            got = search(pos, SearchConfig(depth=depth))
            want = fullwidth_negamax(pos, depth)
            assert got == want, (pos.to_fen(), depth, got, want)

        report = play_match(AlphaBetaAgent(SearchConfig(depth=3)),
                            RandomAgent(),
                            MatchConfig(games=200, max_plies=240, seed=900))
        assert report.win_rate >= 0.95, report.as_dict()["summary"]


@pytest.mark.slow
def test_criterion_10_rl_smoke_improvement(tmp_path):
    with gate(10, "smoke RL beats frozen SL init, Wilson LB > 0.50, < 30 min"):
        t0 = time.perf_counter()
        net_cfg = NetConfig(variant=ModResNetMicro(blocks=1, channels=8),
                            feature_variant=FeatureVariant.BOARD_ONLY)
        records = synthesize_records(16, seed=11, max_plies=80)
        sl_cfg = SLConfig(batch_size=16, steps=200, lr=1e-3,
                          eval_fraction=0.0, sampling=SampleMode.UNIFORM,
                          feature_variant=FeatureVariant.BOARD_ONLY,
                          log_every=100)
        sl_ckpt = tmp_path / "sl_init.ckpt"
        save_trainer_state(train(records, sl_cfg, net_cfg, seed=0), sl_ckpt)
        frozen = load(sl_ckpt)

        # Smoke profile: tiny net, 60-ply cap, 30 iterations, and a pool
        # held at the init snapshot so training targets the eval opponent.
        # Known bar: winning 55% of all 400 games inside 60 plies requires
        # forcing conversion at roughly two-ply-search strength (alpha-beta
        # depth 1 measures a 0.405 win rate against this init, depth 2
        # measures 0.705). The smoke profile trains a real but far smaller
        # edge (best measured 23W/370D/7L). The check stays strict.
        ppo = PPOConfig(games_per_iter=16, max_plies=60, lr=1e-3, epochs=3,
                        minibatch_size=128, tau_train=1.0)
        adv = AdvConfig(mode=AdvMode.VECT, gamma=1.0, lam=0.95, horizon=20)
        pool_cfg = PoolConfig(min_games=10**6, tau_opp=1.0)

        passed = False
        for attempt in range(3):
            result = rl_train(sl_ckpt, 30, ppo=ppo, adv=adv,
                              pool_cfg=pool_cfg, book=default_book(),
                              seed=attempt, pool_dir=tmp_path / "pool")
            report = play_match(
                NetAgent(result.net, tau=1.0, name="rl"),
                NetAgent(frozen, tau=1.0, name="sl-init"),
                MatchConfig(games=400, max_plies=60, seed=1000 + attempt))
            lower, _ = wilson_interval(report.wins, report.games)
            print(f"attempt {attempt}: {report.wins}W {report.draws}D "
                  f"{report.losses}L  win-rate LB {lower:.3f}")
            if lower > 0.50:
                passed = True
                break
        elapsed = time.perf_counter() - t0
        assert passed, "no attempt reached a win-rate lower bound above 0.50"
        assert elapsed < 1800.0


def test_criterion_11_cli_determinism(tmp_path, capsys):
    with gate(11, "train-sl and arena byte-identical across same-seed runs"):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({
            "model": {"variant": "mod_resnet_micro", "blocks": 1,
                      "channels": 8},
            "encoding": {"feature_variant": "board_only"},
            "sl": {"steps": 4, "log_every": 2, "eval_fraction": 0.0},
            "data": {"synthesize_games": 4, "synthesize_plies": 30},
            "arena": {"max_plies": 80},
        }))
        sl_outs = []
        for name in ("sl_a", "sl_b"):
            out = tmp_path / name
            assert main(["train-sl", "--config", str(cfg_path),
                         "--out", str(out), "--seed", "7"]) == 0
            sl_outs.append(out)
        for artifact in ("checkpoint.ckpt", "checkpoint.ckpt.opt",
                         "metrics.jsonl"):
            a = (sl_outs[0] / artifact).read_bytes()
            b = (sl_outs[1] / artifact).read_bytes()
            assert a == b, f"{artifact} differs between same-seed runs"

        reports = []
        for name in ("r1.json", "r2.json"):
            assert main(["arena", "alphabeta:1", "random", "--games", "4",
                         "--seed", "7", "--config", str(cfg_path),
                         "--out", str(tmp_path / name)]) == 0
            reports.append((tmp_path / name).read_bytes())
        assert reports[0] == reports[1]
        capsys.readouterr()
