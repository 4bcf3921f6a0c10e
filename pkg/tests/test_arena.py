import json

import numpy as np
import pytest

from xqkit.arena import (MatchConfig, MatchReport, NetAgent, RandomAgent,
                         elo, play_match, wilson_interval)
from xqkit.encoding import FeatureVariant
from xqkit.errors import ConfigError, DisconnectedGraphError, DomainError
from xqkit.models import ModResNetMicro, NetConfig, build
from xqkit.rl import default_book
from xqkit.rules import Position
from xqkit.search import AlphaBetaAgent, SearchConfig

TINY = NetConfig(variant=ModResNetMicro(blocks=1, channels=8),
                 feature_variant=FeatureVariant.BOARD_ONLY)


def report(wins, draws, losses, a="a", b="b", length=60.0):
    return MatchReport(agent_a=a, agent_b=b, games=wins + draws + losses,
                       wins=wins, draws=draws, losses=losses,
                       mean_length=length)


class TestMatchConfig:
    @pytest.mark.parametrize("kw", [
        {"games": 7}, {"games": 0}, {"max_plies": 0}, {"openings": []},
    ])
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            MatchConfig(**kw)


class TestWilson:
    def test_known_value(self):
        # p = 0.8, n = 10 at 95%: the standard worked example
        lo, hi = wilson_interval(8, 10)
        assert lo == pytest.approx(0.490, abs=1e-3)
        assert hi == pytest.approx(0.943, abs=1e-3)

    def test_contains_point_estimate(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(1, 500))
            s = int(rng.integers(0, n + 1))
            lo, hi = wilson_interval(s, n)
            assert 0.0 <= lo <= s / n <= hi <= 1.0

    def test_width_shrinks_like_root_n(self):
        def width(n):
            lo, hi = wilson_interval(int(0.7 * n), n)
            return hi - lo

        ratio = width(400) / width(1600)
        assert ratio == pytest.approx(2.0, rel=0.05)

    def test_empty_sample_is_vacuous(self):
        assert wilson_interval(0, 0) == (0.0, 1.0)


class TestRandomAgent:
    def test_moves_are_legal_and_seeded(self):
        agent = RandomAgent()
        pos = Position.initial()
        a = [agent.choose(pos, np.random.default_rng(3)) for _ in range(5)]
        b = [agent.choose(pos, np.random.default_rng(3)) for _ in range(5)]
        assert a == b
        legal = set(pos.legal_moves())
        assert all(m in legal for m in a)

    def test_requires_generator(self):
        with pytest.raises(DomainError):
            RandomAgent().choose(Position.initial())


class TestReport:
    def test_counts_must_sum(self):
        with pytest.raises(DomainError):
            MatchReport(agent_a="a", agent_b="b", games=10, wins=5, draws=2,
                        losses=1, mean_length=10.0)

    def test_rates_sum_to_one(self):
        r = report(5, 2, 1)
        assert r.win_rate + r.draw_rate + r.loss_rate == 1.0
        assert r.score == pytest.approx(0.75)

    def test_headline_format(self):
        assert report(5, 2, 1).format_score() == "62.5%(25.0%)"
        assert report(37, 1, 2, length=30).format_score() == "92.5%(2.5%)"

    def test_json_roundtrip(self):
        doc = json.loads(report(5, 2, 1).to_json())
        assert doc["summary"] == "62.5%(25.0%)"
        assert doc["wins"] == 5
        lo, hi = doc["win_rate_ci95"]
        assert lo <= doc["win_rate"] <= hi


@pytest.fixture(scope="module")
def net_a():
    return build(TINY, seed=0)


@pytest.fixture(scope="module")
def net_b():
    return build(TINY, seed=7)


class TestPlayMatch:
    def test_reports_are_bit_identical_across_runs(self, net_a, net_b):
        cfg = MatchConfig(games=4, max_plies=20, seed=5)
        one = play_match(NetAgent(net_a, name="A"), NetAgent(net_b, name="B"), cfg)
        two = play_match(NetAgent(net_a, name="A"), NetAgent(net_b, name="B"), cfg)
        assert one.to_json() == two.to_json()

    def test_swapping_agents_mirrors_the_report(self):
        ab = AlphaBetaAgent(SearchConfig(depth=1))
        rand = RandomAgent()
        cfg = MatchConfig(games=8, max_plies=120, seed=9)
        fwd = play_match(ab, rand, cfg)
        rev = play_match(rand, ab, cfg)
        assert (fwd.wins, fwd.draws, fwd.losses) == (rev.losses, rev.draws, rev.wins)
        assert fwd.mean_length == rev.mean_length
        assert fwd.wins > 0  # decisive games actually occurred

    def test_self_match_is_color_symmetric(self, net_a):
        cfg = MatchConfig(games=6, max_plies=30, seed=2)
        rep = play_match(NetAgent(net_a, tau=0, name="x"),
                         NetAgent(net_a, tau=0, name="x"), cfg)
        assert rep.wins == rep.losses
        assert rep.draws % 2 == 0

    def test_ply_cap_draws_everything(self, net_a, net_b):
        cfg = MatchConfig(games=4, max_plies=6, seed=1)
        rep = play_match(NetAgent(net_a), NetAgent(net_b), cfg)
        assert rep.draws == 4
        assert rep.mean_length == 6.0

    def test_openings_cycle_with_both_colors(self, net_a, net_b):
        lines = default_book().lines[:2]
        cfg = MatchConfig(games=8, max_plies=10, seed=3, openings=lines)
        rep = play_match(NetAgent(net_a), NetAgent(net_b), cfg)
        assert set(rep.per_opening) == {0, 1}
        assert all(sum(v) == 4 for v in rep.per_opening.values())
        totals = np.sum(list(rep.per_opening.values()), axis=0)
        assert list(totals) == [rep.wins, rep.draws, rep.losses]

    def test_workers_do_not_change_the_report(self, net_a, net_b):
        cfg = MatchConfig(games=8, max_plies=16, seed=4)
        serial = play_match(NetAgent(net_a), NetAgent(net_b), cfg)
        threaded = play_match(NetAgent(net_a), NetAgent(net_b), cfg, workers=4)
        assert serial.to_json() == threaded.to_json()


class TestElo:
    def test_even_score_means_equal_ratings(self):
        ratings = elo([report(25, 50, 25)])
        assert ratings["a"] == 0.0
        assert abs(ratings["b"]) < 1.0

    def test_three_quarters_score_gap(self):
        ratings = elo([report(750, 0, 250)])
        gap = ratings["a"] - ratings["b"]
        assert gap == pytest.approx(400 * np.log10(3), abs=10)

    def test_draws_count_half(self):
        pure = elo([report(750, 0, 250)])
        mixed = elo([report(700, 100, 200)])
        assert pure["b"] == pytest.approx(mixed["b"], abs=0.5)

    def test_chain_is_additive(self):
        reports = [report(750, 0, 250, a="top", b="mid"),
                   report(750, 0, 250, a="mid", b="low")]
        ratings = elo(reports, anchor="low")
        assert ratings["low"] == 0.0
        gap = 400 * np.log10(3)
        assert ratings["mid"] == pytest.approx(gap, abs=10)
        assert ratings["top"] == pytest.approx(2 * gap, abs=20)

    def test_anchor_choice_is_a_pure_shift(self):
        reports = [report(600, 100, 300, a="p", b="q"),
                   report(550, 0, 450, a="q", b="r")]
        one = elo(reports, anchor="p")
        two = elo(reports, anchor="r")
        for x, y in (("p", "q"), ("q", "r")):
            assert one[x] - one[y] == pytest.approx(two[x] - two[y], abs=1e-3)

    def test_disconnected_graph_rejected(self):
        reports = [report(10, 0, 10, a="a", b="b"),
                   report(10, 0, 10, a="c", b="d")]
        with pytest.raises(DisconnectedGraphError):
            elo(reports)

    def test_empty_and_unknown_anchor(self):
        with pytest.raises(DomainError):
            elo([])
        with pytest.raises(DomainError):
            elo([report(1, 0, 1)], anchor="nobody")

    def test_deterministic(self):
        reports = [report(620, 55, 325, a="u", b="v")]
        assert elo(reports) == elo(reports)
