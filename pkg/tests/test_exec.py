import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recrl.buffer import build_offline_buffer
from recrl.data.dataset import ItemCatalog
from recrl.data.synthetic import lowrank_dataset
from recrl.env import ChainEnv, QuitRule
from recrl.errors import ConfigError, ContractViolation
from recrl.exec import (
    EvalConfig, TrainConfig, check_paradigm, evaluate, make_envs, parse_mode, read_history, summarize, train,
    write_history, write_summary,
)
from recrl.exec.metrics import (
    compute_exposure_metrics, compute_rl_metrics, compute_user_model_metrics, episode_diversity, ranking_metrics,
)
from recrl.policy import PolicyConfig, RandomPolicy, make_policy
from recrl.tracker import TrackerConfig

N_USERS, N_ITEMS = 6, 15


@pytest.fixture(scope="module")
def world():
    rng = np.random.default_rng(0)
    truth = {(u, i): float(rng.integers(1, 6)) for u in range(N_USERS) for i in range(N_ITEMS)}
    category = np.arange(N_ITEMS) % 4
    catalog = ItemCatalog(N_ITEMS, category, np.full(N_ITEMS, 1.0 / N_ITEMS), 100)
    return truth, category, catalog


def envs_for(world, n=3, quit_rule=QuitRule(4, 2)):
    truth, category, _ = world
    return make_envs(None, N_ITEMS, n, category=category, quit_rule=quit_rule, truth=truth, n_users=N_USERS)


def policy(kind="a2c", seed=0):
    return make_policy(PolicyConfig(kind, seed=seed), TrackerConfig("average", 4, 5), N_USERS, N_ITEMS)


class TestRLMetrics:
    def test_examples(self):
        m = compute_rl_metrics([[1.0, 2.0, 3.0]])
        assert (m.R_cumu, m.length, m.R_avg) == (6.0, 3.0, 2.0)
        m = compute_rl_metrics([[2.5]])
        assert (m.R_cumu, m.R_avg, m.length) == (2.5, 2.5, 1.0)

    def test_errors(self):
        with pytest.raises(ContractViolation):
            compute_rl_metrics([])
        with pytest.raises(ContractViolation):
            compute_rl_metrics([[1.0], []])

    def test_brute_force(self):
        rng = np.random.default_rng(0)
        eps = [list(rng.uniform(0, 5, rng.integers(1, 30))) for _ in range(1000)]
        m = compute_rl_metrics(eps)
        totals = []
        for e in eps:
            s = 0.0
            for r in e:
                s += r
            totals.append(s)
        assert m.R_cumu == pytest.approx(sum(totals) / 1000, rel=1e-12)
        assert m.length == sum(len(e) for e in eps) / 1000
        for row, e in zip(m.per_episode, eps):
            assert row[0] == pytest.approx(row[1] * row[2], rel=1e-12)


class TestExposureMetrics:
    def test_diversity_examples(self):
        assert episode_diversity([0, 1, 2], np.array([0, 0, 1])) == pytest.approx(2 / 3)
        assert episode_diversity([0, 1], np.array([5, 5])) == 0.0
        assert episode_diversity([0, 1, 2], np.array([0, 1, 2])) == 1.0
        assert episode_diversity([3], np.arange(4)) == 1.0

    def test_full_coverage(self, world):
        _, _, catalog = world
        cov, div, nov = compute_exposure_metrics([list(range(N_ITEMS))], catalog)
        assert cov == 1.0 and 0 <= div <= 1
        assert nov == pytest.approx(np.log2(N_ITEMS))

    def test_novelty_floor(self):
        cat = ItemCatalog(2, [0, 1], [1.0, 0.0], 50)
        _, _, nov = compute_exposure_metrics([[1]], cat)
        assert nov == pytest.approx(np.log2(100))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 5), min_size=0, max_size=10), st.lists(st.integers(0, 2), min_size=6, max_size=6))
    def test_diversity_pair_oracle(self, items, cats):
        cats = np.array(cats)
        L = len(items)
        if L <= 1:
            expect = 1.0
        else:
            same = sum(cats[items[i]] == cats[items[j]] for i in range(L) for j in range(i + 1, L))
            expect = 1 - 2 * same / (L * (L - 1))
        assert episode_diversity(items, cats) == pytest.approx(expect)


class TestUserModelMetrics:
    def test_perfect(self):
        users = np.repeat([0, 1], 4)
        items = np.tile(np.arange(4), 2)
        truth = np.array([5, 1, 4, 2, 1, 5, 3, 2], dtype=float)
        m = compute_user_model_metrics(users, items, truth, truth, k=2)
        assert m["MAE"] == m["MSE"] == m["RMSE"] == 0.0
        assert m["NDCG@2"] == pytest.approx(1.0)

    def test_hand_computed_ranking(self):
        m = ranking_metrics({0: ["b", "a"]}, {0: {"a"}}, 2)
        assert m["HitRate@2"] == 1.0 and m["MRR@2"] == 0.5
        assert m["NDCG@2"] == pytest.approx(1 / np.log2(3))
        assert m["Recall@2"] == 1.0 and m["Precision@2"] == 0.5

    def test_constant_predictor_bound(self):
        rng = np.random.default_rng(1)
        truth = rng.uniform(1, 5, 200)
        users, items = np.zeros(200, int), np.arange(200)
        best = compute_user_model_metrics(users, items, np.full(200, truth.mean()), truth)["MSE"]
        assert best == pytest.approx(truth.var())
        assert compute_user_model_metrics(users, items, np.full(200, 3.7), truth)["MSE"] >= truth.var()

    def test_empty(self):
        with pytest.raises(ContractViolation):
            compute_user_model_metrics([], [], [], [])


class TestEvaluation:
    def test_parse_modes(self):
        assert parse_mode("FreeB") == ("FreeB", 0)
        assert parse_mode("NX_0_") == ("NX_0_", 0)
        assert parse_mode("NX_10_") == ("NX_X_", 10)
        assert EvalConfig("NX_7_").label == "NX_7_"
        with pytest.raises(ConfigError):
            parse_mode("NX")

    def test_nx_fixed_length(self, world):
        r = evaluate(policy(), envs_for(world), EvalConfig("NX_10_", n_episodes=100))
        assert np.all(r.per_episode[:, 2] == 10)

    def test_nx_zero_never_repeats(self, world):
        envs = envs_for(world, quit_rule=QuitRule(4, 4))
        from recrl.buffer import Buffer, extract_trajectories
        from recrl.collector import Collector
        from recrl.exec.runner import _mode_settings
        cfg = EvalConfig("NX_0_", n_episodes=100)
        buf = Buffer(len(envs), 10_000, N_ITEMS)
        with _mode_settings(envs, cfg):
            Collector(envs, buf).collect(policy("dqn"), n_episodes=100, mode="explore")
        trajs = extract_trajectories(buf)
        assert len(trajs) == 100
        assert all(len(set(t.actions.tolist())) == len(t.actions) for t in trajs)

    def test_freeb_allows_repeats_and_quits(self, world):
        r = evaluate(policy("dqn"), envs_for(world), EvalConfig("FreeB", n_episodes=20))
        assert r.length < 30  # a greedy Q policy repeats one item and the category quit fires

    def test_too_many_rounds(self, world):
        with pytest.raises(ConfigError):
            evaluate(policy(), envs_for(world), EvalConfig("NX_16_", n_episodes=2))

    def test_settings_restored(self, world):
        envs = envs_for(world)
        before = [(e.remove_recommended, e.quit_rule, e.max_steps) for e in envs]
        evaluate(policy(), envs, EvalConfig("NX_5_", n_episodes=3))
        assert before == [(e.remove_recommended, e.quit_rule, e.max_steps) for e in envs]

    def test_deterministic_and_parameter_free(self, world):
        p = policy("ppo")
        before = {k: v.copy() for k, v in p.state_dict().items()}
        a = evaluate(p, envs_for(world), EvalConfig("FreeB", n_episodes=30, stochastic=True), world[2])
        for k, v in p.state_dict().items():
            np.testing.assert_array_equal(v, before[k])
        b = evaluate(policy("ppo"), envs_for(world), EvalConfig("FreeB", n_episodes=30, stochastic=True), world[2])
        np.testing.assert_array_equal(a.per_episode, b.per_episode)
        assert a.row() == b.row()

    def test_cumulative_reward_reverified(self, world):
        truth = world[0]
        r = evaluate(RandomPolicy(N_ITEMS, 3), envs_for(world), EvalConfig("FreeB", n_episodes=40))
        assert r.R_cumu == pytest.approx(r.per_episode[:, 0].mean())
        assert max(truth.values()) * r.length >= r.R_cumu >= min(truth.values()) * r.length

    def test_coverage_grows_with_episodes(self, world):
        covs = [evaluate(RandomPolicy(N_ITEMS, 0), envs_for(world), EvalConfig("FreeB", n_episodes=n),
                         world[2]).coverage for n in (1, 5, 20)]
        assert covs == sorted(covs) and 0 <= covs[0] <= covs[-1] <= 1


class TestTraining:
    def test_paradigm_checks(self):
        with pytest.raises(ConfigError):
            check_paradigm(policy("bcq"), "UserModel")
        with pytest.raises(ConfigError):
            check_paradigm(policy("pg"), "OfflineLogs")
        check_paradigm(policy("dqn"), "OfflineLogs")
        with pytest.raises(ConfigError):
            TrainConfig("Online")
        with pytest.raises(ConfigError):
            train(policy("cql"), TrainConfig("OfflineLogs", epochs=1))

    def test_history_length_and_onpolicy_buffer(self, world):
        from recrl.buffer import Buffer
        envs = envs_for(world, 2)
        buf = Buffer(2, 1000, N_ITEMS)
        h = train(policy(), TrainConfig(epochs=4, rounds_per_epoch=2, episodes_per_round=3), envs, buf,
                  eval_envs=envs_for(world, 2), eval_config=EvalConfig(n_episodes=5), catalog=world[2])
        assert len(h) == 4 and len(buf) == 0
        assert all("R_cumu" in r and "loss_actor" in r for r in h)

    def test_offline_history(self):
        ds = lowrank_dataset(8, 10, seed=1, density=0.6)
        buf = build_offline_buffer(ds.train, "sequential")
        p = make_policy(PolicyConfig("crr", seed=0), TrackerConfig("gru", 4, 5), 8, 10)
        h = train(p, TrainConfig("OfflineLogs", epochs=3, rounds_per_epoch=2, batch_size=8), buffer=buf)
        assert [r["epoch"] for r in h] == [0, 1, 2]
        assert all("loss_actor" in r for r in h)

    @pytest.mark.parametrize("kind,lr", [("dqn", 1e-2), ("a2c", 1e-2), ("pg", 1e-2), ("ppo", 1e-2)])
    def test_chain_reaches_optimum(self, kind, lr):
        p = make_policy(PolicyConfig(kind, lr=lr, seed=0), TrackerConfig("average", 8, 1), 5, 2)
        cfg = TrainConfig("UserModel", epochs=200, rounds_per_epoch=1, episodes_per_round=4, updates_per_round=4,
                          batch_size=32, seed=0)
        train(p, cfg, envs=[ChainEnv()])
        r = evaluate(p, [ChainEnv()], EvalConfig("FreeB", n_episodes=1, max_steps=20, n_envs=1))
        optimum = 1.0  # undiscounted: four steps right, one unit of reward
        assert r.R_cumu >= 0.95 * optimum and r.length == 4


class TestFiles:
    def test_summary_uses_last_quarter(self):
        h = [{"epoch": k, "R_cumu": float(k)} for k in range(8)]
        s = summarize(h)
        assert s["R_cumu"] == 6.5 and s["averaged_epochs"] == 2

    def test_history_round_trip(self, tmp_path):
        h = [{"epoch": 0, "loss_td": 0.1, "R_cumu": 1 / 3}, {"epoch": 1, "loss_td": 0.05}]
        write_history(h, tmp_path / "h.csv", {"config_hash": "abc", "seed": 1})
        text = (tmp_path / "h.csv").read_text()
        assert text.startswith("# config_hash=abc seed=1\n")
        assert read_history(tmp_path / "h.csv") == h
        write_summary(summarize(h), tmp_path / "s.csv", {"seed": 1})
        assert "R_cumu," in (tmp_path / "s.csv").read_text()
        assert not math.isnan(summarize(h)["R_cumu"])
