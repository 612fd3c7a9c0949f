import math

import numpy as np
import pytest

import transagent as ta


def tiny_world():
    enc = ta.EncoderConfig()
    enc.depth, enc.width, enc.embed_width, enc.mlp_hidden, enc.max_tokens, enc.seed = 2, 32, 32, 32, 16, 11
    cfg = ta.BenchmarkConfig()
    cfg.dataset_id, cfg.seed, cfg.num_classes, cfg.latent_dim, cfg.patches = "toy", 5, 6, 4, 4
    cfg.train_per_class, cfg.test_per_class = 6, 8
    cfg.pretrain_classes, cfg.pretrain_images_per_class = 24, 4
    return ta.SyntheticBenchmark(cfg, enc)


def tiny_experiment():
    exp = ta.ExperimentConfig()
    exp.train.epochs, exp.train.batch_size, exp.train.shots = 2, 2, 2
    exp.seeds = [1]
    return exp


def test_harmonic_mean():
    assert ta.harmonic_mean(82.69, 63.22) == pytest.approx(71.66, abs=0.01)
    with pytest.raises(ta.InvalidInput):
        ta.harmonic_mean(0.0, 50.0)


def test_split_partitions_classes():
    base, novel = ta.base_novel_split(list(range(10)), 3)
    assert sorted(base + novel) == list(range(10))
    assert len(base) == len(novel) == 5


def test_learned_scores_are_cosines():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 5)), rng.normal(size=(4, 5))
    s = ta.learned_prompt_scores(a, b)
    an = a / np.linalg.norm(a, axis=1, keepdims=True)
    bn = b / np.linalg.norm(b, axis=1, keepdims=True)
    np.testing.assert_allclose(s, an @ bn.T, atol=1e-12)


def test_t2i_logsumexp():
    m = np.array([[0.0, 1.0, 2.0], [1.0, 1.0, 1.0]])
    s = ta.t2i_scores([m], "logsumexp")
    assert s.shape == (1, 2)
    assert s[0, 0] == pytest.approx(math.log(1 + math.e + math.e**2))
    assert s[0, 1] == pytest.approx(1.0 + math.log(3.0))


def test_losses():
    assert ta.ce_loss(np.zeros((2, 4)), [0, 3]) == pytest.approx(math.log(4.0))
    p = np.log(np.array([[0.2, 0.8]]))
    q = np.log(np.array([[0.5, 0.5]]))
    assert ta.mac_loss(p, q, "kl") >= 0.0
    assert ta.mac_loss(p, p, "kl") == pytest.approx(0.0, abs=1e-12)
    assert ta.total_loss(1.0, 2.0, 3.0, 4.0) == pytest.approx(1 + 2 + 25 * 3 + 4)
    with pytest.raises(ta.ConfigError):
        ta.mac_loss(p, q, "hinge")


def test_gate_weights_on_simplex():
    rng = np.random.default_rng(1)
    xs = [rng.normal(size=(5, 3)) for _ in range(3)]
    w, fused = ta.moa_gate(xs, hidden=8, seed=4)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
    expect = sum(w[:, [a]] * xs[a] for a in range(3))
    np.testing.assert_allclose(fused, expect, atol=1e-12)
    np.testing.assert_allclose(ta.fuse_average(xs), sum(xs) / 3, atol=1e-12)


def test_registry_round_trip():
    reg = ta.AgentRegistry.default()
    again = ta.AgentRegistry.parse(reg.to_json())
    assert again.agent_ids() == reg.agent_ids()
    with pytest.raises(ta.Error):
        ta.AgentRegistry.parse("{not json")


def test_config_errors():
    c = ta.RunConfig()
    with pytest.raises(ta.ConfigError):
        c.set("no.such.key", "1")
    assert "loss.lambda2" in ta.config_help()
    t = ta.TrainConfig()
    t.epochs = -1
    with pytest.raises(ta.ConfigError):
        t.validate()


def test_experiment_runs_and_is_deterministic():
    world = tiny_world()
    exp = tiny_experiment()
    a = ta.run_experiment(exp, world)
    b = ta.run_experiment(exp, world)
    assert a["hm"] == b["hm"]
    assert 0.0 <= a["base"] <= 100.0 and 0.0 <= a["novel"] <= 100.0
    assert [e["epoch"] for e in a["runs"][0]["log"]] == [1, 2]


def test_ablation_rows():
    world = tiny_world()
    exp = tiny_experiment()
    exp.train.epochs = 1
    rows = ta.run_ablation("fusion", exp, world)
    assert [r["label"] for r in rows] == ta.ablation_settings("fusion")
    with pytest.raises(ta.ConfigError):
        ta.ablation_settings("nope")
