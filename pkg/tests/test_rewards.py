import json
import math
import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.distance import jensenshannon

from evida.bank import GroupKey
from evida.inference import InferenceConfig
from evida.llm import DecodingParams, HeuristicMockLLM, ScriptedLLM
from evida.rewards import (
    DEFAULT_WEIGHTS,
    GRPO_PASSTHROUGH,
    BatchHeader,
    IncompleteGroupError,
    InsufficientSupportError,
    RewardWeights,
    ScoredRollout,
    ScoringError,
    build_episode,
    collect_rollouts,
    combine,
    export_training_batch,
    group_advantages,
    jsd,
    r_dist,
    r_lmh,
    read_training_batch,
    sample_episodes,
    score_rollout,
)
from evida.values import LMHSignature

LOW = LMHSignature(("low",) * 8)
HIGH = LMHSignature(("high",) * 8)
MIX = LMHSignature(("low",) * 4 + ("high",) * 4)


def random_dist(rng, keys):
    w = [rng.random() ** 3 for _ in keys]
    s = math.fsum(w)
    return {k: x / s for k, x in zip(keys, w)}


def scipy_jsd(p, q):
    keys = sorted(set(p) | set(q))
    a = np.array([p.get(k, 0.0) for k in keys])
    b = np.array([q.get(k, 0.0) for k in keys])
    return float(jensenshannon(a, b, base=2) ** 2)


def test_jsd_matches_scipy_oracle():
    rng = random.Random(1)
    for _ in range(300):
        keys = [f"o{i}" for i in range(rng.randint(2, 7))]
        p, q = random_dist(rng, keys), random_dist(rng, keys[: rng.randint(1, len(keys))])
        assert jsd(p, q) == pytest.approx(scipy_jsd(p, q), abs=1e-12)


def test_jsd_known_values():
    assert jsd({"A": 1.0}, {"B": 1.0}) == 1.0
    assert jsd({"A": 0.3, "B": 0.7}, {"A": 0.3, "B": 0.7}) == 0.0
    direct = 0.5 * (0.5 * math.log2(0.5 / 0.75) + 0.5 * math.log2(0.5 / 0.25)) + 0.5 * math.log2(1 / 0.75)
    assert jsd({"A": 0.5, "B": 0.5}, {"A": 1.0}) == pytest.approx(direct, abs=1e-12)
    assert jsd({"A": 0.5, "B": 0.5}, {"A": 1.0}) == pytest.approx(0.3113, abs=1e-4)


def test_jsd_rejects_non_distributions():
    with pytest.raises(ValueError):
        jsd({"A": 0.5}, {"A": 1.0})
    with pytest.raises(ValueError):
        jsd({"A": -0.5, "B": 1.5}, {"A": 1.0})


@given(st.lists(st.floats(0.001, 1.0), min_size=2, max_size=6), st.lists(st.floats(0.001, 1.0), min_size=2, max_size=6))
def test_jsd_properties(wp, wq):
    p = {str(i): w / math.fsum(wp) for i, w in enumerate(wp)}
    q = {str(i): w / math.fsum(wq) for i, w in enumerate(wq)}
    assert abs(jsd(p, q) - jsd(q, p)) <= 1e-12
    assert 0.0 <= jsd(p, q) <= 1.0
    assert r_dist(p, q) == 1.0 - jsd(p, q)


def test_r_dist_invalid_is_zero():
    assert r_dist(None, {"A": 1.0}) == 0.0


def test_r_lmh():
    assert r_lmh({"1": LOW, "2": HIGH}, {"1": LOW, "2": HIGH}) == 1.0
    assert r_lmh({"1": LOW, "2": HIGH}, {"1": MIX, "2": MIX}) == 0.5
    # options nobody chose carry no gold and are skipped
    assert r_lmh({"1": LOW, "2": LOW}, {"1": LOW, "2": None}) == 1.0
    with pytest.raises(ScoringError):
        r_lmh({"1": LOW}, {"1": None})
    with pytest.raises(ScoringError):
        r_lmh({"1": LOW}, {"2": LOW})


def test_default_weights_and_passthrough():
    assert DEFAULT_WEIGHTS.as_tuple() == (0.25, 0.45, 0.15, 0.15)
    assert GRPO_PASSTHROUGH == {"clip_epsilon": 0.2, "epochs": 1, "kl_beta": 0.04, "learning_rate": 1e-6, "batch_size": 32}
    with pytest.raises(ValueError):
        RewardWeights(0, 0, 0, 0)
    with pytest.raises(ValueError):
        RewardWeights(-1, 1, 1, 1)


def test_combine_hand_computed():
    rng = random.Random(4)
    for _ in range(100):
        a, b, c, d = rng.random(), rng.random(), rng.randint(0, 1), rng.randint(0, 1)
        assert combine(DEFAULT_WEIGHTS, a, b, c, d) == 0.25 * a + 0.45 * b + 0.15 * c + 0.15 * d
    assert combine(DEFAULT_WEIGHTS, 1, 1, 1, 1) == pytest.approx(1.0)


def test_advantages():
    rng = random.Random(2)
    for _ in range(200):
        rewards = [rng.random() for _ in range(16)]
        adv = np.array(group_advantages(rewards).advantages)
        assert abs(adv.mean()) < 1e-9
        assert abs(adv.std() - 1.0) < 1e-9
    assert group_advantages([0.4] * 16).advantages == (0.0,) * 16
    with pytest.raises(ValueError):
        group_advantages([1.0])


def test_episode_holds_out_target(bank20, index20):
    g = GroupKey("Japan")
    iid = sorted(bank20.groups[g].items)[0]
    ep = build_episode(bank20, g, iid, index20)
    ev = bank20.groups[g].items[iid]
    assert iid not in ep.evidence.item_ids
    assert ep.gold_distribution == dict(ev.distribution)
    assert ep.gold_signatures == ev.signatures()
    assert ep.episode_id == f"Japan::{iid}"
    with pytest.raises(InsufficientSupportError):
        build_episode(bank20, g, iid, index20, n_min=10_000)


def test_sample_episodes_seeded_and_reports_skips(bank20, index20):
    groups = sorted(bank20.groups)
    a = sample_episodes(bank20, groups, 5, index20, seed=7)
    b = sample_episodes(bank20, groups, 5, index20, seed=7)
    assert [e.episode_id for e in a.episodes] == [e.episode_id for e in b.episodes]
    starved = sample_episodes(bank20, groups, 5, index20, seed=7, n_min=10_000)
    assert starved.episodes == [] and len(starved.skipped) == 40


def test_rollouts_scoring_and_export(tmp_path, bank20, index20):
    g = GroupKey("Germany")
    ep = build_episode(bank20, g, sorted(bank20.groups[g].items)[2], index20)
    cfg = InferenceConfig(decoding=DecodingParams(seed=1))
    rollouts = collect_rollouts(ep, bank20, index20, HeuristicMockLLM(), cfg, group_size=4, base_seed=3, max_in_flight=2)
    again = collect_rollouts(ep, bank20, index20, HeuristicMockLLM(), cfg, group_size=4, base_seed=3)
    assert [r.to_dict() for r in rollouts] == [r.to_dict() for r in again]
    assert len({json.dumps(r.normalized_distribution, sort_keys=True) for r in rollouts}) == 4
    scored = [ScoredRollout(ep, r, score_rollout(ep, r)) for r in rollouts]
    for s in scored:
        b = s.breakdown
        assert b.r_sch_a == b.r_sch_b == 1
        assert b.r_dist == 1.0 - jsd(s.rollout.normalized_distribution, ep.gold_distribution)
        assert b.total == combine(DEFAULT_WEIGHTS, b.r_lmh, b.r_dist, 1, 1)
    adv = group_advantages([s.breakdown.total for s in scored])
    header = BatchHeader(group_size=4, seed=3)
    path = export_training_batch([scored], [adv], tmp_path / "batch.jsonl", header)
    head, rows = read_training_batch(path)
    assert head["optimizer"] == GRPO_PASSTHROUGH and head["group_size"] == 4
    assert len(rows) == 4
    assert [r["advantage"] for r in rows] == list(adv.advantages)
    with pytest.raises(IncompleteGroupError):
        export_training_batch([scored[:3]], [adv], tmp_path / "bad.jsonl", header)


def test_invalid_rollout_scores_zero_components(bank20, index20):
    g = GroupKey("Germany")
    ep = build_episode(bank20, g, sorted(bank20.groups[g].items)[0], index20)
    [ro] = collect_rollouts(ep, bank20, index20, ScriptedLLM.always("nope"), InferenceConfig(), group_size=1)
    b = score_rollout(ep, ro)
    assert (b.r_lmh, b.r_dist, b.r_sch_a, b.r_sch_b, b.total) == (0.0, 0.0, 0, 0, 0.0)
    assert ro.stage_a.attempts == 1
