from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from interactpred.adapt import (FeaturePolicy, FrozenFeatures, PolicyHead,
                                PusherEnv, PusherEnvState, RandomPolicy, adapt_reg_head,
                                average_precision, collect_demos, evaluate_policy,
                                evaluate_reg, generate_reg_dataset, load_demos,
                                load_reg_dataset, proprio_map_aggregate, rollout, save_demos,
                                save_reg_dataset, scripted_expert, train_bc_policy)
from interactpred.adapt.reg import GroundingHead, GroundingInputs
from interactpred.config import ModelConfig
from interactpred.encoder import MultimodalEncoder


@pytest.fixture
def env():
    return PusherEnv(canvas_size=32)


@pytest.fixture
def encoder(vocab):
    torch.manual_seed(0)
    return MultimodalEncoder(ModelConfig.minimal(), vocab)


def _mirror(s: PusherEnvState) -> PusherEnvState:
    flip = lambda p: (1.0 - p[0], p[1])
    return replace(s, agent=flip(s.agent), obj=flip(s.obj), goal=flip(s.goal))


# ---------------------------------------------------------------- environment

def test_layouts_are_seeded(env):
    assert env.layouts(5, 3) == env.layouts(5, 3)
    assert env.layouts(5, 3) != env.layouts(5, 4)


def test_render_shape_and_proprio(env):
    s = env.layouts(1, 0)[0]
    frame = env.render(s)
    assert frame.shape == (32, 32, 3) and frame.dtype == np.uint8
    p = env.proprio(s)
    assert (p.x, p.y) == s.agent and not p.contact
    assert p.as_array().shape == (3,)


def test_zero_action_keeps_state(env):
    s = env.layouts(1, 1)[0]
    nxt, _, _, success, info = env.step(s, np.zeros(2))
    assert nxt.agent == s.agent and nxt.obj == s.obj and nxt.steps == 1
    assert not success and not info["action_clipped"]


def test_action_is_clipped(env):
    s = env.layouts(1, 1)[0]
    a, _, _, _, info = env.step(s, np.array([5.0, 0.0]))
    b, _, _, _, _ = env.step(s, np.array([1.0, 0.0]))
    assert info["action_clipped"] and a.agent == b.agent


def test_push_moves_object_along_contact_normal(env):
    r = env.contact_distance
    s = PusherEnvState(agent=(0.5 - r - 0.01, 0.5), obj=(0.5, 0.5), goal=(0.8, 0.5))
    nxt, _, prop, _, _ = env.step(s, np.array([1.0, 0.0]))
    assert nxt.obj[0] > 0.5 and nxt.obj[1] == pytest.approx(0.5)
    assert np.linalg.norm(np.subtract(nxt.obj, nxt.agent)) == pytest.approx(r)
    assert prop.contact


def test_object_pinned_at_wall_pushes_agent_back(env):
    r, ro = env.contact_distance, env.object_radius
    s = PusherEnvState(agent=(1 - ro - r, 0.5), obj=(1 - ro, 0.5), goal=(0.2, 0.5))
    nxt, *_ = env.step(s, np.array([1.0, 0.0]))
    assert nxt.obj[0] == pytest.approx(1 - ro)
    assert np.linalg.norm(np.subtract(nxt.obj, nxt.agent)) == pytest.approx(r)


def test_episode_ends_and_refuses_more_steps():
    env = PusherEnv(canvas_size=32, max_steps=3)
    s = env.layouts(1, 0)[0]
    for _ in range(3):
        s, *_ = env.step(s, np.zeros(2))
    assert s.done and not s.success
    with pytest.raises(RuntimeError):
        env.step(s, np.zeros(2))


def test_expert_solves_layouts(env):
    wins = 0
    for s in env.layouts(100, 7):
        final, _ = rollout(env, s, lambda st, f, p: scripted_expert(env, st))
        wins += final.success
    assert wins == 100


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_expert_is_mirror_equivariant(seed):
    env = PusherEnv(canvas_size=32)
    s = env.sample_layout(np.random.default_rng(seed))
    a = scripted_expert(env, s)
    b = scripted_expert(env, _mirror(s))
    np.testing.assert_allclose(b, [-a[0], a[1]], atol=1e-9)
    nxt, *_ = env.step(s, a)
    nxt_m, *_ = env.step(_mirror(s), b)
    np.testing.assert_allclose(_mirror(nxt).agent, nxt_m.agent, atol=1e-9)
    np.testing.assert_allclose(_mirror(nxt).obj, nxt_m.obj, atol=1e-9)


# ---------------------------------------------------------------- policy heads

def test_frozen_features_freeze_encoder(encoder, env):
    feats = FrozenFeatures(encoder)
    assert not any(p.requires_grad for p in encoder.parameters())
    frames = np.stack([env.render(s) for s in env.layouts(3, 0)])
    v, v_agg = feats(frames)
    assert v.shape == (3, 4, 16) and v_agg.shape == (3, 16) and not v.requires_grad


@pytest.mark.parametrize("mode,width", [("pre_aggregation", 19), ("post_aggregation_map", 19),
                                        ("proprio_conditioned_map", 16)])
def test_head_input_widths(mode, width):
    head = PolicyHead(16, mode, hidden=(8,))
    assert head.input_dim == width
    out = head(torch.randn(5, 4, 16), torch.randn(5, 16), torch.rand(5, 3))
    assert out.shape == (5, 2) and out.abs().max() <= 1


def test_head_rejects_bad_mode_and_width():
    with pytest.raises(ValueError):
        PolicyHead(16, "mean_pool")
    head = PolicyHead(16)
    with pytest.raises(ValueError):
        head(torch.randn(2, 4, 8), torch.randn(2, 8), torch.rand(2, 3))


def test_pre_aggregation_adds_no_aggregator_params():
    head = PolicyHead(16, "pre_aggregation", hidden=(8,))
    assert all(n.startswith("mlp.") for n, _ in head.named_parameters())


def test_proprio_map_depends_on_proprio():
    torch.manual_seed(0)
    head = PolicyHead(16, "proprio_conditioned_map", hidden=(8,))
    v = torch.randn(1, 4, 16)
    a = proprio_map_aggregate(head, v, torch.tensor([[0.2, 0.3, 0.0]]))
    b = proprio_map_aggregate(head, v, torch.tensor([[0.8, 0.7, 1.0]]))
    assert not torch.allclose(a, b)
    # the pooled vector is a convex mix of values, so it is invariant to token order
    perm = torch.tensor([3, 1, 0, 2])
    assert torch.allclose(proprio_map_aggregate(head, v[:, perm], torch.tensor([[0.2, 0.3, 0.0]])), a,
                          atol=1e-6)
    with pytest.raises(ValueError):
        proprio_map_aggregate(PolicyHead(16, "pre_aggregation"), v, torch.rand(1, 3))


def test_demos_round_trip(tmp_path, env):
    demos = collect_demos(env, 2, seed=0)
    assert demos.num_episodes == 2 and len(demos.frames) == len(demos.actions)
    save_demos(demos, tmp_path)
    back = load_demos(tmp_path)
    assert np.array_equal(back.frames, demos.frames)
    assert np.array_equal(back.actions, demos.actions)
    assert np.array_equal(back.episode, demos.episode)


def test_bc_loss_decreases_and_encoder_unchanged(encoder, env):
    demos = collect_demos(env, 3, seed=0)
    before = {k: v.clone() for k, v in encoder.state_dict().items()}
    head, losses = train_bc_policy(FrozenFeatures(encoder), demos, steps=150)
    assert np.mean(losses[-10:]) < 0.5 * np.mean(losses[:10])
    after = encoder.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)
    rate = evaluate_policy(FeaturePolicy(FrozenFeatures(encoder), head), env, episodes=3)
    assert 0.0 <= rate <= 1.0


def test_random_policy_is_seeded(env):
    assert evaluate_policy(RandomPolicy(3), env, 4, seed=1) == evaluate_policy(RandomPolicy(3), env, 4, seed=1)


# ---------------------------------------------------------------- grounding

def test_average_precision_examples():
    target = torch.tensor([[0.5, 0.5, 0.4, 0.4]] * 4)
    pred = torch.tensor([[0.5, 0.5, 0.4, 0.4],     # iou 1
                         [0.55, 0.5, 0.4, 0.4],    # iou 7/9
                         [0.5, 0.5, 0.24, 0.24],   # iou 0.36
                         [0.1, 0.1, 0.1, 0.1]])    # iou 0
    ap = average_precision(pred, target)
    assert ap == {"ap25": 0.75, "ap50": 0.5, "ap75": 0.5}


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000))
def test_average_precision_monotone(seed):
    g = torch.Generator().manual_seed(seed)
    wh = torch.rand(20, 2, generator=g) * 0.4 + 0.1
    pred = torch.cat([torch.rand(20, 2, generator=g) * 0.5 + 0.25, wh], 1)
    target = torch.cat([torch.rand(20, 2, generator=g) * 0.5 + 0.25, wh.flip(1)], 1)
    ap = average_precision(pred, target, thresholds=(0.1, 0.25, 0.5, 0.75, 0.9))
    vals = list(ap.values())
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_reg_scene_referent_is_unique():
    for s in generate_reg_dataset(30, seed=2, canvas_size=32):
        words = s.instruction.split()
        assert words[0] == "the" and s.image.shape == (32, 32, 3)
        assert 0 < s.box.w < 1 and 0 < s.box.h < 1


def test_reg_dataset_round_trip(tmp_path):
    data = generate_reg_dataset(4, seed=0, canvas_size=32)
    save_reg_dataset(data, tmp_path)
    back = load_reg_dataset(tmp_path)
    assert [s.instruction for s in back] == [s.instruction for s in data]
    assert all(np.array_equal(a.image, b.image) for a, b in zip(back, data))
    assert [s.box for s in back] == [s.box for s in data]


@pytest.mark.parametrize("aggregated,rows", [(False, 4), (True, 1)])
def test_grounding_inputs_widths(encoder, vocab, aggregated, rows):
    data = generate_reg_dataset(3, seed=0, canvas_size=32)
    visual, lang, mask = GroundingInputs(encoder, vocab, aggregated)(
        [s.image for s in data], [s.instruction for s in data])
    assert visual.shape == (3, rows, 16)
    assert lang.shape == (3, encoder.cfg.max_text_len, 16) and mask.dtype == torch.bool


def test_grounding_head_attention_depends_on_instruction():
    torch.manual_seed(0)
    head = GroundingHead(16)
    visual = torch.randn(1, 4, 16)
    mask = torch.ones(1, 3, dtype=torch.bool)
    a = head(visual, torch.randn(1, 3, 16), mask)
    b = head(visual, torch.randn(1, 3, 16), mask)
    assert a.shape == (1, 4) and not torch.allclose(a, b)


def test_reg_adaptation_runs(encoder, vocab):
    data = generate_reg_dataset(16, seed=0, canvas_size=32)
    head, inputs, history = adapt_reg_head(encoder, vocab, data, epochs=3, batch_size=8)
    assert len(history) == 3 and all(np.isfinite(history))
    report = evaluate_reg(head, inputs, data)
    assert set(report) == {"ap25", "ap50", "ap75"}
    assert report["ap25"] >= report["ap50"] >= report["ap75"]


def test_adaptation_never_builds_a_decoder(monkeypatch, encoder, vocab, env):
    import interactpred.decoder as decoder_mod

    def boom(*a, **k):
        raise AssertionError("decoder constructed during adaptation")

    monkeypatch.setattr(decoder_mod.JointDecoder, "__init__", boom)
    monkeypatch.setattr(decoder_mod.PixelHead, "__init__", boom)
    monkeypatch.setattr(decoder_mod.BoxHead, "__init__", boom)
    train_bc_policy(FrozenFeatures(encoder), collect_demos(env, 1, seed=0), steps=2)
    adapt_reg_head(encoder, vocab, generate_reg_dataset(4, seed=0, canvas_size=32), epochs=1)
