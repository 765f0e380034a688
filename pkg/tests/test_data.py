import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from interactpred.config import DataConfig
from interactpred.data import (BBox, GenerationError, KeyframeTriplet, ManifestError, SceneSpec,
                               ValidationError, batch_iterator, denormalize,
                               generate_interaction_dataset, generate_synthetic_triplet,
                               ingest_manifest, preprocess_frame, select_input_frames,
                               write_manifest)


def _triplet(seed=0, **spec):
    return generate_synthetic_triplet(SceneSpec(**spec), np.random.default_rng(seed))


# ---------------------------------------------------------------- types

def test_bbox_rejects_degenerate_and_out_of_range():
    with pytest.raises(ValidationError, match="degenerate box"):
        BBox(0.5, 0.5, 0.0, 0.2)
    with pytest.raises(ValidationError, match="outside"):
        BBox(1.2, 0.5, 0.1, 0.1)
    assert BBox(0.95, 0.5, 0.2, 0.2).corners()[2] == 1.0


def test_triplet_invariants():
    t = _triplet()
    with pytest.raises(ValidationError, match="size differs"):
        KeyframeTriplet("c", (t.frames[0], t.frames[1], t.frames[2][:32]), t.boxes, "x")
    with pytest.raises(ValidationError, match="empty instruction"):
        KeyframeTriplet("c", t.frames, t.boxes, "  ")
    with pytest.raises(ValidationError, match="3 frames"):
        KeyframeTriplet("c", t.frames[:2], t.boxes, "x")


# ---------------------------------------------------------------- manifests

def test_manifest_round_trip_preserves_order(tmp_path):
    triplets = generate_interaction_dataset(2, seed=5)
    write_manifest(triplets, tmp_path)
    loaded = ingest_manifest(tmp_path / "manifest.json")
    assert [t.clip_id for t in loaded] == [t.clip_id for t in triplets]
    # PNG is lossless, so frames come back exactly
    for a, b in zip(loaded, triplets):
        assert a == b


def test_manifest_missing_frame_names_clip(tmp_path):
    write_manifest(generate_interaction_dataset(2, seed=5), tmp_path)
    path = tmp_path / "manifest.json"
    raw = json.loads(path.read_text())
    del raw["clips"][1]["frames"]["transition"]
    path.write_text(json.dumps(raw))
    with pytest.raises(ValidationError, match="clip_00001.*frames.transition"):
        ingest_manifest(path)


def test_manifest_degenerate_box(tmp_path):
    write_manifest(generate_interaction_dataset(1, seed=5), tmp_path)
    path = tmp_path / "manifest.json"
    raw = json.loads(path.read_text())
    raw["clips"][0]["boxes"]["final"][2] = 0.0
    path.write_text(json.dumps(raw))
    with pytest.raises(ValidationError, match="degenerate box"):
        ingest_manifest(path)


def test_manifest_box_outside_unit_square(tmp_path):
    write_manifest(generate_interaction_dataset(1, seed=5), tmp_path)
    path = tmp_path / "manifest.json"
    raw = json.loads(path.read_text())
    raw["clips"][0]["boxes"]["initial"][0] = 1.5
    path.write_text(json.dumps(raw))
    with pytest.raises(ValidationError, match="outside"):
        ingest_manifest(path)


def test_missing_manifest_names_path(tmp_path):
    with pytest.raises(ManifestError, match="nope.json"):
        ingest_manifest(tmp_path / "nope.json")


# ---------------------------------------------------------------- preprocessing

def test_preprocess_crops_landscape_center():
    raw = np.zeros((480, 640, 3), np.uint8)
    raw[:, 80:560] = 255                     # the centered 480x480 window is white
    out = preprocess_frame(raw, 224)
    assert out.shape == (3, 224, 224)
    np.testing.assert_allclose(denormalize(out), 255, atol=1)


def test_preprocess_crops_portrait_along_width():
    raw = np.zeros((100, 300, 3), np.uint8)
    raw[:, 100:200] = 200
    out = preprocess_frame(raw, 100)
    np.testing.assert_allclose(denormalize(out), 200, atol=1)


def test_preprocess_normalization_fixed_point():
    raw = np.zeros((224, 224, 3), np.uint8)
    raw[..., 0] = round(0.485 * 255)
    out = preprocess_frame(raw, 224)
    assert np.abs(out[0]).max() < 1e-2


def test_preprocess_rejects_empty():
    with pytest.raises(ValueError):
        preprocess_frame(np.zeros((0, 5, 3), np.uint8), 32)


@settings(max_examples=25, deadline=None)
@given(h=st.integers(1, 80), w=st.integers(1, 80), size=st.sampled_from([16, 32]))
def test_preprocess_output_shape(h, w, size):
    raw = np.random.default_rng(h * 100 + w).integers(0, 256, (h, w, 3), dtype=np.uint8)
    out = preprocess_frame(raw, size)
    assert out.shape == (3, size, size) and np.isfinite(out).all()


# ---------------------------------------------------------------- input selection

@pytest.mark.parametrize("p,alpha", [(0.0, 0), (1.0, 1)])
def test_select_inputs_deterministic_ends(p, alpha):
    t = _triplet()
    pre = [preprocess_frame(f, 64) for f in t.frames]
    rng = np.random.default_rng(0)
    for _ in range(20):
        s = select_input_frames(t, p, rng)
        assert s.alpha == alpha
        np.testing.assert_array_equal(s.input_pair[0], pre[0])
        second, target = (2, 1) if alpha else (1, 2)
        np.testing.assert_array_equal(s.input_pair[1], pre[second])
        np.testing.assert_array_equal(s.target_frame, pre[target])
        assert s.target_box == t.boxes[target]


def test_select_inputs_rejects_bad_p():
    with pytest.raises(ValueError):
        select_input_frames(_triplet(), 1.5, np.random.default_rng(0))


def test_alpha_rate_half():
    t = _triplet(canvas_size=16, num_distractors=0, object_size=0.3, agent_radius=0.1,
                 motion=("right", 0.1), approach_gap=0.02)
    rng = np.random.default_rng(0)
    rate = np.mean([select_input_frames(t, 0.5, rng).alpha for _ in range(10_000)])
    assert 0.47 <= rate <= 0.53


def test_mapping_audit_over_batches():
    data = generate_interaction_dataset(10, seed=1, canvas_size=32, num_distractors=0)
    pre = {t.clip_id: [preprocess_frame(f, 32) for f in t.frames] for t in data}
    boxes = {t.clip_id: t.boxes for t in data}
    for p in (0.0, 0.5, 1.0):
        cfg = DataConfig(p=p, image_size=32, seed=2)
        for batch in batch_iterator(data, cfg, 4, epochs=3):
            for s in batch:
                f = pre[s.clip_id]
                second, target = (2, 1) if s.alpha else (1, 2)
                assert np.array_equal(s.input_pair[0], f[0])
                assert np.array_equal(s.input_pair[1], f[second])
                assert np.array_equal(s.target_frame, f[target])
                assert s.target_box == boxes[s.clip_id][target]


# ---------------------------------------------------------------- batching

def test_batch_sizes_keep_short_tail():
    data = generate_interaction_dataset(10, seed=0, canvas_size=32, num_distractors=0)
    sizes = [len(b) for b in batch_iterator(data, DataConfig(image_size=32), 4)]
    assert sizes == [4, 4, 2]


def test_batch_iterator_seeded():
    data = generate_interaction_dataset(12, seed=0, canvas_size=32, num_distractors=0)

    def trace(seed):
        cfg = DataConfig(image_size=32, seed=seed)
        return [(s.clip_id, s.alpha) for b in batch_iterator(data, cfg, 5, epochs=10) for s in b]

    assert trace(4) == trace(4)
    assert trace(4) != trace(5)


def test_batch_iterator_errors():
    with pytest.raises(ValueError, match="empty"):
        next(batch_iterator([], DataConfig(), 4))
    data = generate_interaction_dataset(1, seed=0, canvas_size=32, num_distractors=0)
    with pytest.raises(ValueError):
        next(batch_iterator(data, DataConfig(image_size=32), 0))


# ---------------------------------------------------------------- synthetic scenes

def test_generation_is_deterministic():
    assert _triplet(seed=9) == _triplet(seed=9)
    assert _triplet(seed=9) != _triplet(seed=10)


def test_zero_displacement_keeps_box():
    t = _triplet(motion=("left", 0.0))
    assert t.boxes[0] == t.boxes[2]


def test_distractors_are_static_and_counted(monkeypatch):
    import interactpred.data as data_mod

    calls = []
    real = data_mod.render
    monkeypatch.setattr(data_mod, "render", lambda shapes, size: calls.append(list(shapes)) or real(shapes, size))
    t = generate_synthetic_triplet(SceneSpec(num_distractors=3, motion=("down", 0.25)),
                                   np.random.default_rng(4))
    assert len(calls) == 3
    # 3 distractors + the target shape, plus the agent disc
    assert all(len(c) == 5 for c in calls)
    assert sum(s.kind != "disc" for s in calls[0]) == 4
    assert calls[0][:3] == calls[1][:3] == calls[2][:3]
    # distractor pixels are identical across frames
    from interactpred.render import shape_mask
    mask = np.zeros((64, 64), bool)
    for shape in calls[0][:3]:
        mask |= shape_mask(shape, 64)
    assert mask.any()
    assert np.array_equal(t.frames[0][mask], t.frames[1][mask])
    assert np.array_equal(t.frames[0][mask], t.frames[2][mask])


def test_box_centers_move_monotonically():
    for direction, axis, sign in (("right", 0, 1), ("left", 0, -1), ("up", 1, -1), ("down", 1, 1)):
        t = _triplet(seed=2, motion=(direction, 0.3))
        c = [(b.cx, b.cy)[axis] * sign for b in t.boxes]
        assert c[0] < c[1] < c[2]


def test_box_tightly_bounds_target():
    t = _triplet(seed=6, num_distractors=0)
    color = np.array(t.frames[0][int(t.boxes[0].cy * 64), int(t.boxes[0].cx * 64)])
    ys, xs = np.nonzero(np.all(t.frames[0] == color, axis=-1))
    x0, y0, x1, y1 = t.boxes[0].corners()
    assert abs(xs.min() / 64 - x0) < 2 / 64 and abs((xs.max() + 1) / 64 - x1) < 2 / 64
    assert abs(ys.min() / 64 - y0) < 2 / 64 and abs((ys.max() + 1) / 64 - y1) < 2 / 64


def test_instruction_template():
    t = _triplet(motion=("right", 0.2))
    assert t.instruction.startswith("push the ") and t.instruction.endswith("to the right")


def test_offcanvas_spec_raises():
    with pytest.raises(GenerationError):
        _triplet(motion=("right", 0.9))
    with pytest.raises(GenerationError):
        SceneSpec(motion=("sideways", 0.1))
