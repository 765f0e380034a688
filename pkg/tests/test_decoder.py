import pytest
import torch

from interactpred.config import ModelConfig
from interactpred.decoder import BoxHead, JointDecoder, MLPFrameDecoder, PixelHead
from interactpred.encoder import EncoderOutput, patchify
from interactpred.gradcheck import analytic_gradient, finite_difference, relative_error


@pytest.fixture
def cfg():
    return ModelConfig.minimal()


def _enc(cfg, b=2, lang=True, seed=0):
    g = torch.Generator().manual_seed(seed)
    d, n, t = cfg.dim, cfg.num_patches, cfg.max_text_len
    v = torch.randn(b, n, d, generator=g, dtype=torch.float64)
    v_agg = torch.randn(b, d, generator=g, dtype=torch.float64, requires_grad=True)
    if not lang:
        return EncoderOutput(v, v_agg)
    l = torch.randn(b, t, d, generator=g, dtype=torch.float64)
    mask = torch.zeros(b, t, dtype=torch.bool)
    mask[:, :3] = True
    return EncoderOutput(v, v_agg, l, torch.randn(b, d, dtype=torch.float64), mask)


def _decoder(cfg, **kw):
    torch.manual_seed(0)
    return JointDecoder(cfg, **kw).double()


def test_output_shapes(cfg):
    out = _decoder(cfg)(_enc(cfg))
    assert out.q_pred.shape == (2, cfg.num_patches, cfg.dim)
    assert out.q_det.shape == (2, cfg.dim)
    assert out.layer == cfg.decoder_depth


def test_single_branch_modes(cfg):
    enc = _enc(cfg)
    det = _decoder(cfg, predict=False)(enc)
    assert det.q_pred is None and det.q_det.shape == (2, cfg.dim)
    pred = _decoder(cfg, detect=False)(enc)
    assert pred.q_det is None and pred.q_pred.shape == (2, cfg.num_patches, cfg.dim)
    with pytest.raises(ValueError):
        JointDecoder(cfg, predict=False, detect=False)


def test_detection_query_starts_as_aggregated_token(cfg):
    enc = _enc(cfg)
    dec = _decoder(cfg)
    state = dec.initial_state(enc)
    assert torch.equal(state.q_det, enc.v_agg) and state.layer == 0
    assert torch.equal(state.q_pred[0], dec.patch_codes())
    assert torch.equal(state.q_pred[0], state.q_pred[1])


def test_language_padding_is_ignored(cfg):
    dec = _decoder(cfg)
    enc = _enc(cfg)
    other = _enc(cfg)
    other.l = enc.l.clone()
    other.l[:, 3:] = 50.0
    a, b = dec(enc), dec(other)
    assert torch.allclose(a.q_pred, b.q_pred) and torch.allclose(a.q_det, b.q_det)


def test_joint_self_attention_is_the_only_coupling(cfg):
    """Cutting self-attention removes every gradient path from q_det to the prediction queries."""
    enc = _enc(cfg)
    dec = _decoder(cfg)
    state = dec.initial_state(enc)
    state.q_pred = state.q_pred.detach().clone().requires_grad_(True)
    fn = lambda: dec(enc, state).q_det.pow(2).sum()
    assert analytic_gradient(fn, [state.q_pred])[0].abs().sum() > 0
    with torch.no_grad():
        for layer in dec.layers:
            layer.self_attn.out.weight.zero_()
            layer.self_attn.out.bias.zero_()
    assert torch.count_nonzero(analytic_gradient(fn, [state.q_pred])[0]) == 0


def test_decoder_gradients(cfg):
    enc = _enc(cfg, b=1)
    dec = _decoder(cfg)
    w = torch.randn(cfg.num_patches + 1, cfg.dim, dtype=torch.float64)

    def fn():
        s = dec(enc)
        return (torch.cat([s.q_pred[0], s.q_det], 0) * w).sum()

    tensors = [enc.v_agg, dec.layers[0].cross_attn.q.bias]
    assert relative_error(analytic_gradient(fn, tensors), finite_difference(fn, tensors)) < 1e-5


# ---------------------------------------------------------------- heads

def test_pixel_head_starts_at_mean_frame(cfg):
    head = PixelHead(cfg).double()
    frame = torch.randn(3, 32, 32, dtype=torch.float64)
    head.set_mean_frame(frame)
    out = head(torch.randn(2, cfg.num_patches, cfg.dim, dtype=torch.float64))
    mean_patch = patchify(frame[None], cfg.patch_size).mean((0, 1))
    assert out.shape == (2, 3, 32, 32)
    assert torch.allclose(patchify(out, cfg.patch_size), mean_patch.expand(2, cfg.num_patches, -1))


def test_pixel_head_is_affine_and_local(cfg):
    torch.manual_seed(0)
    head = PixelHead(cfg).double()
    torch.nn.init.normal_(head.proj.weight)
    q = torch.randn(1, cfg.num_patches, cfg.dim, dtype=torch.float64)
    r = torch.randn_like(q)
    base = head(torch.zeros_like(q))
    assert torch.allclose(head(q + r) - base, (head(q) - base) + (head(r) - base))
    bumped = q.clone()
    bumped[0, 2] += 1.0
    diff = patchify(head(bumped) - head(q), cfg.patch_size)[0]
    changed = diff.abs().sum(-1).nonzero().flatten().tolist()
    assert changed == [2]


def test_box_head_zero_weights_give_center(cfg):
    head = BoxHead(cfg.dim)
    for layer in head.mlp.layers:
        torch.nn.init.zeros_(layer.weight)
        torch.nn.init.zeros_(layer.bias)
    out = head(torch.randn(3, cfg.dim))
    assert torch.equal(out, torch.full((3, 4), 0.5))


def test_box_head_range_and_gradient(cfg):
    torch.manual_seed(1)
    head = BoxHead(cfg.dim).double()
    q = torch.randn(2, cfg.dim, dtype=torch.float64, requires_grad=True)
    out = head(q * 100)
    assert ((out >= 0) & (out <= 1)).all()
    fn = lambda: head(q).pow(2).sum()
    assert relative_error(analytic_gradient(fn, [q]), finite_difference(fn, [q])) < 1e-6


def test_mlp_frame_decoder_shape(cfg):
    dec = MLPFrameDecoder(cfg, cfg.num_patches, hidden=32)
    frame = torch.randn(3, 32, 32)
    dec.set_mean_frame(frame)
    out = dec(torch.randn(2, cfg.num_patches, cfg.dim))
    assert out.shape == (2, 3, 32, 32) and torch.allclose(out[1], frame)
