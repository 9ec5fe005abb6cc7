import dataclasses

import pytest
import torch

from conftest import gradcheck
from vidstereo.config import ModelConfig
from vidstereo.metrics import sequence_loss
from vidstereo.mru import (
    GatedUpdate3D, StageInputs, TemporalConv, UpdateBlock, UpdateState, frames_to_volume,
    gather_frames, mru_iteration, neighbor_index, volume_to_frames,
)
from vidstereo.pipeline import StereoVideoModel, count_parameters, infer

TINY = dict(feature_dim=4, encoder_widths=(4, 4, 4), corr_dim=4, disp_dim=3, motion_dim=3,
            hidden_dim=4)


def tiny(**kw):
    return ModelConfig(**{**TINY, **kw})


def block(seed=0, **kw):
    torch.manual_seed(seed)
    return UpdateBlock(tiny(**kw)).double()


def randn(g, *shape, scale=1.0):
    return scale * torch.randn(*shape, generator=g, dtype=torch.float64)


def make_inputs(g, n=1, t=3, h=4, w=6, c=4, flow_scale=0.7):
    nt = n * t
    prev, nxt = neighbor_index(t)
    right = randn(g, nt, c, h, w)
    triple = (gather_frames(right, t, prev), right, gather_frames(right, t, nxt))
    return StageInputs(left=randn(g, nt, c, h, w), right_triple=triple, left_triple=None,
                       to_prev=randn(g, nt, 2, h, w, scale=flow_scale),
                       to_next=randn(g, nt, 2, h, w, scale=flow_scale),
                       prev_index=prev, next_index=nxt, frames=t)


def make_state(g, blk, inputs, n=1):
    nt, _, h, w = inputs.left.shape
    c = blk.config
    return UpdateState(disp=1.3 + randn(g, nt, 1, h, w, scale=0.5),
                       hidden=randn(g, n, c.hidden_dim, inputs.frames, h, w, scale=0.3).tanh(),
                       motion=randn(g, nt, c.motion_dim, h, w, scale=0.5).tanh())


# ---------------------------------------------------------------- layout helpers

def test_volume_roundtrip(rng):
    x = randn(rng, 6, 3, 2, 5)
    v = frames_to_volume(x, 3)
    assert v.shape == (2, 3, 3, 2, 5)
    assert torch.equal(volume_to_frames(v), x)
    assert torch.equal(v[1, :, 2], x[5])


def test_neighbor_index_replicates_ends():
    prev, nxt = neighbor_index(4)
    assert prev.tolist() == [0, 0, 1, 2] and nxt.tolist() == [1, 2, 3, 3]


def test_temporal_conv_matches_conv3d(rng):
    conv = TemporalConv(3, 5, (3, 1, 5)).double()
    ref = torch.nn.Conv3d(3, 5, (3, 1, 5), padding=(1, 0, 2)).double()
    # TemporalConv stacks frames (t-1, t, t+1) along channels
    w = conv.conv.weight.view(5, 3, 3, 1, 5).permute(0, 2, 1, 3, 4)
    with torch.no_grad():
        ref.weight.copy_(w)
        ref.bias.copy_(conv.conv.bias)
    x = randn(rng, 2, 3, 4, 3, 7)
    assert torch.allclose(conv(x), ref(x), atol=1e-12)


def test_temporal_conv_rejects_even_kernel():
    with pytest.raises(ValueError):
        TemporalConv(2, 2, (2, 1, 3))


def test_2d_switch_uses_per_frame_kernels(rng):
    blk = block(updater_kernel="2d")
    assert blk.gru.kernel == (1, 1, 5)
    assert block().gru.kernel == (3, 1, 5)
    # with time kernel 1 a frame's update ignores the other frames
    h = randn(rng, 1, 4, 3, 4, 6).tanh()
    x, ctx = randn(rng, 1, 4, 3, 4, 6), randn(rng, 1, 4, 3, 4, 6)
    out = blk.gru(h, x, ctx)
    x2 = x.clone()
    x2[:, :, 0] += 1
    out2 = blk.gru(h, x2, ctx)
    assert torch.equal(out[:, :, 1:], out2[:, :, 1:])
    out3 = block().gru(h, x2, ctx)
    assert not torch.equal(block().gru(h, x, ctx)[:, :, 1], out3[:, :, 1])


def test_super_kernel_variants():
    assert block().super_gru.kernel == (1, 1, 15)
    assert block(super_kernel="1x3x3").super_gru.kernel == (1, 3, 3)
    assert block(super_kernel="none").super_gru is None


# ---------------------------------------------------------------- encoders

def test_motion_propagate_zero_flow_and_symmetry(rng):
    blk = block()
    m = randn(rng, 3, 3, 4, 6)
    zero = torch.zeros(3, 2, 4, 6, dtype=torch.float64)
    out = blk.motion_propagate(m, m, m, zero, zero)
    assert out.shape == (3, 3, 4, 6)
    assert torch.equal(out, blk.mop_encoder(torch.cat([m, m, m], dim=1)))
    a, b = randn(rng, 3, 3, 4, 6), randn(rng, 3, 3, 4, 6)
    assert torch.equal(blk.motion_propagate(a, m, b, zero, zero),
                       blk.mop_encoder(torch.cat([a, m, b], dim=1)))


def test_motion_propagate_shape_mismatch(rng):
    blk = block()
    zero = torch.zeros(1, 2, 4, 6, dtype=torch.float64)
    with pytest.raises(ValueError):
        blk.motion_propagate(randn(rng, 1, 3, 4, 6), randn(rng, 1, 3, 4, 5),
                             randn(rng, 1, 3, 4, 6), zero, zero)


def test_motion_propagate_gradcheck(rng):
    blk = block()
    m_prev = randn(rng, 1, 3, 5, 7).requires_grad_()
    m_c, m_n = randn(rng, 1, 3, 5, 7), randn(rng, 1, 3, 5, 7)
    fp, fn_ = randn(rng, 1, 2, 5, 7, scale=0.6) + 0.21, randn(rng, 1, 2, 5, 7, scale=0.6)
    assert gradcheck(lambda a: blk.motion_propagate(a, m_c, m_n, fp, fn_), m_prev)


def test_correlation_encoder(rng):
    blk = block()
    zero = torch.zeros(2, 27, 4, 6, dtype=torch.float64)
    out = blk.encode_correlation(zero)
    assert out.shape == (2, 4, 4, 6)
    assert torch.equal(out, blk.encode_correlation(zero.clone()))
    # bias-only response: spatially constant away from the zero-padded border
    assert torch.allclose(out[..., 1:-1, 1:-1], out[..., 1:2, 1:2].expand_as(out[..., 1:-1, 1:-1]))
    with pytest.raises(ValueError):
        blk.encode_correlation(torch.zeros(1, 9, 4, 6, dtype=torch.float64))
    assert UpdateBlock(tiny(correlation_mode="multi-multi")).cost_channels == 81


def test_encoders_translation_equivariant(rng):
    blk = block()
    cost = randn(rng, 1, 27, 12, 16)
    disp = randn(rng, 1, 1, 12, 16)
    for fn, x in ((blk.encode_correlation, cost), (blk.encode_disparity, disp)):
        a = fn(x)
        b = fn(torch.roll(x, (2, 3), dims=(-2, -1)))
        # receptive fields stay inside the interior crop
        assert torch.allclose(torch.roll(a, (2, 3), dims=(-2, -1))[..., 6:-6, 7:-7],
                              b[..., 6:-6, 7:-7], atol=1e-12)


def test_encoder_gradchecks(rng):
    blk = block()
    cost = randn(rng, 1, 27, 5, 7).requires_grad_()
    disp = randn(rng, 1, 1, 5, 7).requires_grad_()
    assert gradcheck(blk.encode_correlation, cost)
    assert gradcheck(blk.encode_disparity, disp)
    with pytest.raises(ValueError):
        blk.encode_disparity(torch.zeros(1, 2, 5, 7, dtype=torch.float64))


def test_motion_encode_heads(rng):
    blk = block()
    f_corr, f_disp, f_mop = randn(rng, 2, 4, 4, 6), randn(rng, 2, 3, 4, 6), randn(rng, 2, 3, 4, 6)
    f_mot, ctx, m_hat = blk.motion_encode(f_corr, f_disp, f_mop)
    assert f_mot.shape == (2, 4, 4, 6) and ctx.shape == (2, 4, 4, 6) and m_hat.shape == (2, 3, 4, 6)
    assert (f_mot >= 0).all() and (m_hat.abs() < 1).all()
    assert not torch.allclose(m_hat, f_mop)
    with pytest.raises(ValueError):
        blk.motion_encode(f_corr, f_disp, randn(rng, 2, 3, 4, 5))
    args = [t.requires_grad_() for t in (f_corr, f_disp, f_mop)]
    assert gradcheck(blk.motion_encode, *args)


def test_state_updates_when_cost_nonzero(rng):
    blk = block()
    inputs = make_inputs(rng)
    state = make_state(rng, blk, inputs)
    new = mru_iteration(blk, state, inputs)
    assert not torch.allclose(new.motion, state.motion)


# ---------------------------------------------------------------- gated update

def test_super_kernel_update_zero_inputs_identical_frames():
    blk = block()
    h = torch.zeros(1, 4, 3, 4, 6, dtype=torch.float64)
    zero = torch.zeros(3, 4, 4, 6, dtype=torch.float64)
    h2, delta, weights = blk.super_kernel_update(h, zero, zero, 3, want_weights=True)
    assert delta.shape == (3, 1, 4, 6) and weights.shape == (3, 144, 4, 6)
    assert torch.equal(delta[0], delta[1]) and torch.equal(delta[1], delta[2])


def test_hidden_state_bounded(rng):
    blk = block()
    inputs = make_inputs(rng)
    state = make_state(rng, blk, inputs)
    big = UpdateState(disp=state.disp, hidden=state.hidden, motion=state.motion)
    for _ in range(5):
        big = mru_iteration(blk, big, inputs)
        assert (big.hidden.abs() < 1).all()
    gru = GatedUpdate3D(4, 4, (3, 1, 5)).double()
    h = gru(torch.zeros(1, 4, 2, 3, 5, dtype=torch.float64),
            randn(rng, 1, 4, 2, 3, 5, scale=100), randn(rng, 1, 4, 2, 3, 5, scale=100))
    assert (h.abs() <= 1).all()


def test_mask_head_only_when_requested(rng):
    blk = UpdateBlock(tiny(), upsample_head=False).double()
    h = torch.zeros(1, 4, 2, 4, 6, dtype=torch.float64)
    x = torch.zeros(2, 4, 4, 6, dtype=torch.float64)
    assert blk.super_kernel_update(h, x, x, 2)[2] is None
    with pytest.raises(ValueError):
        blk.super_kernel_update(h, x, x, 2, want_weights=True)


# ---------------------------------------------------------------- full iteration

def test_zeroed_delta_head_is_residual_identity(rng):
    blk = block()
    with torch.no_grad():
        blk.disp_head[-1].weight.zero_()
        blk.disp_head[-1].bias.zero_()
    inputs = make_inputs(rng)
    state = make_state(rng, blk, inputs)
    new = mru_iteration(blk, state, inputs)
    assert torch.equal(new.disp, state.disp)
    assert new.iteration == state.iteration + 1


def test_iteration_parity_selects_search_range(rng, monkeypatch):
    import vidstereo.mru as mru

    seen = []
    real = mru.tfcl

    def spy(left, right_triple, disp, iteration, left_triple=None):
        seen.append(iteration)
        return real(left, right_triple, disp, iteration, left_triple=left_triple)

    monkeypatch.setattr(mru, "tfcl", spy)
    blk = block()
    inputs = make_inputs(rng)
    state = make_state(rng, blk, inputs)
    for _ in range(3):
        state = mru_iteration(blk, state, inputs)
    assert seen == [0, 1, 2]
    # even iterations stay on the scanline, odd ones reach the rows above and below
    from vidstereo.correlation import tfcl
    r = inputs.right_triple
    bumped = tuple(x.clone() for x in r)
    for x in bumped:
        x[..., 2, :] += 1.0
    d = torch.zeros_like(state.disp)
    changed = lambda it: (tfcl(inputs.left, bumped, d, it) != tfcl(inputs.left, r, d, it)
                          ).any(dim=(0, 1, 3))
    assert changed(0).tolist() == [False, False, True, False]
    assert changed(1).tolist() == [False, True, True, True]


def test_full_iteration_gradcheck(rng):
    blk = block()
    inputs = make_inputs(rng, h=4, w=5, flow_scale=0.55)
    state = make_state(rng, blk, inputs)
    disp0 = (state.disp + 0.17).detach().requires_grad_()
    motion0 = state.motion.detach().requires_grad_()
    left0 = inputs.left.detach().requires_grad_()

    def fn(disp, motion, left):
        s = UpdateState(disp=disp, hidden=state.hidden, motion=motion)
        out = mru_iteration(blk, s, dataclasses.replace(inputs, left=left), want_weights=True)
        outs = (out.disp, out.motion, out.hidden, out.upsample_weights)
        # a few fixed random projections per output keep the Jacobian small;
        # every input element is still perturbed
        return tuple(p @ o.flatten() for p, o in zip(proj, outs))

    with torch.no_grad():
        ref = mru_iteration(blk, UpdateState(disp=disp0, hidden=state.hidden, motion=motion0),
                            inputs, want_weights=True)
    proj = [randn(rng, 4, o.numel()) for o in
            (ref.disp, ref.motion, ref.hidden, ref.upsample_weights)]
    assert gradcheck(fn, disp0, motion0, left0, rtol=1e-3)


def test_end_to_end_parameter_gradients(rng):
    torch.manual_seed(3)
    model = StereoVideoModel(tiny()).double()
    left = torch.rand(1, 3, 3, 32, 32, generator=rng, dtype=torch.float64)
    right = torch.rand(1, 3, 3, 32, 32, generator=rng, dtype=torch.float64)
    from vidstereo.backbone import FlowSet
    flows = FlowSet(randn(rng, 1, 2, 2, 32, 32, scale=0.8), randn(rng, 1, 2, 2, 32, 32, scale=0.8))
    gt = 2 + torch.rand(1, 3, 32, 32, generator=rng, dtype=torch.float64)

    def loss():
        pred = infer(model, left, right, flows, 2, return_iterates=True)
        return sequence_loss(pred.iterates, gt)

    params = dict(model.named_parameters())
    grads = torch.autograd.grad(loss(), list(params.values()), allow_unused=True)
    named = dict(zip(params, grads))
    for name, g in named.items():
        assert g is not None, name
        assert torch.isfinite(g).all(), name
    # finite-difference spot check on random scalar parameters
    gen = torch.Generator().manual_seed(7)
    names = [n for n, p in params.items() if named[n].abs().max() > 1e-3]
    picks = [names[i] for i in torch.randint(len(names), (24,), generator=gen)]
    eps = 1e-6
    checked = 0
    for name in picks:
        p = params[name]
        g = named[name].flatten()
        i = int(g.abs().argmax()) if checked % 2 else int(torch.randint(p.numel(), (1,), generator=gen))
        if abs(g[i]) < 1e-4:
            i = int(g.abs().argmax())
        flat = p.data.view(-1)
        orig = flat[i].item()
        with torch.no_grad():
            flat[i] = orig + eps
            up = loss().item()
            flat[i] = orig - eps
            down = loss().item()
            flat[i] = orig
        fd = (up - down) / (2 * eps)
        assert abs(fd - g[i].item()) <= 1e-3 * abs(g[i].item()) + 1e-7, name
        checked += 1
    assert checked >= 20


def test_shared_vs_separated_parameter_bundles():
    shared = StereoVideoModel(ModelConfig.desk())
    sep = StereoVideoModel(ModelConfig.desk(stage_weights="separated"))
    assert len(shared.update_blocks) == 1 and len(sep.update_blocks) == 3
    assert shared.block_for(0) is shared.block_for(2)
    ratio = count_parameters(sep.update_blocks) / count_parameters(shared.update_blocks)
    assert 2.5 < ratio <= 3.0
    assert count_parameters(sep) > count_parameters(shared)
    assert sep.update_blocks[0].mask_head is None and sep.update_blocks[2].mask_head is not None
