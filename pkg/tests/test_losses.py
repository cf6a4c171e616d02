import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from portraitgen import toyfaces as tf
from portraitgen.conditioning import default_face_embedder
from portraitgen.denoiser import AttentionRecord
from portraitgen.losses import (FaceMask, IdentityCodec, LossWeights, batched_noise_loss, identity_loss,
                                localization_loss, noise_loss, resample_mask, total_loss)
from portraitgen.schedule import build_schedule, forward_noise

D = torch.float64


def _square_mask():
    m = torch.zeros(4, 4, dtype=D)
    m[1:3, 1:3] = 1.0
    return m


def _record(id_map, emo_map=None, n=4):
    """Single-layer record with token 0 as identity and token 1 as emotion."""
    maps = torch.zeros(n, *id_map.shape, dtype=D)
    maps[0] = id_map
    if emo_map is not None:
        maps[1] = emo_map
    return AttentionRecord([maps], [tuple(id_map.shape)])


def _direct_oracle(layers, masks, beta, gamma, lam, mu, with_emotion):
    """Plain-Python sum over pixels, layers and both token rows."""
    total = 0.0
    n = len(layers)
    for (a_id, a_emo), m in zip(layers, masks):
        a_id, a_emo, m = np.asarray(a_id), np.asarray(a_emo), np.asarray(m)
        hw = m.size
        s_out = sum(float(a_id.flat[k]) * (1 - float(m.flat[k])) for k in range(hw)) / hw
        s_in = sum(max(beta - float(a_id.flat[k]), 0.0) * float(m.flat[k]) for k in range(hw)) / hw
        total += lam * (s_out + s_in) / n
        if with_emotion:
            e_out = sum(float(a_emo.flat[k]) * (1 - float(m.flat[k])) for k in range(hw)) / hw
            e_in = sum(max(gamma - float(a_emo.flat[k]), 0.0) * float(m.flat[k]) for k in range(hw)) / hw
            total += mu * (e_out + e_in) / n
    return total


# --- noise loss -------------------------------------------------------------

def test_noise_loss_examples():
    e = torch.randn(3, 4, 4, dtype=D)
    assert float(noise_loss(e, e.clone())) == 0.0
    assert float(noise_loss(torch.tensor([0.5], dtype=D), torch.tensor([0.0], dtype=D))) == 0.25
    pred = torch.tensor([[[1.0, 0.0], [0.0, 0.0]]], dtype=D)
    mask = torch.tensor([[1.0, 0.0], [0.0, 0.0]], dtype=D)
    assert float(noise_loss(pred, torch.zeros_like(pred), mask)) == 1.0
    assert float(noise_loss(pred, torch.zeros_like(pred))) == 0.25


def test_noise_loss_errors():
    with pytest.raises(ValueError):
        noise_loss(torch.zeros(2), torch.zeros(3))
    with pytest.raises(ValueError):
        noise_loss(torch.zeros(1, 2, 2), torch.zeros(1, 2, 2), torch.full((2, 2), 0.4))


def test_batched_noise_loss_matches_per_sample():
    g = torch.Generator().manual_seed(0)
    p, q = torch.randn(3, 3, 8, 8, generator=g, dtype=D), torch.randn(3, 3, 8, 8, generator=g, dtype=D)
    masks = (torch.rand(3, 8, 8, generator=g, dtype=D) > 0.5).to(D)
    use = torch.tensor([True, False, True])
    out = batched_noise_loss(p, q, masks, use)
    for i in range(3):
        ref = noise_loss(p[i], q[i], masks[i] if use[i] else None)
        assert abs(float(out[i]) - float(ref)) < 1e-14


# --- masks --------------------------------------------------------------------

def test_resample_examples():
    assert torch.equal(resample_mask(torch.ones(4, 4, dtype=D), 2), torch.ones(2, 2, dtype=D))
    m = torch.zeros(4, 4, dtype=D)
    m[:2, :2] = 1
    assert torch.equal(resample_mask(m, 2), torch.tensor([[1.0, 0.0], [0.0, 0.0]], dtype=D))
    _, ellipse, _ = tf.render_face(tf.FaceSpec((0.2, 0.8, 0.4)), 0)
    small = resample_mask(torch.as_tensor(ellipse), 8)
    assert small.shape == (8, 8)
    assert abs(float(small.sum()) - ellipse.sum() / 16) < 1e-9
    assert small.min() >= 0 and small.max() <= 1


def test_resample_is_idempotent_and_refuses_upsampling():
    m = torch.rand(8, 8, dtype=D)
    assert torch.equal(resample_mask(m, 8), m)
    with pytest.raises(ValueError):
        resample_mask(m, 16)


def test_face_mask_caches_deterministically():
    fm = FaceMask(torch.rand(32, 32, dtype=D))
    a = fm.at((8, 8))
    assert torch.equal(a, FaceMask(fm.full).at((8, 8)))
    assert fm.layers([(8, 8), (16, 16)])[0] is a
    with pytest.raises(ValueError):
        FaceMask(torch.full((4, 4), 1.5))


# --- localization ---------------------------------------------------------------

def test_localization_zero_when_maps_equal_mask():
    m = _square_mask()
    rec = _record(m, m)
    w = LossWeights()
    assert float(localization_loss(rec, [m], 0, 1, w)) == 0.0


def test_localization_derived_cases():
    m = _square_mask()
    w = LossWeights(beta=0.8, lambda_id_loc=0.001)
    zero_map = torch.zeros(4, 4, dtype=D)
    got = float(localization_loss(_record(zero_map), [m], 0, None, w))
    assert abs(got - 2.0e-4) < 1e-12
    assert abs(got - _direct_oracle([(zero_map, zero_map)], [m], 0.8, 0.1, 0.001, 0.01, False)) < 1e-12
    ones = torch.ones(4, 4, dtype=D)
    got = float(localization_loss(_record(ones), [m], 0, None, w))
    assert abs(got - 7.5e-4) < 1e-12
    assert abs(got - _direct_oracle([(ones, zero_map)], [m], 0.8, 0.1, 0.001, 0.01, False)) < 1e-12


maps_st = st.lists(st.floats(0.0, 1.0), min_size=16, max_size=16)
mask_st = st.lists(st.sampled_from([0.0, 0.25, 1.0]), min_size=16, max_size=16)


@given(maps_st, maps_st, mask_st, st.booleans(), st.floats(0, 1), st.floats(0, 1))
def test_localization_matches_direct_sum(a_id, a_emo, mask, with_emotion, beta, gamma):
    a_id = torch.tensor(a_id, dtype=D).reshape(4, 4)
    a_emo = torch.tensor(a_emo, dtype=D).reshape(4, 4)
    m = torch.tensor(mask, dtype=D).reshape(4, 4)
    w = LossWeights(beta=beta, gamma=gamma)
    got = float(localization_loss(_record(a_id, a_emo), [m], 0, 1 if with_emotion else None, w))
    ref = _direct_oracle([(a_id, a_emo)], [m], beta, gamma, w.lambda_id_loc, w.mu_expr_loc, with_emotion)
    assert abs(got - ref) < 1e-12
    assert got >= 0


def test_localization_averages_layers():
    m4, m2 = _square_mask(), torch.full((2, 2), 0.25, dtype=D)
    a4, a2 = torch.rand(4, 4, dtype=D), torch.rand(2, 2, dtype=D)
    maps = [torch.stack([a4, a4.flip(0)]), torch.stack([a2, a2.flip(1)])]
    rec = AttentionRecord(maps, [(4, 4), (2, 2)])
    w = LossWeights()
    got = float(localization_loss(rec, [m4, m2], 0, 1, w))
    ref = _direct_oracle([(a4, a4.flip(0)), (a2, a2.flip(1))], [m4, m2], 0.8, 0.1, 0.001, 0.01, True)
    assert abs(got - ref) < 1e-12


def test_localization_batched_matches_rows():
    m = torch.stack([_square_mask(), _square_mask().flip(0)])
    maps = torch.rand(2, 3, 4, 4, dtype=D)
    rec = AttentionRecord([maps], [(4, 4)])
    w = LossWeights()
    out = localization_loss(rec, [m], [0, 2], [1, None], w)
    for b, (i, e) in enumerate([(0, 1), (2, None)]):
        single = localization_loss(AttentionRecord([maps[b]], [(4, 4)]), [m[b]], i, e, w)
        assert abs(float(out[b]) - float(single)) < 1e-15


def test_localization_resolution_mismatch():
    with pytest.raises(ValueError):
        localization_loss(_record(torch.zeros(4, 4, dtype=D)), [torch.zeros(2, 2, dtype=D)], 0, None, LossWeights())


def test_zero_loss_characterization():
    m = _square_mask()
    w = LossWeights()
    satisfying = m * 0.9
    emo_ok = m * 0.15
    assert float(localization_loss(_record(satisfying, emo_ok), [m], 0, 1, w)) == 0.0
    leaking = satisfying.clone()
    leaking[0, 0] = 0.01
    assert float(localization_loss(_record(leaking, emo_ok), [m], 0, 1, w)) > 0
    weak = satisfying.clone()
    weak[1, 1] = 0.7
    assert float(localization_loss(_record(weak, emo_ok), [m], 0, 1, w)) > 0
    weak_emo = emo_ok.clone()
    weak_emo[2, 2] = 0.05
    assert float(localization_loss(_record(satisfying, weak_emo), [m], 0, 1, w)) > 0


def test_monotonicity_random_pairs():
    rng = np.random.default_rng(0)
    w = LossWeights()
    m = _square_mask()
    inside = m.bool()
    for _ in range(1000):
        a = torch.as_tensor(rng.uniform(0, 1, (4, 4)))
        bump = torch.as_tensor(rng.uniform(0, 0.5, (4, 4)))
        base = float(localization_loss(_record(a), [m], 0, None, w))
        more_in = torch.where(inside, (a + bump).clamp(max=1), a)
        more_out = torch.where(inside, a, (a + bump).clamp(max=1))
        assert float(localization_loss(_record(more_in), [m], 0, None, w)) <= base + 1e-18
        assert float(localization_loss(_record(more_out), [m], 0, None, w)) >= base - 1e-18


@given(maps_st, st.floats(0, 1), st.floats(0, 1))
def test_smaller_ceiling_never_increases_loss(a, b1, b2):
    lo, hi = sorted((b1, b2))
    a = torch.tensor(a, dtype=D).reshape(4, 4)
    m = _square_mask()
    l_lo = float(localization_loss(_record(a), [m], 0, None, LossWeights(beta=lo)))
    l_hi = float(localization_loss(_record(a), [m], 0, None, LossWeights(beta=hi)))
    assert l_lo <= l_hi + 1e-18


def test_localization_gradient_matches_finite_differences():
    g = torch.Generator().manual_seed(1)
    maps = torch.rand(3, 4, 4, generator=g, dtype=D).requires_grad_(True)
    m = _square_mask()
    w = LossWeights(lambda_id_loc=1.0, mu_expr_loc=1.0)

    def f(x):
        return localization_loss(AttentionRecord([x], [(4, 4)]), [m], 0, 1, w)

    f(maps).backward()
    h = 1e-6
    fd = torch.zeros_like(maps)
    with torch.no_grad():
        for k in range(maps.numel()):
            d = torch.zeros(maps.numel(), dtype=D)
            d[k] = h
            d = d.reshape(maps.shape)
            fd.view(-1)[k] = (f(maps + d) - f(maps - d)) / (2 * h)
    assert torch.allclose(maps.grad, fd, rtol=1e-4, atol=1e-10)


# --- identity loss -------------------------------------------------------------

def _identity_setup():
    sched = build_schedule(100, 1e-3, 0.05)
    spec = tf.FaceSpec((0.3, 0.4, 0.5), "happy", "man")
    image, _, bbox = tf.render_face(spec, 2)
    ref_img, _, ref_bbox = tf.render_face(spec.with_expression("sad"), 9)
    codec = IdentityCodec()
    z0 = codec.encode(torch.as_tensor(image))
    eps = torch.randn(z0.shape, generator=torch.Generator().manual_seed(0), dtype=D)
    return sched, z0, eps, bbox, tf.crop(ref_img, ref_bbox), codec


def test_identity_loss_gate():
    sched, z0, eps, bbox, ref, codec = _identity_setup()
    w = LossWeights(R_t=25)
    for t in (26, 60, 100):
        zt = forward_noise(z0, t, eps, sched)
        pred = torch.randn_like(eps).requires_grad_(True)
        loss = identity_loss(zt, pred, t, sched, codec, bbox, ref, default_face_embedder(), w)
        assert float(loss) == 0.0 and not loss.requires_grad


def test_identity_loss_perfect_prediction():
    sched, z0, eps, bbox, _, codec = _identity_setup()
    ref = tf.crop(codec.decode(z0).numpy(), bbox)
    t = 10
    zt = forward_noise(z0, t, eps, sched)
    loss = identity_loss(zt, eps, t, sched, codec, bbox, ref, default_face_embedder(), LossWeights(R_t=25))
    assert abs(float(loss)) < 1e-12


def test_identity_loss_range_and_antiparallel():
    sched, z0, eps, bbox, ref, codec = _identity_setup()
    zt = forward_noise(z0, 5, eps, sched)
    w = LossWeights(R_t=25)
    calls = []

    def flipping(face):
        # first call embeds the reference, second the estimate
        calls.append(1)
        v = torch.ones(4, dtype=D) * face.sum() / face.sum().detach()
        return v if len(calls) == 1 else -v

    assert abs(float(identity_loss(zt, eps, 5, sched, codec, bbox, ref, flipping, w)) - 2.0) < 1e-12
    loss = identity_loss(zt, eps, 5, sched, codec, bbox, ref, default_face_embedder(), w)
    assert 0.0 <= float(loss) <= 2.0


def test_identity_loss_errors():
    sched, z0, eps, bbox, ref, codec = _identity_setup()
    with pytest.raises(ValueError):
        identity_loss(z0, eps, 0, sched, codec, bbox, ref, default_face_embedder(), LossWeights(R_t=25))
    with pytest.raises(ValueError):
        identity_loss(z0, eps, 5, sched, codec, bbox, ref, lambda f: torch.zeros(3, dtype=D), LossWeights(R_t=25))


def test_identity_loss_gradient_matches_finite_differences():
    sched, z0, eps, bbox, ref, codec = _identity_setup()
    t = 8
    zt = forward_noise(z0, t, eps, sched)
    pred = (eps + 0.05 * torch.randn(eps.shape, generator=torch.Generator().manual_seed(4), dtype=D))
    pred.requires_grad_(True)
    w = LossWeights(R_t=25)
    emb = default_face_embedder()

    def f(p):
        return identity_loss(zt, p, t, sched, codec, bbox, ref, emb, w)

    f(pred).backward()
    g = torch.Generator().manual_seed(5)
    h = 1e-5
    for _ in range(5):
        d = torch.randn(pred.shape, generator=g, dtype=D)
        with torch.no_grad():
            fd = float((f(pred + h * d) - f(pred - h * d)) / (2 * h))
        analytic = float((pred.grad * d).sum())
        assert abs(analytic - fd) <= 1e-4 * max(abs(analytic), abs(fd))


def test_codec_round_trip():
    x = torch.rand(5, 6, 3, dtype=D)
    codec = IdentityCodec()
    assert torch.equal(codec.decode(codec.encode(x)), x)


# --- total -----------------------------------------------------------------------

def test_total_loss_examples():
    z = torch.zeros((), dtype=D)
    total, rep = total_loss(z, z, z)
    assert float(total) == 0.0 and rep.total == 0.0
    total, rep = total_loss(torch.tensor(0.25, dtype=D), torch.tensor(0.1, dtype=D), torch.tensor(2.0e-4, dtype=D))
    assert abs(rep.total - 0.3502) < 1e-12
    assert abs(rep.total - (rep.noise + rep.identity + rep.localization)) < 1e-9


def test_total_gradient_is_sum_of_component_gradients():
    x = torch.randn(6, dtype=D, requires_grad=True)

    def parts(v):
        return (v ** 2).mean(), 1 - torch.cos(v).mean(), 1e-3 * torch.relu(0.8 - v).mean()

    h = 1e-6
    g = torch.Generator().manual_seed(0)
    for _ in range(5):
        d = torch.randn(6, generator=g, dtype=D)
        with torch.no_grad():
            fd_total = (total_loss(*parts(x + h * d))[0] - total_loss(*parts(x - h * d))[0]) / (2 * h)
            fd_sum = sum((a - b) / (2 * h) for a, b in zip(parts(x + h * d), parts(x - h * d)))
        assert abs(float(fd_total) - float(fd_sum)) < 1e-6


def test_weights_validation():
    for bad in (dict(beta=1.5), dict(gamma=-0.1), dict(lambda_id_loc=-1), dict(R_t=0),
                dict(face_region_loss_fraction=2.0)):
        with pytest.raises(ValueError):
            LossWeights(**bad)
    with pytest.raises(ValueError):
        LossWeights(R_t=250).check_schedule(100)
    d = LossWeights()
    assert (d.beta, d.gamma, d.lambda_id_loc, d.mu_expr_loc, d.R_t, d.face_region_loss_fraction) == \
           (0.8, 0.1, 0.001, 0.01, 250, 0.5)
