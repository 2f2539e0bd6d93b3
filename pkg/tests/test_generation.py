import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from maskgen.denoiser import denoise
from maskgen.diffusion import ddpm_step, draw_noise
from maskgen.errors import ArgumentError, TokenizationError
from maskgen.generation import (
    ColorSpec,
    GenerationRequest,
    attention_filename,
    blank_mask,
    clip_denoised_eps,
    generate,
    generate_many,
    iou,
    mask_steering_eval,
    resolve_masks,
    segment_and_iou,
    segment_by_color,
)
from maskgen.training import prepare_finetune
from helpers import tiny_model, two_rect_source


@pytest.fixture(scope="module")
def model():
    return prepare_finetune(tiny_model(seed=3), two_rect_source())


def shaped():
    m = np.zeros((16, 16), np.uint8)
    m[8:14, 2:10] = 1
    return m


def test_blank_mask():
    assert blank_mask(64).shape == (64, 64) and not blank_mask(64).any()
    with pytest.raises(ArgumentError):
        blank_mask(0)


def test_same_request_bit_identical(model):
    r = GenerationRequest("a photo of <asset0>", [shaped()], steps=5, seed=11)
    a, b = generate(model, r), generate(model, r)
    assert a.image.tobytes() == b.image.tobytes()
    assert generate(model, GenerationRequest(r.prompt, r.masks, 5, seed=12)).image.tobytes() != a.image.tobytes()


def test_batch_does_not_change_per_request_output(model):
    reqs = [GenerationRequest("a photo of <asset0>", [shaped()], 4, seed=s) for s in (1, 2, 3)]
    batch = generate_many(model, reqs)
    alone = generate(model, reqs[1])
    assert np.allclose(batch[1].image, alone.image, atol=1e-5)


def test_blank_vs_shaped_differ(model):
    a = generate(model, GenerationRequest("a photo of <asset0>", [shaped()], 5, 0)).image
    b = generate(model, GenerationRequest("a photo of <asset0>", [blank_mask(16)], 5, 0)).image
    assert not np.array_equal(a, b)


def test_guidance_one_is_plain_conditional_chain(model):
    req = GenerationRequest("a photo of <asset1>", [shaped()], steps=6, seed=4, guidance_scale=1.0)
    got = generate(model, req).image
    sched = model.schedule.respace(6)
    bundle = model.bundle(req.prompt, [(1, shaped())])
    gens = [torch.Generator().manual_seed(4)]
    z = draw_noise((1, 3, 16, 16), gens, model.dtype)
    with torch.no_grad():
        for i in reversed(range(sched.T)):
            eps = denoise(model.denoiser, z, int(sched.timesteps[i]), [bundle]).eps_pred
            eps = clip_denoised_eps(z, eps, sched.alpha_bars[i])
            z = ddpm_step(z, eps, i, sched, gens)
    assert np.array_equal(got, z.clamp(-1, 1)[0].numpy())


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-4, 0.9999))
def test_clip_denoised_eps(seed, abar):
    g = torch.Generator().manual_seed(seed)
    x0 = torch.rand((2, 3, 4, 4), generator=g, dtype=torch.float64) * 4 - 2
    eps = torch.randn((2, 3, 4, 4), generator=g, dtype=torch.float64)
    z = np.sqrt(abar) * x0 + np.sqrt(1 - abar) * eps
    got = clip_denoised_eps(z, eps, abar)
    implied = (z - np.sqrt(1 - abar) * got) / np.sqrt(abar)
    assert torch.allclose(implied, x0.clamp(-1, 1), atol=1e-6)
    inside = (x0.abs() <= 1)
    assert torch.allclose(got[inside], eps[inside], atol=1e-6)


def test_guidance_changes_output(model):
    r1 = GenerationRequest("a photo of <asset0>", [], 4, 0, 1.0)
    r3 = GenerationRequest("a photo of <asset0>", [], 4, 0, 3.0)
    assert not np.array_equal(generate(model, r1).image, generate(model, r3).image)


def test_untrained_liveness():
    m = tiny_model(seed=9)
    out = generate(m, GenerationRequest("a photo of red-circle", [], steps=3, seed=0))
    assert out.image.shape == (3, 16, 16) and np.all(np.isfinite(out.image))
    assert out.image.min() >= -1 and out.image.max() <= 1


def test_request_errors(model):
    with pytest.raises(ArgumentError):
        GenerationRequest("x", steps=0)
    with pytest.raises(ArgumentError):
        GenerationRequest("x", guidance_scale=0.5)
    with pytest.raises(ArgumentError):
        generate(model, GenerationRequest("a photo", steps=model.schedule.T + 1))
    with pytest.raises(TokenizationError, match="<asset1>"):
        generate(model, GenerationRequest("a photo of <asset5>", steps=2))


def test_mask_linking_and_resize(model):
    big = np.zeros((64, 64), np.uint8)
    big[32:, :32] = 1
    r = resolve_masks(model, GenerationRequest("a photo of <asset0>", [big]))
    assert r[0][0] == 0 and r[0][1].shape == (16, 16) and r[0][1][8:, :8].all() and r[0][1].sum() == 64
    r = resolve_masks(model, GenerationRequest("<asset0> and <asset1>", [big, (1, big)]))
    assert [s for s, _ in r] == [None, 1]
    out = generate(model, GenerationRequest("<asset0> and <asset1>", [(0, big), (None, big)], 2, 0))
    assert out.metadata["links"][-1] == {"kind": "mask-token", "subject": None}


def test_attention_dump(model):
    out = generate(model, GenerationRequest("a photo of <asset0>", [shaped()], 3, 0), capture_attention=True)
    assert sorted(out.attention_maps) == list(range(5))
    kinds = [out.attention_maps[p][0] for p in range(5)]
    assert [attention_filename(p, k) for p, k in enumerate(kinds)][3:] == ["attn_3_handle.png", "attn_4_mask.png"]
    for _, m in out.attention_maps.values():
        assert m.shape == (8, 8) and m.min() >= 0 and m.max() <= 1


def test_iou_oracles():
    t = np.zeros((10, 10), np.uint8)
    t[2:6, 2:6] = 1
    assert iou(t, t) == 1.0
    d = np.zeros_like(t)
    d[6:10, 6:10] = 1
    assert iou(t, d) == 0.0
    half = np.zeros_like(t)
    half[2:6, 4:8] = 1
    assert abs(iou(t, half) - 1 / 3) < 1e-15
    assert iou(np.zeros_like(t), np.zeros_like(t)) == 0.0


@given(st.integers(0, 10_000), st.integers(-3, 3), st.integers(-3, 3))
@settings(max_examples=40, deadline=None)
def test_iou_symmetric_and_translation_invariant(seed, dx, dy):
    rng = np.random.default_rng(seed)
    a = np.zeros((20, 20), np.uint8)
    b = np.zeros((20, 20), np.uint8)
    a[4:16, 4:16] = rng.random((12, 12)) > 0.5
    b[4:16, 4:16] = rng.random((12, 12)) > 0.5
    assert iou(a, b) == iou(b, a)
    shift = lambda m: np.roll(np.roll(m, dy, 0), dx, 1)
    assert iou(shift(a), shift(b)) == iou(a, b)


def test_segment_by_color_and_iou():
    img = np.full((3, 8, 8), -1.0)
    rgb = np.array([220, 40, 40]) / 127.5 - 1
    img[:, 2:4, 2:6] = rgb[:, None, None]
    target = np.zeros((8, 8), np.uint8)
    target[2:4, 2:6] = 1
    spec = ColorSpec((220, 40, 40), 60)
    assert np.array_equal(segment_by_color(img, spec), target)
    assert segment_and_iou(img, spec, target) == 1.0


def test_mask_steering_eval_shapes(model):
    r = mask_steering_eval(model, "a photo of <asset0>", shaped(), ColorSpec((220, 40, 40)), [0, 1], steps=2)
    assert len(r["iou_shaped"]) == len(r["iou_blank"]) == 2
    assert 0 <= r["mean_shaped"] <= 1 and 0 <= r["mean_blank"] <= 1
