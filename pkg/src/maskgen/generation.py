"""Sampling from a trained model, with optional pose masks, plus IoU scoring of the results."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .conditioning import HANDLE, MASK_TOKEN, TEXT, as_binary_mask, encode_prompt
from .denoiser import aggregate_attention, denoise
from .diffusion import ddpm_step, draw_noise
from .errors import ArgumentError
from .model import MaskGenModel

AUTO = "auto"


@dataclass
class GenerationRequest:
    prompt: str
    # entries: a mask array (link decided automatically) or (subject id | None, mask array)
    masks: list = field(default_factory=list)
    steps: int | None = None
    seed: int = 0
    guidance_scale: float = 1.0

    def __post_init__(self):
        if self.steps is not None and self.steps < 1:
            raise ArgumentError(f"steps must be >= 1, got {self.steps}")
        if self.guidance_scale < 1.0:
            raise ArgumentError(f"guidance_scale must be >= 1, got {self.guidance_scale}")


@dataclass
class GenerationResult:
    image: np.ndarray  # (3, H, W) in [-1, 1]
    metadata: dict
    attention_maps: dict = field(default_factory=dict)  # position -> (kind, (h, w) map)


@dataclass(frozen=True)
class ColorSpec:
    rgb: tuple  # 0..255
    threshold: float = 60.0


def clip_denoised_eps(z_t: torch.Tensor, eps: torch.Tensor, abar: float) -> torch.Tensor:
    """Noise estimate whose implied clean image is clipped to the pixel range [-1, 1].

    Undertrained models drift to saturated colors without this.
    """
    a, b = float(np.sqrt(abar)), float(np.sqrt(1.0 - abar))
    x0 = ((z_t - b * eps) / a).clamp(-1, 1)
    return (z_t - a * x0) / b


def blank_mask(size: int) -> np.ndarray:
    if size <= 0:
        raise ArgumentError(f"mask size must be positive, got {size}")
    return np.zeros((size, size), dtype=np.uint8)


def resize_mask(mask, size: int) -> np.ndarray:
    m = as_binary_mask(mask).numpy().astype(np.uint8)
    if m.shape == (size, size):
        return m
    t = torch.from_numpy(m).float()[None, None]
    return F.interpolate(t, size=(size, size), mode="nearest")[0, 0].numpy().astype(np.uint8)


def resolve_masks(model: MaskGenModel, request: GenerationRequest) -> list:
    """[(subject | None, mask at model size)] in request order.

    A mask without an explicit link binds to the prompt's handle when the
    prompt has exactly one handle; otherwise it stays unlinked.
    """
    links = encode_prompt(request.prompt, model.text).links
    handles = [l.subject for l in links if l.kind == HANDLE]
    size = model.denoiser_config.image_size
    out = []
    for entry in request.masks:
        if isinstance(entry, tuple):
            sid, m = entry
        else:
            sid, m = AUTO, entry
        if sid == AUTO:
            sid = handles[0] if len(handles) == 1 else None
        out.append((sid, resize_mask(m, size)))
    linked = [s for s, _ in out if s is not None]
    if len(set(linked)) != len(linked):
        # several masks cannot all bind to one handle; keep the first link only
        seen, fixed = set(), []
        for s, m in out:
            fixed.append((s if s not in seen else None, m))
            seen.add(s)
        out = fixed
    return out


def _model(source) -> MaskGenModel:
    return source if isinstance(source, MaskGenModel) else MaskGenModel.from_checkpoint(source)


def generate(source, request: GenerationRequest, capture_attention: bool = False) -> GenerationResult:
    """Run the reverse chain for one request; ``source`` is a model or a Checkpoint."""
    return generate_many(source, [request], capture_attention)[0]


@torch.no_grad()
def generate_many(source, requests, capture_attention: bool = False) -> list:
    """Sample several requests in one batch.

    Requests must share ``steps`` and ``guidance_scale``. Each request has
    its own seeded generator, so its noise does not depend on the batch.
    """
    model = _model(source)
    model.eval()
    if not requests:
        return []
    steps = {r.steps or model.schedule.T for r in requests}
    scales = {r.guidance_scale for r in requests}
    if len(steps) != 1 or len(scales) != 1:
        raise ArgumentError("batched requests must share steps and guidance_scale")
    steps, scale = steps.pop(), scales.pop()
    if steps > model.schedule.T:
        raise ArgumentError(f"steps {steps} exceeds schedule length {model.schedule.T}")
    sched = model.schedule.respace(steps)

    resolved = [resolve_masks(model, r) for r in requests]
    bundles = [model.bundle(r.prompt, m) for r, m in zip(requests, resolved)]
    uncond = [model.bundle("") for _ in requests] if scale > 1.0 else None
    c = model.denoiser_config
    gens = [torch.Generator().manual_seed(int(r.seed)) for r in requests]
    z = draw_noise((len(requests), c.in_channels, c.image_size, c.image_size), gens, model.dtype)

    sums = [dict() for _ in requests]
    for i in reversed(range(sched.T)):
        t = int(sched.timesteps[i])
        out = denoise(model.denoiser, z, t, bundles, capture_attention)
        eps = out.eps_pred
        if uncond is not None:
            eps_u = denoise(model.denoiser, z, t, uncond).eps_pred
            eps = eps_u + scale * (eps - eps_u)
        eps = clip_denoised_eps(z, eps, sched.alpha_bars[i])
        if capture_attention:
            for b, bundle in enumerate(bundles):
                for pos in range(bundle.K):
                    m = aggregate_attention(out.attention, pos, None, c.aggregation_resolution, b)
                    sums[b][pos] = sums[b].get(pos, 0) + m
        z = ddpm_step(z, eps, i, sched, gens)
    z = z.clamp(-1, 1)

    results = []
    for b, (r, bundle) in enumerate(zip(requests, bundles)):
        meta = {
            "prompt": r.prompt,
            "seed": int(r.seed),
            "steps": steps,
            "guidance_scale": scale,
            "masks": [{"subject": s, "blank": not bool(np.any(m))} for s, m in resolved[b]],
            "links": [{"kind": l.kind, "subject": l.subject} for l in bundle.links],
        }
        maps = {}
        if capture_attention:
            for pos, total in sums[b].items():
                maps[pos] = (bundle.links[pos].kind, (total / sched.T).numpy())
        results.append(GenerationResult(z[b].numpy().copy(), meta, maps))
    return results


def attention_filename(pos: int, kind: str) -> str:
    short = {TEXT: "text", HANDLE: "handle", MASK_TOKEN: "mask"}[kind]
    return f"attn_{pos}_{short}.png"


def iou(a, b) -> float:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def segment_by_color(image: np.ndarray, color: ColorSpec) -> np.ndarray:
    """Pixels within ``color.threshold`` (Euclidean, 0..255 units) of ``color.rgb``."""
    rgb = (np.asarray(image, dtype=np.float64) + 1.0) * 127.5
    d = np.linalg.norm(rgb - np.asarray(color.rgb, dtype=np.float64)[:, None, None], axis=0)
    return (d < color.threshold).astype(np.uint8)


def segment_and_iou(generated: np.ndarray, color: ColorSpec, target_mask) -> float:
    return iou(segment_by_color(generated, color), target_mask)


def mask_steering_eval(source, prompt: str, shaped_mask, color: ColorSpec, seeds,
                       steps: int | None = None, guidance_scale: float = 1.0) -> dict:
    """IoU against ``shaped_mask`` of images generated with it versus with a blank mask, per seed."""
    model = _model(source)
    size = model.denoiser_config.image_size
    shaped_mask = resize_mask(shaped_mask, size)
    shaped = [GenerationRequest(prompt, [shaped_mask], steps, s, guidance_scale) for s in seeds]
    blank = [GenerationRequest(prompt, [blank_mask(size)], steps, s, guidance_scale) for s in seeds]
    out_s = generate_many(model, shaped)
    out_b = generate_many(model, blank)
    iou_s = [segment_and_iou(r.image, color, shaped_mask) for r in out_s]
    iou_b = [segment_and_iou(r.image, color, shaped_mask) for r in out_b]
    return {
        "seeds": list(seeds),
        "iou_shaped": iou_s,
        "iou_blank": iou_b,
        "mean_shaped": float(np.mean(iou_s)),
        "mean_blank": float(np.mean(iou_b)),
        "images_shaped": [r.image for r in out_s],
        "images_blank": [r.image for r in out_b],
    }
