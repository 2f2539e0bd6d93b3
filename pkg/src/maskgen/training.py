"""
Base-model pretraining and the two-phase single-image fine-tune.

Phase 1 trains only the handle embeddings and the mask encoder; phase 2
trains everything at a much lower learning rate. Each step samples a
random non-empty subset of subjects, paints the background outside their
union with a random solid color, injects one mask token per chosen subject
and minimises l_rec + lambda_attn * (l_attn + lambda_m * l_mask_attn).
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .conditioning import area_downsample, handle_token, tokenize
from .dataio import Checkpoint, Scene, sample_corpus_scene
from .denoiser import aggregate_attention, denoise
from .diffusion import add_noise
from .errors import ConfigError, NonFiniteLossError
from .losses import (
    LOG_COLUMNS,
    LossBreakdown,
    LossWeights,
    mask_attention_total,
    masked_diffusion_loss,
    total_loss,
)
from .model import MaskGenModel


@dataclass
class TrainConfig:
    phase1_steps: int = 400
    phase2_steps: int = 400
    lr_phase1: float = 5e-4
    lr_phase2: float = 2e-6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    weight_decay: float = 1e-8
    batch_size: int = 4
    seed: int = 0
    lambda_attn: float = 0.01
    lambda_m: float = 1.0
    mask_attn_loss: bool = True
    class_words: tuple = ()
    pretrain_steps: int = 3000
    pretrain_lr: float = 1e-3
    pretrain_batch_size: int = 8
    pretrain_warmup: int = 100
    pretrain_max_subjects: int = 2
    # per-example probabilities of injecting real masks / blank masks in pretraining
    pretrain_mask_prob: float = 0.8
    pretrain_blank_prob: float = 0.1
    pretrain_null_prompt_prob: float = 0.1
    # weight of the attention loss on caption words and mask tokens (0 disables)
    pretrain_attn_weight: float = 1.0
    # per-sample pretraining weight clip(1/SNR_t, 1, gamma); 1 keeps the plain objective
    pretrain_snr_gamma: float = 1000.0
    log_every: int = 50

    def validate(self):
        for k in ("lr_phase1", "lr_phase2", "pretrain_lr"):
            if not getattr(self, k) > 0:
                raise ConfigError(f"{k} must be > 0", key=k)
        for k in ("phase1_steps", "phase2_steps", "pretrain_steps", "pretrain_warmup"):
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be >= 0", key=k)
        for k in ("batch_size", "pretrain_batch_size", "pretrain_max_subjects", "log_every"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be >= 1", key=k)
        for k in ("adam_beta1", "adam_beta2"):
            if not 0 <= getattr(self, k) < 1:
                raise ConfigError(f"{k} must be in [0, 1)", key=k)
        if self.pretrain_snr_gamma < 1:
            raise ConfigError("pretrain_snr_gamma must be >= 1", key="pretrain_snr_gamma")
        if self.pretrain_attn_weight < 0:
            raise ConfigError("pretrain_attn_weight must be >= 0", key="pretrain_attn_weight")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0", key="weight_decay")
        p = (self.pretrain_mask_prob, self.pretrain_blank_prob, self.pretrain_null_prompt_prob)
        if any(not 0 <= x <= 1 for x in p) or self.pretrain_mask_prob + self.pretrain_blank_prob > 1:
            raise ConfigError("pretrain mask/blank/null probabilities out of range", key="pretrain_mask_prob")
        self.weights()
        return self

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_attn, self.lambda_m)


@dataclass
class SourceImage:
    image: np.ndarray  # (3, H, W) in [-1, 1]
    masks: dict  # subject -> (H, W) binary

    @classmethod
    def from_scene(cls, scene: Scene) -> "SourceImage":
        return cls(scene.image, dict(scene.masks))


@dataclass
class TrainingExample:
    image: np.ndarray
    prompt: str
    subjects: tuple
    union_mask: np.ndarray
    masks: dict
    background: tuple


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    phases: dict = field(default_factory=dict)

    def record(self, step: int, phase: str, b: LossBreakdown):
        self.rows.append(b.row(step, phase))

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})

    def write_phases(self, path):
        with open(path, "w") as f:
            json.dump(self.phases, f, indent=2, sort_keys=True)


def _subsets(ids):
    return [c for r in range(1, len(ids) + 1) for c in itertools.combinations(ids, r)]


def sample_training_example(source: SourceImage, rng: np.random.Generator) -> TrainingExample:
    ids = sorted(i for i, m in source.masks.items() if np.any(m))
    if not ids:
        raise ConfigError("source image has no subject with a non-empty mask", key="masks")
    options = _subsets(ids)
    chosen = options[int(rng.integers(len(options)))]
    union = np.zeros_like(source.masks[chosen[0]], dtype=np.uint8)
    for i in chosen:
        union |= np.asarray(source.masks[i], dtype=np.uint8)
    bg = tuple(int(c) for c in rng.integers(0, 256, size=3))
    bg_signed = (np.array(bg, dtype=np.float32) / 127.5 - 1.0)[:, None, None]
    image = np.where(union[None].astype(bool), source.image, bg_signed).astype(np.float32)
    prompt = "a photo of " + " and ".join(handle_token(i) for i in chosen)
    return TrainingExample(image, prompt, tuple(chosen), union, {i: source.masks[i] for i in chosen}, bg)


def mask_at_resolution(mask, size: int, dtype=torch.float32) -> torch.Tensor:
    """Area-average a binary mask to size x size and re-binarize at 0.5."""
    m = torch.as_tensor(np.asarray(mask), dtype=torch.float64)
    return (area_downsample(m, size) >= 0.5).to(dtype)


def step_losses(model: MaskGenModel, examples, t, eps, weights: LossWeights,
                mask_attn_loss: bool = True):
    """Forward one batch and return (l_total tensor, LossBreakdown, DenoiserOutput, bundles)."""
    dt = model.dtype
    bundles = [model.bundle(ex.prompt, [(s, ex.masks[s]) for s in ex.subjects]) for ex in examples]
    z0 = torch.stack([torch.as_tensor(ex.image) for ex in examples]).to(dt)
    t = torch.as_tensor(t)
    zt = add_noise(z0, eps, t, model.schedule)
    out = denoise(model.denoiser, zt, t, bundles, capture_attention=True)

    agg = model.denoiser_config.aggregation_resolution
    rec, attn, mask_attn = [], [], []
    for b, (ex, bundle) in enumerate(zip(examples, bundles)):
        union = torch.as_tensor(ex.union_mask).to(dt)
        rec.append(masked_diffusion_loss(eps[b], out.eps_pred[b], union))
        targets = {s: mask_at_resolution(ex.masks[s], agg, dt) for s in ex.subjects}
        hmaps = {s: aggregate_attention(out.attention, bundle.handle_position(s), None, agg, b)
                 for s in ex.subjects}
        mmaps = {}
        if mask_attn_loss:
            for s in ex.subjects:
                pos = bundle.mask_position(s)
                if pos is not None:
                    mmaps[s] = aggregate_attention(out.attention, pos, None, agg, b)
        _, la, lm = mask_attention_total(hmaps, mmaps, targets, weights)
        attn.append(la)
        mask_attn.append(lm)
    l_rec = torch.stack(rec).mean()
    l_attn = torch.stack(attn).mean()
    l_mask = torch.stack(mask_attn).mean()
    l_mattn = l_attn + weights.lambda_m * l_mask
    l_total = total_loss(l_rec, l_mattn, weights)
    breakdown = LossBreakdown.compose(l_rec.item(), l_attn.item(), l_mask.item(), weights)
    return l_total, breakdown, out, bundles


def sample_timesteps(n: int, T: int, generator: torch.Generator) -> torch.Tensor:
    """``n`` timesteps drawn uniformly from [0, T)."""
    return torch.randint(0, T, (n,), generator=generator)


def make_optimizer(params, lr: float, config: TrainConfig) -> torch.optim.Optimizer:
    # decoupled weight decay
    return torch.optim.AdamW(params, lr=lr, betas=(config.adam_beta1, config.adam_beta2),
                             eps=config.adam_eps, weight_decay=config.weight_decay)


def _optimizer_settings(opt, steps: int) -> dict:
    g = opt.param_groups[0]
    return {"optimizer": type(opt).__name__, "lr": g["lr"], "betas": list(g["betas"]),
            "eps": g["eps"], "weight_decay": g["weight_decay"], "steps": steps,
            "n_tensors": sum(len(pg["params"]) for pg in opt.param_groups)}


def _check_finite(l_total, b: LossBreakdown, step, phase):
    if not math.isfinite(float(l_total.detach())):
        raise NonFiniteLossError(step, phase, {k: getattr(b, k) for k in
                                               ("l_rec", "l_attn", "l_mask_attn", "l_mattn", "l_total")})


def _finetune_loop(model, source, config, phase, params, lr, steps, step0, log, progress):
    config.validate()
    if steps == 0:
        if log is not None:
            log.phases[phase] = _optimizer_settings(make_optimizer(params, lr, config), 0)
        return
    weights = config.weights()
    # a distinct stream per phase so phase 2 does not replay phase 1's draws
    seed = config.seed * 2 + (0 if phase == "phase1" else 1)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    opt = make_optimizer(params, lr, config)
    if log is not None:
        log.phases[phase] = _optimizer_settings(opt, steps)
    T = model.schedule.T
    shape = (config.batch_size, *source.image.shape)
    for i in range(steps):
        examples = [sample_training_example(source, rng) for _ in range(config.batch_size)]
        t = sample_timesteps(config.batch_size, T, gen)
        eps = torch.randn(shape, generator=gen, dtype=torch.float64).to(model.dtype)
        l_total, b, _, _ = step_losses(model, examples, t, eps, weights, config.mask_attn_loss)
        step = step0 + i + 1
        _check_finite(l_total, b, step, phase)
        b.check(weights)
        opt.zero_grad(set_to_none=True)
        l_total.backward()
        opt.step()
        if log is not None:
            log.record(step, phase, b)
        if progress is not None and (step % config.log_every == 0 or i == steps - 1):
            progress(f"{phase} step {step} l_total={b.l_total:.5f} l_rec={b.l_rec:.5f} "
                     f"l_attn={b.l_attn:.4f} l_mask_attn={b.l_mask_attn:.4f}")


class _Frozen:
    """Temporarily turn off requires_grad on a set of parameters."""

    def __init__(self, params):
        self.params = list(params)

    def __enter__(self):
        self.saved = [p.requires_grad for p in self.params]
        for p in self.params:
            p.requires_grad_(False)

    def __exit__(self, *exc):
        for p, r in zip(self.params, self.saved):
            p.requires_grad_(r)


def prepare_finetune(model: MaskGenModel, source: SourceImage, class_words=()) -> MaskGenModel:
    """Give the model one handle per subject of ``source``."""
    n = max(source.masks) + 1 if source.masks else 0
    words = list(class_words) + [None] * (n - len(class_words))
    model.init_handles(n, [w or None for w in words[:n]])
    return model


def run_phase1(model: MaskGenModel, source: SourceImage, config: TrainConfig,
               log: TrainLog | None = None, progress: Callable | None = None) -> Checkpoint:
    trainable = model.handle_and_mask_encoder_parameters()
    with _Frozen(model.frozen_in_phase1()):
        _finetune_loop(model, source, config, "phase1", trainable, config.lr_phase1,
                       config.phase1_steps, 0, log, progress)
    return model.to_checkpoint("phase1", config.phase1_steps, {"optim": log.phases if log else {}})


def run_phase2(model: MaskGenModel, source: SourceImage, config: TrainConfig,
               log: TrainLog | None = None, progress: Callable | None = None) -> Checkpoint:
    params = list(model.parameters())
    _finetune_loop(model, source, config, "phase2", params, config.lr_phase2,
                   config.phase2_steps, config.phase1_steps, log, progress)
    return model.to_checkpoint("final", config.phase1_steps + config.phase2_steps,
                               {"optim": log.phases if log else {}})


def finetune(model: MaskGenModel, source: SourceImage, config: TrainConfig,
             log: TrainLog | None = None, progress: Callable | None = None):
    """Both phases. Returns (phase1 checkpoint, final checkpoint)."""
    prepare_finetune(model, source, config.class_words)
    ck1 = run_phase1(model, source, config, log, progress)
    ck2 = run_phase2(model, source, config, log, progress)
    return ck1, ck2


# --------------------------------------------------------------------------
# pretraining


def corpus_conditioning(scene: Scene, rng: np.random.Generator, config: TrainConfig):
    """Caption and injected masks for one pretraining scene."""
    if rng.random() < config.pretrain_null_prompt_prob:
        return "", []
    u = rng.random()
    n = len(scene.masks)
    if u < config.pretrain_mask_prob:
        masks = [(None, scene.masks[i]) for i in range(n)]
    elif u < config.pretrain_mask_prob + config.pretrain_blank_prob:
        masks = [(None, np.zeros_like(scene.masks[0])) for _ in range(n)]
    else:
        masks = []
    return scene.caption, masks


def subject_word_positions(scene: Scene, caption: str) -> list:
    """Token position of each subject's caption word, matched left to right."""
    tokens = tokenize(caption)
    out, start = [], 0
    for w in scene.words:
        k = tokens.index(w, start)
        out.append(k)
        start = k + 1
    return out


def _pretrain_attention(out, scenes, bundles, conds, agg, dtype):
    """(word term, mask-token term) of the pretraining attention loss.

    Each subject's caption word and each non-blank mask token is pulled toward
    that subject's mask. A term is None when the batch has nothing to score.
    """
    words, masks_t = [], []
    for b, (scene, bundle, (caption, masks)) in enumerate(zip(scenes, bundles, conds)):
        if not caption:
            continue
        for i, k in enumerate(subject_word_positions(scene, caption)):
            a = aggregate_attention(out.attention, k, None, agg, b)
            words.append(((a - mask_at_resolution(scene.masks[i], agg, dtype)) ** 2).mean())
        k0 = bundle.K - len(masks)
        for j, (_, m) in enumerate(masks):
            if not np.any(m):
                continue
            a = aggregate_attention(out.attention, k0 + j, None, agg, b)
            masks_t.append(((a - mask_at_resolution(m, agg, dtype)) ** 2).mean())
    return _mean_or_none(words), _mean_or_none(masks_t)


def _mean_or_none(terms):
    return torch.stack(terms).mean() if terms else None


def _pretrain_lr_factor(step: int, total: int, warmup: int) -> float:
    if warmup and step < warmup:
        return (step + 1) / warmup
    frac = (step - warmup) / max(1, total - warmup)
    return 0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * min(1.0, frac)))


def pretrain(model: MaskGenModel, config: TrainConfig, log: TrainLog | None = None,
             progress: Callable | None = None, corpus=None) -> Checkpoint:
    """Noise-prediction training with an all-ones loss mask, plus the attention
    term when ``pretrain_attn_weight`` is positive.

    Scenes are freshly sampled toy scenes, or drawn uniformly from the fixed
    list ``corpus`` when one is given.
    """
    config.validate()
    size = model.denoiser_config.image_size
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    params = [p for n, p in model.named_parameters() if not n.startswith("text.handles")]
    opt = torch.optim.AdamW(params, lr=config.pretrain_lr, betas=(config.adam_beta1, config.adam_beta2),
                            eps=config.adam_eps, weight_decay=0.0)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: _pretrain_lr_factor(s, config.pretrain_steps, config.pretrain_warmup))
    if log is not None:
        log.phases["pretrain"] = _optimizer_settings(opt, config.pretrain_steps)
    B, T = config.pretrain_batch_size, model.schedule.T
    ones = torch.ones(size, size, dtype=model.dtype)
    w_attn = config.pretrain_attn_weight
    # composed like the fine-tune objective: l_rec + w_attn * (l_attn + l_mask)
    log_weights = LossWeights(lambda_attn=w_attn, lambda_m=1.0)
    agg = model.denoiser_config.aggregation_resolution
    inv_snr = (1.0 - model.schedule.alpha_bars) / model.schedule.alpha_bars
    sample_weight = torch.from_numpy(np.clip(inv_snr, 1.0, config.pretrain_snr_gamma))
    for step in range(1, config.pretrain_steps + 1):
        if corpus is None:
            scenes = [sample_corpus_scene(rng, size, config.pretrain_max_subjects) for _ in range(B)]
        else:
            scenes = [corpus[int(rng.integers(len(corpus)))] for _ in range(B)]
        conds = [corpus_conditioning(s, rng, config) for s in scenes]
        bundles = [model.bundle(p, m) for p, m in conds]
        z0 = torch.from_numpy(np.stack([s.image for s in scenes])).to(model.dtype)
        t = sample_timesteps(B, T, gen)
        eps = torch.randn(z0.shape, generator=gen, dtype=torch.float64).to(model.dtype)
        out = denoise(model.denoiser, add_noise(z0, eps, t, model.schedule), t, bundles, w_attn > 0)
        if config.pretrain_snr_gamma > 1:
            per_sample = ((eps - out.eps_pred) ** 2).mean(dim=(1, 2, 3))
            l_rec = (sample_weight[t].to(per_sample.dtype) * per_sample).mean()
        else:
            l_rec = masked_diffusion_loss(eps, out.eps_pred, ones)
        zero = torch.zeros((), dtype=model.dtype)
        l_attn, l_mask = zero, zero
        if w_attn > 0:
            l_attn, l_mask = (v if v is not None else zero
                              for v in _pretrain_attention(out, scenes, bundles, conds, agg, model.dtype))
        loss = l_rec + w_attn * (l_attn + l_mask)
        b = LossBreakdown.compose(l_rec.item(), l_attn.item(), l_mask.item(), log_weights)
        _check_finite(loss, b, step, "pretrain")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        if log is not None:
            log.record(step, "pretrain", b)
        if progress is not None and (step % config.log_every == 0 or step == config.pretrain_steps):
            progress(f"pretrain step {step} loss={b.l_rec:.5f} l_attn={b.l_attn:.4f} "
                     f"l_mask_attn={b.l_mask_attn:.4f}")
    return model.to_checkpoint("pretrain", config.pretrain_steps)


@torch.no_grad()
def eval_mse(model: MaskGenModel, scenes, seed: int = 1234, repeats: int = 4) -> float:
    """Plain noise-prediction MSE on ``scenes`` at fixed seeded timesteps and noise, caption-conditioned."""
    gen = torch.Generator().manual_seed(seed)
    z0 = torch.from_numpy(np.stack([s.image for s in scenes])).to(model.dtype)
    bundles = [model.bundle(s.caption) for s in scenes]
    total = 0.0
    for _ in range(repeats):
        t = torch.randint(0, model.schedule.T, (len(scenes),), generator=gen)
        eps = torch.randn(z0.shape, generator=gen, dtype=torch.float64).to(model.dtype)
        out = denoise(model.denoiser, add_noise(z0, eps, t, model.schedule), t, bundles)
        total += F.mse_loss(out.eps_pred, eps).item()
    return total / repeats


def attention_mass_inside(model: MaskGenModel, source: SourceImage, seed: int = 0,
                          timesteps=None) -> dict:
    """Per subject, the share of its handle's aggregated attention that falls inside its own mask.

    Evaluated on the unmodified source image with all subjects in the prompt
    and their masks injected, averaged over ``timesteps`` (default: 1/8, 1/4,
    1/2 and 3/4 of the schedule).
    """
    if timesteps is None:
        T = model.schedule.T
        timesteps = [T // 8, T // 4, T // 2, 3 * T // 4]
    ids = sorted(source.masks)
    prompt = "a photo of " + " and ".join(handle_token(i) for i in ids)
    bundle = model.bundle(prompt, [(i, source.masks[i]) for i in ids])
    agg = model.denoiser_config.aggregation_resolution
    gen = torch.Generator().manual_seed(seed)
    z0 = torch.as_tensor(source.image).to(model.dtype)
    fractions = {i: [] for i in ids}
    with torch.no_grad():
        for t in timesteps:
            t = min(int(t), model.schedule.T - 1)
            eps = torch.randn(z0.shape, generator=gen, dtype=torch.float64).to(model.dtype)
            out = denoise(model.denoiser, add_noise(z0, eps, t, model.schedule), t, bundle, True)
            for i in ids:
                m = aggregate_attention(out.attention, bundle.handle_position(i), None, agg)
                target = mask_at_resolution(source.masks[i], agg, m.dtype)
                total = m.sum().item()
                fractions[i].append((m * target).sum().item() / total if total > 0 else 0.0)
    return {i: float(np.mean(v)) for i, v in fractions.items()}


def config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["class_words"] = list(config.class_words)
    return d
