"""
Training objectives.

    l_rec       = mean(((eps - eps_pred) * M)^2)                 masked noise MSE
    l_attn      = mean_i mean((A(handle_i) - M_i)^2)             handle attention vs mask
    l_mask_attn = mean_i mean((A(masktoken_i) - M_i)^2)          mask-token attention vs mask
    l_mattn     = l_attn + lambda_m * l_mask_attn
    l_total     = l_rec + lambda_attn * l_mattn

All reductions are means so the weights do not depend on resolution or
subject count.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch

from .errors import ArgumentError, ConfigError, ConsistencyError

LOG_COLUMNS = ("step", "phase", "l_rec", "l_attn", "l_mask_attn", "l_mattn", "l_total")


@dataclass(frozen=True)
class LossWeights:
    lambda_attn: float = 0.01
    lambda_m: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"{f.name} must be >= 0", key=f.name)


@dataclass(frozen=True)
class LossBreakdown:
    l_rec: float
    l_attn: float
    l_mask_attn: float
    l_mattn: float
    l_total: float

    @classmethod
    def compose(cls, l_rec, l_attn, l_mask_attn, weights: LossWeights) -> "LossBreakdown":
        l_rec, l_attn, l_mask_attn = float(l_rec), float(l_attn), float(l_mask_attn)
        l_mattn = l_attn + weights.lambda_m * l_mask_attn
        return cls(l_rec, l_attn, l_mask_attn, l_mattn, l_rec + weights.lambda_attn * l_mattn)

    def check(self, weights: LossWeights, tol: float = 1e-9):
        for f in fields(self):
            if not getattr(self, f.name) >= 0:
                raise ArgumentError(f"{f.name} = {getattr(self, f.name)} is not a non-negative real")
        if abs(self.l_mattn - (self.l_attn + weights.lambda_m * self.l_mask_attn)) > tol * max(1.0, self.l_mattn):
            raise ArgumentError("l_mattn != l_attn + lambda_m * l_mask_attn")
        if abs(self.l_total - (self.l_rec + weights.lambda_attn * self.l_mattn)) > tol * max(1.0, self.l_total):
            raise ArgumentError("l_total != l_rec + lambda_attn * l_mattn")

    def row(self, step: int, phase: str) -> dict:
        return {"step": step, "phase": phase, **{f.name: getattr(self, f.name) for f in fields(self)}}


def masked_diffusion_loss(eps: torch.Tensor, eps_pred: torch.Tensor, union_mask: torch.Tensor) -> torch.Tensor:
    """Mean of ((eps - eps_pred) * M)^2; M (H, W) broadcasts over leading dims."""
    if eps.shape != eps_pred.shape:
        raise ArgumentError(f"shape mismatch: eps {tuple(eps.shape)} vs eps_pred {tuple(eps_pred.shape)}")
    m = torch.as_tensor(union_mask).to(eps.dtype)
    if m.shape != eps.shape[-m.ndim:]:
        raise ArgumentError(f"mask shape {tuple(m.shape)} incompatible with {tuple(eps.shape)}")
    return ((eps - eps_pred) * m).square().mean()


def cross_attention_loss(maps: dict, masks: dict) -> torch.Tensor:
    """Mean over subjects of the per-subject mean squared map-mask difference."""
    if not maps:
        raise ArgumentError("no attention maps given")
    missing = sorted(set(maps) - set(masks))
    if missing:
        raise ConsistencyError(f"subjects {missing} have attention maps but no mask")
    terms = []
    for sid, a in maps.items():
        m = torch.as_tensor(masks[sid]).to(a.dtype)
        if m.shape != a.shape:
            raise ArgumentError(f"subject {sid}: map {tuple(a.shape)} vs mask {tuple(m.shape)}")
        terms.append((a - m).square().mean())
    return torch.stack(terms).mean()


def mask_attention_total(handle_maps: dict, mask_token_maps: dict, masks: dict, weights: LossWeights):
    """Returns (l_mattn, l_attn, l_mask_attn).

    An empty ``mask_token_maps`` (no mask tokens, or the mask term is
    switched off) gives l_mask_attn = 0 and l_mattn = l_attn.
    """
    l_attn = cross_attention_loss(handle_maps, masks)
    if mask_token_maps:
        l_mask = cross_attention_loss(mask_token_maps, masks)
    else:
        l_mask = torch.zeros((), dtype=l_attn.dtype)
    return l_attn + weights.lambda_m * l_mask, l_attn, l_mask


def total_loss(l_rec, l_mattn, weights: LossWeights):
    return l_rec + weights.lambda_attn * l_mattn
