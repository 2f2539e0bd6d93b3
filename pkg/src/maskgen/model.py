"""The trainable bundle: denoiser, text encoder, mask encoder and schedule."""

from __future__ import annotations

import hashlib
import json

import numpy as np
import torch
from torch import nn

from .conditioning import (
    HANDLE,
    MaskEncoder,
    TextEncoder,
    Vocabulary,
    assemble_bundle,
    encode_mask,
    encode_prompt,
)
from .dataio import FORMAT_VERSION, Checkpoint, corpus_words
from .denoiser import DenoiserConfig, UNet
from .diffusion import NoiseSchedule, build_schedule
from .errors import SchemaError


class MaskGenModel(nn.Module):
    def __init__(self, denoiser_config: DenoiserConfig, vocab: Vocabulary | None = None,
                 schedule_params: dict | None = None, mask_grid: int = 16, max_prompt_len: int = 16):
        super().__init__()
        self.denoiser_config = denoiser_config
        self.schedule_params = dict(schedule_params or {"T": 400, "beta_start": 1e-4, "beta_end": 0.02})
        self.schedule: NoiseSchedule = build_schedule(**self.schedule_params)
        self.denoiser = UNet(denoiser_config, self.schedule.alpha_bars)
        vocab = vocab or Vocabulary(corpus_words())
        self.text = TextEncoder(vocab, denoiser_config.cond_dim, max_prompt_len)
        self.mask_encoder = MaskEncoder(denoiser_config.cond_dim, mask_grid)
        self.class_words: list = []

    @property
    def vocab(self) -> Vocabulary:
        return self.text.vocab

    @property
    def n_handles(self) -> int:
        return self.vocab.n_handles

    @property
    def dtype(self):
        return self.text.word_table.dtype

    def bundle(self, prompt: str, masks=()):
        """Conditioning bundle for ``prompt`` with ``masks`` = [(subject or None, mask), ...]."""
        text = encode_prompt(prompt, self.text)
        embs = [encode_mask(torch.as_tensor(np.asarray(m)), self.mask_encoder, sid) for sid, m in masks]
        return assemble_bundle(text, embs)

    def init_handles(self, n: int, class_words=None):
        """Create ``n`` handles, each a copy of its class word's embedding (mean word embedding if unset)."""
        class_words = list(class_words or [None] * n)
        with torch.no_grad():
            table = self.text.word_table
            mean = table[2:].mean(0)
            rows = [table[self.vocab.id(w)] if w else mean for w in class_words]
            self.text.add_handles(torch.stack(rows) if rows else table[:0])
        self.class_words = class_words

    # parameter groups -------------------------------------------------------

    def handle_and_mask_encoder_parameters(self):
        return [self.text.handles, *self.mask_encoder.parameters()]

    def frozen_in_phase1(self):
        return [*self.denoiser.parameters(), self.text.word_table]

    # serialization -----------------------------------------------------------

    def to_arrays(self) -> dict:
        out = {f"denoiser/{k}": v.detach().cpu().numpy().copy() for k, v in self.denoiser.state_dict().items()}
        out["text/word_table"] = self.text.word_table.detach().cpu().numpy().copy()
        for i in range(self.n_handles):
            out[f"text/handles/{i}"] = self.text.handles[i].detach().cpu().numpy().copy()
        out["maskenc/weight"] = self.mask_encoder.proj.weight.detach().cpu().numpy().copy()
        out["maskenc/bias"] = self.mask_encoder.proj.bias.detach().cpu().numpy().copy()
        return out

    def expected_shapes(self) -> dict:
        return {k: v.shape for k, v in self.to_arrays().items()}

    def model_metadata(self) -> dict:
        return {
            "denoiser": self.denoiser_config.to_dict(),
            "schedule": self.schedule_params,
            "vocab": self.vocab.to_dict(),
            "mask_grid": self.mask_encoder.grid,
            "max_prompt_len": self.text.max_len,
            "class_words": self.class_words,
        }

    def config_digest(self) -> str:
        md = self.model_metadata()
        md.pop("class_words")
        return hashlib.sha256(json.dumps(md, sort_keys=True).encode()).hexdigest()[:16]

    def to_checkpoint(self, phase: str = "init", step: int = 0, extra: dict | None = None) -> Checkpoint:
        meta = self.model_metadata()
        meta.update(format_version=FORMAT_VERSION, config_digest=self.config_digest(), phase=phase, step=int(step))
        if extra:
            meta.update(extra)
        return Checkpoint(self.to_arrays(), meta)

    def load_arrays(self, arrays: dict):
        """Copy ``arrays`` into the parameters; every expected key must exist with matching shape."""
        expected = self.expected_shapes()
        for key, shape in expected.items():
            if key not in arrays:
                raise SchemaError(f"checkpoint missing key {key!r}", key=key)
            if tuple(arrays[key].shape) != tuple(shape):
                raise SchemaError(
                    f"shape mismatch for {key!r}: checkpoint {tuple(arrays[key].shape)} vs model {tuple(shape)}",
                    key=key,
                )
        extra = sorted(set(arrays) - set(expected))
        if extra:
            raise SchemaError(f"unexpected checkpoint key {extra[0]!r}", key=extra[0])
        dt = self.dtype
        state = {k[len("denoiser/"):]: torch.from_numpy(np.array(v)).to(dt)
                 for k, v in arrays.items() if k.startswith("denoiser/")}
        self.denoiser.load_state_dict(state)
        with torch.no_grad():
            self.text.word_table.copy_(torch.from_numpy(np.array(arrays["text/word_table"])))
            for i in range(self.n_handles):
                self.text.handles[i].copy_(torch.from_numpy(np.array(arrays[f"text/handles/{i}"])))
            self.mask_encoder.proj.weight.copy_(torch.from_numpy(np.array(arrays["maskenc/weight"])))
            self.mask_encoder.proj.bias.copy_(torch.from_numpy(np.array(arrays["maskenc/bias"])))

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "MaskGenModel":
        md = ckpt.metadata
        for key in ("denoiser", "schedule", "vocab", "mask_grid"):
            if key not in md:
                raise SchemaError(f"checkpoint metadata missing {key!r}", key=key)
        model = cls(
            DenoiserConfig(**md["denoiser"]),
            Vocabulary.from_dict(md["vocab"]),
            md["schedule"],
            md["mask_grid"],
            md.get("max_prompt_len", 16),
        )
        n = md["vocab"]["n_handles"]
        model.text.add_handles(torch.zeros(n, model.denoiser_config.cond_dim))
        model.class_words = list(md.get("class_words") or [None] * n)
        model.load_arrays(ckpt.arrays)
        return model


def handle_subjects(prompt_links) -> list:
    return [l.subject for l in prompt_links if l.kind == HANDLE]
