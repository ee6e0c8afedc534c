"""End-to-end grounding network: encoders, cross-modal alignment, persistent
memory enhancement, heterogeneous attention, and the grounding heads, with
switches for the memory / fusion ablations."""

from __future__ import annotations

from dataclasses import dataclass, fields, is_dataclass
from typing import NamedTuple

import numpy as np

from . import alignment, autodiff as ad, encoders, fusion, grounding, memory
from .autodiff import Tensor
from .synthdata import GroundingSample


@dataclass
class ModelConfig:
    d_model: int = 32
    d_latent: int = 32
    d_raw: int = 16
    vocab_size: int = 200
    slots_video: int = 64
    slots_query: int = 64
    head_hidden: int = 32
    memory_enabled: bool = True
    memory_shared: bool = True
    fusion_enabled: bool = True
    fusion_mode: str = "full"
    calibration_swapped: bool = False
    lambdas: tuple = (1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        self.lambdas = tuple(self.lambdas)
        if min(self.d_model, self.d_latent, self.d_raw, self.vocab_size,
               self.slots_video, self.slots_query, self.head_hidden) < 1:
            raise ValueError("model dimensions must be positive")
        if any(lam < 0 for lam in self.lambdas):
            raise ValueError(f"loss weights must be nonnegative, got {self.lambdas}")
        if self.fusion_mode not in fusion.FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.fusion_mode!r}")


class HeadOutputs(NamedTuple):
    offsets: Tensor      # T x 2
    conf_logits: Tensor  # T x 1
    overlap: Tensor      # T x 1


def param_registry(obj, prefix: str) -> dict[str, Tensor]:
    """Flatten nested dataclasses / lists of Tensors into canonical names."""
    reg: dict[str, Tensor] = {}

    def walk(node, name):
        if isinstance(node, Tensor):
            reg[name] = node
        elif is_dataclass(node):
            for f in fields(node):
                walk(getattr(node, f.name), f"{name}.{f.name}")
        elif isinstance(node, (list, tuple)):
            for i, item in enumerate(node):
                walk(item, f"{name}.{i}")

    walk(obj, prefix)
    return reg


class GroundingModel:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
        self.encoder = encoders.EncoderParams.build(
            rng, cfg.vocab_size, cfg.d_raw, cfg.d_model)
        self.alignment = alignment.AlignmentParams.build(rng, cfg.d_model)
        self.memory_proj = memory.MemoryProjections.build(rng, cfg.d_model)
        self.fusion = fusion.FusionParams.build(rng, cfg.d_model, cfg.d_latent)
        if cfg.fusion_enabled:
            head_in = fusion.fusion_width(cfg.fusion_mode, cfg.d_latent)
        else:
            head_in = 2 * cfg.d_model
        self.heads = grounding.HeadParams.build(rng, head_in, cfg.head_hidden)
        self.video_memory = memory.DomainMemory(
            cfg.slots_video, cfg.d_model, "video", cfg.seed * 4 + 101, cfg.memory_shared)
        self.query_memory = memory.DomainMemory(
            cfg.slots_query, cfg.d_model, "query", cfg.seed * 4 + 103, cfg.memory_shared)

    def params(self) -> dict[str, Tensor]:
        reg = {}
        reg.update(param_registry(self.encoder, "encoder"))
        reg.update(param_registry(self.alignment, "alignment"))
        if self.cfg.memory_enabled:
            reg.update(param_registry(self.memory_proj, "memory"))
        if self.cfg.fusion_enabled:
            reg.update(param_registry(self.fusion, "fusion"))
        reg.update(param_registry(self.heads, "heads"))
        return reg

    def banks(self) -> list[memory.MemoryBank]:
        out = list(self.video_memory.banks())
        out += list(self.query_memory.banks())
        return out

    def forward(self, sample: GroundingSample, training: bool) -> HeadOutputs:
        p = self.cfg
        v = encoders.encode_video(sample.frames, self.encoder)
        q = encoders.encode_query(sample.words, self.encoder)
        a1, a2 = alignment.cross_modal_adjacency(v, q, self.alignment)
        v_hat, q_hat = alignment.align(v, q, a1, a2, self.alignment)
        if p.memory_enabled:
            q_hat_p, v_p, v_hat_p, q_p = memory.enhance(
                q_hat, v, v_hat, q, self.video_memory, self.query_memory,
                self.memory_proj, training)
        else:
            q_hat_p, v_p, v_hat_p, q_p = q_hat, v, v_hat, q
        v_tilde, q_tilde = fusion.build_tilde(v_p, q_hat_p, v_hat_p, q_p)
        if p.fusion_enabled:
            fused = fusion.heterogeneous_attention(
                v_tilde, q_tilde, v, self.fusion, p.fusion_mode,
                p.calibration_swapped)
        else:
            fused = v_tilde
        return HeadOutputs(*grounding.heads_forward(fused, self.heads))

    def loss(self, sample: GroundingSample, training: bool):
        """(total loss tensor, dict of detached component values)."""
        out = self.forward(sample, training)
        targets = grounding.FrameTargets.from_interval(sample.gt, sample.frames.shape[0])
        l_b = grounding.boundary_loss(out.offsets, targets)
        l_c = grounding.confidence_loss(out.conf_logits, targets)
        l_i = grounding.iou_loss(out.overlap, out.offsets, targets)
        total = grounding.total_loss(l_b, l_c, l_i, self.cfg.lambdas)
        parts = {"boundary": l_b.item(), "confidence": l_c.item(),
                 "overlap": l_i.item(), "total": total.item()}
        return total, parts

    def predict(self, sample: GroundingSample, top_n: int = 5):
        with ad.no_grad():
            out = self.forward(sample, training=False)
        return grounding.infer_top_n(out.offsets.values, out.conf_logits.values,
                                     out.overlap.values, top_n)
