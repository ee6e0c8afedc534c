"""Heterogeneous attention over the memory-enhanced features.

Three streams share one latent width: the enhanced frame features
attend to themselves (frame-frame), to the enhanced word features
(frame-word, with the word-word self-attention output on the value
path), and the original video features act as a global signal that
re-weights the enhanced frames (calibration). The per-frame outputs of
the enabled streams are concatenated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import uniform_init

FUSION_MODES = ("full", "no-calibration", "no-self", "inter-only")
_STREAMS = {"full": 3, "no-calibration": 2, "no-self": 2, "inter-only": 1}


def fusion_width(mode: str, d_latent: int) -> int:
    if mode not in _STREAMS:
        raise ValueError(f"unknown fusion mode {mode!r}, expected one of {FUSION_MODES}")
    return _STREAMS[mode] * d_latent


@dataclass
class AttentionUnit:
    wq: Tensor
    wk: Tensor
    wv: Tensor

    @classmethod
    def build(cls, rng, dim):
        return cls(*(uniform_init(rng, dim, dim, dim) for _ in range(3)))


@dataclass
class FusionParams:
    proj_video: Tensor    # 2d_model x d_latent, enhanced frames
    proj_query: Tensor    # 2d_model x d_latent, enhanced words
    proj_global: Tensor   # d_model x d_latent, original video
    self_unit: AttentionUnit
    inter_unit: AttentionUnit
    calib_unit: AttentionUnit

    @classmethod
    def build(cls, rng: np.random.Generator, d_model: int, d_latent: int):
        return cls(
            proj_video=uniform_init(rng, 2 * d_model, d_latent, 2 * d_model),
            proj_query=uniform_init(rng, 2 * d_model, d_latent, 2 * d_model),
            proj_global=uniform_init(rng, d_model, d_latent, d_model),
            self_unit=AttentionUnit.build(rng, d_latent),
            inter_unit=AttentionUnit.build(rng, d_latent),
            calib_unit=AttentionUnit.build(rng, d_latent),
        )


def build_tilde(v_prime: Tensor, q_hat_prime: Tensor,
                v_hat_prime: Tensor, q_prime: Tensor):
    """Per-position concatenation of native and partner features.

    Returns (T x 2D enhanced frames, N x 2D enhanced words).
    """
    if v_prime.rows != q_hat_prime.rows:
        raise ad.ShapeError(f"build_tilde: frame lengths differ, "
                            f"{v_prime.shape} vs {q_hat_prime.shape}")
    if q_prime.rows != v_hat_prime.rows:
        raise ad.ShapeError(f"build_tilde: word lengths differ, "
                            f"{q_prime.shape} vs {v_hat_prime.shape}")
    return (ad.concat_cols([v_prime, q_hat_prime]),
            ad.concat_cols([q_prime, v_hat_prime]))


def _dot_attention(q: Tensor, k: Tensor, v: Tensor, unit: AttentionUnit):
    qp = q @ unit.wq
    kp = k @ unit.wk
    weights = ad.row_softmax((qp @ kp.T) * (1.0 / math.sqrt(qp.cols)))
    return weights @ (v @ unit.wv), weights


def heterogeneous_attention(v_tilde: Tensor, q_tilde: Tensor, v: Tensor,
                            p: FusionParams, mode: str = "full",
                            calibration_swapped: bool = False,
                            return_maps: bool = False):
    """Fused per-frame features, T x (streams * d_latent).

    calibration_swapped flips which stream supplies queries vs keys/values
    in the calibration unit (enhanced frames query the global signal
    instead of the reverse).
    """
    if mode not in _STREAMS:
        raise ValueError(f"unknown fusion mode {mode!r}, expected one of {FUSION_MODES}")
    x_v = v_tilde @ p.proj_video
    x_q = q_tilde @ p.proj_query
    maps = {}
    parts = []
    with_self = mode in ("full", "no-calibration")
    with_calib = mode in ("full", "no-self")
    if with_self:
        h_self, maps["frame_self"] = _dot_attention(x_v, x_v, x_v, p.self_unit)
        word_ctx, maps["word_self"] = _dot_attention(x_q, x_q, x_q, p.self_unit)
        parts.append(h_self)
    else:
        word_ctx = x_q
    h_inter, maps["inter"] = _dot_attention(x_v, x_q, word_ctx, p.inter_unit)
    parts.append(h_inter)
    if with_calib:
        x_g = v @ p.proj_global
        if calibration_swapped:
            h_cal, maps["calibration"] = _dot_attention(x_v, x_g, x_g, p.calib_unit)
        else:
            h_cal, maps["calibration"] = _dot_attention(x_g, x_v, x_v, p.calib_unit)
        parts.append(h_cal)
    fused = parts[0] if len(parts) == 1 else ad.concat_cols(parts)
    if return_maps:
        return fused, maps
    return fused
