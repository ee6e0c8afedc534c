"""Cross-modal graph-convolutional alignment.

A single similarity matrix between projected frame and word features is
row-normalized in both directions; the resulting adjacencies re-express
each modality in terms of the other (a visual feature per word, a
textual feature per frame).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import uniform_init


@dataclass
class AlignmentParams:
    phi_video: Tensor  # d x d
    phi_query: Tensor  # d x d
    w_video: Tensor    # d x d
    w_query: Tensor    # d x d

    @classmethod
    def build(cls, rng: np.random.Generator, dim: int):
        return cls(*(uniform_init(rng, dim, dim, dim) for _ in range(4)))


def cross_modal_adjacency(v: Tensor, q: Tensor, p: AlignmentParams):
    """Frame-to-word and word-to-frame adjacency matrices.

    The raw similarity is computed once; the two adjacencies are its
    row-softmax and the row-softmax of its transpose, so each row of
    either output is a distribution over the other modality.
    """
    raw = (v @ p.phi_video) @ (q @ p.phi_query).T  # T x N
    return ad.row_softmax(raw), ad.row_softmax(raw.T)


def align(v: Tensor, q: Tensor, a1: Tensor, a2: Tensor, p: AlignmentParams):
    """Aligned features: visual rows per word (N x D), textual rows per frame (T x D)."""
    v_hat = (a2 @ v) @ p.w_video
    q_hat = (a1 @ q) @ p.w_query
    return v_hat, q_hat
