"""Per-frame grounding heads, their losses, and top-n inference.

Three 1-D convolution stacks over the fused frame features predict
boundary offsets (start/end distances, forced nonnegative through a
softplus), a confidence logit, and an overlap estimate. Boxes decode as
[t - d_s, t + d_e] clamped to the clip. Inference scores every frame's
box by sigmoid(confidence) * clip(overlap, 0, 1) and applies greedy
temporal non-max suppression.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import uniform_init
from .metrics import interval_iou

BOX_EPS = 1e-6  # floor for intersection and union lengths inside the log


@dataclass
class ConvLayer:
    """Width-3, zero-padded 1-D convolution stored as a (3*c_in) x c_out map."""
    weight: Tensor
    bias: Tensor

    @classmethod
    def build(cls, rng, c_in, c_out, kernel=3):
        return cls(uniform_init(rng, kernel * c_in, c_out, kernel * c_in),
                   uniform_init(rng, 1, c_out, kernel * c_in))


def conv1d(x: Tensor, layer: ConvLayer) -> Tensor:
    """Same-length convolution along the row (time) axis."""
    c_in = x.cols
    kernel = layer.weight.rows // c_in
    pad = (kernel - 1) // 2
    steps = x.rows
    zeros = Tensor(np.zeros((pad, c_in)))
    padded = ad.concat_rows([zeros, x, zeros])
    windows = ad.concat_cols([ad.slice_rows(padded, k, k + steps) for k in range(kernel)])
    return windows @ layer.weight + layer.bias


@dataclass
class HeadParams:
    boundary: list      # two layers -> 2 channels
    confidence: list    # two layers -> 1 channel
    overlap: list       # three layers -> 1 channel

    @classmethod
    def build(cls, rng: np.random.Generator, in_dim: int, hidden: int):
        return cls(
            boundary=[ConvLayer.build(rng, in_dim, hidden),
                      ConvLayer.build(rng, hidden, 2)],
            confidence=[ConvLayer.build(rng, in_dim, hidden),
                        ConvLayer.build(rng, hidden, 1)],
            overlap=[ConvLayer.build(rng, in_dim, hidden),
                     ConvLayer.build(rng, hidden, hidden),
                     ConvLayer.build(rng, hidden, 1)],
        )


def _conv_stack(x: Tensor, layers: Sequence[ConvLayer]) -> Tensor:
    out = x
    for i, layer in enumerate(layers):
        out = conv1d(out, layer)
        if i + 1 < len(layers):
            out = ad.relu(out)
    return out


def heads_forward(f: Tensor, p: HeadParams):
    """(offsets T x 2 nonnegative, confidence logits T x 1, overlap estimates T x 1)."""
    offsets = ad.softplus(_conv_stack(f, p.boundary))
    conf_logits = _conv_stack(f, p.confidence)
    overlap = _conv_stack(f, p.overlap)
    return offsets, conf_logits, overlap


# -- targets ---------------------------------------------------------------

@dataclass
class FrameTargets:
    indicator: np.ndarray   # (T,) 1 inside the ground-truth interval
    offsets: np.ndarray     # (T, 2) distances to (start, end), positives only
    confidence: np.ndarray  # (T,) same as indicator
    gt: tuple               # (tau_s, tau_e)
    n_frames: int
    n_positive: int

    @classmethod
    def from_interval(cls, gt, n_frames: int):
        tau_s, tau_e = gt
        if not 0 <= tau_s <= tau_e <= n_frames - 1:
            raise ValueError(f"ground truth {gt} outside [0, {n_frames - 1}]")
        t = np.arange(n_frames)
        ind = ((t >= tau_s) & (t <= tau_e)).astype(np.float64)
        offs = np.zeros((n_frames, 2))
        offs[:, 0] = np.where(ind > 0, t - tau_s, 0.0)
        offs[:, 1] = np.where(ind > 0, tau_e - t, 0.0)
        return cls(ind, offs, ind.copy(), (tau_s, tau_e), n_frames, int(ind.sum()))


# -- box decoding ------------------------------------------------------------

def decode_box(t: int, offsets, n_frames: int) -> tuple[float, float]:
    """[t - d_s, t + d_e] clamped into [0, T-1]."""
    d_s, d_e = float(offsets[0]), float(offsets[1])
    if d_s < 0 or d_e < 0:
        raise ValueError(f"decode_box: negative offsets {offsets}")
    hi = float(n_frames - 1)
    return min(max(t - d_s, 0.0), hi), min(max(t + d_e, 0.0), hi)


def decode_boxes(offset_values: np.ndarray, n_frames: int) -> np.ndarray:
    """Per-frame boxes (T x 2), clamped into [0, T-1]."""
    t = np.arange(n_frames)
    starts = np.clip(t - offset_values[:, 0], 0.0, n_frames - 1)
    ends = np.clip(t + offset_values[:, 1], 0.0, n_frames - 1)
    return np.stack([starts, ends], axis=1)


# -- losses ------------------------------------------------------------------

def boundary_loss(offsets: Tensor, targets: FrameTargets) -> Tensor:
    """Smooth-l1 on the offsets plus a log-IoU penalty on the decoded boxes,
    averaged over positive frames."""
    if targets.n_positive < 1:
        raise ValueError("boundary_loss: sample has no positive frames")
    n = targets.n_frames
    hi = float(n - 1)
    diff_loss = ad.huber(offsets - Tensor(targets.offsets)).sum(axis=1)
    t_col = Tensor(np.arange(n, dtype=np.float64).reshape(n, 1))
    pred_s = ad.clamp(t_col - ad.slice_cols(offsets, 0, 1), 0.0, hi)
    pred_e = ad.clamp(t_col + ad.slice_cols(offsets, 1, 2), 0.0, hi)
    gt_boxes = decode_boxes(targets.offsets, n)
    gt_s = Tensor(gt_boxes[:, 0].reshape(n, 1))
    gt_e = Tensor(gt_boxes[:, 1].reshape(n, 1))
    inter = ad.clamp(ad.minimum(pred_e, gt_e) - ad.maximum(pred_s, gt_s), lo=BOX_EPS)
    union = ad.clamp(ad.maximum(pred_e, gt_e) - ad.minimum(pred_s, gt_s), lo=BOX_EPS)
    per_frame = diff_loss - ad.log(inter / union)
    mask = Tensor(targets.indicator.reshape(n, 1))
    return (mask * per_frame).sum() * (1.0 / targets.n_positive)


def confidence_loss(conf_logits: Tensor, targets: FrameTargets) -> Tensor:
    """Binary cross entropy over all frames, normalized by the positive count."""
    if targets.n_positive < 1:
        raise ValueError("confidence_loss: sample has no positive frames")
    n = targets.n_frames
    labels = targets.confidence.reshape(n, 1)
    pos = Tensor(labels)
    neg = Tensor(1.0 - labels)
    bce = pos * ad.softplus(-conf_logits) + neg * ad.softplus(conf_logits)
    return bce.sum() * (1.0 / targets.n_positive)


def overlap_targets(offset_values: np.ndarray, targets: FrameTargets) -> np.ndarray:
    """IoU of each frame's decoded box with the ground truth, off-tape."""
    boxes = decode_boxes(offset_values, targets.n_frames)
    gt = (float(targets.gt[0]), float(targets.gt[1]))
    return np.array([interval_iou((b[0], b[1]), gt) for b in boxes])


def iou_loss(overlap_pred: Tensor, offsets: Tensor, targets: FrameTargets) -> Tensor:
    """Smooth-l1 between predicted overlap and the realized IoU of the
    current boxes (the boxes enter as constants)."""
    n = targets.n_frames
    labels = Tensor(overlap_targets(offsets.values, targets).reshape(n, 1))
    return ad.huber(overlap_pred - labels).sum() * (1.0 / n)


def total_loss(l_boundary: Tensor, l_confidence: Tensor, l_overlap: Tensor,
               lambdas=(1.0, 1.0, 1.0)) -> Tensor:
    if any(lam < 0 for lam in lambdas):
        raise ValueError(f"total_loss: negative weight in {lambdas}")
    return l_boundary * lambdas[0] + l_confidence * lambdas[1] + l_overlap * lambdas[2]


# -- inference ---------------------------------------------------------------

class Prediction(NamedTuple):
    start: float
    end: float
    score: float


def infer_top_n(offset_values: np.ndarray, conf_values: np.ndarray,
                overlap_values: np.ndarray, n: int,
                nms_threshold: float = 0.5) -> list[Prediction]:
    """Ranked, NMS-filtered interval predictions.

    Each frame proposes its decoded box scored by
    sigmoid(confidence) * clip(overlap, 0, 1); boxes overlapping a kept
    box at IoU >= nms_threshold are suppressed; ties order by frame index.
    """
    if n < 1:
        raise ValueError(f"infer_top_n: n must be >= 1, got {n}")
    n_frames = offset_values.shape[0]
    boxes = decode_boxes(offset_values, n_frames)
    conf = 1.0 / (1.0 + np.exp(-conf_values.ravel()))
    scores = conf * np.clip(overlap_values.ravel(), 0.0, 1.0)
    order = sorted(range(n_frames), key=lambda i: (-scores[i], i))
    kept: list[Prediction] = []
    for i in order:
        cand = (float(boxes[i, 0]), float(boxes[i, 1]))
        if all(interval_iou(cand, (p.start, p.end)) < nms_threshold for p in kept):
            kept.append(Prediction(cand[0], cand[1], float(scores[i])))
    return kept[:n]


# -- prediction dump ---------------------------------------------------------

def write_prediction_dump(path, records) -> None:
    """One line per sample: id, rare flag, ground truth, ranked predictions.

    records: iterable of dicts {id, rare, gt: (s, e), predictions:
    list[Prediction]}. Line format is JSON for machine consumption.
    """
    import json
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps({
                "id": rec["id"],
                "rare": bool(rec["rare"]),
                "gt": [float(rec["gt"][0]), float(rec["gt"][1])],
                "predictions": [[p.start, p.end, p.score] for p in rec["predictions"]],
            }) + "\n")


def read_prediction_dump(path) -> list[dict]:
    import json
    records = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            raw = json.loads(line)
            records.append({
                "id": raw["id"],
                "rare": bool(raw["rare"]),
                "gt": tuple(raw["gt"]),
                "predictions": [Prediction(*p) for p in raw["predictions"]],
            })
    return records
