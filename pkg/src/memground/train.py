"""Training loop (Adam over the tape gradients), evaluation, and
checkpointing. Checkpoints capture parameters, optimizer moments, memory
banks, and the shuffling RNG state, so a resumed run replays the
uninterrupted one step for step."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import grounding, metrics
from .autodiff import Tensor, no_grad
from .config import RunConfig
from .model import GroundingModel
from .synthdata import Corpus

CHECKPOINT_VERSION = 1


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.values) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.values) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self, grad_scale: float = 1.0):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad * grad_scale
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            p.values -= self.lr * (self.m[k] / bias1) / (np.sqrt(self.v[k] / bias2) + self.eps)


@dataclass
class TrainResult:
    loss_curve: list = field(default_factory=list)  # (epoch, train, val, val_r1_05)
    best_epoch: int = -1
    best_val_recall: float = -1.0
    wall_seconds: float = 0.0


def evaluate_model(model: GroundingModel, samples, grid=metrics.DEFAULT_GRID,
                   top_n: int = 5):
    """Read-only pass over a split: per-sample top-n inference, then the
    recall breakdown. Returns (MetricsReport, prediction records)."""
    records = []
    for s in samples:
        records.append({"id": s.sample_id, "rare": s.rare, "gt": s.gt,
                        "predictions": model.predict(s, top_n)})
    report = metrics.breakdown([r["predictions"] for r in records],
                               [r["gt"] for r in records],
                               [r["rare"] for r in records], grid)
    return report, records


def _split_loss(model: GroundingModel, samples) -> float:
    total = 0.0
    with no_grad():
        for s in samples:
            loss, _ = model.loss(s, training=False)
            total += loss.item()
    return total / max(len(samples), 1)


def train_model(model: GroundingModel, corpus: Corpus, cfg: RunConfig,
                log=None, shuffle_rng: np.random.Generator | None = None,
                adam: Adam | None = None, start_epoch: int = 0,
                checkpoint_dir=None) -> TrainResult:
    """Adam on the total loss; memory banks are written inside each training
    forward. Logs one line per epoch; non-finite losses abort with the
    offending batch identified."""
    train_split = corpus.split("train")
    val_split = corpus.split("val")
    if not train_split:
        raise ValueError("train_model: corpus has no training split")
    adam = adam or Adam(model.params(), cfg.learning_rate, cfg.beta1,
                        cfg.beta2, cfg.adam_eps)
    rng = shuffle_rng if shuffle_rng is not None \
        else np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
    result = TrainResult()
    started = time.perf_counter()
    for epoch in range(start_epoch, cfg.epochs):
        order = rng.permutation(len(train_split))
        epoch_loss = 0.0
        for batch_no, lo in enumerate(range(0, len(order), cfg.batch_size)):
            batch = order[lo:lo + cfg.batch_size]
            adam.zero_grad()
            batch_loss = 0.0
            for idx in batch:
                loss, _ = model.loss(train_split[idx], training=True)
                value = loss.item()
                if not np.isfinite(value):
                    raise FloatingPointError(
                        f"non-finite loss at epoch {epoch} batch {batch_no} "
                        f"sample id {train_split[idx].sample_id}")
                loss.backward()
                batch_loss += value
            adam.step(grad_scale=1.0 / len(batch))
            epoch_loss += batch_loss
        epoch_loss /= len(order)
        if val_split:
            val_loss = _split_loss(model, val_split)
            report, _ = evaluate_model(model, val_split, grid=((1, 0.5),),
                                       top_n=cfg.top_n)
            val_r1 = report.recalls[(1, 0.5)]["overall"]
        else:
            val_loss, val_r1 = float("nan"), float("nan")
        result.loss_curve.append((epoch, epoch_loss, val_loss, val_r1))
        if log:
            log(f"epoch {epoch:3d}  train {epoch_loss:.4f}  val {val_loss:.4f}  "
                f"R@1/0.5 {val_r1:.2f}")
        if val_split and val_r1 > result.best_val_recall:
            result.best_val_recall = val_r1
            result.best_epoch = epoch
            if checkpoint_dir is not None:
                save_checkpoint(f"{checkpoint_dir}/best.ckpt.npz", model, adam,
                                epoch + 1, rng, cfg)
    result.wall_seconds = time.perf_counter() - started
    if checkpoint_dir is not None:
        save_checkpoint(f"{checkpoint_dir}/last.ckpt.npz", model, adam,
                        cfg.epochs, rng, cfg)
    return result


def write_loss_csv(path, result: TrainResult) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "val_recall_1_05"])
        for row in result.loss_curve:
            writer.writerow([row[0], f"{row[1]:.8f}", f"{row[2]:.8f}", f"{row[3]:.4f}"])


# -- checkpointing -------------------------------------------------------------

def save_checkpoint(path, model: GroundingModel, adam: Adam, epoch: int,
                    shuffle_rng: np.random.Generator, cfg: RunConfig) -> None:
    arrays = {}
    for name, p in model.params().items():
        arrays[f"param/{name}"] = p.values
        arrays[f"adam_m/{name}"] = adam.m[name]
        arrays[f"adam_v/{name}"] = adam.v[name]
    bank_meta = []
    for i, bank in enumerate(model.banks()):
        arrays[f"bank/{i}/slots"] = bank.slots
        bank_meta.append({"domain": bank.domain, "seed": bank.seed,
                          "write_count": bank.write_count})
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": json.loads(cfg.to_json()),
        "epoch": epoch,
        "adam_t": adam.t,
        "rng_state": _encode_rng(shuffle_rng),
        "banks": bank_meta,
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(),
                                   dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path):
    """Rebuild (model, adam, epoch, shuffle_rng, run_config) from a file."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta['version']}")
        cfg = RunConfig(**meta["config"])
        model = GroundingModel(cfg.model_config())
        params = model.params()
        adam = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
        adam.t = meta["adam_t"]
        for name, p in params.items():
            p.values[...] = data[f"param/{name}"]
            adam.m[name] = data[f"adam_m/{name}"].copy()
            adam.v[name] = data[f"adam_v/{name}"].copy()
        for i, (bank, bmeta) in enumerate(zip(model.banks(), meta["banks"])):
            bank.slots = data[f"bank/{i}/slots"].copy()
            bank.write_count = bmeta["write_count"]
    rng = _decode_rng(meta["rng_state"])
    return model, adam, meta["epoch"], rng, cfg


def _encode_rng(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=int))


def _decode_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    fixed = dict(state)
    fixed["state"] = {k: int(v) for k, v in state["state"].items()}
    rng.bit_generator.state = fixed
    return rng
