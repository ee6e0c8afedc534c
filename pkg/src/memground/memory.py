"""Persistent dual-domain external memory.

Each domain (video, query) keeps a bank of slots that survives across
training batches. Per position, the two features of an aligned pair are
projected into write keys / write values / erase values and applied as
two sequential erase-then-add updates; reads address the bank by
softmaxed cosine similarity and return a convex combination of slots.

Gradient policy: step-boundary truncation. The slot state a training
step starts from is a constant (no gradient into the history of earlier
samples or batches), but the current sample's write chain is on the
tape, so write keys, write values, and erase values all learn from how
they change the sample's own reads. Without that signal the write maps
stay random, every write lands near-uniformly, and the slots provably
collapse into one shared direction. Evaluation reads are differentiable
through the read keys only. update() rebinds the slot array instead of
mutating it, so tensors that captured an earlier state stay valid.

Snapshot byte layout (little-endian, version 1):
    bytes 0-7    magic b"MEMBANK1"
    bytes 8-11   uint32 domain tag (0 = video, 1 = query)
    bytes 12-15  uint32 L (slot count)
    bytes 16-19  uint32 D (slot width)
    bytes 20-27  uint64 write_count
    bytes 28-35  uint64 init seed
    bytes 36-    L*D float64 slot values, row-major
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DegenerateVectorWarning, Tensor
from .encoders import uniform_init

_MAGIC = b"MEMBANK1"
_DOMAIN_TAGS = {"video": 0, "query": 1}
_TAG_DOMAINS = {v: k for k, v in _DOMAIN_TAGS.items()}


class EvaluationModeError(RuntimeError):
    """A write was attempted while the memory is in evaluation mode."""


class MemoryBank:
    """L x D slot matrix for one domain, mutated only through update()."""

    def __init__(self, n_slots: int, dim: int, domain: str, seed: int):
        if domain not in _DOMAIN_TAGS:
            raise ValueError(f"unknown memory domain {domain!r}")
        self.domain = domain
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        bound = 1.0 / math.sqrt(dim)
        self.slots = rng.uniform(-bound, bound, size=(n_slots, dim))
        self.write_count = 0
        self.skipped_updates = 0
        self._geometry_for = None  # identity key for the norm cache

    @property
    def n_slots(self) -> int:
        return self.slots.shape[0]

    @property
    def dim(self) -> int:
        return self.slots.shape[1]

    def geometry(self):
        """(norms L x 1, degenerate mask, unit rows) of the current slots.

        Cached per slot array; update() rebinds slots rather than mutating,
        so array identity keys the cache safely. Addressing and reads both
        need these, several times per position.
        """
        if self._geometry_for is not self.slots:
            norms = np.linalg.norm(self.slots, axis=1, keepdims=True)
            bad = norms < ad.EPS_NORM
            units = np.where(bad, 0.0, self.slots / np.where(bad, 1.0, norms))
            self._geometry_for = self.slots
            self._geometry = (norms, bad, units)
        return self._geometry


def addressing(key: np.ndarray, bank: MemoryBank) -> np.ndarray:
    """Softmax over cosine similarities of the key against every slot.

    A key without a direction (norm below threshold) cannot prefer any
    slot; it gets uniform weights and a warning.
    """
    key = np.asarray(key, dtype=np.float64).ravel()
    if key.shape[0] != bank.dim:
        raise ad.ShapeError(f"addressing: key width {key.shape[0]} vs bank dim {bank.dim}")
    knorm = float(np.sqrt(key @ key))
    if knorm < ad.EPS_NORM:
        warnings.warn("addressing: degenerate key, uniform weights",
                      DegenerateVectorWarning)
        return np.full(bank.n_slots, 1.0 / bank.n_slots)
    _, _, unit_slots = bank.geometry()
    sims = unit_slots @ (key / knorm)
    np.clip(sims, -1.0, 1.0, out=sims)
    e = np.exp(sims - sims.max())
    return e / e.sum()


def update(bank: MemoryBank, weights: np.ndarray, value: np.ndarray,
           erase: np.ndarray) -> None:
    """One erase-then-add step: slot_l <- w_l * u + slot_l * (1 - w_l * e).

    Non-finite inputs skip the update and bump a counter rather than
    poisoning the bank. Rebinds bank.slots (no in-place mutation).
    """
    value = np.asarray(value, dtype=np.float64).ravel()
    erase = np.asarray(erase, dtype=np.float64).ravel()
    weights = np.asarray(weights, dtype=np.float64).ravel()
    if not (np.isfinite(value).all() and np.isfinite(erase).all()):
        bank.skipped_updates += 1
        return
    w = weights[:, None]
    bank.slots = w * value[None, :] + bank.slots * (1.0 - w * erase[None, :])
    bank.write_count += 1


@dataclass
class RoleMaps:
    """Linear maps turning one feature role into its four memory items."""
    read_key_w: Tensor
    read_key_b: Tensor
    write_key_w: Tensor
    write_key_b: Tensor
    erase_w: Tensor
    erase_b: Tensor
    value_w: Tensor
    value_b: Tensor

    @classmethod
    def build(cls, rng: np.random.Generator, dim: int):
        """Key and value biases start at zero so key directions and stored
        content track the features rather than a shared random offset."""
        maps = {}
        for role in ("read_key", "write_key", "erase", "value"):
            maps[f"{role}_w"] = uniform_init(rng, dim, dim, dim)
            maps[f"{role}_b"] = uniform_init(rng, 1, dim, dim)
        maps["read_key_b"].values[...] = 0.0
        maps["write_key_b"].values[...] = 0.0
        maps["value_b"].values[...] = 0.0
        return cls(**maps)

    def read_keys(self, x: Tensor) -> Tensor:
        """Differentiable read keys for every row of x."""
        return x @ self.read_key_w + self.read_key_b

    def write_items(self, x_values: np.ndarray):
        """(write keys, write values, erase values) for every row, off-tape.

        The erase values go through a sigmoid so they stay in (0, 1);
        keys and values are plain linear outputs.
        """
        keys = x_values @ self.write_key_w.values + self.write_key_b.values
        values = x_values @ self.value_w.values + self.value_b.values
        raw = x_values @ self.erase_w.values + self.erase_b.values
        return keys, values, ad.sigmoid_values(raw)

    def write_items_tape(self, x: Tensor):
        """Same three items on the tape, for the in-step differentiable writes."""
        keys = x @ self.write_key_w + self.write_key_b
        values = x @ self.value_w + self.value_b
        erase = ad.sigmoid(x @ self.erase_w + self.erase_b)
        return keys, values, erase


@dataclass
class MemoryProjections:
    frame: RoleMaps          # v_t, native video feature
    frame_partner: RoleMaps  # aligned textual feature of frame t
    word: RoleMaps           # q_n, native query feature
    word_partner: RoleMaps   # aligned visual feature of word n

    @classmethod
    def build(cls, rng: np.random.Generator, dim: int):
        return cls(*(RoleMaps.build(rng, dim) for _ in range(4)))


def write_pair_video(bank: MemoryBank, partner_values: np.ndarray,
                     native_values: np.ndarray, proj: MemoryProjections,
                     training: bool = True) -> None:
    """Video-domain double update for one frame: native feature first.

    Addressing for the second update is recomputed against the bank state
    the first update produced.
    """
    if not training:
        raise EvaluationModeError("memory write outside training mode")
    k, u, e = proj.frame.write_items(native_values.reshape(1, -1))
    update(bank, addressing(k[0], bank), u[0], e[0])
    k, u, e = proj.frame_partner.write_items(partner_values.reshape(1, -1))
    update(bank, addressing(k[0], bank), u[0], e[0])


def write_pair_query(bank: MemoryBank, partner_values: np.ndarray,
                     native_values: np.ndarray, proj: MemoryProjections,
                     training: bool = True) -> None:
    """Query-domain double update for one word: native feature first."""
    if not training:
        raise EvaluationModeError("memory write outside training mode")
    k, u, e = proj.word.write_items(native_values.reshape(1, -1))
    update(bank, addressing(k[0], bank), u[0], e[0])
    k, u, e = proj.word_partner.write_items(partner_values.reshape(1, -1))
    update(bank, addressing(k[0], bank), u[0], e[0])


class _CosineWeights:
    """Forward cosine-softmax of one key row against a slot matrix, plus the
    chain rule back to both. Mirrors addressing() expression for expression
    so the persistent-state oracle and the differentiable path agree."""

    def __init__(self, key_vals: np.ndarray, m_vals: np.ndarray):
        self.key = key_vals.ravel()
        self.m = m_vals
        self.knorm = float(np.sqrt(self.key @ self.key))
        self.key_bad = self.knorm < ad.EPS_NORM
        norms = np.linalg.norm(m_vals, axis=1, keepdims=True)
        self.slot_bad = norms < ad.EPS_NORM
        self.norms = np.where(self.slot_bad, 1.0, norms)
        self.units = np.where(self.slot_bad, 0.0, m_vals / self.norms)
        if self.key_bad:
            warnings.warn("memory write/read: degenerate key, uniform weights",
                          DegenerateVectorWarning)
            self.raw = np.zeros(m_vals.shape[0])
            self.weights = np.full(m_vals.shape[0], 1.0 / m_vals.shape[0])
            self.cos = self.raw
            return
        self.raw = self.units @ (self.key / self.knorm)
        self.cos = np.clip(self.raw, -1.0, 1.0)
        e = np.exp(self.cos - self.cos.max())
        self.weights = e / e.sum()

    def backward(self, d_weights: np.ndarray):
        """(d_key, d_slots) for a gradient arriving at the weights."""
        if self.key_bad:
            return np.zeros_like(self.key), np.zeros_like(self.m)
        w = self.weights
        d_cos = w * (d_weights - (d_weights * w).sum())
        d_cos = d_cos * ((self.raw > -1.0) & (self.raw < 1.0))
        d_key = d_cos @ self.units / self.knorm \
            - self.key * ((d_cos * self.cos).sum() / (self.knorm * self.knorm))
        khat = self.key / self.knorm
        scale = (d_cos / self.norms.ravel())
        d_slots = np.outer(scale, khat) \
            - ((d_cos * self.cos) / (self.norms.ravel() ** 2))[:, None] * self.m
        d_slots[self.slot_bad.ravel()] = 0.0
        return d_key, d_slots


def update_step(key: Tensor, value: Tensor, erase: Tensor, slots: Tensor) -> Tensor:
    """One differentiable erase-then-add update inside a training step.

    Same arithmetic as update(), but on the tape: gradients reach the
    write key (through the addressing weights), the write value, the
    erase value, and the incoming slot state of this step.
    """
    cw = _CosineWeights(key.values, slots.values)
    w = cw.weights[:, None]
    u = value.values.ravel()
    e = erase.values.ravel()
    out = Tensor(w * u[None, :] + slots.values * (1.0 - w * e[None, :]))

    def backward():
        g = out.grad
        if value.requires_grad:
            value.grad += (cw.weights @ g).reshape(1, -1)
        gm = g * slots.values
        if erase.requires_grad:
            erase.grad -= (cw.weights @ gm).reshape(1, -1)
        d_weights = g @ u - gm @ e
        d_key, d_slots = cw.backward(d_weights)
        if key.requires_grad:
            key.grad += d_key.reshape(1, -1)
        if slots.requires_grad:
            slots.grad += g * (1.0 - w * e[None, :]) + d_slots

    ad.record(out, (key, value, erase, slots), backward)
    return out


def read_step(key: Tensor, slots: Tensor) -> Tensor:
    """Differentiable read against the in-step slot state: gradients reach
    the key and, through both the weights and the combination, the slots."""
    cw = _CosineWeights(key.values, slots.values)
    out = Tensor((cw.weights @ slots.values).reshape(1, -1))

    def backward():
        g = out.grad.ravel()
        d_weights = slots.values @ g
        d_key, d_slots = cw.backward(d_weights)
        if key.requires_grad:
            key.grad += d_key.reshape(1, -1)
        if slots.requires_grad:
            slots.grad += np.outer(cw.weights, g) + d_slots

    ad.record(out, (key, slots), backward)
    return out


def read(bank: MemoryBank, key: Tensor) -> Tensor:
    """Convex combination of slots addressed by cosine-softmax weights.

    Accepts one key per row; differentiable with respect to the keys only
    (the slots are constants of the step). Fused into a single tape op:
    reads run once per position per role, so op overhead matters here.
    """
    slots = bank.slots
    if key.cols != slots.shape[1]:
        raise ad.ShapeError(f"read: key width {key.cols} vs bank dim {slots.shape[1]}")
    key_norm = np.sqrt((key.values * key.values).sum(axis=1, keepdims=True))
    _, slot_bad, unit_slots = bank.geometry()
    key_bad = key_norm < ad.EPS_NORM
    if key_bad.any() or slot_bad.any():
        warnings.warn("read: degenerate vector, similarity set to 0",
                      DegenerateVectorWarning)
    safe_key = np.where(key_bad, 1.0, key_norm)
    cos = (key.values / safe_key) @ unit_slots.T
    if key_bad.any():
        cos[key_bad[:, 0], :] = 0.0
    np.clip(cos, -1.0, 1.0, out=cos)
    shifted = np.exp(cos - cos.max(axis=1, keepdims=True))
    weights = shifted / shifted.sum(axis=1, keepdims=True)
    out = Tensor(weights @ slots)

    def backward():
        if key.requires_grad:
            d_w = out.grad @ slots.T
            d_cos = weights * (d_w - (d_w * weights).sum(axis=1, keepdims=True))
            d_key = d_cos @ unit_slots / safe_key \
                - key.values * ((d_cos * cos).sum(axis=1, keepdims=True)
                                / (safe_key * safe_key))
            if key_bad.any():
                d_key[key_bad[:, 0], :] = 0.0
            key.grad += d_key

    ad.record(out, (key,), backward)
    return out


class DomainMemory:
    """One domain's memory: a single shared bank, or one bank per input role."""

    def __init__(self, n_slots: int, dim: int, domain: str, seed: int,
                 shared: bool = True):
        self.shared = shared
        self.native_bank = MemoryBank(n_slots, dim, domain, seed)
        self.partner_bank = self.native_bank if shared \
            else MemoryBank(n_slots, dim, domain, seed + 1)

    def banks(self) -> list[MemoryBank]:
        return [self.native_bank] if self.shared \
            else [self.native_bank, self.partner_bank]


def _train_sequence(dm: DomainMemory, native_write, partner_write,
                    native_read_keys: Tensor, partner_read_keys: Tensor):
    """Per-position write-then-read over one domain, on the tape.

    Each position applies the native update, then the partner update
    (against the state the native update produced when the bank is
    shared), then reads both roles against the post-write state. The
    final state is committed to the persistent bank, detached.
    """
    steps = native_read_keys.rows
    m_native = Tensor(dm.native_bank.slots)
    m_partner = m_native if dm.shared else Tensor(dm.partner_bank.slots)
    native_rows, partner_rows = [], []
    nk, nu, ne = native_write
    pk, pu, pe = partner_write
    for t in range(steps):
        m_native = update_step(ad.slice_rows(nk, t, t + 1),
                               ad.slice_rows(nu, t, t + 1),
                               ad.slice_rows(ne, t, t + 1), m_native)
        target = m_native if dm.shared else m_partner
        m_partner = update_step(ad.slice_rows(pk, t, t + 1),
                                ad.slice_rows(pu, t, t + 1),
                                ad.slice_rows(pe, t, t + 1), target)
        if dm.shared:
            m_native = m_partner
        native_rows.append(read_step(
            ad.slice_rows(native_read_keys, t, t + 1), m_native))
        partner_rows.append(read_step(
            ad.slice_rows(partner_read_keys, t, t + 1), m_partner))
    dm.native_bank.slots = m_native.values.copy()
    dm.native_bank.write_count += 2 * steps if dm.shared else steps
    if not dm.shared:
        dm.partner_bank.slots = m_partner.values.copy()
        dm.partner_bank.write_count += steps
    return ad.concat_rows(native_rows), ad.concat_rows(partner_rows)


def enhance(q_hat: Tensor, v: Tensor, v_hat: Tensor, q: Tensor,
            video_mem: DomainMemory, query_mem: DomainMemory,
            proj: MemoryProjections, training: bool):
    """Memory-enhanced features for both domains.

    Training mode: ascending frame positions are written then read, then
    ascending word positions; the sample's own write chain stays on the
    tape and the resulting state persists (detached) in the banks.
    Evaluation mode: reads only, the banks are untouched.

    Returns (q_hat', v', v_hat', q'), all shaped like their inputs.
    """
    for x, mem in ((v, video_mem), (q, query_mem)):
        if x.cols != mem.native_bank.dim:
            raise ad.ShapeError(
                f"enhance: feature width {x.cols} vs bank dim {mem.native_bank.dim}")
    v_keys = proj.frame.read_keys(v)
    qh_keys = proj.frame_partner.read_keys(q_hat)
    q_keys = proj.word.read_keys(q)
    vh_keys = proj.word_partner.read_keys(v_hat)
    if training:
        v_prime, q_hat_prime = _train_sequence(
            video_mem, proj.frame.write_items_tape(v),
            proj.frame_partner.write_items_tape(q_hat), v_keys, qh_keys)
        q_prime, v_hat_prime = _train_sequence(
            query_mem, proj.word.write_items_tape(q),
            proj.word_partner.write_items_tape(v_hat), q_keys, vh_keys)
    else:
        v_prime = read(video_mem.native_bank, v_keys)
        q_hat_prime = read(video_mem.partner_bank, qh_keys)
        q_prime = read(query_mem.native_bank, q_keys)
        v_hat_prime = read(query_mem.partner_bank, vh_keys)
    return q_hat_prime, v_prime, v_hat_prime, q_prime


# -- snapshot io ------------------------------------------------------------

def save_bank(path, bank: MemoryBank) -> None:
    header = struct.pack("<8sIIIQQ", _MAGIC, _DOMAIN_TAGS[bank.domain],
                         bank.n_slots, bank.dim, bank.write_count, bank.seed)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(bank.slots, dtype="<f8").tobytes())


def load_bank(path) -> MemoryBank:
    with open(path, "rb") as fh:
        header = fh.read(struct.calcsize("<8sIIIQQ"))
        magic, tag, n_slots, dim, write_count, seed = struct.unpack("<8sIIIQQ", header)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a memory snapshot (magic {magic!r})")
        payload = fh.read(n_slots * dim * 8)
    bank = MemoryBank(n_slots, dim, _TAG_DOMAINS[tag], seed)
    bank.slots = np.frombuffer(payload, dtype="<f8").reshape(n_slots, dim).copy()
    bank.write_count = write_count
    return bank
