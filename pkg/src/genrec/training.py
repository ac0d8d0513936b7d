"""Sampled-softmax multi-branch losses and the pre-training / fine-tuning loops."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import PAD, Catalog, LogTable, SftSet, Splits, events_at, pretrain_cuts, windows
from .errors import ConfigurationError, DataError, NumericalError
from .masking import condition_columns, truncation_columns
from .model import Model, ModelConfig, pretrain_masks
from .tensor import AdamState, Tape, Tensor

log = logging.getLogger(__name__)

ABLATIONS = ("nip", "mip", "tamip")


@dataclass
class TrainConfig:
    batch_size: int = 256
    lr_pretrain: float = 5e-4
    lr_sft: float = 1e-5
    weight_decay: float = 1e-6
    pretrain_steps: int = 500
    sft_steps: int = 200
    delta_tau: float = 900.0
    seed: int = 0
    condition_family: str = "genre"
    freeze_backbone: bool = False
    ablation: str = "tamip"

    def __post_init__(self):
        if not self.lr_sft < self.lr_pretrain:
            raise ConfigurationError(f"lr_sft ({self.lr_sft}) must be below lr_pretrain ({self.lr_pretrain})")
        if self.ablation not in ABLATIONS:
            raise ConfigurationError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.delta_tau < 0:
            raise ConfigurationError("delta_tau must be >= 0")


@dataclass
class Batch:
    items: np.ndarray       # (B, n) context item ids, PAD on the left
    ts: np.ndarray          # (B, n) seconds, -inf on padding
    targets: np.ndarray     # (B, K) item ids i_{n+1..n+K}; (B, 1) for fine-tuning
    tau: np.ndarray         # (B,) timestamp of the first target
    condition: np.ndarray | None = None  # (B,) fine-tuning condition ids
    categories: np.ndarray | None = None  # (B, n) condition-family value per context position


# -- losses -----------------------------------------------------------------

def sampled_softmax_loss(h: Tensor, target_emb: Tensor, negative_embs, target_id=None, negative_ids=None) -> Tensor:
    """-log softmax of <h, target> against {target} + negatives.

    Negatives whose id equals ``target_id`` are dropped first when ids are given.
    """
    negs = list(negative_embs)
    if negative_ids is not None and target_id is not None:
        negs = [e for e, i in zip(negs, negative_ids) if i != target_id]
    if not negs:
        raise DataError("no negatives left after removing accidental hits")
    h = T.reshape(h, (1, -1)) if h.ndim == 1 else h
    cands = T.concat([T.reshape(target_emb, (1, -1))] + [T.reshape(e, (1, -1)) for e in negs], axis=0)
    s = T.matmul(h, T.transpose(cands, (1, 0)))  # (1, 1 + |N|)
    pos = T.take(T.reshape(s, (-1,)), np.array(0))
    return T.logsumexp(T.reshape(s, (-1,)), axis=-1) - pos


def in_batch_loss(h: Tensor, targets, candidate_ids, candidate_embs: Tensor):
    """Per-example sampled softmax over the shared candidate set.

    ``candidate_ids`` are the sorted unique target ids of the batch, so each
    example's negatives are all candidates except its own target: accidental
    hits are removed by construction. Returns (mean loss, per-example losses).
    """
    B = h.shape[0]
    U = len(candidate_ids)
    if U < 2:
        raise DataError("in-batch negative set is empty after removing the target")
    s = T.matmul(h, T.transpose(candidate_embs, (1, 0)))  # (B, U)
    t = np.searchsorted(candidate_ids, targets)
    picked = T.take(T.reshape(s, (B * U,)), np.arange(B) * U + t)
    per = T.logsumexp(s, axis=-1) - picked
    return T.mean(per), per


def candidate_set(model: Model, targets):
    ids = np.unique(np.asarray(targets))
    return ids, model.item_embeddings(ids)


# -- batches ------------------------------------------------------------------

def make_pretrain_batch(logs: LogTable, users, cuts, num_targets: int, max_len: int) -> Batch:
    items, ts = windows(logs, users, cuts, max_len)
    tgt = np.stack([events_at(logs, users, cuts + j)[0] for j in range(num_targets)], axis=1)
    tau = events_at(logs, users, cuts)[1]
    return Batch(items, ts, tgt, tau)


def make_sft_batch(logs: LogTable, catalog: Catalog, users, cuts, conditions, family, max_len) -> Batch:
    items, ts = windows(logs, users, cuts, max_len)
    tgt, tau = events_at(logs, users, cuts)
    return Batch(items, ts, tgt[:, None], tau, condition=np.asarray(conditions),
                 categories=catalog.category_of(items, family))


# -- forward passes -----------------------------------------------------------

def pretrain_heads(model: Model, batch: Batch, delta_tau: float, temporal: bool):
    """Branch outputs h^(k) for k = 1..K under the shared causal (+temporal) masks."""
    blocked, row = pretrain_masks(batch.items, batch.ts, batch.tau, delta_tau, temporal)
    H = model.encode(batch.items, blocked)
    return [model.branch_forward(H, k, row) for k in range(1, model.config.num_branches + 1)]


def sft_row_mask(batch: Batch, k: int):
    """Branch-k key mask for fine-tuning: padding + condition-sparse + truncation(k)."""
    n = batch.items.shape[1]
    pad = batch.items == PAD
    real = (~pad).sum(axis=1)
    # truncation counts positions of the real (unpadded) history
    start = n - real
    j = np.arange(n)[None, :]
    trunc = (j - start[:, None]) > (real[:, None] - k)
    return pad | condition_columns(batch.categories, batch.condition) | trunc


def sft_heads(model: Model, batch: Batch, delta_tau: float, temporal: bool):
    blocked, _ = pretrain_masks(batch.items, batch.ts, batch.tau, delta_tau, temporal)
    H = model.encode(batch.items, blocked)
    out = []
    for k in range(1, model.config.num_branches + 1):
        out.append(model.branch_forward(H, k, sft_row_mask(batch, k), condition=batch.condition))
    return out


def pretrain_loss(model: Model, batch: Batch, delta_tau: float, temporal: bool):
    heads = pretrain_heads(model, batch, delta_tau, temporal)
    ids, embs = candidate_set(model, batch.targets)
    head_losses = [in_batch_loss(h, batch.targets[:, k], ids, embs)[0] for k, h in enumerate(heads)]
    total = head_losses[0]
    for l in head_losses[1:]:
        total = total + l
    return total, head_losses


def sft_loss(model: Model, batch: Batch, delta_tau: float, temporal: bool):
    heads = sft_heads(model, batch, delta_tau, temporal)
    ids, embs = candidate_set(model, batch.targets)
    head_losses = [in_batch_loss(h, batch.targets[:, 0], ids, embs)[0] for h in heads]
    total = head_losses[0]
    for l in head_losses[1:]:
        total = total + l
    return total, head_losses


def _step(model, loss_fn, names, state, batch_id):
    params = [model.params[n] for n in names]
    with Tape() as tape:
        total, heads = loss_fn()
    value = float(total.data)
    if not np.isfinite(value):
        raise NumericalError(f"non-finite loss at batch {batch_id}", where=batch_id)
    grads = tape.backward(total, params)
    T.adam_step(model.params, {n: grads[p] for n, p in zip(names, params)}, state)
    return value, [float(h.data) for h in heads]


def pretrain_step(model, batch, state, delta_tau, temporal, batch_id=0):
    return _step(model, lambda: pretrain_loss(model, batch, delta_tau, temporal),
                 list(model.params), state, batch_id)


def sft_step(model, batch, state, delta_tau, temporal, names=None, batch_id=0):
    names = list(model.params) if names is None else names
    return _step(model, lambda: sft_loss(model, batch, delta_tau, temporal), names, state, batch_id)


# -- stages -------------------------------------------------------------------

def variant_settings(ablation: str, num_branches: int):
    """(K, temporal) for an ablation: nip -> (1, off), mip -> (K, off), tamip -> (K, on)."""
    if ablation == "nip":
        return 1, False
    if ablation == "mip":
        return num_branches, False
    if ablation == "tamip":
        return num_branches, True
    raise ConfigurationError(f"unknown ablation {ablation!r}")


@dataclass
class StageResult:
    model: Model
    losses: list = field(default_factory=list)  # rows (step, loss, head losses...)
    meta: dict = field(default_factory=dict)


def train_pretrain(logs: LogTable, catalog: Catalog, splits: Splits, model_cfg: ModelConfig,
                   cfg: TrainConfig, horizon_cap: int | None = None, progress=None) -> StageResult:
    K, temporal = variant_settings(cfg.ablation, model_cfg.num_branches)
    # the same cut set for every ablation so variants see identical examples
    users, cuts = pretrain_cuts(splits, horizon_cap or model_cfg.num_branches)
    model_cfg = replace(model_cfg, num_branches=K)
    model = Model(model_cfg, catalog, seed=cfg.seed)
    if len(users) == 0:
        raise DataError("no pre-training examples; logs too short for the split")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x707274]))
    state = AdamState(lr=cfg.lr_pretrain, weight_decay=cfg.weight_decay)
    losses = []
    for step in range(1, cfg.pretrain_steps + 1):
        pick = rng.integers(0, len(users), size=cfg.batch_size)
        batch = make_pretrain_batch(logs, users[pick], cuts[pick], K, model_cfg.max_seq_len)
        total, heads = pretrain_step(model, batch, state, cfg.delta_tau, temporal, batch_id=step)
        losses.append([step, total] + heads)
        if progress:
            progress(step, total)
    meta = {"stage": "pretrain", "ablation": cfg.ablation, "temporal": temporal,
            "delta_tau": cfg.delta_tau, "train": asdict(cfg)}
    return StageResult(model, losses, meta)


def train_sft(model: Model, meta: dict, logs: LogTable, catalog: Catalog, sft: SftSet,
              cfg: TrainConfig, progress=None) -> StageResult:
    if len(sft) == 0:
        raise DataError("empty fine-tuning set")
    temporal = bool(meta.get("temporal", False))
    delta_tau = float(meta.get("delta_tau", cfg.delta_tau))
    names = list(model.params)
    if cfg.freeze_backbone:
        names = [n for n in names if n not in set(model.backbone_names())]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x736674]))
    state = AdamState(lr=cfg.lr_sft, weight_decay=cfg.weight_decay)
    losses = []
    for step in range(1, cfg.sft_steps + 1):
        pick = rng.integers(0, len(sft), size=cfg.batch_size)
        batch = make_sft_batch(logs, catalog, sft.users[pick], sft.cuts[pick], sft.conditions[pick],
                               sft.family, model.config.max_seq_len)
        total, heads = sft_step(model, batch, state, delta_tau, temporal, names=names, batch_id=step)
        losses.append([step, total] + heads)
        if progress:
            progress(step, total)
    new_meta = dict(meta)
    new_meta.update({"stage": "sft", "condition_family": sft.family, "sft": asdict(cfg),
                     "sft_skipped": sft.skipped})
    return StageResult(model, losses, new_meta)


def write_loss_csv(path, rows, num_heads: int) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "loss"] + [f"head_{k}" for k in range(1, num_heads + 1)])
        for r in rows:
            w.writerow([r[0]] + [repr(float(x)) for x in r[1:]])
