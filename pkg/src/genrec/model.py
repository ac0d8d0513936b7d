"""Generative retrieval transformer: fused item embeddings, a shared backbone and K branch layers.

Shapes: B batch, n sequence length, d model width, h heads.

The backbone runs ``num_backbone_layers`` pre-norm transformer layers over the
whole sequence. Each branch is one more pre-norm layer with its own
parameters, but it is evaluated only at a single query row per example, so a
branch is split in two: :meth:`Model.branch_context` projects keys/values from
the backbone output (condition independent, cacheable) and
:meth:`Model.branch_query` runs the query row under a per-example key mask.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .data import PAD, Catalog
from .errors import ConfigurationError
from .masking import causal_blocked, last_open
from .tensor import Tensor

CHECKPOINT_MAGIC = b"GENREC-CKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    num_backbone_layers: int = 3
    num_heads: int = 2
    num_branches: int = 2
    hash_buckets: int = 4096
    num_genres: int = 20
    num_languages: int = 5
    num_release: int = 2
    max_seq_len: int = 50
    null_token: bool = True
    condition_embedding: bool = True
    condition_family: str = "genre"
    num_conditions: int = 20
    rel_buckets: int = 16
    rel_max_distance: int = 64
    init_std: float = 0.02

    def __post_init__(self):
        if self.d % self.num_heads:
            raise ConfigurationError(f"d={self.d} is not divisible by num_heads={self.num_heads}")
        if self.d % 8:
            raise ConfigurationError(f"d={self.d} must be a multiple of 8")
        if self.num_branches < 1:
            raise ConfigurationError("num_branches must be >= 1")
        if self.hash_buckets < 1:
            raise ConfigurationError("hash_buckets must be >= 1")

    @property
    def d_id(self):
        return self.d // 2

    @property
    def d_cat(self):
        return self.d // 8

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in raw.items() if k in names})


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count.

    embeddings: hash*d/2 + (genres + languages + release)*d/8, fusion (d/2 + 3d/8)*d + d,
    relative bias buckets*heads, each backbone/branch layer 12d^2 + 9d (+2d null key/value),
    condition table conditions*d.
    """
    d = cfg.d
    emb = cfg.hash_buckets * cfg.d_id + (cfg.num_genres + cfg.num_languages + cfg.num_release) * cfg.d_cat
    fuse = (cfg.d_id + 3 * cfg.d_cat) * d + d
    layer = 12 * d * d + 9 * d + (2 * d if cfg.null_token else 0)
    cond = cfg.num_conditions * d if cfg.condition_embedding else 0
    return emb + fuse + cfg.rel_buckets * cfg.num_heads + (cfg.num_backbone_layers + cfg.num_branches) * layer + cond


def hash_bucket(item_ids, buckets: int) -> np.ndarray:
    """Multiplicative hash of item ids into ``buckets`` rows; distinct ids may collide."""
    x = np.asarray(item_ids, dtype=np.uint64)
    x = (x * np.uint64(0x9E3779B97F4A7C15)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    x ^= x >> np.uint64(29)
    return (x % np.uint64(buckets)).astype(np.int64)


def relative_buckets(distance, num_buckets: int, max_distance: int) -> np.ndarray:
    """Log-spaced buckets for non-negative query-key distances (negative distances clamp to 0)."""
    dist = np.maximum(np.asarray(distance), 0)
    exact = num_buckets // 2
    safe = np.maximum(dist, 1)
    logb = exact + (np.log(safe / exact) / math.log(max_distance / exact) * (num_buckets - exact)).astype(np.int64)
    logb = np.minimum(logb, num_buckets - 1)
    return np.where(dist < exact, dist, logb).astype(np.int64)


def _layer_names(prefix):
    return [f"{prefix}.{n}" for n in ("ln1.g", "ln1.b", "wq", "wk", "wv", "wo", "ln2.g", "ln2.b",
                                       "ff1.w", "ff1.b", "ff2.w", "ff2.b")]


class Model:
    def __init__(self, config: ModelConfig, catalog: Catalog, seed: int = 0):
        self.config = config
        self.catalog = catalog
        self.frozen = False
        self.degenerate_rows = 0
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6D6F64]))
        c = config
        std = c.init_std

        def add(name, shape, kind="normal"):
            if kind == "ones":
                data = np.ones(shape)
            elif kind == "zeros":
                data = np.zeros(shape)
            else:
                data = rng.normal(0.0, std, size=shape)
            self.params[name] = Tensor(data, requires_grad=True, name=name)

        add("emb.id", (c.hash_buckets, c.d_id))
        add("emb.genre", (c.num_genres, c.d_cat))
        add("emb.language", (c.num_languages, c.d_cat))
        add("emb.release", (c.num_release, c.d_cat))
        add("fuse.w", (c.d_id + 3 * c.d_cat, c.d))
        add("fuse.b", (c.d,), "zeros")
        add("rel_bias", (c.rel_buckets, c.num_heads), "zeros")
        prefixes = [f"backbone.{i}" for i in range(c.num_backbone_layers)]
        prefixes += [f"branch.{k}" for k in range(1, c.num_branches + 1)]
        for p in prefixes:
            for name in _layer_names(p):
                tail = name.rsplit(".", 2)[-2:]
                if tail[-1] == "g":
                    add(name, (c.d,), "ones")
                elif tail[-1] == "b":
                    size = 4 * c.d if tail[0] == "ff1" else c.d
                    add(name, (size,), "zeros")
                elif tail[0] == "ff1":
                    add(name, (c.d, 4 * c.d))
                elif tail[0] == "ff2":
                    add(name, (4 * c.d, c.d))
                else:
                    add(name, (c.d, c.d))
            if c.null_token:
                add(f"{p}.null_k", (c.d,))
                add(f"{p}.null_v", (c.d,))
        if c.condition_embedding:
            add("cond", (c.num_conditions, c.d))

    # -- parameters --------------------------------------------------------

    def p(self, name) -> Tensor:
        return self.params[name]

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def backbone_names(self):
        return [n for n in self.params if not n.startswith("branch.") and n != "cond"]

    def freeze(self):
        """Mark read-only; parameters stop requiring gradients."""
        self.frozen = True
        for t in self.params.values():
            t.requires_grad = False
            t.data.setflags(write=False)
        return self

    def fingerprint(self) -> str:
        h = hashlib.sha256(json.dumps(asdict(self.config), sort_keys=True).encode())
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    # -- embeddings --------------------------------------------------------

    def item_embeddings(self, item_ids) -> Tensor:
        """Fused embeddings for an integer array of item ids (any shape); PAD maps to id 0."""
        ids = np.asarray(item_ids, dtype=np.int64)
        real = np.where(ids == PAD, self.catalog.ids[0], ids)
        rows = self.catalog.rows(real)
        c = self.config
        parts = [
            T.take(self.p("emb.id"), hash_bucket(real, c.hash_buckets)),
            T.take(self.p("emb.genre"), self.catalog.genre[rows]),
            T.take(self.p("emb.language"), self.catalog.language[rows]),
            T.take(self.p("emb.release"), self.catalog.release[rows]),
        ]
        x = T.concat(parts, axis=-1)
        return T.matmul(x, self.p("fuse.w")) + self.p("fuse.b")

    def fuse_item_embedding(self, item) -> Tensor:
        return self.item_embeddings(np.array([item.item_id]))

    # -- attention pieces ----------------------------------------------------

    def _heads(self, x, B, n):
        h = self.config.num_heads
        return T.transpose(T.reshape(x, (B, n, h, self.config.d // h)), (0, 2, 1, 3))

    def _rel_bias(self, distance):
        """Relative-position bias for an integer distance array (..., ) -> Tensor (..., h)."""
        c = self.config
        return T.take(self.p("rel_bias"), relative_buckets(distance, c.rel_buckets, c.rel_max_distance))

    def _attend(self, prefix, q, k, v, bias, blocked, B):
        """q (B,h,nq,dh), k/v (B,h,n,dh), bias (…,h,nq,n) broadcastable, blocked (B,1,nq,n)."""
        c = self.config
        h, dh = c.num_heads, c.d // c.num_heads
        logits = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh)) + bias
        if c.null_token:
            nk = T.reshape(self.p(f"{prefix}.null_k"), (h, dh, 1))
            null_logit = T.scale(T.matmul(q, nk), 1.0 / math.sqrt(dh))
            logits = T.concat([logits, null_logit], axis=-1)
            blocked = np.concatenate([blocked, np.zeros(blocked.shape[:-1] + (1,), dtype=bool)], axis=-1)
            nv = T.broadcast_to(T.reshape(self.p(f"{prefix}.null_v"), (1, h, 1, dh)), (B, h, 1, dh))
            v = T.concat([v, nv], axis=2)
        w = T.softmax_masked(logits, blocked)
        return T.matmul(w, v), w.degenerate

    def _ffn(self, prefix, x):
        hdn = T.gelu(T.matmul(x, self.p(f"{prefix}.ff1.w")) + self.p(f"{prefix}.ff1.b"))
        return T.matmul(hdn, self.p(f"{prefix}.ff2.w")) + self.p(f"{prefix}.ff2.b")

    def _ln(self, prefix, which, x):
        return T.layer_norm(x, self.p(f"{prefix}.{which}.g"), self.p(f"{prefix}.{which}.b"))

    def _merge(self, o, B, n):
        return T.reshape(T.transpose(o, (0, 2, 1, 3)), (B, n, self.config.d))

    # -- forward -------------------------------------------------------------

    def encode(self, items, blocked) -> Tensor:
        """Backbone hidden states (B, n, d) for item ids (B, n) under key mask ``blocked``.

        ``blocked`` is (n, n) or (B, n, n) booleans; it must already contain the
        causal source. Rows whose only keys are blocked attend to the null
        token, or come back zero (counted in ``degenerate_rows``) without one.
        """
        items = np.asarray(items)
        B, n = items.shape
        if n > self.config.max_seq_len:
            raise ConfigurationError(f"sequence length {n} exceeds max_seq_len {self.config.max_seq_len}")
        blocked = np.broadcast_to(np.asarray(blocked, dtype=bool), (B, n, n))[:, None]
        real_rows = items != PAD
        x = self.item_embeddings(items)
        pos = np.arange(n)
        bias = T.transpose(self._rel_bias(pos[:, None] - pos[None, :]), (2, 0, 1))
        for i in range(self.config.num_backbone_layers):
            pre = f"backbone.{i}"
            a = self._ln(pre, "ln1", x)
            q = self._heads(T.matmul(a, self.p(f"{pre}.wq")), B, n)
            k = self._heads(T.matmul(a, self.p(f"{pre}.wk")), B, n)
            v = self._heads(T.matmul(a, self.p(f"{pre}.wv")), B, n)
            o, degenerate = self._attend(pre, q, k, v, bias, blocked, B)
            self._count_degenerate(degenerate[:, 0] & real_rows)
            x = x + T.matmul(self._merge(o, B, n), self.p(f"{pre}.wo"))
            x = x + self._ffn(pre, self._ln(pre, "ln2", x))
        return x

    def _count_degenerate(self, rows):
        if not self.config.null_token:
            self.degenerate_rows += int(np.count_nonzero(rows))

    def branch_context(self, H: Tensor, k: int):
        """Keys and values of branch ``k`` over backbone output H (B, n, d)."""
        self._check_branch(k)
        B, n, _ = H.shape
        pre = f"branch.{k}"
        a = self._ln(pre, "ln1", H)
        keys = self._heads(T.matmul(a, self.p(f"{pre}.wk")), B, n)
        values = self._heads(T.matmul(a, self.p(f"{pre}.wv")), B, n)
        return keys, values

    def branch_query(self, H: Tensor, context, k: int, row_blocked, qpos=None, condition=None) -> Tensor:
        """Branch ``k`` output (B, d) at one query row per example.

        ``row_blocked`` (B, n) marks keys hidden from the query beyond the causal
        constraint. ``qpos`` defaults to the last open key; -1 means nothing is
        open, in which case the query starts from the zero vector (plus the
        condition embedding) and can only see the null token.
        """
        self._check_branch(k)
        c = self.config
        B, n, d = H.shape
        row_blocked = np.asarray(row_blocked, dtype=bool)
        if qpos is None:
            qpos = last_open(row_blocked)
        qpos = np.asarray(qpos, dtype=np.int64)
        keys, values = context
        pre = f"branch.{k}"
        rows = T.take(T.reshape(H, (B * n, d)), np.arange(B) * n + np.maximum(qpos, 0))
        xq = rows * (qpos >= 0).astype(np.float64)[:, None]
        if condition is not None:
            if not c.condition_embedding:
                raise ConfigurationError("model has no condition embedding table")
            xq = xq + T.take(self.p("cond"), np.asarray(condition, dtype=np.int64))
        a = self._ln(pre, "ln1", xq)
        q = T.reshape(T.matmul(a, self.p(f"{pre}.wq")), (B, c.num_heads, 1, d // c.num_heads))
        j = np.arange(n)
        blocked = row_blocked | (j[None, :] > qpos[:, None])
        bias = T.transpose(self._rel_bias(qpos[:, None] - j[None, :]), (0, 2, 1))
        bias = T.reshape(bias, (B, c.num_heads, 1, n))
        o, degenerate = self._attend(pre, q, keys, values, bias, blocked[:, None, None, :], B)
        self._count_degenerate(degenerate[:, 0, 0])
        y = xq + T.matmul(T.reshape(o, (B, d)), self.p(f"{pre}.wo"))
        return y + self._ffn(pre, self._ln(pre, "ln2", y))

    def branch_forward(self, H: Tensor, k: int, row_blocked, qpos=None, condition=None) -> Tensor:
        return self.branch_query(H, self.branch_context(H, k), k, row_blocked, qpos, condition)

    def _check_branch(self, k):
        if not 1 <= k <= self.config.num_branches:
            raise ConfigurationError(f"branch index {k} outside 1..{self.config.num_branches}")

    # -- checkpoints ---------------------------------------------------------

    def save(self, path, meta: dict | None = None) -> None:
        """Header line of JSON (version, config, meta, parameter table) then raw float64 data."""
        names = sorted(self.params)
        table = [{"name": nm, "shape": list(self.params[nm].shape)} for nm in names]
        header = {
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "meta": meta or {},
            "params": table,
        }
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC + b"\n")
            f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            for nm in names:
                f.write(np.ascontiguousarray(self.params[nm].data, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path, catalog: Catalog, expect: ModelConfig | None = None):
        """Returns (model, meta). Rejects a version or config mismatch."""
        with open(path, "rb") as f:
            if f.readline().rstrip(b"\n") != CHECKPOINT_MAGIC:
                raise ConfigurationError(f"{path}: not a checkpoint file")
            header = json.loads(f.readline())
            if header.get("version") != CHECKPOINT_VERSION:
                raise ConfigurationError(f"{path}: unsupported checkpoint version {header.get('version')}")
            config = ModelConfig.from_dict(header["config"])
            if expect is not None and expect != config:
                raise ConfigurationError(f"{path}: checkpoint config {config} does not match {expect}")
            model = cls(config, catalog)
            if sorted(model.params) != [e["name"] for e in header["params"]]:
                raise ConfigurationError(f"{path}: parameter set does not match config")
            for entry in header["params"]:
                shape = tuple(entry["shape"])
                size = int(np.prod(shape))
                buf = f.read(8 * size)
                if len(buf) != 8 * size:
                    raise ConfigurationError(f"{path}: truncated at parameter {entry['name']}")
                model.params[entry["name"]].data = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
        return model, header["meta"]


def score(h, item_embedding) -> float:
    """Inner-product relevance of a query vector and an item embedding."""
    a = np.asarray(h.data if isinstance(h, Tensor) else h, dtype=np.float64).reshape(-1)
    b = np.asarray(item_embedding.data if isinstance(item_embedding, Tensor) else item_embedding,
                   dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ConfigurationError(f"score needs equal dims, got {a.shape} and {b.shape}")
    return float(a @ b)


def pretrain_masks(items, ts, tau, delta_tau, temporal: bool):
    """Backbone key mask (B, n, n) and branch row mask (B, n) for pre-training.

    Causal + padding always; the temporal window [tau - delta_tau, tau] when ``temporal``.
    """
    from .masking import temporal_columns

    items = np.asarray(items)
    B, n = items.shape
    cols = items == PAD
    if temporal:
        cols = cols | temporal_columns(ts, tau, delta_tau)
    blocked = causal_blocked(n)[None] | cols[:, None, :]
    return blocked, cols
