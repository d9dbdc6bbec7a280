"""Object encoder, object decoder, prediction heads and prototype memory.

All forward functions are batched over a leading video axis ``B``:
frame-query tokens are ``B x M x d``, queries and prototypes ``B x N_q x d``.
Blocks are pre-norm with no final norm, so zeroed output projections make
every block the identity on its input.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError
from .numerics import ParamStore, Tensor

MEMORY_MODES = ("index_wise", "global")


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 32
    num_queries: int = 8
    num_classes: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 64
    num_heads: int = 1
    memory_enabled: bool = True
    memory_mode: str = "index_wise"
    memory_capacity: int | None = None
    init_seed: int = 0

    def validate(self) -> "ModelConfig":
        if self.memory_mode not in MEMORY_MODES:
            raise ConfigError(f"memory_mode must be one of {MEMORY_MODES}, got {self.memory_mode!r}")
        if min(self.dim, self.num_queries, self.num_classes, self.ffn_dim) < 1:
            raise ConfigError("model sizes must be positive")
        if self.enc_layers < 0 or self.dec_layers < 0:
            raise ConfigError("layer counts must be non-negative")
        if self.num_heads < 1 or self.dim % self.num_heads:
            raise ConfigError(f"num_heads must divide dim, got {self.num_heads} for dim {self.dim}")
        if self.memory_capacity is not None and self.memory_capacity < 1:
            raise ConfigError("memory_capacity must be >= 1 when set")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        if set(d) - known:
            raise ConfigError(f"unknown model keys: {sorted(set(d) - known)}")
        return cls(**d)


@dataclass
class QuerySet:
    embeddings: Tensor  # B x N_q x d
    clip_index: int


@dataclass
class PrototypeSet:
    embeddings: Tensor  # B x N_q x d
    clip_index: int


@dataclass
class ClipPrediction:
    class_logits: Tensor  # B x N_q x (C+1); last column is "no object"
    mask_logits: Tensor  # B x N_q x (N_f*G*G)
    clip_len: int
    grid: int

    def mask_grid(self, b: int = 0) -> np.ndarray:
        """``N_q x N_f x G x G`` mask logits of one batch element."""
        n_q = self.mask_logits.shape[1]
        return self.mask_logits.data[b].reshape(n_q, self.clip_len, self.grid, self.grid)


@dataclass
class PrototypeMemory:
    """Per-index prototype history; one entry per processed clip, oldest first."""

    capacity: int | None = None
    entries: list[Tensor] = field(default_factory=list)  # each B x N_q x d

    def append(self, p: Tensor):
        self.entries.append(p)
        if self.capacity is not None and len(self.entries) > self.capacity:
            del self.entries[0]

    def __len__(self) -> int:
        return len(self.entries)

    def history(self, j: int, b: int = 0) -> np.ndarray:
        return np.stack([e.data[b, j] for e in self.entries]) if self.entries else np.zeros((0,))


def _ln(store: ParamStore, prefix: str, d: int):
    store.add(f"{prefix}.g", np.ones(d))
    store.add(f"{prefix}.b", np.zeros(d))


def _attn(store: ParamStore, rng, prefix: str, d: int):
    s = 1.0 / math.sqrt(d)
    for w in ("wq", "wk", "wv", "wo"):
        store.add(f"{prefix}.{w}", rng.normal(0.0, s, (d, d)))
    store.add(f"{prefix}.bo", np.zeros(d))


def _ffn(store: ParamStore, rng, prefix: str, d: int, f: int):
    store.add(f"{prefix}.w1", rng.normal(0.0, 1.0 / math.sqrt(d), (d, f)))
    store.add(f"{prefix}.b1", np.zeros(f))
    store.add(f"{prefix}.w2", rng.normal(0.0, 1.0 / math.sqrt(f), (f, d)))
    store.add(f"{prefix}.b2", np.zeros(d))


def init_params(cfg: ModelConfig) -> ParamStore:
    cfg.validate()
    rng = np.random.default_rng(cfg.init_seed)
    d, s = cfg.dim, ParamStore()
    s.add("queries.init", rng.normal(0.0, 1.0, (cfg.num_queries, d)))
    for l in range(cfg.enc_layers):
        p = f"enc.{l}"
        _ln(s, f"{p}.ln_attn", d)
        _attn(s, rng, f"{p}.attn", d)
        _ln(s, f"{p}.ln_ffn", d)
        _ffn(s, rng, f"{p}.ffn", d, cfg.ffn_dim)
    for l in range(cfg.dec_layers):
        p = f"dec.{l}"
        _ln(s, f"{p}.ln_cross_q", d)
        _ln(s, f"{p}.ln_cross_kv", d)
        _attn(s, rng, f"{p}.cross", d)
        _ln(s, f"{p}.ln_self", d)
        _attn(s, rng, f"{p}.self", d)
        _ln(s, f"{p}.ln_ffn", d)
        _ffn(s, rng, f"{p}.ffn", d, cfg.ffn_dim)
    _ln(s, "head.ln", d)
    s.add("head.cls.w", rng.normal(0.0, 1.0 / math.sqrt(d), (d, cfg.num_classes + 1)))
    s.add("head.cls.b", np.zeros(cfg.num_classes + 1))
    s.add("head.mask.w", rng.normal(0.0, 1.0 / math.sqrt(d), (d, d)))
    s.add("head.mask.b", np.zeros(d))
    s.add("head.mask.bias", np.zeros(()))
    for w in ("wq", "wk", "wv", "wo"):
        s.add(f"mem.{w}", rng.normal(0.0, 1.0 / math.sqrt(d), (d, d)))
    return s


def attention(store: ParamStore, prefix: str, xq: Tensor, xkv: Tensor, heads: int = 1) -> Tensor:
    """Scaled dot-product attention; heads split the projected width into equal slices."""
    d = xq.shape[-1]
    dh = d // heads
    q = xq @ store[f"{prefix}.wq"]
    k = xkv @ store[f"{prefix}.wk"]
    v = xkv @ store[f"{prefix}.wv"]
    if heads == 1:
        out = nx.softmax_rows(nx.scale(q @ nx.transpose(k), 1.0 / math.sqrt(d))) @ v
    else:
        parts = []
        for h in range(heads):
            cut = (Ellipsis, slice(h * dh, (h + 1) * dh))
            qh, kh, vh = nx.take(q, cut), nx.take(k, cut), nx.take(v, cut)
            parts.append(nx.softmax_rows(nx.scale(qh @ nx.transpose(kh), 1.0 / math.sqrt(dh))) @ vh)
        out = nx.concat(parts, axis=-1)
    return out @ store[f"{prefix}.wo"] + store[f"{prefix}.bo"]


def _norm(store, prefix, x):
    return nx.layer_norm(x, store[f"{prefix}.g"], store[f"{prefix}.b"])


def feed_forward(store: ParamStore, prefix: str, x: Tensor) -> Tensor:
    h = nx.relu(x @ store[f"{prefix}.w1"] + store[f"{prefix}.b1"])
    return h @ store[f"{prefix}.w2"] + store[f"{prefix}.b2"]


class ClipModel:
    """Learnable components bound to a parameter store."""

    def __init__(self, cfg: ModelConfig, params: ParamStore | None = None):
        self.cfg = cfg.validate()
        self.params = params if params is not None else init_params(cfg)

    def _check_dim(self, x: Tensor, what: str):
        if x.shape[-1] != self.cfg.dim:
            raise ConfigError(f"{what} has feature size {x.shape[-1]}, model expects {self.cfg.dim}")

    def initial_queries(self, batch: int) -> QuerySet:
        q0 = self.params["queries.init"]
        return QuerySet(nx.add(np.zeros((batch,) + q0.shape), q0), 0)

    def encode_objects(self, tokens) -> Tensor:
        """Global self-attention over the flattened frame-query tokens of a clip."""
        x = nx.as_tensor(tokens)
        self._check_dim(x, "frame queries")
        s = self.params
        for l in range(self.cfg.enc_layers):
            p = f"enc.{l}"
            h = _norm(s, f"{p}.ln_attn", x)
            x = x + attention(s, f"{p}.attn", h, h, self.cfg.num_heads)
            x = x + feed_forward(s, f"{p}.ffn", _norm(s, f"{p}.ln_ffn", x))
        return x

    def decode_prototypes(self, q: QuerySet, encoded: Tensor, layers_out: list | None = None) -> PrototypeSet:
        """Run the decoder; intermediate layer outputs are appended to ``layers_out`` if given."""
        x = q.embeddings
        self._check_dim(x, "queries")
        if x.shape[-2] != self.cfg.num_queries:
            raise ConfigError(f"got {x.shape[-2]} queries, model has {self.cfg.num_queries}")
        s = self.params
        for l in range(self.cfg.dec_layers):
            p = f"dec.{l}"
            kv = _norm(s, f"{p}.ln_cross_kv", encoded)
            x = x + attention(s, f"{p}.cross", _norm(s, f"{p}.ln_cross_q", x), kv,
                              self.cfg.num_heads)
            h = _norm(s, f"{p}.ln_self", x)
            x = x + attention(s, f"{p}.self", h, h, self.cfg.num_heads)
            x = x + feed_forward(s, f"{p}.ffn", _norm(s, f"{p}.ln_ffn", x))
            if layers_out is not None and l < self.cfg.dec_layers - 1:
                layers_out.append(x)
        return PrototypeSet(x, q.clip_index)

    def predict_heads(self, p: PrototypeSet, features: np.ndarray) -> ClipPrediction:
        """Class logits and per-cell mask logits for a ``B x N_f x G x G x d`` feature batch."""
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 5 or feats.shape[-1] != self.cfg.dim:
            raise ConfigError(f"features must be B x N_f x G x G x {self.cfg.dim}, got {feats.shape}")
        s = self.params
        h = _norm(s, "head.ln", p.embeddings)
        cls = h @ s["head.cls.w"] + s["head.cls.b"]
        emb = h @ s["head.mask.w"] + s["head.mask.b"]
        b, n_f, g = feats.shape[0], feats.shape[1], feats.shape[2]
        ft = np.ascontiguousarray(feats.reshape(b, n_f * g * g, -1).transpose(0, 2, 1))
        mask = emb @ Tensor(ft) + s["head.mask.bias"]
        return ClipPrediction(cls, mask, n_f, g)

    def memory_readout(self, q: Tensor, mem: PrototypeMemory, mode: str | None = None) -> Tensor:
        """Cross-attend from the queries into stored prototypes.

        ``index_wise``: query j only sees the history of index j.
        ``global``: every query sees every stored prototype.
        Empty memory reads as zero.
        """
        mode = mode or self.cfg.memory_mode
        if mode not in MEMORY_MODES:
            raise ConfigError(f"unknown memory mode {mode!r}")
        if len(mem) == 0:
            return Tensor(np.zeros(q.shape))
        s = self.params
        b, n, d = q.shape
        qp = q @ s["mem.wq"]
        if mode == "index_wise":
            hist = nx.concat([nx.reshape(e, (b, n, 1, d)) for e in mem.entries], axis=2)
            k = hist @ s["mem.wk"]
            v = hist @ s["mem.wv"]
            sc = nx.reshape(qp, (b, n, 1, d)) @ nx.transpose(k)
            a = nx.softmax_rows(nx.scale(sc, 1.0 / math.sqrt(d)))
            out = nx.reshape(a @ v, (b, n, d))
        else:
            hist = nx.concat(list(mem.entries), axis=1)
            k = hist @ s["mem.wk"]
            v = hist @ s["mem.wv"]
            a = nx.softmax_rows(nx.scale(qp @ nx.transpose(k), 1.0 / math.sqrt(d)))
            out = a @ v
        return out @ s["mem.wo"]


def propagate_queries(p_prev: PrototypeSet, z) -> QuerySet:
    """Next clip's queries: previous prototypes plus the memory readout."""
    return QuerySet(nx.add(p_prev.embeddings, z), p_prev.clip_index + 1)


class ClipChain:
    """Sequential clip processing shared verbatim by training and inference.

    ``step`` consumes one clip batch and returns its prototypes and
    predictions; the next queries are prepared from those prototypes.
    """

    def __init__(self, model: ClipModel, batch: int, memory_enabled: bool | None = None,
                 memory_mode: str | None = None, truncate: bool = False, aux: bool = False):
        self.model = model
        self.aux = aux
        self.aux_predictions: list[ClipPrediction] = []
        self.memory_enabled = model.cfg.memory_enabled if memory_enabled is None else memory_enabled
        self.memory_mode = memory_mode or model.cfg.memory_mode
        self.memory = PrototypeMemory(model.cfg.memory_capacity)
        self.truncate = truncate
        self.queries = model.initial_queries(batch)

    def step(self, frame_queries: np.ndarray, features: np.ndarray):
        """``frame_queries``: B x N_f x N_q_frame x d; ``features``: B x N_f x G x G x d."""
        fq = np.asarray(frame_queries, dtype=np.float64)
        b = fq.shape[0]
        tokens = Tensor(fq.reshape(b, -1, fq.shape[-1]))
        encoded = self.model.encode_objects(tokens)
        inner = [] if self.aux else None
        protos = self.model.decode_prototypes(self.queries, encoded, inner)
        pred = self.model.predict_heads(protos, features)
        # heads on intermediate decoder layers, for auxiliary supervision
        self.aux_predictions = [self.model.predict_heads(PrototypeSet(x, protos.clip_index), features)
                                for x in inner or []]
        self._advance(protos)
        return protos, pred

    def _advance(self, protos: PrototypeSet):
        p = protos
        if self.truncate:
            p = PrototypeSet(Tensor(protos.embeddings.data), protos.clip_index)
        if self.memory_enabled:
            self.memory.append(p.embeddings)
            z = self.model.memory_readout(p.embeddings, self.memory, self.memory_mode)
        else:
            z = Tensor(np.zeros(p.embeddings.shape))
        self.queries = propagate_queries(p, z)
