"""Toy autoregressive transformer decoder with a paged block KV-cache.

Architecture: token embedding -> L x (pre-RMSNorm -> attention -> residual,
optionally followed by pre-RMSNorm -> MLP -> residual) -> logits through the
tied embedding.  Attention supports MHA and GQA; queries and keys get the
split-half position rotation, values do not.  Greedy decoding only.

Weights and all forward math are float64; cache payloads are stored float32
and converted only at the block read/write boundary, mirroring production
caches.  Forward passes are pure apart from cache appends; distinct caches
can be used from distinct threads.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import container
from .errors import (
    CacheConsistencyError,
    ConfigError,
    DimensionError,
    InvalidTokenError,
)
from .linalg import apply_rotation

STATE_PLAINTEXT = "plaintext"
STATE_CLOAKED = "cloaked"
STATE_DP = "dp-noised"


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    hidden: int
    heads: int
    kv_heads: int
    head_dim: int
    vocab: int
    rope_base: float = 10000.0
    block_size: int = 16
    norm_eps: float = 1e-6
    mlp: bool = False

    def __post_init__(self):
        if self.layers < 1 or self.vocab < 1 or self.block_size < 1:
            raise ConfigError("layers, vocab, and block_size must be >= 1")
        if self.hidden != self.heads * self.head_dim:
            raise ConfigError(
                f"hidden ({self.hidden}) must equal heads*head_dim "
                f"({self.heads}*{self.head_dim})"
            )
        if self.kv_heads < 1 or self.heads % self.kv_heads != 0:
            raise ConfigError(
                f"heads ({self.heads}) must be a positive multiple of kv_heads ({self.kv_heads})"
            )
        if self.head_dim % 2 != 0:
            raise ConfigError(f"head_dim must be even for rotation pairing, got {self.head_dim}")

    @property
    def group_size(self) -> int:
        """Query heads per kv head (1 under MHA)."""
        return self.heads // self.kv_heads

    @property
    def kv_width(self) -> int:
        return self.kv_heads * self.head_dim

    def to_dict(self) -> dict:
        return {
            "layers": self.layers,
            "hidden": self.hidden,
            "heads": self.heads,
            "kv_heads": self.kv_heads,
            "head_dim": self.head_dim,
            "vocab": self.vocab,
            "rope_base": self.rope_base,
            "block_size": self.block_size,
            "norm_eps": self.norm_eps,
            "mlp": self.mlp,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


@dataclass
class LayerWeights:
    w_q: np.ndarray  # (D, D)
    w_k: np.ndarray  # (kv_width, D)
    w_v: np.ndarray  # (kv_width, D)
    w_o: np.ndarray  # (D, D)
    norm_gain: np.ndarray  # (D,)
    mlp_in: Optional[np.ndarray] = None  # (4D, D)
    mlp_out: Optional[np.ndarray] = None  # (D, 4D)
    mlp_norm_gain: Optional[np.ndarray] = None  # (D,)


@dataclass
class Weights:
    config: ModelConfig
    embedding: np.ndarray  # (V, D), also the tied unembedding
    layers: list

    def copy(self) -> "Weights":
        return copy.deepcopy(self)


def init_weights(config: ModelConfig, seed: int) -> Weights:
    """Gaussian init, every matrix entry ~ N(0, 1/hidden); gains start at 1."""
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(config.hidden)
    d, kvw = config.hidden, config.kv_width

    def mat(*shape):
        return rng.standard_normal(shape) * scale

    layers = []
    for _ in range(config.layers):
        lw = LayerWeights(
            w_q=mat(d, d),
            w_k=mat(kvw, d),
            w_v=mat(kvw, d),
            w_o=mat(d, d),
            norm_gain=np.ones(d),
        )
        if config.mlp:
            lw.mlp_in = mat(4 * d, d)
            lw.mlp_out = mat(d, 4 * d)
            lw.mlp_norm_gain = np.ones(d)
        layers.append(lw)
    return Weights(config=config, embedding=mat(config.vocab, d), layers=layers)


def perturb_weights(weights: Weights, rho: float, seed: int) -> Weights:
    """Seeded Gaussian perturbation of relative magnitude rho on every tensor.

    Stands in for the gap between a served fine-tune and its public base
    model.  Each tensor w becomes w + rho * rms(w) * noise.
    """
    if rho == 0.0:
        return weights.copy()
    rng = np.random.default_rng(seed)
    out = weights.copy()

    def jitter(w):
        rms = float(np.sqrt(np.mean(w * w)))
        return w + rho * rms * rng.standard_normal(w.shape)

    out.embedding = jitter(out.embedding)
    for lw in out.layers:
        lw.w_q = jitter(lw.w_q)
        lw.w_k = jitter(lw.w_k)
        lw.w_v = jitter(lw.w_v)
        lw.w_o = jitter(lw.w_o)
        lw.norm_gain = jitter(lw.norm_gain)
        if lw.mlp_in is not None:
            lw.mlp_in = jitter(lw.mlp_in)
            lw.mlp_out = jitter(lw.mlp_out)
            lw.mlp_norm_gain = jitter(lw.mlp_norm_gain)
    return out


# ---------------------------------------------------------------------------
# Paged KV cache
# ---------------------------------------------------------------------------


@dataclass
class KVBlock:
    layer: int
    head: int
    k: np.ndarray  # (block_size, head_dim) float32
    v: np.ndarray  # (block_size, head_dim) float32
    fill: int = 0
    state: str = STATE_PLAINTEXT


class PagedKVCache:
    """Per-(layer, kv-head) block lists plus a position -> (block, slot) table.

    The table is tracked per (layer, head) because de-obfuscation leaves each
    block's rows in an independently permuted order.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.seq_len = 0
        self.blocks = [
            [[] for _ in range(config.kv_heads)] for _ in range(config.layers)
        ]
        # table[layer][head] is a list of (block_id, slot) per position
        self.table = [
            [[] for _ in range(config.kv_heads)] for _ in range(config.layers)
        ]
        self.final_logits: Optional[np.ndarray] = None

    def append(self, layer: int, head: int, k_vec: np.ndarray, v_vec: np.ndarray) -> None:
        """Store one position's k/v for (layer, head) at the next free slot."""
        blocks = self.blocks[layer][head]
        b = self.config.block_size
        if not blocks or blocks[-1].fill >= b:
            blocks.append(
                KVBlock(
                    layer=layer,
                    head=head,
                    k=np.zeros((b, self.config.head_dim), dtype=np.float32),
                    v=np.zeros((b, self.config.head_dim), dtype=np.float32),
                )
            )
        blk = blocks[-1]
        slot = blk.fill
        blk.k[slot] = k_vec.astype(np.float32)
        blk.v[slot] = v_vec.astype(np.float32)
        blk.fill += 1
        self.table[layer][head].append((len(blocks) - 1, slot))

    def gather(self, layer: int, head: int, upto: int) -> tuple:
        """Float64 views of the first ``upto`` cached positions, table order."""
        tab = self.table[layer][head]
        if len(tab) < upto:
            raise CacheConsistencyError(
                f"cache holds {len(tab)} positions for layer {layer}, need {upto}"
            )
        blocks = self.blocks[layer][head]
        k = np.empty((upto, self.config.head_dim), dtype=np.float64)
        v = np.empty((upto, self.config.head_dim), dtype=np.float64)
        for pos in range(upto):
            bid, slot = tab[pos]
            k[pos] = blocks[bid].k[slot]
            v[pos] = blocks[bid].v[slot]
        return k, v

    def states(self) -> set:
        return {blk.state for hb in self.blocks for bl in hb for blk in bl}

    def block_count(self, layer: int, head: int) -> int:
        return len(self.blocks[layer][head])


@dataclass
class LayerBlocks:
    """One layer's cache as seen by an attacker: blocks plus the block table."""

    layer: int
    block_size: int
    seq_len: int
    blocks: list  # [kv_head][block_id] -> KVBlock
    table: list  # [kv_head][pos] -> (block_id, slot)

    def slice_at(self, pos: int) -> tuple:
        """(kv_heads, head_dim) float64 K and V slices for one position."""
        if not (0 <= pos < self.seq_len):
            raise DimensionError(f"position {pos} outside sequence of length {self.seq_len}")
        k = np.stack(
            [self.blocks[h][self.table[h][pos][0]].k[self.table[h][pos][1]] for h in range(len(self.blocks))]
        ).astype(np.float64)
        v = np.stack(
            [self.blocks[h][self.table[h][pos][0]].v[self.table[h][pos][1]] for h in range(len(self.blocks))]
        ).astype(np.float64)
        return k, v

    def states(self) -> set:
        return {blk.state for bl in self.blocks for blk in bl}


def extract_layer_kv(cache: PagedKVCache, layer: int) -> LayerBlocks:
    if not (0 <= layer < cache.config.layers):
        raise DimensionError(f"layer {layer} outside model with {cache.config.layers} layers")
    return LayerBlocks(
        layer=layer,
        block_size=cache.config.block_size,
        seq_len=cache.seq_len,
        blocks=cache.blocks[layer],
        table=cache.table[layer],
    )


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def rmsnorm(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x / rms * gain


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - np.max(scores, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def _project_qkv(config: ModelConfig, lw: LayerWeights, x: np.ndarray, pos) -> tuple:
    """Rotated q and k plus v for a batch of hidden rows at given positions.

    x: (B, D); pos: scalar or (B,) positions. Returns q (B, H, d),
    k (B, Hkv, d), v (B, Hkv, d).
    """
    b = x.shape[0]
    h, hkv, hd = config.heads, config.kv_heads, config.head_dim
    q = (x @ lw.w_q.T).reshape(b, h, hd)
    k = (x @ lw.w_k.T).reshape(b, hkv, hd)
    v = (x @ lw.w_v.T).reshape(b, hkv, hd)
    pos_arr = np.broadcast_to(np.asarray(pos, dtype=np.float64), (b,))
    # apply_rotation broadcasts pos over the head axis
    q = apply_rotation(q.transpose(1, 0, 2), pos_arr, config.rope_base).transpose(1, 0, 2)
    k = apply_rotation(k.transpose(1, 0, 2), pos_arr, config.rope_base).transpose(1, 0, 2)
    return q, k, v


def attention_step(
    config: ModelConfig,
    lw: LayerWeights,
    x: np.ndarray,
    pos: int,
    cached_k: np.ndarray,
    cached_v: np.ndarray,
) -> tuple:
    """Single-position attention against cached context.

    x: (D,) normalized layer input; cached_k/v: (kv_heads, pos, head_dim)
    holding every earlier position.  Returns (o, new_k, new_v) where o is the
    (D,) attention output after the output projection and new_k/new_v
    ((kv_heads, head_dim)) are this position's cache entries.
    """
    if cached_k.shape[1] != pos:
        raise CacheConsistencyError(
            f"cache holds {cached_k.shape[1]} positions, expected {pos}"
        )
    q, k_new, v_new = _project_qkv(config, lw, x[None, :], pos)
    q, k_new, v_new = q[0], k_new[0], v_new[0]
    d = config.head_dim
    out_heads = np.empty((config.heads, d))
    for h in range(config.heads):
        g = h // config.group_size
        keys = np.concatenate([cached_k[g], k_new[g][None, :]], axis=0)
        vals = np.concatenate([cached_v[g], v_new[g][None, :]], axis=0)
        attn = _softmax(q[h] @ keys.T / np.sqrt(d))
        out_heads[h] = attn @ vals
    o = out_heads.reshape(config.hidden) @ lw.w_o.T
    return o, k_new, v_new


def _layer_step_batch(
    config: ModelConfig,
    lw: LayerWeights,
    x: np.ndarray,
    pos: int,
    cached_k: np.ndarray,
    cached_v: np.ndarray,
) -> tuple:
    """Batched single-position attention: B independent candidates at ``pos``
    sharing the same cached prefix.  x: (B, D) normalized inputs."""
    bsz = x.shape[0]
    d = config.head_dim
    q, k_new, v_new = _project_qkv(config, lw, x, pos)
    out = np.empty((bsz, config.heads, d))
    for h in range(config.heads):
        g = h // config.group_size
        scores = q[:, h, :] @ cached_k[g].T / np.sqrt(d)  # (B, pos)
        self_score = np.einsum("bd,bd->b", q[:, h, :], k_new[:, g, :]) / np.sqrt(d)
        attn = _softmax(np.concatenate([scores, self_score[:, None]], axis=1))
        out[:, h, :] = attn[:, :-1] @ cached_v[g] + attn[:, -1:] * v_new[:, g, :]
    o = out.reshape(bsz, config.hidden) @ lw.w_o.T
    return o, k_new, v_new


def _mlp(lw: LayerWeights, config: ModelConfig, h: np.ndarray) -> np.ndarray:
    x = rmsnorm(h, lw.mlp_norm_gain, config.norm_eps)
    return _gelu(x @ lw.mlp_in.T) @ lw.mlp_out.T


def forward_full(
    weights: Weights, tokens, collect_norm_inputs: bool = False
) -> tuple:
    """Cache-free full forward pass over a token sequence.

    Vectorized over positions with an explicit causal mask; serves as the
    independent oracle for the incremental cache path.  Returns
    (logits (n, V), norm_inputs or None) where norm_inputs[l] is the (n, D)
    matrix of normalized attention inputs at layer l.
    """
    config = weights.config
    tokens = _check_tokens(config, tokens)
    n = len(tokens)
    d = config.head_dim
    h_res = weights.embedding[tokens].astype(np.float64)
    positions = np.arange(n)
    norm_inputs = [] if collect_norm_inputs else None
    causal = np.tril(np.ones((n, n), dtype=bool))
    for lw in weights.layers:
        x = rmsnorm(h_res, lw.norm_gain, config.norm_eps)
        if collect_norm_inputs:
            norm_inputs.append(x.copy())
        q = (x @ lw.w_q.T).reshape(n, config.heads, d)
        k = (x @ lw.w_k.T).reshape(n, config.kv_heads, d)
        v = (x @ lw.w_v.T).reshape(n, config.kv_heads, d)
        q = apply_rotation(q.transpose(1, 0, 2), positions, config.rope_base).transpose(1, 0, 2)
        k = apply_rotation(k.transpose(1, 0, 2), positions, config.rope_base).transpose(1, 0, 2)
        out = np.empty((n, config.heads, d))
        for head in range(config.heads):
            g = head // config.group_size
            scores = q[:, head, :] @ k[:, g, :].T / np.sqrt(d)
            scores = np.where(causal, scores, -np.inf)
            out[:, head, :] = _softmax(scores) @ v[:, g, :]
        h_res = h_res + out.reshape(n, config.hidden) @ lw.w_o.T
        if config.mlp:
            h_res = h_res + _mlp(lw, config, h_res)
    logits = h_res @ weights.embedding.T
    return logits, norm_inputs


def _check_tokens(config: ModelConfig, tokens) -> list:
    tokens = [int(t) for t in tokens]
    for t in tokens:
        if not (0 <= t < config.vocab):
            raise InvalidTokenError(f"token {t} outside vocabulary of size {config.vocab}")
    return tokens


def decode_step(weights: Weights, cache: PagedKVCache, token: int) -> np.ndarray:
    """Append one token through the cache and return next-token logits."""
    config = weights.config
    (token,) = _check_tokens(config, [token])
    pos = cache.seq_len
    h_res = weights.embedding[token].astype(np.float64)
    for layer, lw in enumerate(weights.layers):
        x = rmsnorm(h_res, lw.norm_gain, config.norm_eps)
        cached_k, cached_v = gather_layer_context(cache, layer, pos)
        o, k_new, v_new = attention_step(config, lw, x, pos, cached_k, cached_v)
        for g in range(config.kv_heads):
            cache.append(layer, g, k_new[g], v_new[g])
        h_res = h_res + o
        if config.mlp:
            h_res = h_res + _mlp(lw, config, h_res)
    cache.seq_len += 1
    logits = h_res @ weights.embedding.T
    cache.final_logits = logits
    return logits


def forward_prefill(weights: Weights, tokens) -> tuple:
    """Process a prompt, producing per-position logits and a filled cache."""
    config = weights.config
    tokens = _check_tokens(config, tokens)
    cache = PagedKVCache(config)
    logits = np.empty((len(tokens), config.vocab))
    for i, tok in enumerate(tokens):
        logits[i] = decode_step(weights, cache, tok)
    return logits, cache


def greedy_decode(weights: Weights, cache: PagedKVCache, first_logits: np.ndarray, max_new: int) -> list:
    """Greedy continuation from an existing cache; deterministic."""
    out = []
    logits = first_logits
    for _ in range(max_new):
        tok = int(np.argmax(logits))
        out.append(tok)
        logits = decode_step(weights, cache, tok)
    return out


def gather_layer_context(cache: PagedKVCache, layer: int, upto: int) -> tuple:
    """Stacked (kv_heads, upto, head_dim) float64 K and V for one layer."""
    pairs = [cache.gather(layer, g, upto) for g in range(cache.config.kv_heads)]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def candidate_hiddens(
    weights: Weights,
    cache: PagedKVCache,
    candidates: np.ndarray,
    upto_layer: int,
    context: Optional[list] = None,
) -> tuple:
    """Layer-``upto_layer`` k/v for a batch of candidate next tokens.

    Runs every candidate as position ``cache.seq_len`` against the shared
    (read-only) prefix cache, through layers 0..upto_layer.  ``context`` may
    hold pre-gathered per-layer (K, V) stacks to amortize cache reads across
    repeated calls.  Returns (k, v), each (B, kv_heads, head_dim).
    """
    config = weights.config
    pos = cache.seq_len
    h_res = weights.embedding[candidates].astype(np.float64)
    for layer in range(upto_layer + 1):
        lw = weights.layers[layer]
        x = rmsnorm(h_res, lw.norm_gain, config.norm_eps)
        if context is not None:
            cached_k, cached_v = context[layer]
        else:
            cached_k, cached_v = gather_layer_context(cache, layer, pos)
        o, k_new, v_new = _layer_step_batch(config, lw, x, pos, cached_k, cached_v)
        if layer == upto_layer:
            return k_new, v_new
        h_res = h_res + o
        if config.mlp:
            h_res = h_res + _mlp(lw, config, h_res)
    raise AssertionError("unreachable")


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def save_weights(path, weights: Weights) -> None:
    arrays = [("embedding", weights.embedding)]
    for i, lw in enumerate(weights.layers):
        arrays += [
            (f"layer{i}.w_q", lw.w_q),
            (f"layer{i}.w_k", lw.w_k),
            (f"layer{i}.w_v", lw.w_v),
            (f"layer{i}.w_o", lw.w_o),
            (f"layer{i}.norm_gain", lw.norm_gain),
        ]
        if lw.mlp_in is not None:
            arrays += [
                (f"layer{i}.mlp_in", lw.mlp_in),
                (f"layer{i}.mlp_out", lw.mlp_out),
                (f"layer{i}.mlp_norm_gain", lw.mlp_norm_gain),
            ]
    container.write_container(path, "weights", {"config": weights.config.to_dict()}, arrays)


def load_weights(path) -> Weights:
    meta, arrays = container.read_container(path, expect_kind="weights")
    config = ModelConfig.from_dict(meta["config"])
    layers = []
    for i in range(config.layers):
        layers.append(
            LayerWeights(
                w_q=arrays[f"layer{i}.w_q"],
                w_k=arrays[f"layer{i}.w_k"],
                w_v=arrays[f"layer{i}.w_v"],
                w_o=arrays[f"layer{i}.w_o"],
                norm_gain=arrays[f"layer{i}.norm_gain"],
                mlp_in=arrays.get(f"layer{i}.mlp_in"),
                mlp_out=arrays.get(f"layer{i}.mlp_out"),
                mlp_norm_gain=arrays.get(f"layer{i}.mlp_norm_gain"),
            )
        )
    return Weights(config=config, embedding=arrays["embedding"], layers=layers)


def save_cache(path, cache: PagedKVCache) -> None:
    config = cache.config
    arrays = []
    states = []
    fills = []
    tables = []
    for layer in range(config.layers):
        for head in range(config.kv_heads):
            for bid, blk in enumerate(cache.blocks[layer][head]):
                arrays.append((f"k.{layer}.{head}.{bid}", blk.k))
                arrays.append((f"v.{layer}.{head}.{bid}", blk.v))
                states.append(blk.state)
                fills.append(blk.fill)
            tables.append([list(e) for e in cache.table[layer][head]])
    meta = {
        "config": config.to_dict(),
        "seq_len": cache.seq_len,
        "states": states,
        "fills": fills,
        "tables": tables,
        "has_final_logits": cache.final_logits is not None,
    }
    if cache.final_logits is not None:
        arrays.append(("final_logits", cache.final_logits))
    container.write_container(path, "cache", meta, arrays)


def load_cache(path) -> PagedKVCache:
    meta, arrays = container.read_container(path, expect_kind="cache")
    config = ModelConfig.from_dict(meta["config"])
    cache = PagedKVCache(config)
    cache.seq_len = int(meta["seq_len"])
    idx = 0
    t_idx = 0
    for layer in range(config.layers):
        for head in range(config.kv_heads):
            bid = 0
            while f"k.{layer}.{head}.{bid}" in arrays:
                cache.blocks[layer][head].append(
                    KVBlock(
                        layer=layer,
                        head=head,
                        k=arrays[f"k.{layer}.{head}.{bid}"],
                        v=arrays[f"v.{layer}.{head}.{bid}"],
                        fill=int(meta["fills"][idx]),
                        state=meta["states"][idx],
                    )
                )
                idx += 1
                bid += 1
            cache.table[layer][head] = [tuple(e) for e in meta["tables"][t_idx]]
            t_idx += 1
    if meta.get("has_final_logits"):
        cache.final_logits = arrays["final_logits"]
    return cache
