"""Reversible block obfuscation for KV caches, with operator fusion.

Key generation, weight fusion, per-block obfuscation, outlier-guided
de-obfuscation, the chosen-plaintext break of the naive linear scheme, and
the multiplication-count model of the online overhead.

Scheme summary.  Two rotation-scaling matrices are folded into the
attention projections offline:

    w_q <- M1^-1 w_q,   w_k <- M1^T w_k,   w_v <- M2^T w_v,
    w_o <- w_o (M2^-1)^T   (per head)

M1 commutes with the position rotation, so attention scores and outputs
are unchanged while the cache itself holds k*M1 and v*M2.  Online, each
block is padded, masked with per-row identifier outliers, row-shuffled by
a one-time permutation, and mixed by a secret orthogonal matrix:

    K' = S P (K_fused + A)

P is never stored: de-obfuscation applies S^T, reads each row's original
index off its identifier column, and subtracts the mask, leaving rows in
shuffled order that attention can consume directly.

Magnitude budget: data stays below the calibrated theta, padding sits at
pad_value_factor*theta, identifiers within mask_range*theta, and rows are
classified with outlier_factor*theta between them, so the bands cannot
collide.  All key math is float64; block payloads stay float32.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import container
from .errors import (
    ConfigError,
    CorruptionError,
    DimensionError,
    KeyError_,
    ObfuscationStateError,
    OracleInconsistencyError,
)
from .linalg import (
    Permutation,
    RotationScalingKey,
    invert_key,
    make_commuting_key,
    materialize,
    sample_orthogonal,
    sample_permutation,
)
from .model import (
    STATE_CLOAKED,
    STATE_PLAINTEXT,
    KVBlock,
    ModelConfig,
    PagedKVCache,
    Weights,
)

DEFAULT_SCALE_BOUNDS = (0.5, 2.0)
DEFAULT_MASK_RANGE = (3.0, 4.0)
DEFAULT_OUTLIER_FACTOR = 2.0
DEFAULT_PAD_FACTOR = 1.5


@dataclass
class SecretMatrices:
    """Per-deployment (or per-layer) secret linear material."""

    s: np.ndarray  # (b, b) orthogonal
    m1: RotationScalingKey  # commutes with the position rotation
    m2: RotationScalingKey


@dataclass
class LayerKey:
    matrices: SecretMatrices
    a_k: np.ndarray  # (b, d) identifier mask for keys
    a_v: np.ndarray
    theta_k: float
    theta_v: float


@dataclass
class CloakKey:
    block_size: int
    head_dim: int
    seed: int
    layer_keys: list  # one entry (shared) or one per model layer
    per_layer: bool = False
    outlier_factor: float = DEFAULT_OUTLIER_FACTOR
    pad_value_factor: float = DEFAULT_PAD_FACTOR
    mask_range: tuple = DEFAULT_MASK_RANGE
    scale_bounds: tuple = DEFAULT_SCALE_BOUNDS

    def layer(self, layer_idx: int) -> LayerKey:
        return self.layer_keys[layer_idx if self.per_layer else 0]


def sample_matrices(
    config: ModelConfig,
    rng: np.random.Generator,
    per_layer: bool = False,
    scale_bounds: tuple = DEFAULT_SCALE_BOUNDS,
) -> list:
    """Draw the S/M1/M2 sets; keygen with the same seed reproduces them.

    Must be kept in sync with keygen's consumption order so that fusing can
    happen before theta calibration.
    """
    count = config.layers if per_layer else 1
    out = []
    for _ in range(count):
        out.append(
            SecretMatrices(
                s=sample_orthogonal(config.block_size, rng),
                m1=make_commuting_key(config.head_dim, rng, scale_bounds),
                m2=make_commuting_key(config.head_dim, rng, scale_bounds),
            )
        )
    return out


def _calibration_max(caches: Sequence[PagedKVCache], layer: Optional[int]) -> tuple:
    """Max |element| over filled rows, for K and V separately."""
    max_k = 0.0
    max_v = 0.0
    seen = False
    for cache in caches:
        layers = [layer] if layer is not None else range(cache.config.layers)
        for l in layers:
            for head_blocks in cache.blocks[l]:
                for blk in head_blocks:
                    if blk.fill == 0:
                        continue
                    seen = True
                    max_k = max(max_k, float(np.max(np.abs(blk.k[: blk.fill]))))
                    max_v = max(max_v, float(np.max(np.abs(blk.v[: blk.fill]))))
    if not seen:
        raise ConfigError("calibration cache set is empty")
    return max_k, max_v


def keygen(
    config: ModelConfig,
    calibration_caches: Sequence[PagedKVCache],
    rng_or_seed,
    per_layer: bool = False,
    scale_bounds: tuple = DEFAULT_SCALE_BOUNDS,
    mask_range: tuple = DEFAULT_MASK_RANGE,
    outlier_factor: float = DEFAULT_OUTLIER_FACTOR,
    pad_value_factor: float = DEFAULT_PAD_FACTOR,
) -> CloakKey:
    """Build a cloak key: secret matrices, calibrated thetas, identifier masks.

    The calibration caches must come from the fused model whose fusion used
    matrices drawn from the same seed (see ``sample_matrices``); theta is the
    maximum absolute element observed there, per cache type.  Row i of each
    mask carries its single identifier at column i, magnitude drawn from
    mask_range * theta, which requires block_size <= head_dim.
    """
    b, d = config.block_size, config.head_dim
    if b > d:
        raise ConfigError(
            f"per-row identifiers need block_size <= head_dim, got {b} > {d}"
        )
    if isinstance(rng_or_seed, np.random.Generator):
        rng = rng_or_seed
        seed = -1  # unknown; per-block streams fall back to this sentinel
    else:
        seed = int(rng_or_seed)
        rng = np.random.default_rng(seed)
    matrices = sample_matrices(config, rng, per_layer, scale_bounds)
    lo, hi = mask_range
    layer_keys = []
    for idx, mats in enumerate(matrices):
        theta_k, theta_v = _calibration_max(
            calibration_caches, idx if per_layer else None
        )
        if theta_k <= 0 or theta_v <= 0:
            raise ConfigError("calibration produced a zero magnitude bound")
        a_k = np.zeros((b, d))
        a_v = np.zeros((b, d))
        rows = np.arange(b)
        a_k[rows, rows] = rng.uniform(lo * theta_k, hi * theta_k, b)
        a_v[rows, rows] = rng.uniform(lo * theta_v, hi * theta_v, b)
        layer_keys.append(
            LayerKey(matrices=mats, a_k=a_k, a_v=a_v, theta_k=theta_k, theta_v=theta_v)
        )
    return CloakKey(
        block_size=b,
        head_dim=d,
        seed=seed,
        layer_keys=layer_keys,
        per_layer=per_layer,
        outlier_factor=outlier_factor,
        pad_value_factor=pad_value_factor,
        mask_range=(lo, hi),
        scale_bounds=scale_bounds,
    )


# ---------------------------------------------------------------------------
# Operator fusion
# ---------------------------------------------------------------------------


def fuse_weights(weights: Weights, matrices_or_key) -> Weights:
    """Fold the secret matrices into the attention projections, per head.

    The fused model computes identical logits while its cache holds the
    transformed k and v.  Uses the analytic inverse of the rotation-scaling
    keys, so no numeric inversion is involved.
    """
    if isinstance(matrices_or_key, CloakKey):
        getter = lambda l: matrices_or_key.layer(l).matrices
    elif isinstance(matrices_or_key, SecretMatrices):
        getter = lambda l: matrices_or_key
    else:
        mats_list = list(matrices_or_key)
        getter = lambda l: mats_list[l if len(mats_list) > 1 else 0]
    config = weights.config
    d = config.head_dim
    fused = weights.copy()
    for layer_idx, lw in enumerate(fused.layers):
        mats = getter(layer_idx)
        if mats.m1.dim != d or mats.m2.dim != d:
            raise KeyError_(
                f"key head_dim {mats.m1.dim} does not match model head_dim {d}"
            )
        m1 = materialize(mats.m1)
        m1_inv = materialize(invert_key(mats.m1))
        m2 = materialize(mats.m2)
        m2_inv = materialize(invert_key(mats.m2))
        for h in range(config.heads):
            rows = slice(h * d, (h + 1) * d)
            lw.w_q[rows] = m1_inv @ lw.w_q[rows]
            lw.w_o[:, rows] = lw.w_o[:, rows] @ m2_inv.T
        for g in range(config.kv_heads):
            rows = slice(g * d, (g + 1) * d)
            lw.w_k[rows] = m1.T @ lw.w_k[rows]
            lw.w_v[rows] = m2.T @ lw.w_v[rows]
    return fused


# ---------------------------------------------------------------------------
# Naive linear scheme and its chosen-plaintext break
# ---------------------------------------------------------------------------


def obfuscate_naive(k: np.ndarray, s: np.ndarray, m: np.ndarray) -> np.ndarray:
    """The broken baseline: K' = S K M with fixed secret S and M."""
    b, d = k.shape
    if s.shape != (b, b) or m.shape != (d, d):
        raise DimensionError(
            f"shape mismatch: K {k.shape}, S {s.shape}, M {m.shape}"
        )
    return s @ k @ m


def cpa_break_naive(
    oracle: Callable[[np.ndarray], np.ndarray], b: int, d: int
) -> tuple:
    """Recover (S, M) of K' = SKM up to one scalar from chosen plaintexts.

    Differential probing: each standard basis matrix E_pq maps to the rank-1
    outer product S[:, p] M[q, :].  A zero-plaintext query is subtracted
    from every response first, which cancels any fixed additive component
    and makes this the literal delta-K strategy.  The scale convention pins
    column 0 of the recovered S to unit norm.
    """
    base = oracle(np.zeros((b, d)))

    def probe(p, q):
        e = np.zeros((b, d))
        e[p, q] = 1.0
        return oracle(e) - base

    r00 = probe(0, 0)
    s0 = r00[:, int(np.argmax(np.abs(r00).sum(axis=0)))]
    norm = np.linalg.norm(s0)
    if norm == 0:
        raise OracleInconsistencyError("zero response to a basis plaintext")
    s_hat = np.zeros((b, b))
    m_hat = np.zeros((d, d))
    s_hat[:, 0] = s0 / norm
    m_hat[0] = s_hat[:, 0] @ r00
    m0_sq = float(m_hat[0] @ m_hat[0])
    if m0_sq == 0:
        raise OracleInconsistencyError("recovered first row of M is zero")
    for p in range(1, b):
        s_hat[:, p] = probe(p, 0) @ m_hat[0] / m0_sq
    for q in range(1, d):
        m_hat[q] = s_hat[:, 0] @ probe(0, q)
    return s_hat, m_hat


def make_naive_oracle(s: np.ndarray, m: np.ndarray) -> Callable:
    return lambda k: obfuscate_naive(k, s, m)


def make_full_scheme_oracle(key: CloakKey, layer: int, rng: np.random.Generator) -> Callable:
    """Chosen-plaintext view of the fused scheme: fresh one-time permutation
    per query, so responses share no stable algebraic relation."""
    lk = key.layer(layer)
    m1 = materialize(lk.matrices.m1)

    def oracle(k: np.ndarray) -> np.ndarray:
        p = sample_permutation(key.block_size, rng)
        return lk.matrices.s @ (k @ m1 + lk.a_k)[p.mapping]

    return oracle


# ---------------------------------------------------------------------------
# Block obfuscation
# ---------------------------------------------------------------------------


def _block_rng(key: CloakKey, blk: KVBlock, block_id: int, epoch: int) -> np.random.Generator:
    # deterministic per-block stream; safe under parallel obfuscation
    return np.random.default_rng(
        [key.seed & 0x7FFFFFFF, blk.layer, blk.head, block_id, epoch]
    )


def obfuscate_block(
    block: KVBlock,
    key: CloakKey,
    block_id: int,
    epoch: int = 0,
    permutation: Optional[Permutation] = None,
) -> KVBlock:
    """Cloak one fused-domain block: pad, mask, shuffle, mix.

    The one-time permutation is drawn from a stream derived from
    (key seed, layer, head, block id, epoch) unless explicitly supplied,
    and is dropped after use.
    """
    if block.state != STATE_PLAINTEXT:
        raise ObfuscationStateError(
            f"block is already {block.state}; refusing to obfuscate twice"
        )
    lk = key.layer(block.layer)
    b = key.block_size
    if block.k.shape != (b, key.head_dim):
        raise DimensionError(
            f"block shape {block.k.shape} does not match key ({b}, {key.head_dim})"
        )
    if permutation is None:
        permutation = sample_permutation(b, _block_rng(key, block, block_id, epoch))
    out_k = block.k.astype(np.float64)
    out_v = block.v.astype(np.float64)
    out_k[block.fill :] = key.pad_value_factor * lk.theta_k
    out_v[block.fill :] = key.pad_value_factor * lk.theta_v
    out_k = lk.matrices.s @ (out_k + lk.a_k)[permutation.mapping]
    out_v = lk.matrices.s @ (out_v + lk.a_v)[permutation.mapping]
    return KVBlock(
        layer=block.layer,
        head=block.head,
        k=out_k.astype(np.float32),
        v=out_v.astype(np.float32),
        fill=block.fill,
        state=STATE_CLOAKED,
    )


def _recover_rows(
    mixed: np.ndarray,
    mask: np.ndarray,
    theta: float,
    key: CloakKey,
    fill: Optional[int],
) -> tuple:
    """Undo S and the mask on one cloaked matrix.

    Returns (rows, original_indices) with padding rows dropped, remaining
    rows kept in shuffled order.
    """
    b = key.block_size
    cutoff = key.outlier_factor * theta
    origin = np.full(b, -1, dtype=np.int64)
    data = np.empty_like(mixed)
    for r in range(b):
        row = mixed[r]
        outliers = np.nonzero(np.abs(row) > cutoff)[0]
        if outliers.size != 1:
            raise CorruptionError(
                f"row {r}: expected exactly one identifier outlier, found {outliers.size}"
            )
        idx = int(outliers[0])
        origin[r] = idx
        data[r] = row - mask[idx]
    if np.unique(origin).size != b:
        raise CorruptionError("duplicate identifier indices across rows")
    if fill is not None:
        keep = origin < fill
    else:
        # fallback padding test: every entry of a padding row sits in a
        # +-0.25*theta band around pad_value_factor*theta
        lo = (key.pad_value_factor - 0.25) * theta
        hi = (key.pad_value_factor + 0.25) * theta
        band = (np.abs(data) >= lo) & (np.abs(data) <= hi)
        keep = ~np.all(band, axis=1)
    return data[keep], origin[keep]


def deobfuscate_block(
    block: KVBlock, key: CloakKey, use_fill_metadata: bool = True
) -> tuple:
    """Uncloak one block.

    Returns (block, slot_map): the block's rows stay in shuffled order
    (attention does not care), and slot_map[q] is the original in-block row
    index of slot q, which the cache uses to repair its position table.
    """
    if block.state != STATE_CLOAKED:
        raise ObfuscationStateError(f"block state is {block.state}, expected cloaked")
    lk = key.layer(block.layer)
    fill = block.fill if use_fill_metadata else None
    mixed_k = lk.matrices.s.T @ block.k.astype(np.float64)
    mixed_v = lk.matrices.s.T @ block.v.astype(np.float64)
    rows_k, orig_k = _recover_rows(mixed_k, lk.a_k, lk.theta_k, key, fill)
    rows_v, orig_v = _recover_rows(mixed_v, lk.a_v, lk.theta_v, key, fill)
    if not np.array_equal(orig_k, orig_v):
        raise CorruptionError("key and value rows recovered inconsistent origins")
    n = rows_k.shape[0]
    if fill is not None and n != fill:
        raise CorruptionError(f"recovered {n} data rows, fill metadata says {fill}")
    b = key.block_size
    out_k = np.zeros((b, key.head_dim), dtype=np.float32)
    out_v = np.zeros((b, key.head_dim), dtype=np.float32)
    out_k[:n] = rows_k.astype(np.float32)
    out_v[:n] = rows_v.astype(np.float32)
    out = KVBlock(
        layer=block.layer,
        head=block.head,
        k=out_k,
        v=out_v,
        fill=n,
        state=STATE_PLAINTEXT,
    )
    return out, orig_k


def naive_obfuscate_block(block: KVBlock, key: CloakKey, block_id: int, epoch: int = 0) -> KVBlock:
    """Unfused reference path: K' = S P (K + A) M1 with M applied online.

    Only used to measure what operator fusion saves; the output domain is
    not compatible with ``deobfuscate_block``.
    """
    if block.state != STATE_PLAINTEXT:
        raise ObfuscationStateError("block must be plaintext")
    lk = key.layer(block.layer)
    perm = sample_permutation(key.block_size, _block_rng(key, block, block_id, epoch))
    m1 = materialize(lk.matrices.m1)
    m2 = materialize(lk.matrices.m2)
    out_k = block.k.astype(np.float64)
    out_v = block.v.astype(np.float64)
    out_k[block.fill :] = key.pad_value_factor * lk.theta_k
    out_v[block.fill :] = key.pad_value_factor * lk.theta_v
    out_k = lk.matrices.s @ (out_k + lk.a_k)[perm.mapping] @ m1
    out_v = lk.matrices.s @ (out_v + lk.a_v)[perm.mapping] @ m2
    return KVBlock(
        layer=block.layer,
        head=block.head,
        k=out_k.astype(np.float32),
        v=out_v.astype(np.float32),
        fill=block.fill,
        state=STATE_CLOAKED,
    )


# ---------------------------------------------------------------------------
# Cache-level wrappers
# ---------------------------------------------------------------------------


def _clone_cache_shell(cache: PagedKVCache) -> PagedKVCache:
    out = PagedKVCache(cache.config)
    out.seq_len = cache.seq_len
    out.table = [
        [list(head_tab) for head_tab in layer_tab] for layer_tab in cache.table
    ]
    out.final_logits = None if cache.final_logits is None else cache.final_logits.copy()
    return out


def obfuscate_cache(cache: PagedKVCache, key: CloakKey, epoch: int = 0) -> PagedKVCache:
    """Cloak every block; the position table is left at its nominal layout
    (the shuffle is secret, so a consumer without the key sees stale slots)."""
    out = _clone_cache_shell(cache)
    for layer in range(cache.config.layers):
        for head in range(cache.config.kv_heads):
            for bid, blk in enumerate(cache.blocks[layer][head]):
                out.blocks[layer][head].append(obfuscate_block(blk, key, bid, epoch))
    return out


def deobfuscate_cache(
    cache: PagedKVCache, key: CloakKey, use_fill_metadata: bool = True
) -> PagedKVCache:
    """Uncloak every block and repair the position tables from the recovered
    slot maps so decoding can continue in place."""
    out = _clone_cache_shell(cache)
    for layer in range(cache.config.layers):
        for head in range(cache.config.kv_heads):
            slot_of = []  # per block: original row index -> slot
            for bid, blk in enumerate(cache.blocks[layer][head]):
                plain, slot_map = deobfuscate_block(blk, key, use_fill_metadata)
                out.blocks[layer][head].append(plain)
                inv = {int(orig): q for q, orig in enumerate(slot_map)}
                slot_of.append(inv)
            b = cache.config.block_size
            repaired = []
            for pos, (bid, _slot) in enumerate(cache.table[layer][head]):
                repaired.append((bid, slot_of[bid][pos - bid * b]))
            out.table[layer][head] = repaired
    return out


# ---------------------------------------------------------------------------
# Multiplication-count model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FlopModel:
    """Online multiplication counts per block, against recompute-from-hidden."""

    b: int
    d: int
    hidden: int
    naive_mults: int
    fused_mults: int
    recompute_mults: int
    naive_ratio: float
    fused_ratio: float
    fused_over_naive: float

    def to_dict(self) -> dict:
        return {
            "b": self.b,
            "d": self.d,
            "hidden": self.hidden,
            "naive_mults": self.naive_mults,
            "fused_mults": self.fused_mults,
            "recompute_mults": self.recompute_mults,
            "naive_ratio": self.naive_ratio,
            "fused_ratio": self.fused_ratio,
            "fused_over_naive": self.fused_over_naive,
        }


def flop_model(b: int, d: int, hidden: int) -> FlopModel:
    if b < 1 or d < 1 or hidden < 1:
        raise ConfigError("dimensions must be positive")
    naive = b**3 + 2 * b * b * d + 2 * b * d * d
    fused = b**3 + 2 * b * b * d
    recompute = b * hidden * d
    return FlopModel(
        b=b,
        d=d,
        hidden=hidden,
        naive_mults=naive,
        fused_mults=fused,
        recompute_mults=recompute,
        naive_ratio=naive / recompute,
        fused_ratio=fused / recompute,
        fused_over_naive=fused / naive,
    )


# ---------------------------------------------------------------------------
# Key file I/O
# ---------------------------------------------------------------------------


def save_key(path, key: CloakKey) -> None:
    meta = {
        "block_size": key.block_size,
        "head_dim": key.head_dim,
        "seed": key.seed,
        "per_layer": key.per_layer,
        "outlier_factor": key.outlier_factor,
        "pad_value_factor": key.pad_value_factor,
        "mask_range": list(key.mask_range),
        "scale_bounds": list(key.scale_bounds),
        "thetas": [[lk.theta_k, lk.theta_v] for lk in key.layer_keys],
    }
    arrays = []
    rows = np.arange(key.block_size)
    for i, lk in enumerate(key.layer_keys):
        arrays += [
            (f"layer{i}.s", lk.matrices.s),
            (f"layer{i}.m1_t", lk.matrices.m1.t),
            (f"layer{i}.m1_u", lk.matrices.m1.u),
            (f"layer{i}.m2_t", lk.matrices.m2.t),
            (f"layer{i}.m2_u", lk.matrices.m2.u),
            (f"layer{i}.a_k_cols", rows.astype(np.int64)),
            (f"layer{i}.a_k_vals", lk.a_k[rows, rows]),
            (f"layer{i}.a_v_cols", rows.astype(np.int64)),
            (f"layer{i}.a_v_vals", lk.a_v[rows, rows]),
        ]
    container.write_container(path, "cloak-key", meta, arrays)


def load_key(path) -> CloakKey:
    meta, arrays = container.read_container(path, expect_kind="cloak-key")
    b = int(meta["block_size"])
    d = int(meta["head_dim"])
    bounds = tuple(meta["scale_bounds"])
    layer_keys = []
    i = 0
    while f"layer{i}.s" in arrays:
        a_k = np.zeros((b, d))
        a_v = np.zeros((b, d))
        a_k[arrays[f"layer{i}.a_k_cols"], arrays[f"layer{i}.a_k_cols"]] = arrays[f"layer{i}.a_k_vals"]
        a_v[arrays[f"layer{i}.a_v_cols"], arrays[f"layer{i}.a_v_cols"]] = arrays[f"layer{i}.a_v_vals"]
        layer_keys.append(
            LayerKey(
                matrices=SecretMatrices(
                    s=arrays[f"layer{i}.s"],
                    m1=RotationScalingKey(arrays[f"layer{i}.m1_t"], arrays[f"layer{i}.m1_u"], bounds),
                    m2=RotationScalingKey(arrays[f"layer{i}.m2_t"], arrays[f"layer{i}.m2_u"], bounds),
                ),
                a_k=a_k,
                a_v=a_v,
                theta_k=float(meta["thetas"][i][0]),
                theta_v=float(meta["thetas"][i][1]),
            )
        )
        i += 1
    return CloakKey(
        block_size=b,
        head_dim=d,
        seed=int(meta["seed"]),
        layer_keys=layer_keys,
        per_layer=bool(meta["per_layer"]),
        outlier_factor=float(meta["outlier_factor"]),
        pad_value_factor=float(meta["pad_value_factor"]),
        mask_range=tuple(meta["mask_range"]),
        scale_bounds=bounds,
    )
