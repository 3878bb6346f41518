"""Clipped-Gaussian baseline defense for KV blocks.

Each block is scaled down to a calibrated Frobenius-norm bound and
perturbed with elementwise Gaussian noise sized by the classic mechanism

    sigma = C * sqrt(2 * ln(1.25/delta)) / epsilon

K and V are treated as independent releases: separate clip bounds,
separate noise.  Noise is added once when the cache leaves the prefill
stage, not per decode step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError
from .model import STATE_DP, STATE_PLAINTEXT, KVBlock, PagedKVCache


@dataclass
class DPConfig:
    epsilon: float
    delta: float = 1e-5
    clip_percentile: float = 0.5
    clip_k: Optional[float] = None  # derived by calibrate_clip
    clip_v: Optional[float] = None

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be > 0")
        if not (0 < self.delta < 1):
            raise ConfigError("delta must be in (0, 1)")
        if not (0 < self.clip_percentile <= 1):
            raise ConfigError("clip percentile must be in (0, 1]")

    def sigma_k(self) -> float:
        return gaussian_sigma(self.epsilon, self.delta, self.clip_k)

    def sigma_v(self) -> float:
        return gaussian_sigma(self.epsilon, self.delta, self.clip_v)


def gaussian_sigma(epsilon: float, delta: float, clip_norm: float) -> float:
    """Noise scale of the (epsilon, delta) Gaussian mechanism at sensitivity C."""
    if epsilon <= 0 or not (0 < delta < 1):
        raise ConfigError("need epsilon > 0 and delta in (0, 1)")
    if clip_norm is None or clip_norm <= 0:
        raise ConfigError("clip norm must be calibrated and positive")
    return clip_norm * math.sqrt(2.0 * math.log(1.25 / delta)) / epsilon


def calibrate_clip(corpus_caches: Sequence[PagedKVCache], percentile: float = 0.5) -> tuple:
    """Per-type percentile of the per-block Frobenius norms (filled rows only)."""
    if not (0 < percentile <= 1):
        raise ConfigError("percentile must be in (0, 1]")
    norms_k = []
    norms_v = []
    for cache in corpus_caches:
        for layer_blocks in cache.blocks:
            for head_blocks in layer_blocks:
                for blk in head_blocks:
                    if blk.fill == 0:
                        continue
                    norms_k.append(float(np.linalg.norm(blk.k[: blk.fill])))
                    norms_v.append(float(np.linalg.norm(blk.v[: blk.fill])))
    if not norms_k:
        raise ConfigError("calibration corpus is empty")
    q = percentile * 100.0
    return float(np.percentile(norms_k, q)), float(np.percentile(norms_v, q))


def _clip(x: np.ndarray, bound: float) -> np.ndarray:
    norm = float(np.linalg.norm(x))
    if norm <= bound or norm == 0.0:
        return x
    return x * (bound / norm)


def dp_protect_block(block: KVBlock, config: DPConfig, rng: np.random.Generator) -> KVBlock:
    """Clip the block to the calibrated norms and add i.i.d. Gaussian noise."""
    if block.state != STATE_PLAINTEXT:
        raise ConfigError(f"block state is {block.state}, expected plaintext")
    k = _clip(block.k.astype(np.float64), config.clip_k)
    v = _clip(block.v.astype(np.float64), config.clip_v)
    k = k + config.sigma_k() * rng.standard_normal(k.shape)
    v = v + config.sigma_v() * rng.standard_normal(v.shape)
    return KVBlock(
        layer=block.layer,
        head=block.head,
        k=k.astype(np.float32),
        v=v.astype(np.float32),
        fill=block.fill,
        state=STATE_DP,
    )


def dp_protect_cache(cache: PagedKVCache, config: DPConfig, seed: int) -> PagedKVCache:
    """Protect every block; per-block noise streams are derived from
    (seed, layer, head, block id) so the transform parallelizes deterministically."""
    out = PagedKVCache(cache.config)
    out.seq_len = cache.seq_len
    out.table = [[list(t) for t in layer_tab] for layer_tab in cache.table]
    out.final_logits = None if cache.final_logits is None else cache.final_logits.copy()
    for layer in range(cache.config.layers):
        for head in range(cache.config.kv_heads):
            for bid, blk in enumerate(cache.blocks[layer][head]):
                rng = np.random.default_rng([seed, layer, head, bid])
                out.blocks[layer][head].append(dp_protect_block(blk, config, rng))
    return out
