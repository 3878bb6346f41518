"""Input-reconstruction attacks against leaked KV caches.

Three vectors:

* inversion: algebraically reverse first-layer cache entries to the
  attention input through the known projection matrices, then round to the
  nearest embedding row.
* collision: rebuild the input token by token, ranking candidates with the
  attacker's own next-token distribution, generating their cache entries
  locally, and accepting the candidate whose distance to the leaked entry
  is a statistical low outlier.
* injection: append an instruction to the stolen cache and let the model
  keep generating, exfiltrating context through the model's own behavior.

Plus the sequence metrics (exact match and LCS-based F1) used to score
reconstructions.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DimensionError,
    SingularMatrixError,
    UnsupportedArchitectureError,
)
from .linalg import rope_matrix
from .model import (
    STATE_PLAINTEXT,
    LayerBlocks,
    PagedKVCache,
    Weights,
    candidate_hiddens,
    decode_step,
    forward_prefill,
    gather_layer_context,
    greedy_decode,
)

# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def exact_match(a: Sequence[int], b: Sequence[int]) -> float:
    """Fraction of positions equal when aligned at identical indices."""
    if len(a) == 0 and len(b) == 0:
        return 1.0
    n = max(len(a), len(b))
    hits = sum(1 for x, y in zip(a, b) if x == y)
    return hits / n


def _lcs_length(a: Sequence[int], b: Sequence[int]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(a: Sequence[int], b: Sequence[int]) -> float:
    """LCS-based F1 between two token sequences; both empty is defined as 1."""
    if len(a) == 0 and len(b) == 0:
        return 1.0
    if len(a) == 0 or len(b) == 0:
        return 0.0
    lcs = _lcs_length(a, b)
    if lcs == 0:
        return 0.0
    p = lcs / len(a)
    r = lcs / len(b)
    return 2 * p * r / (p + r)


# ---------------------------------------------------------------------------
# Report types
# ---------------------------------------------------------------------------


@dataclass
class DistanceStats:
    mu_other: float
    sigma_other: float
    batch_distances: Optional[np.ndarray] = None
    target_distance: Optional[float] = None

    def __post_init__(self):
        if self.sigma_other < 0:
            raise ConfigError("sigma_other must be >= 0")


@dataclass
class PositionRecord:
    rank: int
    dis_target: float
    mu_other: float
    sigma_other: float
    decision: str  # "accepted" | "fallback"
    true_distance: Optional[float] = None
    true_rank: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "rank": self.rank,
            "dis_target": self.dis_target,
            "mu_other": self.mu_other,
            "sigma_other": self.sigma_other,
            "decision": self.decision,
            "true_distance": self.true_distance,
            "true_rank": self.true_rank,
        }


@dataclass
class AttackReport:
    attack: str
    reconstructed: list
    exact_match: float
    rouge_l: float
    wall_time: float
    per_position: Optional[list] = None
    flags: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "attack": self.attack,
            "reconstructed": list(self.reconstructed),
            "exact_match": self.exact_match,
            "rouge_l": self.rouge_l,
            "wall_time": self.wall_time,
            "per_position": [p.to_dict() for p in self.per_position]
            if self.per_position is not None
            else None,
            "flags": self.flags,
        }


def _score(reconstructed, true_tokens):
    if true_tokens is None:
        return float("nan"), float("nan")
    return exact_match(reconstructed, true_tokens), rouge_l(reconstructed, true_tokens)


# ---------------------------------------------------------------------------
# Inversion attack
# ---------------------------------------------------------------------------


def _nearest_embedding(embedding: np.ndarray, u: np.ndarray) -> int:
    """Nearest row by cosine similarity; a zero query maps to the row of
    smallest norm (so an exact zero matches a zero row when present)."""
    norms = np.linalg.norm(embedding, axis=1)
    qn = np.linalg.norm(u)
    if qn == 0.0:
        return int(np.argmin(norms))
    sims = embedding @ u / np.where(norms == 0.0, np.inf, norms) / qn
    return int(np.argmax(sims))


def invert_position(
    weights: Weights,
    layer_blocks: LayerBlocks,
    pos: int,
    mode: str = "exact",
) -> np.ndarray:
    """Recover the normalized attention input from one position's k/v.

    exact mode solves k = x W_k^T R directly and requires a square W_k
    (MHA); least_squares stacks the k and v equations and returns the
    minimum-norm solution, which also covers GQA.
    """
    config = weights.config
    lw = weights.layers[layer_blocks.layer]
    d = config.head_dim
    r = rope_matrix(d, pos, config.rope_base)
    k, v = layer_blocks.slice_at(pos)
    k_plain = k @ r.T  # undo the position rotation per head (R^-1 = R^T)
    if mode == "exact":
        if config.heads != config.kv_heads:
            raise UnsupportedArchitectureError(
                "exact inversion needs a square key projection (MHA); "
                f"model has {config.heads} heads but {config.kv_heads} kv heads"
            )
        try:
            return np.linalg.solve(lw.w_k, k_plain.reshape(-1))
        except np.linalg.LinAlgError as e:
            raise SingularMatrixError(f"key projection is singular: {e}") from e
    if mode == "least_squares":
        a = np.vstack([lw.w_k, lw.w_v])
        rhs = np.concatenate([k_plain.reshape(-1), v.reshape(-1)])
        x, _, _, _ = np.linalg.lstsq(a, rhs, rcond=None)
        return x
    raise ConfigError(f"unknown inversion mode {mode!r}")


def inversion_attack(
    layer_blocks: LayerBlocks,
    weights: Weights,
    mode: str = "exact",
    true_tokens: Optional[Sequence[int]] = None,
) -> AttackReport:
    """Invert every cached position and round to the nearest embedding row.

    The recovered vector is the post-norm attention input; dividing out the
    layer's norm gain leaves a positive multiple of the embedding direction,
    which cosine rounding resolves.  Only the first layer's inputs are
    embeddings, so deeper layers produce noise by design.
    """
    t0 = time.perf_counter()
    config = weights.config
    gain = weights.layers[layer_blocks.layer].norm_gain
    safe_gain = np.where(gain == 0.0, 1.0, gain)
    tokens = []
    for pos in range(layer_blocks.seq_len):
        x_hat = invert_position(weights, layer_blocks, pos, mode=mode)
        tokens.append(_nearest_embedding(weights.embedding, x_hat / safe_gain))
    em, rl = _score(tokens, true_tokens)
    return AttackReport(
        attack="inversion",
        reconstructed=tokens,
        exact_match=em,
        rouge_l=rl,
        wall_time=time.perf_counter() - t0,
        flags={"mode": mode, "layer": layer_blocks.layer, "cloaked_input": bool(layer_blocks.states() - {STATE_PLAINTEXT})},
    )


# ---------------------------------------------------------------------------
# Collision attack
# ---------------------------------------------------------------------------


@dataclass
class CollisionParams:
    layer: int = 0
    batch_size: int = 256
    sigma_multiplier: float = 3.0
    vocab_fraction: float = 1.0
    threshold_mode: str = "heuristic"  # "heuristic" | "enhanced"
    fixed_threshold: Optional[float] = None  # required in enhanced mode
    distance_parts: str = "kv"  # "kv" | "k" | "v"
    cumulative_stats: bool = True  # False keeps per-batch statistics only
    early_exit: bool = False  # stop scanning once a candidate is accepted

    def __post_init__(self):
        if not (0 < self.vocab_fraction <= 1):
            raise ConfigError("vocab_fraction must be in (0, 1]")
        if self.batch_size < 2:
            raise ConfigError("batch size must be >= 2 for batch statistics")
        if self.threshold_mode not in ("heuristic", "enhanced"):
            raise ConfigError(f"unknown threshold mode {self.threshold_mode!r}")
        if self.threshold_mode == "enhanced" and self.fixed_threshold is None:
            raise ConfigError("enhanced mode needs a fixed_threshold")
        if self.distance_parts not in ("kv", "k", "v"):
            raise ConfigError(f"unknown distance_parts {self.distance_parts!r}")


def collision_distance(
    local_k: np.ndarray,
    local_v: np.ndarray,
    target_k: np.ndarray,
    target_v: np.ndarray,
    parts: str = "kv",
) -> float:
    """Frobenius distance between single-token slices stacked over kv heads."""
    if local_k.shape != target_k.shape or local_v.shape != target_v.shape:
        raise DimensionError(
            f"slice shapes differ: {local_k.shape}/{local_v.shape} vs "
            f"{target_k.shape}/{target_v.shape}"
        )
    dis = 0.0
    if parts in ("kv", "k"):
        dis += float(np.linalg.norm(local_k - target_k))
    if parts in ("kv", "v"):
        dis += float(np.linalg.norm(local_v - target_v))
    return dis


def _batched_distances(k_batch, v_batch, tk, tv, parts):
    dis = np.zeros(k_batch.shape[0])
    if parts in ("kv", "k"):
        dis += np.sqrt(np.sum((k_batch - tk) ** 2, axis=(1, 2)))
    if parts in ("kv", "v"):
        dis += np.sqrt(np.sum((v_batch - tv) ** 2, axis=(1, 2)))
    return dis


def collision_attack(
    target_layer: LayerBlocks,
    attacker: Weights,
    params: CollisionParams,
    true_tokens: Optional[Sequence[int]] = None,
) -> AttackReport:
    """Token-by-token reconstruction via local cache generation.

    Per position: rank the vocabulary by the attacker model's next-token
    probability over the confirmed prefix (uniform order for the empty
    prefix), truncate to the top vocab_fraction, generate candidate cache
    entries in batches, and accept the first candidate in rank order whose
    distance to the leaked slice falls below the threshold
    (mu - sigma_multiplier*sigma of observed distances, or the fixed
    enhanced threshold).  If the scan produces no outlier, the global
    minimum-distance candidate is taken and the position flagged.
    """
    t0 = time.perf_counter()
    config = attacker.config
    if target_layer.layer >= config.layers:
        raise DimensionError(
            f"target layer {target_layer.layer} outside attacker model "
            f"({config.layers} layers)"
        )
    vocab = config.vocab
    n_candidates = max(1, math.ceil(vocab * params.vocab_fraction))
    if n_candidates < params.batch_size and n_candidates < vocab:
        warnings.warn("truncated candidate list smaller than one batch")
    prefix_cache = PagedKVCache(config)
    last_logits = None
    reconstructed: list = []
    records: list = []

    for pos in range(target_layer.seq_len):
        if last_logits is None:
            order = np.arange(vocab)  # uniform prior over the empty prefix
        else:
            order = np.argsort(-last_logits, kind="stable")
        order = order[:n_candidates]
        tk, tv = target_layer.slice_at(pos)
        context = [
            gather_layer_context(prefix_cache, layer, pos)
            for layer in range(target_layer.layer + 1)
        ]

        distances = np.full(len(order), np.nan)
        accepted_idx: Optional[int] = None
        count = 0
        mean = 0.0
        m2 = 0.0
        mu = float("nan")
        sigma = float("nan")
        for start in range(0, len(order), params.batch_size):
            batch = order[start : start + params.batch_size]
            kb, vb = candidate_hiddens(
                attacker, prefix_cache, batch, target_layer.layer, context=context
            )
            dis = _batched_distances(kb, vb, tk, tv, params.distance_parts)
            distances[start : start + len(batch)] = dis
            if params.cumulative_stats:
                # Chan et al. pairwise merge of (count, mean, M2) with the batch
                nb = len(dis)
                b_mean = float(np.mean(dis))
                b_m2 = float(np.sum((dis - b_mean) ** 2))
                delta = b_mean - mean
                total = count + nb
                mean += delta * nb / total
                m2 += b_m2 + delta * delta * count * nb / total
                count = total
                mu = mean
                sigma = math.sqrt(m2 / count) if count > 1 else 0.0
            else:
                mu = float(np.mean(dis))
                sigma = float(np.std(dis))
            if params.threshold_mode == "enhanced":
                threshold = params.fixed_threshold
            else:
                threshold = mu - params.sigma_multiplier * sigma
            if params.early_exit:
                hits = np.nonzero(dis < threshold)[0]
                if hits.size:
                    accepted_idx = start + int(hits[0])
                    break
        if accepted_idx is None:
            if params.threshold_mode == "enhanced":
                threshold = params.fixed_threshold
            else:
                threshold = mu - params.sigma_multiplier * sigma
            evaluated = ~np.isnan(distances)
            hits = np.nonzero(evaluated & (distances < threshold))[0]
            if hits.size:
                accepted_idx = int(hits[0])
                decision = "accepted"
            else:
                accepted_idx = int(np.nanargmin(distances))
                decision = "fallback"
        else:
            decision = "accepted"
        token = int(order[accepted_idx])

        true_distance = None
        true_rank = None
        if true_tokens is not None and pos < len(true_tokens):
            where = np.nonzero(order == true_tokens[pos])[0]
            if where.size and not np.isnan(distances[where[0]]):
                true_rank = int(where[0]) + 1
                true_distance = float(distances[where[0]])
        records.append(
            PositionRecord(
                rank=accepted_idx + 1,
                dis_target=float(distances[accepted_idx]),
                mu_other=mu,
                sigma_other=sigma,
                decision=decision,
                true_distance=true_distance,
                true_rank=true_rank,
            )
        )
        reconstructed.append(token)
        last_logits = decode_step(attacker, prefix_cache, token)

    em, rl = _score(reconstructed, true_tokens)
    return AttackReport(
        attack="collision",
        reconstructed=reconstructed,
        exact_match=em,
        rouge_l=rl,
        wall_time=time.perf_counter() - t0,
        per_position=records,
        flags={
            "layer": target_layer.layer,
            "threshold_mode": params.threshold_mode,
            "vocab_fraction": params.vocab_fraction,
            "fallbacks": sum(1 for r in records if r.decision == "fallback"),
            "cloaked_input": bool(target_layer.states() - {STATE_PLAINTEXT}),
        },
    )


# ---------------------------------------------------------------------------
# Threshold calibration from prior knowledge
# ---------------------------------------------------------------------------


def _normal_cdf(x: np.ndarray, mu: float, sigma: float) -> np.ndarray:
    if sigma == 0.0:
        return (x >= mu).astype(np.float64)
    z = (x - mu) / (sigma * math.sqrt(2.0))
    return 0.5 * (1.0 + np.vectorize(math.erf)(z))


def collision_success_probability(
    t: np.ndarray, target_mu: float, target_sigma: float, other_mu: float, other_sigma: float, rank: int
) -> np.ndarray:
    """Chance that a rank-``rank`` candidate scan accepts exactly the target:
    the rank-1 preceding wrong candidates must all sit above t and the target
    below it."""
    p_reject = 1.0 - _normal_cdf(np.asarray(t, dtype=np.float64), other_mu, other_sigma)
    p_accept = _normal_cdf(np.asarray(t, dtype=np.float64), target_mu, target_sigma)
    return p_reject ** (rank - 1) * p_accept


def enhanced_threshold(
    target_samples: Sequence[float],
    other_stats: DistanceStats,
    rank: int,
    grid_points: int = 10_000,
) -> float:
    """Fit Gaussians to both distance populations and grid-search the
    acceptance threshold maximizing the rank-aware success probability."""
    if rank < 1:
        raise ConfigError(f"rank must be >= 1, got {rank}")
    samples = np.asarray(target_samples, dtype=np.float64)
    if samples.size < 1:
        raise ConfigError("need at least one chosen-plaintext target sample")
    t_mu = float(np.mean(samples))
    t_sigma = float(np.std(samples))
    o_mu, o_sigma = other_stats.mu_other, other_stats.sigma_other
    lo, hi = (t_mu, o_mu) if t_mu <= o_mu else (o_mu, t_mu)
    if t_sigma == 0.0 and o_sigma == 0.0 and lo == hi:
        warnings.warn("degenerate overlapping distributions; returning the midpoint")
        return lo
    grid = np.linspace(lo, hi, grid_points)
    p = collision_success_probability(grid, t_mu, t_sigma, o_mu, o_sigma, rank)
    return float(grid[int(np.argmax(p))])


# ---------------------------------------------------------------------------
# Injection attack
# ---------------------------------------------------------------------------


def injection_attack(
    cache: PagedKVCache,
    instruction: Sequence[int],
    max_new: int,
    weights: Weights,
    true_tokens: Optional[Sequence[int]] = None,
) -> AttackReport:
    """Append instruction tokens to a stolen cache and greedy-decode.

    Works on whatever bytes the cache holds; if any block is not plaintext
    the output is still produced but flagged, since it cannot be read as a
    reconstruction of anything.
    """
    t0 = time.perf_counter()
    states = cache.states()
    cloaked = bool(states - {STATE_PLAINTEXT})
    if cloaked:
        warnings.warn("injection ran against a non-plaintext cache; output is not plaintext")
    logits = cache.final_logits
    for tok in instruction:
        logits = decode_step(weights, cache, int(tok))
    if logits is None:
        raise ConfigError(
            "empty instruction and the cache carries no final logits to resume from"
        )
    generated = greedy_decode(weights, cache, logits, max_new)
    em, rl = _score(generated, true_tokens)
    return AttackReport(
        attack="injection",
        reconstructed=generated,
        exact_match=em,
        rouge_l=rl,
        wall_time=time.perf_counter() - t0,
        flags={"cloaked_input": cloaked, "instruction_len": len(list(instruction))},
    )
