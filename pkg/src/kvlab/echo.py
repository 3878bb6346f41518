"""Hand-constructed weights whose greedy continuation replays the prompt.

Two attention-only layers implement the classic induction circuit:

* layer 1 is a previous-token head.  Queries and keys read only a shared
  bias direction of the embedding, so attention scores depend purely on
  relative position; pre-rotating the query by one position puts the
  kernel's peak at j = i-1.  Its value path copies the attended token's
  code into a dedicated "previous token" residual subspace.
* layer 2 matches the current token's code against the previous-token
  codes, i.e. it attends to the position right after the last occurrence
  of the current token, and copies that position's token code into the
  logit-visible subspace with a large gain.

Feeding any token that already occurred in the prompt therefore makes
greedy decoding walk the prompt forward from that occurrence.  Token codes
are one-hot, so the construction is exact up to softmax leakage; gains are
sized to push that leakage far below the decision margins.

One boundary artifact: position 0 can only attend to itself, so it records
its own token as its "previous" token.  A probe equal to prompt[0] thus
matches two positions and the copy gain splits; probes drawn from
prompt[1:-1] of a duplicate-free prompt have a unique match and replay the
rest of the prompt verbatim.

Position-rotation bookkeeping: rotations act on head dimensions after the
projections, so residual-space layout is unconstrained, but the head
dimensions carrying content matches must rotate slowly.  With rope_base
1e8 and head_dim 80 the pair frequencies are 10^(-j/5); pair 8 (period
~250 positions) drives the positional kernel and pairs 15..39 are slow
enough (<= 1e-3 rad/step) to hold content codes.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .linalg import rope_matrix
from .model import LayerWeights, ModelConfig, Weights

_D = 80
_POS_PAIR = 8
_CONTENT_PAIR0 = 15
_BIAS_DIM = 0
_TOKEN_DIM0 = 2

_POS_GAIN = 2.0e4  # sharpens the previous-token kernel
_MATCH_GAIN = 25.0  # sharpens the induction match
_COPY_GAIN = 4.0  # induction copy must dominate the token's own logit


def echo_config(vocab: int = 24) -> ModelConfig:
    if vocab > 25:
        raise ConfigError("echo construction supports at most 25 tokens")
    return ModelConfig(
        layers=2,
        hidden=_D,
        heads=1,
        kv_heads=1,
        head_dim=_D,
        vocab=vocab,
        rope_base=1e8,
        block_size=16,
    )


def build_echo_weights(vocab: int = 24) -> Weights:
    config = echo_config(vocab)
    d = _D
    prev_dim0 = _TOKEN_DIM0 + vocab + 2  # previous-token code subspace

    bias = np.zeros(d)
    bias[_BIAS_DIM] = 1.0

    embedding = np.zeros((vocab, d))
    embedding[:, _BIAS_DIM] = 1.0
    embedding[np.arange(vocab), _TOKEN_DIM0 + np.arange(vocab)] = 1.0

    # layer 1: previous-token head
    u_pos = np.zeros(d)
    u_pos[_POS_PAIR] = 1.0
    qvec = _POS_GAIN * (u_pos @ rope_matrix(d, 1, config.rope_base).T)  # bake R_{-1}
    l1 = LayerWeights(
        w_q=np.outer(qvec, bias),
        w_k=np.outer(u_pos, bias),
        w_v=np.zeros((d, d)),
        w_o=np.zeros((d, d)),
        norm_gain=np.ones(d),
    )
    for v in range(vocab):
        l1.w_v[v, _TOKEN_DIM0 + v] = 1.0  # token code -> head dim v
        l1.w_o[prev_dim0 + v, v] = 1.0  # head dim v -> previous-token code

    # layer 2: induction head
    l2 = LayerWeights(
        w_q=np.zeros((d, d)),
        w_k=np.zeros((d, d)),
        w_v=np.zeros((d, d)),
        w_o=np.zeros((d, d)),
        norm_gain=np.ones(d),
    )
    for v in range(vocab):
        head_dim = _CONTENT_PAIR0 + v
        l2.w_q[head_dim, _TOKEN_DIM0 + v] = _MATCH_GAIN
        l2.w_k[head_dim, prev_dim0 + v] = 1.0
        l2.w_v[v, _TOKEN_DIM0 + v] = 1.0
        l2.w_o[_TOKEN_DIM0 + v, v] = _COPY_GAIN

    return Weights(config=config, embedding=embedding, layers=[l1, l2])
