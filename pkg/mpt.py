"""
Prompt attention and the multimodal prompt transformer.

The transformer state is the row-concatenation [prompt; text]. In every block the
prompt rows act as extra queries against keys and values taken from the text
rows, so each prompt row is updated by the text and each text row is encoded
under the prompt's influence. Prompt rows enter the attention unprojected.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

import tensor_core as tc
from tensor_core import ParameterGroup, ShapeMismatchError, Tensor

logger = logging.getLogger(__name__)


@dataclass
class PromptAttentionParams(ParameterGroup):
    """One transformer block: prompt attention, feed-forward and two layer norms."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    w_1: Tensor
    b_1: Tensor
    w_2: Tensor
    b_2: Tensor
    norm1_gain: Tensor
    norm1_bias: Tensor
    norm2_gain: Tensor
    norm2_bias: Tensor
    heads: int = 1

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, heads: int, d_ff: int = None) -> "PromptAttentionParams":
        if heads < 1 or d % heads:
            raise ShapeMismatchError(f"{heads} heads do not divide model width d={d}")
        d_ff = d_ff if d_ff is not None else 4 * d
        return cls(
            w_q=tc.xavier_uniform(rng, d, d),
            w_k=tc.xavier_uniform(rng, d, d),
            w_v=tc.xavier_uniform(rng, d, d),
            w_o=tc.xavier_uniform(rng, d, d),
            w_1=tc.xavier_uniform(rng, d, d_ff),
            b_1=tc.zeros((d_ff,)),
            w_2=tc.xavier_uniform(rng, d_ff, d),
            b_2=tc.zeros((d,)),
            norm1_gain=tc.ones((d,)),
            norm1_bias=tc.zeros((d,)),
            norm2_gain=tc.ones((d,)),
            norm2_bias=tc.zeros((d,)),
            heads=heads,
        )


@dataclass
class PoolingParams(ParameterGroup):
    """Single-head self-attention applied once after the last block."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d: int) -> "PoolingParams":
        return cls(w_q=tc.xavier_uniform(rng, d, d), w_k=tc.xavier_uniform(rng, d, d), w_v=tc.xavier_uniform(rng, d, d))


@dataclass
class MptStack(ParameterGroup):
    blocks: List[PromptAttentionParams]
    pool: PoolingParams
    dropout: float = 0.0

    @property
    def dim(self) -> int:
        return self.pool.w_q.shape[0]

    @classmethod
    def init(
        cls, rng: np.random.Generator, d: int, layers: int = 5, heads: int = 5, d_ff: int = None, dropout: float = 0.2
    ) -> "MptStack":
        if layers < 1:
            raise ShapeMismatchError(f"MPT needs at least one block, got {layers}")
        blocks = [PromptAttentionParams.init(rng, d, heads, d_ff) for _ in range(layers)]
        return cls(blocks=blocks, pool=PoolingParams.init(rng, d), dropout=dropout)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """(N, d) -> (heads, N, d_h)"""
    rows, width = x.shape
    return tc.transpose(tc.reshape(x, (rows, heads, width // heads)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    """(heads, N, d_h) -> (N, heads * d_h)"""
    heads, rows, width = x.shape
    return tc.reshape(tc.transpose(x, (1, 0, 2)), (rows, heads * width))


def prompt_attention(
    prompt: Tensor, text: Tensor, params: PromptAttentionParams, return_weights: bool = False
):
    """
    Multi-head attention with prompt rows prepended to the projected text queries.

    Args:
        prompt: L_p x d prompt rows (used as queries as they are)
        text: L x d text rows (projected to queries, keys and values)
        params: Block parameters; only the attention projections are used
        return_weights: Also return the (heads, L_p + L, L) attention probabilities

    Returns:
        (L_p + L) x d attended rows, prompt rows first
    """
    prompt, text = tc.as_tensor(prompt), tc.as_tensor(text)
    if prompt.ndim != 2 or text.ndim != 2:
        raise ShapeMismatchError(f"prompt_attention expects matrices, got {prompt.shape} and {text.shape}")
    if prompt.shape[1] != text.shape[1] or text.shape[1] != params.dim:
        raise ShapeMismatchError(
            f"prompt_attention: prompt {prompt.shape}, text {text.shape} and block width {params.dim} must agree"
        )
    heads = params.heads
    queries = tc.concat([prompt, tc.matmul(text, params.w_q)], axis=0)
    keys = tc.matmul(text, params.w_k)
    values = tc.matmul(text, params.w_v)

    q = _split_heads(queries, heads)
    k = tc.transpose(_split_heads(keys, heads))
    v = _split_heads(values, heads)
    scores = tc.scale(tc.matmul(q, k), 1.0 / np.sqrt(params.head_dim))
    weights = tc.softmax(scores, axis=-1)
    out = tc.matmul(_merge_heads(tc.matmul(weights, v)), params.w_o)
    if return_weights:
        return out, weights
    return out


def _block(
    state: Tensor, prompt_rows: int, params: PromptAttentionParams, p: float, rng, training: bool
) -> Tensor:
    length = state.shape[0]
    prompt = tc.slice_(state, 0, prompt_rows, axis=0)
    text = tc.slice_(state, prompt_rows, length, axis=0)
    attended = tc.dropout(prompt_attention(prompt, text, params), p, rng, training)
    normed = tc.layer_norm(tc.add(state, attended), params.norm1_gain, params.norm1_bias)
    hidden = tc.relu(tc.add(tc.matmul(normed, params.w_1), params.b_1))
    ffn = tc.dropout(tc.add(tc.matmul(hidden, params.w_2), params.b_2), p, rng, training)
    return tc.layer_norm(tc.add(normed, ffn), params.norm2_gain, params.norm2_bias)


def pooling_attention(state: Tensor, params: PoolingParams) -> Tensor:
    """Single-head scaled dot-product self-attention over all rows."""
    d = params.w_q.shape[0]
    q = tc.matmul(state, params.w_q)
    k = tc.matmul(state, params.w_k)
    v = tc.matmul(state, params.w_v)
    weights = tc.softmax(tc.scale(tc.matmul(q, tc.transpose(k)), 1.0 / np.sqrt(d)), axis=-1)
    return tc.matmul(weights, v)


def mpt_forward(
    prompt: Tensor,
    text: Tensor,
    stack: MptStack,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """
    Run the prompt transformer and return the text rows of the pooled state.

    Args:
        prompt: L x d filtered auxiliary-modality features
        text: L x d enhanced text features
        stack: Blocks and pooling attention
        training: Enable dropout (requires ``rng``)
        rng: Dropout stream

    Returns:
        L x d prompt-conditioned text features
    """
    prompt, text = tc.as_tensor(prompt), tc.as_tensor(text)
    if prompt.ndim != 2 or text.ndim != 2 or prompt.shape[0] < 1 or text.shape[0] < 1:
        raise ShapeMismatchError(f"mpt_forward needs non-empty matrices, got {prompt.shape} and {text.shape}")
    if prompt.shape[1] != text.shape[1] or text.shape[1] != stack.dim:
        raise ShapeMismatchError(f"mpt_forward: prompt {prompt.shape}, text {text.shape}, stack width {stack.dim}")
    if training and stack.dropout > 0 and rng is None:
        raise ValueError("mpt_forward: dropout in training mode needs a random generator")

    prompt_rows = prompt.shape[0]
    state = tc.concat([prompt, text], axis=0)
    for params in stack.blocks:
        state = _block(state, prompt_rows, params, stack.dropout, rng, training)
    pooled = pooling_attention(state, stack.pool)
    return tc.slice_(pooled, prompt_rows, state.shape[0], axis=0)


def fuse_branches(branches: Sequence[Tensor], text: Tensor) -> Tuple[Optional[Tensor], Tensor]:
    """
    Concatenate any number of prompt-transformer outputs and prepend the text features.

    Returns:
        (X_mpt of width k*d or None when there are no branches, X_fusion of width (1+k)*d)
    """
    text = tc.as_tensor(text)
    for branch in branches:
        if branch.shape != text.shape:
            raise ShapeMismatchError(f"fuse: branch shape {branch.shape} != text shape {text.shape}")
    if not branches:
        return None, text
    mpt_out = branches[0] if len(branches) == 1 else tc.concat(list(branches), axis=1)
    return mpt_out, tc.concat([text, mpt_out], axis=1)


def fuse(x_tv: Tensor, x_ta: Tensor, text: Tensor) -> Tuple[Tensor, Tensor]:
    """X_mpt = [X_tv, X_ta] and X_fusion = [S_t, X_mpt], both on the feature axis."""
    x_tv, x_ta = tc.as_tensor(x_tv), tc.as_tensor(x_ta)
    if x_tv.shape != x_ta.shape:
        raise ShapeMismatchError(f"fuse: shapes {x_tv.shape} and {x_ta.shape} differ")
    return fuse_branches([x_tv, x_ta], text)
