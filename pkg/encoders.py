"""
Per-modality context encoders and the modal feature filter.

The BiLSTM runs both directions as one batched recurrence: axis 0 of every
parameter is the direction (0 forward, 1 backward). Gate columns are ordered
input, forget, output, candidate.
"""

import logging
from dataclasses import dataclass
from typing import List, Union

import numpy as np

import tensor_core as tc
from tensor_core import ParameterGroup, ShapeMismatchError, Tensor

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, Tensor]


@dataclass
class BiLstmParams(ParameterGroup):
    w_in: Tensor  # (2, d_m, 4h)
    w_hh: Tensor  # (2, h, 4h)
    bias: Tensor  # (2, 1, 4h)

    @property
    def input_dim(self) -> int:
        return self.w_in.shape[1]

    @property
    def hidden(self) -> int:
        return self.w_hh.shape[1]

    @property
    def output_dim(self) -> int:
        return 2 * self.hidden

    @classmethod
    def init(cls, rng: np.random.Generator, input_dim: int, d: int) -> "BiLstmParams":
        """Orthogonal recurrent weights, uniform(-1/sqrt(d), 1/sqrt(d)) input weights, forget bias 1."""
        if d % 2:
            raise ShapeMismatchError(f"BiLSTM output dim d={d} must be even")
        h = d // 2
        bound = 1.0 / np.sqrt(d)
        w_in = np.stack([rng.uniform(-bound, bound, size=(input_dim, 4 * h)) for _ in range(2)])
        w_hh = np.stack([tc.orthogonal(rng, h, 4 * h).data for _ in range(2)])
        bias = np.zeros((2, 1, 4 * h))
        bias[:, :, h : 2 * h] = 1.0
        return cls(w_in=tc.parameter(w_in), w_hh=tc.parameter(w_hh), bias=tc.parameter(bias))

    def swapped(self) -> "BiLstmParams":
        """Same weights with the forward and backward roles exchanged."""
        return BiLstmParams(
            w_in=tc.parameter(self.w_in.data[::-1]),
            w_hh=tc.parameter(self.w_hh.data[::-1]),
            bias=tc.parameter(self.bias.data[::-1]),
        )


def _constant_rows(features: ArrayLike) -> np.ndarray:
    data = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=tc.DTYPE)
    if data.ndim != 2:
        raise ShapeMismatchError(f"Expected an L x d_m feature matrix, got shape {data.shape}")
    return data


def encode_context(features: ArrayLike, params: BiLstmParams) -> Tensor:
    """
    Run a bidirectional LSTM over one conversation.

    Args:
        features: L x d_m utterance features of one modality (treated as constants)
        params: BiLSTM weights for that modality

    Returns:
        L x d tensor; row i is [forward state after step i, backward state after step i]
    """
    x = _constant_rows(features)
    length, dim = x.shape
    if length < 1:
        raise ShapeMismatchError("encode_context needs at least one utterance")
    if dim != params.input_dim:
        raise ShapeMismatchError(f"encode_context: input dim {dim} != expected {params.input_dim}")
    h = params.hidden

    both = Tensor(np.stack([x, x[::-1]]))
    projected = tc.add(tc.matmul(both, params.w_in), params.bias)  # (2, L, 4h)

    state = None
    cell = None
    forward_rows: List[Tensor] = []
    backward_rows: List[Tensor] = []
    for t in range(length):
        z = tc.slice_(projected, t, t + 1, axis=1)
        if state is not None:
            z = tc.add(z, tc.matmul(state, params.w_hh))
        gates = tc.sigmoid(tc.slice_(z, 0, 3 * h, axis=2))
        in_gate = tc.slice_(gates, 0, h, axis=2)
        out_gate = tc.slice_(gates, 2 * h, 3 * h, axis=2)
        candidate = tc.tanh(tc.slice_(z, 3 * h, 4 * h, axis=2))
        if cell is None:
            cell = tc.mul(in_gate, candidate)
        else:
            forget_gate = tc.slice_(gates, h, 2 * h, axis=2)
            cell = tc.add(tc.mul(forget_gate, cell), tc.mul(in_gate, candidate))
        state = tc.mul(out_gate, tc.tanh(cell))
        forward_rows.append(tc.slice_(state, 0, 1, axis=0))
        backward_rows.append(tc.slice_(state, 1, 2, axis=0))

    forward = tc.concat(forward_rows, axis=1)
    backward = tc.concat(backward_rows[::-1], axis=1)
    return tc.reshape(tc.concat([forward, backward], axis=2), (length, 2 * h))


@dataclass
class GateFilterParams(ParameterGroup):
    w_l: Tensor  # (d, 1)
    b_l: Tensor  # (1,)
    w_d: Tensor  # (d, d_b)
    b_d: Tensor  # (d_b,)
    w_u: Tensor  # (d_b, d)
    b_u: Tensor  # (d,)
    slope: float = 0.01

    @property
    def dim(self) -> int:
        return self.w_l.shape[0]

    @property
    def bottleneck(self) -> int:
        return self.w_d.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, d_b: int = None, slope: float = 0.01) -> "GateFilterParams":
        d_b = d_b if d_b is not None else max(1, d // 4)
        if not 1 <= d_b < d:
            raise ShapeMismatchError(f"Filter bottleneck d_b={d_b} must lie in [1, d={d})")
        return cls(
            w_l=tc.ones((d, 1)),
            b_l=tc.zeros((1,)),
            w_d=tc.xavier_uniform(rng, d, d_b),
            b_d=tc.zeros((d_b,)),
            w_u=tc.xavier_uniform(rng, d_b, d),
            b_u=tc.zeros((d,)),
            slope=slope,
        )


def gate_weights(hidden: Tensor, params: GateFilterParams) -> Tensor:
    """
    Per-position gate distribution z (L x 1).

    The logit of position i is leaky_relu(mean_k(w_l[k] * h_ik) + b_l), so with the
    initial all-ones w_l it is the feature-dimension mean pool of h_i.
    """
    hidden = tc.as_tensor(hidden)
    if hidden.ndim != 2 or hidden.shape[0] < 1:
        raise ShapeMismatchError(f"modal_feature_filter needs an L x d input with L >= 1, got {hidden.shape}")
    if hidden.shape[1] != params.dim:
        raise ShapeMismatchError(f"modal_feature_filter: input width {hidden.shape[1]} != filter width {params.dim}")
    pooled = tc.scale(tc.matmul(hidden, params.w_l), 1.0 / params.dim)
    logits = tc.leaky_relu(tc.add(pooled, params.b_l), params.slope)
    return tc.softmax(logits, axis=0)


def modal_feature_filter(hidden: Tensor, params: GateFilterParams, return_gate: bool = False):
    """
    Gate an auxiliary modality's context features and re-project them as prompt features.

    Args:
        hidden: L x d BiLSTM output of the audio or visual modality
        params: Gate and bottleneck projections
        return_gate: Also return the L x 1 gate distribution

    Returns:
        L x d prompt features S_m (and the gate when requested)
    """
    hidden = tc.as_tensor(hidden)
    gate = gate_weights(hidden, params)
    length = hidden.shape[0]
    gated = tc.mul(tc.scale(gate, float(length)), hidden)
    bottleneck = tc.sigmoid(tc.add(tc.matmul(gated, params.w_d), params.b_d))
    prompt = tc.add(tc.matmul(bottleneck, params.w_u), params.b_u)
    if return_gate:
        return prompt, gate
    return prompt
