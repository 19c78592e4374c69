"""
Windowed conversation graph and relational graph convolutions over it.

Node i aggregates from every utterance j within ``w`` positions of it (itself
included). Each edge carries two relation labels: the ordered speaker pair
(speaker_i, speaker_j) and the temporal direction of j relative to i.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

import tensor_core as tc
from tensor_core import ParameterGroup, ShapeMismatchError, Tensor

logger = logging.getLogger(__name__)

PAST, PRESENT, FUTURE = 0, 1, 2
CONTEXT_RELATIONS = 3
FAMILIES = ("speaker", "context")
MAX_WINDOW = 4


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    speaker_rel: int
    context_rel: int


@dataclass
class ConversationGraph:
    num_nodes: int
    window: int
    num_speakers: int
    edges: List[Edge] = field(default_factory=list)

    @property
    def speaker_relations(self) -> int:
        return self.num_speakers * self.num_speakers

    def relation_count(self, family: str) -> int:
        if family == "speaker":
            return self.speaker_relations
        if family == "context":
            return CONTEXT_RELATIONS
        raise GraphError(f"Unknown relation family '{family}' (expected one of {FAMILIES})")

    def relation_of(self, edge: Edge, family: str) -> int:
        return edge.speaker_rel if family == "speaker" else edge.context_rel


def expected_edge_count(length: int, window: int) -> int:
    """Closed-form edge count: sum over nodes of their in-window neighbourhood size."""
    return sum(min(i + window, length - 1) - max(i - window, 0) + 1 for i in range(length))


def build_graph(speakers: Sequence[int], w: int, num_speakers: int = None) -> ConversationGraph:
    """
    Build the relation-typed window graph of one conversation.

    Args:
        speakers: Speaker id of every utterance, in order
        w: Context window in [1, 4]
        num_speakers: Speaker bound M; ids are folded modulo M. Defaults to
            max(2, largest id + 1)

    Returns:
        ConversationGraph with one edge per (i, j) pair, |i - j| <= w
    """
    if len(speakers) == 0:
        raise GraphError("Cannot build a graph for an empty conversation")
    if not 1 <= w <= MAX_WINDOW:
        raise GraphError(f"Window w={w} outside [1, {MAX_WINDOW}]")
    if num_speakers is None:
        num_speakers = max(2, max(int(s) for s in speakers) + 1)
    if num_speakers < 1:
        raise GraphError(f"num_speakers must be positive, got {num_speakers}")

    length = len(speakers)
    folded = [int(s) % num_speakers for s in speakers]
    edges = []
    for i in range(length):
        for j in range(max(i - w, 0), min(i + w, length - 1) + 1):
            context = PAST if j < i else PRESENT if j == i else FUTURE
            edges.append(Edge(i, j, folded[i] * num_speakers + folded[j], context))
    return ConversationGraph(num_nodes=length, window=w, num_speakers=num_speakers, edges=edges)


def relation_adjacency(graph: ConversationGraph, family: str, relations: int = None) -> np.ndarray:
    """
    Row-normalised adjacency per relation, shape (R, L, L).

    Entry [r, i, j] is 1/|N_i^r| when j is an r-neighbour of i. Relations with no
    neighbours for i leave row i zero.
    """
    relations = relations if relations is not None else graph.relation_count(family)
    adjacency = np.zeros((relations, graph.num_nodes, graph.num_nodes))
    for edge in graph.edges:
        r = graph.relation_of(edge, family)
        if not 0 <= r < relations:
            raise GraphError(f"{family} relation id {r} outside [0, {relations})")
        adjacency[r, edge.src, edge.dst] = 1.0
    counts = adjacency.sum(axis=2, keepdims=True)
    np.divide(adjacency, counts, out=adjacency, where=counts > 0)
    return adjacency


@dataclass
class RgcnParams(ParameterGroup):
    """One relational layer for both families: (M^2, d, d) speaker and (3, d, d) context weights."""

    speaker: Tensor
    context: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, num_speakers: int) -> "RgcnParams":
        def family(count):
            return tc.parameter(np.stack([tc.xavier_uniform(rng, d, d).data for _ in range(count)]))

        return cls(speaker=family(num_speakers * num_speakers), context=family(CONTEXT_RELATIONS))

    def weights(self, family: str) -> Tensor:
        if family not in FAMILIES:
            raise GraphError(f"Unknown relation family '{family}' (expected one of {FAMILIES})")
        return getattr(self, family)


def rgcn_forward(hidden: Tensor, graph: ConversationGraph, params: RgcnParams, family: str) -> Tensor:
    """
    One relational convolution: out_i = relu(sum_r sum_{j in N_i^r} W_r h_j / |N_i^r|).

    Args:
        hidden: L x d node features
        graph: Graph over the same L utterances
        params: Relation weights; only the chosen family is used
        family: ``speaker`` or ``context``

    Returns:
        L x d aggregated features
    """
    hidden = tc.as_tensor(hidden)
    weights = params.weights(family)
    relations, d, _ = weights.shape
    if hidden.ndim != 2 or hidden.shape[0] != graph.num_nodes:
        raise ShapeMismatchError(f"rgcn_forward: features {hidden.shape} do not match a {graph.num_nodes}-node graph")
    if hidden.shape[1] != d:
        raise ShapeMismatchError(f"rgcn_forward: feature width {hidden.shape[1]} != relation weight width {d}")
    length = graph.num_nodes

    adjacency = Tensor(relation_adjacency(graph, family, relations))
    # All relation transforms in one product: column block r of the (d, R*d) matrix is W_r.
    stacked = tc.reshape(tc.transpose(weights, (1, 0, 2)), (d, relations * d))
    transformed = tc.transpose(tc.reshape(tc.matmul(hidden, stacked), (length, relations, d)), (1, 0, 2))
    messages = tc.matmul(adjacency, transformed)
    return tc.relu(tc.sum_(messages, axis=0))


def rgcn_stack(hidden: Tensor, graph: ConversationGraph, layers: Sequence[RgcnParams], family: str) -> Tensor:
    """Apply ``len(layers)`` relational convolutions of one family in sequence."""
    if not layers:
        raise GraphError("rgcn_stack needs at least one layer")
    out = hidden
    for layer in layers:
        out = rgcn_forward(out, graph, layer, family)
    return out


def enhance_text(speaker_aware: Tensor, context_aware: Tensor) -> Tensor:
    """Element-wise sum of the speaker-aware and context-aware features."""
    speaker_aware, context_aware = tc.as_tensor(speaker_aware), tc.as_tensor(context_aware)
    if speaker_aware.shape != context_aware.shape:
        raise ShapeMismatchError(f"enhance_text: shapes {speaker_aware.shape} and {context_aware.shape} differ")
    return tc.add(speaker_aware, context_aware)
