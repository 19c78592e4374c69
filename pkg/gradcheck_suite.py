"""
Finite-difference gradient checks for every primitive and model component.

Each case is a scalar function of one tensor (or of a parameter group) built from
seeded random data at small sizes (d <= 8, L <= 5).
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

import tensor_core as tc
from encoders import BiLstmParams, GateFilterParams, encode_context, modal_feature_filter
from graph_rgcn import RgcnParams, build_graph, enhance_text, rgcn_forward
from losses import Affine, ClassifierParams, SclConfig, classify, cross_entropy, modality_ucl, scl_loss
from mpt import MptStack, mpt_forward, prompt_attention
from telemetry import get_tracer, set_attributes
from tensor_core import GradCheckReport, Tensor, make_rng

logger = logging.getLogger(__name__)
tracer = get_tracer(__name__)

MODULES = ("tensor_core", "encoders", "graph_rgcn", "mpt", "losses")
EPS = 1e-5
TOL = 1e-4
# Absolute floor for coordinates whose true gradient is close to zero.
ATOL = 1e-8

Case = Tuple[str, Callable[[Tensor], Tensor], np.ndarray]


@dataclass
class CheckResult:
    module: str
    case: str
    passed: bool
    max_rel_error: float
    checked: int
    excluded: int


def _result(module: str, case: str, reports: Iterable[GradCheckReport]) -> CheckResult:
    reports = list(reports)
    return CheckResult(
        module=module,
        case=case,
        passed=all(r.passed for r in reports),
        max_rel_error=max((r.max_error for r in reports), default=0.0),
        checked=sum(int(r.indices.size) for r in reports),
        excluded=sum(int(r.excluded.sum()) for r in reports),
    )


class Projector:
    """Fixed random weighting that turns any tensor output into a scalar."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.weights: Optional[Tensor] = None

    def __call__(self, out: Tensor) -> Tensor:
        if self.weights is None:
            self.weights = Tensor(self.rng.standard_normal(out.shape))
        return tc.sum_(tc.mul(out, self.weights))


def _check(fn: Callable[[Tensor], Tensor], x: np.ndarray, max_coords: Optional[int] = None) -> GradCheckReport:
    return tc.grad_check(fn, Tensor(x), eps=EPS, tol=TOL, atol=ATOL, max_coords=max_coords)


def _check_params(loss_fn: Callable[[], Tensor], params: Dict[str, Tensor], max_coords: Optional[int] = None):
    return list(tc.grad_check_params(loss_fn, params, eps=EPS, tol=TOL, atol=ATOL, max_coords=max_coords).values())


def away_from_zero(rng: np.random.Generator, shape) -> np.ndarray:
    x = rng.standard_normal(shape)
    return np.sign(x) * (np.abs(x) + 0.1)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

SHAPES = [(4,), (2, 3), (3, 2), (2, 3, 2), (1, 5)]
MATRIX_SHAPES = [(2, 3), (3, 2), (4, 4), (1, 5), (2, 2, 3)]


def _elementwise_cases(rng: np.random.Generator, shape) -> List[Case]:
    last = len(shape) - 1
    normal = rng.standard_normal
    return [
        (f"scale{shape}", lambda t: tc.scale(t, -1.7), normal(shape)),
        (f"sum{shape}", lambda t: tc.sum_(t, axis=last), normal(shape)),
        (f"mean{shape}", lambda t: tc.mean(t, axis=0, keepdims=True), normal(shape)),
        (f"softmax{shape}", lambda t: tc.softmax(t, axis=last), normal(shape)),
        (f"log_softmax{shape}", lambda t: tc.log_softmax(t, axis=0), normal(shape)),
        (f"sigmoid{shape}", tc.sigmoid, normal(shape)),
        (f"tanh{shape}", tc.tanh, normal(shape)),
        (f"relu{shape}", tc.relu, away_from_zero(rng, shape)),
        (f"leaky_relu{shape}", lambda t: tc.leaky_relu(t, 0.2), away_from_zero(rng, shape)),
        (f"exp{shape}", tc.exp, normal(shape)),
        (f"log{shape}", tc.log, rng.uniform(0.5, 2.0, size=shape)),
        (f"layer_norm{shape}", tc.layer_norm, normal(shape)),
        (f"l2_normalize{shape}", lambda t: tc.l2_normalize(t, axis=last), normal(shape)),
        (f"dropout_eval{shape}", lambda t: tc.dropout(t, 0.3, None, training=False), normal(shape)),
        (f"reshape{shape}", lambda t: tc.reshape(t, (t.size,)), normal(shape)),
        (f"slice{shape}", lambda t: tc.slice_(t, 0, 1, axis=last), normal(shape)),
    ]


def _matrix_cases(rng: np.random.Generator, shape) -> List[Case]:
    normal = rng.standard_normal
    lead, rows, cols = shape[:-2], shape[-2], shape[-1]
    right = Tensor(normal(lead + (cols, 3)))
    left = Tensor(normal(lead + (2, rows)))
    row = Tensor(normal((cols,)))
    full = Tensor(normal(shape))
    x_norm = Tensor(normal((3, cols)))
    bias = Tensor(normal((cols,)))
    return [
        (f"matmul_left{shape}", lambda t: tc.matmul(t, right), normal(shape)),
        (f"matmul_right{shape}", lambda t: tc.matmul(left, t), normal(shape)),
        (f"add{shape}", lambda t: tc.add(t, row), normal(shape)),
        (f"add_broadcast{shape}", lambda t: tc.add(full, t), normal((cols,))),
        (f"sub{shape}", lambda t: tc.sub(row, t), normal(shape)),
        (f"mul{shape}", lambda t: tc.mul(t, row), normal(shape)),
        (f"mul_broadcast{shape}", lambda t: tc.mul(full, t), normal((cols,))),
        (f"concat{shape}", lambda t: tc.concat([t, full, t], axis=-1), normal(shape)),
        (f"transpose{shape}", tc.transpose, normal(shape)),
        (f"layer_norm_gain{shape}", lambda t: tc.layer_norm(x_norm, t, bias), normal((cols,))),
    ]


def check_primitives(instances: int = 5, seed: int = 0) -> List[CheckResult]:
    """One check per primitive and shape; ``instances`` shapes per primitive."""
    rng = make_rng(seed, "gradcheck")
    cases: List[Case] = []
    for shape in SHAPES[:instances]:
        cases += _elementwise_cases(rng, shape)
    for shape in MATRIX_SHAPES[:instances]:
        cases += _matrix_cases(rng, shape)
    results = []
    for name, fn, x in cases:
        project = Projector(rng)
        results.append(_result("tensor_core", name, [_check(lambda t, f=fn, p=project: p(f(t)), x)]))
    return results


# ---------------------------------------------------------------------------
# Model components
# ---------------------------------------------------------------------------


def check_encoders(instances: int = 5, seed: int = 0, d: int = 8) -> List[CheckResult]:
    rng = make_rng(seed, "gradcheck")
    results = []
    for k in range(instances):
        length = 1 + k % 4 + (1 if k >= 4 else 0)
        features = rng.standard_normal((length, 3))
        lstm = BiLstmParams.init(rng, 3, d)
        lstm.bias.data += 0.1 * rng.standard_normal(lstm.bias.shape)
        project = Projector(rng)
        reports = _check_params(lambda: project(encode_context(features, lstm)), lstm.parameters())
        results.append(_result("encoders", f"encode_context L={length}", reports))

        hidden = rng.standard_normal((length, d))
        gate = GateFilterParams.init(rng, d)
        gate.w_l.data += 0.3 * rng.standard_normal(gate.w_l.shape)
        project = Projector(rng)
        reports = _check_params(lambda: project(modal_feature_filter(Tensor(hidden), gate)), gate.parameters())
        reports.append(_check(lambda t: project(modal_feature_filter(t, gate)), hidden))
        results.append(_result("encoders", f"modal_feature_filter L={length}", reports))
    return results


def check_graph(instances: int = 5, seed: int = 0, d: int = 8) -> List[CheckResult]:
    rng = make_rng(seed, "gradcheck")
    results = []
    for k in range(instances):
        length = 5 if k == 0 else int(rng.integers(2, 6))
        window = 2 if k == 0 else int(rng.integers(1, 5))
        speakers = rng.integers(0, 2, size=length).tolist()
        graph = build_graph(speakers, window, 2)
        params = RgcnParams.init(rng, d, 2)
        hidden = rng.standard_normal((length, d))
        project = Projector(rng)

        def run(h):
            return project(enhance_text(rgcn_forward(h, graph, params, "speaker"), rgcn_forward(h, graph, params, "context")))

        reports = _check_params(lambda: run(Tensor(hidden)), params.parameters())
        reports.append(_check(run, hidden))
        results.append(_result("graph_rgcn", f"rgcn L={length} w={window}", reports))
    return results


def check_mpt(instances: int = 5, seed: int = 0, d: int = 8, max_coords: int = 24) -> List[CheckResult]:
    rng = make_rng(seed, "gradcheck")
    results = []
    for k in range(instances):
        length = (3, 1, 2, 4, 5)[k % 5]
        stack = MptStack.init(rng, d, layers=2, heads=2, d_ff=2 * d, dropout=0.0)
        prompt = rng.standard_normal((length, d))
        text = rng.standard_normal((length, d))
        project = Projector(rng)
        reports = _check_params(
            lambda: project(mpt_forward(Tensor(prompt), Tensor(text), stack)), stack.parameters(), max_coords
        )
        reports.append(_check(lambda t: project(mpt_forward(t, Tensor(text), stack)), prompt))
        reports.append(_check(lambda t: project(mpt_forward(Tensor(prompt), t, stack)), text))
        results.append(_result("mpt", f"mpt_forward L={length}", reports))

        block = stack.blocks[0]
        project = Projector(rng)
        reports = [_check(lambda t: project(prompt_attention(t, Tensor(text), block)), prompt)]
        reports.append(_check(lambda t: project(prompt_attention(Tensor(prompt), t, block)), text))
        results.append(_result("mpt", f"prompt_attention L={length}", reports))
    return results


def check_losses(instances: int = 5, seed: int = 0, d: int = 8) -> List[CheckResult]:
    rng = make_rng(seed, "gradcheck")
    results = []
    for k in range(instances):
        count = 2 + k
        fused = rng.standard_normal((count, 2 * d))
        feats = rng.standard_normal((count, d))
        predictor = Affine.init(rng, 2 * d, d)
        reports = _check_params(lambda: modality_ucl(Tensor(fused), Tensor(feats), predictor), predictor.parameters())
        reports.append(_check(lambda t: modality_ucl(t, Tensor(feats), predictor), fused))
        reports.append(_check(lambda t: modality_ucl(Tensor(fused), t, predictor), feats))
        results.append(_result("losses", f"ucl B={count}", reports))

        labels = np.arange(count) % 2
        cfg = SclConfig(tau=0.5, projection=Affine.init(rng, 2 * d, d))
        reports = _check_params(lambda: scl_loss(Tensor(feats), Tensor(fused), labels, cfg), cfg.parameters())
        reports.append(_check(lambda t: scl_loss(t, Tensor(fused), labels, cfg), feats))
        reports.append(_check(lambda t: scl_loss(Tensor(feats), t, labels, cfg), fused))
        results.append(_result("losses", f"scl B={count}", reports))

        classes = 3
        head = ClassifierParams.init(rng, 3 * d, classes)
        fusion = rng.standard_normal((count, 3 * d))
        targets = rng.integers(0, classes, size=count)
        reports = _check_params(lambda: cross_entropy(classify(Tensor(fusion), head)[0], targets), head.parameters())
        reports.append(_check(lambda t: cross_entropy(classify(t, head)[0], targets), fusion))
        results.append(_result("losses", f"cross_entropy B={count}", reports))
    return results


SUITES: Dict[str, Callable[..., List[CheckResult]]] = {
    "tensor_core": check_primitives,
    "encoders": check_encoders,
    "graph_rgcn": check_graph,
    "mpt": check_mpt,
    "losses": check_losses,
}


def run_suite(modules: Optional[Sequence[str]] = None, instances: int = 5, seed: int = 0) -> List[CheckResult]:
    """
    Run the gradient checks of the named modules (all of them by default).

    Returns:
        One CheckResult per case, in module order
    """
    modules = list(modules) if modules else list(MODULES)
    unknown = [m for m in modules if m not in SUITES]
    if unknown:
        raise ValueError(f"Unknown grad-check module(s) {unknown}; expected {list(MODULES)}")
    results: List[CheckResult] = []
    for module in modules:
        with tracer.start_as_current_span("grad_check") as span:
            module_results = SUITES[module](instances=instances, seed=seed)
            failed = [r.case for r in module_results if not r.passed]
            set_attributes(span, module=module, cases=len(module_results), failed=len(failed))
            if failed:
                logger.warning("%s: %d failing grad-check case(s): %s", module, len(failed), ", ".join(failed))
            else:
                logger.info("%s: %d grad-check cases passed", module, len(module_results))
            results.extend(module_results)
    return results
