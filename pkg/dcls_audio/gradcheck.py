"""
Finite-difference gradient suites (64-bit) for every differentiable op.

Each case builds a scalar loss ``sum(R * f(inputs))`` with a random
projection ``R``, compares the analytic gradient of every input against
central differences on a sample of coordinates, and reports the worst
relative error.
"""
import logging
from dataclasses import dataclass, replace
from typing import Callable, Dict, Iterator, List, Tuple

import numpy as np

from dcls_audio.dcls import BILINEAR, GAUSS, DclsParams, construct_kernel, construct_kernel_vjp
from dcls_audio.model import (
    ConvNeXtBlock,
    DclsConv2d,
    ForwardContext,
    Layer,
    ModelSpec,
    build_model,
)
from dcls_audio.tensor_core import (
    ConvGeometry,
    dense_conv2d,
    dense_conv2d_vjp,
    depthwise_conv2d,
    depthwise_conv2d_vjp,
    finite_diff_check,
    gelu,
    gelu_vjp,
    global_avg_pool,
    global_avg_pool_vjp,
    layer_norm,
    layer_norm_vjp,
    pointwise_linear,
    pointwise_linear_vjp,
)
from dcls_audio.train import bce_multilabel

logger = logging.getLogger(__name__)

SUITES = ("tensor", "dcls", "block")
THRESHOLD = 1e-4
MODEL_THRESHOLD = 1e-3
SAMPLED_ENTRIES = 12


@dataclass
class GradcheckResult:
    suite: str
    case: str
    seed: int
    max_rel_err: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.threshold


Loss = Callable[[Dict[str, np.ndarray]], float]


def _max_error(loss: Loss, inputs: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], rng: np.random.Generator) -> float:
    worst = 0.0
    for name, array in inputs.items():
        picked = rng.choice(array.size, size=min(SAMPLED_ENTRIES, array.size), replace=False)

        def along(value: np.ndarray, name: str = name) -> float:
            return loss({**inputs, name: value})

        worst = max(worst, finite_diff_check(along, array, grads[name], indices=picked))
    return worst


# ---------------------------------------------------------------------------
# tensor-core ops
# ---------------------------------------------------------------------------

def _conv_case(depthwise: bool, rng: np.random.Generator) -> float:
    if depthwise:
        geom = ConvGeometry(5, 3, 2, 1, 2, 1, groups=3)
        x, kernel = rng.normal(size=(2, 3, 9, 8)), rng.normal(size=(3, 1, 5, 3))
        op, vjp = depthwise_conv2d, depthwise_conv2d_vjp
    else:
        geom = ConvGeometry(2, 3, 2, 3, 1, 0)
        x, kernel = rng.normal(size=(2, 2, 8, 9)), rng.normal(size=(3, 2, 2, 3))
        op, vjp = dense_conv2d, dense_conv2d_vjp
    proj = rng.normal(size=op(x, kernel, geom).shape)
    grad_x, grad_k = vjp(proj, x, kernel, geom)

    def loss(v):
        return float(np.sum(proj * op(v["x"], v["kernel"], geom)))

    return _max_error(loss, {"x": x, "kernel": kernel}, {"x": grad_x, "kernel": grad_k}, rng)


def _linear_case(rng):
    x, w, b = rng.normal(size=(2, 3, 4, 5)), rng.normal(size=(6, 5)), rng.normal(size=6)
    proj = rng.normal(size=(2, 3, 4, 6))
    gx, gw, gb = pointwise_linear_vjp(proj, x, w)

    def loss(v):
        return float(np.sum(proj * pointwise_linear(v["x"], v["w"], v["b"])))

    return _max_error(loss, {"x": x, "w": w, "b": b}, {"x": gx, "w": gw, "b": gb}, rng)


def _layer_norm_case(rng):
    x, gamma, beta = rng.normal(size=(2, 3, 6)), rng.normal(size=6), rng.normal(size=6)
    proj = rng.normal(size=x.shape)
    gx, gg, gb = layer_norm_vjp(proj, x, gamma)

    def loss(v):
        return float(np.sum(proj * layer_norm(v["x"], v["gamma"], v["beta"])))

    return _max_error(loss, {"x": x, "gamma": gamma, "beta": beta}, {"x": gx, "gamma": gg, "beta": gb}, rng)


def _gelu_case(rng):
    x = rng.normal(size=(3, 7)) * 2.0
    proj = rng.normal(size=x.shape)
    return _max_error(lambda v: float(np.sum(proj * gelu(v["x"]))), {"x": x}, {"x": gelu_vjp(proj, x)}, rng)


def _pool_case(rng):
    x = rng.normal(size=(2, 3, 4, 5))
    proj = rng.normal(size=(2, 3))
    grad = global_avg_pool_vjp(proj, x.shape)
    return _max_error(lambda v: float(np.sum(proj * global_avg_pool(v["x"]))), {"x": x}, {"x": grad}, rng)


# ---------------------------------------------------------------------------
# DCLS kernel construction
# ---------------------------------------------------------------------------

def _dcls_case(version: str, sharing: str, rng: np.random.Generator) -> float:
    c, m, s = 3, 5, 9
    pos_c = c if sharing == "channel" else 1
    extent = (s - 1) / 2
    # off-lattice and away from the border: integer part + U(0.2, 0.8)
    positions = rng.integers(-int(extent) + 1, int(extent) - 1, size=(2, pos_c, m)) + rng.uniform(0.2, 0.8, (2, pos_c, m))
    sigmas = rng.uniform(0.5, 2.0, size=(2, pos_c, m)) * rng.choice([-1.0, 1.0], size=(2, pos_c, m))
    inputs = {"weight": rng.normal(size=(c, m)), "P": positions}
    if version == GAUSS:
        inputs["SIG"] = sigmas

    def params(v) -> DclsParams:
        return DclsParams(c, m, s, version, v["weight"], v["P"], v.get("SIG"))

    proj = rng.normal(size=(c, 1, s, s))
    gw, gp, gsig = construct_kernel_vjp(proj, params(inputs))
    grads = {"weight": gw, "P": gp}
    if version == GAUSS:
        grads["SIG"] = gsig
    return _max_error(lambda v: float(np.sum(proj * construct_kernel(params(v)))), inputs, grads, rng)


# ---------------------------------------------------------------------------
# Blocks and the toy model
# ---------------------------------------------------------------------------

def _layer_case(layer: Layer, x: np.ndarray, rng: np.random.Generator) -> float:
    """Check the input gradient and every parameter gradient of ``layer``."""
    ctx = ForwardContext(training=False, tape={})
    out = layer.forward(x, ctx)
    proj = rng.normal(size=out.shape)
    layer.zero_grad()
    grad_x = layer.backward(proj, ctx)

    params = dict(layer.named_parameters())

    def loss(v):
        saved = {name: p.value for name, p in params.items()}
        try:
            for name, p in params.items():
                p.value = v[name]
            return float(np.sum(proj * layer.forward(v["input"], ForwardContext())))
        finally:
            for name, p in params.items():
                p.value = saved[name]

    inputs = {"input": x, **{name: p.value for name, p in params.items()}}
    grads = {"input": grad_x, **{name: p.grad for name, p in params.items()}}
    return _max_error(loss, inputs, grads, rng)


def _block_case(dcls_version, rng):
    block = ConvNeXtBlock(4, 7, rng, layer_scale_init=1.0, dtype=np.float64)
    if dcls_version is not None:
        params = DclsParams(
            4, 4, 7, dcls_version,
            weight=rng.normal(size=(4, 4)),
            P=rng.integers(-2, 2, size=(2, 4, 4)) + rng.uniform(0.2, 0.8, size=(2, 4, 4)),
            SIG=rng.uniform(0.5, 1.5, size=(2, 4, 4)) if dcls_version == GAUSS else None,
        )
        block.dwconv = DclsConv2d(params)
    block.dwconv.bias.value = rng.normal(size=4)
    return _layer_case(block, rng.normal(size=(2, 4, 6, 6)), rng)


def _model_case(rng):
    spec = replace(ModelSpec.toy(), layer_scale_init=1.0, conv_method="dcls", dcls_size=5, dcls_count=3)
    model = build_model(spec, rng, dtype=np.float64)
    # O(1) weights keep every gradient well above finite-difference noise
    for param in model.parameters():
        if param.group == "weight":
            param.value = rng.normal(0.0, 0.5, size=param.value.shape)
    x = rng.normal(size=(2, 1, 8, 64))
    targets = rng.uniform(size=(2, spec.num_classes))
    ctx = ForwardContext(training=False, tape={})
    model.zero_grad()
    _, grad = bce_multilabel(model.forward(x, ctx), targets)
    model.backward(grad, ctx)

    params = dict(model.named_parameters())

    def loss(v):
        saved = {name: p.value for name, p in params.items()}
        try:
            for name, p in params.items():
                p.value = v[name]
            return bce_multilabel(model.forward(x, ForwardContext()), targets)[0]
        finally:
            for name, p in params.items():
                p.value = saved[name]

    return _max_error(loss, {name: p.value for name, p in params.items()}, {name: p.grad for name, p in params.items()}, rng)


def _cases(suite: str) -> Iterator[Tuple[str, Callable[[np.random.Generator], float], float]]:
    if suite == "tensor":
        yield "depthwise_conv2d", lambda rng: _conv_case(True, rng), THRESHOLD
        yield "dense_conv2d", lambda rng: _conv_case(False, rng), THRESHOLD
        yield "pointwise_linear", _linear_case, THRESHOLD
        yield "layer_norm", _layer_norm_case, THRESHOLD
        yield "gelu", _gelu_case, THRESHOLD
        yield "global_avg_pool", _pool_case, THRESHOLD
    elif suite == "dcls":
        for version in (GAUSS, BILINEAR):
            for sharing in ("channel", "layer"):
                yield f"dcls_{version}_{sharing}", (lambda rng, v=version, s=sharing: _dcls_case(v, s, rng)), THRESHOLD
    elif suite == "block":
        yield "block_dsc7", lambda rng: _block_case(None, rng), THRESHOLD
        yield "block_dcls_gauss", lambda rng: _block_case(GAUSS, rng), THRESHOLD
        yield "block_dcls_bilinear", lambda rng: _block_case(BILINEAR, rng), THRESHOLD
        yield "toy_model_bce", _model_case, MODEL_THRESHOLD
    else:
        raise ValueError(f"unknown gradcheck suite {suite!r}, expected one of {SUITES} or 'all'")


def run_gradcheck(suite: str = "all", seeds: int = 10, base_seed: int = 0) -> List[GradcheckResult]:
    """
    Run one suite (or all) over ``seeds`` seeds.

    Returns:
        List[GradcheckResult]: One result per (case, seed)
    """
    if seeds < 1:
        raise ValueError(f"seeds must be at least 1, got {seeds}")
    suites = SUITES if suite == "all" else (suite,)
    results = []
    for name in suites:
        for case, run, threshold in _cases(name):
            for offset in range(seeds):
                seed = base_seed + offset
                error = run(np.random.default_rng([seed, len(results)]))
                results.append(GradcheckResult(name, case, seed, error, threshold))
                logger.debug("%s/%s seed %d: %.3e", name, case, seed, error)
    return results


def summarize(results: List[GradcheckResult]) -> List[Tuple[str, float, float, bool]]:
    """Worst error per case: (case, max_rel_err, threshold, passed)."""
    worst: Dict[str, GradcheckResult] = {}
    for result in results:
        if result.case not in worst or result.max_rel_err > worst[result.case].max_rel_err:
            worst[result.case] = result
    return [(case, r.max_rel_err, r.threshold, r.passed) for case, r in worst.items()]
