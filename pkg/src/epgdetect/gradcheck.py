"""Central finite-difference verification of every autodiff op and a small net.

Each op check builds ``loss = sum(op(inputs) * probe)`` with a fixed random
probe, so every output element contributes a distinct weight, and compares
the analytic gradient of every input against central differences in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import NetConfig, build

OP_TOLERANCE = 1e-4
NET_TOLERANCE = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tolerance)


def _probe_loss(out: ad.Node, probe: np.ndarray) -> ad.Node:
    """``sum(out * probe)`` as a scalar graph node."""

    def _bw(g):
        out._accumulate(g * probe)

    return ad.Node(np.asarray((out.value * probe).sum()), (out,), "probe", _bw, requires_grad=True)


def check_op(name, fn, inputs: dict, rng, eps=1e-6, tol=OP_TOLERANCE) -> CheckResult:
    """``fn(**nodes) -> Node``; gradients checked w.r.t. every array in ``inputs``."""
    params = {k: ad.Param(np.asarray(v, np.float64), k) for k, v in inputs.items()}
    out = fn(**{k: p.node for k, p in params.items()})
    probe = rng.standard_normal(out.shape)
    ad.backward(_probe_loss(out, probe), list(params.values()))
    analytic = {k: p.grad.copy() for k, p in params.items()}

    def f():
        with ad.no_grad():
            return float((fn(**{k: p.node for k, p in params.items()}).value * probe).sum())

    worst = 0.0
    for k, p in params.items():
        numeric = ad.numerical_grad(f, p.node.value, eps)
        worst = max(worst, ad.relative_error(analytic[k], numeric))
    return CheckResult(name, worst, tol)


def _bn_params(c, rng):
    mean = ad.Param(rng.standard_normal(c), "rm", trainable=False)
    var = ad.Param(rng.uniform(0.5, 2.0, c), "rv", trainable=False)
    return mean, var


def op_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    r = rng.standard_normal
    results = []
    add = lambda a, b: ad.add(a, b)  # noqa: E731
    results.append(check_op("add", add, {"a": r((2, 5, 3)), "b": r((2, 5, 3))}, rng))
    # keep relu inputs away from the kink so differences stay one-sided-free
    x = r((2, 7, 3))
    x = np.where(np.abs(x) < 0.05, 0.3, x)
    results.append(check_op("relu", lambda x: ad.relu(x), {"x": x}, rng))
    results.append(check_op("sum_all", lambda x: ad.sum_all(x), {"x": r((3, 4))}, rng))
    results.append(check_op("flatten", lambda x: ad.flatten(x), {"x": r((2, 4, 3))}, rng))
    results.append(check_op("pad_channels", lambda x: ad.pad_channels(x, 6), {"x": r((2, 4, 3))}, rng))
    for stride in (1, 2, 3):
        for width in (1, 4, 5):
            results.append(check_op(
                f"conv1d(w={width},s={stride})",
                lambda x, k, b, s=stride: ad.conv1d(x, k, b, s),
                {"x": r((2, 11, 3)), "k": r((width, 3, 4)), "b": r(4)}, rng,
            ))
    for stride in (1, 2):
        # distinct values so the max is unique within every window
        vals = rng.permutation(2 * 10 * 3).reshape(2, 10, 3) * 0.1
        results.append(check_op(f"maxpool1d(s={stride})", lambda x, s=stride: ad.maxpool1d(x, s, s), {"x": vals}, rng))
    rm, rv = _bn_params(3, rng)
    for training in (True, False):
        results.append(check_op(
            f"batchnorm(train={training})",
            lambda x, g, b, t=training: ad.batchnorm(x, g, b, rm, rv, t),
            {"x": r((3, 5, 3)), "g": rng.uniform(0.5, 1.5, 3), "b": r(3)}, rng,
        ))

    def drop(x):
        return ad.dropout(x, 0.3, True, ad.dropout_rng(seed, 7, 1))

    results.append(check_op("dropout", drop, {"x": r((2, 6, 3))}, rng))
    results.append(check_op("dense", lambda x, w, b: ad.dense(x, w, b), {"x": r((4, 6)), "w": r((6, 2)), "b": r(2)}, rng))
    labels = rng.integers(0, 3, 5)
    results.append(check_op("softmax_cross_entropy", lambda z: ad.softmax_cross_entropy(z, labels)[0],
                            {"z": r((5, 3))}, rng))
    return results


def composite_config() -> NetConfig:
    return NetConfig.toy(n_blocks=3, base_filters=3, input_len=32, filter_width=4)


def net_check(seed: int = 0, eps=1e-6, tol=NET_TOLERANCE) -> CheckResult:
    """Every trainable parameter of a 3-block net, training mode, float64."""
    cfg = composite_config()
    model = build(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    # non-zero head so gradients reach the whole network
    model.params["dense.weights"].value = rng.standard_normal(model.params["dense.weights"].value.shape) * 0.3
    x = rng.standard_normal((4, cfg.input_len, 1))
    y = np.array([0, 1, 1, 0])
    model.step = 3
    params = model.trainable()

    def loss_node():
        return ad.softmax_cross_entropy(model.logits(x, training=True), y)[0]

    ad.backward(loss_node(), params)
    analytic = [p.grad.copy() for p in params]

    def f():
        with ad.no_grad():
            return float(loss_node().value)

    numeric = [ad.numerical_grad(f, p.node.value, eps) for p in params]
    # one flat vector: conv biases feeding a training-mode BN have an exactly
    # zero gradient, so the error floor must come from the whole network's scale
    flat = lambda gs: np.concatenate([g.ravel() for g in gs])  # noqa: E731
    return CheckResult("3-block net", ad.relative_error(flat(analytic), flat(numeric)), tol)


def run_suite(seed: int = 0) -> list[CheckResult]:
    return op_checks(seed) + [net_check(seed)]
