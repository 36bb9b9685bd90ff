"""Oracle checks runnable without any dataset (``fedem-sim selftest``)."""

import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from src.attack import AttackConfig, LabelMode, invert_linear_layer, matching_loss, reconstruct
from src.autodiff import Graph, Node, grad_check
from src.data import Dataset, NormalizationTransform, normalize, partition_iid, synth_blobs
from src.defense import (
    DefenseConfig,
    DefenseMethod,
    GaussianSampler,
    LaplaceSampler,
    PerturbationConfig,
    build_defense,
    clip_gradient,
    project_annulus,
)
from src.evaluation import mse, psnr, ssim
from src.evaluation.metrics import SSIM_K1
from src.federation import Federation, FederationConfig, SeedStreams
from src.models import GradientVector, Model, ModelSpec, ParameterSet

logger = logging.getLogger(__name__)

# Allowed deviation of a sample mean (or mean of squares) in standard errors.
CLT_BOUND = 3.9


@dataclass
class CheckResult:
    """Outcome of one oracle."""

    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "detail": self.detail, "seconds": self.seconds}


def _weights(shape: Tuple[int, ...]) -> np.ndarray:
    """Fixed, non-uniform weights so a weighted sum exercises every output."""
    size = int(np.prod(shape, dtype=np.int64))
    return (1.5 + np.cos(np.arange(size, dtype=np.float64))).reshape(shape)


def _reduce(graph: Graph, node: Node) -> Node:
    return graph.sum(graph.mul(node, graph.constant(_weights(node.shape))))


def op_builders() -> Dict[str, Tuple[Callable, List[Tuple[int, ...]]]]:
    """Scalar graph builders, one per differentiable op, with their leaf shapes."""
    labels = np.array([0, 2, 1])
    return {
        "add": (lambda g, v: _reduce(g, g.add(v[0], v[1])), [(3, 4), (3, 4)]),
        "sub": (lambda g, v: _reduce(g, g.sub(v[0], v[1])), [(3, 4), (3, 4)]),
        "mul": (lambda g, v: _reduce(g, g.mul(v[0], v[1])), [(3, 4), (3, 4)]),
        "scale": (lambda g, v: _reduce(g, g.scale(v[0], -1.7, 0.3)), [(3, 4)]),
        "square": (lambda g, v: _reduce(g, g.square(v[0])), [(3, 4)]),
        "sigmoid": (lambda g, v: _reduce(g, g.sigmoid(v[0])), [(3, 4)]),
        "tanh": (lambda g, v: _reduce(g, g.tanh(v[0])), [(3, 4)]),
        "exp": (lambda g, v: _reduce(g, g.exp(v[0])), [(3, 4)]),
        "matmul": (lambda g, v: _reduce(g, g.matmul(v[0], v[1])), [(3, 4), (4, 2)]),
        "transpose": (lambda g, v: _reduce(g, g.transpose(v[0])), [(3, 4)]),
        "add_bias": (lambda g, v: _reduce(g, g.add_bias(v[0], v[1])), [(3, 4), (4,)]),
        "reshape": (lambda g, v: _reduce(g, g.reshape(v[0], (2, 6))), [(3, 4)]),
        "gather": (lambda g, v: _reduce(g, g.gather(v[0], np.array([3, 0, 0, 2]))), [(3, 4)]),
        "scatter": (lambda g, v: _reduce(g, g.scatter(v[0], np.array([1, 1, 4]), 5)), [(3, 3)]),
        "sum": (lambda g, v: g.square(g.sum(v[0])), [(3, 4)]),
        "broadcast_scalar": (lambda g, v: _reduce(g, g.broadcast_scalar(g.sum(v[0]), (2, 3))), [(2,)]),
        "sum_rows": (lambda g, v: _reduce(g, g.sum_rows(v[0])), [(3, 4)]),
        "broadcast_rows": (lambda g, v: _reduce(g, g.broadcast_rows(v[0], 3)), [(4,)]),
        "sum_cols": (lambda g, v: _reduce(g, g.sum_cols(v[0])), [(3, 4)]),
        "broadcast_cols": (lambda g, v: _reduce(g, g.broadcast_cols(v[0], 4)), [(3,)]),
        "logsumexp_rows": (lambda g, v: _reduce(g, g.logsumexp_rows(v[0])), [(3, 4)]),
        "mean": (lambda g, v: g.square(g.mean(v[0])), [(3, 4)]),
        "log_softmax": (lambda g, v: _reduce(g, g.log_softmax(v[0])), [(3, 4)]),
        "softmax": (lambda g, v: _reduce(g, g.softmax(v[0])), [(3, 4)]),
        "cross_entropy_labels": (lambda g, v: g.softmax_cross_entropy(v[0], labels), [(3, 4)]),
        "cross_entropy_soft": (
            lambda g, v: g.softmax_cross_entropy(v[0], g.softmax(v[1])),
            [(3, 4), (3, 4)],
        ),
        "conv2d": (
            lambda g, v: _reduce(g, g.conv2d(v[0], v[1], v[2], (1, 4, 4), 3)),
            [(2, 16), (9, 2), (2,)],
        ),
        "avg_pool2d": (lambda g, v: _reduce(g, g.avg_pool2d(v[0], (2, 2), 2, 2)), [(2, 8)]),
    }


def tiny_mlp(inputs: int = 4, hidden: int = 3, classes: int = 3) -> Model:
    """Two-layer sigmoid MLP over ``(1, 1, inputs)`` images."""
    return Model(
        ModelSpec(
            input_shape=(1, 1, inputs),
            num_classes=classes,
            layer_widths=[inputs, hidden, classes],
        )
    )


def check_autodiff(points: int = 100, seed: int = 0) -> CheckResult:
    """Finite differences at ``points`` inputs per op, plus an MLP loss and the matching loss."""
    rng = np.random.default_rng(seed)
    worst: Dict[str, float] = {}
    for name, (build, shapes) in op_builders().items():
        worst[name] = max(
            grad_check(build, [rng.normal(size=s) for s in shapes]) for _ in range(points)
        )

    model = tiny_mlp()
    names = [n for n, _ in model.parameter_shapes()]
    shapes = [s for _, s in model.parameter_shapes()]
    x = rng.normal(size=(2, 4))
    y = np.array([0, 2])

    def mlp_loss(graph, leaves):
        nodes = dict(zip(names, leaves))
        return model.loss(graph, nodes, graph.constant(x), y)

    worst["mlp_loss"] = max(
        grad_check(mlp_loss, [rng.normal(size=s) for s in shapes]) for _ in range(points)
    )

    theta = model.init_params(seed)
    target, _ = model.gradient(theta, rng.normal(size=(1, 4)), [1])

    def matching(graph, leaves):
        x_hat, logits = leaves
        return matching_loss(model, theta, x_hat, graph.softmax(logits), target, graph)

    second = max(
        grad_check(matching, [rng.normal(size=(1, 4)), rng.normal(size=(1, 3))])
        for _ in range(points)
    )
    first_order = max(worst.values())
    passed = first_order < 1e-4 and second < 1e-3
    culprit = max(worst, key=worst.get)
    return CheckResult(
        "autodiff",
        passed,
        f"first-order max rel err {first_order:.2e} ({culprit}); second-order {second:.2e}",
    )


def check_linear_inversion(seed: int = 0) -> CheckResult:
    """DLG on one linear layer recovers the closed-form input."""
    rng = np.random.default_rng(seed)
    model = Model(ModelSpec(input_shape=(1, 1, 4), num_classes=3, layer_widths=[4, 3]))
    theta = model.init_params(seed)
    theta = ParameterSet(
        (name, value + 0.1 * rng.normal(size=value.shape)) for name, value in theta.items()
    )
    x = rng.uniform(0.0, 1.0, size=(1, 4))
    g, _ = model.gradient(theta, x, [1])
    closed_form = invert_linear_layer(g["fc0.weight"], g["fc0.bias"])

    cfg = AttackConfig(iterations=5000, learning_rate=0.5, restarts=3, label_mode=LabelMode.KNOWN)
    result = reconstruct(model, theta, g, cfg, np.random.default_rng(seed))
    error = float(np.max(np.abs(result.x_hat.reshape(-1) - closed_form)))
    exact = float(np.max(np.abs(closed_form - x.reshape(-1))))
    return CheckResult(
        "linear-inversion",
        error < 1e-6 and exact < 1e-10,
        f"|x_hat - closed form| {error:.2e}; closed form vs truth {exact:.2e}",
    )


def blob_federation(
    method: DefenseMethod = DefenseMethod.NONE,
    rho_max: float = 8.0,
    num_clients: int = 4,
    rounds: int = 1,
    learning_rate: float = 0.1,
    per_class: int = 8,
    seed: int = 0,
) -> Tuple[Federation, Dataset, Model, ParameterSet]:
    """Small blob problem with equal IID shards, ready to train."""
    data = synth_blobs(2, per_class, 4, seed, image_shape=(1, 2, 2))
    model = Model(ModelSpec(input_shape=(1, 2, 2), num_classes=2, layer_widths=[4, 3, 2]))
    streams = SeedStreams(seed)
    transform = NormalizationTransform.identity(1)
    defense_config = DefenseConfig(method=method, fedem=PerturbationConfig(rho_max=rho_max, rho_min=0.0))
    config = FederationConfig(num_clients=num_clients, rounds=rounds, learning_rate=learning_rate, patience=None)
    federation = Federation(
        config,
        model,
        build_defense(defense_config, model, transform, streams),
        data,
        partition_iid(data, num_clients, streams.generator("partition")),
        data,
        data,
        transform,
        streams,
    )
    return federation, data, model, model.init_params(streams.seed("init"))


def check_fedsgd_equivalence(seed: int = 0) -> CheckResult:
    """One round over equal full-batch shards equals one centralized SGD step."""
    federation, data, model, theta = blob_federation(seed=seed)
    new_theta, _, _ = federation.run_round(theta, 1)
    g, _ = model.gradient(theta, normalize(federation.transform, data.images), data.labels)
    central = theta.step(g, federation.config.learning_rate)
    error = float(np.max(np.abs(new_theta.flatten() - central.flatten())))
    return CheckResult("fedsgd-equivalence", error < 1e-10, f"max |diff| {error:.2e}")


def check_fedem_reduction(rounds: int = 10, seed: int = 0) -> CheckResult:
    """FedEM with rho_max = 0 is bit-identical to no defense."""
    results = []
    for method in (DefenseMethod.NONE, DefenseMethod.FEDEM):
        federation, _, _, theta = blob_federation(method=method, rho_max=0.0, rounds=rounds, seed=seed)
        results.append(federation.train(theta))
    plain, fedem = results
    same_theta = plain.final_theta.equals(fedem.final_theta)
    same_records = [r.to_dict() for r in plain.records] == [r.to_dict() for r in fedem.records]
    return CheckResult(
        "fedem-reduction",
        same_theta and same_records,
        f"theta identical: {same_theta}; records identical: {same_records}",
    )


def check_annulus(calls: int = 100_000, seed: int = 0) -> CheckResult:
    """Randomized projections never leave ``rho_min <= ||delta||_inf <= rho_max``."""
    rng = np.random.default_rng(seed)
    configs = []
    for _ in range(100):
        rho_max = float(rng.uniform(0.5, 16.0))
        configs.append(PerturbationConfig(rho_max=rho_max, rho_min=float(rng.uniform(1e-3, rho_max))))
    violations = 0
    for i in range(calls):
        cfg = configs[i % len(configs)]
        size = int(rng.integers(1, 20))
        kind = i % 4
        if kind == 0:
            delta = np.zeros(size)
        else:
            spread = (cfg.rho_min * 0.5, cfg.rho_max, 4.0 * cfg.rho_max)[kind - 1]
            delta = rng.uniform(-spread, spread, size=size)
        peak = float(np.max(np.abs(project_annulus(delta, cfg))))
        if not cfg.rho_min <= peak <= cfg.rho_max:
            violations += 1
    return CheckResult("annulus", violations == 0, f"{violations} violations in {calls} calls")


def check_noise(draws: int = 1_000_000, clip_vectors: int = 10_000, seed: int = 0) -> CheckResult:
    """Sampler moments within CLT bounds, and the clip postcondition."""
    rng = np.random.default_rng(seed)
    failures = []
    sigma, b = 0.7, 0.4
    # (sampler, variance, variance of x^2)
    cases = {
        "gaussian": (GaussianSampler(sigma), sigma ** 2, 2.0 * sigma ** 4),
        "laplace": (LaplaceSampler(b), 2.0 * b ** 2, 20.0 * b ** 4),
    }
    for name, (sampler, variance, var_of_square) in cases.items():
        z = sampler.sample((draws,), rng)
        mean_bound = CLT_BOUND * math.sqrt(variance / draws)
        var_bound = CLT_BOUND * math.sqrt(var_of_square / draws)
        if abs(z.mean()) > mean_bound:
            failures.append(f"{name} mean {z.mean():.2e} > {mean_bound:.2e}")
        if abs(np.mean(z * z) - variance) > var_bound:
            failures.append(f"{name} variance {np.mean(z * z):.4f} vs {variance:.4f}")

    template = ParameterSet([("w", np.zeros((3, 4))), ("b", np.zeros(4))])
    for _ in range(clip_vectors):
        g = GradientVector.from_flat(template, rng.normal(scale=rng.uniform(0.01, 100.0), size=template.size))
        bound = float(rng.uniform(0.01, 10.0))
        if clip_gradient(g, bound).norm() > bound:
            failures.append(f"clip exceeded bound {bound}")
            break
    return CheckResult("noise", not failures, "; ".join(failures) or "moments and clip within bounds")


def check_metrics() -> CheckResult:
    """Closed-form metric values."""
    rng = np.random.default_rng(0)
    a = rng.uniform(size=(1, 16, 16))
    c1, c2 = 0.2, 0.7
    constant_ssim = (2 * c1 * c2 + SSIM_K1 ** 2) / (c1 ** 2 + c2 ** 2 + SSIM_K1 ** 2)
    checks = {
        "ssim(a,a)": abs(ssim(a, a) - 1.0),
        "psnr(mse=1)": abs(psnr(np.zeros(4), np.ones(4)) - 0.0),
        "psnr(mse=0.01)": abs(psnr(np.zeros(4), np.full(4, 0.1)) - 20.0),
        "mse([0,1],[1,1])": abs(mse(np.array([0.0, 1.0]), np.array([1.0, 1.0])) - 0.5),
        "ssim(constants)": abs(ssim(np.full((1, 16, 16), c1), np.full((1, 16, 16), c2)) - constant_ssim),
    }
    bad = {k: v for k, v in checks.items() if not v <= 1e-9}
    return CheckResult("metrics", not bad, ", ".join(f"{k} off by {v:.1e}" for k, v in bad.items()) or "all exact")


CHECKS: Dict[str, Callable[[], CheckResult]] = {
    "autodiff": check_autodiff,
    "linear-inversion": check_linear_inversion,
    "fedsgd-equivalence": check_fedsgd_equivalence,
    "fedem-reduction": check_fedem_reduction,
    "annulus": check_annulus,
    "noise": check_noise,
    "metrics": check_metrics,
}


def run_selftest(names: Optional[List[str]] = None) -> List[CheckResult]:
    """Run the named oracles (all by default), logging each outcome."""
    results = []
    for name in names or list(CHECKS):
        start = time.perf_counter()
        try:
            result = CHECKS[name]()
        except Exception as e:  # an oracle crashing is a failed oracle
            result = CheckResult(name, False, f"{type(e).__name__}: {e}")
        result.seconds = time.perf_counter() - start
        level = logging.INFO if result.passed else logging.ERROR
        logger.log(level, "%-20s %s  %s (%.1fs)", name, "ok" if result.passed else "FAIL", result.detail, result.seconds)
        results.append(result)
    return results
