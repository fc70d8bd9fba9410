"""
kafforge - Gradient Audit
=========================
Central finite differences against every hand-written backward pass: the base
kernels, each layer type, the KAF / multi-KAF parameters and a composed
network trained on the full regularized loss.

Each check builds a scalar L = sum(upstream * f(inputs)) from seeded random
data, perturbs every input/parameter entry by +-h and compares with the
analytic gradient.
"""

from dataclasses import dataclass

import numpy as np

import kaf
import nn
from data import one_hot_batch
from kernels import KernelKind, KernelSpec, RQVariant, eval_kernel, eval_kernel_grad_s

STEP = 1e-6
# entries closer than this are equal; a zero analytic gradient (bias ahead
# of batchnorm) leaves only finite-difference roundoff
ABS_TOLERANCE = 1e-8
LAYER_THRESHOLD = 1e-5
NETWORK_THRESHOLD = 1e-4


@dataclass(frozen=True)
class AuditResult:
    name: str
    error: float
    threshold: float

    @property
    def passed(self):
        return bool(self.error < self.threshold)


# ============================================================================
# FINITE DIFFERENCES
# ============================================================================

def numeric_gradient(loss, x, h=STEP):
    """Central differences of the zero-argument scalar `loss` w.r.t. array x (perturbed in place)"""
    flat = x.reshape(-1)
    if not np.shares_memory(flat, x):
        raise ValueError("numeric_gradient needs a contiguous array")
    grad = np.zeros(x.size)
    for i in range(x.size):
        original = flat[i]
        flat[i] = original + h
        plus = loss()
        flat[i] = original - h
        minus = loss()
        flat[i] = original
        grad[i] = (plus - minus) / (2.0 * h)
    return grad.reshape(x.shape)


def relative_error(analytic, numeric, atol=ABS_TOLERANCE):
    """
    Max elementwise relative error between two gradient arrays

    An entry whose absolute difference is below `atol` counts as exact
    (0); any other entry scores |a - n| / max(|a|, |n|). A vanishing
    analytic entry therefore passes only on an absolute error below `atol`.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    diff = np.abs(analytic - numeric)
    off = diff >= atol
    if not off.any():
        return 0.0
    scale = np.maximum(np.abs(analytic), np.abs(numeric))[off]
    return float((diff[off] / scale).max())


def compare(loss, pairs):
    """Worst relative error over (analytic gradient, array) pairs"""
    return max(relative_error(analytic, numeric_gradient(loss, x)) for analytic, x in pairs)


def _away_from_zero(rng, shape, margin=0.05):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(margin, 1.5, size=shape)


# ============================================================================
# CHECKS
# ============================================================================

def check_kernels(rng):
    specs = [
        KernelSpec(KernelKind.GAUSSIAN, gamma=49 / 54),
        KernelSpec(KernelKind.RATIONAL_QUADRATIC, c=1.0, rq_variant=RQVariant.PAPER_PLUS),
        KernelSpec(KernelKind.RATIONAL_QUADRATIC, c=0.5, rq_variant=RQVariant.STANDARD_MINUS),
        KernelSpec(KernelKind.POLYNOMIAL2),
    ]
    s = rng.uniform(-3, 3, size=20)
    d = rng.uniform(-3, 3, size=20)
    worst = 0.0
    for spec in specs:
        numeric = (eval_kernel(spec, s + STEP, d) - eval_kernel(spec, s - STEP, d)) / (2 * STEP)
        worst = max(worst, relative_error(eval_kernel_grad_s(spec, s, d), numeric))
    return worst


def check_dense(rng):
    x, W, b = rng.standard_normal((4, 5)), rng.standard_normal((3, 5)), rng.standard_normal(3)
    up = rng.standard_normal((4, 3))
    gx, gW, gb = nn.dense_backward(x, W, up)
    return compare(lambda: float((up * nn.dense_forward(x, W, b)).sum()), [(gx, x), (gW, W), (gb, b)])


def check_conv2d(rng):
    worst = 0.0
    for padding, stride, size in ((1, 1, 6), (0, 2, 7)):
        x = rng.standard_normal((2, 2, size, size))
        W = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        out = nn.conv2d_forward(x, W, b, padding, stride)
        up = rng.standard_normal(out.shape)
        gx, gW, gb = nn.conv2d_backward(x, W, up, padding, stride)
        worst = max(worst, compare(
            lambda: float((up * nn.conv2d_forward(x, W, b, padding, stride)).sum()),
            [(gx, x), (gW, W), (gb, b)],
        ))
    return worst


def check_maxpool(rng):
    # distinct values spaced well beyond the step keep every argmax stable
    x = (rng.permutation(2 * 3 * 4 * 4) * 0.01).reshape(2, 3, 4, 4)
    out, argmax = nn.maxpool_forward(x)
    up = rng.standard_normal(out.shape)
    gx = nn.maxpool_backward(x.shape, argmax, up)
    return compare(lambda: float((up * nn.maxpool_forward(x)[0]).sum()), [(gx, x)])


def check_batchnorm(rng):
    worst = 0.0
    for shape in ((6, 4), (4, 3, 3, 3)):
        features = shape[1]
        x = rng.standard_normal(shape) * 2.0 + 0.5
        gamma, beta = rng.uniform(0.5, 1.5, features), rng.standard_normal(features)
        up = rng.standard_normal(shape)

        def loss():
            out, _ = nn.batchnorm_forward(x, gamma, beta, np.zeros(features), np.ones(features))
            return float((up * out).sum())

        _, cache = nn.batchnorm_forward(x, gamma, beta, np.zeros(features), np.ones(features))
        gx, gg, gb = nn.batchnorm_backward(cache, up)
        worst = max(worst, compare(loss, [(gx, x), (gg, gamma), (gb, beta)]))
    return worst


def check_relu(rng):
    x = _away_from_zero(rng, (5, 6))
    up = rng.standard_normal(x.shape)
    return compare(lambda: float((up * nn.relu_forward(x)).sum()), [(nn.relu_backward(x, up), x)])


def check_elu(rng):
    x = _away_from_zero(rng, (5, 6))
    up = rng.standard_normal(x.shape)
    return compare(lambda: float((up * nn.elu_forward(x)).sum()), [(nn.elu_backward(x, up), x)])


def check_dropout(rng):
    x = rng.standard_normal((5, 6))
    up = rng.standard_normal(x.shape)
    _, mask = nn.dropout_forward(x, 0.5, True, seed=11)
    return compare(lambda: float((up * nn.dropout_forward(x, 0.5, True, seed=11)[0]).sum()),
                   [(nn.dropout_backward(mask, up), x)])


def _random_kaf(rng, neurons, kinds):
    dictionary = kaf.make_dictionary()
    params = kaf.init_multikaf(neurons, kernels=kaf.default_kernels(dictionary, kinds))
    params.alpha += 0.3 * rng.standard_normal(params.alpha.shape)
    params.mu += 0.1 * rng.standard_normal(params.mu.shape)
    return params


def _check_kaf(rng, kinds, shapes):
    worst = 0.0
    for shape in shapes:
        params = _random_kaf(rng, shape[1], kinds)
        x = rng.standard_normal(shape) * 1.5
        up = rng.standard_normal(shape)
        _, cache = kaf.multikaf_forward(params, x)
        gx, ga, gm = kaf.multikaf_backward(params, cache, up)
        worst = max(worst, compare(
            lambda: float((up * kaf.multikaf_forward(params, x)[0]).sum()),
            [(gx, x), (ga, params.alpha), (gm, params.mu)],
        ))
    return worst


def check_kaf(rng):
    return _check_kaf(rng, kaf.PLAIN_KERNELS, [(4, 3)])


def check_multikaf(rng):
    return _check_kaf(rng, kaf.MULTI_KERNELS, [(4, 3), (2, 3, 2, 2)])


def check_softmax_cross_entropy(rng):
    logits = rng.standard_normal((5, 4))
    onehot = one_hot_batch(rng.integers(0, 4, size=5), 4)
    _, grad = nn.softmax_cross_entropy(logits, onehot)
    return compare(lambda: nn.softmax_cross_entropy(logits, onehot)[0], [(grad, logits)])


def composed_network(seed):
    """Small conv + dense network with batchnorm and multi-KAF activations"""
    act = nn.ActivationSpec(nn.ActivationKind.MULTIKAF, nn.kaf_config_for("multikaf"))
    spec = nn.NetworkSpec((1, 4, 4), (
        nn.Conv2dSpec(1, 2, kernel_size=3, padding=1),
        nn.BatchNormSpec(2),
        act,
        nn.MaxPool2dSpec(2, 2),
        nn.FlattenSpec(),
        nn.DenseSpec(8, 4),
        nn.BatchNormSpec(4),
        act,
        nn.DenseSpec(4, 3),
    ), seed)
    return nn.build_network(spec)


def check_network(rng, lam=1e-3):
    network = composed_network(int(rng.integers(1 << 30)))
    for _, layer in network.kaf_layers():
        layer.kaf.alpha += 0.3 * rng.standard_normal(layer.kaf.alpha.shape)
        layer.kaf.mu += 0.1 * rng.standard_normal(layer.kaf.mu.shape)
    x = rng.uniform(0, 1, size=(4, 1, 4, 4))
    onehot = one_hot_batch(rng.integers(0, 3, size=4), 3)

    def loss():
        logits = network.forward(x, training=True)
        return nn.softmax_cross_entropy(logits, onehot, lam * network.l2_norm_sq())[0]

    _, grad = nn.softmax_cross_entropy(network.forward(x, training=True), onehot)
    network.backward(grad)
    regularized = {id(p) for _, _, p in network.regularized_parameters()}
    pairs = []
    for (_, _, p), g in zip(network.parameters(), network.gradients()):
        analytic = g + 2.0 * lam * p if id(p) in regularized else g.copy()
        pairs.append((analytic, p))
    return compare(loss, pairs)


LAYER_CHECKS = (
    ("kernels", check_kernels),
    ("dense", check_dense),
    ("conv2d", check_conv2d),
    ("maxpool", check_maxpool),
    ("batchnorm", check_batchnorm),
    ("relu", check_relu),
    ("elu", check_elu),
    ("dropout", check_dropout),
    ("kaf", check_kaf),
    ("multikaf", check_multikaf),
    ("softmax_cross_entropy", check_softmax_cross_entropy),
)


def run_audit(seed=0):
    """All layer checks plus the composed network, each from its own seeded stream"""
    results = []
    for index, (name, check) in enumerate(LAYER_CHECKS):
        rng = np.random.default_rng([seed, index])
        results.append(AuditResult(name, check(rng), LAYER_THRESHOLD))
    rng = np.random.default_rng([seed, len(LAYER_CHECKS)])
    results.append(AuditResult("network", check_network(rng), NETWORK_THRESHOLD))
    return results
