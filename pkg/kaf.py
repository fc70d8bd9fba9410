"""
kafforge - Kernel Activation Functions
======================================
Per-neuron trainable activations g(s) = sum_i alpha_i * sum_m mu_m k_m(s, d_i)
over a fixed dictionary shared by the whole network.

A plain KAF is the M = 1 case (one Gaussian kernel, mu = 1). There is no
separate code path for it.

Neuron axis: axis 1 of the activations. For dense layers that is the feature
axis of a (batch, features) array; for conv layers it is the channel axis of
(batch, channels, H, W), and every spatial position of a channel shares that
channel's alpha and mu.
"""

from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np
import pandas as pd

from errors import DomainError, NumericError
from kernels import (
    KernelKind,
    KernelSpec,
    RQVariant,
    eval_kernel,
    eval_kernel_grad_s,
    gamma_rule_of_thumb,
    gram_matrix,
)

# ============================================================================
# DEFAULTS
# ============================================================================

DEFAULT_SIZE = 15
DEFAULT_RANGE = (-3.0, 3.0)
DEFAULT_EPSILON = 1e-4
PLAIN_KERNELS = ("gaussian",)
MULTI_KERNELS = ("gaussian", "rq", "poly2")

# ============================================================================
# DICTIONARY
# ============================================================================


@dataclass(frozen=True, eq=False)
class Dictionary:
    """D equispaced, fixed sample points shared network-wide"""

    points: np.ndarray
    delta: float
    lo: float
    hi: float

    @property
    def size(self):
        return int(self.points.size)


def make_dictionary(D=DEFAULT_SIZE, lo=DEFAULT_RANGE[0], hi=DEFAULT_RANGE[1]):
    if int(D) != D or D < 2:
        raise DomainError(f"dictionary needs at least 2 points, got {D}")
    if not lo < hi:
        raise DomainError(f"dictionary range must satisfy lo < hi, got ({lo}, {hi})")
    D = int(D)
    points = np.linspace(float(lo), float(hi), D)
    points.setflags(write=False)
    return Dictionary(points=points, delta=(hi - lo) / (D - 1), lo=float(lo), hi=float(hi))


# ============================================================================
# PARAMETERS
# ============================================================================


@dataclass(eq=False)
class MultiKafParams:
    """alpha: (n_neurons, D) mixing coefficients; mu: (n_neurons, M) kernel weights"""

    alpha: np.ndarray
    mu: np.ndarray
    kernels: Tuple[KernelSpec, ...]
    dictionary: Dictionary

    def __post_init__(self):
        self.kernels = tuple(self.kernels)
        if len(self.kernels) < 1:
            raise DomainError("a multi-KAF needs at least one kernel")
        if self.alpha.ndim != 2 or self.alpha.shape[1] != self.dictionary.size:
            raise DomainError(
                f"alpha must be (n_neurons, {self.dictionary.size}), got {self.alpha.shape}"
            )
        if self.mu.shape != (self.alpha.shape[0], len(self.kernels)):
            raise DomainError(
                f"mu must be ({self.alpha.shape[0]}, {len(self.kernels)}), got {self.mu.shape}"
            )

    @property
    def n_neurons(self):
        return self.alpha.shape[0]

    @property
    def n_kernels(self):
        return len(self.kernels)

    def select(self, neurons):
        """Copy of the parameters restricted to the given neuron indices"""
        idx = np.atleast_1d(np.asarray(neurons, dtype=np.int64))
        if idx.size and (idx.min() < 0 or idx.max() >= self.n_neurons):
            raise DomainError(f"neuron index out of range [0, {self.n_neurons})")
        return replace(self, alpha=self.alpha[idx].copy(), mu=self.mu[idx].copy())


@dataclass(frozen=True, eq=False)
class CachedKernels:
    """
    Base-kernel evaluations of one forward call

    inputs: (P, n) activations with the neuron axis last and every other axis
    flattened into P; base: (M, P, n, D) values k_m(s, d_i); mixed: (P, n, D)
    values of the mu-weighted kernel for the mu used in that call.
    """

    inputs: np.ndarray
    base: np.ndarray
    mixed: np.ndarray
    moved_shape: tuple = field(default=())


def _neuron_last(params, array, what):
    x = np.asarray(array, dtype=np.float64)
    if x.ndim < 2 or x.shape[1] != params.n_neurons:
        raise DomainError(
            f"{what} must have {params.n_neurons} neurons on axis 1, got shape {x.shape}"
        )
    moved = np.moveaxis(x, 1, -1)
    return moved.reshape(-1, params.n_neurons), moved.shape


def _neuron_axis_back(flat, moved_shape):
    return np.moveaxis(flat.reshape(moved_shape), -1, 1)


def base_kernels(kernels, inputs, points):
    """(M, *inputs.shape, D) block of k_m(s, d_i)"""
    s = inputs[..., None]
    return np.stack([eval_kernel(spec, s, points) for spec in kernels])


# ============================================================================
# FORWARD / BACKWARD
# ============================================================================

def multikaf_forward(params, activations, cache=None):
    """
    Apply every neuron's multi-KAF elementwise

    Args:
        cache: a CachedKernels from an earlier call on the same activations;
            its base-kernel block is reused when the inputs match.

    Returns: (output with the input's shape, CachedKernels)
    """
    flat, moved_shape = _neuron_last(params, activations, "activations")
    if cache is not None and cache.inputs.shape == flat.shape and np.array_equal(cache.inputs, flat):
        base = cache.base
    else:
        base = base_kernels(params.kernels, flat, params.dictionary.points)
    mixed = np.einsum("mpnd,nm->pnd", base, params.mu)
    out = np.einsum("pnd,nd->pn", mixed, params.alpha)
    return _neuron_axis_back(out, moved_shape), CachedKernels(flat, base, mixed, moved_shape)


def multikaf_backward(params, cache, upstream):
    """Returns: (grad_input, grad_alpha, grad_mu)"""
    up, moved_shape = _neuron_last(params, upstream, "upstream gradient")
    if moved_shape != cache.moved_shape:
        raise DomainError(
            f"upstream gradient shape {np.shape(upstream)} does not match the forward output"
        )
    grad_alpha = np.einsum("pn,pnd->nd", up, cache.mixed)
    expansions = np.einsum("mpnd,nd->mpn", cache.base, params.alpha)
    grad_mu = np.einsum("pn,mpn->nm", up, expansions)

    points = params.dictionary.points
    s = cache.inputs[..., None]
    slope = np.zeros_like(cache.inputs)
    for m, spec in enumerate(params.kernels):
        dk = eval_kernel_grad_s(spec, s, points, value=cache.base[m])
        slope += params.mu[:, m] * np.einsum("pnd,nd->pn", dk, params.alpha)
    grad_input = _neuron_axis_back(up * slope, moved_shape)
    return grad_input, grad_alpha, grad_mu


# ============================================================================
# INITIALIZATION
# ============================================================================

def elu(s):
    """Exponential linear unit with unit scale"""
    s = np.asarray(s, dtype=np.float64)
    out = np.where(s > 0, s, np.expm1(np.minimum(s, 0.0)))
    return float(out) if out.ndim == 0 else out


def mixed_gram(kernels, mu, dictionary):
    """sum_m mu_m * Gram_m over the dictionary"""
    return sum(float(w) * gram_matrix(spec, dictionary.points) for w, spec in zip(mu, kernels))


def krr_init(kernels, mu, dictionary, targets, epsilon=DEFAULT_EPSILON):
    """alpha = (K + epsilon I)^-1 t so that g(d_i) reproduces the targets"""
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if targets.size != dictionary.size:
        raise DomainError(f"expected {dictionary.size} targets, got {targets.size}")
    if len(mu) != len(kernels):
        raise DomainError(f"{len(kernels)} kernels but {len(mu)} kernel weights")
    if epsilon < 0:
        raise DomainError(f"epsilon must be non-negative, got {epsilon}")
    system = mixed_gram(kernels, mu, dictionary) + epsilon * np.eye(dictionary.size)
    try:
        alpha = np.linalg.solve(system, targets)
    except np.linalg.LinAlgError as e:
        raise NumericError(f"kernel ridge initialization failed: {e}") from e
    if not np.all(np.isfinite(alpha)):
        raise NumericError("kernel ridge initialization produced non-finite coefficients")
    return alpha


def default_kernels(dictionary, kinds=MULTI_KERNELS, gamma=None, c=1.0,
                    rq_variant=RQVariant.PAPER_PLUS):
    """
    KernelSpecs for a list of tokens such as "gaussian", "rq:2.0" or "gaussian:0.5"

    The optional ":value" overrides gamma (Gaussian) or c (rational quadratic),
    which lets one mixture hold the same kernel at several bandwidths. Without
    an override the Gaussian bandwidth follows the rule of thumb for the
    dictionary spacing.
    """
    base_gamma = gamma if gamma is not None else gamma_rule_of_thumb(dictionary.delta)
    specs = []
    for token in kinds:
        kind, _, value = str(token).strip().partition(":")
        try:
            kind = KernelKind(kind.strip().lower())
            value = float(value) if value else None
        except ValueError as e:
            raise DomainError(f"bad kernel token '{token}'") from e
        if kind is KernelKind.POLYNOMIAL2 and value is not None:
            raise DomainError(f"poly2 kernel takes no parameter, got '{token}'")
        specs.append(KernelSpec(
            kind=kind,
            gamma=value if kind is KernelKind.GAUSSIAN and value is not None else base_gamma,
            c=value if kind is KernelKind.RATIONAL_QUADRATIC and value is not None else c,
            rq_variant=rq_variant,
        ))
    return tuple(specs)


def init_multikaf(n_neurons, D=DEFAULT_SIZE, lo=DEFAULT_RANGE[0], hi=DEFAULT_RANGE[1],
                  kernels=None, epsilon=DEFAULT_EPSILON):
    """
    Every neuron starts as the same ELU-shaped function: mu = 1/M, alpha from
    kernel ridge regression onto ELU at the dictionary points.
    """
    if int(n_neurons) != n_neurons or n_neurons < 1:
        raise DomainError(f"n_neurons must be a positive integer, got {n_neurons}")
    dictionary = make_dictionary(D, lo, hi)
    kernels = tuple(kernels) if kernels is not None else default_kernels(dictionary)
    mu_row = np.full(len(kernels), 1.0 / len(kernels))
    alpha_row = krr_init(kernels, mu_row, dictionary, elu(dictionary.points), epsilon)
    return MultiKafParams(
        alpha=np.tile(alpha_row, (int(n_neurons), 1)),
        mu=np.tile(mu_row, (int(n_neurons), 1)),
        kernels=kernels,
        dictionary=dictionary,
    )


@dataclass(frozen=True)
class KafConfig:
    """Dictionary and kernel settings of the KAF layers of one network"""

    size: int = DEFAULT_SIZE
    lo: float = DEFAULT_RANGE[0]
    hi: float = DEFAULT_RANGE[1]
    kernels: Tuple[str, ...] = MULTI_KERNELS
    gamma: Optional[float] = None
    c: float = 1.0
    rq_variant: RQVariant = RQVariant.PAPER_PLUS
    epsilon: float = DEFAULT_EPSILON

    def dictionary(self):
        return make_dictionary(self.size, self.lo, self.hi)

    def kernel_specs(self):
        return default_kernels(self.dictionary(), self.kernels, self.gamma, self.c, self.rq_variant)

    def build(self, n_neurons):
        return init_multikaf(n_neurons, self.size, self.lo, self.hi,
                             self.kernel_specs(), self.epsilon)


# ============================================================================
# ACTIVATION SHAPE EXPORT
# ============================================================================

def kernel_column_names(kernels):
    return [f"k{m + 1}_{spec.name}" for m, spec in enumerate(kernels)]


def activation_table(params, neuron, grid):
    """
    Sample one neuron's activation on a grid

    Returns: DataFrame with columns s, g and one column per base kernel holding
    its contribution mu_m * sum_i alpha_i k_m(s, d_i).
    """
    grid = np.asarray(grid, dtype=np.float64).reshape(-1)
    single = params.select([neuron])
    g, cache = multikaf_forward(single, grid[:, None])
    contributions = np.einsum("mpnd,nd->mpn", cache.base, single.alpha)[:, :, 0] * single.mu[0][:, None]
    table = pd.DataFrame({"s": grid, "g": g[:, 0]})
    for name, column in zip(kernel_column_names(params.kernels), contributions):
        table[name] = column
    return table
