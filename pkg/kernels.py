"""
kafforge - Base Kernels
=======================
The three one-dimensional kernels a multi-KAF mixes (Gaussian, rational
quadratic, polynomial of order 2), their analytic derivatives with respect to
the activation, Gram matrices over a point set and PSD checks.

All functions broadcast over numpy arrays, so the same code evaluates a single
pair of scalars or a whole (batch x neurons x dictionary) block.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from errors import DomainError

# ============================================================================
# KERNEL DEFINITIONS
# ============================================================================

PSD_TOLERANCE = -1e-10


class KernelKind(str, Enum):
    GAUSSIAN = "gaussian"
    RATIONAL_QUADRATIC = "rq"
    POLYNOMIAL2 = "poly2"


class RQVariant(str, Enum):
    # 1 + r/(r+c), values in [1, 2); not known to be PSD
    PAPER_PLUS = "paper_plus"
    # c/(r+c) = 1 - r/(r+c), the textbook rational quadratic
    STANDARD_MINUS = "standard_minus"


@dataclass(frozen=True)
class KernelSpec:
    """One base kernel and its parameters"""

    kind: KernelKind
    gamma: float = 1.0
    c: float = 1.0
    rq_variant: RQVariant = RQVariant.PAPER_PLUS

    def __post_init__(self):
        object.__setattr__(self, "kind", KernelKind(self.kind))
        object.__setattr__(self, "rq_variant", RQVariant(self.rq_variant))
        if self.kind is KernelKind.GAUSSIAN and not self.gamma > 0:
            raise DomainError(f"Gaussian kernel needs gamma > 0, got {self.gamma}")
        if self.kind is KernelKind.RATIONAL_QUADRATIC and not self.c > 0:
            raise DomainError(f"rational quadratic kernel needs c > 0, got {self.c}")

    @property
    def name(self):
        if self.kind is KernelKind.RATIONAL_QUADRATIC and self.rq_variant is RQVariant.STANDARD_MINUS:
            return "rq_standard"
        return self.kind.value

    @property
    def is_psd_kind(self):
        """Whether the kernel is known positive semi-definite"""
        return not (
            self.kind is KernelKind.RATIONAL_QUADRATIC
            and self.rq_variant is RQVariant.PAPER_PLUS
        )


# ============================================================================
# EVALUATION
# ============================================================================

def eval_kernel(spec, s, d):
    """Evaluate kappa(s, d); broadcasts over arrays"""
    if spec.kind is KernelKind.GAUSSIAN:
        diff = np.subtract(s, d)
        return np.exp(-spec.gamma * (diff * diff))
    if spec.kind is KernelKind.RATIONAL_QUADRATIC:
        diff = np.subtract(s, d)
        r = diff * diff
        if spec.rq_variant is RQVariant.PAPER_PLUS:
            return 1.0 + r / (r + spec.c)
        return spec.c / (r + spec.c)
    base = 1.0 + np.multiply(s, d)
    return base * base


def eval_kernel_grad_s(spec, s, d, value=None):
    """
    Analytic derivative of kappa(s, d) with respect to s

    Args:
        value: optional kappa(s, d) already computed for the same arguments;
            the Gaussian derivative reuses it instead of a second exp.
    """
    if spec.kind is KernelKind.GAUSSIAN:
        diff = np.subtract(s, d)
        if value is None:
            value = np.exp(-spec.gamma * (diff * diff))
        return -2.0 * spec.gamma * diff * value
    if spec.kind is KernelKind.RATIONAL_QUADRATIC:
        diff = np.subtract(s, d)
        denom = diff * diff + spec.c
        grad = 2.0 * spec.c * diff / (denom * denom)
        if spec.rq_variant is RQVariant.PAPER_PLUS:
            return grad
        return -grad
    return 2.0 * (1.0 + np.multiply(s, d)) * d


def gamma_rule_of_thumb(delta):
    """Gaussian bandwidth 1 / (6 delta^2) for dictionary spacing delta"""
    if not delta > 0:
        raise DomainError(f"dictionary spacing must be positive, got {delta}")
    return 1.0 / (6.0 * delta * delta)


# ============================================================================
# GRAM MATRICES AND PSD CHECKS
# ============================================================================

def gram_matrix(spec, points):
    """D x D matrix of kappa(points[i], points[j])"""
    points = np.asarray(points, dtype=np.float64).reshape(-1)
    if points.size == 0:
        raise DomainError("gram matrix needs at least one point")
    return eval_kernel(spec, points[:, None], points[None, :])


def quadratic_form(gram, coeffs):
    """sum_i sum_j coeffs[i] * coeffs[j] * gram[i][j]"""
    gram = np.asarray(gram, dtype=np.float64)
    coeffs = np.asarray(coeffs, dtype=np.float64).reshape(-1)
    if gram.ndim != 2 or gram.shape[0] != gram.shape[1]:
        raise DomainError(f"gram matrix must be square, got shape {gram.shape}")
    if coeffs.size != gram.shape[0]:
        raise DomainError(
            f"coefficient vector has length {coeffs.size}, gram is {gram.shape[0]}x{gram.shape[0]}"
        )
    return float(coeffs @ gram @ coeffs)


def min_eigenvalue(gram):
    """Smallest eigenvalue of a symmetric matrix (dense eigensolve)"""
    gram = np.asarray(gram, dtype=np.float64)
    if gram.ndim != 2 or gram.shape[0] != gram.shape[1] or gram.shape[0] == 0:
        raise DomainError(f"expected a non-empty square matrix, got shape {gram.shape}")
    return float(np.linalg.eigvalsh(gram)[0])


def is_psd(gram, tol=PSD_TOLERANCE):
    return min_eigenvalue(gram) >= tol


def psd_report(specs, point_sets):
    """
    Minimum Gram eigenvalue of each kernel over each point set

    Returns: list of dicts (kernel, psd_expected, min_eigenvalue, passed),
    worst case over the point sets. Kernels not known to be PSD are reported
    with passed=None.
    """
    rows = []
    for spec in specs:
        worst = min(min_eigenvalue(gram_matrix(spec, pts)) for pts in point_sets)
        rows.append({
            "kernel": spec.name,
            "psd_expected": spec.is_psd_kind,
            "min_eigenvalue": worst,
            "passed": (worst >= PSD_TOLERANCE) if spec.is_psd_kind else None,
        })
    return rows
