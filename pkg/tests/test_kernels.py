import math

import numpy as np
import pytest

from errors import DomainError
from gradcheck import relative_error
from kernels import (
    KernelKind,
    KernelSpec,
    RQVariant,
    eval_kernel,
    eval_kernel_grad_s,
    gamma_rule_of_thumb,
    gram_matrix,
    is_psd,
    min_eigenvalue,
    psd_report,
    quadratic_form,
)

GAUSSIAN = KernelSpec(KernelKind.GAUSSIAN, gamma=49 / 54)
RQ_PLUS = KernelSpec(KernelKind.RATIONAL_QUADRATIC, c=1.0)
RQ_MINUS = KernelSpec(KernelKind.RATIONAL_QUADRATIC, c=1.0, rq_variant=RQVariant.STANDARD_MINUS)
POLY2 = KernelSpec(KernelKind.POLYNOMIAL2)
ALL_SPECS = [GAUSSIAN, RQ_PLUS, RQ_MINUS, POLY2]
PSD_SPECS = [GAUSSIAN, RQ_MINUS, POLY2]


def test_kernel_values_at_known_points():
    assert eval_kernel(KernelSpec(KernelKind.GAUSSIAN, gamma=3.7), 0.7, 0.7) == 1.0
    assert eval_kernel(POLY2, 1.0, 1.0) == 4.0
    assert eval_kernel(RQ_PLUS, 0.3, 0.3) == 1.0
    assert eval_kernel(RQ_MINUS, 0.3, 0.3) == 1.0
    assert eval_kernel(GAUSSIAN, 0.5, 0.0) == pytest.approx(math.exp(-49 / 216), abs=1e-15)


def test_rq_variants_differ_by_the_sign_of_the_ratio():
    s, d, c = 1.5, -0.5, 2.0
    r = (s - d) ** 2
    plus = KernelSpec(KernelKind.RATIONAL_QUADRATIC, c=c)
    minus = KernelSpec(KernelKind.RATIONAL_QUADRATIC, c=c, rq_variant="standard_minus")
    assert eval_kernel(plus, s, d) == pytest.approx(1 + r / (r + c), abs=1e-15)
    assert eval_kernel(minus, s, d) == pytest.approx(c / (r + c), abs=1e-15)
    assert minus.name == "rq_standard"
    assert plus.name == "rq"


def test_kernels_are_symmetric(rng):
    s, d = rng.uniform(-3, 3, 50), rng.uniform(-3, 3, 50)
    for spec in ALL_SPECS:
        np.testing.assert_array_equal(eval_kernel(spec, s, d), eval_kernel(spec, d, s))


def test_grad_known_points():
    assert eval_kernel_grad_s(GAUSSIAN, 1.2, 1.2) == 0.0
    assert eval_kernel_grad_s(POLY2, 0.0, 2.0) == 4.0


@pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: s.name)
def test_grad_matches_central_differences(spec, rng):
    h = 1e-6
    s, d = rng.uniform(-3, 3, 200), rng.uniform(-3, 3, 200)
    numeric = (eval_kernel(spec, s + h, d) - eval_kernel(spec, s - h, d)) / (2 * h)
    assert relative_error(eval_kernel_grad_s(spec, s, d), numeric) < 1e-6


def test_grad_reuses_precomputed_gaussian_value(rng):
    s, d = rng.normal(size=10), rng.normal(size=10)
    value = eval_kernel(GAUSSIAN, s, d)
    np.testing.assert_array_equal(eval_kernel_grad_s(GAUSSIAN, s, d, value=value),
                                  eval_kernel_grad_s(GAUSSIAN, s, d))


def test_gamma_rule_of_thumb():
    assert gamma_rule_of_thumb(1.0) == pytest.approx(1 / 6, abs=1e-15)
    assert gamma_rule_of_thumb(3 / 7) == pytest.approx(49 / 54, abs=1e-12)
    with pytest.raises(DomainError):
        gamma_rule_of_thumb(0.0)


def test_spec_validation():
    with pytest.raises(DomainError):
        KernelSpec(KernelKind.GAUSSIAN, gamma=0.0)
    with pytest.raises(DomainError):
        KernelSpec(KernelKind.RATIONAL_QUADRATIC, c=-1.0)
    # parameters of other kinds are ignored
    KernelSpec(KernelKind.POLYNOMIAL2, gamma=-1.0, c=-1.0)
    assert KernelSpec("rq").kind is KernelKind.RATIONAL_QUADRATIC


def test_gram_matrix_entries_and_symmetry(rng):
    np.testing.assert_array_equal(gram_matrix(GAUSSIAN, [0.0]), [[1.0]])
    points = rng.uniform(-3, 3, 12)
    for spec in ALL_SPECS:
        gram = gram_matrix(spec, points)
        np.testing.assert_array_equal(gram, gram.T)
        np.testing.assert_array_equal(gram, eval_kernel(spec, points[:, None], points[None, :]))
    with pytest.raises(DomainError):
        gram_matrix(GAUSSIAN, [])


def test_quadratic_form():
    assert quadratic_form([[1.0]], [2.0]) == 4.0
    assert quadratic_form(np.eye(3), np.zeros(3)) == 0.0
    with pytest.raises(DomainError):
        quadratic_form(np.eye(3), np.ones(2))


def test_gaussian_quadratic_forms_are_non_negative(rng):
    gram = gram_matrix(GAUSSIAN, rng.uniform(-3, 3, 15))
    for _ in range(100):
        assert quadratic_form(gram, rng.normal(size=15)) >= -1e-10


def test_psd_kernels_on_dictionary_and_random_sets(rng):
    dictionary = np.linspace(-3, 3, 15)
    point_sets = [dictionary] + [rng.uniform(-3, 3, 20) for _ in range(50)]
    for spec in PSD_SPECS:
        for points in point_sets:
            assert min_eigenvalue(gram_matrix(spec, points)) >= -1e-10
            assert is_psd(gram_matrix(spec, points))


def test_psd_report_does_not_judge_the_plus_variant(rng):
    rows = psd_report(ALL_SPECS, [rng.uniform(-3, 3, 20) for _ in range(5)])
    by_name = {row["kernel"]: row for row in rows}
    assert by_name["rq"]["passed"] is None
    assert by_name["rq"]["psd_expected"] is False
    assert isinstance(by_name["rq"]["min_eigenvalue"], float)
    for name in ("gaussian", "rq_standard", "poly2"):
        assert by_name[name]["passed"] is True


def test_min_eigenvalue_rejects_non_square():
    with pytest.raises(DomainError):
        min_eigenvalue(np.ones((2, 3)))
