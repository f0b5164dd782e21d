import math

import numpy as np
import pytest
import torch

from splitcodec.analysis import (
    ComplexityReport,
    ComplexityRow,
    arnoldi_cov_logdet,
    bd_rate,
    lipschitz_power,
    pearson,
    rademacher_estimate,
    validate_report,
)


def test_rademacher_identities():
    rng = np.random.default_rng(0)
    d = rng.integers(-5, 6, size=(30, 8, 4))
    assert rademacher_estimate(np.zeros((5, 3, 2)), 50) == 0.0
    one = d[:1]
    assert rademacher_estimate(one, 17, seed=3) == np.abs(one).max()
    base = rademacher_estimate(d, 100, seed=1)
    assert rademacher_estimate(d * 2, 100, seed=1) == 2 * base
    assert rademacher_estimate(d * 0.25, 100, seed=1) == 0.25 * base
    assert rademacher_estimate(d * 3, 100, seed=1) == pytest.approx(3 * base, rel=1e-15)
    assert rademacher_estimate(d, 100, seed=1) == base
    with pytest.raises(ValueError):
        rademacher_estimate(np.zeros((0, 2)), 5)


def test_rademacher_small_case_by_enumeration():
    # two samples: signs agree or disagree with probability 1/2 each
    d = np.array([[[1.0, -2.0]], [[3.0, 1.0]]])
    est = rademacher_estimate(d, 20000, seed=0)
    exact = 0.5 * (np.abs(d[0] + d[1]).max() + np.abs(d[0] - d[1]).max()) / 2
    assert est == pytest.approx(exact, rel=0.02)


def test_arnoldi_identity_covariance():
    a = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]]) * math.sqrt(3 / 4)
    assert abs(arnoldi_cov_logdet(a, 2).value) < 1e-12


def test_arnoldi_matches_dense_log_det():
    rng = np.random.default_rng(4)
    scales = np.exp(rng.uniform(-1.5, 1.5, 8))
    x = rng.standard_normal((200, 8)) * scales
    res = arnoldi_cov_logdet(x, 8, seed=1)
    dense = np.log(np.linalg.eigvalsh(np.cov(x, rowvar=False))).sum()
    assert res.sum_log == pytest.approx(dense, rel=1e-6)


def test_arnoldi_single_step_is_rayleigh_quotient():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((50, 6))
    res = arnoldi_cov_logdet(x, 1, seed=2)
    v = np.random.default_rng(2).standard_normal(6)
    v /= np.linalg.norm(v)
    c = np.cov(x, rowvar=False)
    assert res.value == pytest.approx(math.log(v @ c @ v) / 12, rel=1e-10)


def test_arnoldi_breakdown_and_errors():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((4, 10))  # rank 3 after centring
    res = arnoldi_cov_logdet(x, 10)
    # the start vector adds one null-space direction to the 3-dimensional range
    assert res.krylov_dim == 4
    assert np.sum(res.eigenvalues > 1e-8) == 3
    with pytest.raises(ValueError):
        arnoldi_cov_logdet(x, 11)


def test_lipschitz_linear_and_constant():
    a = torch.tensor([3.0, -4.0, 12.0], dtype=torch.float64)
    y = torch.randn(3, dtype=torch.float64)
    assert lipschitz_power(lambda v: a @ v, y, 1) == pytest.approx(13.0, rel=1e-12)
    assert lipschitz_power(lambda v: v.sum() * 0 + 2.0, y, 3) == 0.0
    with pytest.raises(FloatingPointError):
        lipschitz_power(lambda v: (v / 0.0).sum(), y, 2)


def test_pearson_examples():
    xs = [1.0, 2.0, 4.0, 7.0]
    assert pearson(xs, [2 * x + 3 for x in xs]) == pytest.approx(1.0)
    assert pearson(xs, [-x for x in xs]) == pytest.approx(-1.0)
    assert pearson([1, 2, 3], [2, 1, 3]) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        pearson([1], [2])


def test_bd_rate_basic():
    ref = [(100, 1.0), (150, 2.0), (230, 3.0), (400, 4.0)]
    assert bd_rate(ref, ref) == 0.0
    assert bd_rate(ref, [(2 * r, q) for r, q in ref]) == pytest.approx(100.0, abs=1e-9)
    with pytest.raises(ValueError):
        bd_rate(ref, [(r, q + 10) for r, q in ref])
    with pytest.raises(ValueError):
        bd_rate(ref[:3], ref[:3])


def test_report_files(tmp_path):
    rows = [ComplexityRow("proposed", s, 0.001, 100.0 + 10 * s, 1.5, 2.0 + s, -0.1 * s, 0.5 + 0.1 * s * s)
            for s in (1, 2, 3)]
    report = ComplexityReport.build(rows, {"seed": 0})
    assert set(report.correlations) == {"bpt~rademacher", "bpt~cov_logdet_scaled"}
    csv_path, json_path = report.write(tmp_path)
    import json
    validate_report(json.loads(json_path.read_text()))
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "model,split,lambda,bpt,distortion,rademacher,cov_logdet_scaled,lipschitz_log"
    assert len(lines) == 1 + 3 + 2
    single = ComplexityReport.build(rows[:1])
    assert single.correlations == {} and single.notices
    flat = [ComplexityRow("proposed", 1, 0.001, 5.0, 1.0, 1.0, 1.0, 1.0) for _ in range(3)]
    assert ComplexityReport.build(flat).notices
    with pytest.raises(ValueError):
        ComplexityRow("p", 1, 0.0, float("nan"), 1, 1, 1, 1)
