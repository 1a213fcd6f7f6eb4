import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rgpo.diagnostics import (CSV_HEADER, IterationMetrics, ess, grad_variance,
                              read_metrics, write_metrics)


def test_ess_uniform_weights():
    for n in (1, 5, 100):
        assert ess(np.full(n, 0.7)) == pytest.approx(1.0, abs=1e-15)


def test_ess_single_spike():
    w = np.zeros(10)
    w[3] = 1.0
    assert ess(w) == pytest.approx(0.1, abs=1e-15)


def test_ess_formula():
    assert ess([1.0, 2.0, 3.0]) == pytest.approx(36.0 / 42.0, abs=1e-15)


def test_ess_errors():
    with pytest.raises(ValueError):
        ess([])
    with pytest.raises(ValueError):
        ess([0.0, 0.0])
    with pytest.raises(ValueError):
        ess([1.0, -1.0])


@given(st.lists(st.floats(0.0, 1e6), min_size=1, max_size=64).filter(lambda w: sum(w) > 1e-3),
       st.floats(1e-3, 1e3))
@settings(max_examples=200, deadline=None)
def test_ess_scale_invariant_and_bounded(weights, c):
    base = ess(weights)
    assert 0.0 < base <= 1.0 + 1e-12
    assert ess(np.asarray(weights) * c) == pytest.approx(base, rel=1e-9)


def test_grad_variance_identical():
    g = np.arange(5, dtype=float)
    assert grad_variance([g, g.copy(), g.copy()]) == 0.0


def test_grad_variance_two_point():
    assert grad_variance([np.array([0.0]), np.array([2.0])]) == pytest.approx(2.0)


def test_grad_variance_matches_direct():
    rng = np.random.default_rng(4)
    grads = [rng.normal(size=12) for _ in range(7)]
    stacked = np.stack(grads)
    expected = np.mean([stacked[:, j].var(ddof=1) for j in range(12)])
    assert grad_variance(grads) == pytest.approx(expected, rel=1e-12)


def test_grad_variance_translation_and_scaling():
    rng = np.random.default_rng(5)
    grads = [rng.normal(size=6) for _ in range(5)]
    base = grad_variance(grads)
    shifted = [g + 17.0 for g in grads]
    assert grad_variance(shifted) == pytest.approx(base, rel=1e-9)
    scaled = [3.0 * g for g in grads]
    assert grad_variance(scaled) == pytest.approx(9.0 * base, rel=1e-9)


def test_grad_variance_needs_two():
    with pytest.raises(ValueError):
        grad_variance([np.zeros(3)])


def _metric(i, **kw):
    base = dict(iteration=i, mean_return=-12.5, mean_kl=0.01, max_kl=0.03,
                spike=False, ess=0.9, grad_variance=1.5e-2, beta=0.5,
                wall_seconds=0.25)
    base.update(kw)
    return IterationMetrics(**base)


def test_write_metrics_empty(tmp_path):
    path = tmp_path / "m.csv"
    write_metrics(path, [])
    assert path.read_text().strip() == ",".join(CSV_HEADER)


def test_write_metrics_row_count(tmp_path):
    path = tmp_path / "m.csv"
    write_metrics(path, [_metric(i) for i in range(3)])
    assert len(path.read_text().strip().splitlines()) == 4


def test_metrics_roundtrip(tmp_path):
    path = tmp_path / "m.csv"
    rows = [_metric(0, mean_return=-1.2345678901234e2, spike=True),
            _metric(1, mean_kl=0.0123456789012345)]
    write_metrics(path, rows)
    back = read_metrics(path)
    for a, b in zip(rows, back):
        assert a == b  # repr-based serialization round-trips exactly
