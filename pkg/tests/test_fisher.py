#!/usr/bin/env python3
"""
Tests for dense and streaming empirical Fisher blocks
"""

import sys
from pathlib import Path

import numpy as np
import pytest

parent_dir = Path(__file__).parent.parent
sys.path.insert(0, str(parent_dir))

from pruning.errors import PreconditionError, ShapeError
from pruning.fisher import build_fisher, cross_form, quad_form


@pytest.fixture
def grads():
    return np.random.default_rng(0).standard_normal((7, 12))


class TestBuildFisher:
    """Mode selection and the explicit matrix"""

    def test_mode_follows_dense_cap(self, grads):
        assert build_fisher(grads).mode == 'dense'
        streaming = build_fisher(grads, dense_cap=11)
        assert streaming.mode == 'streaming'
        assert streaming.dense is None

    def test_matrix_formula(self, grads):
        f = build_fisher(grads, kappa=0.5)
        expected = 0.5 * np.eye(12) + grads.T @ grads / 7
        np.testing.assert_allclose(f.matrix(), expected, rtol=1e-12)
        np.testing.assert_allclose(build_fisher(grads, 0.5, mode='streaming').matrix(), expected, rtol=1e-12)

    def test_empty_stash_rejected(self):
        with pytest.raises(PreconditionError):
            build_fisher(np.zeros((0, 4)))

    def test_negative_kappa_rejected(self, grads):
        with pytest.raises(PreconditionError):
            build_fisher(grads, kappa=-1.0)


class TestForms:
    """Quadratic and cross forms agree across modes"""

    def test_quad_form_modes_agree(self, grads):
        v = np.random.default_rng(1).standard_normal(12)
        dense = build_fisher(grads, 1e-3, mode='dense')
        streaming = build_fisher(grads, 1e-3, mode='streaming')
        expected = v @ dense.matrix() @ v
        assert quad_form(dense, v) == pytest.approx(expected, rel=1e-10)
        assert quad_form(streaming, v) == pytest.approx(expected, rel=1e-10)

    def test_quad_form_positive_with_kappa(self):
        f = build_fisher(np.zeros((3, 5)), kappa=1e-4)
        assert quad_form(f, np.ones(5)) == pytest.approx(5e-4)

    @pytest.mark.parametrize("mode", ["dense", "streaming"])
    def test_cross_form_on_support(self, grads, mode):
        rng = np.random.default_rng(2)
        f = build_fisher(grads, 1e-2, mode=mode)
        u = rng.standard_normal(12)
        support = np.array([1, 4, 9])
        v = np.zeros(12)
        v[support] = rng.standard_normal(3)
        expected = u @ f.matrix() @ v
        assert cross_form(f, u, v) == pytest.approx(expected, rel=1e-10)
        assert cross_form(f, u, v[support], support=support) == pytest.approx(expected, rel=1e-10)
        assert cross_form(f, u, v, support=support, u_proj=f.project(u)) == pytest.approx(expected, rel=1e-10)

    def test_length_mismatch(self, grads):
        f = build_fisher(grads)
        with pytest.raises(ShapeError):
            quad_form(f, np.ones(5))
        with pytest.raises(ShapeError):
            cross_form(f, np.ones(12), np.ones(4), support=np.arange(3))

    def test_random_forms_agree(self):
        rng = np.random.default_rng(7)
        for trial in range(100):
            n, d = int(rng.integers(1, 12)), int(rng.integers(1, 20))
            g = rng.standard_normal((n, d))
            kappa = float(rng.uniform(0.0, 0.1))
            dense = build_fisher(g, kappa, mode='dense')
            streaming = build_fisher(g, kappa, mode='streaming')
            u, v = rng.standard_normal(d), rng.standard_normal(d)
            assert quad_form(streaming, v) == pytest.approx(quad_form(dense, v), rel=1e-9, abs=1e-10)
            support = np.flatnonzero(rng.uniform(size=d) < 0.5)
            if support.size == 0:
                support = np.array([d - 1])
            expected = u @ dense.matrix()[:, support] @ v[support]
            assert cross_form(dense, u, v[support], support=support) == pytest.approx(expected, rel=1e-9, abs=1e-10)
            assert cross_form(streaming, u, v[support], support=support) == pytest.approx(expected, rel=1e-9,
                                                                                          abs=1e-10)

    @pytest.mark.parametrize("mode", ["dense", "streaming"])
    def test_matrix_symmetric_psd(self, mode):
        rng = np.random.default_rng(8)
        for trial in range(20):
            g = rng.standard_normal((int(rng.integers(1, 6)), 15))
            m = build_fisher(g, float(rng.uniform(0.0, 0.01)), mode=mode).matrix()
            np.testing.assert_allclose(m, m.T, rtol=0, atol=1e-12)
            assert np.linalg.eigvalsh(m).min() >= -1e-10
