import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from twinspeech import gradcheck
from twinspeech.exceptions import NumericError, ShapeError
from twinspeech.objective import (bt_correlation, bt_loss, dump_csv, loss_grad, loss_value,
                                  mbt_correlation)

from conftest import brute_bt, brute_loss, brute_mbt

latents = st.integers(1, 6).flatmap(lambda n: st.integers(2, 8).flatmap(
    lambda m: st.tuples(*[arrays(np.float64, (n, m), elements=st.floats(-2, 2).filter(lambda v: abs(v) > 1e-3))] * 2)))


class TestExamples:
    def test_bt_identity(self):
        eye = np.eye(2)
        assert np.array_equal(bt_correlation(eye, eye, eps=0).values, eye)

    def test_bt_worked_example(self):
        c = bt_correlation([[1, 2], [3, 4]], [[1, 0], [0, 1]], eps=0).values
        # C_ij = sum_b a_bi b_bj / |a_i| |b_j| written out by hand
        expected = [[1 / np.sqrt(10), 3 / np.sqrt(10)], [2 / np.sqrt(20), 4 / np.sqrt(20)]]
        assert np.allclose(c, expected, rtol=1e-14, atol=0)
        assert np.allclose(c, [[0.31623, 0.94868], [0.44721, 0.89443]], atol=5e-6)

    def test_mbt_one_hot_rows(self):
        eye = np.eye(2)
        assert np.array_equal(mbt_correlation(eye, eye, eps=0).values, eye)

    def test_mbt_worked_example(self):
        c = mbt_correlation([[3, 4]], [[1, 0]], eps=0).values
        assert np.allclose(c, [[0.6, 0.0], [0.8, 0.0]], rtol=1e-15, atol=1e-16)

    def test_loss_worked_example(self):
        out = bt_loss([[0.5, 0.2], [-0.1, 1.0]], 0.005)
        assert out.invariance == pytest.approx(0.25, rel=1e-15)
        assert out.redundancy == pytest.approx(0.05, rel=1e-14)
        assert out.total == pytest.approx(0.25025, rel=1e-14)

    @pytest.mark.parametrize("lam", [0.0, 0.005, 1.0, 123.0])
    def test_loss_identity_is_zero(self, lam):
        assert bt_loss(np.eye(5), lam).total == 0.0

    def test_lambda_zero_drops_redundancy(self):
        c = np.random.default_rng(0).uniform(-1, 1, (4, 4))
        out = bt_loss(c, 0.0)
        assert out.total == out.invariance


class TestErrors:
    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            bt_correlation(np.ones((3, 4)), np.ones((3, 5)))
        with pytest.raises(ShapeError):
            mbt_correlation(np.ones((3, 4)), np.ones((2, 4)))

    def test_m_below_two(self):
        with pytest.raises(ShapeError):
            bt_correlation(np.ones((3, 1)), np.ones((3, 1)))

    def test_non_finite(self):
        z = np.ones((3, 4))
        z[0, 0] = np.nan
        with pytest.raises(NumericError):
            bt_correlation(z, np.ones((3, 4)))

    def test_zero_norm_without_eps(self):
        z = np.ones((3, 4))
        z[:, 1] = 0
        with pytest.raises(NumericError):
            bt_correlation(z, z, eps=0)
        assert np.isfinite(bt_correlation(z, z).values).all()

    def test_non_square_loss(self):
        with pytest.raises(ShapeError):
            bt_loss(np.ones((2, 3)))


class TestGradients:
    def test_zero_at_minimum(self):
        za = np.array([[2.0, 0.0], [0.0, 3.0]])
        ga, gb, loss = loss_grad(za, za, "bt", eps=0)
        assert loss.total == 0.0
        assert np.linalg.norm(ga) <= 1e-10 and np.linalg.norm(gb) <= 1e-10

    def test_lambda_zero_unit_diagonal(self):
        za = np.random.default_rng(1).normal(size=(5, 3))
        ga, gb, _ = loss_grad(za, za, "bt", lam=0.0, eps=0)
        assert np.max(np.abs(ga)) <= 1e-12 and np.max(np.abs(gb)) <= 1e-12

    @pytest.mark.parametrize("variant,reduction", [("bt", "sum"), ("mbt", "sum"), ("mbt", "mean")])
    @pytest.mark.parametrize("center", [False, True])
    def test_finite_differences(self, variant, reduction, center):
        for seed in range(5):
            r = gradcheck.check_objective(variant, 4, 8, seed, reduction=reduction, center=center)
            assert r.passed, (r.label, r.errors)

    def test_swap_symmetry(self):
        rng = np.random.default_rng(4)
        za, zb = rng.normal(size=(6, 5)), rng.normal(size=(6, 5))
        for variant in ("bt", "mbt"):
            c1 = np.asarray(loss_value(za, zb, variant).total)
            c2 = np.asarray(loss_value(zb, za, variant).total)
            assert c1 == pytest.approx(c2, rel=1e-13)
        assert np.allclose(bt_correlation(za, zb).values, bt_correlation(zb, za).values.T, rtol=1e-14)


@settings(max_examples=60, deadline=None)
@given(latents)
def test_matches_brute_force(pair):
    za, zb = pair
    assert np.allclose(bt_correlation(za, zb, eps=0).values, brute_bt(za.tolist(), zb.tolist()), rtol=1e-12, atol=1e-14)
    for red in ("sum", "mean"):
        got = mbt_correlation(za, zb, eps=0, reduction=red).values
        assert np.allclose(got, brute_mbt(za.tolist(), zb.tolist(), reduction=red), rtol=1e-12, atol=1e-14)


@settings(max_examples=60, deadline=None)
@given(latents, st.floats(0, 1))
def test_loss_decomposition(pair, lam):
    out = loss_value(*pair, "bt", lam=lam)
    assert out.invariance >= 0 and out.redundancy >= 0
    assert out.total == out.invariance + lam * out.redundancy
    inv, red, _ = brute_loss(bt_correlation(*pair).values.tolist(), lam)
    assert out.invariance == pytest.approx(inv, rel=1e-12, abs=1e-15)
    assert out.redundancy == pytest.approx(red, rel=1e-12, abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(latents)
def test_bt_bounded(pair):
    c = bt_correlation(*pair, eps=0).values
    assert np.all(np.abs(c) <= 1.0)


@settings(max_examples=40, deadline=None)
@given(latents, st.integers(0, 2 ** 32 - 1))
def test_scale_invariance(pair, seed):
    za, zb = pair
    rng = np.random.default_rng(seed)
    col = rng.uniform(0.1, 10, za.shape[1])
    row = rng.uniform(0.1, 10, (za.shape[0], 1))
    assert np.allclose(bt_correlation(za * col, zb, eps=0).values, bt_correlation(za, zb, eps=0).values,
                       rtol=1e-12, atol=1e-15)
    assert np.allclose(mbt_correlation(za, zb * row, eps=0).values, mbt_correlation(za, zb, eps=0).values,
                       rtol=1e-12, atol=1e-15)


def test_mbt_loss_invariant_to_row_scaling():
    rng = np.random.default_rng(9)
    za, zb = rng.normal(size=(8, 6)), rng.normal(size=(8, 6))
    base = loss_value(za, zb, "mbt", eps=0).total
    scaled = loss_value(za * rng.uniform(0.01, 100, (8, 1)), zb, "mbt", eps=0).total
    assert scaled == pytest.approx(base, rel=1e-10)


def test_dump_csv(tmp_path):
    c = bt_correlation(np.eye(3), np.eye(3))
    dump_csv(c, tmp_path / "c.csv")
    rows = (tmp_path / "c.csv").read_text().strip().splitlines()
    assert len(rows) == 3 and all(len(r.split(",")) == 3 for r in rows)
    assert np.allclose(np.loadtxt(tmp_path / "c.csv", delimiter=","), c.values)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 32), st.integers(2, 32), st.integers(0, 2**31))
def test_identical_inputs_exact_diagonal_and_trace(n, m, seed):
    rng = np.random.default_rng(seed)
    z = rng.uniform(-2, 2, (n, m)) * rng.lognormal(0, 2, (n, 1))
    assert np.all(np.diag(np.asarray(bt_correlation(z, z, eps=0.0))) == 1.0)
    assert mbt_correlation(z, z, eps=0.0).trace() == n
    # the float64 matrix itself is within a couple of ulps
    assert abs(np.trace(np.asarray(mbt_correlation(z, z, eps=0.0))) - n) <= 4 * np.spacing(float(n))
