import numpy as np
import pytest

from phnn import tensor as T
from phnn.algebra import (
    PHWeightSpec,
    build_conv_kernel,
    build_dense_H,
    count_params,
    kron,
)
from phnn.tensor import ShapeError, Tape, Tensor, backward, finite_diff_check


def kron_oracle(a, b):
    m, p = a.shape
    q, r = b.shape
    out = np.zeros((m * q, p * r))
    for i in range(m):
        for j in range(p):
            for kk in range(q):
                for ll in range(r):
                    out[i * q + kk, j * r + ll] = a[i, j] * b[kk, ll]
    return out


def dense_H_oracle(spec):
    acc = np.zeros((spec.d_out, spec.d_in))
    for i in range(spec.n):
        acc += kron_oracle(spec.A.data[i], spec.F.data[i])
    return acc


def conv_kernel_oracle(spec):
    k = spec.kernel_size
    acc = np.zeros((spec.d_out, spec.d_in, k, k))
    for u in range(k):
        for v in range(k):
            for i in range(spec.n):
                acc[:, :, u, v] += kron_oracle(spec.A.data[i], spec.F.data[i][:, :, u, v])
    return acc


class TestKron:
    def test_identity_times_identity(self):
        out = kron(Tensor(np.eye(2)), Tensor(np.eye(2)))
        np.testing.assert_array_equal(out.data, np.eye(4))

    def test_scalar_right_factor(self):
        swap = np.array([[0.0, 1.0], [1.0, 0.0]])
        out = kron(Tensor(swap), Tensor([[1.0]]))
        np.testing.assert_array_equal(out.data, swap)

    def test_matches_index_formula_oracle(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(2, 3))
        b = rng.normal(size=(3, 2))
        got = kron(Tensor(a), Tensor(b)).data
        np.testing.assert_array_equal(got, kron_oracle(a, b))

    def test_rank_check(self):
        with pytest.raises(ShapeError):
            kron(Tensor(np.zeros(3)), Tensor(np.zeros((2, 2))))

    def test_differentiable_both_sides(self):
        rng = np.random.default_rng(1)
        b = rng.normal(size=(2, 3))
        ra = rng.normal(size=(6, 6))
        rb = rng.normal(size=(4, 9))

        def fa(t):
            return T.sum_all(T.mul(kron(t, Tensor(b)), Tensor(ra)))

        def fb(t):
            return T.sum_all(T.mul(kron(Tensor(b), t), Tensor(rb)))

        assert finite_diff_check(fa, Tensor(rng.normal(size=(3, 2)))) < 1e-6
        assert finite_diff_check(fb, Tensor(rng.normal(size=(2, 3)))) < 1e-6


class TestSpec:
    def test_divisibility_enforced_at_construction(self):
        rng = np.random.default_rng(2)
        with pytest.raises(ShapeError, match="divisible"):
            PHWeightSpec.create(3, 8, 8, rng)

    def test_learnable_flags(self):
        spec = PHWeightSpec.create(2, 8, 6, np.random.default_rng(3))
        assert spec.A.requires_grad and spec.F.requires_grad

    def test_init_ranges(self):
        spec = PHWeightSpec.create(4, 64, 64, np.random.default_rng(4))
        ab = 1 / np.sqrt(4)
        fb = np.sqrt(6 / 128) * 2
        assert np.max(np.abs(spec.A.data)) <= ab
        assert np.max(np.abs(spec.F.data)) <= fb


class TestDenseH:
    def test_n1_degenerate_algebra(self):
        rng = np.random.default_rng(5)
        f = rng.normal(size=(1, 3, 4))
        spec = PHWeightSpec(1, Tensor(np.full((1, 1, 1), 2.5), requires_grad=True),
                            Tensor(f, requires_grad=True))
        np.testing.assert_allclose(build_dense_H(spec).data, 2.5 * f[0], atol=1e-15)

    def test_n2_identity_A_gives_block_diag(self):
        rng = np.random.default_rng(6)
        f1 = rng.normal(size=(3, 2))
        A = np.zeros((2, 2, 2))
        A[0] = np.eye(2)
        F = np.stack([f1, np.zeros_like(f1)])
        # second summand has zero A -> contributes nothing even with random F
        F[1] = rng.normal(size=(3, 2))
        A[1] = 0.0
        spec = PHWeightSpec(2, Tensor(A), Tensor(F))
        h = build_dense_H(spec).data
        np.testing.assert_array_equal(h[:3, :2], f1)
        np.testing.assert_array_equal(h[3:, 2:], f1)
        np.testing.assert_array_equal(h[:3, 2:], np.zeros((3, 2)))
        np.testing.assert_array_equal(h[3:, :2], np.zeros((3, 2)))

    @pytest.mark.parametrize("n", [1, 2, 3, 4])
    def test_matches_loop_oracle(self, n):
        rng = np.random.default_rng(100 + n)
        spec = PHWeightSpec.create(n, 4 * n, 3 * n, rng)
        got = build_dense_H(spec).data
        assert np.max(np.abs(got - dense_H_oracle(spec))) < 1e-12

    def test_bilinear_in_A_and_F(self):
        rng = np.random.default_rng(7)
        n = 3
        a1 = rng.normal(size=(n, n, n))
        a2 = rng.normal(size=(n, n, n))
        f = rng.normal(size=(n, 2, 2))
        h_sum = build_dense_H(PHWeightSpec(n, Tensor(a1 + a2), Tensor(f))).data
        h1 = build_dense_H(PHWeightSpec(n, Tensor(a1), Tensor(f))).data
        h2 = build_dense_H(PHWeightSpec(n, Tensor(a2), Tensor(f))).data
        np.testing.assert_allclose(h_sum, h1 + h2, atol=1e-12)
        f2 = rng.normal(size=(n, 2, 2))
        h_fsum = build_dense_H(PHWeightSpec(n, Tensor(a1), Tensor(f + f2))).data
        h_f2 = build_dense_H(PHWeightSpec(n, Tensor(a1), Tensor(f2))).data
        np.testing.assert_allclose(h_fsum, h1 + h_f2, atol=1e-12)

    def test_gradient_flow_through_matmul(self):
        rng = np.random.default_rng(8)
        n = 2
        spec = PHWeightSpec.create(n, 4, 4, rng)
        x = rng.normal(size=(3, 4))
        r = rng.normal(size=(3, 4))

        def loss_wrt_A(t):
            s = PHWeightSpec(n, t, spec.F)
            return T.sum_all(T.mul(T.matmul(Tensor(x), build_dense_H(s)), Tensor(r)))

        def loss_wrt_F(t):
            s = PHWeightSpec(n, spec.A, t)
            return T.sum_all(T.mul(T.matmul(Tensor(x), build_dense_H(s)), Tensor(r)))

        assert finite_diff_check(loss_wrt_A, Tensor(spec.A.data)) < 1e-4
        assert finite_diff_check(loss_wrt_F, Tensor(spec.F.data)) < 1e-4

    def test_weighted_sum_with_ones_matches_plain(self):
        rng = np.random.default_rng(9)
        spec = PHWeightSpec.create(3, 6, 6, rng)
        plain = build_dense_H(spec).data
        weighted = build_dense_H(spec, weights=Tensor(np.ones(3))).data
        assert np.max(np.abs(weighted - plain)) < 1e-12

    def test_weights_gradient(self):
        rng = np.random.default_rng(10)
        spec = PHWeightSpec.create(3, 6, 6, rng)
        r = rng.normal(size=(6, 6))

        def f(t):
            return T.sum_all(T.mul(build_dense_H(spec, weights=t), Tensor(r)))

        assert finite_diff_check(f, Tensor(np.ones(3))) < 1e-6


class TestConvKernel:
    def test_k1_reduces_to_dense(self):
        rng = np.random.default_rng(11)
        cspec = PHWeightSpec.create(2, 6, 4, rng, kernel_size=1)
        dspec = PHWeightSpec(2, cspec.A, Tensor(cspec.F.data[:, :, :, 0, 0]))
        np.testing.assert_array_equal(build_conv_kernel(cspec).data[:, :, 0, 0],
                                      build_dense_H(dspec).data)

    def test_identity_A_no_cross_block_coupling(self):
        rng = np.random.default_rng(12)
        n = 2
        A = np.zeros((n, n, n))
        A[0] = np.eye(n)
        F = rng.normal(size=(n, 3, 2, 3, 3))
        kernel = build_conv_kernel(PHWeightSpec(n, Tensor(A), Tensor(F))).data
        np.testing.assert_array_equal(kernel[:3, 2:], np.zeros((3, 2, 3, 3)))
        np.testing.assert_array_equal(kernel[3:, :2], np.zeros((3, 2, 3, 3)))

    def test_matches_per_offset_oracle(self):
        rng = np.random.default_rng(13)
        spec = PHWeightSpec.create(3, 6, 9, rng, kernel_size=3)
        got = build_conv_kernel(spec).data
        assert np.max(np.abs(got - conv_kernel_oracle(spec))) < 1e-12

    def test_wrong_builder_for_spec_kind(self):
        rng = np.random.default_rng(14)
        with pytest.raises(ShapeError):
            build_dense_H(PHWeightSpec.create(2, 4, 4, rng, kernel_size=3))
        with pytest.raises(ShapeError):
            build_conv_kernel(PHWeightSpec.create(2, 4, 4, rng))

    def test_gradients(self):
        rng = np.random.default_rng(15)
        spec = PHWeightSpec.create(2, 4, 4, rng, kernel_size=3)
        x = rng.normal(size=(2, 4, 5, 5))
        r = rng.normal(size=(2, 4, 5, 5))

        def loss_wrt_F(t):
            s = PHWeightSpec(2, spec.A, t)
            y = T.conv2d(Tensor(x), build_conv_kernel(s), stride=1, padding=1)
            return T.sum_all(T.mul(y, Tensor(r)))

        assert finite_diff_check(loss_wrt_F, Tensor(spec.F.data)) < 1e-4


class TestParamCount:
    def test_formula_forced_example(self):
        spec = PHWeightSpec.create(4, 64, 64, np.random.default_rng(16))
        pc = count_params(spec)
        assert pc.ph_params == 4 * 16 * 16 + 4 * 16
        assert pc.dense_equivalent == 4096
        assert float(pc.ratio) == 0.265625

    def test_n1_ratio_slightly_above_one(self):
        spec = PHWeightSpec.create(1, 8, 8, np.random.default_rng(17))
        pc = count_params(spec)
        assert pc.ph_params == 8 * 8 + 1
        assert float(pc.ratio) == pytest.approx(1 + 1 / 64)

    @pytest.mark.parametrize("n,do,di,k", [(2, 8, 8, None), (4, 16, 8, None), (2, 8, 8, 3)])
    def test_overhead_identity(self, n, do, di, k):
        # ratio - 1/n == n^3 / dense_equivalent, exactly
        spec = PHWeightSpec.create(n, do, di, np.random.default_rng(18), kernel_size=k)
        pc = count_params(spec)
        from fractions import Fraction
        assert pc.ratio - Fraction(1, n) == Fraction(n ** 3, pc.dense_equivalent)


def test_oracle_equivalence_sweep():
    # 100 random specs per n, dense and conv, against the brute-force oracle
    rng = np.random.default_rng(19)
    for n in (1, 2, 3, 4):
        for _ in range(20):
            bo, bi = rng.integers(1, 4, size=2)
            spec = PHWeightSpec.create(n, n * int(bo), n * int(bi), rng)
            assert np.max(np.abs(build_dense_H(spec).data - dense_H_oracle(spec))) < 1e-12
            cspec = PHWeightSpec.create(n, n * int(bo), n * int(bi), rng, kernel_size=3)
            assert np.max(np.abs(build_conv_kernel(cspec).data - conv_kernel_oracle(cspec))) < 1e-12
