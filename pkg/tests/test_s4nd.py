import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sicrn import s4nd
from sicrn.errors import ArgumentError, UsageError
from sicrn.s4nd import S4ND2D
from sicrn.ssm import ContinuousSSM


def random_ssm(rng, n):
    A = -rng.uniform(0.05, 2.0, n) + 1j * rng.uniform(-6, 6, n)
    B = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    C = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    return ContinuousSSM(A, B, C, 0.0, float(rng.uniform(np.log(1e-2), np.log(0.5))))


def random_layer(rng, n1=3, n2=3, bidirectional=True):
    rev = random_ssm(rng, n2) if bidirectional else None
    return S4ND2D(random_ssm(rng, n1), random_ssm(rng, n2), float(rng.standard_normal()), rev)


def brute_force_conv2d(kernel, u):
    """Causal 2-D convolution by explicit summation."""
    T, F = u.shape
    y = np.zeros_like(u)
    for i in range(T):
        for j in range(F):
            y[i, j] = sum(kernel[a, b] * u[i - a, j - b] for a in range(i + 1) for b in range(j + 1))
    return y


class TestSeparableApply:
    @pytest.mark.parametrize("bidirectional", [True, False])
    @pytest.mark.parametrize("method", ["fft", "direct"])
    def test_matches_pde_oracle(self, bidirectional, method):
        rng = np.random.default_rng(0)
        p = random_layer(rng, 4, 2, bidirectional)
        u = rng.standard_normal((8, 6))
        np.testing.assert_allclose(s4nd.apply_2d(p, u, method), s4nd.oracle_pde(p, u), atol=1e-10)

    def test_unidirectional_is_2d_causal_conv_with_outer_product_kernel(self):
        rng = np.random.default_rng(1)
        p = random_layer(rng, bidirectional=False)
        p.D = 0.0
        u = rng.standard_normal((7, 5))
        K = s4nd.kernel_2d(p, 7, 5)
        np.testing.assert_allclose(s4nd.apply_2d(p, u), brute_force_conv2d(K, u), atol=1e-12)

    def test_kernel_is_outer_product(self):
        p = random_layer(np.random.default_rng(2))
        kt, kf, kr = s4nd.axis_kernels(p, 6, 4)
        np.testing.assert_allclose(s4nd.kernel_2d(p, 6, 4), np.outer(kt, kf))
        np.testing.assert_allclose(s4nd.kernel_2d(p, 6, 4, "reverse"), np.outer(kt, kr))
        assert np.linalg.matrix_rank(s4nd.kernel_2d(p, 6, 4)) == 1

    def test_reverse_kernel_needs_bidirectional(self):
        p = random_layer(np.random.default_rng(3), bidirectional=False)
        with pytest.raises(ArgumentError):
            s4nd.kernel_2d(p, 4, 4, "reverse")

    def test_time_causality(self):
        rng = np.random.default_rng(4)
        p = random_layer(rng)
        u = rng.standard_normal((10, 6))
        v = u.copy()
        v[6:] += 5.0
        a, b = s4nd.apply_2d(p, u, "direct"), s4nd.apply_2d(p, v, "direct")
        assert np.array_equal(a[:6], b[:6])

    def test_channel_batched(self):
        rng = np.random.default_rng(5)
        p = s4nd.init_s4nd(4, 4, rng, channels=3)
        u = rng.standard_normal((2, 3, 6, 5))
        y = s4nd.apply_2d(p, u)
        for c in range(3):
            pc = S4ND2D(*(ContinuousSSM(s.A[c], s.B[c], s.C[c], 0.0, s.log_dt[c]) for s in (p.time, p.freq)),
                        float(p.D[c]),
                        ContinuousSSM(p.freq_rev.A[c], p.freq_rev.B[c], p.freq_rev.C[c], 0.0, p.freq_rev.log_dt[c]))
            np.testing.assert_allclose(y[:, c], s4nd.apply_2d(pc, u[:, c]), atol=1e-12)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 8), st.integers(1, 8),
           st.booleans(), st.integers(0, 2**31 - 1))
    def test_oracle_property(self, n1, n2, T, F, bidirectional, seed):
        rng = np.random.default_rng(seed)
        p = random_layer(rng, n1, n2, bidirectional)
        u = rng.standard_normal((T, F))
        np.testing.assert_allclose(s4nd.apply_2d(p, u), s4nd.oracle_pde(p, u), atol=1e-9)


class TestOracleGuards:
    def test_grid_limit(self):
        p = random_layer(np.random.default_rng(6))
        with pytest.raises(UsageError):
            s4nd.oracle_pde(p, np.zeros((33, 4)))

    def test_batched_params_rejected(self):
        p = s4nd.init_s4nd(2, 2, np.random.default_rng(7), channels=2)
        with pytest.raises(UsageError):
            s4nd.oracle_pde(p, np.zeros((4, 4)))

    def test_input_rank(self):
        p = random_layer(np.random.default_rng(8))
        with pytest.raises(ArgumentError):
            s4nd.apply_2d(p, np.zeros(5))
