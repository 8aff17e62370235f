"""Training-objective tests against hand-built vectors and the triple-loop oracle."""

import math

import numpy as np
import pytest

from scotkit.errors import BadRangeError, DimMismatchError, EmptyBatchError, EmptyInputError
from scotkit.loss import (
    LossConfig,
    clip_i2t_loss,
    loss_caption_neg,
    loss_neg_combined,
    loss_neg_prime,
    loss_pos,
    loss_pos_with_grad,
    margin_gate,
    total_loss,
)
from scotkit.tensor import Pcg32

from oracles import (
    central_difference_grad,
    max_relative_error,
    near_gate_boundary,
    oracle_clip_i2t,
    oracle_cosine,
    oracle_loss_terms,
)

R75 = math.sqrt(0.75)


def unit_batch(rng: Pcg32, n: int, d: int) -> np.ndarray:
    m = rng.normal(n * d).reshape(n, d)
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def clean_batch(seed: int, n: int, d: int, margin: float):
    """Random unit batches redrawn until no similarity sits near the gate."""
    rng = Pcg32(seed)
    while True:
        vc, tu, t = (unit_batch(rng, n, d) for _ in range(3))
        s_tu = vc @ tu.T
        s_t = vc @ t.T
        off = s_tu[~np.eye(n, dtype=bool)]
        if not near_gate_boundary(off, margin) and not near_gate_boundary(s_t, margin):
            return vc, tu, t


class TestMarginGate:
    def test_above_passes_value(self):
        assert margin_gate(np.array([0.5]), 0.2)[0] == 0.5

    def test_below_and_at_threshold_zeroed(self):
        out = margin_gate(np.array([0.1, 0.2]), 0.2)
        assert out.tolist() == [0.0, 0.0]


class TestFrozenValues:
    """Expected numbers computed by hand from the printed definitions."""

    def test_attraction_two_halves(self):
        vc = np.array([[1, 0, 0, 0], [0, 0, 1, 0]], dtype=float)
        tu = np.array([[0.5, R75, 0, 0], [0, 0, 0.5, R75]], dtype=float)
        assert loss_pos(vc, tu) == pytest.approx(-1.1931471805599454, abs=1e-12)

    def test_attraction_orthogonal_pairs(self):
        vc = np.array([[1, 0, 0, 0], [0, 0, 1, 0]], dtype=float)
        tu = np.array([[0, 1, 0, 0], [0, 0, 0, 1]], dtype=float)
        assert loss_pos(vc, tu) == pytest.approx(-math.log(2.0), abs=1e-12)

    def test_batch_negatives_symmetric_half(self):
        """Off-diagonal sims 0.5 at margin 0: log(2 + 2 e^0.5)."""
        vc = np.array([[1, 0, 0, 0], [0, 0, 1, 0]], dtype=float)
        tu = np.array([[0, 0, 0.5, R75], [0.5, R75, 0, 0]], dtype=float)
        cfg = LossConfig(margin=0.0)
        assert loss_neg_prime(vc, tu, cfg) == pytest.approx(1.667224164740052, abs=1e-12)

    def test_batch_negatives_one_gated_out(self):
        """Sims 0.1 and 0.5 at margin 0.2: log(3 + e^0.5)."""
        vc = np.array([[1, 0, 0, 0], [0, 0, 1, 0]], dtype=float)
        tu = np.array(
            [[0, 0, 0.5, R75], [0.1, math.sqrt(1 - 0.01), 0, 0]], dtype=float
        )
        cfg = LossConfig(margin=0.2)
        assert loss_neg_prime(vc, tu, cfg) == pytest.approx(1.5365921862326961, abs=1e-12)

    def test_batch_negatives_single_example_is_zero(self):
        vc = np.array([[1.0, 0.0]])
        tu = np.array([[0.0, 1.0]])
        assert loss_neg_prime(vc, tu, LossConfig()) == pytest.approx(0.0, abs=1e-15)

    def test_exact_margin_hit_is_gated(self):
        vc = np.array([[1, 0, 0, 0], [0, 0, 1, 0]], dtype=float)
        tu = np.array(
            [[0, 0, 0.2, math.sqrt(1 - 0.04)], [0.2, math.sqrt(1 - 0.04), 0, 0]],
            dtype=float,
        )
        cfg = LossConfig(margin=0.2)
        # both off-diagonal sims equal the margin exactly: strict gate zeroes them
        assert loss_neg_prime(vc, tu, cfg) == pytest.approx(math.log(4.0), abs=1e-12)

    def test_caption_term_single_pair(self):
        vc = np.array([[1.0, 0.0]])
        t = np.array([[0.9, math.sqrt(1 - 0.81)]])
        assert loss_caption_neg(vc, t, LossConfig(margin=0.2)) == pytest.approx(0.9, abs=1e-12)

    def test_total_single_example_defaults(self):
        vc = np.array([[1.0, 0.0]])
        tu = np.array([[1.0, 0.0]])
        t = np.array([[0.0, 1.0]])
        out = total_loss(vc, tu, t, LossConfig())
        assert out.l_total == pytest.approx(-10.0, abs=1e-12)
        assert out.l_pos == pytest.approx(-1.0, abs=1e-12)
        assert out.l_neg_prime == pytest.approx(0.0, abs=1e-15)
        assert out.l_caption_neg == pytest.approx(0.0, abs=1e-15)

    def test_clip_identity_batch(self):
        rows = np.eye(2)
        assert clip_i2t_loss(rows, rows, temperature=1.0) == pytest.approx(
            0.3132616875182228, abs=1e-12
        )


class TestAgainstTripleLoopOracle:
    def test_random_batches(self):
        rng = Pcg32(7)
        for case in range(60):
            n = int(rng.uniform(1, 9))
            d = int(rng.uniform(2, 24))
            vc, tu, t = (unit_batch(rng, n, d) for _ in range(3))
            cfg = LossConfig(margin=float(rng.uniform(-0.2, 0.6)))
            got = total_loss(vc, tu, t, cfg)
            exp = oracle_loss_terms(vc, tu, t, cfg.margin, cfg.alpha_pos, cfg.alpha_neg)
            assert got.l_pos == pytest.approx(exp[0], rel=1e-12)
            assert got.l_neg_prime == pytest.approx(exp[1], rel=1e-12)
            assert got.l_caption_neg == pytest.approx(exp[2], rel=1e-12)
            assert got.l_total == pytest.approx(exp[3], rel=1e-12)

    def test_exclude_diagonal_variant(self):
        rng = Pcg32(8)
        vc, tu, t = (unit_batch(rng, 5, 8) for _ in range(3))
        cfg = LossConfig(margin=0.2, exclude_diagonal=True)
        got = loss_neg_prime(vc, tu, cfg)
        exp = oracle_loss_terms(vc, tu, t, 0.2, 10.0, 0.1, exclude_diagonal=True)[1]
        assert got == pytest.approx(exp, rel=1e-12)

    def test_exclude_diagonal_all_gated(self):
        """With every off-diagonal gated out the sum is N^2 - N unit terms."""
        vc = np.eye(4)
        tu = np.eye(4)  # S = I: every off-diagonal similarity is 0, below the gate
        cfg = LossConfig(margin=0.9, exclude_diagonal=True)
        assert loss_neg_prime(vc, tu, cfg) == pytest.approx(math.log(12.0), abs=1e-12)

    def test_exclude_diagonal_single_example_raises(self):
        cfg = LossConfig(exclude_diagonal=True)
        with pytest.raises(EmptyInputError):
            loss_neg_prime(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), cfg)

    def test_clip_matches_oracle(self):
        rng = Pcg32(9)
        for _ in range(20):
            n = int(rng.uniform(1, 7))
            d = int(rng.uniform(2, 16))
            a, b = unit_batch(rng, n, d), unit_batch(rng, n, d)
            for kappa in (0.07, 0.5, 1.0):
                assert clip_i2t_loss(a, b, kappa) == pytest.approx(
                    oracle_clip_i2t(a, b, kappa), rel=1e-10
                )


class TestInvariants:
    def test_neg_prime_floor_log_n(self):
        """L_neg' >= log N for any batch (diagonal contributes N unit terms)."""
        rng = Pcg32(10)
        for _ in range(200):
            n = int(rng.uniform(1, 10))
            vc, tu = unit_batch(rng, n, 6), unit_batch(rng, n, 6)
            lam = float(rng.uniform(-1.0, 1.0))
            assert loss_neg_prime(vc, tu, LossConfig(margin=lam)) >= math.log(n) - 1e-12

    def test_margin_monotone_for_nonnegative_margins(self):
        """For margins >= 0, raising the margin never raises the repulsion term."""
        rng = Pcg32(11)
        for _ in range(100):
            n = int(rng.uniform(2, 8))
            vc, tu = unit_batch(rng, n, 6), unit_batch(rng, n, 6)
            lams = sorted(float(rng.uniform(0.0, 1.0)) for _ in range(4))
            vals = [loss_neg_prime(vc, tu, LossConfig(margin=l)) for l in lams]
            for lo, hi in zip(vals, vals[1:]):
                assert hi <= lo + 1e-12

    def test_alpha_weighting_is_linear(self):
        rng = Pcg32(12)
        vc, tu, t = (unit_batch(rng, 6, 10) for _ in range(3))
        for ap, an in [(10.0, 0.1), (1.0, 1.0), (3.5, 0.0)]:
            cfg = LossConfig(margin=0.2, alpha_pos=ap, alpha_neg=an)
            out = total_loss(vc, tu, t, cfg)
            assert out.l_total == pytest.approx(
                ap * out.l_pos + an * (out.l_neg_prime + out.l_caption_neg), rel=1e-12
            )
            assert out.l_neg_combined == pytest.approx(
                out.l_neg_prime + out.l_caption_neg, rel=1e-12
            )

    def test_all_gates_closed_means_constant_negatives(self):
        """When every similarity is at or below the margin the repulsion gradient vanishes."""
        vc = np.eye(3)
        tu = np.roll(np.eye(3), 1, axis=0)
        t = np.roll(np.eye(3), 2, axis=0)
        cfg = LossConfig(margin=0.99)
        out = total_loss(vc, tu, t, cfg)
        _, g_pos = loss_pos_with_grad(vc, tu)
        np.testing.assert_allclose(out.grad_composed, cfg.alpha_pos * g_pos, atol=1e-15)

    def test_losses_finite_on_degenerate_similarity(self):
        vc = np.ones((8, 4)) / 2.0
        tu = np.ones((8, 4)) / 2.0
        out = total_loss(vc, tu, vc, LossConfig())
        assert np.isfinite(out.l_total)


class TestGradients:
    def test_total_loss_gradient_matches_central_differences(self):
        rng = Pcg32(13)
        checked = 0
        seed = 100
        while checked < 10:
            seed += 1
            n = int(rng.uniform(2, 8))
            d = int(rng.uniform(3, 12))
            cfg = LossConfig(margin=float(rng.uniform(0.0, 0.5)))
            vc, tu, t = clean_batch(seed, n, d, cfg.margin)
            analytic = total_loss(vc, tu, t, cfg).grad_composed

            def f(x, tu=tu, t=t, cfg=cfg):
                return total_loss(x, tu, t, cfg).l_total

            numeric = central_difference_grad(f, vc, step=1e-5)
            assert max_relative_error(analytic, numeric) < 1e-5
            checked += 1

    def test_attraction_gradient_is_softmax_weighted(self):
        """dL/dS_ii = -exp(S_ii)/sum_k exp(S_kk), pushed through the cosine."""
        vc = np.array([[1.0, 0.0], [0.0, 1.0]])
        tu = np.array([[1.0, 0.0], [0.0, 1.0]])
        _, g = loss_pos_with_grad(vc, tu)
        # S = I; softmax over the diagonal is uniform; cosine jacobian at
        # aligned unit vectors is zero tangentially: d cos(x, y)/dx = y - x.
        np.testing.assert_allclose(g, np.zeros_like(g), atol=1e-12)

    def test_gradient_zero_upstream_of_gated_entries(self):
        rng = Pcg32(14)
        vc, tu, _ = clean_batch(15, 4, 8, 0.2)
        cfg = LossConfig(margin=1.0)  # every off-diagonal gated out
        out = total_loss(vc, tu, tu, cfg)
        _, g_pos = loss_pos_with_grad(vc, tu)
        np.testing.assert_allclose(out.grad_composed, cfg.alpha_pos * g_pos, atol=1e-14)


class TestValidation:
    def test_bad_margin(self):
        with pytest.raises(BadRangeError):
            LossConfig(margin=1.5)

    def test_bad_alpha(self):
        with pytest.raises(BadRangeError):
            LossConfig(alpha_pos=0.0)

    def test_bad_temperature(self):
        with pytest.raises(BadRangeError):
            LossConfig(temperature=0.0)
        with pytest.raises(BadRangeError):
            clip_i2t_loss(np.eye(2), np.eye(2), temperature=-1.0)

    def test_shape_mismatch(self):
        with pytest.raises(DimMismatchError):
            loss_pos(np.ones((2, 3)), np.ones((2, 4)))

    def test_empty_batch(self):
        with pytest.raises(EmptyBatchError):
            loss_pos(np.ones((0, 3)), np.ones((0, 3)))

    def test_combined_equals_sum_of_parts(self):
        rng = Pcg32(16)
        vc, tu, t = (unit_batch(rng, 5, 7) for _ in range(3))
        cfg = LossConfig()
        assert loss_neg_combined(vc, tu, t, cfg) == pytest.approx(
            loss_neg_prime(vc, tu, cfg) + loss_caption_neg(vc, t, cfg), rel=1e-12
        )

    def test_oracle_cosine_self_check(self):
        v = [3.0, 4.0]
        assert oracle_cosine(v, v) == pytest.approx(1.0, abs=1e-15)
