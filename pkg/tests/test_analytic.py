import math

import numpy as np
import pytest

from paircorr import analytic
from paircorr.analytic import (
    background_g2,
    diagonal_reduce,
    g2_exact,
    g2_quadratic,
    optimal_mu_approx,
    optimal_mu_exact,
    visibility,
    visibility_curve,
    visibility_exact,
    visibility_quadratic,
)
from paircorr.errors import BracketError, DomainError, UndefinedVisibilityError
from paircorr.experiment import ExampleStateSpec, build_example_state
from paircorr.model import DetectorModel, JointDistribution, SourceModel


@pytest.fixture(scope="module")
def example():
    return build_example_state(ExampleStateSpec(50, 0.6))


def closed_form_g2(p, p_d, p_n, mu, single=False):
    """Unnormalized coincidence probability from the Poisson generating function."""
    if single:
        m = p_d * (p.sum(axis=1) + p.sum(axis=0)) - p_d**2 * np.diag(p)
        a, b = m[:, None], m[None, :]
        c = p_d**2 * (p + p.T)
    else:
        a, b = p_d * p.sum(axis=1)[:, None], p_d * p.sum(axis=0)[None, :]
        c = p_d**2 * p
    q = 1.0 - p_n
    g = 1.0 - q * (np.exp(-mu * a) + np.exp(-mu * b)) + q * q * np.exp(-mu * (a + b - c))
    if single:
        np.fill_diagonal(g, 0.0)
    return g


def random_joint(shape, seed):
    rng = np.random.default_rng(seed)
    p = rng.random(shape) ** 3
    return JointDistribution(p / p.sum())


class TestExactCorrelation:
    @pytest.mark.parametrize("mu", [0.05, 1.0, 7.5, 40.0])
    @pytest.mark.parametrize("p_d,p_n", [(1.0, 0.0), (0.5, 0.01), (0.3, 0.2)])
    def test_matches_closed_form_dual(self, mu, p_d, p_n):
        joint = random_joint((6, 5), 3)
        res = g2_exact(joint, DetectorModel(p_d, p_n), mu)
        ref = closed_form_g2(joint.p, p_d, p_n, mu)
        assert np.allclose(res.unnormalized, ref, rtol=1e-9, atol=1e-13)

    @pytest.mark.parametrize("mu", [0.2, 3.0, 25.0])
    def test_matches_closed_form_single(self, mu):
        joint = random_joint((7, 7), 5)
        det = DetectorModel(0.6, 0.02)
        res = g2_exact(joint, det, mu, "single")
        ref = closed_form_g2(joint.p, 0.6, 0.02, mu, single=True)
        assert np.allclose(res.unnormalized, ref, rtol=1e-9, atol=1e-13)
        assert np.array_equal(res.g2, res.g2.T)
        assert np.all(np.diag(res.g2) == 0)

    def test_single_mode_needs_square(self):
        with pytest.raises(DomainError):
            g2_exact(random_joint((3, 4), 1), DetectorModel(0.5, 0.0), 1.0, "single")

    def test_invariants(self, example):
        res = g2_exact(example, DetectorModel(0.5, 0.01), 1.0)
        assert np.all(res.g2 >= 0)
        assert math.fsum(res.g2.ravel()) == pytest.approx(1.0, abs=1e-9)
        parts = res.pair + res.cross + res.photon_noise + res.noise_noise
        assert np.allclose(parts, res.unnormalized, rtol=0, atol=1e-10)
        assert res.normalization_constant == pytest.approx(res.unnormalized.sum())

    def test_ideal_low_flux_limit_is_joint(self, example):
        res = g2_exact(example, DetectorModel(1.0, 0.0), 1e-6)
        assert np.allclose(res.g2, example.p, rtol=1e-4, atol=1e-10)

    def test_no_detection_gives_uniform_noise(self, example):
        res = g2_exact(example, DetectorModel(0.0, 0.03), 2.0)
        assert np.allclose(res.unnormalized, 0.03**2, rtol=1e-12)
        assert np.all(res.pair == 0) and np.all(res.cross == 0) and np.all(res.photon_noise == 0)

    def test_decomposition_at_optimum(self, example):
        res = g2_exact(example, DetectorModel(0.5, 0.01), 1.0)
        bg = np.abs(((np.arange(50)[:, None] - np.arange(50)[None, :] + 25) % 50) - 25) >= 2
        cross, nn, pn = res.cross[bg].mean(), res.noise_noise[bg].mean(), res.photon_noise[bg].mean()
        assert cross / nn == pytest.approx(1.0, abs=0.05)
        assert pn / nn == pytest.approx(2.0, rel=0.05)

    def test_source_model_accepted(self, example):
        det = DetectorModel(0.5, 0.01)
        a = g2_exact(example, det, 1.5).g2
        b = g2_exact(example, det, SourceModel(1.5)).g2
        assert np.array_equal(a, b)


class TestQuadratic:
    def test_reduces_to_ideal_forms(self):
        joint = random_joint((5, 5), 8)
        mu = 0.3
        Pi, Pj, P = joint.marginal_i[:, None], joint.marginal_j[None, :], joint.p
        r = g2_quadratic(joint, DetectorModel(1.0, 0.0), mu)
        assert np.allclose(r.unnormalized, mu * P + mu**2 * (Pi - P) * (Pj - P), rtol=1e-13)
        p_d = 0.4
        r = g2_quadratic(joint, DetectorModel(p_d, 0.0), mu)
        ref = mu * p_d**2 * P + mu**2 * p_d**2 * (Pi - p_d * P) * (Pj - p_d * P)
        assert np.allclose(r.unnormalized, ref, rtol=1e-13)

    def test_overestimates_at_large_flux(self, example):
        det = DetectorModel(0.5, 0.01)
        ex, qd = g2_exact(example, det, 20.0), g2_quadratic(example, det, 20.0)
        for t in ("pair", "cross", "photon_noise"):
            assert np.all(getattr(qd, t) >= getattr(ex, t) - 1e-15), t

    @pytest.mark.parametrize("mu", [0.01, 0.05, 0.1])
    def test_converges_to_exact_at_low_flux(self, example, mu):
        det = DetectorModel(0.5, 0.01)
        ex, qd = g2_exact(example, det, mu), g2_quadratic(example, det, mu)
        for t in analytic.TERMS:
            e, q = getattr(ex, t), getattr(qd, t)
            nz = e > 0
            assert np.all(np.abs(q[nz] - e[nz]) / e[nz] < 0.01), t

    def test_background_quadratic_identities(self, example):
        det = DetectorModel(0.5, 0.01)
        b = background_g2(example, det, 0.0, "quadratic")
        assert np.allclose(b.unnormalized, 1e-4, rtol=1e-12)
        b = background_g2(example, det, 0.0, "exact")
        assert np.allclose(b.unnormalized, 1e-4, rtol=1e-12)
        for mu in (0.3, 1.0, 4.0):
            b = background_g2(example, det, mu, "quadratic")
            x = 0.5 * mu / 50
            assert np.allclose(b.unnormalized, (x + 0.01) ** 2, rtol=1e-12)

    def test_background_at_balance_point(self):
        # p_d * mu * P_i = p_d * mu * P_j = p_n on a uniform state
        p_d, p_n = 0.5, 0.02
        i, j = 1, 2
        joint = JointDistribution(np.full((4, 4), 1 / 16))
        mu = p_n / (p_d * 0.25)
        b = background_g2(joint, DetectorModel(p_d, p_n), mu, "quadratic")
        assert b.unnormalized[i, j] == pytest.approx(4 * p_n**2, rel=1e-12)

    def test_quadratic_terms_at_approx_optimum(self, example):
        det = DetectorModel(0.5, 0.01)
        q = g2_quadratic(example, det, optimal_mu_approx(example, det))
        assert q.cross[0, 25] == pytest.approx(1e-4, rel=1e-12)
        assert q.noise_noise[0, 25] == pytest.approx(1e-4, rel=1e-12)
        assert q.photon_noise[0, 25] == pytest.approx(2e-4, rel=1e-12)

    def test_bad_method(self, example):
        with pytest.raises(ValueError):
            background_g2(example, DetectorModel(0.5, 0.01), 1.0, "cubic")


class TestVisibility:
    def test_basic(self):
        assert visibility(3.0, 0.0) == 1.0
        assert visibility(2.5, 2.5) == 0.0
        with pytest.raises(UndefinedVisibilityError):
            visibility(0.0, 0.0)
        with pytest.raises(DomainError):
            visibility(-1.0, 1.0)

    def test_example_value(self, example):
        assert visibility_exact(example, DetectorModel(0.5, 0.01), 0.99) == pytest.approx(0.79, abs=0.01)

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("mu", [0.01, 0.7, 5.0])
    def test_closed_form_agrees_with_matrix_route(self, seed, mu):
        joint = random_joint((5, 6), seed)
        det = DetectorModel(0.2 + 0.15 * seed, 0.004 * seed)
        for i, j in [(0, 0), (2, 3), joint.peak()]:
            q = g2_quadratic(joint, det, mu).unnormalized[i, j]
            b = background_g2(joint, det, mu, "quadratic").unnormalized[i, j]
            if q == 0 and b == 0:
                continue
            assert visibility_quadratic(joint, det, mu, i, j) == pytest.approx(visibility(q, b), abs=1e-12)

    def test_closed_form_ideal_limits(self):
        joint = random_joint((4, 4), 4)
        i, j = joint.peak()
        Pi, Pj, P = joint.cell(i, j)
        mu = 0.2
        ref = P * (1 - mu * (Pi + Pj - P)) / (P * (1 - mu * (Pi + Pj - P)) + 2 * mu * Pi * Pj)
        assert visibility_quadratic(joint, DetectorModel(1.0, 0.0), mu) == pytest.approx(ref, rel=1e-13)

    def test_exact_matrix_route(self, example):
        det = DetectorModel(0.5, 0.02)
        g = g2_exact(example, det, 2.0).unnormalized[0, 0]
        b = background_g2(example, det, 2.0).unnormalized[0, 0]
        assert visibility_exact(example, det, 2.0) == pytest.approx(visibility(g, b), abs=1e-12)

    def test_curve(self, example):
        det = DetectorModel(0.5, 0.01)
        c = visibility_curve(example, det, np.linspace(0.2, 3.0, 15))
        assert np.allclose(c.detected, 0.5 * c.mu)
        assert c.optimum[1] == c.visibility.max()
        assert len(c.samples) == 15
        assert all(-1 < v <= 1 for _, v in c.samples)
        with pytest.raises(ValueError):
            visibility_curve(example, det, [1.0], method="other")


class TestOptimum:
    def test_approx(self, example):
        assert optimal_mu_approx(example, DetectorModel(0.5, 0.01)) == pytest.approx(1.0, rel=1e-14)
        assert optimal_mu_approx(example, DetectorModel(0.5, 0.01), array_mode="single") == pytest.approx(0.5, rel=1e-14)
        assert optimal_mu_approx(example, DetectorModel(0.5, 0.0)) == 0.0
        p = np.zeros((2, 2))
        p[0, 0] = 1.0
        with pytest.raises(DomainError):
            optimal_mu_approx(JointDistribution(p), DetectorModel(0.5, 0.01), 1, 1)

    def test_exact_examples(self, example):
        mu, v = optimal_mu_exact(example, DetectorModel(0.5, 0.01))
        assert mu == pytest.approx(0.99, abs=0.02) and v == pytest.approx(0.79, abs=0.01)
        mu, v = optimal_mu_exact(example, DetectorModel(0.5, 0.1))
        assert mu == pytest.approx(9.0, abs=0.3)

    def test_exact_is_local_maximum(self, example):
        det = DetectorModel(0.5, 0.05)
        mu, v = optimal_mu_exact(example, det)
        for f in (0.98, 1.02):
            assert visibility_exact(example, det, mu * f) < v

    def test_noiseless_returns_lower_end(self, example):
        det = DetectorModel(0.5, 0.0)
        for lo in (1e-2, 1e-4):
            mu, v = optimal_mu_exact(example, det, bracket=(lo, 1.0))
            assert mu == lo
        assert v == pytest.approx(1.0, abs=1e-4)

    def test_bracket_errors(self, example):
        det = DetectorModel(0.5, 0.01)
        with pytest.raises(BracketError):
            optimal_mu_exact(example, det, bracket=(0.01, 0.5))  # still rising
        with pytest.raises(BracketError):
            optimal_mu_exact(example, det, bracket=(2.0, 1.0))

    def test_max_visibility_decreases_with_noise(self, example):
        vs = [optimal_mu_exact(example, DetectorModel(0.5, p))[1] for p in (0.01, 0.02, 0.05, 0.1)]
        assert all(a > b for a, b in zip(vs, vs[1:]))

    def test_golden_section(self):
        x, fx = analytic.golden_section_max(lambda t: -(t - 0.3) ** 2, 0.0, 1.0, rtol=1e-8)
        assert x == pytest.approx(0.3, rel=1e-6)


class TestReduction:
    def test_identity_state(self):
        joint = build_example_state(ExampleStateSpec(12, 1.0))
        r = diagonal_reduce(joint.p)
        assert r.values[0] == pytest.approx(1.0) and np.all(r.values[1:] == 0)

    def test_example_state_weights(self):
        r = diagonal_reduce(build_example_state(ExampleStateSpec(50, 0.6)).p)
        assert r.values[0] == pytest.approx(0.6)
        assert r.values[1] == pytest.approx(0.2) and r.values[49] == pytest.approx(0.2)
        assert r.values.sum() == pytest.approx(1.0)

    def test_flat_background(self):
        r = diagonal_reduce(np.full((9, 9), 2.0))
        assert np.allclose(r.values, 18.0) and np.allclose(r.mean, 2.0)

    def test_result_and_angle_variants(self, example):
        res = g2_exact(example, DetectorModel(0.5, 0.01), 1.0)
        r = diagonal_reduce(res)
        assert r.values.sum() == pytest.approx(1.0, abs=1e-12)
        labels = np.arange(50) % 10
        r = diagonal_reduce(res, "angle", labels, 10, exclude_diagonal=True)
        assert r.counts.sum() == 50 * 49
        assert r.values.sum() == pytest.approx(1.0 - np.trace(res.g2), abs=1e-12)

    def test_non_square(self):
        with pytest.raises(DomainError):
            diagonal_reduce(np.ones((3, 4)))
