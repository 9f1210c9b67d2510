import numpy as np
import pytest

from paircorr.analytic import diagonal_reduce, g2_exact, visibility_exact
from paircorr.errors import DomainError
from paircorr.experiment import (
    FIG3_P_N,
    AnnularGeometry,
    ExampleStateSpec,
    Fig4Point,
    angular_visibility,
    build_annular_joint,
    build_annulus,
    build_example_state,
    fig4_points,
    replicate_fig3,
    replicate_fig4,
)
from paircorr.model import DetectorModel, SourceModel


@pytest.fixture(scope="module")
def ring() -> AnnularGeometry:
    return build_annulus(24, 28, 2.0)


class TestExampleState:
    @pytest.mark.parametrize("D,c", [(2, 0.0), (5, 0.3), (50, 0.6), (17, 1.0)])
    def test_uniform_marginals(self, D, c):
        j = build_example_state(ExampleStateSpec(D, c))
        assert np.allclose(j.marginal_i, 1 / D, rtol=0, atol=1e-15)
        assert np.allclose(j.marginal_j, 1 / D, rtol=0, atol=1e-15)

    def test_maximally_correlated(self):
        j = build_example_state(ExampleStateSpec(8, 1.0))
        assert np.allclose(j.p, np.eye(8) / 8)

    def test_weights(self):
        j = build_example_state(ExampleStateSpec(50, 0.6))
        assert j.p[3, 3] == pytest.approx(0.6 / 50)
        assert j.p[4, 3] == pytest.approx(0.2 / 50) and j.p[3, 4] == pytest.approx(0.2 / 50)
        assert j.p[0, 49] == pytest.approx(0.2 / 50)  # cyclic wrap

    def test_domain(self):
        with pytest.raises(DomainError):
            build_example_state(ExampleStateSpec(1, 0.5))
        with pytest.raises(DomainError):
            build_example_state(ExampleStateSpec(10, 1.5))


class TestAnnulus:
    def test_pixel_and_bin_counts(self, ring):
        assert ring.n_pixels == 660
        assert ring.n_bins == 180
        assert ring.bin_counts.sum() == 660
        assert np.all(ring.r >= 24) and np.all(ring.r < 28)

    def test_small_hand_checked_ring(self):
        g = build_annulus(1, 2, 90.0)
        # (+-1, 0), (0, +-1) at r = 1 and the four diagonals at r = sqrt(2)
        assert g.n_pixels == 8 and g.n_bins == 4
        assert list(g.bin_counts) == [2, 2, 2, 2]
        got = {(int(x), int(y)): int(b) for x, y, b in zip(g.x, g.y, g.bins)}
        assert got == {(1, 0): 0, (1, 1): 0, (0, 1): 1, (-1, 1): 1,
                       (-1, 0): 2, (-1, -1): 2, (0, -1): 3, (1, -1): 3}

    def test_bad_geometry(self):
        with pytest.raises(DomainError):
            build_annulus(5, 4)
        with pytest.raises(DomainError):
            build_annulus(1, 2, 7.0)
        with pytest.raises(DomainError):
            build_annulus(1, 2, 120.0)  # odd number of bins

    def test_joint_is_angle_anticorrelated(self, ring):
        joint = build_annular_joint(ring)
        assert np.allclose(joint.marginal_i, 1 / 660)
        assert np.all(joint.p[ring.bins[:, None] != ring.opposite_bin(ring.bins)[None, :]] == 0)

    def test_pair_mass_at_180_degrees(self, ring):
        joint = build_annular_joint(ring)
        res = g2_exact(joint, DetectorModel(1.0, 0.0), SourceModel(1e-3), "single")
        red = diagonal_reduce(res.pair, "angle", ring.bins, ring.n_bins, exclude_diagonal=True)
        window = red.values[[89, 90, 91]].sum()
        assert window / red.values.sum() >= 0.99
        assert int(np.argmax(red.values)) == 90

    def test_angular_visibility(self):
        curve = np.ones(180)
        curve[90] = 3.0
        assert angular_visibility(curve, 180) == pytest.approx(0.5)


class TestFig3:
    def test_default_sweep(self):
        res = replicate_fig3()
        assert sorted({r["p_n"] for r in res.curves}) == sorted(FIG3_P_N)
        opt = {o["p_n"]: o for o in res.optima}
        assert opt[0.01]["v_max"] == pytest.approx(0.79, abs=0.01)
        assert opt[0.1]["v_max"] == pytest.approx(0.23, abs=0.01)
        vmax = [opt[p]["v_max"] for p in FIG3_P_N]
        assert all(a > b for a, b in zip(vmax, vmax[1:]))
        panels = {r["panel"] for r in res.decomposition}
        assert panels == {"optimum", "below", "above"}

    def test_single_noise_level(self):
        res = replicate_fig3([0.02], mu_grid=[0.5, 1.0, 2.0, 4.0])
        assert len(res.curves) == 4 and len(res.optima) == 1

    def test_noiseless_curve_decreases(self):
        res = replicate_fig3([0.0], mu_grid=[0.01, 0.1, 1.0, 5.0])
        v = [r["visibility_exact"] for r in res.curves]
        assert all(a > b for a, b in zip(v, v[1:]))
        assert v[0] > 0.999

    def test_equal_visibility_panels(self):
        res = replicate_fig3([0.01], mu_grid=[1.0])
        rows = {p: [r for r in res.decomposition if r["panel"] == p] for p in ("below", "above")}
        mu_lo, mu_hi = rows["below"][0]["mu"], rows["above"][0]["mu"]
        assert mu_lo < 0.99 < mu_hi
        joint, det = build_example_state(ExampleStateSpec()), DetectorModel(0.5, 0.01)
        assert visibility_exact(joint, det, mu_lo) == pytest.approx(visibility_exact(joint, det, mu_hi), abs=1e-8)


class TestFig4:
    def test_noise_baseline(self, ring):
        res = replicate_fig4(ring, DetectorModel(0.5, 6.2 / 660), [0.0], n_frames=4000, with_exact=False)
        assert res.rows[0]["mean_events"] == pytest.approx(6.2, abs=0.2)

    def test_low_flux_events(self, ring):
        res = replicate_fig4(ring, DetectorModel(0.5, 6.2 / 660), [2.0], n_frames=4000)
        row = res.rows[0]
        assert row["expected_events"] == pytest.approx(6.2 + 2 * 0.5 * 2.0, rel=0.01)
        assert row["mean_events"] == pytest.approx(row["expected_events"], rel=0.03)

    def test_points_from_settings(self):
        pts = fig4_points({"low": 1.0, "high": 2.0}, {"short": 2.0, "long": 4.0}, {"short": 0.01, "long": 0.012})
        assert Fig4Point(8.0, 0.012, "high/long") in pts and len(pts) == 4

    def test_collapse_on_mean_events(self, ring):
        # two settings that share the same mean pair number and noise level
        pts = fig4_points({"weak": 3.0, "strong": 6.0}, {"long": 2.0, "short": 1.0},
                          {"long": 6.2 / 660, "short": 6.2 / 660})
        same = [p for p in pts if p.mu == 6.0]
        assert len(same) == 2
        res = replicate_fig4(ring, DetectorModel(0.5, 0.0), points=same, n_frames=2000, seed=5)
        a, b = res.rows
        assert a["visibility_exact"] == b["visibility_exact"]
        assert a["visibility_mc"] == pytest.approx(b["visibility_mc"], abs=0.05)
        assert a["mean_events"] == pytest.approx(b["mean_events"], rel=0.03)
