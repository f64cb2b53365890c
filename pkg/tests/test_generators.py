"""Generator catalog and assumption checkers."""

import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qbsde import (
    FIXTURE_NAMES,
    GeneratorSpec,
    Probe,
    check_quadratic_growth,
    check_strictly_quadratic,
    check_strong_convexity,
    check_uniform_continuity,
    fixture,
    gtilde,
    reevaluate_witness,
    subgradient,
)
from qbsde.exceptions import ConfigurationError


class TestGtilde:
    def test_value_on_first_piece(self):
        # piecewise slope 2k - 1 with k = 1 on [0, 1], so the function is |z| there
        assert gtilde(np.array([0.5])) == pytest.approx(0.5, abs=1e-15)
        assert gtilde(np.array([0.0])) == 0.0

    def test_sandwich_bound_exact(self):
        rng = np.random.default_rng(42)
        z = rng.uniform(-20.0, 20.0, size=(10_000, 1))
        vals = gtilde(z)
        assert np.all(z[:, 0] ** 2 <= vals)
        assert np.all(vals <= 1.0 + z[:, 0] ** 2)

    @given(st.floats(min_value=0.0, max_value=50.0, allow_nan=False))
    @settings(max_examples=200, deadline=None)
    def test_sandwich_pointwise(self, r):
        v = float(gtilde(np.array([r])))
        assert r * r - 1e-12 <= v <= 1.0 + r * r + 1e-12

    def test_convexity_on_segments(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(-20, 20, (500, 1))
        b = rng.uniform(-20, 20, (500, 1))
        lam = rng.uniform(0, 1, (500, 1))
        mid = gtilde(lam * a + (1 - lam) * b)
        chord = lam[:, 0] * gtilde(a) + (1 - lam[:, 0]) * gtilde(b)
        assert np.all(mid <= chord + 1e-12)


class TestFixtureCatalog:
    def test_names(self):
        assert set(FIXTURE_NAMES) == {
            "pure_quadratic",
            "gtilde",
            "example_i",
            "example_ii",
            "example_iii",
            "example_iv",
        }

    def test_unknown_name(self):
        with pytest.raises(ConfigurationError):
            fixture("example_v")

    def test_pure_quadratic_values(self):
        gen = fixture("pure_quadratic", gamma=2.0).generator
        z = np.array([[1.0, 2.0]])
        np.testing.assert_allclose(gen.g1(0.0, np.zeros((1, 2)), z), [5.0])
        assert gen.gamma == 2.0

    def test_declared_constants(self):
        g3 = fixture("example_iii").generator
        assert g3.gamma == 1.0
        assert g3.strong_convexity == (1.0, 0.0)
        a, b, theta = g3.modulus_bounds
        assert (a, b, theta) == (1.0, 1.0, 1.0)

        g1 = fixture("example_i").generator
        assert g1.gamma == 4.0
        assert g1.gamma_bar is None
        assert g1.modulus_bounds[:2] == (0.0, 1.0)  # bounded perturbation, a = 0

        g2 = fixture("example_ii").generator
        assert g2.gamma_bar == 2.0
        assert g2.modulus_bounds == (1.0, 1.0, 0.5)

    def test_gtilde_fixture_constants(self):
        g = fixture("gtilde").generator
        assert g.gamma == 2.0 and g.gamma_bar == 2.0

    def test_recommended_terminals(self):
        assert fixture("pure_quadratic").terminal.name == "linear"
        assert fixture("example_ii").terminal.name == "abs"
        crit = fixture("example_iv").terminal
        assert crit.name == "critical" and crit.moment_order == 1.0

    def test_spec_validation(self):
        with pytest.raises(ConfigurationError):
            dataclasses.replace(fixture("pure_quadratic").generator, gamma=-1.0)
        with pytest.raises(ConfigurationError):
            dataclasses.replace(fixture("pure_quadratic").generator, gamma_bar=2.0)
        with pytest.raises(ConfigurationError):
            dataclasses.replace(
                fixture("example_iii").generator, modulus_bounds=(1.0, 1.0, 1.5)
            )


def _cubic_generator():
    def g1(t, b, z):
        z = np.asarray(z, dtype=float)
        return np.sum(np.abs(z) ** 3, axis=-1)

    return GeneratorSpec(
        g1=g1,
        g2=None,
        alpha=lambda t, b: np.zeros(np.asarray(b).shape[:-1]),
        gamma=1.0,
        description="cubic growth, violates the quadratic envelope",
    )


class TestQuadraticGrowth:
    def test_pure_quadratic_passes(self):
        rep = check_quadratic_growth(fixture("pure_quadratic").generator, dim=1)
        assert rep.passed and rep.samples_used > 0

    def test_all_fixtures_pass(self):
        for name in FIXTURE_NAMES:
            rep = check_quadratic_growth(
                fixture(name).generator, dim=1, include_perturbation=True
            )
            assert rep.passed, name

    def test_cubic_fails_with_witness_near_radius(self):
        rep = check_quadratic_growth(_cubic_generator(), Probe(radius=10.0), dim=1)
        assert not rep.passed
        assert rep.witnesses
        worst = max(np.linalg.norm(np.asarray(w.inputs["z"])) for w in rep.witnesses)
        assert worst > 5.0

    def test_monotone_in_radius_and_samples(self):
        # a failed verdict never flips back when probing harder
        base = Probe(radius=10.0)
        assert not check_quadratic_growth(_cubic_generator(), base, dim=1).passed
        wider = Probe(radius=20.0)
        assert not check_quadratic_growth(_cubic_generator(), wider, dim=1).passed
        denser = Probe(radius=10.0, n_radial=64, n_random=4096)
        assert not check_quadratic_growth(_cubic_generator(), denser, dim=1).passed


class TestStrictlyQuadratic:
    def test_gtilde_with_declared_bar(self):
        assert check_strictly_quadratic(fixture("gtilde").generator, dim=1).passed

    def test_example_ii(self):
        assert check_strictly_quadratic(fixture("example_ii").generator, dim=1).passed

    def test_zero_generator_fails(self):
        zero = GeneratorSpec(
            g1=lambda t, b, z: np.zeros(np.asarray(z).shape[:-1]),
            g2=None,
            alpha=lambda t, b: np.zeros(np.asarray(b).shape[:-1]),
            gamma=1.0,
            gamma_bar=1.0,
        )
        rep = check_strictly_quadratic(zero, dim=1)
        assert not rep.passed and rep.witnesses

    def test_missing_bar_rejected(self):
        with pytest.raises(ConfigurationError):
            check_strictly_quadratic(fixture("example_i").generator, dim=1)


class TestStrongConvexity:
    def test_pure_quadratic_bregman_identity(self):
        rep = check_strong_convexity(
            fixture("pure_quadratic").generator, candidate=(1.0, 0.0), dim=1
        )
        assert rep.passed

    def test_example_iv_declared_candidate(self):
        assert check_strong_convexity(fixture("example_iv").generator, dim=1).passed

    def test_example_iii_declared_candidate(self):
        assert check_strong_convexity(fixture("example_iii").generator, dim=1).passed

    def test_gtilde_candidate_refuted(self):
        rep = check_strong_convexity(
            fixture("gtilde").generator, candidate=(1.0, 0.1), dim=1
        )
        assert not rep.passed
        assert rep.witnesses

    def test_gtilde_within_piece_pair(self):
        # both points on the first linear piece: the Bregman gap vanishes while
        # the strong convexity right side stays positive
        gen = fixture("gtilde").generator
        z_anchor = np.array([0.05])
        z = np.array([0.95])
        u = subgradient(gen, 0.0, np.zeros(1), z_anchor)
        lhs = float(
            gen.g1(0.0, np.zeros((1, 1)), z[None, :])[0]
            - gen.g1(0.0, np.zeros((1, 1)), z_anchor[None, :])[0]
            - u @ (z - z_anchor)
        )
        rhs = 0.5 * 1.0 * float(np.sum((z - z_anchor) ** 2)) - 0.1
        assert lhs == pytest.approx(0.0, abs=1e-12)
        assert rhs == pytest.approx(0.305, abs=1e-12)
        assert lhs < rhs

    def test_refutation_survives_harder_probing(self):
        gen = fixture("gtilde").generator
        for probe in (Probe(radius=5.0), Probe(radius=20.0, n_random=4096)):
            assert not check_strong_convexity(gen, candidate=(1.0, 0.1), probe=probe, dim=1).passed


class TestUniformContinuity:
    @pytest.mark.parametrize("name", FIXTURE_NAMES)
    def test_fixture_perturbations(self, name):
        assert check_uniform_continuity(fixture(name).generator, dim=1).passed

    def test_modulus_zero_at_zero(self):
        for name in FIXTURE_NAMES:
            gen = fixture(name).generator
            if gen.modulus is None:
                assert gen.g2 is None, name
                continue
            assert float(gen.modulus(np.array([0.0]))[0]) == 0.0


class TestClassification:
    """Executed-and-passed checker set matches the declared assumption tuple."""

    @pytest.mark.parametrize("name", FIXTURE_NAMES)
    def test_declared_set(self, name):
        bundle = fixture(name)
        gen = bundle.generator
        results = {"A1": check_quadratic_growth(gen, dim=1, include_perturbation=True)}
        if gen.gamma_bar is not None:
            results["A2"] = check_strictly_quadratic(gen, dim=1)
        if gen.strong_convexity is not None:
            results["A3"] = check_strong_convexity(gen, dim=1)
        results["B"] = check_uniform_continuity(gen, dim=1)
        passed = {k for k, rep in results.items() if rep.passed}
        assert passed == set(bundle.assumptions), name
        assert set(results) == set(bundle.assumptions), name


class TestWitnessReevaluation:
    def test_strong_convexity_witnesses(self):
        gen = fixture("gtilde").generator
        rep = check_strong_convexity(gen, candidate=(1.0, 0.1), dim=1)
        assert not rep.passed
        for w in rep.witnesses:
            lhs, rhs = reevaluate_witness(gen, w)
            assert lhs == pytest.approx(w.lhs, rel=1e-12, abs=1e-12)
            assert rhs == pytest.approx(w.rhs, rel=1e-12, abs=1e-12)

    def test_growth_witnesses(self):
        gen = _cubic_generator()
        rep = check_quadratic_growth(gen, Probe(radius=10.0), dim=1)
        for w in rep.witnesses:
            lhs, rhs = reevaluate_witness(gen, w)
            assert lhs == pytest.approx(w.lhs, rel=1e-12, abs=1e-12)
            assert rhs == pytest.approx(w.rhs, rel=1e-12, abs=1e-12)
