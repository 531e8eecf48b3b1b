"""Substitution-error bound measurements and the rewrite audit."""

import numpy as np
import pytest

from sere import bounds, moe, rerouting, similarity
from sere.errors import ConfigError, DimensionError


def _char_poly_coeffs(a):
    """Characteristic polynomial coefficients via the trace recursion."""
    n = a.shape[0]
    coeffs = [1.0]
    m = np.zeros_like(a)
    c = 1.0
    for k in range(1, n + 1):
        m = a @ m + c * np.eye(n)
        c = -np.trace(a @ m) / k
        coeffs.append(c)
    return coeffs


def _spectral_norm_oracle(a):
    """Largest singular value from the characteristic polynomial of a.T a."""
    gram = a.T @ a
    roots = np.roots(_char_poly_coeffs(gram))
    largest = max(float(r.real) for r in roots)
    return float(np.sqrt(max(largest, 0.0)))


class TestExpertDelta:
    def test_identical_experts_have_zero_gap(self, rng):
        e = moe.ExpertWeights(
            w_gate=rng.standard_normal((4, 8)),
            w_up=rng.standard_normal((4, 8)),
            w_down=rng.standard_normal((8, 4)),
        )
        x = rng.standard_normal((10, 4))
        assert bounds.expert_delta(e, e, x) == 0.0

    def test_matches_per_row_oracle(self, rng):
        def make():
            return moe.ExpertWeights(
                w_gate=rng.standard_normal((4, 8)),
                w_up=rng.standard_normal((4, 8)),
                w_down=rng.standard_normal((8, 4)),
            )

        e1, e2 = make(), make()
        x = rng.standard_normal((7, 4))
        y1 = moe.expert_forward(e1, x)
        y2 = moe.expert_forward(e2, x)
        want = np.mean([np.sqrt(((y1[t] - y2[t]) ** 2).sum()) for t in range(7)])
        assert bounds.expert_delta(e1, e2, x) == pytest.approx(want, abs=1e-12)


class TestSpectralNorm:
    def test_diagonal_matrix(self):
        assert bounds.spectral_norm(np.diag([3.0, -5.0, 2.0])) == pytest.approx(5.0, abs=1e-10)

    def test_zero_matrix(self):
        assert bounds.spectral_norm(np.zeros((4, 3))) == 0.0

    def test_rank_one_matrix(self, rng):
        u = rng.standard_normal(5)
        v = rng.standard_normal(3)
        want = np.sqrt((u * u).sum()) * np.sqrt((v * v).sum())
        assert bounds.spectral_norm(np.outer(u, v)) == pytest.approx(want, rel=1e-12)

    @pytest.mark.parametrize("n", [2, 3, 4])
    def test_matches_characteristic_polynomial_oracle(self, n):
        rng = np.random.default_rng(20 + n)
        for _ in range(5):
            a = rng.standard_normal((n + 1, n))
            assert bounds.spectral_norm(a) == pytest.approx(
                _spectral_norm_oracle(a), rel=1e-8
            )

    def test_matches_library_norm(self, rng):
        for _ in range(5):
            a = rng.standard_normal((8, 6))
            assert bounds.spectral_norm(a) == pytest.approx(
                float(np.linalg.norm(a, 2)), rel=1e-10
            )

    def test_rejects_non_matrix(self):
        with pytest.raises(DimensionError):
            bounds.spectral_norm(np.zeros(3))


class TestLipschitzChain:
    def test_empty_chain_is_identity(self):
        assert bounds.lipschitz_of_linear_chain([]) == 1.0

    def test_single_matrix_is_its_norm(self, rng):
        a = rng.standard_normal((4, 4))
        assert bounds.lipschitz_of_linear_chain([a]) == bounds.spectral_norm(a)

    def test_chain_multiplies_norms(self, rng):
        a = rng.standard_normal((4, 5))
        b = rng.standard_normal((5, 3))
        want = bounds.spectral_norm(a) * bounds.spectral_norm(b)
        assert bounds.lipschitz_of_linear_chain([a, b]) == pytest.approx(want, rel=1e-12)

    def test_chain_bounds_the_composite(self, rng):
        a = rng.standard_normal((4, 5))
        b = rng.standard_normal((5, 3))
        assert bounds.spectral_norm(a @ b) <= bounds.lipschitz_of_linear_chain([a, b]) + 1e-10

    def test_non_conformable_chain_rejected(self, rng):
        with pytest.raises(DimensionError):
            bounds.lipschitz_of_linear_chain(
                [rng.standard_normal((4, 5)), rng.standard_normal((4, 3))]
            )


class TestExperimentValidation:
    def test_too_few_samples_rejected(self):
        with pytest.raises(ConfigError):
            bounds.make_bound_experiment(seed=0, n_samples=99)

    def test_nonlinear_downstream_rejected(self):
        with pytest.raises(ConfigError):
            bounds.make_bound_experiment(seed=0, downstream_kind="nonlinear")

    def test_substitution_must_hit_last_layer(self):
        exp = bounds.make_bound_experiment(seed=0)
        with pytest.raises(ConfigError):
            bounds.BoundExperiment(
                model=exp.model,
                downstream=exp.downstream,
                layer_index=0,
                expert_index=exp.expert_index,
                replacement=exp.replacement,
                n_samples=exp.n_samples,
                seed=exp.seed,
            )

    def test_replacement_shape_checked(self, rng):
        exp = bounds.make_bound_experiment(seed=0)
        bad = moe.ExpertWeights(
            w_gate=rng.standard_normal((3, 8)),
            w_up=rng.standard_normal((3, 8)),
            w_down=rng.standard_normal((8, 3)),
        )
        with pytest.raises(DimensionError):
            bounds.BoundExperiment(
                model=exp.model,
                downstream=exp.downstream,
                layer_index=exp.layer_index,
                expert_index=exp.expert_index,
                replacement=bad,
                n_samples=exp.n_samples,
                seed=exp.seed,
            )

    def test_unknown_replacement_kind_rejected(self):
        with pytest.raises(ConfigError):
            bounds.make_bound_experiment(seed=0, replacement="transpose")


class TestBoundMeasurement:
    def test_identity_replacement_is_exactly_zero(self):
        exp = bounds.make_bound_experiment(seed=3, replacement="identity")
        rep = bounds.measure_substitution_error(exp)
        assert rep.measured_error == 0.0
        assert rep.delta == 0.0
        assert rep.weighted_delta == 0.0
        assert rep.holds_tight and rep.holds_loose and rep.holds_samplewise

    def test_zero_downstream_collapses_everything(self):
        exp = bounds.make_bound_experiment(seed=4)
        squashed = bounds.BoundExperiment(
            model=exp.model,
            downstream=(np.zeros((exp.model.d_h, exp.model.d_h)),),
            layer_index=exp.layer_index,
            expert_index=exp.expert_index,
            replacement=exp.replacement,
            n_samples=exp.n_samples,
            seed=exp.seed,
        )
        rep = bounds.measure_substitution_error(squashed)
        assert rep.lam == 0.0
        assert rep.measured_error == 0.0
        assert rep.holds_tight and rep.holds_loose and rep.holds_samplewise

    def test_empty_downstream_gap_equals_weighted_discrepancy(self):
        exp = bounds.make_bound_experiment(seed=5, n_downstream=0)
        rep = bounds.measure_substitution_error(exp)
        assert rep.lam == 1.0
        # only the swapped expert's single slot moves, so the output gap
        # is exactly its weighted discrepancy
        assert rep.measured_error == pytest.approx(rep.weighted_delta, rel=1e-9, abs=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_bound_holds_on_random_experiments(self, seed):
        rep = bounds.measure_substitution_error(bounds.make_bound_experiment(seed=seed))
        assert rep.holds_samplewise
        assert rep.holds_tight
        assert rep.holds_loose
        assert rep.weighted_delta <= rep.delta + 1e-12

    def test_report_fields_are_consistent(self):
        rep = bounds.measure_substitution_error(bounds.make_bound_experiment(seed=6))
        assert rep.tolerance == pytest.approx(1e-9 + 1e-6 * rep.lam * rep.delta, abs=1e-15)
        assert rep.lam > 0.0
        assert rep.measured_error >= 0.0


class TestAudit:
    def test_rows_match_manual_rewrite(self, small_model, small_sims, rng):
        cfg = rerouting.RerouteConfig(retain_count=1, threshold=0.0)
        x = np.random.default_rng(31).standard_normal((6, small_model.d_h))
        rows = bounds.sere_bound_audit(small_model, small_sims, cfg, x)

        z = x
        for l, layer in enumerate(small_model.layers):
            assignment = moe.route_topk(layer.router, z)
            result = rerouting.apply_sere(assignment, small_sims[l], cfg)
            got = {(r.source, r.target) for r in rows if r.layer == l}
            assert got == set(result.reroute_map.items())
            for r in rows:
                if r.layer == l:
                    assert r.similarity == small_sims[l].values[r.source, r.target]
                    assert r.delta >= 0.0
            rewritten = moe.RoutingAssignment(
                indices=result.new_indices, weights=assignment.weights
            )
            z = moe.layer_forward(layer, z, rewritten, small_model.activation)

    @pytest.mark.parametrize("seed", range(12))
    def test_most_similar_partner_has_smaller_gap(self, seed):
        model = moe.gen_model(seed=seed, n_layers=1, n_experts=6, top_k=2, d_h=6, d_m=12)
        x = np.random.default_rng([seed, 2]).standard_normal((64, 6))
        sim = similarity.estimate_similarity(model, [x], "frobenius")[0]
        layer = model.layers[0]
        for e in range(6):
            others = [j for j in range(6) if j != e]
            hi = max(others, key=lambda j: sim.values[e, j])
            lo = min(others, key=lambda j: sim.values[e, j])
            d_hi = bounds.expert_delta(layer.experts[e], layer.experts[hi], x)
            d_lo = bounds.expert_delta(layer.experts[e], layer.experts[lo], x)
            assert d_hi <= d_lo

    def test_correlation_nan_cases(self):
        assert np.isnan(bounds.audit_correlation([]))
        one = [bounds.AuditRow(layer=0, source=1, target=0, similarity=0.5, delta=0.1)]
        assert np.isnan(bounds.audit_correlation(one))
        flat = [
            bounds.AuditRow(layer=0, source=1, target=0, similarity=0.5, delta=0.1),
            bounds.AuditRow(layer=0, source=2, target=0, similarity=0.5, delta=0.2),
        ]
        assert np.isnan(bounds.audit_correlation(flat))

    def test_correlation_sign(self):
        rows = [
            bounds.AuditRow(layer=0, source=1, target=0, similarity=0.9, delta=0.1),
            bounds.AuditRow(layer=0, source=2, target=0, similarity=0.5, delta=0.5),
            bounds.AuditRow(layer=0, source=3, target=0, similarity=0.2, delta=0.8),
        ]
        assert bounds.audit_correlation(rows) < -0.9


class TestBoundCsv:
    def test_round_trip(self, tmp_path):
        entries = []
        for seed in (0, 1):
            rep = bounds.measure_substitution_error(bounds.make_bound_experiment(seed=seed))
            entries.append((seed, 2, rep))
        path = tmp_path / "bound.csv"
        bounds.write_bound_csv(entries, path)
        rows = bounds.read_bound_csv(path)
        assert len(rows) == 2
        for (seed, layer, rep), row in zip(entries, rows):
            assert row["seed"] == seed and row["layer"] == layer
            assert row["lambda"] == rep.lam
            assert row["measured_error"] == rep.measured_error
            assert row["margin"] == rep.lam * rep.delta + rep.tolerance - rep.measured_error
            assert row["holds_tight"] is rep.holds_tight

    def test_rejects_foreign_table(self, tmp_path):
        path = tmp_path / "x.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(Exception):
            bounds.read_bound_csv(path)
