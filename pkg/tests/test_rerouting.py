"""Rewrite logic: primary selection, matching, thresholds, parallel kernel."""

import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sere import moe, rerouting, similarity
from sere.errors import ConfigError, DimensionError, InputError, SereError


def _load_fixture_assignment(fixtures_dir):
    d = json.loads((fixtures_dir / "four_token_assignment.json").read_text())
    return moe.RoutingAssignment(indices=d["indices"], weights=d["weights"])


def _load_fixture_sim(fixtures_dir):
    return similarity.load_similarity(fixtures_dir / "four_token_similarity.json")


def _random_symmetric_sim(rng, m):
    r = rng.random((m, m))
    v = (r + r.T) / 2.0
    np.fill_diagonal(v, 1.0)
    sim = similarity.SimilarityMatrix(values=v, metric="cosine")
    sim.validate()
    return sim


def _random_assignment(rng, t, k, m):
    router = moe.RouterWeights(w_router=rng.standard_normal((4, m)), top_k=k)
    return moe.route_topk(router, rng.standard_normal((t, 4)))


def _oracle_apply(indices, values, s_slots, threshold):
    """Set-algebra restatement of the rewrite contract."""
    k = indices.shape[1]
    primary = set(indices[:, :s_slots].ravel().tolist())
    secondary = sorted(set(indices[:, s_slots:].ravel().tolist()) - primary)
    preserved = set()
    mapping = {}
    for e in secondary:
        best = min(sorted(primary), key=lambda c: (-values[e, c], c))
        if threshold > 0.0 and values[e, best] < threshold:
            preserved.add(e)
        else:
            mapping[e] = best
    new = indices.copy()
    for t in range(indices.shape[0]):
        for kk in range(s_slots, k):
            e = int(indices[t, kk])
            if e in mapping:
                new[t, kk] = mapping[e]
    return new, primary, preserved, mapping


class TestConfig:
    def test_rejects_zero_retain(self):
        with pytest.raises(ConfigError):
            rerouting.RerouteConfig(retain_count=0, threshold=0.5)

    def test_rejects_threshold_outside_unit_interval(self):
        with pytest.raises(ConfigError):
            rerouting.RerouteConfig(retain_count=1, threshold=1.5)
        with pytest.raises(ConfigError):
            rerouting.RerouteConfig(retain_count=1, threshold=-0.1)

    def test_rejects_unknown_phase_mode(self):
        with pytest.raises(ConfigError):
            rerouting.RerouteConfig(retain_count=1, threshold=0.5, phase_mode="prefill_only")


class TestSelectPrimary:
    def test_union_over_tokens(self, fixtures_dir):
        a = _load_fixture_assignment(fixtures_dir)
        assert rerouting.select_primary(a, 1) == frozenset({1, 4})

    def test_grows_with_retain_count(self, rng):
        a = _random_assignment(rng, 6, 3, 8)
        p1 = rerouting.select_primary(a, 1)
        p2 = rerouting.select_primary(a, 2)
        assert p1 <= p2

    def test_rejects_retain_count_at_k(self, fixtures_dir):
        a = _load_fixture_assignment(fixtures_dir)
        with pytest.raises(ConfigError):
            rerouting.select_primary(a, 2)
        with pytest.raises(ConfigError):
            rerouting.select_primary(a, 0)


class TestBestPrimaryMatch:
    def test_matches_exhaustive_scan(self, rng):
        sim = _random_symmetric_sim(rng, 8)
        primary = frozenset({1, 4, 6})
        for e in range(8):
            best_s, best_e = rerouting.best_primary_match(e, primary, sim)
            want = max(sorted(primary), key=lambda c: sim.values[e, c])
            assert best_e in primary
            assert best_s == sim.values[e, want]

    def test_tie_goes_to_lowest_index(self):
        v = np.full((4, 4), 0.5)
        np.fill_diagonal(v, 1.0)
        sim = similarity.SimilarityMatrix(values=v, metric="cosine")
        best_s, best_e = rerouting.best_primary_match(0, frozenset({2, 3}), sim)
        assert (best_s, best_e) == (0.5, 2)

    def test_empty_primary_raises(self, rng):
        sim = _random_symmetric_sim(rng, 4)
        with pytest.raises(SereError):
            rerouting.best_primary_match(0, frozenset(), sim)


class TestApplySere:
    def test_reference_four_token_batch(self, fixtures_dir):
        a = _load_fixture_assignment(fixtures_dir)
        sim = _load_fixture_sim(fixtures_dir)
        cfg = rerouting.RerouteConfig(retain_count=1, threshold=0.5)
        res = rerouting.apply_sere(a, sim, cfg)
        assert res.primary_set == frozenset({1, 4})
        assert res.preserved_critical == frozenset({3})
        assert res.final_active == frozenset({1, 3, 4})
        assert res.reroute_map == {2: 1}
        np.testing.assert_array_equal(res.new_indices, [[1, 1], [4, 1], [1, 3], [4, 3]])

    def test_matches_set_algebra_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a = _random_assignment(rng, 6, 4, 10)
            sim = _random_symmetric_sim(rng, 10)
            cfg = rerouting.RerouteConfig(retain_count=2, threshold=0.5)
            res = rerouting.apply_sere(a, sim, cfg)
            new, primary, preserved, mapping = _oracle_apply(a.indices, sim.values, 2, 0.5)
            np.testing.assert_array_equal(res.new_indices, new)
            assert res.primary_set == primary
            assert res.preserved_critical == preserved
            assert res.reroute_map == mapping
            assert res.final_active == primary | preserved

    def test_threshold_one_preserves_everything(self, rng):
        a = _random_assignment(rng, 5, 3, 9)
        sim = _random_symmetric_sim(rng, 9)  # off-diagonal strictly below 1
        cfg = rerouting.RerouteConfig(retain_count=1, threshold=1.0)
        res = rerouting.apply_sere(a, sim, cfg)
        np.testing.assert_array_equal(res.new_indices, a.indices)
        assert res.reroute_map == {}
        assert res.final_active == frozenset(np.unique(a.indices).tolist())

    def test_threshold_zero_reroutes_everything(self, rng):
        a = _random_assignment(rng, 5, 3, 9)
        sim = _random_symmetric_sim(rng, 9)
        cfg = rerouting.RerouteConfig(retain_count=1, threshold=0.0)
        res = rerouting.apply_sere(a, sim, cfg)
        assert res.preserved_critical == frozenset()
        assert res.final_active == res.primary_set
        assert set(np.unique(res.new_indices).tolist()) == res.primary_set

    def test_rewrite_is_idempotent(self, rng):
        a = _random_assignment(rng, 6, 3, 8)
        sim = _random_symmetric_sim(rng, 8)
        cfg = rerouting.RerouteConfig(retain_count=1, threshold=0.6)
        first = rerouting.apply_sere(a, sim, cfg)
        again = rerouting.apply_sere(
            moe.RoutingAssignment(indices=first.new_indices, weights=a.weights), sim, cfg
        )
        np.testing.assert_array_equal(again.new_indices, first.new_indices)
        assert again.final_active == first.final_active
        assert again.reroute_map == {}

    def test_weights_never_touched(self, rng):
        a = _random_assignment(rng, 5, 3, 8)
        snapshot = a.weights.copy()
        sim = _random_symmetric_sim(rng, 8)
        res = rerouting.apply_sere(a, sim, rerouting.RerouteConfig(retain_count=1, threshold=0.0))
        np.testing.assert_array_equal(a.weights, snapshot)
        assert not hasattr(res, "weights")

    def test_retained_slots_never_rewritten(self, rng):
        for s in (1, 2):
            a = _random_assignment(rng, 6, 3, 8)
            sim = _random_symmetric_sim(rng, 8)
            res = rerouting.apply_sere(
                a, sim, rerouting.RerouteConfig(retain_count=s, threshold=0.0)
            )
            np.testing.assert_array_equal(res.new_indices[:, :s], a.indices[:, :s])

    def test_retain_count_equal_k_is_identity(self, rng):
        a = _random_assignment(rng, 4, 2, 6)
        sim = _random_symmetric_sim(rng, 6)
        res = rerouting.apply_sere(a, sim, rerouting.RerouteConfig(retain_count=2, threshold=0.3))
        np.testing.assert_array_equal(res.new_indices, a.indices)
        assert res.reroute_map == {}
        assert res.preserved_critical == frozenset()
        assert res.primary_set == res.final_active == frozenset(np.unique(a.indices).tolist())

    def test_retain_count_above_k_rejected(self, rng):
        a = _random_assignment(rng, 4, 2, 6)
        sim = _random_symmetric_sim(rng, 6)
        with pytest.raises(ConfigError):
            rerouting.apply_sere(a, sim, rerouting.RerouteConfig(retain_count=3, threshold=0.3))

    def test_thresholds_nest_active_sets(self, rng):
        a = _random_assignment(rng, 8, 4, 12)
        sim = _random_symmetric_sim(rng, 12)
        grid = [0.0, 0.25, 0.5, 0.75, 1.0]
        actives = [
            rerouting.apply_sere(
                a, sim, rerouting.RerouteConfig(retain_count=2, threshold=rho)
            ).final_active
            for rho in grid
        ]
        for lo, hi in zip(actives, actives[1:]):
            assert lo <= hi

    def test_similarity_out_of_range_rejected(self, rng):
        a = _random_assignment(rng, 4, 2, 6)
        v = np.full((6, 6), 1.5)
        sim = similarity.SimilarityMatrix(values=v, metric="cosine")
        with pytest.raises(InputError):
            rerouting.apply_sere(a, sim, rerouting.RerouteConfig(retain_count=1, threshold=0.5))

    def test_small_similarity_matrix_rejected(self, rng):
        a = _random_assignment(rng, 4, 2, 6)
        sim = _random_symmetric_sim(rng, 3)
        with pytest.raises(DimensionError):
            rerouting.apply_sere(a, sim, rerouting.RerouteConfig(retain_count=1, threshold=0.5))


class TestParallelKernel:
    @given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2, 4, 7]))
    def test_matches_sequential(self, seed, workers):
        rng = np.random.default_rng(seed)
        a = _random_assignment(rng, 6, 3, 9)
        sim = _random_symmetric_sim(rng, 9)
        cfg = rerouting.RerouteConfig(retain_count=1, threshold=float(rng.random()))
        seq = rerouting.apply_sere(a, sim, cfg)
        par = rerouting.apply_sere_parallel(a, sim, cfg, workers=workers)
        assert seq.new_indices.tobytes() == par.new_indices.tobytes()
        assert seq.primary_set == par.primary_set
        assert seq.preserved_critical == par.preserved_critical
        assert seq.final_active == par.final_active
        assert seq.reroute_map == par.reroute_map

    def test_more_workers_than_cells(self, rng):
        a = _random_assignment(rng, 1, 2, 6)
        sim = _random_symmetric_sim(rng, 6)
        cfg = rerouting.RerouteConfig(retain_count=1, threshold=0.0)
        seq = rerouting.apply_sere(a, sim, cfg)
        par = rerouting.apply_sere_parallel(a, sim, cfg, workers=16)
        np.testing.assert_array_equal(seq.new_indices, par.new_indices)

    def test_rejects_zero_workers(self, rng):
        a = _random_assignment(rng, 2, 2, 6)
        sim = _random_symmetric_sim(rng, 6)
        with pytest.raises(ConfigError):
            rerouting.apply_sere_parallel(
                a, sim, rerouting.RerouteConfig(retain_count=1, threshold=0.0), workers=0
            )


class TestResultInvariants:
    @given(st.integers(0, 2**20))
    def test_map_and_sets_are_consistent(self, seed):
        rng = np.random.default_rng(seed)
        a = _random_assignment(rng, 5, 3, 10)
        sim = _random_symmetric_sim(rng, 10)
        cfg = rerouting.RerouteConfig(retain_count=1, threshold=0.5)
        res = rerouting.apply_sere(a, sim, cfg)
        assert set(res.reroute_map).isdisjoint(res.primary_set)
        assert set(res.reroute_map).isdisjoint(res.preserved_critical)
        assert set(res.reroute_map.values()) <= res.primary_set
        assert res.final_active == res.primary_set | res.preserved_critical
        assert res.final_active == rerouting.final_active_set(res)
        assert frozenset(np.unique(res.new_indices).tolist()) == res.final_active
        assert len(res.final_active) <= len(np.unique(a.indices))
        # every rewritten cell moved along the map
        moved = res.new_indices != a.indices
        for t, kk in zip(*np.nonzero(moved)):
            assert res.new_indices[t, kk] == res.reroute_map[int(a.indices[t, kk])]


class TestPhaseGating:
    def test_decode_only_skips_prefill(self, small_model, small_sims, rng):
        x = rng.standard_normal((4, small_model.d_h))
        cfg = rerouting.RerouteConfig(retain_count=1, threshold=0.0, phase_mode="decode_only")
        plain = moe.model_forward(small_model, moe.TokenBatch(x, "prefill"))
        gated = moe.model_forward(
            small_model, moe.TokenBatch(x, "prefill"), config=cfg, sims=small_sims
        )
        assert plain.output.tobytes() == gated.output.tobytes()
        for trace in gated.layers:
            assert trace.reroute is None

    def test_decode_phase_always_rewrites(self, small_model, small_sims, rng):
        x = rng.standard_normal((4, small_model.d_h))
        decode_only = rerouting.RerouteConfig(
            retain_count=1, threshold=0.0, phase_mode="decode_only"
        )
        everywhere = rerouting.RerouteConfig(retain_count=1, threshold=0.0)
        a = moe.model_forward(
            small_model, moe.TokenBatch(x, "decode"), config=decode_only, sims=small_sims
        )
        b = moe.model_forward(
            small_model, moe.TokenBatch(x, "decode"), config=everywhere, sims=small_sims
        )
        assert a.output.tobytes() == b.output.tobytes()


class TestTraceSerialization:
    def test_result_dict_round_trip(self, rng):
        a = _random_assignment(rng, 5, 3, 8)
        sim = _random_symmetric_sim(rng, 8)
        res = rerouting.apply_sere(a, sim, rerouting.RerouteConfig(retain_count=1, threshold=0.4))
        back = rerouting.result_from_dict(json.loads(json.dumps(rerouting.result_to_dict(res))))
        np.testing.assert_array_equal(back.new_indices, res.new_indices)
        assert back.primary_set == res.primary_set
        assert back.preserved_critical == res.preserved_critical
        assert back.final_active == res.final_active
        assert back.reroute_map == res.reroute_map

    def test_trace_file_round_trip(self, tmp_path, rng):
        a = _random_assignment(rng, 4, 2, 6)
        sim = _random_symmetric_sim(rng, 6)
        res = rerouting.apply_sere(a, sim, rerouting.RerouteConfig(retain_count=1, threshold=0.4))
        layers = [{"layer": 0, "original": a.indices.tolist(), **rerouting.result_to_dict(res)}]
        path = tmp_path / "trace.json"
        rerouting.save_trace(layers, path)
        loaded = rerouting.load_trace(path)
        assert loaded["layers"] == layers
