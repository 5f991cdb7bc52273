import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from causalpref.worlds import (
    ConfoundedWorld,
    EmbeddingConfig,
    EmbeddingMap,
    UltraFeedbackWorld,
    assign_label,
    assign_labels,
    concat_datasets,
    copula_parameter,
    load_dataset,
    make_splits,
    nonadditive_reward,
    nonadditive_world,
    sample_confounded_world,
    sample_ultrafeedback_world,
    save_dataset,
    substream,
    synth_embedding,
    uf_reward,
)


def delta_corr(ds):
    d = ds.z - ds.z_prime
    return float(np.corrcoef(d[:, 0], d[:, 1])[0, 1])


class TestUltraFeedback:
    def test_reward_formula(self):
        assert uf_reward(np.array([4.0, 2.0]), 0.25) == 2.5
        assert UltraFeedbackWorld(alpha=0.25).reward(np.array([[4.0, 2.0]]))[0] == 2.5

    @pytest.mark.parametrize("rho", [-0.8, -0.3, 0.0, 0.3, 0.6, 0.9])
    def test_correlation_control(self, rho):
        ds = sample_ultrafeedback_world(10_000, rho, seed=3)
        assert abs(delta_corr(ds) - rho) < 0.03

    def test_scores_are_clipped(self):
        ds = sample_ultrafeedback_world(5_000, 0.9, seed=0)
        assert ds.z.min() >= 0.0 and ds.z.max() <= 5.0

    def test_unattainable_target_rejected(self):
        with pytest.raises(ValueError, match="unattainable"):
            copula_parameter(1.2)
        with pytest.raises(ValueError):
            sample_ultrafeedback_world(10, 0.99)

    def test_bounds(self):
        with pytest.raises(ValueError):
            sample_ultrafeedback_world(0, 0.0)
        with pytest.raises(ValueError):
            sample_ultrafeedback_world(10, 0.0, alpha=1.5)

    def test_seeded_and_stream_separated(self):
        a = sample_ultrafeedback_world(50, 0.3, seed=1, stream="train")
        b = sample_ultrafeedback_world(50, 0.3, seed=1, stream="train")
        c = sample_ultrafeedback_world(50, 0.3, seed=1, stream="test")
        np.testing.assert_array_equal(a.e, b.e)
        assert not np.array_equal(a.z, c.z)


class TestConfounded:
    @pytest.mark.parametrize("rho", [0.5, 0.7, 0.9, 1.0])
    def test_confounding_control(self, rho):
        ds = sample_confounded_world(10_000, rho, seed=2)
        assert abs(np.mean(ds.t == ds.c) - rho) < 0.02

    def test_randomised_case_independent(self):
        ds = sample_confounded_world(10_000, 0.5, seed=4)
        assert abs(np.corrcoef(ds.t, ds.c)[0, 1]) < 0.03

    def test_full_confounding_has_no_inconsistent_examples(self):
        ds = sample_confounded_world(2_000, 1.0, seed=0)
        assert np.all(ds.t == ds.c)

    def test_objectives_balanced(self):
        ds = sample_confounded_world(1_001, 0.8, seed=0)
        assert abs(int(ds.c.sum()) - 500) <= 1

    @pytest.mark.parametrize("world", [ConfoundedWorld(), ConfoundedWorld(latent_corr=0.0, seed=5)])
    def test_aligned_factor_has_larger_variance(self, world):
        ds = sample_confounded_world(10_000, 0.5, world=world)
        for t in (0, 1):
            z = ds.z[ds.t == t]
            assert z[:, t].var() > z[:, 1 - t].var()

    def test_rho_bounds(self):
        for bad in (0.49, 1.2):
            with pytest.raises(ValueError):
                sample_confounded_world(10, bad)

    def test_reward_picks_objective_factor(self):
        z = np.array([[1.0, -2.0], [1.0, -2.0]])
        np.testing.assert_array_equal(ConfoundedWorld().reward(z, [0, 1]), [1.0, -2.0])


class TestLabels:
    def test_examples(self):
        rng = np.random.default_rng(0)
        assert assign_label(3.0, 1.0, rng) == 0
        assert assign_label(1.0, 3.0, rng) == 1

    def test_fair_tie_break(self):
        labels = assign_labels(np.zeros(10_000), np.zeros(10_000), np.random.default_rng(0))
        assert 0.48 < labels.mean() < 0.52

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            assign_label(np.nan, 0.0, np.random.default_rng(0))

    def test_btl_noise_matches_sigmoid(self):
        r = np.full(20_000, 1.0)
        labels = assign_labels(r, np.zeros_like(r), np.random.default_rng(1), btl_noise=True)
        assert abs((labels == 0).mean() - 1 / (1 + np.exp(-1.0))) < 0.015

    @pytest.mark.parametrize("kind", ["uf", "confounded"])
    def test_labels_recomputable_from_latents(self, kind):
        if kind == "uf":
            ds = sample_ultrafeedback_world(3_000, 0.6, seed=9)
            world = UltraFeedbackWorld()
            r, rp = world.reward(ds.z), world.reward(ds.z_prime)
        else:
            ds = sample_confounded_world(3_000, 0.7, seed=9)
            world = ConfoundedWorld(seed=9)
            r, rp = world.reward(ds.z, ds.c), world.reward(ds.z_prime, ds.c)
        untied = r != rp
        np.testing.assert_array_equal(ds.ell[untied], (r < rp).astype(int)[untied])


class TestEmbedding:
    def test_noise_free_embedding_is_deterministic(self):
        emap = EmbeddingMap(2, 2, EmbeddingConfig(noise=0.0, n_nuisance=0), seed=1)
        a = synth_embedding(emap, [0.3, -0.4], 1, seed=5)
        b = synth_embedding(emap, [0.3, -0.4], 1, seed=5)
        np.testing.assert_array_equal(a, b)

    def test_dimension_mismatch_rejected(self):
        emap = EmbeddingMap(2, 1, EmbeddingConfig(), seed=0)
        with pytest.raises(ValueError):
            emap.embed(np.zeros((3, 3)), np.zeros(3), np.random.default_rng(0))
        with pytest.raises(ValueError):
            emap.embed(np.zeros((3, 2)), np.zeros(2), np.random.default_rng(0))

    def test_linear_probe_recovers_latents(self):
        ds = sample_confounded_world(5_000, 0.5, seed=1)
        x = np.column_stack([ds.e, np.ones(len(ds))])
        coef, *_ = np.linalg.lstsq(x, ds.z, rcond=None)
        resid = ds.z - x @ coef
        r2 = 1 - resid.var(axis=0) / ds.z.var(axis=0)
        assert np.all(r2 > 0.8), r2


class TestNonadditive:
    def test_optimum_is_zero(self):
        assert nonadditive_reward(0, 0.8, -1.0, -1.0, 0.8, 0.3) == 0.0
        assert nonadditive_reward(1, 0.3, -1.0, -1.0, 0.8, 0.3) == 0.0

    def test_requires_ordered_gammas(self):
        with pytest.raises(ValueError):
            nonadditive_world(10, -1, -1, 0.3, 0.8)

    def test_prompt_kind_shared_by_pair(self):
        ds = nonadditive_world(200, -1, -1, 0.8, 0.3, seed=0)
        np.testing.assert_array_equal(ds.z[:, 0], ds.z_prime[:, 0])


class TestSplitsAndFiles:
    def test_degenerate_split(self):
        ds = sample_confounded_world(100, 0.5)
        parts = make_splits(ds, (1, 0, 0))
        assert len(parts["train"]) == 100 and len(parts["validation"]) == 0 and len(parts["test"]) == 0

    @given(st.integers(10, 200), st.floats(0, 1), st.integers(0, 100))
    def test_splits_partition(self, n, f, seed):
        ds = sample_confounded_world(n, 0.5, seed=0)
        parts = make_splits(ds, (f, (1 - f) / 2, (1 - f) / 2), seed=seed)
        ids = sorted(i for p in parts.values() for i in p.ids)
        assert ids == sorted(ds.ids)

    @pytest.mark.parametrize("fractions", [(0.5, 0.5), (0.5, 0.6, -0.1), (0.2, 0.2, 0.2)])
    def test_invalid_fractions(self, fractions):
        with pytest.raises(ValueError):
            make_splits(sample_confounded_world(10, 0.5), fractions)

    def test_round_trip(self, tmp_path):
        ds = sample_confounded_world(30, 0.7, seed=3)
        save_dataset(ds, tmp_path / "d.jsonl")
        back = load_dataset(tmp_path / "d.jsonl")
        np.testing.assert_array_equal(back.e, ds.e)
        np.testing.assert_array_equal(back.z_prime, ds.z_prime)
        np.testing.assert_array_equal(back.ell, ds.ell)
        assert back.header == ds.header

    def test_imported_embeddings_have_no_latents(self, tmp_path):
        path = tmp_path / "imp.jsonl"
        path.write_text('{"id": "a", "e": [0.1, 0.2], "e_prime": [0.3, 0.4], "c": 0, "t": 0, "ell": 1}\n')
        ds = load_dataset(path)
        assert not ds.has_latents and ds.dim == 2

    def test_missing_field_rejected(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"id": "a", "e": [0.1], "c": 0, "ell": 1}\n')
        with pytest.raises(ValueError, match="e_prime"):
            load_dataset(path)

    def test_swapped_and_concat(self):
        ds = sample_confounded_world(20, 0.5)
        sw = ds.swapped()
        np.testing.assert_array_equal(sw.e, ds.e_prime)
        np.testing.assert_array_equal(sw.ell, 1 - ds.ell)
        assert len(concat_datasets([ds, sw])) == 40

    def test_substreams_independent(self):
        a = substream(0, "x").random(5)
        b = substream(0, "y").random(5)
        assert not np.array_equal(a, b)
        np.testing.assert_array_equal(a, substream(0, "x").random(5))
