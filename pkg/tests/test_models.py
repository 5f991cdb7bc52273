import math

import numpy as np
import pytest

from causalpref import autodiff as ad
from causalpref.models import (
    RewardModel,
    RewardModelSpec,
    TrainConfig,
    TrainingDiverged,
    Variant,
    batch_metrics,
    build_spec,
    train,
)
from causalpref.suite import lambda_zero_trunk_match
from causalpref.worlds import PreferenceDataset, sample_confounded_world

DIM = 6


def batch(n=12, seed=0, c=None):
    rng = np.random.default_rng(seed)
    e, e2 = rng.normal(size=(n, DIM)), rng.normal(size=(n, DIM))
    c = rng.integers(0, 2, n) if c is None else np.full(n, c)
    return e, e2, c, rng.integers(0, 2, n)


def model(variant, lam=1.0, seed=0):
    return RewardModel(build_spec(variant, DIM, hidden=5, latent=3, lam=lam, seed=seed))


def separable(n, seed):
    # reward is the first embedding coordinate, so a linear scorer separates every pair
    rng = np.random.default_rng(seed)
    e, e2 = rng.normal(size=(n, DIM)), rng.normal(size=(n, DIM))
    ell = (e[:, 0] < e2[:, 0]).astype(int)
    zeros = np.zeros(n, dtype=int)
    return PreferenceDataset([str(i) for i in range(n)], e, e2, zeros, zeros, ell)


class TestForward:
    @pytest.mark.parametrize("variant", list(Variant))
    def test_deterministic(self, variant):
        m = model(variant)
        e, _, c, _ = batch()
        np.testing.assert_array_equal(m.reward(e, c), m.reward(e, c))

    def test_zero_weights_give_zero_reward(self):
        m = model("base")
        m.trunk.zero_()
        e, _, c, _ = batch()
        np.testing.assert_array_equal(m.reward(e, c), np.zeros(len(e)))

    def test_zero_heads_give_zero_reward(self):
        m = model("multihead")
        for h in m.heads:
            h.zero_()
        e, _, c, _ = batch()
        np.testing.assert_array_equal(m.reward(e, c), np.zeros(len(e)))

    def test_objective_must_be_binary(self):
        e, _, _, _ = batch()
        for v in Variant:
            with pytest.raises(ValueError):
                model(v).reward(e, np.full(len(e), 2))

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            model("base").reward(np.zeros((3, DIM + 1)), [0, 0, 0])

    def test_base_sees_objective(self):
        m = model("base")
        e, _, _, _ = batch()
        assert not np.array_equal(m.reward(e, 0), m.reward(e, 1))

    def test_shared_trunk_and_heads_across_variants(self):
        mh, adv = model("multihead"), model("adversarial")
        for p, q in zip(mh.trunk.parameters() + mh.heads[0].parameters(),
                        adv.trunk.parameters() + adv.heads[0].parameters()):
            np.testing.assert_array_equal(p.value, q.value)


class TestSpec:
    def test_adversarial_needs_lambda(self):
        with pytest.raises(ValueError):
            build_spec("adversarial", DIM, lam=None)
        with pytest.raises(ValueError):
            build_spec("adversarial", DIM, lam=-1.0)

    def test_round_trip(self):
        spec = build_spec("adversarial", DIM, hidden=5, latent=3, lam=0.3, seed=4)
        assert RewardModelSpec.from_dict(spec.to_dict()) == spec

    def test_checkpoint_round_trip(self, tmp_path):
        m = model("adversarial", seed=2)
        m.save(tmp_path / "m.cplw", extra={"note": 1})
        back = RewardModel.load(tmp_path / "m.cplw")
        e, _, c, _ = batch()
        np.testing.assert_array_equal(back.reward(e, c), m.reward(e, c))
        assert back.spec == m.spec


class TestLosses:
    def test_uninformative_adversary_costs_two_log_two(self):
        m = model("adversarial")
        m.adversary.zero_()
        e, e2, c, ell = batch(n=9)
        adv = float(m.losses(e, e2, c, ell)["adversary"].value)
        assert adv == pytest.approx(9 * 2 * math.log(2))

    def test_total_is_sum_of_terms(self):
        m = model("adversarial")
        parts = m.losses(*batch())
        assert float(parts["total"].value) == pytest.approx(float(parts["reward"].value + parts["adversary"].value))

    def test_lambda_unset_rejected(self):
        m = model("adversarial")
        object.__setattr__(m.spec, "lam", None)
        with pytest.raises(ValueError):
            m.losses(*batch())


class TestGradients:
    @pytest.mark.parametrize("seed", range(5))
    def test_lambda_zero_matches_multihead_bitwise(self, seed):
        assert lambda_zero_trunk_match(seed)

    @pytest.mark.parametrize("lam", [0.01, 0.1])
    def test_lambda_continuity(self, lam):
        data = batch(seed=3)
        mh = model("multihead")
        ref = ad.backward(mh.losses(*data)["total"])
        m = model("adversarial", lam=lam)
        g = ad.backward(m.losses(*data)["total"])
        gaps = [np.max(np.abs(g[p] - ref[q])) for p, q in zip(m.trunk.parameters(), mh.trunk.parameters())]
        # the gap is the reversed adversary term, linear in lambda
        m1 = model("adversarial", lam=1.0)
        adv1 = ad.backward(m1.losses(*data)["adversary"])
        expected = [np.max(np.abs(lam * adv1[p])) for p in m1.trunk.parameters()]
        np.testing.assert_allclose(gaps, expected, rtol=1e-6, atol=1e-15)

    def test_gradient_assembly_at_lambda_one(self):
        # trunk receives dL_R - dL_adv; dL_adv comes from finite differences of the adversary loss value
        data = batch(n=8, seed=5)
        m = model("adversarial", lam=1.0)
        parts = m.losses(*data)
        g_total = ad.backward(parts["total"])
        g_reward = ad.backward(parts["reward"])
        w = m.trunk.parameters()[0]
        h = 1e-6
        for idx in [(0, 0), (2, 1), (5, 4)]:
            orig = w.value[idx]
            w.value[idx] = orig + h
            up = float(m.losses(*data)["adversary"].value)
            w.value[idx] = orig - h
            down = float(m.losses(*data)["adversary"].value)
            w.value[idx] = orig
            d_adv = (up - down) / (2 * h)
            assert g_total[w][idx] == pytest.approx(g_reward[w][idx] - d_adv, rel=1e-5, abs=1e-8)

    def test_adversary_descends_its_own_loss(self):
        m = model("adversarial", lam=1.0)
        parts = m.losses(*batch())
        g_total = ad.backward(parts["total"])
        g_adv = ad.backward(parts["adversary"])
        for p in m.adversary.parameters():
            np.testing.assert_array_equal(g_total[p], g_adv[p])

    @pytest.mark.parametrize("variant", ["multihead", "adversarial"])
    @pytest.mark.parametrize("objective", [0, 1])
    def test_head_isolation(self, variant, objective):
        m = model(variant)
        g = ad.backward(m.losses(*batch(c=objective))["total"])
        other = m.heads[1 - objective]
        for p in other.parameters():
            assert np.all(g.get(p, np.zeros_like(p.value)) == 0)
        assert any(np.any(g[p] != 0) for p in m.heads[objective].parameters())
        assert any(np.any(g[p] != 0) for p in m.trunk.parameters())
        if variant == "adversarial":
            assert any(np.any(g[p] != 0) for p in m.adversary.parameters())


class TestTraining:
    def test_separable_set_reaches_full_accuracy(self):
        splits = {"train": separable(400, 0), "validation": separable(100, 1)}
        res = train(build_spec("base", DIM, hidden=16, latent=8, seed=0), splits,
                    TrainConfig(epochs=10, batch_size=32, lr=1e-2, seeds=(0,)))
        assert max(h.train_accuracy for h in res.history) == 1.0

    def test_same_seed_same_history(self):
        splits = {"train": separable(200, 0), "validation": separable(50, 1)}
        spec = build_spec("adversarial", DIM, hidden=5, latent=3, seed=1)
        cfg = TrainConfig(epochs=3, batch_size=32, lr=1e-3, seeds=(4,))
        a, b = train(spec, splits, cfg), train(spec, splits, cfg)
        assert a.to_dict() == b.to_dict()
        for p, q in zip(a.model.get_weights(), b.model.get_weights()):
            np.testing.assert_array_equal(p, q)

    @pytest.mark.parametrize("variant", list(Variant))
    def test_early_stopping_keeps_best_epoch(self, variant):
        data = sample_confounded_world(600, 0.8, seed=0)
        val = sample_confounded_world(200, 0.8, seed=1)
        spec = build_spec(variant, data.dim, hidden=8, latent=4, seed=0)
        res = train(spec, {"train": data, "validation": val}, TrainConfig(epochs=6, batch_size=32, lr=3e-3))
        best = max(h.val_accuracy for h in res.history)
        assert res.best.val_accuracy == best
        assert res.best_epoch == min(h.epoch for h in res.history if h.val_accuracy == best)
        assert batch_metrics(res.model, val)[1] == best

    def test_swap_symmetry(self):
        data = sample_confounded_world(300, 0.7, seed=2)
        val = sample_confounded_world(100, 0.7, seed=3)
        spec = build_spec("adversarial", data.dim, hidden=8, latent=4, seed=0)
        cfg = TrainConfig(epochs=3, batch_size=32, lr=3e-3)
        a = train(spec, {"train": data, "validation": val}, cfg)
        b = train(spec, {"train": data.swapped(), "validation": val.swapped()}, cfg)
        for x, y in zip(a.history, b.history):
            assert x.train_nll == pytest.approx(y.train_nll, rel=1e-12)
            assert x.val_accuracy == y.val_accuracy

    def test_divergence_names_epoch_and_batch(self):
        bad = separable(64, 0)
        bad.e[5, 0] = np.inf
        with np.errstate(invalid="ignore"), pytest.raises(TrainingDiverged, match="epoch 1, batch"):
            train(build_spec("base", DIM, hidden=4, latent=2), {"train": bad, "validation": separable(10, 1)},
                  TrainConfig(epochs=1, batch_size=16))

    def test_empty_splits_rejected(self):
        with pytest.raises(ValueError):
            train(build_spec("base", DIM), {"train": separable(10, 0)}, TrainConfig(epochs=1))

    def test_config_bounds(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(seeds=())
