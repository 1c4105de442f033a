import numpy as np
import pytest

from fedsim import (
    AdversaryPlan,
    ConfigError,
    TrojanSpec,
    Update,
    boost_update,
    corrupt_shard,
    plan_adversary,
    split_plus_segments,
)
from fedsim.data import LabeledDataset, plus_pattern, square_pattern
from fedsim.nn_core import Batch, ParamVector, init_params, local_train, loss_and_grad, mlp_spec


def make_trojan(**kw):
    args = dict(base_class=5, target_class=7, poison_fraction=0.5,
                pattern=plus_pattern())
    args.update(kw)
    return TrojanSpec(**args)


def make_shard(rng, n=40, base_class=5, n_classes=10):
    images = rng.uniform(0.0, 1.0, size=(n, 28, 28))
    labels = rng.integers(0, n_classes, size=n).astype(np.int64)
    labels[: n // 2] = base_class  # guarantee base-class presence
    return LabeledDataset(images, labels)


class TestPlanning:
    def test_floor_of_fraction(self):
        rng = np.random.default_rng(0)
        plan = plan_adversary(10, 0.45, "trojan", rng, trojan=make_trojan())
        assert len(plan.corrupt_ids) == 4
        plan = plan_adversary(45, 0.1, "trojan", np.random.default_rng(0), trojan=make_trojan())
        assert len(plan.corrupt_ids) == 4

    def test_zero_fraction_means_no_attack(self):
        plan = plan_adversary(10, 0.0, "trojan", np.random.default_rng(0), trojan=make_trojan())
        assert plan.mode == "none"
        assert plan.corrupt_ids == ()
        assert not plan.is_corrupt(3)

    def test_ids_sorted_unique_in_range(self):
        rng = np.random.default_rng(5)
        plan = plan_adversary(20, 0.5, "trojan", rng, trojan=make_trojan())
        ids = plan.corrupt_ids
        assert list(ids) == sorted(set(ids))
        assert all(0 <= a < 20 for a in ids)

    def test_deterministic_given_seed(self):
        a = plan_adversary(30, 0.3, "trojan", np.random.default_rng(42), trojan=make_trojan())
        b = plan_adversary(30, 0.3, "trojan", np.random.default_rng(42), trojan=make_trojan())
        assert a.corrupt_ids == b.corrupt_ids

    def test_full_pattern_for_plain_trojan(self):
        plan = plan_adversary(10, 0.4, "trojan", np.random.default_rng(1), trojan=make_trojan())
        for a in plan.corrupt_ids:
            assert sorted(plan.pattern_of[a]) == sorted(plus_pattern())

    def test_validation(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ConfigError, match="mode"):
            plan_adversary(10, 0.1, "pixel_bomb", rng)
        with pytest.raises(ConfigError, match="corrupt_frac"):
            plan_adversary(10, 1.0, "trojan", rng, trojan=make_trojan())
        with pytest.raises(ConfigError, match="boost_factor"):
            plan_adversary(10, 0.1, "trojan", rng, trojan=make_trojan(), boost_factor=0.0)


class TestPlusSegments:
    def test_partition_of_plus(self):
        segs = split_plus_segments()
        flat = [px for seg in segs for px in seg]
        assert len(flat) == len(set(flat)) == 9
        assert sorted(flat) == sorted(plus_pattern())

    def test_pairwise_disjoint(self):
        segs = split_plus_segments()
        for i in range(len(segs)):
            for j in range(i + 1, len(segs)):
                assert not set(segs[i]) & set(segs[j])


class TestDistributedDealing:
    def deal(self, num_agents, frac, seed=3, **kw):
        return plan_adversary(num_agents, frac, "distributed_trojan",
                              np.random.default_rng(seed), trojan=make_trojan(**kw))

    def test_four_agents_one_segment_each(self):
        plan = self.deal(10, 0.4)
        segs = set(split_plus_segments())
        dealt = [tuple(plan.pattern_of[a]) for a in plan.corrupt_ids]
        assert set(dealt) == segs

    def test_two_agents_two_segments_each(self):
        plan = self.deal(10, 0.2)
        union = [px for a in plan.corrupt_ids for px in plan.pattern_of[a]]
        assert sorted(union) == sorted(plus_pattern())
        segs = split_plus_segments()
        a0, a1 = plan.corrupt_ids
        assert tuple(plan.pattern_of[a0]) == segs[0] + segs[2]
        assert tuple(plan.pattern_of[a1]) == segs[1] + segs[3]

    def test_eight_agents_cover_pattern_twice(self):
        plan = self.deal(10, 0.8)
        union = [px for a in plan.corrupt_ids for px in plan.pattern_of[a]]
        assert sorted(set(union)) == sorted(plus_pattern())
        counts = {}
        for px in union:
            counts[px] = counts.get(px, 0) + 1
        assert set(counts.values()) == {2}

    def test_uneven_count_rejected(self):
        with pytest.raises(ConfigError, match="evenly"):
            self.deal(10, 0.3)  # 3 corrupt agents, 4 segments

    def test_non_plus_pattern_needs_segments(self):
        with pytest.raises(ConfigError, match="segments"):
            self.deal(10, 0.4, pattern=square_pattern())
        segs = (tuple((r, c, 1.0) for r, c in [(0, 0), (0, 1)]),
                tuple((r, c, 1.0) for r, c in [(1, 0), (1, 1)]))
        plan = self.deal(10, 0.2, pattern=tuple((r, c, 1.0) for r in (0, 1) for c in (0, 1)),
                         segments=segs)
        union = sorted(px for a in plan.corrupt_ids for px in plan.pattern_of[a])
        assert union == sorted(px for s in segs for px in s)


class TestShardCorruption:
    def test_honest_agent_shard_untouched(self):
        rng = np.random.default_rng(2)
        shard = make_shard(rng)
        plan = plan_adversary(10, 0.2, "trojan", rng, trojan=make_trojan())
        honest = next(a for a in range(10) if not plan.is_corrupt(a))
        assert corrupt_shard(shard, plan, make_trojan(), honest, rng) is shard

    def test_trojan_stamps_and_relabels(self):
        rng = np.random.default_rng(4)
        shard = make_shard(rng)
        trojan = make_trojan()
        plan = AdversaryPlan(corrupt_ids=(0,), mode="trojan",
                             pattern_of={0: trojan.pattern})
        out = corrupt_shard(shard, plan, trojan, 0, np.random.default_rng(0))
        n_base = int((shard.labels == 5).sum())
        flipped = int(((shard.labels == 5) & (out.labels == 7)).sum())
        assert flipped == int(np.floor(0.5 * n_base))
        changed = np.flatnonzero((shard.labels == 5) & (out.labels == 7))
        for i in changed:
            for r, c, v in trojan.pattern:
                assert out.images[i, r, c] == v

    def test_label_flip_keeps_images_bitwise(self):
        rng = np.random.default_rng(6)
        shard = make_shard(rng)
        trojan = make_trojan(poison_fraction=1.0)
        plan = AdversaryPlan(corrupt_ids=(0,), mode="label_flip_boosted", boost_factor=10.0)
        out = corrupt_shard(shard, plan, trojan, 0, np.random.default_rng(0))
        assert out.images.tobytes() == shard.images.tobytes()
        assert out.images is not shard.images
        base = shard.labels == 5
        assert np.all(out.labels[base] == 7)
        assert np.array_equal(out.labels[~base], shard.labels[~base])

    def test_label_flip_partial_fraction(self):
        rng = np.random.default_rng(7)
        shard = make_shard(rng)
        trojan = make_trojan(poison_fraction=0.25)
        plan = AdversaryPlan(corrupt_ids=(0,), mode="label_flip_boosted")
        out = corrupt_shard(shard, plan, trojan, 0, np.random.default_rng(0))
        n_base = int((shard.labels == 5).sum())
        assert int((out.labels != shard.labels).sum()) == int(np.floor(0.25 * n_base))


class TestBoost:
    def test_exact_scaling(self):
        pv = ParamVector(np.array([1.0, -2.0, 0.5]), (("w", (3,)),))
        up = Update(3, pv, 17)
        out = boost_update(up, 10.0)
        np.testing.assert_array_equal(out.delta.values, [10.0, -20.0, 5.0])
        assert out.agent_id == 3 and out.num_samples == 17
        np.testing.assert_array_equal(up.delta.values, [1.0, -2.0, 0.5])

    def test_rejects_nonpositive(self):
        pv = ParamVector(np.array([1.0]), (("w", (1,)),))
        with pytest.raises(ConfigError):
            boost_update(Update(0, pv, 1), -1.0)


class TestNegateLoss:
    def test_update_ascends_the_loss(self):
        # one plain step with negate_loss climbs exactly where descent falls
        rng = np.random.default_rng(0)
        spec = mlp_spec(input_shape=(6, 6), hidden=(8,), num_classes=3, dropout=0.0)
        params = init_params(spec, np.random.default_rng(1))
        x = rng.uniform(0, 1, size=(20, 6, 6))
        y = rng.integers(0, 3, size=20).astype(np.int64)
        loss0, grad = loss_and_grad(params, spec, Batch(x, y))

        up = local_train(params, spec, x, y, epochs=1, batch_size=20, lr_local=0.05,
                         negate_loss=True, rng=np.random.default_rng(2))
        np.testing.assert_allclose(up.delta.values, 0.05 * grad.values, atol=1e-12)
        climbed = ParamVector(params.values + up.delta.values, params.shape_spec)
        loss1, _ = loss_and_grad(climbed, spec, Batch(x, y))
        assert loss1 > loss0

    def test_ascent_respects_clip_radius(self):
        rng = np.random.default_rng(3)
        spec = mlp_spec(input_shape=(6, 6), hidden=(8,), num_classes=3, dropout=0.0)
        params = init_params(spec, np.random.default_rng(1))
        x = rng.uniform(0, 1, size=(30, 6, 6))
        y = rng.integers(0, 3, size=30).astype(np.int64)
        up = local_train(params, spec, x, y, epochs=5, batch_size=10, lr_local=0.5,
                         clip_radius=0.25, negate_loss=True, rng=np.random.default_rng(4))
        assert np.linalg.norm(up.delta.values) <= 0.25 + 1e-12
