import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from prefdistill.embeddings import CatalogStore, PersonaRecord, ScoreVector
from prefdistill.errors import CatalogTooSmall
from prefdistill.sampler import (
    BinPartition,
    SamplerConfig,
    allocate_draws,
    compute_bins,
    sample_group,
    sample_step,
)

from conftest import unit_rows


def check_partition(scores, part):
    scores = np.asarray(scores)
    members = np.concatenate(part.bins)
    assert sorted(members.tolist()) == list(range(scores.size))
    bounds = part.bounds()
    assert all(lo <= hi for lo, hi in bounds)
    assert all(bounds[i][1] == bounds[i + 1][0] for i in range(len(bounds) - 1))
    if part.degenerate:
        return
    last = len(bounds) - 1
    for k, rows in enumerate(part.bins):
        lo, hi = bounds[k]
        for r in rows:
            s = scores[r]
            assert lo <= s and (s < hi or (k == last and s <= hi))


class TestBins:
    def test_unit_range_cuts(self):
        part = compute_bins([0.0, 1.0, 0.3, 0.6])
        assert part.cut_points == pytest.approx((0.7, 0.9, 0.95), abs=1e-15)

    def test_hand_example(self):
        part = compute_bins(ScoreVector("p", [0.0, 0.5, 0.8, 0.96]))
        assert part.cut_points == pytest.approx((0.672, 0.864, 0.912), abs=1e-12)
        assert part.sizes == (2, 1, 0, 1)
        assert part.persona_id == "p"

    def test_boundary_goes_up(self):
        part = compute_bins([0.0, 0.7, 1.0, 0.2])
        assert 1 in part.bins[1]
        assert 2 in part.bins[3]

    def test_degenerate(self):
        part = compute_bins([0.25] * 6)
        assert part.degenerate and part.sizes == (0, 0, 0, 6)

    def test_literal_sorted_mode(self):
        part = compute_bins(np.linspace(0, 1, 101), SamplerConfig(mode="literal-sorted"))
        assert part.cut_points == pytest.approx((0.05, 0.1, 0.3), abs=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.integers(4, 200), elements=st.floats(-1, 1)))
    def test_totality(self, scores):
        check_partition(scores, compute_bins(scores))

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.integers(4, 100), elements=st.integers(-50, 50).map(float)),
           st.sampled_from([0.5, 2.0, 4.0]), st.integers(-8, 8).map(float))
    def test_affine_membership_invariance(self, scores, scale, shift):
        # small integers and power-of-two scales keep the map exact
        a = compute_bins(scores)
        b = compute_bins(scale * scores + shift)
        assert [x.tolist() for x in a.bins] == [x.tolist() for x in b.bins]


class TestAllocation:
    def test_full_bins(self):
        assert allocate_draws((100, 100, 100, 100), (1, 1, 1, 2)) == [1, 1, 1, 2]

    def test_spill_up_first(self):
        assert allocate_draws((10, 10, 0, 10), (1, 1, 1, 2)) == [1, 1, 0, 3]

    def test_spill_down_when_top_full(self):
        assert allocate_draws((10, 10, 0, 2), (1, 1, 1, 2)) == [1, 2, 0, 2]

    def test_top_deficit(self):
        assert allocate_draws((10, 10, 10, 1), (1, 1, 1, 2)) == [1, 1, 2, 1]

    def test_too_small(self):
        with pytest.raises(CatalogTooSmall):
            allocate_draws((1, 1, 1, 1), (1, 1, 1, 2))

    @given(st.lists(st.integers(0, 6), min_size=4, max_size=4))
    def test_always_sums(self, sizes):
        if sum(sizes) < 5:
            return
        d = allocate_draws(sizes, (1, 1, 1, 2))
        assert sum(d) == 5 and all(0 <= x <= s for x, s in zip(d, sizes))


class TestGroups:
    def test_plan_counts_and_distinct(self):
        part = compute_bins(np.repeat([0.0, 0.8, 0.92, 1.0], 100))
        assert part.sizes == (100, 100, 100, 100)
        rng = np.random.default_rng(0)
        for _ in range(50):
            rows = sample_group(part, SamplerConfig(), rng)
            assert len(set(rows.tolist())) == 5
            which = [next(k for k, b in enumerate(part.bins) if r in b) for r in rows]
            assert sorted(which) == [0, 1, 2, 3, 3]

    def test_deterministic(self):
        part = compute_bins(np.random.default_rng(1).random(50))
        a = sample_group(part, SamplerConfig(), np.random.default_rng(42))
        b = sample_group(part, SamplerConfig(), np.random.default_rng(42))
        assert a.tolist() == b.tolist()

    def test_coverage(self):
        # equal bins, draw frequencies follow the plan within 3 sigma
        part = BinPartition("p", 0.0, 1.0, (0.25, 0.5, 0.75), [np.arange(k * 10, k * 10 + 10) for k in range(4)])
        rng = np.random.default_rng(9)
        counts = np.zeros(4)
        trials = 4000
        for _ in range(trials):
            for r in sample_group(part, SamplerConfig(), rng):
                counts[r // 10] += 1
        total = trials * 5
        for k, want in enumerate((1, 1, 1, 2)):
            p = want / 5
            assert abs(counts[k] / total - p) <= 3 * np.sqrt(p * (1 - p) / total)
        # within a bin every member is equally likely
        assert counts.sum() == total


class TestStep:
    def setup_method(self):
        rng = np.random.default_rng(5)
        self.store = CatalogStore([f"i{k}" for k in range(60)], unit_rows(rng, 60, 6))
        self.personas = [PersonaRecord(f"p{k}", "", v) for k, v in enumerate(unit_rows(rng, 10, 6))]

    def test_size_and_shared_partitions(self):
        cfg = SamplerConfig(groups_per_step=1000)
        out = sample_step(self.personas, self.store, cfg, np.random.default_rng(0))
        assert len(out.groups) == 1000
        assert set(out.partitions) == {p.id for p, _ in out.groups}
        assert len(out.partitions) <= 10
        assert all(len(set(ids)) == 5 for _, ids in out.groups)

    def test_single_group(self):
        out = sample_step(self.personas, self.store, SamplerConfig(groups_per_step=1), np.random.default_rng(0))
        assert len(out.groups) == 1

    def test_reproducible(self):
        cfg = SamplerConfig(groups_per_step=50)
        a = sample_step(self.personas, self.store, cfg, np.random.default_rng(3))
        b = sample_step(self.personas, self.store, cfg, np.random.default_rng(3))
        assert [(p.id, ids) for p, ids in a.groups] == [(p.id, ids) for p, ids in b.groups]

    def test_uniform_ignores_bins(self):
        cfg = SamplerConfig(groups_per_step=20, policy="uniform")
        out = sample_step(self.personas, self.store, cfg, np.random.default_rng(0))
        assert out.partitions == {} and len(out.groups) == 20

    def test_groups_per_persona(self):
        cfg = SamplerConfig(groups_per_step=10, groups_per_persona=5)
        out = sample_step(self.personas, self.store, cfg, np.random.default_rng(0))
        pids = [p.id for p, _ in out.groups]
        assert len(set(pids[:5])) == 1 and len(set(pids[5:])) == 1

    def test_catalog_too_small(self):
        small = CatalogStore(list("abc"), np.eye(3))
        with pytest.raises(CatalogTooSmall):
            sample_step(self.personas[:1], small, SamplerConfig(), np.random.default_rng(0))

    @pytest.mark.parametrize("kw", [{"plan": (1, 1, 1, 1)}, {"mode": "x"}, {"cuts": (0.9, 0.7, 0.95)}, {"policy": "y"}])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            SamplerConfig(**kw).fractions
